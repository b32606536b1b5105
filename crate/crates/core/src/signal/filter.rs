//! Digital Butterworth design (analog prototype → band transform → bilinear)
//! and zero-phase second-order-section filtering.

use rustfft::num_complex::Complex64;

use crate::error::{ensure, Error, Result};

/// Second-order sections, each `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Sos = Vec<[f64; 6]>;

/// Design an order-`order` Butterworth filter at sample rate `fs`.
///
/// `high_hz >= fs / 2` yields a highpass at `low_hz`; otherwise a bandpass.
pub fn butterworth_sos(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    let nyq = fs / 2.0;
    ensure!(order > 0, "filter order must be positive");
    ensure!(
        low_hz > 0.0 && low_hz < high_hz && high_hz <= nyq,
        "band ({low_hz}, {high_hz}) Hz is outside (0, {nyq}]"
    );
    // Analog prototype poles on the left half of the unit circle.
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();
    // Pre-warp with the bilinear constant of a unit-rate design (fs = 2).
    let warp = |f: f64| 4.0 * (std::f64::consts::PI * (f / nyq) / 2.0).tan();
    let (zeros, poles, gain) = if high_hz >= nyq {
        let wo = warp(low_hz);
        let poles: Vec<Complex64> = proto.iter().map(|p| wo / p).collect();
        let gain = 1.0 / proto.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * -p).re;
        (vec![Complex64::new(0.0, 0.0); order], poles, gain)
    } else {
        let (w1, w2) = (warp(low_hz), warp(high_hz));
        let bw = w2 - w1;
        let wo2 = w1 * w2;
        let mut poles = Vec::with_capacity(2 * order);
        for p in &proto {
            let pl = p * (bw / 2.0);
            let root = (pl * pl - wo2).sqrt();
            poles.push(pl + root);
            poles.push(pl - root);
        }
        (vec![Complex64::new(0.0, 0.0); order], poles, bw.powi(order as i32))
    };
    let (zeros, poles, gain) = bilinear(zeros, poles, gain, 2.0);
    Ok(to_sos(&zeros, &poles, gain))
}

fn bilinear(
    zeros: Vec<Complex64>,
    poles: Vec<Complex64>,
    gain: f64,
    fs: f64,
) -> (Vec<Complex64>, Vec<Complex64>, f64) {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let map = |s: &Complex64| (fs2 + s) / (fs2 - s);
    let mut zd: Vec<Complex64> = zeros.iter().map(map).collect();
    let pd: Vec<Complex64> = poles.iter().map(map).collect();
    zd.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), poles.len() - zeros.len()));
    let num = zeros.iter().fold(Complex64::new(1.0, 0.0), |a, z| a * (fs2 - z));
    let den = poles.iter().fold(Complex64::new(1.0, 0.0), |a, p| a * (fs2 - p));
    (zd, pd, gain * (num / den).re)
}

/// Split roots into quadratic factors `[1, c1, c2]`: conjugate pairs first,
/// then real roots two at a time.
fn quadratics(roots: &[Complex64]) -> Vec<[f64; 3]> {
    const TOL: f64 = 1e-10;
    let mut out = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for r in roots {
        if r.im > TOL {
            out.push([1.0, -2.0 * r.re, r.norm_sqr()]);
        } else if r.im.abs() <= TOL {
            reals.push(r.re);
        }
    }
    reals.sort_by(|a, b| a.total_cmp(b));
    for pair in reals.chunks(2) {
        match pair {
            [a, b] => out.push([1.0, -(a + b), a * b]),
            [a] => out.push([1.0, -a, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

fn to_sos(zeros: &[Complex64], poles: &[Complex64], gain: f64) -> Sos {
    let mut den = quadratics(poles);
    // Poles nearest the unit circle last, where their sections see the
    // smallest signal after the better-damped ones.
    den.sort_by(|a, b| a[2].total_cmp(&b[2]));
    // Zeros here are all at ±1; mix one of each per section when possible so
    // every section has a moderate gain.
    let mut plus: Vec<Complex64> = Vec::new();
    let mut minus: Vec<Complex64> = Vec::new();
    let mut other: Vec<Complex64> = Vec::new();
    for z in zeros {
        if (z - Complex64::new(1.0, 0.0)).norm() < 1e-9 {
            plus.push(*z);
        } else if (z + Complex64::new(1.0, 0.0)).norm() < 1e-9 {
            minus.push(*z);
        } else {
            other.push(*z);
        }
    }
    let mut ordered = Vec::with_capacity(zeros.len());
    while !plus.is_empty() || !minus.is_empty() {
        if let Some(z) = plus.pop() {
            ordered.push(z);
        }
        if let Some(z) = minus.pop() {
            ordered.push(z);
        }
    }
    let mut num = quadratics(&other);
    num.extend(quadratics(&ordered));
    while num.len() < den.len() {
        num.push([1.0, 0.0, 0.0]);
    }
    den.iter()
        .zip(&num)
        .enumerate()
        .map(|(i, (a, b))| {
            let k = if i == 0 { gain } else { 1.0 };
            [k * b[0], k * b[1], k * b[2], a[0], a[1], a[2]]
        })
        .collect()
}

/// Steady-state initial conditions of the cascade for a unit step input.
fn sos_zi(sos: &Sos) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let [b0, b1, b2, _, a1, a2] = *s;
            let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
            // Solve [[1 + a1, -1], [a2, 1]] · zi = [r0, r1].
            let det = 1.0 + a1 + a2;
            let z0 = (r0 + r1) / det;
            let z1 = r1 - a2 * z0;
            let zi = [scale * z0, scale * z1];
            scale *= (b0 + b1 + b2) / det;
            zi
        })
        .collect()
}

fn sosfilt(sos: &Sos, x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z) in sos.iter().zip(zi) {
        let [b0, b1, b2, _, a1, a2] = *s;
        let (mut z0, mut z1) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z0;
            z0 = b1 * xin - a1 * y + z1;
            z1 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd-extension padding and steady-state
/// initial conditions; output has zero phase and the input's length.
pub fn sosfiltfilt(sos: &Sos, x: &[f64]) -> Result<Vec<f64>> {
    let trivial = sos.iter().filter(|s| s[2] == 0.0).count().min(sos.iter().filter(|s| s[5] == 0.0).count());
    let pad = 3 * (2 * sos.len() + 1 - trivial);
    ensure!(
        x.len() > pad,
        "signal of {} samples is too short for zero-phase filtering (needs > {pad})",
        x.len()
    );
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let zi = sos_zi(sos);
    let x0 = ext[0];
    sosfilt(sos, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    sosfilt(sos, &mut ext, &zi, y0);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Zero-phase 4th-order Butterworth band filter for a 100 Hz signal. An upper
/// edge at Nyquist (50 Hz) makes it a highpass.
pub fn bandpass(signal: &[f64], low_hz: f64, high_hz: f64) -> Result<Vec<f64>> {
    bandpass_order(signal, low_hz, high_hz, 4)
}

pub(crate) fn bandpass_order(signal: &[f64], low_hz: f64, high_hz: f64, order: usize) -> Result<Vec<f64>> {
    let sos = butterworth_sos(order, low_hz, high_hz, super::TARGET_HZ)
        .map_err(|e| Error::invalid(format!("bandpass: {e}")))?;
    sosfiltfilt(&sos, signal)
}

/// Magnitude response of a cascade at `f_hz` for sample rate `fs`.
pub fn sos_gain(sos: &Sos, f_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f_hz / fs;
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    sos.iter()
        .map(|s| ((s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2)).norm())
        .product()
}
