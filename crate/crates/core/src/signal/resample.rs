use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure, Result};

/// Fourier-method resampling: truncate or zero-pad the spectrum to the new
/// length. Output length is `round(len · to_hz / from_hz)`. An even-length
/// Nyquist bin is folded on downsampling and split on upsampling so the
/// result stays real.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    ensure!(!signal.is_empty(), "cannot resample an empty signal");
    ensure!(
        from_hz > 0.0 && to_hz > 0.0 && from_hz.is_finite() && to_hz.is_finite(),
        "resampling rates must be positive, got {from_hz} -> {to_hz}"
    );
    let n = signal.len();
    let m = (n as f64 * to_hz / from_hz).round() as usize;
    ensure!(m > 0, "resampling {n} samples to {to_hz} Hz leaves nothing");
    if m == n {
        return Ok(signal.to_vec());
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spec);

    let k = n.min(m);
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for i in 0..=k / 2 {
        out[i] = spec[i];
    }
    if k % 2 == 0 {
        let nyq = k / 2;
        if m < n {
            out[nyq] = Complex64::new(2.0 * spec[nyq].re, 0.0);
        } else {
            out[nyq] = spec[nyq] * 0.5;
        }
    }
    // Mirror to a Hermitian spectrum.
    for i in 1..=k / 2 {
        if m - i != i {
            out[m - i] = out[i].conj();
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    Ok(out.iter().map(|c| c.re * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> Vec<f64> {
        (0..10)
            .map(|i| (i as f64 * 0.9).sin() + 0.05 * (i * i) as f64)
            .collect()
    }

    // Reference outputs from an independent Fourier resampler.
    #[test]
    fn matches_reference_resampler() {
        let cases: [(usize, &[f64]); 4] = [
            (
                8,
                &[
                    2.91764981964914238e-01,
                    1.09065489192935905e+00,
                    8.82839694668649866e-01,
                    7.28159657941963467e-01,
                    -1.92950996300112372e-02,
                    1.66776413346849139e+00,
                    2.89123310411394030e+00,
                    5.28456739346442372e+00,
                ],
            ),
            (
                13,
                &[
                    0.0,
                    2.54254467456800304e-01,
                    1.47196658499636435e+00,
                    9.47942072727351093e-01,
                    8.70348917962649571e-01,
                    4.53810116810442810e-01,
                    2.24444048467554919e-01,
                    3.85309289187615311e-01,
                    1.28936734299571709e+00,
                    2.40669707524735177e+00,
                    3.21113593699532229e+00,
                    5.26962604320436245e+00,
                    4.04384233557128070e+00,
                ],
            ),
            (
                7,
                &[
                    8.82340406425757062e-01,
                    7.76676490129114550e-01,
                    1.12267683324568046e+00,
                    1.21047555661508432e-01,
                    8.62526715157228674e-01,
                    2.53127783857508026e+00,
                    4.91893182398714135e+00,
                ],
            ),
            (
                16,
                &[
                    0.0,
                    -9.14613260545355661e-02,
                    1.29696388918952077e+00,
                    1.28562435577992762e+00,
                    8.82839694668649866e-01,
                    8.62499245037179230e-01,
                    5.21850660681801748e-01,
                    2.29971639835941488e-01,
                    2.72469882334902991e-01,
                    5.48524122265508396e-01,
                    1.46145513620832967e+00,
                    2.36501395370952006e+00,
                    2.89123310411394030e+00,
                    4.37171399167699004e+00,
                    5.49087639072458522e+00,
                    3.24580277567119957e+00,
                ],
            ),
        ];
        let x = input();
        for (m, want) in cases {
            let y = resample(&x, 10.0, m as f64).unwrap();
            assert_eq!(y.len(), m);
            for (a, b) in y.iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "m={m}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn length_and_identity() {
        let x: Vec<f64> = (0..12000).map(|i| (i as f64 * 0.01).sin()).collect();
        assert_eq!(resample(&x, 200.0, 100.0).unwrap().len(), 6000);
        assert_eq!(resample(&x, 125.0, 100.0).unwrap().len(), 9600);
        assert_eq!(resample(&x, 100.0, 100.0).unwrap(), x);
        assert!(resample(&[], 100.0, 50.0).is_err());
        assert!(resample(&x, 0.0, 50.0).is_err());
    }

    /// Amplitude of the spectrum bin nearest `f_hz`, normalised so a unit sine reads 1.
    fn tone_amplitude(x: &[f64], fs: f64, f_hz: f64) -> f64 {
        let n = x.len();
        let bin = (f_hz * n as f64 / fs).round() as usize;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let ph = -2.0 * std::f64::consts::PI * (bin * t) as f64 / n as f64;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        2.0 * (re * re + im * im).sqrt() / n as f64
    }

    #[test]
    fn preserves_tone_amplitude() {
        let x: Vec<f64> = (0..2000)
            .map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / 200.0).sin())
            .collect();
        let y = resample(&x, 200.0, 100.0).unwrap();
        let (a_in, a_out) = (tone_amplitude(&x, 200.0, 5.0), tone_amplitude(&y, 100.0, 5.0));
        assert!((a_out / a_in - 1.0).abs() < 0.01);
    }
}
