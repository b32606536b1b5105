//! Deterministic synthetic PSG generator.
//!
//! The spectral recipes are a test fixture loosely shaped after scoring
//! conventions, not a physiological model: each stage gets its own EEG/EOG
//! band mix and EMG tone, ECG is a pulse train whose inter-beat interval
//! oscillates during respiratory events.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{rng_for, Rng};
use crate::signal::{Channel, Interval, Modality, PsgRecord, Stage, StageCode, EPOCH_SECONDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandRecipe {
    pub center_hz: f64,
    pub width_hz: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProfile {
    pub eeg: Vec<BandRecipe>,
    pub eog: Vec<BandRecipe>,
    /// EMG is broadband 30–45 Hz noise with this amplitude.
    pub emg_tone: f64,
    pub heart_rate_bpm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProfiles {
    pub wake: StageProfile,
    pub n1: StageProfile,
    pub n2: StageProfile,
    pub n3: StageProfile,
    pub rem: StageProfile,
}

impl StageProfiles {
    pub fn get(&self, s: Stage) -> &StageProfile {
        match s {
            Stage::Wake => &self.wake,
            Stage::N1 => &self.n1,
            Stage::N2 => &self.n2,
            Stage::N3 => &self.n3,
            Stage::Rem => &self.rem,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecipe {
    /// Per-epoch probability that an event occurs inside the epoch.
    pub rate: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Peak inter-beat-interval swing (seconds) during the event epoch.
    pub ibi_swing_s: f64,
    /// EMG amplitude multiplier during the event epoch.
    pub emg_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRates {
    pub eeg: f64,
    pub eog: f64,
    pub emg: f64,
    pub ecg: f64,
}

impl ChannelRates {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Eeg => self.eeg,
            Modality::Eog => self.eog,
            Modality::Emg => self.emg,
            Modality::Ecg => self.ecg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub subject_count: usize,
    pub epochs_per_subject: usize,
    pub seed: u64,
    /// Probability of staying in the current stage for the next epoch.
    pub persistence: f64,
    /// Fraction of N3 epochs scored as N4.
    pub n4_fraction: f64,
    /// Fraction of epochs scored as Movement.
    pub movement_rate: f64,
    pub noise_floor: f64,
    pub rates: ChannelRates,
    pub profiles: StageProfiles,
    pub apnea: EventRecipe,
    pub hypopnea: EventRecipe,
}

fn band(center_hz: f64, width_hz: f64, amplitude: f64) -> BandRecipe {
    BandRecipe {
        center_hz,
        width_hz,
        amplitude,
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subject_count: 4,
            epochs_per_subject: 200,
            seed: 0,
            persistence: 0.85,
            n4_fraction: 0.3,
            movement_rate: 0.02,
            noise_floor: 0.1,
            rates: ChannelRates {
                eeg: 125.0,
                eog: 50.0,
                emg: 125.0,
                ecg: 125.0,
            },
            profiles: StageProfiles {
                wake: StageProfile {
                    eeg: vec![band(10.0, 4.0, 1.0), band(20.0, 6.0, 0.3)],
                    eog: vec![band(1.0, 1.0, 1.0)],
                    emg_tone: 1.0,
                    heart_rate_bpm: 75.0,
                },
                n1: StageProfile {
                    eeg: vec![band(6.0, 4.0, 0.8)],
                    eog: vec![band(0.5, 0.4, 0.8)],
                    emg_tone: 0.6,
                    heart_rate_bpm: 68.0,
                },
                n2: StageProfile {
                    eeg: vec![band(5.0, 2.0, 0.6), band(13.0, 2.0, 0.6)],
                    eog: vec![band(0.8, 1.0, 0.2)],
                    emg_tone: 0.4,
                    heart_rate_bpm: 62.0,
                },
                n3: StageProfile {
                    eeg: vec![band(1.25, 1.5, 2.0)],
                    eog: vec![band(1.0, 1.0, 0.4)],
                    emg_tone: 0.3,
                    heart_rate_bpm: 58.0,
                },
                rem: StageProfile {
                    eeg: vec![band(6.0, 4.0, 0.6), band(3.0, 2.0, 0.3)],
                    eog: vec![band(1.25, 1.5, 2.0)],
                    emg_tone: 0.05,
                    heart_rate_bpm: 70.0,
                },
            },
            apnea: EventRecipe {
                rate: 0.15,
                min_duration_s: 10.0,
                max_duration_s: 25.0,
                ibi_swing_s: 0.15,
                emg_gain: 1.5,
            },
            hypopnea: EventRecipe {
                rate: 0.2,
                min_duration_s: 10.0,
                max_duration_s: 25.0,
                ibi_swing_s: 0.05,
                emg_gain: 1.2,
            },
        }
    }
}

/// Channel layout of every generated record: two EEG, two EOG, one EMG, one ECG.
pub const CHANNELS: [(&str, Modality); 6] = [
    ("C4-A1", Modality::Eeg),
    ("C3-A2", Modality::Eeg),
    ("E1", Modality::Eog),
    ("E2", Modality::Eog),
    ("CHIN", Modality::Emg),
    ("ECG", Modality::Ecg),
];

const SINES_PER_BAND: usize = 8;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.subject_count > 0 && self.epochs_per_subject > 0, "synthetic data needs subjects and epochs");
        for (name, p) in [
            ("persistence", self.persistence),
            ("n4_fraction", self.n4_fraction),
            ("movement_rate", self.movement_rate),
            ("apnea.rate", self.apnea.rate),
            ("hypopnea.rate", self.hypopnea.rate),
        ] {
            ensure!((0.0..=1.0).contains(&p), "{name} = {p} must lie in [0, 1]");
        }
        for m in Modality::ALL {
            ensure!(self.rates.get(m) > 0.0, "{m} rate must be positive");
        }
        for s in Stage::ALL {
            let p = self.profiles.get(s);
            ensure!(
                p.emg_tone > 0.0 && p.heart_rate_bpm > 0.0,
                "stage {} needs positive EMG tone and heart rate",
                s.as_str()
            );
            for b in p.eeg.iter().chain(&p.eog) {
                ensure!(b.amplitude > 0.0 && b.width_hz >= 0.0, "band amplitudes must be positive");
            }
        }
        for ev in [&self.apnea, &self.hypopnea] {
            ensure!(
                ev.min_duration_s > 0.0 && ev.min_duration_s <= ev.max_duration_s && ev.max_duration_s <= EPOCH_SECONDS,
                "event durations must satisfy 0 < min <= max <= {EPOCH_SECONDS}"
            );
        }
        ensure!(self.noise_floor >= 0.0, "noise floor must be non-negative");
        Ok(())
    }
}

fn next_stage(cur: Stage, persistence: f64, rng: &mut Rng) -> Stage {
    if rng.random::<f64>() < persistence {
        return cur;
    }
    let table: &[(Stage, f64)] = match cur {
        Stage::Wake => &[(Stage::N1, 0.7), (Stage::N2, 0.2), (Stage::Rem, 0.1)],
        Stage::N1 => &[(Stage::Wake, 0.3), (Stage::N2, 0.6), (Stage::Rem, 0.1)],
        Stage::N2 => &[(Stage::N1, 0.2), (Stage::N3, 0.5), (Stage::Rem, 0.2), (Stage::Wake, 0.1)],
        Stage::N3 => &[(Stage::N2, 0.8), (Stage::N1, 0.1), (Stage::Wake, 0.1)],
        Stage::Rem => &[(Stage::N2, 0.5), (Stage::N1, 0.3), (Stage::Wake, 0.2)],
    };
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(s, p) in table {
        acc += p;
        if u < acc {
            return s;
        }
    }
    table[table.len() - 1].0
}

/// Sum of random-phase sines spread over the band, scaled so the band's RMS is
/// `amplitude / √2` (that of a unit-amplitude sine times `amplitude`).
fn add_band(out: &mut [f64], rate: f64, b: &BandRecipe, rng: &mut Rng) {
    let lo = (b.center_hz - b.width_hz / 2.0).max(0.05);
    let hi = (b.center_hz + b.width_hz / 2.0).min(rate / 2.0 * 0.95);
    let amp = b.amplitude / (SINES_PER_BAND as f64).sqrt();
    for _ in 0..SINES_PER_BAND {
        let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let phase = rng.random_range(0.0..2.0 * PI);
        let w = 2.0 * PI * f / rate;
        // Rotate a phasor instead of calling sin per sample.
        let (sw, cw) = w.sin_cos();
        let (mut s, mut c) = phase.sin_cos();
        for v in out.iter_mut() {
            *v += amp * s;
            (s, c) = (s * cw + c * sw, c * cw - s * sw);
        }
    }
}

fn add_noise(out: &mut [f64], std: f64, rng: &mut Rng) {
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("valid std");
        for v in out.iter_mut() {
            *v += n.sample(rng);
        }
    }
}

struct EpochPlan {
    stage: Stage,
    code: StageCode,
    ibi_swing: f64,
    emg_gain: f64,
}

/// Generate one record per subject. Fully determined by the `SynthSpec` and seed.
pub fn generate(spec: &SynthSpec) -> Result<Vec<PsgRecord>> {
    spec.validate()?;
    (0..spec.subject_count).map(|s| generate_subject(spec, s)).collect()
}

fn generate_subject(spec: &SynthSpec, subject: usize) -> Result<PsgRecord> {
    let mut rng = rng_for(spec.seed, "synth-subject", &[subject as u64]);
    let n = spec.epochs_per_subject;
    let mut plans = Vec::with_capacity(n);
    let mut apnea_events = Vec::new();
    let mut hypopnea_events = Vec::new();
    let mut stage = Stage::Wake;
    for e in 0..n {
        if e > 0 {
            stage = next_stage(stage, spec.persistence, &mut rng);
        }
        let code = if rng.random::<f64>() < spec.movement_rate {
            StageCode::Movement
        } else {
            match stage {
                Stage::Wake => StageCode::Wake,
                Stage::N1 => StageCode::N1,
                Stage::N2 => StageCode::N2,
                Stage::N3 if rng.random::<f64>() < spec.n4_fraction => StageCode::N4,
                Stage::N3 => StageCode::N3,
                Stage::Rem => StageCode::Rem,
            }
        };
        let mut ibi_swing = 0.0;
        let mut emg_gain = 1.0;
        let epoch_start = e as f64 * EPOCH_SECONDS;
        for (recipe, events) in [(&spec.apnea, &mut apnea_events), (&spec.hypopnea, &mut hypopnea_events)] {
            if rng.random::<f64>() < recipe.rate {
                let dur = if recipe.max_duration_s > recipe.min_duration_s {
                    rng.random_range(recipe.min_duration_s..recipe.max_duration_s)
                } else {
                    recipe.min_duration_s
                };
                let start = epoch_start + rng.random::<f64>() * (EPOCH_SECONDS - dur);
                events.push(Interval::new(start, start + dur));
                ibi_swing += recipe.ibi_swing_s;
                emg_gain *= recipe.emg_gain;
            }
        }
        plans.push(EpochPlan {
            stage,
            code,
            ibi_swing,
            emg_gain,
        });
    }

    let channels = CHANNELS
        .iter()
        .enumerate()
        .map(|(ci, &(name, modality))| {
            let rate = spec.rates.get(modality);
            let per_epoch = (EPOCH_SECONDS * rate).round() as usize;
            let mut samples = vec![0.0f64; per_epoch * n];
            let mut crng = rng_for(spec.seed, "synth-channel", &[subject as u64, ci as u64]);
            match modality {
                Modality::Ecg => ecg_channel(&mut samples, rate, &plans, spec, &mut crng),
                _ => {
                    for (e, plan) in plans.iter().enumerate() {
                        let seg = &mut samples[e * per_epoch..(e + 1) * per_epoch];
                        let profile = spec.profiles.get(plan.stage);
                        match modality {
                            Modality::Eeg => profile.eeg.iter().for_each(|b| add_band(seg, rate, b, &mut crng)),
                            Modality::Eog => profile.eog.iter().for_each(|b| add_band(seg, rate, b, &mut crng)),
                            Modality::Emg => {
                                let mut tone = profile.emg_tone * plan.emg_gain;
                                if plan.code == StageCode::Movement {
                                    tone *= 3.0;
                                }
                                let b = band(37.5, 15.0, tone);
                                add_band(seg, rate, &b, &mut crng);
                                add_noise(seg, tone * 0.3, &mut crng);
                            }
                            Modality::Ecg => unreachable!(),
                        }
                        add_noise(seg, spec.noise_floor, &mut crng);
                    }
                }
            }
            Channel {
                name: name.to_string(),
                modality,
                rate_hz: rate,
                samples: samples.iter().map(|&v| v as f32).collect(),
            }
        })
        .collect();

    Ok(PsgRecord {
        subject_id: format!("subj{subject:03}"),
        channels,
        stages: plans.iter().map(|p| p.code).collect(),
        apnea_events,
        hypopnea_events,
    })
}

/// Gaussian QRS pulses placed at beat times. The inter-beat interval follows
/// the stage heart rate with small jitter, plus a 10-s oscillation of
/// amplitude `ibi_swing` inside event epochs.
fn ecg_channel(out: &mut [f64], rate: f64, plans: &[EpochPlan], spec: &SynthSpec, rng: &mut Rng) {
    let total_s = plans.len() as f64 * EPOCH_SECONDS;
    let jitter = Normal::new(0.0, 0.02).expect("valid std");
    let width = 0.015 * rate;
    let mut beats = Vec::new();
    let mut t = rng.random_range(0.0..0.5);
    while t < total_s {
        beats.push(t);
        let e = ((t / EPOCH_SECONDS) as usize).min(plans.len() - 1);
        let plan = &plans[e];
        let base = 60.0 / spec.profiles.get(plan.stage).heart_rate_bpm;
        let swing = plan.ibi_swing * (2.0 * PI * t / 10.0).sin();
        t += (base + swing + jitter.sample(rng)).max(0.3);
    }
    let half = (4.0 * width).ceil() as isize;
    for &b in &beats {
        let center = b * rate;
        let c = center.round() as isize;
        for k in (c - half)..=(c + half) {
            if k >= 0 && (k as usize) < out.len() {
                let d = k as f64 - center;
                out[k as usize] += (-0.5 * (d / width) * (d / width)).exp();
            }
        }
    }
    add_noise(out, spec.noise_floor * 0.5, rng);
}
