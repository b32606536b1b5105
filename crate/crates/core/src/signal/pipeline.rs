use serde::{Deserialize, Serialize};

use super::filter::bandpass_order;
use super::resample::resample;
use super::{
    Channel, ChannelInfo, EpochSample, EpochSet, Modality, PsgRecord, StageCode, EPOCH_SAMPLES, EPOCH_SECONDS,
    TARGET_HZ,
};
use crate::autograd::Mat;
use crate::error::{ensure, Result};

/// How an annotated event interval turns into a per-epoch binary label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventRule {
    /// Any positive-length overlap.
    #[default]
    AnyOverlap,
    /// Overlap strictly longer than half the epoch.
    Majority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub filter_order: usize,
    pub eeg_band: (f64, f64),
    pub eog_band: (f64, f64),
    pub emg_band: (f64, f64),
    pub ecg_band: (f64, f64),
    pub event_rule: EventRule,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            filter_order: 4,
            eeg_band: (0.5, 40.0),
            eog_band: (0.5, 40.0),
            emg_band: (25.0, 50.0),
            ecg_band: (3.0, 30.0),
            event_rule: EventRule::AnyOverlap,
        }
    }
}

impl PreprocessConfig {
    pub fn band(&self, m: Modality) -> (f64, f64) {
        match m {
            Modality::Eeg => self.eeg_band,
            Modality::Eog => self.eog_band,
            Modality::Emg => self.emg_band,
            Modality::Ecg => self.ecg_band,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(x − median) / max(IQR, 1e-8)`.
pub fn robust_scale(signal: &[f64]) -> Result<Vec<f64>> {
    ensure!(!signal.is_empty(), "cannot scale an empty signal");
    let mut sorted = signal.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let denom = iqr.max(1e-8);
    Ok(signal.iter().map(|v| (v - median) / denom).collect())
}

/// Cut a 100 Hz record into consecutive 30-s epochs and attach labels.
/// A trailing partial segment is dropped.
pub fn segment_and_label(record: &PsgRecord, rule: EventRule) -> Result<EpochSet> {
    record.validate()?;
    for c in &record.channels {
        ensure!(
            c.rate_hz == TARGET_HZ,
            "channel {} is at {} Hz; segmenting needs {TARGET_HZ} Hz",
            c.name,
            c.rate_hz
        );
    }
    let min_len = record.channels.iter().map(|c| c.samples.len()).min().unwrap_or(0);
    let count = min_len / EPOCH_SAMPLES;
    if min_len % EPOCH_SAMPLES != 0 {
        log::info!(
            "{}: discarding trailing {:.2} s partial segment",
            record.subject_id,
            (min_len % EPOCH_SAMPLES) as f64 / TARGET_HZ
        );
    }
    let labelled = |events: &[super::Interval], start: f64| {
        let end = start + EPOCH_SECONDS;
        events.iter().any(|ev| {
            let ov = ev.overlap(start, end);
            match rule {
                EventRule::AnyOverlap => ov > 0.0,
                EventRule::Majority => ov > EPOCH_SECONDS / 2.0,
            }
        })
    };
    let epochs = (0..count)
        .map(|i| {
            let start = i as f64 * EPOCH_SECONDS;
            EpochSample {
                epoch_index: i,
                signals: record
                    .channels
                    .iter()
                    .map(|c| c.samples[i * EPOCH_SAMPLES..(i + 1) * EPOCH_SAMPLES].to_vec())
                    .collect(),
                stage: record.stages.get(i).copied().unwrap_or(StageCode::Unknown).to_stage(),
                apnea: labelled(&record.apnea_events, start),
                hypopnea: labelled(&record.hypopnea_events, start),
            }
        })
        .collect();
    Ok(EpochSet {
        subject_id: record.subject_id.clone(),
        channels: record
            .channels
            .iter()
            .map(|c| ChannelInfo {
                name: c.name.clone(),
                modality: c.modality,
            })
            .collect(),
        epochs,
    })
}

/// Resample → robust scale → band filter every channel, then segment.
pub fn preprocess_record(record: &PsgRecord, cfg: &PreprocessConfig) -> Result<EpochSet> {
    record.validate()?;
    let channels = record
        .channels
        .iter()
        .map(|c| {
            let raw: Vec<f64> = c.samples.iter().map(|&v| v as f64).collect();
            let x = resample(&raw, c.rate_hz, TARGET_HZ)?;
            let x = robust_scale(&x)?;
            let (lo, hi) = cfg.band(c.modality);
            let x = bandpass_order(&x, lo, hi, cfg.filter_order)?;
            Ok(Channel {
                name: c.name.clone(),
                modality: c.modality,
                rate_hz: TARGET_HZ,
                samples: x.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Resampled lengths can differ by one sample across rates; trim to the shortest.
    let min_len = channels.iter().map(|c| c.samples.len()).min().unwrap_or(0);
    let channels = channels
        .into_iter()
        .map(|mut c| {
            c.samples.truncate(min_len);
            c
        })
        .collect();
    let resampled = PsgRecord {
        subject_id: record.subject_id.clone(),
        channels,
        stages: record.stages.clone(),
        apnea_events: record.apnea_events.clone(),
        hypopnea_events: record.hypopnea_events.clone(),
    };
    segment_and_label(&resampled, cfg.event_rule)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// One frame per row.
    pub frames: Mat,
    pub frame_size_s: f64,
    pub stride_s: f64,
}

/// Frame length in samples and frame start offsets for a 100 Hz signal of
/// `len` samples. Stride is `frame_size_s · (1 − overlap)`.
pub fn frame_layout(len: usize, frame_size_s: f64, overlap: f64) -> Result<(usize, Vec<usize>)> {
    let duration = len as f64 / TARGET_HZ;
    ensure!(
        frame_size_s > 0.0 && frame_size_s <= duration + 1e-9,
        "frame size {frame_size_s} s must lie in (0, {duration}]"
    );
    ensure!((0.0..1.0).contains(&overlap), "overlap {overlap} must lie in [0, 1)");
    let stride_s = frame_size_s * (1.0 - overlap);
    ensure!(
        stride_s * TARGET_HZ >= 1.0 - 1e-9,
        "stride {stride_s} s is shorter than one sample"
    );
    let frame_len = (frame_size_s * TARGET_HZ).round() as usize;
    let count = ((duration - frame_size_s) / stride_s + 1e-9).floor() as usize + 1;
    let starts = (0..count)
        .map(|i| ((i as f64 * stride_s * TARGET_HZ).round() as usize).min(len - frame_len))
        .collect();
    Ok((frame_len, starts))
}

/// Split a 100 Hz epoch signal into overlapping frames.
pub fn frame_tokenize(signal: &[f32], frame_size_s: f64, overlap: f64) -> Result<FrameSequence> {
    let (frame_len, starts) = frame_layout(signal.len(), frame_size_s, overlap)?;
    let frames = Mat::from_shape_fn((starts.len(), frame_len), |(i, j)| signal[starts[i] + j] as f64);
    Ok(FrameSequence {
        frames,
        frame_size_s,
        stride_s: frame_size_s * (1.0 - overlap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{bandpass, Interval, Stage};
    use proptest::prelude::*;

    #[test]
    fn robust_scale_examples() {
        assert_eq!(robust_scale(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(
            robust_scale(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            vec![-1.0, -0.5, 0.0, 0.5, 1.0]
        );
        assert!(robust_scale(&[]).is_err());
    }

    proptest! {
        #[test]
        fn robust_scale_is_affine_invariant(
            x in prop::collection::vec(-100.0f64..100.0, 2..50),
            a in 0.1f64..10.0,
            b in -50.0f64..50.0,
        ) {
            let base = robust_scale(&x).unwrap();
            let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let scaled = robust_scale(&moved).unwrap();
            let spread = {
                let mut s = x.clone();
                s.sort_by(|p, q| p.total_cmp(q));
                quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
            };
            prop_assume!(spread > 1e-3);
            for (p, q) in base.iter().zip(&scaled) {
                prop_assert!((p - q).abs() < 1e-8 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn frame_count_matches_start_enumeration(
            frame_ds in 5usize..300,
            overlap_pct in 0usize..95,
        ) {
            let frame = frame_ds as f64 / 10.0;
            let overlap = overlap_pct as f64 / 100.0;
            let stride = frame * (1.0 - overlap);
            prop_assume!(stride * TARGET_HZ >= 1.0);
            let (frame_len, starts) = frame_layout(EPOCH_SAMPLES, frame, overlap).unwrap();
            // Enumerate start times directly.
            let mut expected = 0usize;
            while (expected as f64) * stride + frame <= EPOCH_SECONDS + 1e-9 {
                expected += 1;
            }
            prop_assert_eq!(starts.len(), expected);
            prop_assert_eq!(frame_len, (frame * TARGET_HZ).round() as usize);
            prop_assert!(starts.iter().all(|&s| s + frame_len <= EPOCH_SAMPLES));
        }

        #[test]
        fn bandpass_is_linear(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = crate::rng::rng_for(seed, "lin", &[]);
            let x = crate::nn::params::uniform(1, 400, 1.0, &mut rng).into_raw_vec_and_offset().0;
            let y = crate::nn::params::uniform(1, 400, 1.0, &mut rng).into_raw_vec_and_offset().0;
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let fx = bandpass(&x, 0.5, 40.0).unwrap();
            let fy = bandpass(&y, 0.5, 40.0).unwrap();
            let fm = bandpass(&mix, 0.5, 40.0).unwrap();
            for i in 0..400 {
                prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_examples() {
        let sig: Vec<f32> = (0..EPOCH_SAMPLES).map(|i| i as f32).collect();
        let f = frame_tokenize(&sig, 3.0, 0.75).unwrap();
        assert_eq!(f.frames.dim(), (37, 300));
        assert_eq!(f.stride_s, 0.75);
        assert_eq!(f.frames[[1, 0]], 75.0);
        assert_eq!(f.frames[[36, 0]], 2700.0);
        let one = frame_tokenize(&sig, 30.0, 0.0).unwrap();
        assert_eq!(one.frames.dim(), (1, 3000));
        assert_eq!(one.frames.row(0).to_vec(), sig.iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert_eq!(frame_tokenize(&sig, 3.0, 0.0).unwrap().frames.nrows(), 10);
        assert!(frame_tokenize(&sig, 0.02, 0.9).is_err());
        assert!(frame_tokenize(&sig, 31.0, 0.0).is_err());
    }

    fn flat_record(seconds: usize, stages: Vec<StageCode>) -> PsgRecord {
        PsgRecord {
            subject_id: "s1".into(),
            channels: vec![Channel {
                name: "eeg1".into(),
                modality: Modality::Eeg,
                rate_hz: TARGET_HZ,
                samples: vec![0.0; seconds * 100],
            }],
            stages,
            apnea_events: vec![],
            hypopnea_events: vec![],
        }
    }

    #[test]
    fn event_overlap_labels() {
        let mut rec = flat_record(120, vec![StageCode::N2; 4]);
        rec.apnea_events.push(Interval::new(35.0, 50.0));
        let set = segment_and_label(&rec, EventRule::AnyOverlap).unwrap();
        let apnea: Vec<bool> = set.epochs.iter().map(|e| e.apnea).collect();
        assert_eq!(apnea, vec![false, true, false, false]);
        assert!(set.epochs.iter().all(|e| !e.hypopnea));
        // Touching an epoch boundary is not an overlap.
        rec.apnea_events = vec![Interval::new(20.0, 30.0)];
        let set = segment_and_label(&rec, EventRule::AnyOverlap).unwrap();
        assert_eq!(set.epochs.iter().filter(|e| e.apnea).count(), 1);
        // 15 s out of 30 is not a majority.
        rec.apnea_events = vec![Interval::new(35.0, 50.0), Interval::new(60.0, 80.0)];
        let set = segment_and_label(&rec, EventRule::Majority).unwrap();
        let apnea: Vec<bool> = set.epochs.iter().map(|e| e.apnea).collect();
        assert_eq!(apnea, vec![false, false, true, false]);
    }

    #[test]
    fn stage_labels_and_partial_tail() {
        let rec = flat_record(
            135,
            vec![StageCode::Wake, StageCode::N4, StageCode::Movement, StageCode::Rem],
        );
        let set = segment_and_label(&rec, EventRule::AnyOverlap).unwrap();
        assert_eq!(set.epochs.len(), 4);
        let labels: Vec<_> = set.epochs.iter().map(|e| e.stage).collect();
        assert_eq!(labels, vec![Some(Stage::Wake), Some(Stage::N3), None, Some(Stage::Rem)]);
        assert!(set.epochs.iter().all(|e| e.signals[0].len() == EPOCH_SAMPLES));
        let labelled = labels.iter().filter(|l| l.is_some()).count();
        assert_eq!(labelled + labels.iter().filter(|l| l.is_none()).count(), 4);
    }

    #[test]
    fn segmenting_requires_target_rate() {
        let mut rec = flat_record(60, vec![]);
        rec.channels[0].rate_hz = 50.0;
        rec.channels[0].samples.truncate(3000);
        assert!(segment_and_label(&rec, EventRule::AnyOverlap).is_err());
    }

    #[test]
    fn preprocess_is_deterministic_and_shaped() {
        let mut rng = crate::rng::rng_for(9, "pp", &[]);
        let noise = |n: usize, rng: &mut crate::rng::Rng| {
            crate::nn::params::uniform(1, n, 1.0, rng)
                .iter()
                .map(|&v| v as f32)
                .collect::<Vec<f32>>()
        };
        let rec = PsgRecord {
            subject_id: "s".into(),
            channels: vec![
                Channel {
                    name: "eeg1".into(),
                    modality: Modality::Eeg,
                    rate_hz: 125.0,
                    samples: noise(125 * 95, &mut rng),
                },
                Channel {
                    name: "eog1".into(),
                    modality: Modality::Eog,
                    rate_hz: 50.0,
                    samples: noise(50 * 95, &mut rng),
                },
            ],
            stages: vec![StageCode::N1; 3],
            apnea_events: vec![],
            hypopnea_events: vec![],
        };
        let a = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        let b = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epochs.len(), 3);
        for e in &a.epochs {
            assert!(e.signals.iter().all(|s| s.len() == EPOCH_SAMPLES));
        }
    }
}
