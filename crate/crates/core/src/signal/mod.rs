//! Raw recordings, preprocessing to 100 Hz epochs, and frame tokenization.

mod filter;
mod pipeline;
mod resample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use filter::{bandpass, butterworth_sos, sos_gain, sosfiltfilt, Sos};
pub use pipeline::{
    frame_layout, frame_tokenize, preprocess_record, robust_scale, segment_and_label, EventRule, FrameSequence,
    PreprocessConfig,
};
pub use resample::resample;

pub const TARGET_HZ: f64 = 100.0;
pub const EPOCH_SECONDS: f64 = 30.0;
pub const EPOCH_SAMPLES: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Eog,
    Emg,
    Ecg,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Eeg, Modality::Eog, Modality::Emg, Modality::Ecg];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Eog => "eog",
            Modality::Emg => "emg",
            Modality::Ecg => "ecg",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eeg" => Ok(Modality::Eeg),
            "eog" => Ok(Modality::Eog),
            "emg" => Ok(Modality::Emg),
            "ecg" => Ok(Modality::Ecg),
            other => Err(Error::invalid(format!("unknown modality '{other}'"))),
        }
    }
}

/// Stage code as scored, before label merging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageCode {
    Wake,
    N1,
    N2,
    N3,
    N4,
    Rem,
    Movement,
    Unknown,
}

impl StageCode {
    /// N4 merges into N3; Movement and Unknown carry no stage label.
    pub fn to_stage(self) -> Option<Stage> {
        match self {
            StageCode::Wake => Some(Stage::Wake),
            StageCode::N1 => Some(Stage::N1),
            StageCode::N2 => Some(Stage::N2),
            StageCode::N3 | StageCode::N4 => Some(Stage::N3),
            StageCode::Rem => Some(Stage::Rem),
            StageCode::Movement | StageCode::Unknown => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Wake, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Wake => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub modality: Modality,
    pub rate_hz: f64,
    pub samples: Vec<f32>,
}

impl Channel {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Interval { start_s, end_s }
    }

    pub fn overlap(&self, start_s: f64, end_s: f64) -> f64 {
        (self.end_s.min(end_s) - self.start_s.max(start_s)).max(0.0)
    }
}

/// One subject's raw multichannel recording with annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsgRecord {
    pub subject_id: String,
    pub channels: Vec<Channel>,
    /// One code per consecutive 30-s segment.
    pub stages: Vec<StageCode>,
    pub apnea_events: Vec<Interval>,
    pub hypopnea_events: Vec<Interval>,
}

impl PsgRecord {
    pub fn duration_s(&self) -> f64 {
        self.channels
            .iter()
            .map(Channel::duration_s)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.subject_id.is_empty(), "record has an empty subject id");
        ensure!(!self.channels.is_empty(), "record {} has no channels", self.subject_id);
        for c in &self.channels {
            ensure!(
                c.rate_hz > 0.0 && c.rate_hz.is_finite(),
                "channel {} has non-positive rate {}",
                c.name,
                c.rate_hz
            );
            ensure!(!c.samples.is_empty(), "channel {} is empty", c.name);
        }
        let min_rate = self.channels.iter().map(|c| c.rate_hz).fold(f64::INFINITY, f64::min);
        let durations: Vec<f64> = self.channels.iter().map(Channel::duration_s).collect();
        let lo = durations.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = durations.iter().copied().fold(0.0, f64::max);
        ensure!(
            hi - lo <= 1.0 / min_rate + 1e-9,
            "channel durations of {} differ by {:.4} s",
            self.subject_id,
            hi - lo
        );
        for ev in self.apnea_events.iter().chain(&self.hypopnea_events) {
            ensure!(
                ev.start_s >= 0.0 && ev.start_s < ev.end_s && ev.end_s <= hi + 1e-9,
                "event ({}, {}) lies outside [0, {hi}]",
                ev.start_s,
                ev.end_s
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub modality: Modality,
}

/// One 30-s multimodal window. `signals[c]` belongs to channel `c` of the
/// owning [`EpochSet`] and holds exactly [`EPOCH_SAMPLES`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSample {
    pub epoch_index: usize,
    pub signals: Vec<Vec<f32>>,
    pub stage: Option<Stage>,
    pub apnea: bool,
    pub hypopnea: bool,
}

/// All epochs of one subject, in recording order.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    pub subject_id: String,
    pub channels: Vec<ChannelInfo>,
    pub epochs: Vec<EpochSample>,
}

impl EpochSet {
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_merge_rules() {
        let codes = [StageCode::Wake, StageCode::N4, StageCode::Movement, StageCode::Rem];
        let labels: Vec<_> = codes.iter().map(|c| c.to_stage()).collect();
        assert_eq!(labels, vec![Some(Stage::Wake), Some(Stage::N3), None, Some(Stage::Rem)]);
        assert_eq!(StageCode::Unknown.to_stage(), None);
    }

    #[test]
    fn record_validation() {
        let ch = |rate: f64, n: usize| Channel {
            name: format!("c{rate}"),
            modality: Modality::Eeg,
            rate_hz: rate,
            samples: vec![0.0; n],
        };
        let mut rec = PsgRecord {
            subject_id: "s".into(),
            channels: vec![ch(100.0, 6000), ch(50.0, 3000)],
            stages: vec![],
            apnea_events: vec![Interval::new(1.0, 5.0)],
            hypopnea_events: vec![],
        };
        rec.validate().unwrap();
        rec.apnea_events.push(Interval::new(50.0, 70.0));
        assert!(rec.validate().is_err());
        rec.apnea_events.pop();
        rec.channels[1].samples.truncate(2990);
        assert!(rec.validate().is_err());
        rec.channels[1].samples.resize(3000, 0.0);
        rec.channels[1].rate_hz = 0.0;
        assert!(rec.validate().is_err());
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("EEG".parse::<Modality>().unwrap(), Modality::Eeg);
        assert!("resp".parse::<Modality>().is_err());
    }
}
