//! Dataset plumbing shared by the models: downstream tasks, stream selection
//! and batch framing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};
use crate::signal::{frame_layout, ChannelInfo, EpochSample, EpochSet, Modality, EPOCH_SAMPLES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Stage,
    Apnea,
    Hypopnea,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Stage, Task::Apnea, Task::Hypopnea];

    pub fn classes(self) -> usize {
        match self {
            Task::Stage => 5,
            Task::Apnea | Task::Hypopnea => 2,
        }
    }

    pub fn label(self, e: &EpochSample) -> Option<usize> {
        match self {
            Task::Stage => e.stage.map(|s| s.index()),
            Task::Apnea => Some(e.apnea as usize),
            Task::Hypopnea => Some(e.hypopnea as usize),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Stage => "stage",
            Task::Apnea => "apnea",
            Task::Hypopnea => "hypopnea",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage" => Ok(Task::Stage),
            "apnea" => Ok(Task::Apnea),
            "hypopnea" => Ok(Task::Hypopnea),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

/// Parse a combination such as `eeg2+eog2+emg1+ecg1` into per-modality
/// channel counts, in the order written.
pub fn parse_modalities(spec: &str) -> Result<Vec<(Modality, usize)>> {
    let mut out: Vec<(Modality, usize)> = Vec::new();
    for part in spec.split('+').map(str::trim) {
        ensure!(part.len() > 3, "bad modality term '{part}' in '{spec}'");
        let (name, count) = part.split_at(3);
        let m: Modality = name.parse()?;
        let n: usize = count
            .parse()
            .map_err(|_| Error::invalid(format!("bad channel count in '{part}'")))?;
        ensure!(n > 0, "channel count must be positive in '{part}'");
        ensure!(out.iter().all(|(o, _)| *o != m), "modality {m} listed twice in '{spec}'");
        out.push((m, n));
    }
    Ok(out)
}

/// Pick the first `count` channels of each requested modality.
pub fn select_streams(channels: &[ChannelInfo], combo: &str) -> Result<Vec<ChannelInfo>> {
    let mut out = Vec::new();
    for (m, n) in parse_modalities(combo)? {
        let found: Vec<&ChannelInfo> = channels.iter().filter(|c| c.modality == m).take(n).collect();
        ensure!(
            found.len() == n,
            "combination '{combo}' wants {n} {m} channel(s), recording has {}",
            found.len()
        );
        out.extend(found.into_iter().cloned());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_size_s: f64,
    pub overlap: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            frame_size_s: 3.0,
            overlap: 0.75,
        }
    }
}

/// Frame geometry of one 30-s epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLayout {
    pub frame_len: usize,
    pub starts: Vec<usize>,
}

impl FrameLayout {
    pub fn new(cfg: &FrameConfig) -> Result<Self> {
        let (frame_len, starts) = frame_layout(EPOCH_SAMPLES, cfg.frame_size_s, cfg.overlap)?;
        ensure!(starts.len() >= 2, "framing yields {} token(s); masking needs at least 2", starts.len());
        Ok(FrameLayout { frame_len, starts })
    }

    pub fn tokens(&self) -> usize {
        self.starts.len()
    }

    /// Append the frames of one signal as rows.
    pub fn push_frames(&self, signal: &[f32], out: &mut Vec<f64>) {
        for &s in &self.starts {
            out.extend(signal[s..s + self.frame_len].iter().map(|&v| v as f64));
        }
    }
}

/// Address of one epoch inside a slice of [`EpochSet`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EpochRef {
    pub set: usize,
    pub epoch: usize,
}

/// Every epoch of every set, in order.
pub fn all_refs(sets: &[EpochSet]) -> Vec<EpochRef> {
    sets.iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.epochs.len()).map(move |e| EpochRef { set: s, epoch: e }))
        .collect()
}

pub fn channel_index(set: &EpochSet, name: &str) -> Result<usize> {
    set.channel_index(name)
        .ok_or_else(|| Error::invalid(format!("subject {} has no channel {name}", set.subject_id)))
}

/// Frames of `channel` for each referenced epoch, stacked as `(B·N) × L`.
pub fn stream_frames(sets: &[EpochSet], refs: &[EpochRef], channel: &str, layout: &FrameLayout) -> Result<Mat> {
    let mut buf = Vec::with_capacity(refs.len() * layout.tokens() * layout.frame_len);
    for r in refs {
        let set = &sets[r.set];
        let c = channel_index(set, channel)?;
        layout.push_frames(&set.epochs[r.epoch].signals[c], &mut buf);
    }
    Ok(Mat::from_shape_vec((refs.len() * layout.tokens(), layout.frame_len), buf).expect("frame buffer shape"))
}
