//! On-disk formats: raw-record ingestion directories and per-subject epoch
//! files. Layouts are documented in `docs/FORMATS.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Channel, ChannelInfo, EpochSample, EpochSet, Interval, Modality, PsgRecord, Stage, StageCode};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dependency(format!("{} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_bytes(path)?).map_err(|_| Error::corrupt(path, "not UTF-8"))
}

// ---------------------------------------------------------------- records

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelEntry {
    name: String,
    modality: Modality,
    rate_hz: f64,
    file: String,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    subject_id: String,
    annotations: String,
    channels: Vec<ChannelEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordManifest {
    format_version: u32,
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotations {
    stages: Vec<StageCode>,
    apnea: Vec<[f64; 2]>,
    hypopnea: Vec<[f64; 2]>,
}

const RECORD_FORMAT: u32 = 1;
pub const RECORD_MANIFEST: &str = "manifest.toml";

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write records as `manifest.toml` plus per-channel `.f32` files and
/// per-subject annotation files under `dir`.
pub fn write_records(dir: &Path, records: &[PsgRecord]) -> Result<()> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        let sdir = safe_name(&rec.subject_id);
        let mut channels = Vec::new();
        for (i, c) in rec.channels.iter().enumerate() {
            let file = format!("{sdir}/{i:02}_{}.f32", safe_name(&c.name));
            let bytes: Vec<u8> = c.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_bytes(&dir.join(&file), &bytes)?;
            channels.push(ChannelEntry {
                name: c.name.clone(),
                modality: c.modality,
                rate_hz: c.rate_hz,
                file,
                samples: c.samples.len(),
            });
        }
        let ann = Annotations {
            stages: rec.stages.clone(),
            apnea: rec.apnea_events.iter().map(|e| [e.start_s, e.end_s]).collect(),
            hypopnea: rec.hypopnea_events.iter().map(|e| [e.start_s, e.end_s]).collect(),
        };
        let ann_file = format!("{sdir}/annotations.toml");
        let text = toml::to_string(&ann).map_err(|e| Error::invalid(e.to_string()))?;
        write_bytes(&dir.join(&ann_file), text.as_bytes())?;
        entries.push(RecordEntry {
            subject_id: rec.subject_id.clone(),
            annotations: ann_file,
            channels,
        });
    }
    let manifest = RecordManifest {
        format_version: RECORD_FORMAT,
        records: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_bytes(&dir.join(RECORD_MANIFEST), text.as_bytes())
}

/// Subject ids listed in a record directory's manifest.
pub fn list_records(dir: &Path) -> Result<Vec<String>> {
    Ok(read_manifest(dir)?.records.into_iter().map(|r| r.subject_id).collect())
}

fn read_manifest(dir: &Path) -> Result<RecordManifest> {
    let path = dir.join(RECORD_MANIFEST);
    let m: RecordManifest =
        toml::from_str(&read_text(&path)?).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if m.format_version != RECORD_FORMAT {
        return Err(Error::corrupt(&path, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

pub fn read_records(dir: &Path) -> Result<Vec<PsgRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .records
        .into_iter()
        .map(|entry| {
            let channels = entry
                .channels
                .into_iter()
                .map(|c| {
                    let path = dir.join(&c.file);
                    let bytes = read_bytes(&path)?;
                    if bytes.len() != c.samples * 4 {
                        return Err(Error::corrupt(
                            &path,
                            format!("{} bytes, manifest says {} samples", bytes.len(), c.samples),
                        ));
                    }
                    Ok(Channel {
                        name: c.name,
                        modality: c.modality,
                        rate_hz: c.rate_hz,
                        samples: bytes
                            .chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                            .collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ann_path = dir.join(&entry.annotations);
            let ann: Annotations =
                toml::from_str(&read_text(&ann_path)?).map_err(|e| Error::corrupt(&ann_path, e.to_string()))?;
            let rec = PsgRecord {
                subject_id: entry.subject_id,
                channels,
                stages: ann.stages,
                apnea_events: ann.apnea.iter().map(|e| Interval::new(e[0], e[1])).collect(),
                hypopnea_events: ann.hypopnea.iter().map(|e| Interval::new(e[0], e[1])).collect(),
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

// ---------------------------------------------------------------- epochs

const EPOCH_MAGIC: &[u8; 8] = b"PSGEPOCH";
const EPOCH_VERSION: u32 = 1;
const NO_STAGE: u8 = 0xFF;
pub const EPOCH_INDEX: &str = "index.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpochHeader {
    subject_id: String,
    epoch_count: usize,
    samples_per_epoch: usize,
    channels: Vec<ChannelInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpochIndex {
    format_version: u32,
    subjects: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    subject_id: String,
    file: String,
    epoch_count: usize,
}

pub fn encode_epoch_set(set: &EpochSet) -> Result<Vec<u8>> {
    let spe = set.epochs.first().and_then(|e| e.signals.first()).map_or(0, Vec::len);
    for e in &set.epochs {
        if e.signals.len() != set.channels.len() || e.signals.iter().any(|s| s.len() != spe) {
            return Err(Error::invalid(format!(
                "epoch {} of {} has inconsistent signal shapes",
                e.epoch_index, set.subject_id
            )));
        }
        if e.epoch_index > u32::MAX as usize {
            return Err(Error::invalid("epoch index exceeds u32"));
        }
    }
    let header = EpochHeader {
        subject_id: set.subject_id.clone(),
        epoch_count: set.epochs.len(),
        samples_per_epoch: spe,
        channels: set.channels.clone(),
    };
    let hbytes = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::with_capacity(20 + hbytes.len() + set.epochs.len() * (8 + set.channels.len() * spe * 4));
    buf.extend_from_slice(EPOCH_MAGIC);
    buf.extend_from_slice(&EPOCH_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hbytes);
    for e in &set.epochs {
        buf.extend_from_slice(&(e.epoch_index as u32).to_le_bytes());
        buf.push(e.stage.map_or(NO_STAGE, |s| s.index() as u8));
        buf.push(e.apnea as u8);
        buf.push(e.hypopnea as u8);
        buf.push(0);
    }
    for e in &set.epochs {
        for s in &e.signals {
            for v in s {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_epoch_set(bytes: &[u8], path: &Path) -> Result<EpochSet> {
    let bad = |why: String| Error::corrupt(path, why);
    if bytes.len() < 20 || &bytes[..8] != EPOCH_MAGIC {
        return Err(bad("bad epoch-file magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != EPOCH_VERSION {
        return Err(bad(format!("unsupported epoch-file version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: EpochHeader = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(format!("header: {e}")))?;
    let (n, c, spe) = (header.epoch_count, header.channels.len(), header.samples_per_epoch);
    let expected = n
        .checked_mul(8)
        .and_then(|l| n.checked_mul(c)?.checked_mul(spe)?.checked_mul(4)?.checked_add(l))
        .ok_or_else(|| bad("header sizes overflow".into()))?;
    if bytes.len() - hend != expected {
        return Err(bad(format!("body is {} bytes, header implies {expected}", bytes.len() - hend)));
    }
    let labels = &bytes[hend..hend + 8 * n];
    let mut off = hend + 8 * n;
    let mut epochs = Vec::with_capacity(n);
    for i in 0..n {
        let l = &labels[8 * i..8 * i + 8];
        let stage = match l[4] {
            NO_STAGE => None,
            k => Some(Stage::from_index(k as usize).ok_or_else(|| bad(format!("stage code {k}")))?),
        };
        let flag = |b: u8| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(bad(format!("label byte {other}"))),
        };
        let mut signals = Vec::with_capacity(c);
        for _ in 0..c {
            signals.push(
                bytes[off..off + spe * 4]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
            off += spe * 4;
        }
        epochs.push(EpochSample {
            epoch_index: u32::from_le_bytes(l[..4].try_into().unwrap()) as usize,
            signals,
            stage,
            apnea: flag(l[5])?,
            hypopnea: flag(l[6])?,
        });
    }
    Ok(EpochSet {
        subject_id: header.subject_id,
        channels: header.channels,
        epochs,
    })
}

pub fn write_epoch_set(path: &Path, set: &EpochSet) -> Result<()> {
    write_bytes(path, &encode_epoch_set(set)?)
}

pub fn read_epoch_set(path: &Path) -> Result<EpochSet> {
    decode_epoch_set(&read_bytes(path)?, path)
}

/// Write one `.epochs` file per subject plus `index.json` listing them.
pub fn write_epoch_store(dir: &Path, sets: &[EpochSet]) -> Result<Vec<PathBuf>> {
    let mut subjects = Vec::new();
    let mut paths = Vec::new();
    for set in sets {
        let file = format!("{}.epochs", safe_name(&set.subject_id));
        let path = dir.join(&file);
        write_epoch_set(&path, set)?;
        subjects.push(IndexEntry {
            subject_id: set.subject_id.clone(),
            file,
            epoch_count: set.epochs.len(),
        });
        paths.push(path);
    }
    let index = EpochIndex {
        format_version: EPOCH_VERSION,
        subjects,
    };
    write_bytes(
        &dir.join(EPOCH_INDEX),
        &serde_json::to_vec_pretty(&index).expect("index serialises"),
    )?;
    Ok(paths)
}

pub fn list_epoch_store(dir: &Path) -> Result<Vec<String>> {
    Ok(read_index(dir)?.subjects.into_iter().map(|s| s.subject_id).collect())
}

fn read_index(dir: &Path) -> Result<EpochIndex> {
    let path = dir.join(EPOCH_INDEX);
    let index: EpochIndex =
        serde_json::from_slice(&read_bytes(&path)?).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if index.format_version != EPOCH_VERSION {
        return Err(Error::corrupt(&path, format!("unsupported version {}", index.format_version)));
    }
    Ok(index)
}

pub fn read_epoch_store(dir: &Path) -> Result<Vec<EpochSet>> {
    read_index(dir)?
        .subjects
        .iter()
        .map(|s| {
            let path = dir.join(&s.file);
            let set = read_epoch_set(&path)?;
            if set.subject_id != s.subject_id || set.epochs.len() != s.epoch_count {
                return Err(Error::corrupt(&path, "file disagrees with index"));
            }
            Ok(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn sample_set() -> EpochSet {
        EpochSet {
            subject_id: "s 01".into(),
            channels: vec![
                ChannelInfo {
                    name: "C4-A1".into(),
                    modality: Modality::Eeg,
                },
                ChannelInfo {
                    name: "ECG".into(),
                    modality: Modality::Ecg,
                },
            ],
            epochs: (0..3)
                .map(|i| EpochSample {
                    epoch_index: i,
                    signals: vec![vec![i as f32 + 0.1; 5], vec![-(i as f32) * 1e-7; 5]],
                    stage: Stage::from_index(i),
                    apnea: i == 1,
                    hypopnea: i == 2,
                })
                .chain(std::iter::once(EpochSample {
                    epoch_index: 3,
                    signals: vec![vec![f32::MIN_POSITIVE; 5], vec![f32::MAX; 5]],
                    stage: None,
                    apnea: false,
                    hypopnea: false,
                }))
                .collect(),
        }
    }

    #[test]
    fn epoch_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        write_epoch_store(dir.path(), std::slice::from_ref(&set)).unwrap();
        assert_eq!(list_epoch_store(dir.path()).unwrap(), vec!["s 01".to_string()]);
        let back = read_epoch_store(dir.path()).unwrap();
        assert_eq!(back, vec![set]);
    }

    #[test]
    fn corrupted_epoch_files_are_rejected() {
        let set = sample_set();
        let bytes = encode_epoch_set(&set).unwrap();
        let p = Path::new("x.epochs");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_epoch_set(&bad, p), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_epoch_set(&bad, p), Err(Error::Corrupt { .. })));
        assert!(matches!(decode_epoch_set(&bytes[..bytes.len() - 1], p), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[14] = 0xFF;
        assert!(matches!(decode_epoch_set(&bad, p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn record_directory_round_trip() {
        let recs = generate(&SynthSpec {
            subject_count: 2,
            epochs_per_subject: 4,
            seed: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_records(dir.path(), &recs).unwrap();
        assert_eq!(list_records(dir.path()).unwrap(), vec!["subj000", "subj001"]);
        assert_eq!(read_records(dir.path()).unwrap(), recs);
    }

    #[test]
    fn truncated_channel_file_is_corrupt() {
        let recs = generate(&SynthSpec {
            subject_count: 1,
            epochs_per_subject: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_records(dir.path(), &recs).unwrap();
        let f = dir.path().join("subj000/00_C4-A1.f32");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_records(dir.path()), Err(Error::Corrupt { .. })));
        assert!(matches!(read_records(Path::new("/nonexistent")), Err(Error::Dependency(_))));
    }
}
