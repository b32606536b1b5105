//! Temporal context module over windows of consecutive epoch vectors, with
//! the downstream classification head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::error::{ensure, Result};
use crate::nn::layers::BnStats;
use crate::nn::{BatchNorm, Linear, ParamStore, SelectiveSsm, SsmConfig};
use crate::rng::Rng;

/// Which epoch of a window the head classifies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPosition {
    #[default]
    Last,
    Center,
}

impl TargetPosition {
    pub fn offset(self, t: usize) -> usize {
        match self {
            TargetPosition::Last => t - 1,
            TargetPosition::Center => t / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    #[default]
    Mamba,
    /// Single-layer LSTM reference.
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcmConfig {
    pub context_length: usize,
    pub ssm: SsmConfig,
    pub target: TargetPosition,
    pub kind: TemporalKind,
}

impl Default for TcmConfig {
    fn default() -> Self {
        TcmConfig {
            context_length: 20,
            ssm: SsmConfig::default(),
            target: TargetPosition::Last,
            kind: TemporalKind::Mamba,
        }
    }
}

impl TcmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.context_length >= 1, "context_length must be at least 1");
        self.ssm.validate()
    }
}

/// A window of epoch positions (indices into one subject's sequence) and the
/// position whose label it predicts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub epochs: Vec<usize>,
    pub target: usize,
}

/// One window per epoch, stride 1. Positions before the first epoch repeat
/// the first epoch; in center mode positions past the end repeat the last.
pub fn windowize(len: usize, t: usize, target: TargetPosition) -> Vec<Window> {
    if len == 0 || t == 0 {
        return Vec::new();
    }
    let off = target.offset(t) as isize;
    (0..len)
        .map(|i| Window {
            epochs: (0..t as isize)
                .map(|k| (i as isize - off + k).clamp(0, len as isize - 1) as usize)
                .collect(),
            target: i,
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Lstm {
    w: Linear,
    u: Linear,
    dim: usize,
}

impl Lstm {
    /// Input rows ordered `window · T + t`; output in the same order.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, windows: usize, t_len: usize) -> Var {
        let d = self.dim;
        let mut h = g.constant(Mat::zeros((windows, d)));
        let mut c = g.constant(Mat::zeros((windows, d)));
        let mut outs = Vec::with_capacity(t_len);
        let cols = |g: &mut Graph, v: Var, k: usize| {
            // Slice gate block k via a selection matrix.
            let sel = Mat::from_shape_fn((4 * d, d), |(r, col)| if r == k * d + col { 1.0 } else { 0.0 });
            let s = g.constant(sel);
            g.matmul(v, s)
        };
        for step in 0..t_len {
            let rows: Vec<usize> = (0..windows).map(|w| w * t_len + step).collect();
            let xt = g.select_rows(x, Arc::new(rows));
            let a = self.w.forward(g, store, xt);
            let b = self.u.forward(g, store, h);
            let gates = g.add(a, b);
            let (i, f, o, u) = (cols(g, gates, 0), cols(g, gates, 1), cols(g, gates, 2), cols(g, gates, 3));
            let (i, f, o, u) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(u));
            let fc = g.mul(f, c);
            let iu = g.mul(i, u);
            c = g.add(fc, iu);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            outs.push(h);
        }
        // Rows are time-major; restore window-major order.
        let stacked = g.concat_rows(&outs);
        let order: Vec<usize> = (0..windows * t_len).map(|r| (r % t_len) * windows + r / t_len).collect();
        g.select_rows(stacked, Arc::new(order))
    }
}

#[derive(Clone, Debug)]
enum Temporal {
    Mamba(SelectiveSsm),
    Lstm(Lstm),
}

/// Batch norm → temporal layers → skip sum → linear head.
#[derive(Clone, Debug)]
pub struct TcmModel {
    pub cfg: TcmConfig,
    pub dim: usize,
    pub classes: usize,
    pub bn: BatchNorm,
    temporal: Temporal,
    pub head: Linear,
}

impl TcmModel {
    /// Registers its parameters under `tcm.` in `store`.
    pub fn new(store: &mut ParamStore, cfg: &TcmConfig, dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        ensure!(dim > 0 && classes >= 2, "tcm needs dim > 0 and at least 2 classes");
        let bn = BatchNorm::new(store, "tcm.bn", dim);
        let temporal = match cfg.kind {
            TemporalKind::Mamba => Temporal::Mamba(SelectiveSsm::new(store, "tcm.ssm", dim, &cfg.ssm, rng)?),
            TemporalKind::Lstm => Temporal::Lstm(Lstm {
                w: Linear::new(store, "tcm.lstm.w", dim, 4 * dim, true, rng),
                u: Linear::new(store, "tcm.lstm.u", dim, 4 * dim, false, rng),
                dim,
            }),
        };
        let head = Linear::new(store, "tcm.head", dim, classes, true, rng);
        Ok(TcmModel {
            cfg: cfg.clone(),
            dim,
            classes,
            bn,
            temporal,
            head,
        })
    }

    /// Logits for `windows` windows whose epoch vectors are stacked as rows
    /// `w · T + t`. Train mode normalises with batch statistics over all
    /// rows and returns them for the running-average update.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        k: Var,
        windows: usize,
        train: bool,
    ) -> Result<(Var, Option<BnStats>)> {
        let t = self.cfg.context_length;
        let (rows, cols) = g.value(k).dim();
        ensure!(windows > 0 && rows > 0, "tcm needs at least one non-empty window");
        ensure!(rows == windows * t, "{rows} rows do not form {windows} windows of {t}");
        ensure!(cols == self.dim, "tcm expects dim {}, got {cols}", self.dim);
        let (kn, stats) = self.bn.forward(g, store, k, train)?;
        let m = match &self.temporal {
            Temporal::Mamba(ssm) => ssm.forward(g, store, kn, &Segments::uniform(windows, t))?,
            Temporal::Lstm(l) => l.forward(g, store, kn, windows, t),
        };
        let s = g.add(m, kn);
        let off = self.cfg.target.offset(t);
        let pick = g.select_rows(s, Arc::new((0..windows).map(|w| w * t + off).collect()));
        Ok((self.head.forward(g, store, pick), stats))
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BnStats) {
        self.bn.update_running(store, stats);
    }

    /// Replace the batch-norm running statistics with those of `k`, the
    /// stacked `W · T` input rows of the training windows.
    pub fn recalibrate(&self, store: &mut ParamStore, k: &Mat) -> Result<()> {
        self.bn.set_running(store, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn model(kind: TemporalKind, t: usize) -> (ParamStore, TcmModel) {
        let mut store = ParamStore::new();
        let cfg = TcmConfig {
            context_length: t,
            ssm: SsmConfig {
                d_state: 4,
                d_conv: 3,
                expand: 2,
                layers: 2,
            },
            kind,
            ..TcmConfig::default()
        };
        let m = TcmModel::new(&mut store, &cfg, 6, 5, &mut rng_for(0, "tcm", &[])).unwrap();
        (store, m)
    }

    fn inputs(rows: usize, seed: u64) -> Mat {
        let mut rng = rng_for(seed, "k", &[]);
        Mat::from_shape_fn((rows, 6), |_| rng.random_range(-1.0..1.0))
    }

    fn logits(store: &ParamStore, m: &TcmModel, k: &Mat, windows: usize, train: bool) -> Mat {
        let mut g = Graph::new();
        let v = g.constant(k.clone());
        let (l, _) = m.forward(&mut g, store, v, windows, train).unwrap();
        g.value(l).clone()
    }

    #[test]
    fn windows_enumerate_each_epoch() {
        let w = windowize(25, 20, TargetPosition::Last);
        assert_eq!(w.len(), 25);
        assert_eq!(w[0].epochs, vec![0; 20]);
        assert_eq!(w[18].epochs[..2], [0, 0]);
        assert_eq!(w[19].epochs, (0..20).collect::<Vec<_>>());
        assert_eq!(w[24].epochs, (5..25).collect::<Vec<_>>());
        for pair in w.windows(2).skip(19) {
            assert_eq!(pair[0].epochs[1..], pair[1].epochs[..19]);
        }
        // Oracle: count of windows that need padding is min(T-1, len).
        let padded = w.iter().filter(|x| x.epochs[0] == 0 && x.target < 19).count();
        assert_eq!(padded, 19);
        let c = windowize(5, 3, TargetPosition::Center);
        assert_eq!(c[0].epochs, vec![0, 0, 1]);
        assert_eq!(c[4].epochs, vec![3, 4, 4]);
        assert!(windowize(0, 3, TargetPosition::Last).is_empty());
    }

    #[test]
    fn zeroed_ssm_reduces_to_skip_path() {
        let (mut store, m) = model(TemporalKind::Mamba, 4);
        let k = inputs(8, 1);
        let ids: Vec<_> = store.entries().filter(|(_, e)| e.name.starts_with("tcm.ssm.")).map(|(id, _)| id).collect();
        for id in ids {
            store.value_mut(id).fill(0.0);
        }
        let got = logits(&store, &m, &k, 2, false);
        // Eval-mode BN with fresh running stats is the identity up to eps.
        let scale = 1.0 / (1.0 + BatchNorm::EPS).sqrt();
        let w = store.value(m.head.weight);
        for win in 0..2 {
            let last = k.row(win * 4 + 3).mapv(|v| v * scale);
            let want = last.dot(w);
            for c in 0..5 {
                assert_abs_diff_eq!(got[[win, c]], want[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn context_changes_logits() {
        let (store, m) = model(TemporalKind::Mamba, 5);
        let k = inputs(5, 2);
        let base = logits(&store, &m, &k, 1, false);
        for t in 0..4 {
            let mut p = k.clone();
            p.row_mut(t).mapv_inplace(|v| v + 1.0);
            assert_ne!(logits(&store, &m, &p, 1, false), base, "epoch {t} had no influence");
        }
    }

    #[test]
    fn single_epoch_window_is_a_classifier() {
        let (store, m) = model(TemporalKind::Mamba, 1);
        let k = inputs(3, 3);
        let l = logits(&store, &m, &k, 3, false);
        assert_eq!(l.dim(), (3, 5));
        assert_eq!(l, logits(&store, &m, &k, 3, false));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let (store, m) = model(TemporalKind::Mamba, 4);
        let mut g = Graph::new();
        let v = g.constant(inputs(7, 1));
        assert!(m.forward(&mut g, &store, v, 2, false).is_err());
        let e = g.constant(Mat::zeros((0, 6)));
        assert!(m.forward(&mut g, &store, e, 0, false).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [TemporalKind::Mamba, TemporalKind::Lstm] {
            let (mut store, m) = model(kind, 3);
            let k = inputs(6, 4);
            let targets = [1usize, 3];
            let report = check_gradients(&mut store, |_| true, 4, 1e-6, 1e-5, |g, s| {
                let v = g.constant(k.clone());
                let (l, _) = m.forward(g, s, v, 2, true)?;
                Ok(g.cross_entropy(l, &targets, false))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn lstm_is_causal() {
        let (store, m) = model(TemporalKind::Lstm, 4);
        let k = inputs(8, 5);
        let mut g = Graph::new();
        let v = g.constant(k.clone());
        let (l, _) = m.forward(&mut g, &store, v, 2, false).unwrap();
        assert_eq!(g.value(l).dim(), (2, 5));
        let mut p = k.clone();
        p.row_mut(4).mapv_inplace(|v| v + 1.0);
        let other = logits(&store, &m, &p, 2, false);
        assert_eq!(other.row(0), g.value(l).row(0));
        assert_ne!(other.row(1), g.value(l).row(1));
    }
}
