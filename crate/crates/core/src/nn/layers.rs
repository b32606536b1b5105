use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{ensure, Result};
use crate::nn::params::{trunc_normal, uniform, ParamId, ParamStore};
use crate::rng::{rng_for, Rng};

pub const INIT_STD: f64 = 0.02;

/// Per-pass execution context: train/eval switch and the dropout stream.
pub struct Ctx {
    pub train: bool,
    rng: Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: rng_for(0, "eval", &[]),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: rng_for(seed, "dropout", &[]),
        }
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, ctx: &mut Ctx) -> Var {
    if !ctx.train || p <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).dim();
    let keep = 1.0 - p;
    let mask = Mat::from_shape_fn((r, c), |_| {
        if ctx.rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            r: 4,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

/// Dense layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(in_dim, out_dim, INIT_STD, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, out_dim)), true));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Forward with an optional low-rank adapter on top of the base map.
    pub fn forward_adapted(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        adapter: Option<&LoraAdapter>,
        ctx: &mut Ctx,
    ) -> Var {
        let base = self.forward(g, store, x);
        match adapter {
            Some(ad) => {
                let delta = ad.forward(g, store, x, ctx);
                g.add(base, delta)
            }
            None => base,
        }
    }
}

/// Low-rank adapter: adds `(alpha / r) · dropout(x)·A·B` to a frozen base map.
/// `A` (`in × r`) starts small and random, `B` (`r × out`) starts at zero so the
/// adapted layer equals the base layer at initialisation.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        base: &Linear,
        cfg: &LoraConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        ensure!(cfg.r > 0, "lora rank must be positive");
        ensure!(
            cfg.r <= base.in_dim.min(base.out_dim),
            "lora rank {} exceeds min({}, {}) of {name}",
            cfg.r,
            base.in_dim,
            base.out_dim
        );
        ensure!(cfg.alpha > 0.0, "lora alpha must be positive");
        ensure!((0.0..1.0).contains(&cfg.dropout), "lora dropout must lie in [0, 1)");
        let bound = 1.0 / (base.in_dim as f64).sqrt();
        let a = store.add(format!("{name}.lora_a"), uniform(base.in_dim, cfg.r, bound, rng), true);
        let b = store.add(format!("{name}.lora_b"), Mat::zeros((cfg.r, base.out_dim)), true);
        Ok(LoraAdapter {
            a,
            b,
            rank: cfg.r,
            scale: cfg.alpha / cfg.r as f64,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Var {
        let x = dropout(g, x, self.dropout, ctx);
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let h = g.matmul(x, a);
        let h = g.matmul(h, b);
        g.scale(h, self.scale)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim)), true),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim)), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Batch statistics captured by a train-mode [`BatchNorm`] pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Per-feature batch normalisation over rows with learned affine and running
/// statistics for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim)), true),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim)), true),
            running_mean: store.add(format!("{name}.running_mean"), Mat::zeros((1, dim)), false),
            running_var: store.add(format!("{name}.running_var"), Mat::ones((1, dim)), false),
            momentum: 0.1,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BnStats>)> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if train {
            let rows = g.value(x).nrows();
            ensure!(rows >= 2, "batch norm in train mode needs at least 2 rows, got {rows}");
            let (y, mean, var) = g.batch_norm(x, gamma, beta, Self::EPS);
            Ok((
                y,
                Some(BnStats {
                    mean,
                    var,
                    count: rows,
                }),
            ))
        } else {
            let mean = store.value(self.running_mean);
            let var = store.value(self.running_var);
            let shift = g.constant(-mean);
            let inv = g.constant(var.mapv(|v| 1.0 / (v + Self::EPS).sqrt()));
            let y = g.add_row(x, shift);
            let y = g.mul_row(y, inv);
            let y = g.mul_row(y, gamma);
            Ok((g.add_row(y, beta), None))
        }
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BnStats) {
        let m = self.momentum;
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
        {
            let rm = store.value_mut(self.running_mean);
            for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        let rv = store.value_mut(self.running_var);
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }

    /// Overwrite the running statistics with the column mean and unbiased
    /// variance of `x`.
    pub fn set_running(&self, store: &mut ParamStore, x: &Mat) -> Result<()> {
        let n = x.nrows();
        ensure!(n >= 2, "need at least 2 rows to estimate batch-norm statistics, got {n}");
        let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let var = x.var_axis(ndarray::Axis(0), 1.0);
        store.value_mut(self.running_mean).row_mut(0).assign(&mean);
        store.value_mut(self.running_var).row_mut(0).assign(&var);
        Ok(())
    }
}

/// MLP projection head: `in → hidden[0] → … → hidden[k-1] → out` with GELU
/// between layers.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub layers: Vec<Linear>,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        ensure!(!hidden.is_empty(), "projection head needs at least one hidden layer");
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Ok(ProjectionHead { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, store, h);
        }
        h
    }
}

/// Fixed sinusoidal table: even columns `sin(p / 10000^(2i/dim))`, odd
/// columns the matching cosine.
pub fn positional_encoding(n: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((n, dim), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Repeat a positional table for `count` stacked sequences.
pub fn tiled_positions(count: usize, table: &Mat) -> Mat {
    let (n, dim) = table.dim();
    Mat::from_shape_fn((count * n, dim), |(r, c)| table[[r % n, c]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn positional_table_basics() {
        let t = positional_encoding(7, 6);
        for j in 0..6 {
            assert_eq!(t[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        let longer = positional_encoding(8, 6);
        assert_eq!(t, longer.slice(ndarray::s![..7, ..]).to_owned());
        let big = positional_encoding(97, 33);
        assert!(big.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn batch_norm_train_mode_example() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Mat::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap());
        let (y, _) = bn.forward(&mut g, &store, x, true).unwrap();
        assert_abs_diff_eq!(g.value(y)[[0, 0]], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(g.value(y)[[1, 0]], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train_mode() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut g = Graph::new();
        let x = g.constant(Mat::ones((1, 3)));
        assert!(bn.forward(&mut g, &store, x, true).is_err());
        assert!(bn.forward(&mut g, &store, x, false).is_ok());
    }

    #[test]
    fn batch_norm_eval_ignores_batch_composition() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut rng = rng_for(1, "bn", &[]);
        let batch = uniform(6, 2, 3.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let (_, stats) = bn.forward(&mut g, &store, x, true).unwrap();
        bn.update_running(&mut store, &stats.unwrap());
        let run = |rows: Mat| {
            let mut g = Graph::new();
            let x = g.constant(rows);
            let (y, _) = bn.forward(&mut g, &store, x, false).unwrap();
            g.value(y).row(0).to_owned()
        };
        let alone = run(batch.slice(ndarray::s![0..1, ..]).to_owned());
        let together = run(batch.clone());
        assert_eq!(alone, together);
    }

    #[test]
    fn batch_norm_train_output_is_standardised() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 4);
        let mut rng = rng_for(2, "bn", &[]);
        let batch = uniform(32, 4, 5.0, &mut rng) + 2.0;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let (y, _) = bn.forward(&mut g, &store, x, true).unwrap();
        let y = g.value(y);
        for col in y.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn recalibrated_eval_matches_train_mode_up_to_bias() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut rng = rng_for(4, "bn", &[]);
        let batch = uniform(50, 3, 2.0, &mut rng) + 7.0;
        bn.set_running(&mut store, &batch).unwrap();
        let out = |train: bool| {
            let mut g = Graph::new();
            let x = g.constant(batch.clone());
            let (y, _) = bn.forward(&mut g, &store, x, train).unwrap();
            g.value(y).clone()
        };
        // Eval divides by the unbiased deviation, train by the biased one.
        let ratio = (49.0f64 / 50.0).sqrt();
        for (e, t) in out(false).iter().zip(out(true).iter()) {
            assert_abs_diff_eq!(*e, t * ratio, epsilon = 1e-5);
        }
    }

    #[test]
    fn lora_starts_as_identity_of_base() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(3, "lora", &[]);
        let base = Linear::new(&mut store, "l", 6, 5, true, &mut rng);
        let ad = LoraAdapter::new(&mut store, "l", &base, &LoraConfig::default(), &mut rng).unwrap();
        let input = uniform(4, 6, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input);
        let plain = base.forward(&mut g, &store, x);
        let mut ctx = Ctx::train(1);
        let adapted = base.forward_adapted(&mut g, &store, x, Some(&ad), &mut ctx);
        assert_eq!(g.value(plain), g.value(adapted));
    }

    #[test]
    fn lora_rank_is_bounded() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(3, "lora", &[]);
        let base = Linear::new(&mut store, "l", 3, 8, false, &mut rng);
        let cfg = LoraConfig {
            r: 4,
            ..LoraConfig::default()
        };
        assert!(LoraAdapter::new(&mut store, "l", &base, &cfg, &mut rng).is_err());
    }

    #[test]
    fn lora_full_rank_reproduces_weight_update() {
        // r = full rank, alpha / r = 1 and A·B = ΔW gives x·(W + ΔW).
        let mut store = ParamStore::new();
        let mut rng = rng_for(4, "lora", &[]);
        let base = Linear::new(&mut store, "l", 3, 3, false, &mut rng);
        let cfg = LoraConfig {
            r: 3,
            alpha: 3.0,
            dropout: 0.0,
        };
        let ad = LoraAdapter::new(&mut store, "l", &base, &cfg, &mut rng).unwrap();
        let delta_w = uniform(3, 3, 1.0, &mut rng);
        store.value_mut(ad.a).assign(&Mat::eye(3));
        store.value_mut(ad.b).assign(&delta_w);
        let input = uniform(2, 3, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = base.forward_adapted(&mut g, &store, x, Some(&ad), &mut Ctx::eval());
        let expected = input.dot(&(store.value(base.weight) + &delta_w));
        for (a, b) in g.value(y).iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_head_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(5, "head", &[]);
        let head = ProjectionHead::new(&mut store, "h", 4, &[8, 6], 3, &mut rng).unwrap();
        let ids: Vec<_> = store.entries().map(|(id, _)| id).collect();
        for id in ids {
            store.value_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(uniform(2, 4, 1.0, &mut rng));
        let y = head.forward(&mut g, &store, x);
        assert_eq!(g.value(y).dim(), (2, 3));
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        assert!(ProjectionHead::new(&mut store, "h2", 4, &[], 3, &mut rng).is_err());
    }
}
