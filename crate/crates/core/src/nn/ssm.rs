//! Selective state-space sequence layer (single head, diagonal state matrix).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::error::{ensure, Result};
use crate::nn::layers::{Linear, INIT_STD};
use crate::nn::params::{trunc_normal, uniform, ParamId, ParamStore};
use crate::rng::Rng;
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmConfig {
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub layers: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            d_conv: 4,
            expand: 2,
            layers: 2,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d_state > 0 && self.d_conv > 0 && self.expand > 0 && self.layers > 0,
            "ssm sizes must be positive: {self:?}"
        );
        Ok(())
    }
}

/// One selective-scan layer mapping `dim → dim`.
///
/// `x → (in_x, in_z)`; `u = silu(causal_conv(in_x))`;
/// `Δ = softplus(u·W_dt + b_dt)`, `B = u·W_B`, `C = u·W_C`, `A = −exp(a_log)`;
/// `y = scan(u, Δ, A, B, C, D)`; output `(y ⊙ silu(in_z))·W_out`.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub dim: usize,
    pub cfg: SsmConfig,
    pub layers: Vec<SsmLayer>,
}

impl SelectiveSsm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &SsmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        ensure!(dim > 0, "ssm dim must be positive");
        let inner = dim * cfg.expand;
        let n = cfg.d_state;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                let conv_bound = 1.0 / (cfg.d_conv as f64).sqrt();
                let dt = Linear::new(store, &format!("{p}.dt"), inner, inner, true, rng);
                // Step sizes start log-uniform in [1e-3, 1e-1].
                let dt_bias = Mat::from_shape_fn((1, inner), |_| {
                    let step = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                    step + (-(-step).exp_m1()).ln()
                });
                store.value_mut(dt.bias.expect("dt has bias")).assign(&dt_bias);
                SsmLayer {
                    in_x: Linear::new(store, &format!("{p}.in_x"), dim, inner, false, rng),
                    in_z: Linear::new(store, &format!("{p}.in_z"), dim, inner, false, rng),
                    conv_w: store.add(
                        format!("{p}.conv.weight"),
                        uniform(cfg.d_conv, inner, conv_bound, rng),
                        true,
                    ),
                    conv_b: store.add(format!("{p}.conv.bias"), Mat::zeros((1, inner)), true),
                    dt,
                    b_proj: Linear::new(store, &format!("{p}.b_proj"), inner, n, false, rng),
                    c_proj: Linear::new(store, &format!("{p}.c_proj"), inner, n, false, rng),
                    a_log: store.add(
                        format!("{p}.a_log"),
                        Mat::from_shape_fn((inner, n), |(_, j)| ((j + 1) as f64).ln()),
                        true,
                    ),
                    d_skip: store.add(format!("{p}.d_skip"), Mat::ones((1, inner)), true),
                    out: Linear {
                        weight: store.add(
                            format!("{p}.out.weight"),
                            trunc_normal(inner, dim, INIT_STD, rng),
                            true,
                        ),
                        bias: None,
                        in_dim: inner,
                        out_dim: dim,
                    },
                }
            })
            .collect();
        Ok(SelectiveSsm {
            dim,
            cfg: cfg.clone(),
            layers,
        })
    }

    /// Run the stacked layers over sequences grouped by `segs`. Strictly causal
    /// within each segment.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        let (rows, cols) = g.value(x).dim();
        ensure!(rows > 0, "selective ssm needs a non-empty sequence");
        ensure!(cols == self.dim, "ssm expects dim {}, got {cols}", self.dim);
        ensure!(segs.total_rows() == rows, "segments do not cover the input");
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, segs);
        }
        Ok(h)
    }
}

impl SsmLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Var {
        let xi = self.in_x.forward(g, store, x);
        let z = self.in_z.forward(g, store, x);
        let w = g.param(store, self.conv_w);
        let b = g.param(store, self.conv_b);
        let u = g.causal_conv(xi, w, b, segs);
        let u = g.silu(u);
        let dt = self.dt.forward(g, store, u);
        let delta = g.softplus(dt);
        let bm = self.b_proj.forward(g, store, u);
        let cm = self.c_proj.forward(g, store, u);
        let a_log = g.param(store, self.a_log);
        let a = g.exp(a_log);
        let a = g.scale(a, -1.0);
        let d = g.param(store, self.d_skip);
        let y = g.selective_scan(u, delta, a, bm, cm, d, segs);
        let gate = g.silu(z);
        let y = g.mul(y, gate);
        self.out.forward(g, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::selective_scan;
    use crate::rng::rng_for;

    #[test]
    fn accumulator_case_gives_prefix_sums() {
        // decay 1 (A = 0), Δ = 1, B = C = 1, D = 0 → h_t = Σ_{s≤t} x_s.
        let x = Mat::from_shape_vec((5, 1), vec![1.0, -2.0, 0.5, 4.0, 3.0]).unwrap();
        let ones = Mat::ones((5, 1));
        let (y, _) = selective_scan(
            &x,
            &ones,
            &Mat::zeros((1, 1)),
            &ones,
            &ones,
            &Mat::zeros((1, 1)),
            &Segments::uniform(1, 5),
        );
        assert_eq!(y.column(0).to_vec(), vec![1.0, -1.0, -0.5, 3.5, 6.5]);
    }

    #[test]
    fn layer_is_causal_and_shape_preserving() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(4, "ssm", &[]);
        let ssm = SelectiveSsm::new(&mut store, "ssm", 6, &SsmConfig::default(), &mut rng).unwrap();
        let input = uniform(9, 6, 1.0, &mut rng);
        let run = |m: &Mat| {
            let mut g = Graph::new();
            let x = g.constant(m.clone());
            let y = ssm.forward(&mut g, &store, x, &Segments::uniform(1, 9)).unwrap();
            g.value(y).clone()
        };
        let base = run(&input);
        assert_eq!(base.dim(), (9, 6));
        let mut changed = input.clone();
        changed.row_mut(5).mapv_inplace(|v| v + 1.0);
        let after = run(&changed);
        for t in 0..5 {
            assert_eq!(base.row(t), after.row(t));
        }
        assert_ne!(base.row(5), after.row(5));
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(5, "ssm", &[]);
        let ssm = SelectiveSsm::new(&mut store, "ssm", 4, &SsmConfig::default(), &mut rng).unwrap();
        let mut g = Graph::new();
        let empty = g.constant(Mat::zeros((0, 4)));
        assert!(ssm.forward(&mut g, &store, empty, &Segments::from_lengths(&[])).is_err());
        let wrong = g.constant(Mat::zeros((3, 5)));
        assert!(ssm.forward(&mut g, &store, wrong, &Segments::uniform(1, 3)).is_err());
        let bad = SsmConfig {
            d_state: 0,
            ..SsmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
