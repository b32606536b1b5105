use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Segments, Var};
use crate::error::{ensure, Result};
use crate::nn::layers::{dropout, Ctx, LayerNorm, Linear, LoraAdapter, LoraConfig};
use crate::nn::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub dropout: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl TransformerConfig {
    pub fn new(dim: usize, depth: usize, heads: usize) -> Self {
        TransformerConfig {
            dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0 && self.depth > 0 && self.heads > 0, "transformer sizes must be positive");
        ensure!(
            self.dim % self.heads == 0,
            "dim {} is not divisible by heads {}",
            self.dim,
            self.heads
        );
        ensure!(self.mlp_ratio > 0.0, "mlp_ratio must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Adapters for every projection inside one block.
#[derive(Clone, Debug)]
pub struct BlockAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
    pub o: LoraAdapter,
    pub fc1: LoraAdapter,
    pub fc2: LoraAdapter,
}

#[derive(Clone, Debug)]
pub struct TransformerAdapters {
    pub blocks: Vec<BlockAdapters>,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub blocks: Vec<Block>,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.dim, cfg.hidden());
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("{name}.blocks.{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.attn.q"), d, d, true, rng),
                    k: Linear::new(store, &format!("{p}.attn.k"), d, d, true, rng),
                    v: Linear::new(store, &format!("{p}.attn.v"), d, d, true, rng),
                    o: Linear::new(store, &format!("{p}.attn.o"), d, d, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    fc1: Linear::new(store, &format!("{p}.mlp.fc1"), d, h, true, rng),
                    fc2: Linear::new(store, &format!("{p}.mlp.fc2"), h, d, true, rng),
                }
            })
            .collect();
        Ok(Transformer {
            cfg: cfg.clone(),
            blocks,
        })
    }

    /// Build adapters for every block, registered under `name`.
    pub fn adapters(
        &self,
        store: &mut ParamStore,
        name: &str,
        cfg: &LoraConfig,
        rng: &mut Rng,
    ) -> Result<TransformerAdapters> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("{name}.blocks.{i}");
                Ok(BlockAdapters {
                    q: LoraAdapter::new(store, &format!("{p}.attn.q"), &b.q, cfg, rng)?,
                    k: LoraAdapter::new(store, &format!("{p}.attn.k"), &b.k, cfg, rng)?,
                    v: LoraAdapter::new(store, &format!("{p}.attn.v"), &b.v, cfg, rng)?,
                    o: LoraAdapter::new(store, &format!("{p}.attn.o"), &b.o, cfg, rng)?,
                    fc1: LoraAdapter::new(store, &format!("{p}.mlp.fc1"), &b.fc1, cfg, rng)?,
                    fc2: LoraAdapter::new(store, &format!("{p}.mlp.fc2"), &b.fc2, cfg, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerAdapters { blocks })
    }

    /// Encode a stack of token sequences (rows grouped by `segs`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segs: &Segments,
        adapters: Option<&TransformerAdapters>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (rows, cols) = g.value(x).dim();
        ensure!(rows > 0, "transformer input has no tokens");
        ensure!(
            cols == self.cfg.dim,
            "transformer expects dim {}, got {cols}",
            self.cfg.dim
        );
        ensure!(segs.total_rows() == rows, "segments cover {} rows, input has {rows}", segs.total_rows());
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let ad = adapters.map(|a| &a.blocks[i]);
            h = self.block_forward(g, store, block, h, segs, ad, ctx);
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &Block,
        x: Var,
        segs: &Segments,
        ad: Option<&BlockAdapters>,
        ctx: &mut Ctx,
    ) -> Var {
        let attn_ctx = self.attention_context(g, store, b, x, segs, ad, ctx);
        self.block_tail(g, store, b, x, attn_ctx, ad, ctx)
    }

    /// Attention output before the output projection.
    #[allow(clippy::too_many_arguments)]
    fn attention_context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &Block,
        x: Var,
        segs: &Segments,
        ad: Option<&BlockAdapters>,
        ctx: &mut Ctx,
    ) -> Var {
        let h = b.ln1.forward(g, store, x);
        let q = b.q.forward_adapted(g, store, h, ad.map(|a| &a.q), ctx);
        let k = b.k.forward_adapted(g, store, h, ad.map(|a| &a.k), ctx);
        let v = b.v.forward_adapted(g, store, h, ad.map(|a| &a.v), ctx);
        g.attention(q, k, v, segs, self.cfg.heads)
    }

    /// Output projection, residual and MLP half of a block.
    #[allow(clippy::too_many_arguments)]
    fn block_tail(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &Block,
        x: Var,
        attn_ctx: Var,
        ad: Option<&BlockAdapters>,
        ctx: &mut Ctx,
    ) -> Var {
        let a = b.o.forward_adapted(g, store, attn_ctx, ad.map(|a| &a.o), ctx);
        let a = dropout(g, a, self.cfg.dropout, ctx);
        let x = g.add(x, a);
        let h = b.ln2.forward(g, store, x);
        let h = b.fc1.forward_adapted(g, store, h, ad.map(|a| &a.fc1), ctx);
        let h = g.gelu(h);
        let h = b.fc2.forward_adapted(g, store, h, ad.map(|a| &a.fc2), ctx);
        let h = dropout(g, h, self.cfg.dropout, ctx);
        g.add(x, h)
    }

    /// Run every block except the tail of the last one. Returns the last
    /// block's residual input and its attention context (pre output
    /// projection), which together determine the encoder output through
    /// [`Transformer::finish_last_block`].
    pub fn forward_to_last_projection(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segs: &Segments,
        ctx: &mut Ctx,
    ) -> Result<(Var, Var)> {
        let (rows, cols) = g.value(x).dim();
        ensure!(rows > 0 && cols == self.cfg.dim, "bad transformer input shape ({rows}, {cols})");
        let last = self.blocks.len() - 1;
        let mut h = x;
        for b in &self.blocks[..last] {
            h = self.block_forward(g, store, b, h, segs, None, ctx);
        }
        let attn = self.attention_context(g, store, &self.blocks[last], h, segs, None, ctx);
        Ok((h, attn))
    }

    pub fn finish_last_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        residual: Var,
        attn_ctx: Var,
        ctx: &mut Ctx,
    ) -> Var {
        let last = self.blocks.last().expect("depth > 0");
        self.block_tail(g, store, last, residual, attn_ctx, None, ctx)
    }
}
