//! Modality-specific self-supervised backbone: a masked autoencoder over
//! frame tokens trained jointly with a two-view NT-Xent objective.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::data::{channel_index, FrameConfig, FrameLayout};
use crate::error::{ensure, Error, Result};
use crate::losses::{joint_loss, nt_xent, recon_loss, PairLayout, ReconTerm};
use crate::mask::{sample_mask, MaskPlan};
use crate::nn::layers::{positional_encoding, tiled_positions};
use crate::nn::{
    read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Ctx, Linear, ParamId, ParamStore, ProjectionHead,
    Transformer, TransformerAdapters, TransformerConfig,
};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::signal::{EpochSet, Modality};
use crate::train::{shuffled_batches, LossRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// Widths of the projection MLP after the pooled embedding; the last
    /// entry is the embedding size the contrastive loss sees.
    pub projection_hidden: Vec<usize>,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub frame_size_s: f64,
    pub overlap: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            enc_dim: 768,
            enc_depth: 4,
            enc_heads: 8,
            dec_dim: 256,
            dec_depth: 3,
            dec_heads: 8,
            projection_hidden: vec![1024, 512],
            temperature: 0.05,
            mask_ratio: 0.75,
            frame_size_s: 3.0,
            overlap: 0.75,
            dropout: 0.0,
            epochs: 50,
            batch_size: 1024,
            lr: 2e-5,
            weight_decay: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.decoder().validate()?;
        ensure!(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            "backbone mask_ratio must lie in (0, 1), got {}",
            self.mask_ratio
        );
        ensure!(self.temperature > 0.0, "backbone temperature must be positive");
        ensure!(
            self.projection_hidden.len() >= 2 && self.projection_hidden.iter().all(|&w| w > 0),
            "projection_hidden needs at least two positive widths, got {:?}",
            self.projection_hidden
        );
        ensure!(self.batch_size >= 2, "backbone batch_size must be at least 2");
        ensure!(self.lr > 0.0, "backbone lr must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        FrameLayout::new(&self.frame())?;
        Ok(())
    }

    pub fn frame(&self) -> FrameConfig {
        FrameConfig {
            frame_size_s: self.frame_size_s,
            overlap: self.overlap,
        }
    }

    pub fn encoder(&self) -> TransformerConfig {
        TransformerConfig {
            dropout: self.dropout,
            ..TransformerConfig::new(self.enc_dim, self.enc_depth, self.enc_heads)
        }
    }

    fn decoder(&self) -> TransformerConfig {
        TransformerConfig {
            dropout: self.dropout,
            ..TransformerConfig::new(self.dec_dim, self.dec_depth, self.dec_heads)
        }
    }
}

/// Build a projection head from a width list whose last entry is the output.
pub(crate) fn projection_head(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    widths: &[usize],
    rng: &mut Rng,
) -> Result<ProjectionHead> {
    ensure!(widths.len() >= 2, "projection widths need at least two entries");
    let (hidden, out) = widths.split_at(widths.len() - 1);
    ProjectionHead::new(store, name, in_dim, hidden, out[0], rng)
}

/// Per-frame patch embedding, sinusoidal positions and a transformer encoder.
/// Shared by the backbone and, with adapters, by the fusion model.
#[derive(Clone, Debug)]
pub struct SignalEncoder {
    pub patch: Linear,
    pub encoder: Transformer,
    pub frame_len: usize,
    pub tokens: usize,
    pos: Mat,
}

impl SignalEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: &FrameLayout,
        cfg: &TransformerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(SignalEncoder {
            patch: Linear::new(store, &format!("{name}.patch"), layout.frame_len, cfg.dim, true, rng),
            encoder: Transformer::new(store, &format!("{name}.encoder"), cfg, rng)?,
            frame_len: layout.frame_len,
            tokens: layout.tokens(),
            pos: positional_encoding(layout.tokens(), cfg.dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.cfg.dim
    }

    /// Number of sequences stacked in `frames`, after shape checks.
    pub fn batch_of(&self, frames: &Mat) -> Result<usize> {
        let (rows, cols) = frames.dim();
        ensure!(
            cols == self.frame_len,
            "frame length {cols} does not match the embedding's {}",
            self.frame_len
        );
        ensure!(
            rows > 0 && rows % self.tokens == 0,
            "{rows} frame rows is not a whole number of {}-token epochs",
            self.tokens
        );
        Ok(rows / self.tokens)
    }

    /// Patch embedding plus positions for `B` stacked sequences.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, frames: &Mat) -> Result<Var> {
        let b = self.batch_of(frames)?;
        let x = g.constant(frames.clone());
        let x = self.patch.forward(g, store, x);
        let pos = g.constant(tiled_positions(b, &self.pos));
        Ok(g.add(x, pos))
    }

    /// Encode every token of every sequence.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Mat,
        adapters: Option<&TransformerAdapters>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let b = self.batch_of(frames)?;
        let x = self.embed(g, store, frames)?;
        self.encoder
            .forward(g, store, x, &Segments::uniform(b, self.tokens), adapters, ctx)
    }

    /// Encode only the kept tokens of each sequence; rows come out grouped
    /// per sample in ascending position order.
    pub fn encode_kept(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Mat,
        plans: &[MaskPlan],
        ctx: &mut Ctx,
    ) -> Result<(Var, Segments)> {
        let b = self.batch_of(frames)?;
        ensure!(plans.len() == b, "{} mask plans for {b} sequences", plans.len());
        ensure!(
            plans.iter().all(|p| p.n == self.tokens),
            "mask plan length differs from {} tokens",
            self.tokens
        );
        let x = self.embed(g, store, frames)?;
        let rows: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.kept.iter().map(move |&k| i * self.tokens + k))
            .collect();
        let x = g.select_rows(x, Arc::new(rows));
        let segs = Segments::from_lengths(&plans.iter().map(|p| p.kept.len()).collect::<Vec<_>>());
        let h = self.encoder.forward(g, store, x, &segs, None, ctx)?;
        Ok((h, segs))
    }
}

/// Row map that places kept rows (`0..K`) and a single mask row (index `K`)
/// back into full-length sequences.
pub(crate) fn unshuffle_index(plans: &[MaskPlan], n: usize) -> Vec<usize> {
    let kept_total: usize = plans.iter().map(|p| p.kept.len()).sum();
    let mut idx = Vec::with_capacity(plans.len() * n);
    let mut offset = 0;
    for p in plans {
        let mut slot = vec![kept_total; n];
        for (j, &k) in p.kept.iter().enumerate() {
            slot[k] = offset + j;
        }
        idx.extend(slot);
        offset += p.kept.len();
    }
    idx
}

/// Encoder outputs for one epoch of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub modality: Modality,
    pub subject_id: String,
    pub epoch_index: usize,
}

pub struct BackboneLosses {
    pub recon: Var,
    pub contra: Var,
    pub total: Var,
    /// Projected, normalised embeddings of the two views.
    pub views: [Var; 2],
}

#[derive(Clone, Debug)]
pub struct BackboneModel {
    pub cfg: BackboneConfig,
    pub modality: Modality,
    pub layout: FrameLayout,
    pub store: ParamStore,
    pub encoder: SignalEncoder,
    dec_embed: Linear,
    mask_token: ParamId,
    decoder: Transformer,
    dec_out: Linear,
    head: ProjectionHead,
    dec_pos: Mat,
}

impl BackboneModel {
    pub fn new(modality: Modality, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = FrameLayout::new(&cfg.frame())?;
        let mut rng = rng_for(seed, "backbone-init", &[modality as u64]);
        let mut store = ParamStore::new();
        let encoder = SignalEncoder::new(&mut store, "enc", &layout, &cfg.encoder(), &mut rng)?;
        let dec_embed = Linear::new(&mut store, "dec.embed", cfg.enc_dim, cfg.dec_dim, true, &mut rng);
        let mask_token = store.add(
            "dec.mask_token",
            crate::nn::params::trunc_normal(1, cfg.dec_dim, crate::nn::layers::INIT_STD, &mut rng),
            true,
        );
        let decoder = Transformer::new(&mut store, "dec", &cfg.decoder(), &mut rng)?;
        let dec_out = Linear::new(&mut store, "dec.out", cfg.dec_dim, layout.frame_len, true, &mut rng);
        let head = projection_head(&mut store, "head", cfg.enc_dim, &cfg.projection_hidden, &mut rng)?;
        let dec_pos = positional_encoding(layout.tokens(), cfg.dec_dim);
        Ok(BackboneModel {
            cfg: cfg.clone(),
            modality,
            layout,
            store,
            encoder,
            dec_embed,
            mask_token,
            decoder,
            dec_out,
            head,
            dec_pos,
        })
    }

    /// Draw the two views' mask plans for a batch.
    pub fn sample_plans(&self, batch: usize, rng: &mut Rng) -> Result<[Vec<MaskPlan>; 2]> {
        let n = self.layout.tokens();
        let mut draw = || (0..batch).map(|_| sample_mask(n, self.cfg.mask_ratio, rng)).collect::<Result<Vec<_>>>();
        Ok([draw()?, draw()?])
    }

    /// Reconstruction of every frame plus the pooled, projected embedding
    /// for one masked view.
    fn view(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Mat,
        plans: &[MaskPlan],
        ctx: &mut Ctx,
    ) -> Result<(Var, Var)> {
        let n = self.layout.tokens();
        let (h, segs) = self.encoder.encode_kept(g, store, frames, plans, ctx)?;
        let d = self.dec_embed.forward(g, store, h);
        let mt = g.param(store, self.mask_token);
        let cat = g.concat_rows(&[d, mt]);
        let full = g.select_rows(cat, Arc::new(unshuffle_index(plans, n)));
        let pos = g.constant(tiled_positions(plans.len(), &self.dec_pos));
        let full = g.add(full, pos);
        let dec = self
            .decoder
            .forward(g, store, full, &Segments::uniform(plans.len(), n), None, ctx)?;
        let recon = self.dec_out.forward(g, store, dec);
        let pooled = g.segment_mean(h, &segs);
        let z = self.head.forward(g, store, pooled);
        Ok((recon, g.l2_normalize_rows(z)))
    }

    /// Losses for one batch of single-channel epochs stacked as `(B·N) × L`
    /// frames. The reconstruction term averages both views.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Mat,
        plans: &[Vec<MaskPlan>; 2],
        ctx: &mut Ctx,
    ) -> Result<BackboneLosses> {
        let b = self.encoder.batch_of(frames)?;
        ensure!(b >= 2, "backbone pretraining needs a batch of at least 2 epochs, got {b}");
        let target = g.constant(frames.clone());
        let (r1, z1) = self.view(g, store, frames, &plans[0], ctx)?;
        let (r2, z2) = self.view(g, store, frames, &plans[1], ctx)?;
        let n = self.layout.tokens();
        let m1: Vec<Vec<usize>> = plans[0].iter().map(|p| p.masked.clone()).collect();
        let m2: Vec<Vec<usize>> = plans[1].iter().map(|p| p.masked.clone()).collect();
        let recon = recon_loss(
            g,
            &[
                ReconTerm { target, recon: r1, tokens: n, masked: &m1 },
                ReconTerm { target, recon: r2, tokens: n, masked: &m2 },
            ],
        )?;
        let contra = nt_xent(g, z1, z2, self.cfg.temperature, PairLayout::Interleaved)?;
        let total = joint_loss(g, recon, contra, 1.0)?;
        Ok(BackboneLosses {
            recon,
            contra,
            total,
            views: [z1, z2],
        })
    }

    /// Full token sequences (`B·N × enc_dim`) in eval mode.
    pub fn encode_frames(&self, frames: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let h = self.encoder.encode(&mut g, &self.store, frames, None, &mut Ctx::eval())?;
        Ok(g.value(h).clone())
    }

    pub fn encode_epoch(&self, set: &EpochSet, epoch: usize, channel: &str) -> Result<TokenSequence> {
        let c = channel_index(set, channel)?;
        let sample = set
            .epochs
            .get(epoch)
            .ok_or_else(|| Error::invalid(format!("subject {} has no epoch {epoch}", set.subject_id)))?;
        ensure!(
            set.channels[c].modality == self.modality,
            "channel {channel} is {}, backbone is {}",
            set.channels[c].modality,
            self.modality
        );
        let mut buf = Vec::new();
        self.layout.push_frames(&sample.signals[c], &mut buf);
        let frames = Mat::from_shape_vec((self.layout.tokens(), self.layout.frame_len), buf).expect("frame shape");
        Ok(TokenSequence {
            tokens: self.encode_frames(&frames)?,
            modality: self.modality,
            subject_id: set.subject_id.clone(),
            epoch_index: sample.epoch_index,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({"kind": "backbone", "modality": self.modality, "config": self.cfg});
        write_checkpoint(path, &self.store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = read_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
            return Err(Error::corrupt(path, "not a backbone checkpoint"));
        }
        let modality: Modality = serde_json::from_value(meta["modality"].clone())
            .map_err(|e| Error::corrupt(path, format!("modality: {e}")))?;
        let cfg: BackboneConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::corrupt(path, format!("config: {e}")))?;
        let mut model = BackboneModel::new(modality, &cfg, 0)?;
        model.store.load_values(&store)?;
        Ok(model)
    }
}

/// Every (epoch, channel) pair of the given modality across `sets`.
fn modality_samples(sets: &[EpochSet], modality: Modality) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        for (c, ch) in set.channels.iter().enumerate() {
            if ch.modality == modality {
                out.extend((0..set.epochs.len()).map(|e| (s, e, c)));
            }
        }
    }
    out
}

/// Pretrain one backbone on every channel of `modality`. `on_epoch` runs
/// after each training epoch (e.g. to write a checkpoint).
pub fn pretrain_backbone(
    modality: Modality,
    sets: &[EpochSet],
    cfg: &BackboneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &BackboneModel) -> Result<()>,
) -> Result<(BackboneModel, Vec<LossRecord>)> {
    let mut model = BackboneModel::new(modality, cfg, seed)?;
    let samples = modality_samples(sets, modality);
    ensure!(
        samples.len() >= 2,
        "need at least 2 {modality} epochs to pretrain, found {}",
        samples.len()
    );
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::with_lr(cfg.lr)
    })?;
    let (n, l) = (model.layout.tokens(), model.layout.frame_len);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng_for(seed, "backbone-order", &[modality as u64, epoch as u64]);
        for batch in shuffled_batches(samples.len(), cfg.batch_size, 2, &mut order_rng) {
            let step = opt.steps() + 1;
            let mut buf = Vec::with_capacity(batch.len() * n * l);
            for &i in &batch {
                let (s, e, c) = samples[i];
                model.layout.push_frames(&sets[s].epochs[e].signals[c], &mut buf);
            }
            let frames = Mat::from_shape_vec((batch.len() * n, l), buf).expect("frame shape");
            let plans = model.sample_plans(batch.len(), &mut rng_for(seed, "backbone-mask", &[modality as u64, step]))?;
            let mut ctx = Ctx::train(derive_seed(seed, "backbone-dropout", &[modality as u64, step]));
            let mut g = Graph::new();
            let losses = model.loss(&mut g, &model.store, &frames, &plans, &mut ctx)?;
            let rec = LossRecord {
                epoch,
                step,
                recon: g.scalar(losses.recon),
                contra: g.scalar(losses.contra),
                total: g.scalar(losses.total),
                lr: cfg.lr,
            };
            ensure!(rec.total.is_finite(), "{modality} backbone loss diverged at step {step}");
            let grads = g.backward(losses.total);
            opt.step(&mut model.store, &grads);
            log.push(rec);
        }
        log::info!(
            "{modality} backbone epoch {epoch}: loss {:.4}",
            log.last().map_or(f64::NAN, |r: &LossRecord| r.total)
        );
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}
