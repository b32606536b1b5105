//! Multimodal fusion model: per-stream adapted encoders, token masking, a
//! shared multimodal transformer, per-stream decoders and the joint
//! reconstruction + contrastive objective.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::backbone::{projection_head, unshuffle_index, BackboneConfig, BackboneModel, SignalEncoder};
use crate::data::{select_streams, stream_frames, EpochRef, FrameLayout};
use crate::error::{ensure, Error, Result};
use crate::losses::{joint_loss, nt_xent, recon_loss, PairLayout, ReconTerm};
use crate::mask::{sample_mask, MaskPlan};
use crate::nn::layers::{positional_encoding, tiled_positions, INIT_STD};
use crate::nn::params::trunc_normal;
use crate::nn::{
    read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Ctx, Linear, LoraConfig, ParamId, ParamStore,
    ProjectionHead, Transformer, TransformerAdapters, TransformerConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::signal::{ChannelInfo, EpochSet, Modality};
use crate::train::{shuffled_batches, LossRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Stream combination such as `eeg2+eog2+emg1+ecg1`.
    pub modalities: String,
    pub mm_dim: usize,
    pub mm_depth: usize,
    pub mm_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub projection_hidden: Vec<usize>,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub lora: LoraConfig,
    /// Weight of the contrastive term.
    pub alpha: f64,
    pub pair_layout: PairLayout,
    /// Stop gradients through the reconstruction targets.
    pub detach_target: bool,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            modalities: "eeg2+eog2+emg1+ecg1".into(),
            mm_dim: 512,
            mm_depth: 4,
            mm_heads: 8,
            dec_dim: 256,
            dec_depth: 3,
            dec_heads: 8,
            projection_hidden: vec![512, 256],
            temperature: 0.1,
            mask_ratio: 0.4,
            lora: LoraConfig::default(),
            alpha: 1.0,
            pair_layout: PairLayout::Interleaved,
            detach_target: false,
            dropout: 0.0,
            epochs: 100,
            batch_size: 512,
            lr: 1e-4,
            weight_decay: 0.01,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.mm().validate()?;
        self.dec().validate()?;
        ensure!(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            "fusion mask_ratio must lie in (0, 1), got {}",
            self.mask_ratio
        );
        ensure!(self.temperature > 0.0, "fusion temperature must be positive");
        ensure!(self.alpha >= 0.0 && self.alpha.is_finite(), "fusion alpha must be ≥ 0");
        ensure!(
            self.projection_hidden.len() >= 2 && self.projection_hidden.iter().all(|&w| w > 0),
            "projection_hidden needs at least two positive widths, got {:?}",
            self.projection_hidden
        );
        ensure!(self.batch_size >= 2, "fusion batch_size must be at least 2");
        ensure!(self.lr > 0.0, "fusion lr must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        crate::data::parse_modalities(&self.modalities)?;
        Ok(())
    }

    fn mm(&self) -> TransformerConfig {
        TransformerConfig {
            dropout: self.dropout,
            ..TransformerConfig::new(self.mm_dim, self.mm_depth, self.mm_heads)
        }
    }

    fn dec(&self) -> TransformerConfig {
        TransformerConfig {
            dropout: self.dropout,
            ..TransformerConfig::new(self.dec_dim, self.dec_depth, self.dec_heads)
        }
    }
}

#[derive(Clone, Debug)]
struct StreamDecoder {
    mask_token: ParamId,
    embed: Linear,
    blocks: Transformer,
    out: Linear,
}

/// Frames of every stream for a batch of epochs, each `(B·N) × L`.
#[derive(Clone, Debug)]
pub struct FusionBatch {
    pub frames: Vec<Mat>,
    pub batch: usize,
}

/// Fusion tokens of a forward pass plus where each stream's tokens sit.
pub struct Fused {
    pub tokens: Var,
    /// One segment per sample covering all its streams' tokens.
    pub segs: Segments,
    /// Row indices into `tokens` for each stream, grouped per sample in
    /// ascending position order.
    pub stream_rows: Vec<Arc<Vec<usize>>>,
}

pub struct FusionLosses {
    pub recon: Var,
    pub contra: Var,
    pub total: Var,
    /// Normalised signal embeddings per stream and the fusion embedding.
    pub sh: Vec<Var>,
    pub fh: Var,
    pub fused: Fused,
    /// Reconstructions of every token per stream.
    pub recon_tokens: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub enc_cfg: BackboneConfig,
    pub streams: Vec<ChannelInfo>,
    pub layout: FrameLayout,
    pub store: ParamStore,
    encoders: BTreeMap<Modality, SignalEncoder>,
    adapters: Vec<TransformerAdapters>,
    proj: Vec<Linear>,
    pos: Vec<Mat>,
    pub mm: Transformer,
    decoders: Vec<StreamDecoder>,
    dec_pos: Mat,
    head_fusion: ProjectionHead,
    head_signal: Vec<ProjectionHead>,
}

/// Names of base encoder weights; frozen for the whole fusion stage.
pub fn is_base_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

impl FusionModel {
    /// Fresh model over the streams `cfg.modalities` selects from `channels`.
    /// Base encoders start random; see [`FusionModel::load_backbone`].
    pub fn new(cfg: &FusionConfig, enc_cfg: &BackboneConfig, channels: &[ChannelInfo], seed: u64) -> Result<Self> {
        cfg.validate()?;
        enc_cfg.validate()?;
        let streams = select_streams(channels, &cfg.modalities)?;
        let layout = FrameLayout::new(&enc_cfg.frame())?;
        let n = layout.tokens();
        let mut rng = rng_for(seed, "fusion-init", &[]);
        let mut store = ParamStore::new();
        let mut encoders = BTreeMap::new();
        for s in &streams {
            if !encoders.contains_key(&s.modality) {
                let enc = SignalEncoder::new(
                    &mut store,
                    &format!("enc.{}", s.modality),
                    &layout,
                    &enc_cfg.encoder(),
                    &mut rng,
                )?;
                encoders.insert(s.modality, enc);
            }
        }
        let mut adapters = Vec::new();
        let mut proj = Vec::new();
        for (i, s) in streams.iter().enumerate() {
            let enc = &encoders[&s.modality];
            adapters.push(enc.encoder.adapters(&mut store, &format!("lora.{i}"), &cfg.lora, &mut rng)?);
            proj.push(Linear::new(&mut store, &format!("proj.{i}"), enc_cfg.enc_dim, cfg.mm_dim, true, &mut rng));
        }
        let mm = Transformer::new(&mut store, "mm", &cfg.mm(), &mut rng)?;
        let mut decoders = Vec::new();
        for i in 0..streams.len() {
            let p = format!("dec.{i}");
            decoders.push(StreamDecoder {
                mask_token: store.add(format!("{p}.mask_token"), trunc_normal(1, cfg.mm_dim, INIT_STD, &mut rng), true),
                embed: Linear::new(&mut store, &format!("{p}.embed"), cfg.mm_dim, cfg.dec_dim, true, &mut rng),
                blocks: Transformer::new(&mut store, &p, &cfg.dec(), &mut rng)?,
                out: Linear::new(&mut store, &format!("{p}.out"), cfg.dec_dim, enc_cfg.enc_dim, true, &mut rng),
            });
        }
        let head_fusion = projection_head(&mut store, "head.fusion", cfg.mm_dim, &cfg.projection_hidden, &mut rng)?;
        let head_signal = (0..streams.len())
            .map(|i| {
                projection_head(
                    &mut store,
                    &format!("head.signal.{i}"),
                    enc_cfg.enc_dim,
                    &cfg.projection_hidden,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        store.set_trainable_where(|name| !is_base_encoder_param(name));
        Ok(FusionModel {
            cfg: cfg.clone(),
            enc_cfg: enc_cfg.clone(),
            pos: vec![positional_encoding(n, cfg.mm_dim); streams.len()],
            streams,
            layout,
            store,
            encoders,
            adapters,
            proj,
            mm,
            decoders,
            dec_pos: positional_encoding(n, cfg.dec_dim),
            head_fusion,
            head_signal,
        })
    }

    /// Build a model and copy in the pretrained encoder of every modality it uses.
    pub fn from_backbones(
        cfg: &FusionConfig,
        channels: &[ChannelInfo],
        backbones: &[BackboneModel],
        seed: u64,
    ) -> Result<Self> {
        let first = backbones
            .first()
            .ok_or_else(|| Error::Dependency("no pretrained backbones supplied".into()))?;
        let mut model = FusionModel::new(cfg, &first.cfg, channels, seed)?;
        for m in model.modalities() {
            let bb = backbones
                .iter()
                .find(|b| b.modality == m)
                .ok_or_else(|| Error::Dependency(format!("no pretrained {m} backbone")))?;
            model.load_backbone(bb)?;
        }
        Ok(model)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.encoders.keys().copied().collect()
    }

    pub fn load_backbone(&mut self, bb: &BackboneModel) -> Result<()> {
        ensure!(
            self.encoders.contains_key(&bb.modality),
            "model has no {} stream",
            bb.modality
        );
        ensure!(
            bb.cfg.enc_dim == self.enc_cfg.enc_dim
                && bb.cfg.enc_depth == self.enc_cfg.enc_depth
                && bb.cfg.enc_heads == self.enc_cfg.enc_heads
                && bb.layout == self.layout,
            "{} backbone architecture does not match the fusion encoder",
            bb.modality
        );
        let copied = self
            .store
            .copy_prefixed(&bb.store, "enc.", &format!("enc.{}.", bb.modality))?;
        ensure!(copied > 0, "{} backbone has no encoder weights", bb.modality);
        Ok(())
    }

    pub fn tokens_per_stream(&self) -> usize {
        self.layout.tokens()
    }

    pub fn build_batch(&self, sets: &[EpochSet], refs: &[EpochRef]) -> Result<FusionBatch> {
        ensure!(!refs.is_empty(), "empty batch");
        let frames = self
            .streams
            .iter()
            .map(|s| stream_frames(sets, refs, &s.name, &self.layout))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionBatch {
            frames,
            batch: refs.len(),
        })
    }

    /// Independent mask plans per (sample, stream): `plans[stream][sample]`.
    pub fn sample_plans(&self, batch: usize, seed: u64, step: u64) -> Result<Vec<Vec<MaskPlan>>> {
        (0..self.streams.len())
            .map(|m| {
                (0..batch)
                    .map(|b| {
                        let mut rng = rng_for(seed, "fusion-mask", &[step, b as u64, m as u64]);
                        sample_mask(self.layout.tokens(), self.cfg.mask_ratio, &mut rng)
                    })
                    .collect()
            })
            .collect()
    }

    /// Plans that keep every token.
    pub fn full_plans(&self, batch: usize) -> Vec<Vec<MaskPlan>> {
        let n = self.layout.tokens();
        let p = MaskPlan {
            n,
            kept: (0..n).collect(),
            masked: Vec::new(),
        };
        vec![vec![p; batch]; self.streams.len()]
    }

    /// Signal tokens of every stream through its adapted encoder.
    pub fn encode_streams(&self, g: &mut Graph, store: &ParamStore, batch: &FusionBatch, ctx: &mut Ctx) -> Result<Vec<Var>> {
        ensure!(batch.frames.len() == self.streams.len(), "batch has {} streams, model {}", batch.frames.len(), self.streams.len());
        self.streams
            .iter()
            .enumerate()
            .map(|(i, s)| self.encoders[&s.modality].encode(g, store, &batch.frames[i], Some(&self.adapters[i]), ctx))
            .collect()
    }

    /// Per-stream projection into the multimodal width plus positions.
    pub fn project_and_pose(&self, g: &mut Graph, store: &ParamStore, stream: usize, e: Var) -> Result<Var> {
        ensure!(stream < self.streams.len(), "no stream {stream}");
        let (rows, cols) = g.value(e).dim();
        ensure!(cols == self.enc_cfg.enc_dim, "stream {stream} tokens have dim {cols}, expected {}", self.enc_cfg.enc_dim);
        let n = self.layout.tokens();
        ensure!(rows % n == 0, "{rows} token rows is not a multiple of {n}");
        let z = self.proj[stream].forward(g, store, e);
        let pos = g.constant(tiled_positions(rows / n, &self.pos[stream]));
        Ok(g.add(z, pos))
    }

    /// Concatenate each sample's kept tokens across streams and run the
    /// multimodal encoder.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: &[Var],
        plans: &[Vec<MaskPlan>],
        ctx: &mut Ctx,
    ) -> Result<Fused> {
        let (x, segs, stream_rows) = self.gather_kept(g, z, plans)?;
        let tokens = self.mm.forward(g, store, x, &segs, None, ctx)?;
        Ok(Fused {
            tokens,
            segs,
            stream_rows,
        })
    }

    fn gather_kept(
        &self,
        g: &mut Graph,
        z: &[Var],
        plans: &[Vec<MaskPlan>],
    ) -> Result<(Var, Segments, Vec<Arc<Vec<usize>>>)> {
        let m_count = z.len();
        ensure!(m_count > 0 && plans.len() == m_count, "{} streams but {} plan sets", m_count, plans.len());
        let n = self.layout.tokens();
        let batch = plans[0].len();
        for (m, p) in plans.iter().enumerate() {
            ensure!(p.len() == batch, "stream {m} has {} plans, expected {batch}", p.len());
            ensure!(g.value(z[m]).nrows() == batch * n, "stream {m} has {} rows, plans imply {}", g.value(z[m]).nrows(), batch * n);
            for plan in p {
                ensure!(plan.n == n, "plan length {} differs from {n} tokens", plan.n);
                ensure!(!plan.kept.is_empty(), "stream {m} keeps no tokens");
            }
        }
        let block = batch * n;
        let mut order = Vec::new();
        let mut lens = Vec::with_capacity(batch);
        let mut stream_rows = vec![Vec::new(); m_count];
        for b in 0..batch {
            let start = order.len();
            for (m, p) in plans.iter().enumerate() {
                for &k in &p[b].kept {
                    stream_rows[m].push(order.len());
                    order.push(m * block + b * n + k);
                }
            }
            lens.push(order.len() - start);
        }
        let all = g.concat_rows(z);
        let x = g.select_rows(all, Arc::new(order));
        Ok((x, Segments::from_lengths(&lens), stream_rows.into_iter().map(Arc::new).collect()))
    }

    /// Fill the masked positions of one stream with its mask token, then
    /// decode every position back to the signal-token width.
    pub fn decode_stream(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stream: usize,
        fused: &Fused,
        plans: &[MaskPlan],
        ctx: &mut Ctx,
    ) -> Result<Var> {
        ensure!(stream < self.streams.len(), "no stream {stream}");
        let n = self.layout.tokens();
        let kept: usize = plans.iter().map(|p| p.kept.len()).sum();
        ensure!(
            kept == fused.stream_rows[stream].len(),
            "plans keep {kept} tokens but stream {stream} has {}",
            fused.stream_rows[stream].len()
        );
        let d = &self.decoders[stream];
        let h = g.select_rows(fused.tokens, fused.stream_rows[stream].clone());
        let mt = g.param(store, d.mask_token);
        let cat = g.concat_rows(&[h, mt]);
        let full = g.select_rows(cat, Arc::new(unshuffle_index(plans, n)));
        let x = d.embed.forward(g, store, full);
        let pos = g.constant(tiled_positions(plans.len(), &self.dec_pos));
        let x = g.add(x, pos);
        let x = d.blocks.forward(g, store, x, &Segments::uniform(plans.len(), n), None, ctx)?;
        Ok(d.out.forward(g, store, x))
    }

    /// Full training objective for one batch under the given plans.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &FusionBatch,
        plans: &[Vec<MaskPlan>],
        ctx: &mut Ctx,
    ) -> Result<FusionLosses> {
        ensure!(batch.batch >= 2, "fusion pretraining needs a batch of at least 2 epochs, got {}", batch.batch);
        let n = self.layout.tokens();
        let e = self.encode_streams(g, store, batch, ctx)?;
        let z = e
            .iter()
            .enumerate()
            .map(|(m, &em)| self.project_and_pose(g, store, m, em))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse(g, store, &z, plans, ctx)?;
        let mut recon_tokens = Vec::with_capacity(e.len());
        for (m, p) in plans.iter().enumerate() {
            recon_tokens.push(self.decode_stream(g, store, m, &fused, p, ctx)?);
        }
        let masked: Vec<Vec<Vec<usize>>> = plans
            .iter()
            .map(|p| p.iter().map(|plan| plan.masked.clone()).collect())
            .collect();
        let terms: Vec<ReconTerm<'_>> = e
            .iter()
            .zip(&recon_tokens)
            .zip(&masked)
            .map(|((&em, &rm), mk)| ReconTerm {
                target: if self.cfg.detach_target { g.detach(em) } else { em },
                recon: rm,
                tokens: n,
                masked: mk,
            })
            .collect();
        let recon = recon_loss(g, &terms)?;

        let pooled_f = g.segment_mean(fused.tokens, &fused.segs);
        let fh = self.head_fusion.forward(g, store, pooled_f);
        let fh = g.l2_normalize_rows(fh);
        let per_sample = Segments::uniform(batch.batch, n);
        let mut sh = Vec::with_capacity(e.len());
        let mut contra_terms = Vec::with_capacity(e.len());
        for (m, &em) in e.iter().enumerate() {
            let pooled = g.segment_mean(em, &per_sample);
            let s = self.head_signal[m].forward(g, store, pooled);
            let s = g.l2_normalize_rows(s);
            contra_terms.push(nt_xent(g, fh, s, self.cfg.temperature, self.cfg.pair_layout)?);
            sh.push(s);
        }
        let mut contra = contra_terms[0];
        for &c in &contra_terms[1..] {
            contra = g.add(contra, c);
        }
        let contra = g.scale(contra, 1.0 / contra_terms.len() as f64);
        let total = joint_loss(g, recon, contra, self.cfg.alpha)?;
        Ok(FusionLosses {
            recon,
            contra,
            total,
            sh,
            fh,
            fused,
            recon_tokens,
        })
    }

    /// Encoder-only pass with every token kept: fusion tokens of all
    /// streams, `B · Σ_m N_m` rows grouped per epoch.
    pub fn forward_features(&self, batch: &FusionBatch) -> Result<Mat> {
        let mut g = Graph::new();
        let fused = self.forward_unmasked(&mut g, &self.store, batch, &mut Ctx::eval())?;
        Ok(g.value(fused.tokens).clone())
    }

    fn forward_unmasked(&self, g: &mut Graph, store: &ParamStore, batch: &FusionBatch, ctx: &mut Ctx) -> Result<Fused> {
        let z = self.embed_full(g, store, batch, ctx)?;
        let plans = self.full_plans(batch.batch);
        self.fuse(g, store, &z, &plans, ctx)
    }

    fn embed_full(&self, g: &mut Graph, store: &ParamStore, batch: &FusionBatch, ctx: &mut Ctx) -> Result<Vec<Var>> {
        let e = self.encode_streams(g, store, batch, ctx)?;
        e.iter()
            .enumerate()
            .map(|(m, &em)| self.project_and_pose(g, store, m, em))
            .collect()
    }

    /// One vector per epoch: the mean of its fusion tokens.
    pub fn epoch_vectors(&self, batch: &FusionBatch) -> Result<Mat> {
        let mut g = Graph::new();
        let fused = self.forward_unmasked(&mut g, &self.store, batch, &mut Ctx::eval())?;
        let k = g.segment_mean(fused.tokens, &fused.segs);
        Ok(g.value(k).clone())
    }

    /// Tokens per epoch in [`FusionModel::forward_features`].
    pub fn feature_tokens(&self) -> usize {
        self.streams.len() * self.layout.tokens()
    }

    /// Inputs of the last multimodal block's output projection: the block's
    /// residual input and its attention context, each `B · Σ_m N_m × mm_dim`.
    /// Together with the live projection weights they determine the fusion
    /// tokens exactly (see [`FusionModel::finish_from_cache`]).
    pub fn last_block_cache(&self, batch: &FusionBatch) -> Result<(Mat, Mat)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let z = self.embed_full(&mut g, &self.store, batch, &mut ctx)?;
        let plans = self.full_plans(batch.batch);
        let (x, segs, _) = self.gather_kept(&mut g, &z, &plans)?;
        let (res, attn) = self.mm.forward_to_last_projection(&mut g, &self.store, x, &segs, &mut ctx)?;
        Ok((g.value(res).clone(), g.value(attn).clone()))
    }

    /// Finish the last block from cached inputs on a caller's graph so the
    /// output projection stays differentiable.
    pub fn finish_from_cache(&self, g: &mut Graph, store: &ParamStore, residual: Var, attn_ctx: Var) -> Var {
        self.mm.finish_last_block(g, store, residual, attn_ctx, &mut Ctx::eval())
    }

    /// Name prefix of the last multimodal block's attention output projection.
    pub fn last_attn_projection(&self) -> String {
        format!("mm.blocks.{}.attn.o.", self.cfg.mm_depth - 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "fusion",
            "config": self.cfg,
            "encoder": self.enc_cfg,
            "streams": self.streams,
        });
        write_checkpoint(path, &self.store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = read_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("fusion") {
            return Err(Error::corrupt(path, "not a fusion checkpoint"));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::corrupt(path, format!("manifest lacks {k}")));
        let cfg: FusionConfig = serde_json::from_value(field("config")?).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let enc: BackboneConfig = serde_json::from_value(field("encoder")?).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let streams: Vec<ChannelInfo> =
            serde_json::from_value(field("streams")?).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let mut model = FusionModel::new(&cfg, &enc, &streams, 0)?;
        model.store.load_values(&store)?;
        Ok(model)
    }
}

/// Pretrain the fusion stage on every epoch of `sets`. Base encoder weights
/// stay frozen; `on_epoch` runs after each training epoch.
pub fn pretrain_fusion(
    mut model: FusionModel,
    sets: &[EpochSet],
    seed: u64,
    mut on_epoch: impl FnMut(usize, &FusionModel) -> Result<()>,
) -> Result<(FusionModel, Vec<LossRecord>)> {
    let refs = crate::data::all_refs(sets);
    ensure!(refs.len() >= 2, "need at least 2 epochs to pretrain the fusion model, found {}", refs.len());
    let cfg = model.cfg.clone();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::with_lr(cfg.lr)
    })?;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng_for(seed, "fusion-order", &[epoch as u64]);
        for idx in shuffled_batches(refs.len(), cfg.batch_size, 2, &mut order_rng) {
            let step = opt.steps() + 1;
            let batch_refs: Vec<EpochRef> = idx.iter().map(|&i| refs[i]).collect();
            let batch = model.build_batch(sets, &batch_refs)?;
            let plans = model.sample_plans(batch.batch, seed, step)?;
            let mut ctx = Ctx::train(derive_seed(seed, "fusion-dropout", &[step]));
            let mut g = Graph::new();
            let losses = model.loss(&mut g, &model.store, &batch, &plans, &mut ctx)?;
            let rec = LossRecord {
                epoch,
                step,
                recon: g.scalar(losses.recon),
                contra: g.scalar(losses.contra),
                total: g.scalar(losses.total),
                lr: cfg.lr,
            };
            ensure!(rec.total.is_finite(), "fusion loss diverged at step {step}");
            let grads = g.backward(losses.total);
            opt.step(&mut model.store, &grads);
            log.push(rec);
        }
        log::info!("fusion epoch {epoch}: loss {:.4}", log.last().map_or(f64::NAN, |r: &LossRecord| r.total));
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    pub(crate) fn channels(spec: &[(&str, Modality)]) -> Vec<ChannelInfo> {
        spec.iter()
            .map(|(n, m)| ChannelInfo {
                name: n.to_string(),
                modality: *m,
            })
            .collect()
    }

    /// 2 streams, 4 tokens of 75 samples, width 16.
    pub(crate) fn toy() -> (FusionModel, BackboneConfig) {
        let enc = BackboneConfig {
            enc_dim: 16,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            projection_hidden: vec![8, 4],
            frame_size_s: 7.5,
            overlap: 0.0,
            ..BackboneConfig::default()
        };
        let cfg = FusionConfig {
            modalities: "eeg1+eog1".into(),
            mm_dim: 16,
            mm_depth: 2,
            mm_heads: 2,
            dec_dim: 16,
            dec_depth: 1,
            dec_heads: 2,
            projection_hidden: vec![16, 8],
            lora: LoraConfig {
                r: 2,
                alpha: 4.0,
                dropout: 0.0,
            },
            mask_ratio: 0.5,
            ..FusionConfig::default()
        };
        let ch = channels(&[("C4", Modality::Eeg), ("E1", Modality::Eog)]);
        (FusionModel::new(&cfg, &enc, &ch, 3).unwrap(), enc)
    }

    pub(crate) fn random_batch(model: &FusionModel, batch: usize, seed: u64) -> FusionBatch {
        let mut rng = rng_for(seed, "fb", &[]);
        let shape = (batch * model.layout.tokens(), model.layout.frame_len);
        FusionBatch {
            frames: (0..model.streams.len())
                .map(|_| Mat::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0)))
                .collect(),
            batch,
        }
    }

    #[test]
    fn toy_layout() {
        let (m, _) = toy();
        assert_eq!(m.tokens_per_stream(), 4);
        assert_eq!(m.streams.len(), 2);
        assert!(m.store.trainable_names().iter().all(|n| !n.starts_with("enc.")));
        assert!(m.store.entries().any(|(_, e)| e.name.starts_with("enc.eeg.")));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut m, _) = toy();
        // Give the adapters a nonzero up-projection so their gradients are exercised.
        let mut rng = rng_for(0, "lora-b", &[]);
        let ids: Vec<_> = m.store.entries().filter(|(_, e)| e.name.ends_with("lora_b")).map(|(id, _)| id).collect();
        for id in ids {
            m.store.value_mut(id).mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
        let batch = random_batch(&m, 2, 1);
        let plans = m.sample_plans(2, 5, 1).unwrap();
        let mut store = m.store.clone();
        let report = check_gradients(&mut store, |_| true, 3, 1e-6, 1e-5, |g, s| {
            Ok(m.loss(g, s, &batch, &plans, &mut Ctx::eval())?.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn embeddings_are_unit_norm_and_losses_nonnegative() {
        let (m, _) = toy();
        let batch = random_batch(&m, 3, 2);
        let plans = m.sample_plans(3, 1, 1).unwrap();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &m.store, &batch, &plans, &mut Ctx::eval()).unwrap();
        for v in l.sh.iter().chain([&l.fh]) {
            for row in g.value(*v).rows() {
                assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-6);
            }
        }
        assert!(g.scalar(l.recon) >= 0.0 && g.scalar(l.contra) >= 0.0);
        assert_abs_diff_eq!(g.scalar(l.total), g.scalar(l.recon) + g.scalar(l.contra), epsilon = 1e-12);
        assert_eq!(g.value(l.fused.tokens).nrows(), 3 * 2 * 2);
        for r in &l.recon_tokens {
            assert_eq!(g.value(*r).dim(), (12, 16));
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (m, _) = toy();
        let batch = random_batch(&m, 1, 2);
        let plans = m.sample_plans(1, 1, 1).unwrap();
        let mut g = Graph::new();
        assert!(m.loss(&mut g, &m.store, &batch, &plans, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn projection_is_per_stream() {
        let (mut m, _) = toy();
        let batch = random_batch(&m, 1, 3);
        let run = |m: &FusionModel| {
            let mut g = Graph::new();
            let e = m.encode_streams(&mut g, &m.store, &batch, &mut Ctx::eval()).unwrap();
            let z1 = m.project_and_pose(&mut g, &m.store, 1, e[1]).unwrap();
            assert_eq!(g.value(z1).nrows(), 4);
            g.value(z1).clone()
        };
        let before = run(&m);
        let w = m.store.id("proj.0.weight").unwrap();
        m.store.value_mut(w).fill(0.0);
        assert_eq!(run(&m), before);
        let mut g = Graph::new();
        let bad = g.constant(Mat::zeros((4, 7)));
        assert!(m.project_and_pose(&mut g, &m.store, 0, bad).is_err());
    }

    #[test]
    fn streams_attend_to_each_other() {
        let (m, _) = toy();
        let batch = random_batch(&m, 1, 4);
        let plans = m.full_plans(1);
        let fused_stream0 = |zero_second: bool| {
            let mut g = Graph::new();
            let e = m.encode_streams(&mut g, &m.store, &batch, &mut Ctx::eval()).unwrap();
            let mut z: Vec<Var> = (0..2).map(|i| m.project_and_pose(&mut g, &m.store, i, e[i]).unwrap()).collect();
            if zero_second {
                z[1] = g.constant(Mat::zeros((4, 16)));
            }
            let f = m.fuse(&mut g, &m.store, &z, &plans, &mut Ctx::eval()).unwrap();
            let rows = g.select_rows(f.tokens, f.stream_rows[0].clone());
            g.value(rows).clone()
        };
        assert_ne!(fused_stream0(false), fused_stream0(true));
    }

    #[test]
    fn decoders_are_independent() {
        let (mut m, _) = toy();
        let batch = random_batch(&m, 2, 5);
        let plans = m.sample_plans(2, 9, 1).unwrap();
        let decode = |m: &FusionModel| {
            let mut g = Graph::new();
            let l = m.loss(&mut g, &m.store, &batch, &plans, &mut Ctx::eval()).unwrap();
            (g.value(l.recon_tokens[0]).clone(), g.value(l.recon_tokens[1]).clone())
        };
        let (a0, a1) = decode(&m);
        let ids: Vec<_> = m.store.entries().filter(|(_, e)| e.name.starts_with("dec.1.")).map(|(id, _)| id).collect();
        for id in ids {
            m.store.value_mut(id).fill(0.0);
        }
        let (b0, b1) = decode(&m);
        assert_eq!(a0, b0);
        assert_ne!(a1, b1);
    }

    #[test]
    fn mismatched_plans_are_rejected() {
        let (m, _) = toy();
        let batch = random_batch(&m, 2, 5);
        let mut g = Graph::new();
        let z = m.embed_full(&mut g, &m.store, &batch, &mut Ctx::eval()).unwrap();
        let plans = m.sample_plans(2, 1, 1).unwrap();
        let fused = m.fuse(&mut g, &m.store, &z, &plans, &mut Ctx::eval()).unwrap();
        let wrong = m.full_plans(2);
        assert!(m.decode_stream(&mut g, &m.store, 0, &fused, &wrong[0], &mut Ctx::eval()).is_err());
        let empty = vec![vec![MaskPlan { n: 4, kept: vec![], masked: (0..4).collect() }; 2]; 2];
        assert!(m.fuse(&mut g, &m.store, &z, &empty, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn forward_features_shape_and_determinism() {
        let (m, _) = toy();
        let batch = random_batch(&m, 3, 6);
        let f = m.forward_features(&batch).unwrap();
        assert_eq!(f.dim(), (3 * m.feature_tokens(), 16));
        assert_eq!(f, m.forward_features(&batch).unwrap());
        // The masked path sees fewer tokens, so its outputs differ.
        let plans = m.sample_plans(3, 2, 2).unwrap();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &m.store, &batch, &plans, &mut Ctx::eval()).unwrap();
        let masked_rows = g.value(l.fused.tokens);
        assert_ne!(masked_rows.nrows(), f.nrows());
        // Epoch vectors are the per-epoch means of the features.
        let k = m.epoch_vectors(&batch).unwrap();
        let per = m.feature_tokens();
        for b in 0..3 {
            let mean = f.slice(ndarray::s![b * per..(b + 1) * per, ..]).mean_axis(ndarray::Axis(0)).unwrap();
            for (x, y) in mean.iter().zip(k.row(b)) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cache_reproduces_features() {
        let (m, _) = toy();
        let batch = random_batch(&m, 2, 7);
        let (res, attn) = m.last_block_cache(&batch).unwrap();
        let mut g = Graph::new();
        let (r, a) = (g.constant(res), g.constant(attn));
        let out = m.finish_from_cache(&mut g, &m.store, r, a);
        let f = m.forward_features(&batch).unwrap();
        for (x, y) in g.value(out).iter().zip(f.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_step_leaves_base_encoders_untouched() {
        let (m, _) = toy();
        let before = m.store.clone();
        let batch = random_batch(&m, 2, 8);
        let plans = m.sample_plans(2, 1, 1).unwrap();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &m.store, &batch, &plans, &mut Ctx::eval()).unwrap();
        let grads = g.backward(l.total);
        let mut store = m.store.clone();
        let mut opt = AdamW::new(AdamWConfig::with_lr(1e-2)).unwrap();
        opt.step(&mut store, &grads);
        let changed = before.diff(&store);
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| !is_base_encoder_param(n)), "{changed:?}");
        assert!(changed.iter().any(|n| n.starts_with("lora.")));
        assert!(changed.iter().any(|n| n.starts_with("mm.")));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        m.save(&p).unwrap();
        let back = FusionModel::load(&p).unwrap();
        assert!(back.store.diff(&m.store).is_empty());
        assert_eq!(back.store.trainable_names(), m.store.trainable_names());
        let batch = random_batch(&m, 2, 9);
        assert_eq!(back.forward_features(&batch).unwrap(), m.forward_features(&batch).unwrap());
    }

    #[test]
    fn backbone_weights_are_copied() {
        let (m, enc) = toy();
        let bb = BackboneModel::new(Modality::Eog, &enc, 11).unwrap();
        let ch = channels(&[("C4", Modality::Eeg), ("E1", Modality::Eog)]);
        assert!(FusionModel::from_backbones(&m.cfg, &ch, std::slice::from_ref(&bb), 3).is_err());
        let bb2 = BackboneModel::new(Modality::Eeg, &enc, 12).unwrap();
        let f = FusionModel::from_backbones(&m.cfg, &ch, &[bb.clone(), bb2], 3).unwrap();
        let src = bb.store.value(bb.store.id("enc.patch.weight").unwrap());
        let dst = f.store.value(f.store.id("enc.eog.patch.weight").unwrap());
        assert_eq!(src, dst);
    }
}
