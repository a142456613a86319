//! Pretraining over keyframe triples: superpoint pooling of point features,
//! spatial, temporal and dense-to-sparse losses, AdamW with a one-cycle
//! schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, Dataset, Triple};
use crate::encoder::{
    apply_head, apply_head_backward, encode_points_backward, encode_points_cached, pool_super,
    pool_super_backward, EncoderCache, HeadOutput, HeadParams, ImageFeatureProvider, PointEncoderGrads,
    PointEncoderParams, PooledFeatures,
};
use crate::error::{Error, Result};
use crate::losses::{
    d2s_loss, pair_superfeatures, spatial_contrastive, temporal_contrastive, total_loss, ComponentLosses,
    LossWeights, Temperature,
};
use crate::matrix::FeatureMatrix;
use crate::superpix::{
    assign_superpoints, build_dense_cloud, build_per_view_superpixels, build_view_consistent_superpixels,
    propagate_dense_superpoints, SuperpixelKey,
};
use crate::synth::PointCloud;

const STREAM_ENCODER: u64 = 1 << 40;
const STREAM_POINT_HEAD: u64 = (1 << 40) + 1;
const STREAM_IMAGE_HEAD: u64 = (1 << 40) + 2;
const STREAM_EPOCH: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Backbone output width D.
    pub point_dim: usize,
    /// Frozen image feature width E.
    pub image_dim: usize,
    /// Shared head width L.
    pub head_dim: usize,
    /// Coordinates are divided by this before entering the encoder.
    pub input_scale: f64,
    /// Seed of the frozen class-embedding table.
    pub image_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            point_dim: 16,
            image_dim: 16,
            head_dim: 8,
            input_scale: 10.0,
            image_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to every trained tensor.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub warmup_fraction: f64,
    /// Step 0 runs at `base / initial_div`.
    pub initial_div: f64,
    /// The last step runs at `base / final_div`.
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.3,
            initial_div: 25.0,
            final_div: 1e4,
        }
    }
}

impl OneCycle {
    /// Linear warmup from `base / initial_div` to `base`, then cosine decay
    /// to `base / final_div` at step `total - 1`.
    pub fn lr(&self, step: usize, total: usize, base: f64) -> f64 {
        let warm = self.warmup_fraction * total as f64;
        let s = step as f64;
        if s < warm {
            let start = base / self.initial_div;
            return start + (base - start) * s / warm;
        }
        let span = total as f64 - 1.0 - warm;
        let progress = if span > 0.0 { ((s - warm) / span).min(1.0) } else { 1.0 };
        let end = base / self.final_div;
        end + (base - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// The default one-cycle schedule.
pub fn one_cycle_lr(step: usize, total: usize, base: f64) -> f64 {
    OneCycle::default().lr(step, total, base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Triples visited per epoch; `None` visits all of them.
    pub scenes_per_epoch: Option<usize>,
    pub dt: f64,
    pub num_sweeps: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub base_lr: f64,
    pub schedule: OneCycle,
    pub adam: AdamConfig,
    pub enable_vc: bool,
    pub enable_d2s: bool,
    pub enable_fcl: bool,
    pub train_image_head: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            scenes_per_epoch: None,
            dt: 0.5,
            num_sweeps: 2,
            tau: 0.07,
            weights: LossWeights::default(),
            base_lr: 1e-2,
            schedule: OneCycle::default(),
            adam: AdamConfig::default(),
            enable_vc: true,
            enable_d2s: true,
            enable_fcl: true,
            train_image_head: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if self.scenes_per_epoch == Some(0) {
            return Err(Error::invalid("scenes per epoch must be positive"));
        }
        Temperature::new(self.tau)?;
        self.weights.validate()?;
        let m = &self.model;
        if m.hidden == 0 || m.point_dim == 0 || m.image_dim == 0 || m.head_dim == 0 || !(m.input_scale > 0.0) {
            return Err(Error::invalid("model dimensions and input scale must be positive"));
        }
        Ok(())
    }
}

/// Trainable parameters: backbone plus both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: PointEncoderParams,
    pub point_head: HeadParams,
    pub image_head: HeadParams,
}

impl Model {
    pub fn init(cfg: &ModelConfig, channels: usize, seed: u64) -> Self {
        Self {
            encoder: PointEncoderParams::init(
                derive_seed(seed, STREAM_ENCODER),
                channels,
                cfg.hidden,
                cfg.point_dim,
                cfg.input_scale,
            ),
            point_head: HeadParams::init(derive_seed(seed, STREAM_POINT_HEAD), cfg.point_dim, cfg.head_dim),
            image_head: HeadParams::init(derive_seed(seed, STREAM_IMAGE_HEAD), cfg.image_dim, cfg.head_dim),
        }
    }

    /// Tensor views in a fixed order: w1, b1, w2, b2, point head, image head.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.encoder.w1.as_slice(),
            &self.encoder.b1,
            self.encoder.w2.as_slice(),
            &self.encoder.b2,
            self.point_head.weight.as_slice(),
            self.image_head.weight.as_slice(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.encoder.w1.as_mut_slice(),
            &mut self.encoder.b1,
            self.encoder.w2.as_mut_slice(),
            &mut self.encoder.b2,
            self.point_head.weight.as_mut_slice(),
            self.image_head.weight.as_mut_slice(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: PointEncoderGrads,
    pub point_head: FeatureMatrix,
    pub image_head: FeatureMatrix,
}

impl ModelGrads {
    fn zeros(model: &Model) -> Self {
        let e = &model.encoder;
        Self {
            encoder: PointEncoderGrads {
                w1: FeatureMatrix::zeros(e.w1.rows(), e.w1.cols()),
                b1: vec![0.0; e.b1.len()],
                w2: FeatureMatrix::zeros(e.w2.rows(), e.w2.cols()),
                b2: vec![0.0; e.b2.len()],
            },
            point_head: FeatureMatrix::zeros(model.point_head.weight.rows(), model.point_head.weight.cols()),
            image_head: FeatureMatrix::zeros(model.image_head.weight.rows(), model.image_head.weight.cols()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.encoder.w1.as_slice(),
            &self.encoder.b1,
            self.encoder.w2.as_slice(),
            &self.encoder.b2,
            self.point_head.as_slice(),
            self.image_head.as_slice(),
        ]
    }

    fn add_encoder(&mut self, g: &PointEncoderGrads) {
        add_into(self.encoder.w1.as_mut_slice(), g.w1.as_slice());
        add_into(&mut self.encoder.b1, &g.b1);
        add_into(self.encoder.w2.as_mut_slice(), g.w2.as_slice());
        add_into(&mut self.encoder.b2, &g.b2);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// First and second moments per tensor, in [`Model::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam update. Tensors with `frozen[i]` set
    /// are left untouched.
    pub fn update(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64, cfg: &AdamConfig, frozen: &[bool; 6]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let gs = grads.tensors();
        for (i, p) in model.tensors_mut().into_iter().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let g = gs[i][k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
            }
        }
    }
}

/// One metrics row. Disabled or empty components read 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub sc: f64,
    pub tc: f64,
    pub d2s: f64,
    pub total: f64,
    /// No active superset anywhere in the triple; parameters untouched.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub channels: usize,
    pub model: Model,
    pub adam: AdamState,
    /// Completed steps.
    pub step: usize,
    pub history: Vec<HistoryRow>,
}

/// Parameter-independent inputs of one keyframe, computed once.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    /// Keyframe points that land in some superpixel.
    pub cloud: PointCloud,
    pub ids: Vec<Option<u32>>,
    pub keys: Vec<SuperpixelKey>,
    /// Dense cloud restricted to assigned points, with ids against the
    /// keyframe superpixels.
    pub dense: Option<(PointCloud, Vec<Option<u32>>)>,
}

fn keep_assigned(cloud: &PointCloud, ids: Vec<Option<u32>>) -> (PointCloud, Vec<Option<u32>>) {
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i].is_some()).collect();
    let ids = keep.iter().map(|&i| ids[i]).collect();
    (cloud.select(&keep), ids)
}

/// Superpixels, superpoints and (with `dense`) the dense superpoints of
/// keyframe `kf`. Points outside every superpixel never reach a loss and are
/// dropped.
pub fn prepare_frame(
    dataset: &Dataset,
    scene: usize,
    kf: usize,
    config: &TrainConfig,
    dense: bool,
) -> Result<PreparedFrame> {
    let bundle = dataset.bundle(scene, kf, if dense { config.num_sweeps } else { 0 })?;
    let map = if config.enable_vc {
        build_view_consistent_superpixels(&bundle.images)
    } else {
        build_per_view_superpixels(&bundle.images)
    };
    let sparse = assign_superpoints(&bundle.keyframe, &bundle.calibrations, &map);
    let (cloud, ids) = keep_assigned(&bundle.keyframe, sparse.ids);
    let dense = dense.then(|| {
        let d = build_dense_cloud(&bundle);
        let a = propagate_dense_superpoints(&d, &bundle.calibrations, &map);
        keep_assigned(&d, a.ids)
    });
    Ok(PreparedFrame {
        cloud,
        ids,
        keys: map.keys.clone(),
        dense,
    })
}

struct PointBranch {
    feats: FeatureMatrix,
    cache: EncoderCache,
    head: HeadOutput,
    pooled: PooledFeatures,
}

fn point_forward(model: &Model, cloud: &PointCloud, ids: &[Option<u32>], v: usize) -> Result<PointBranch> {
    let (feats, cache) = encode_points_cached(&model.encoder, cloud)?;
    let head = apply_head(&model.point_head, &feats)?;
    let pooled = pool_super(&head.features, ids, v)?;
    Ok(PointBranch {
        feats,
        cache,
        head,
        pooled,
    })
}

fn point_backward(
    model: &Model,
    b: &PointBranch,
    ids: &[Option<u32>],
    grad_q: &FeatureMatrix,
) -> Result<(PointEncoderGrads, FeatureMatrix)> {
    let gh = pool_super_backward(&b.pooled, ids, grad_q)?;
    let (gf, gw) = apply_head_backward(&model.point_head, &b.feats, &b.head, &gh)?;
    Ok((encode_points_backward(&model.encoder, &b.cache, &gf)?, gw))
}

struct ImageBranch {
    input: FeatureMatrix,
    head: HeadOutput,
    pooled: PooledFeatures,
    ids: Vec<Option<u32>>,
}

/// Pixel features pooled per superpixel. Every pixel of a superpixel carries
/// the same class embedding, so one row per superpixel gives the same pooled
/// feature and gradient as pooling all pixels.
fn image_forward(model: &Model, provider: &ImageFeatureProvider, keys: &[SuperpixelKey]) -> Result<ImageBranch> {
    let rows = keys
        .iter()
        .map(|k| provider.embedding(k.class).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let input = if rows.is_empty() {
        FeatureMatrix::zeros(0, provider.dim())
    } else {
        FeatureMatrix::from_rows(&rows)?
    };
    let head = apply_head(&model.image_head, &input)?;
    let ids: Vec<Option<u32>> = (0..keys.len() as u32).map(Some).collect();
    let pooled = pool_super(&head.features, &ids, keys.len())?;
    Ok(ImageBranch {
        input,
        head,
        pooled,
        ids,
    })
}

fn image_backward(model: &Model, b: &ImageBranch, grad_k: &FeatureMatrix) -> Result<FeatureMatrix> {
    let gh = pool_super_backward(&b.pooled, &b.ids, grad_k)?;
    Ok(apply_head_backward(&model.image_head, &b.input, &b.head, &gh)?.1)
}

/// Loss values and parameter gradients of one triple.
#[derive(Debug, Clone)]
pub struct TripleEvaluation {
    pub components: ComponentLosses,
    /// Spatial loss of every frame, `None` where no superset was active.
    pub sc_frames: [Option<f64>; 3],
    pub total: f64,
    pub grads: ModelGrads,
    pub degenerate: bool,
}

/// Forward and backward pass over a prepared triple `(t - dt, t, t + dt)`.
/// The dense entry of the center frame is used when D2S is enabled.
pub fn evaluate_triple(
    model: &Model,
    provider: &ImageFeatureProvider,
    frames: [&PreparedFrame; 3],
    config: &TrainConfig,
) -> Result<TripleEvaluation> {
    let tau = Temperature::new(config.tau)?;
    let points = frames
        .par_iter()
        .map(|f| point_forward(model, &f.cloud, &f.ids, f.keys.len()))
        .collect::<Result<Vec<_>>>()?;
    let images = frames
        .iter()
        .map(|f| image_forward(model, provider, &f.keys))
        .collect::<Result<Vec<_>>>()?;

    let mut sc_frames = [None; 3];
    let mut sc_outputs = Vec::with_capacity(3);
    for f in 0..3 {
        let mask: Vec<bool> = points[f]
            .pooled
            .mask
            .iter()
            .zip(&images[f].pooled.mask)
            .map(|(a, b)| *a || *b)
            .collect();
        let out = spatial_contrastive(&points[f].pooled.features, &images[f].pooled.features, tau, &mask)?;
        if !out.is_empty() {
            sc_frames[f] = Some(out.value);
        }
        sc_outputs.push(out);
    }

    let mut tc_parts = Vec::new();
    if config.enable_fcl {
        for other in [2usize, 0] {
            let paired = pair_superfeatures(
                &frames[1].keys,
                &points[1].pooled.mask,
                &points[1].pooled.features,
                &frames[other].keys,
                &points[other].pooled.mask,
                &points[other].pooled.features,
            )?;
            if paired.is_empty() {
                continue;
            }
            let out = temporal_contrastive(&paired.a, &paired.b, tau)?;
            tc_parts.push((other, paired, out));
        }
    }

    let mut dense_branch = None;
    let mut d2s_out = None;
    if config.enable_d2s {
        let (dense, dense_ids) = frames[1]
            .dense
            .as_ref()
            .ok_or_else(|| Error::invalid("center frame was prepared without its dense cloud"))?;
        let b = point_forward(model, dense, dense_ids, frames[1].keys.len())?;
        let mask: Vec<bool> = points[1].pooled.mask.iter().zip(&b.pooled.mask).map(|(a, b)| *a || *b).collect();
        let out = d2s_loss(&points[1].pooled.features, &b.pooled.features, &mask)?;
        if !out.is_empty() {
            d2s_out = Some(out);
        }
        dense_branch = Some(b);
    }

    let components = ComponentLosses {
        sc: sc_frames.iter().flatten().copied().collect(),
        tc: (!tc_parts.is_empty()).then(|| tc_parts.iter().map(|p| p.2.value).sum::<f64>() / tc_parts.len() as f64),
        d2s: d2s_out.as_ref().map(|o| o.value),
    };
    let total = total_loss(&components, &config.weights);
    let degenerate = components.sc.is_empty() && components.tc.is_none() && components.d2s.is_none();
    let mut grads = ModelGrads::zeros(model);
    if degenerate {
        return Ok(TripleEvaluation {
            components,
            sc_frames,
            total: 0.0,
            grads,
            degenerate,
        });
    }

    let l = config.model.head_dim;
    let mut grad_q: Vec<FeatureMatrix> = (0..3).map(|f| FeatureMatrix::zeros(frames[f].keys.len(), l)).collect();
    let mut grad_k: Vec<FeatureMatrix> = grad_q.clone();
    for f in 0..3 {
        if sc_frames[f].is_some() {
            grad_q[f].add_scaled(&sc_outputs[f].grad_q, total.sc_frame_scale)?;
            grad_k[f].add_scaled(&sc_outputs[f].grad_k, total.sc_frame_scale)?;
        }
    }
    let tc_scale = total.tc_scale / tc_parts.len().max(1) as f64;
    for (other, paired, out) in &tc_parts {
        let (center, side) = if *other == 2 {
            let (a, b) = grad_q.split_at_mut(2);
            (&mut a[1], &mut b[0])
        } else {
            let (a, b) = grad_q.split_at_mut(1);
            (&mut b[0], &mut a[0])
        };
        paired.scatter(&out.grad_q, &out.grad_k, center, side, tc_scale);
    }
    let mut grad_dense = None;
    if let Some(out) = &d2s_out {
        grad_q[1].add_scaled(&out.grad_q, total.d2s_scale)?;
        let mut g = out.grad_k.clone();
        g.as_mut_slice().iter_mut().for_each(|x| *x *= total.d2s_scale);
        grad_dense = Some(g);
    }

    let backs = (0..3)
        .into_par_iter()
        .map(|f| point_backward(model, &points[f], &frames[f].ids, &grad_q[f]))
        .collect::<Result<Vec<_>>>()?;
    for (ge, gw) in &backs {
        grads.add_encoder(ge);
        add_into(grads.point_head.as_mut_slice(), gw.as_slice());
    }
    if let (Some(b), Some(g)) = (&dense_branch, &grad_dense) {
        let (ge, gw) = point_backward(model, b, &frames[1].dense.as_ref().expect("checked above").1, g)?;
        grads.add_encoder(&ge);
        add_into(grads.point_head.as_mut_slice(), gw.as_slice());
    }
    if config.train_image_head {
        for f in 0..3 {
            let gw = image_backward(model, &images[f], &grad_k[f])?;
            add_into(grads.image_head.as_mut_slice(), gw.as_slice());
        }
    }
    Ok(TripleEvaluation {
        components,
        sc_frames,
        total: total.value,
        grads,
        degenerate,
    })
}

/// Training state bound to one dataset.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    provider: ImageFeatureProvider,
    model: Model,
    adam: AdamState,
    step: usize,
    history: Vec<HistoryRow>,
    triples: Vec<Triple>,
    frames: BTreeMap<(usize, usize), PreparedFrame>,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        let model = Model::init(&config.model, dataset.channels(), config.seed);
        let adam = AdamState::new(&model);
        Self::build(config, dataset, model, adam, 0, Vec::new())
    }

    /// Continues from `ckpt`; the remaining steps follow exactly the
    /// trajectory of an uninterrupted run.
    pub fn resume(ckpt: Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        if ckpt.num_classes != dataset.num_classes() || ckpt.channels != dataset.channels() {
            return Err(Error::invalid("checkpoint does not match the dataset's classes or channels"));
        }
        Self::build(ckpt.config, dataset, ckpt.model, ckpt.adam, ckpt.step, ckpt.history)
    }

    fn build(
        config: TrainConfig,
        dataset: &'a Dataset,
        model: Model,
        adam: AdamState,
        step: usize,
        history: Vec<HistoryRow>,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.scenes.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if config.num_sweeps > dataset.stored_sweeps {
            return Err(Error::invalid(format!(
                "{} sweeps requested, dataset stores {}",
                config.num_sweeps, dataset.stored_sweeps
            )));
        }
        let triples = dataset.triples(config.dt)?;
        if triples.is_empty() {
            return Err(Error::invalid(format!("no keyframe triple spans dt = {}", config.dt)));
        }
        let mut wanted: BTreeMap<(usize, usize), bool> = BTreeMap::new();
        for t in &triples {
            for (i, &kf) in t.keyframes.iter().enumerate() {
                *wanted.entry((t.scene, kf)).or_default() |= i == 1 && config.enable_d2s;
            }
        }
        let list: Vec<_> = wanted.into_iter().collect();
        let prepared = list
            .par_iter()
            .map(|&((s, k), dense)| prepare_frame(dataset, s, k, &config, dense).map(|f| ((s, k), f)))
            .collect::<Result<Vec<_>>>()?;
        let provider = ImageFeatureProvider::new(config.model.image_seed, dataset.num_classes(), config.model.image_dim);
        Ok(Self {
            config,
            dataset,
            provider,
            model,
            adam,
            step,
            history,
            triples,
            frames: prepared.into_iter().collect(),
            epoch_order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn provider(&self) -> &ImageFeatureProvider {
        &self.provider
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn frame(&self, scene: usize, kf: usize) -> Option<&PreparedFrame> {
        self.frames.get(&(scene, kf))
    }

    /// Triple visited at `step`: a seeded permutation per epoch, truncated
    /// to `scenes_per_epoch`.
    pub fn triple_at(&mut self, step: usize) -> Triple {
        let n = self.triples.len();
        let per_epoch = self.config.scenes_per_epoch.map_or(n, |k| k.min(n));
        let epoch = step / per_epoch;
        if self.epoch_order.as_ref().map(|e| e.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_EPOCH + epoch as u64));
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        self.triples[self.epoch_order.as_ref().expect("set above").1[step % per_epoch]]
    }

    /// Losses and gradients of `triple` under the current parameters.
    pub fn evaluate(&self, triple: &Triple) -> Result<TripleEvaluation> {
        let get = |k: usize| {
            self.frames
                .get(&(triple.scene, triple.keyframes[k]))
                .ok_or_else(|| Error::invalid("triple not in the training set"))
        };
        evaluate_triple(&self.model, &self.provider, [get(0)?, get(1)?, get(2)?], &self.config)
    }

    /// One update on `triple` at learning rate `lr`. Degenerate triples
    /// leave the state untouched.
    pub fn train_step(&mut self, triple: &Triple, lr: f64) -> Result<(HistoryRow, TripleEvaluation)> {
        let eval = self.evaluate(triple)?;
        let c = &eval.components;
        let row = HistoryRow {
            step: self.step,
            lr,
            sc: if c.sc.is_empty() { 0.0 } else { c.sc.iter().sum::<f64>() / c.sc.len() as f64 },
            tc: c.tc.unwrap_or(0.0),
            d2s: c.d2s.unwrap_or(0.0),
            total: eval.total,
            skipped: eval.degenerate,
        };
        if eval.degenerate {
            log::warn!("step {}: no active supersets in scene {}, skipped", self.step, triple.scene);
        } else {
            let frozen = [false, false, false, false, false, !self.config.train_image_head];
            self.adam.update(&mut self.model, &eval.grads, lr, &self.config.adam, &frozen);
        }
        Ok((row, eval))
    }

    /// Runs the scheduled step at the current index.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let triple = self.triple_at(self.step);
        let lr = self.config.schedule.lr(self.step, self.config.steps, self.config.base_lr);
        let (row, _) = self.train_step(&triple, lr)?;
        self.history.push(row);
        self.step += 1;
        Ok(row)
    }

    /// Runs scheduled steps until `until` (capped at the configured total).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while self.step < until.min(self.config.steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_classes: self.dataset.num_classes(),
            channels: self.dataset.channels(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            step: self.step,
            history: self.history.clone(),
        }
    }
}

/// Full pretraining run from a fresh initialization.
pub fn run_pretraining(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    t.run_until(config.steps)?;
    Ok(t.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};

    fn scalar_schedule(step: usize, total: usize, base: f64) -> f64 {
        let warm = 0.3 * total as f64;
        let s = step as f64;
        if s < warm {
            base / 25.0 + (base - base / 25.0) * (s / warm)
        } else {
            let p = (s - warm) / (total as f64 - 1.0 - warm);
            let lo = base / 1e4;
            lo + (base - lo) * (1.0 + (p * std::f64::consts::PI).cos()) / 2.0
        }
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        assert_eq!(one_cycle_lr(0, 1000, 1e-2), 1e-2 / 25.0);
        assert_eq!(one_cycle_lr(300, 1000, 1e-2), 1e-2);
        assert!((one_cycle_lr(999, 1000, 1e-2) - 1e-6).abs() < 1e-18);
        for s in [100, 450, 650, 900] {
            assert!((one_cycle_lr(s, 1000, 1e-2) - scalar_schedule(s, 1000, 1e-2)).abs() < 1e-15);
        }
        let lrs: Vec<f64> = (0..1000).map(|s| one_cycle_lr(s, 1000, 1.0)).collect();
        assert!(lrs[..300].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[300..].windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(one_cycle_lr(0, 1, 1.0), 1.0 / 25.0);
    }

    #[test]
    fn adam_with_zero_lr_keeps_parameters() {
        let model = Model::init(&ModelConfig::default(), 1, 3);
        let mut m2 = model.clone();
        let mut grads = ModelGrads::zeros(&model);
        grads.encoder.b1.iter_mut().for_each(|g| *g = 0.5);
        grads.point_head.as_mut_slice().iter_mut().for_each(|g| *g = -0.25);
        let mut adam = AdamState::new(&model);
        adam.update(&mut m2, &grads, 0.0, &AdamConfig::default(), &[false; 6]);
        assert_eq!(model, m2);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_matches_scalar_update() {
        let mut model = Model::init(&ModelConfig::default(), 1, 3);
        let before = model.encoder.b2.clone();
        let mut grads = ModelGrads::zeros(&model);
        grads.encoder.b2 = (0..before.len()).map(|i| i as f64 - 4.0).collect();
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&model);
        adam.update(&mut model, &grads, 0.1, &cfg, &[false; 6]);
        for (k, p0) in before.iter().enumerate() {
            let g: f64 = grads.encoder.b2[k];
            let m = 0.1 * g / (1.0 - 0.9);
            let v = 0.001 * g * g / (1.0 - 0.999);
            let want = p0 - 0.1 * (m / (v.sqrt() + 1e-8) + 0.01 * p0);
            assert!((model.encoder.b2[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_tensors_stay_put() {
        let mut model = Model::init(&ModelConfig::default(), 1, 3);
        let before = model.image_head.clone();
        let mut grads = ModelGrads::zeros(&model);
        grads.image_head.as_mut_slice().iter_mut().for_each(|g| *g = 1.0);
        let mut frozen = [false; 6];
        frozen[5] = true;
        AdamState::new(&model).update(&mut model, &grads, 0.1, &AdamConfig::default(), &frozen);
        assert_eq!(model.image_head, before);
    }

    fn tiny() -> Dataset {
        generate_dataset(&DatasetConfig {
            seed: 11,
            scenes: 2,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn one_step_run_and_determinism() {
        let d = tiny();
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        let a = run_pretraining(&cfg, &d).unwrap();
        assert_eq!(a.history.len(), 1);
        assert!(a.history[0].sc > 0.0 && a.history[0].tc > 0.0 && a.history[0].d2s > 0.0);
        assert_eq!(a, run_pretraining(&cfg, &d).unwrap());
    }

    #[test]
    fn dense_branch_matches_an_explicit_pool_of_the_full_dense_cloud() {
        let d = tiny();
        let cfg = TrainConfig::default();
        let t = Trainer::new(cfg.clone(), &d).unwrap();
        let frame = t.frame(0, 1).unwrap();
        let (dense, ids) = frame.dense.as_ref().unwrap();
        let full = build_dense_cloud(&d.bundle(0, 1, cfg.num_sweeps).unwrap());
        assert!(dense.len() < full.len());
        let map = build_view_consistent_superpixels(&d.scenes[0].keyframes[1].images);
        let a = propagate_dense_superpoints(&full, &d.rig.cameras, &map);
        let kept = point_forward(t.model(), dense, ids, map.len()).unwrap();
        let all = point_forward(t.model(), &full, &a.ids, map.len()).unwrap();
        assert_eq!(kept.pooled.mask, all.pooled.mask);
        for (x, y) in kept.pooled.features.as_slice().iter().zip(all.pooled.features.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn image_branch_equals_pooling_every_pixel() {
        use crate::encoder::image_features;
        let d = tiny();
        let model = Model::init(&ModelConfig::default(), 1, 5);
        let provider = ImageFeatureProvider::new(0, 6, 16);
        let images = &d.scenes[1].keyframes[0].images;
        let map = build_view_consistent_superpixels(images);
        let short = image_forward(&model, &provider, &map.keys).unwrap();

        let parts: Vec<FeatureMatrix> = images.iter().map(|im| image_features(&provider, im).unwrap()).collect();
        let refs: Vec<&FeatureMatrix> = parts.iter().collect();
        let pixels = FeatureMatrix::vstack(&refs).unwrap();
        let head = apply_head(&model.image_head, &pixels).unwrap();
        let ids = map.pixel_ids();
        let pooled = pool_super(&head.features, &ids, map.len()).unwrap();
        for (x, y) in short.pooled.features.as_slice().iter().zip(pooled.features.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }

        let g = FeatureMatrix::from_vec(
            map.len(),
            8,
            (0..map.len() * 8).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect(),
        )
        .unwrap();
        let gw_short = image_backward(&model, &short, &g).unwrap();
        let gh = pool_super_backward(&pooled, &ids, &g).unwrap();
        let gw_full = apply_head_backward(&model.image_head, &pixels, &head, &gh).unwrap().1;
        let scale = gw_full.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in gw_short.as_slice().iter().zip(gw_full.as_slice()) {
            assert!((x - y).abs() < 1e-9 * scale.max(1.0));
        }
    }
}
