//! Toy networks: a trainable per-point MLP, a frozen class-embedding image
//! backbone, l2-normalized linear projection heads and superset average
//! pooling. Every differentiable piece has a hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, FeatureMatrix};
use crate::synth::{PointCloud, SemanticImage, SKY};

/// Rows whose pre-normalization norm falls at or below this are emitted as
/// zero and flagged.
pub const DEGENERATE_NORM: f64 = 1e-12;

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> FeatureMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    FeatureMatrix::from_vec(rows, cols, data).expect("sized above")
}

/// Two-layer point MLP `W2 relu(W1 x + b1) + b2` over
/// `x = [xyz / input_scale, feats]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoderParams {
    pub w1: FeatureMatrix,
    pub b1: Vec<f64>,
    pub w2: FeatureMatrix,
    pub b2: Vec<f64>,
    /// Fixed coordinate divisor, not trained.
    pub input_scale: f64,
}

impl PointEncoderParams {
    /// He-uniform weights, small uniform biases.
    pub fn init(seed: u64, channels: usize, hidden: usize, out_dim: usize, input_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = 3 + channels;
        let w1 = uniform_matrix(&mut rng, hidden, fan_in, (6.0 / fan_in as f64).sqrt());
        let b1 = (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let w2 = uniform_matrix(&mut rng, out_dim, hidden, (3.0 / hidden as f64).sqrt());
        let b2 = (0..out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self {
            w1,
            b1,
            w2,
            b2,
            input_scale,
        }
    }

    pub fn zeros(channels: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            w1: FeatureMatrix::zeros(hidden, 3 + channels),
            b1: vec![0.0; hidden],
            w2: FeatureMatrix::zeros(out_dim, hidden),
            b2: vec![0.0; out_dim],
            input_scale: 1.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows()
    }

    fn check(&self) -> Result<()> {
        if self.b1.len() != self.w1.rows()
            || self.w2.cols() != self.w1.rows()
            || self.b2.len() != self.w2.rows()
        {
            return Err(Error::Shape("inconsistent point encoder parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoderGrads {
    pub w1: FeatureMatrix,
    pub b1: Vec<f64>,
    pub w2: FeatureMatrix,
    pub b2: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: FeatureMatrix,
    pre: FeatureMatrix,
}

impl EncoderCache {
    /// Hidden pre-activations, one row per point.
    pub fn pre_activations(&self) -> &FeatureMatrix {
        &self.pre
    }
}

pub fn encode_points(params: &PointEncoderParams, cloud: &PointCloud) -> Result<FeatureMatrix> {
    encode_points_cached(params, cloud).map(|(out, _)| out)
}

pub fn encode_points_cached(
    params: &PointEncoderParams,
    cloud: &PointCloud,
) -> Result<(FeatureMatrix, EncoderCache)> {
    params.check()?;
    let in_dim = params.in_dim();
    if 3 + cloud.channels() != in_dim {
        return Err(Error::Shape(format!(
            "encoder expects {} feature channels, cloud has {}",
            in_dim - 3,
            cloud.channels()
        )));
    }
    let n = cloud.len();
    let (hidden, d) = (params.hidden(), params.out_dim());
    let mut inputs = FeatureMatrix::zeros(n, in_dim);
    let mut pre = FeatureMatrix::zeros(n, hidden);
    let mut out = FeatureMatrix::zeros(n, d);
    let mut act = vec![0.0; hidden];
    for i in 0..n {
        let x = inputs.row_mut(i);
        let p = cloud.coords[i];
        for k in 0..3 {
            x[k] = p[k] / params.input_scale;
        }
        x[3..].copy_from_slice(cloud.feats.row(i));
        let x = inputs.row(i);
        let z = pre.row_mut(i);
        for h in 0..hidden {
            z[h] = dot(params.w1.row(h), x) + params.b1[h];
            act[h] = z[h].max(0.0);
        }
        let y = out.row_mut(i);
        for j in 0..d {
            y[j] = dot(params.w2.row(j), &act) + params.b2[j];
        }
    }
    Ok((out, EncoderCache { inputs, pre }))
}

/// Parameter gradients given the gradient of the loss w.r.t. the encoder
/// output rows.
pub fn encode_points_backward(
    params: &PointEncoderParams,
    cache: &EncoderCache,
    grad_out: &FeatureMatrix,
) -> Result<PointEncoderGrads> {
    let n = cache.inputs.rows();
    let (hidden, d, in_dim) = (params.hidden(), params.out_dim(), params.in_dim());
    if grad_out.shape() != (n, d) {
        return Err(Error::Shape(format!(
            "encoder output gradient {:?}, expected {:?}",
            grad_out.shape(),
            (n, d)
        )));
    }
    let mut g = PointEncoderGrads {
        w1: FeatureMatrix::zeros(hidden, in_dim),
        b1: vec![0.0; hidden],
        w2: FeatureMatrix::zeros(d, hidden),
        b2: vec![0.0; d],
    };
    let mut gh = vec![0.0; hidden];
    for i in 0..n {
        let gy = grad_out.row(i);
        if gy.iter().all(|v| *v == 0.0) {
            continue;
        }
        let z = cache.pre.row(i);
        let x = cache.inputs.row(i);
        gh.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..d {
            let gj = gy[j];
            if gj == 0.0 {
                continue;
            }
            g.b2[j] += gj;
            let w2row = params.w2.row(j);
            let gw2 = g.w2.row_mut(j);
            for h in 0..hidden {
                if z[h] > 0.0 {
                    gw2[h] += gj * z[h];
                    gh[h] += gj * w2row[h];
                }
            }
        }
        for h in 0..hidden {
            if z[h] > 0.0 && gh[h] != 0.0 {
                g.b1[h] += gh[h];
                let gw1 = g.w1.row_mut(h);
                for k in 0..in_dim {
                    gw1[k] += gh[h] * x[k];
                }
            }
        }
    }
    Ok(g)
}

/// Frozen stand-in for the pretrained image backbone: a seeded class
/// embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureProvider {
    table: FeatureMatrix,
}

impl ImageFeatureProvider {
    pub fn new(seed: u64, num_classes: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            table: uniform_matrix(&mut rng, num_classes, dim, 1.0),
        }
    }

    pub fn from_table(table: FeatureMatrix) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &FeatureMatrix {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.table.rows()
    }

    pub fn embedding(&self, class: u16) -> Result<&[f64]> {
        if class as usize >= self.table.rows() {
            return Err(Error::invalid(format!(
                "class id {class} outside embedding table of {} classes",
                self.table.rows()
            )));
        }
        Ok(self.table.row(class as usize))
    }
}

/// One row per pixel (row-major): the class embedding, zero for SKY.
pub fn image_features(provider: &ImageFeatureProvider, image: &SemanticImage) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::zeros(image.class_ids.len(), provider.dim());
    for (i, &c) in image.class_ids.iter().enumerate() {
        if c != SKY {
            out.row_mut(i).copy_from_slice(provider.embedding(c)?);
        }
    }
    Ok(out)
}

/// Linear projection followed by row-wise l2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// L x input_dim.
    pub weight: FeatureMatrix,
}

impl HeadParams {
    pub fn init(seed: u64, in_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: uniform_matrix(&mut rng, out_dim, in_dim, (3.0 / in_dim as f64).sqrt()),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = FeatureMatrix::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        Self { weight }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Unit rows, or zero rows where `degenerate`.
    pub features: FeatureMatrix,
    /// Norm of `W x` per row.
    pub norms: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn apply_head(params: &HeadParams, feats: &FeatureMatrix) -> Result<HeadOutput> {
    if feats.cols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "head expects width {}, got {}",
            params.in_dim(),
            feats.cols()
        )));
    }
    let l = params.out_dim();
    let n = feats.rows();
    let mut out = FeatureMatrix::zeros(n, l);
    let mut norms = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for i in 0..n {
        let x = feats.row(i);
        let y = out.row_mut(i);
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = dot(params.weight.row(j), x);
        }
        let nz = norm(y);
        norms[i] = nz;
        if nz > DEGENERATE_NORM {
            y.iter_mut().for_each(|v| *v /= nz);
        } else {
            y.iter_mut().for_each(|v| *v = 0.0);
            degenerate[i] = true;
        }
    }
    Ok(HeadOutput {
        features: out,
        norms,
        degenerate,
    })
}

/// `(I - y y^T) g / ‖z‖`: gradient through `y = z / ‖z‖`.
#[inline]
fn normalize_backward(y: &[f64], nz: f64, g: &[f64], out: &mut [f64]) {
    let proj = dot(y, g);
    for k in 0..y.len() {
        out[k] = (g[k] - proj * y[k]) / nz;
    }
}

/// Returns (grad wrt input rows, grad wrt head weight).
pub fn apply_head_backward(
    params: &HeadParams,
    input: &FeatureMatrix,
    output: &HeadOutput,
    grad_out: &FeatureMatrix,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (n, l) = output.features.shape();
    if grad_out.shape() != (n, l) || input.rows() != n {
        return Err(Error::Shape("head backward shape mismatch".into()));
    }
    let in_dim = params.in_dim();
    let mut gx = FeatureMatrix::zeros(n, in_dim);
    let mut gw = FeatureMatrix::zeros(l, in_dim);
    let mut gz = vec![0.0; l];
    for i in 0..n {
        if output.degenerate[i] {
            continue;
        }
        let g = grad_out.row(i);
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        normalize_backward(output.features.row(i), output.norms[i], g, &mut gz);
        let x = input.row(i);
        let gxi = gx.row_mut(i);
        for j in 0..l {
            let wj = params.weight.row(j);
            for k in 0..in_dim {
                gxi[k] += gz[j] * wj[k];
            }
            let gwj = gw.row_mut(j);
            for k in 0..in_dim {
                gwj[k] += gz[j] * x[k];
            }
        }
    }
    Ok((gx, gw))
}

/// Superset features: per-id mean of member rows, re-normalized.
#[derive(Debug, Clone)]
pub struct PooledFeatures {
    /// V x L, masked rows are zero.
    pub features: FeatureMatrix,
    /// `true` where the superset is empty or its mean vanishes.
    pub mask: Vec<bool>,
    pub counts: Vec<usize>,
    /// Norm of each mean before re-normalization.
    pub mean_norms: Vec<f64>,
}

impl PooledFeatures {
    pub fn active(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }
}

pub fn pool_super(feats: &FeatureMatrix, ids: &[Option<u32>], num_sets: usize) -> Result<PooledFeatures> {
    if ids.len() != feats.rows() {
        return Err(Error::Shape(format!(
            "{} ids for {} feature rows",
            ids.len(),
            feats.rows()
        )));
    }
    let l = feats.cols();
    let mut sums = FeatureMatrix::zeros(num_sets, l);
    let mut counts = vec![0usize; num_sets];
    for (i, id) in ids.iter().enumerate() {
        if let Some(id) = *id {
            let id = id as usize;
            if id >= num_sets {
                return Err(Error::invalid(format!("superset id {id} >= {num_sets}")));
            }
            counts[id] += 1;
            for (s, v) in sums.row_mut(id).iter_mut().zip(feats.row(i)) {
                *s += v;
            }
        }
    }
    let mut mask = vec![true; num_sets];
    let mut mean_norms = vec![0.0; num_sets];
    for j in 0..num_sets {
        if counts[j] == 0 {
            continue;
        }
        let n = counts[j] as f64;
        let row = sums.row_mut(j);
        row.iter_mut().for_each(|v| *v /= n);
        let m = norm(row);
        mean_norms[j] = m;
        if m > DEGENERATE_NORM {
            row.iter_mut().for_each(|v| *v /= m);
            mask[j] = false;
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(PooledFeatures {
        features: sums,
        mask,
        counts,
        mean_norms,
    })
}

/// Gradient w.r.t. member rows: `(1/n_j) (I - y y^T) g_j / ‖mean_j‖`.
pub fn pool_super_backward(
    pooled: &PooledFeatures,
    ids: &[Option<u32>],
    grad_out: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    let (v, l) = pooled.features.shape();
    if grad_out.shape() != (v, l) {
        return Err(Error::Shape("pool backward shape mismatch".into()));
    }
    let mut per_set = FeatureMatrix::zeros(v, l);
    for j in 0..v {
        if pooled.mask[j] {
            continue;
        }
        let row = per_set.row_mut(j);
        normalize_backward(pooled.features.row(j), pooled.mean_norms[j], grad_out.row(j), row);
        let n = pooled.counts[j] as f64;
        row.iter_mut().for_each(|x| *x /= n);
    }
    let mut gx = FeatureMatrix::zeros(ids.len(), l);
    for (i, id) in ids.iter().enumerate() {
        if let Some(id) = *id {
            gx.row_mut(i).copy_from_slice(per_set.row(id as usize));
        }
    }
    Ok(gx)
}
