//! Dense-to-sparse, spatial contrastive and temporal contrastive objectives
//! over pooled superset features, each with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, FeatureMatrix};
use crate::superpix::SuperpixelKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.07)
    }
}

/// Scalar loss of two row-aligned feature matrices plus the gradient w.r.t.
/// each.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_q: FeatureMatrix,
    pub grad_k: FeatureMatrix,
    /// Row pairs that entered the loss.
    pub active_count: usize,
}

impl LossOutput {
    fn empty(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad_q: FeatureMatrix::zeros(rows, cols),
            grad_k: FeatureMatrix::zeros(rows, cols),
            active_count: 0,
        }
    }

    /// Nothing was active; value and gradients are zero.
    pub fn is_empty(&self) -> bool {
        self.active_count == 0
    }
}

fn check_pair(q: &FeatureMatrix, k: &FeatureMatrix, mask: Option<&[bool]>) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "paired features {:?} vs {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != q.rows() {
            return Err(Error::Shape(format!("mask of {} for {} rows", m.len(), q.rows())));
        }
    }
    Ok(())
}

fn active_rows(rows: usize, mask: Option<&[bool]>) -> Vec<usize> {
    (0..rows).filter(|&i| mask.is_none_or(|m| !m[i])).collect()
}

/// Mean cosine distance `1 - <q_t, q_d>` over unmasked rows.
pub fn d2s_loss(q_sparse: &FeatureMatrix, q_dense: &FeatureMatrix, mask: &[bool]) -> Result<LossOutput> {
    check_pair(q_sparse, q_dense, Some(mask))?;
    let active = active_rows(q_sparse.rows(), Some(mask));
    let mut out = LossOutput::empty(q_sparse.rows(), q_sparse.cols());
    if active.is_empty() {
        return Ok(out);
    }
    let n = active.len() as f64;
    let mut total = 0.0;
    for &i in &active {
        total += 1.0 - dot(q_sparse.row(i), q_dense.row(i));
        for (g, v) in out.grad_q.row_mut(i).iter_mut().zip(q_dense.row(i)) {
            *g = -v / n;
        }
        for (g, v) in out.grad_k.row_mut(i).iter_mut().zip(q_sparse.row(i)) {
            *g = -v / n;
        }
    }
    out.value = total / n;
    out.active_count = active.len();
    Ok(out)
}

/// InfoNCE over superset pairs: row `i` of `q` is pulled toward row `i` of
/// `k` and pushed from every other active row of `k`. Masked rows are
/// excluded both as anchors and as negatives.
pub fn spatial_contrastive(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    tau: Temperature,
    mask: &[bool],
) -> Result<LossOutput> {
    check_pair(q, k, Some(mask))?;
    Ok(info_nce(q, k, tau.value(), &active_rows(q.rows(), Some(mask))))
}

/// Same functional form as [`spatial_contrastive`] between superpoint
/// features of two timestamps, rows already paired by
/// [`pair_superfeatures`].
pub fn temporal_contrastive(q_t: &FeatureMatrix, q_other: &FeatureMatrix, tau: Temperature) -> Result<LossOutput> {
    check_pair(q_t, q_other, None)?;
    Ok(info_nce(q_t, q_other, tau.value(), &active_rows(q_t.rows(), None)))
}

fn info_nce(q: &FeatureMatrix, k: &FeatureMatrix, tau: f64, active: &[usize]) -> LossOutput {
    let mut out = LossOutput::empty(q.rows(), q.cols());
    if active.is_empty() {
        return out;
    }
    let a = active.len();
    let inv_a = 1.0 / a as f64;
    let mut logits = vec![0.0; a];
    let mut total = 0.0;
    for (ai, &i) in active.iter().enumerate() {
        for (aj, &j) in active.iter().enumerate() {
            logits[aj] = dot(q.row(i), k.row(j)) / tau;
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|s| (s - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - logits[ai];
        for (aj, &j) in active.iter().enumerate() {
            let p = (logits[aj] - lse).exp();
            let g = (p - if aj == ai { 1.0 } else { 0.0 }) * inv_a / tau;
            if g == 0.0 {
                continue;
            }
            let (qi, kj) = (q.row(i), k.row(j));
            for (gq, v) in out.grad_q.row_mut(i).iter_mut().zip(kj) {
                *gq += g * v;
            }
            for (gk, v) in out.grad_k.row_mut(j).iter_mut().zip(qi) {
                *gk += g * v;
            }
        }
    }
    out.value = total * inv_a;
    out.active_count = a;
    out
}

/// Rows of two frames aligned on shared superpixel keys.
#[derive(Debug, Clone)]
pub struct PairedFeatures {
    /// `(row in a, row in b)` sorted by key.
    pub pairs: Vec<(usize, usize)>,
    pub a: FeatureMatrix,
    pub b: FeatureMatrix,
}

impl PairedFeatures {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Scatter gradients on the paired rows back to the full matrices.
    pub fn scatter(&self, grad_a: &FeatureMatrix, grad_b: &FeatureMatrix, full_a: &mut FeatureMatrix, full_b: &mut FeatureMatrix, scale: f64) {
        for (p, &(ia, ib)) in self.pairs.iter().enumerate() {
            for (dst, src) in full_a.row_mut(ia).iter_mut().zip(grad_a.row(p)) {
                *dst += scale * src;
            }
            for (dst, src) in full_b.row_mut(ib).iter_mut().zip(grad_b.row(p)) {
                *dst += scale * src;
            }
        }
    }
}

/// Pairs rows whose keys appear, unmasked, in both frames. Keys present in
/// only one frame are dropped.
pub fn pair_superfeatures(
    keys_a: &[SuperpixelKey],
    mask_a: &[bool],
    q_a: &FeatureMatrix,
    keys_b: &[SuperpixelKey],
    mask_b: &[bool],
    q_b: &FeatureMatrix,
) -> Result<PairedFeatures> {
    if keys_a.len() != q_a.rows() || keys_b.len() != q_b.rows() || mask_a.len() != keys_a.len() || mask_b.len() != keys_b.len() {
        return Err(Error::Shape("keys, masks and features disagree".into()));
    }
    if q_a.cols() != q_b.cols() {
        return Err(Error::Shape("paired frames differ in feature width".into()));
    }
    let mut pairs = Vec::new();
    for (ia, key) in keys_a.iter().enumerate() {
        if mask_a[ia] {
            continue;
        }
        if let Some(ib) = keys_b.iter().position(|kb| kb == key) {
            if !mask_b[ib] {
                pairs.push((ia, ib));
            }
        }
    }
    pairs.sort_by_key(|&(ia, _)| keys_a[ia]);
    let rows_a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let rows_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(PairedFeatures {
        a: q_a.select_rows(&rows_a),
        b: q_b.select_rows(&rows_b),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sc: f64,
    pub tc: f64,
    pub d2s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sc: 1.0,
            tc: 1.0,
            d2s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sc, self.tc, self.d2s];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Per-step component values. `None` means the term was not computed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentLosses {
    /// Spatial loss per frame that had active supersets.
    pub sc: Vec<f64>,
    pub tc: Option<f64>,
    pub d2s: Option<f64>,
}

/// Combined objective and the factor each component's gradients receive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub sc_mean: f64,
    /// Multiplier for the gradient of each individual frame's spatial loss.
    pub sc_frame_scale: f64,
    pub tc_scale: f64,
    pub d2s_scale: f64,
}

/// `w_sc * mean(L_sc) + w_tc * L_tc + w_d2s * L_d2s`.
pub fn total_loss(c: &ComponentLosses, w: &LossWeights) -> TotalLoss {
    let (sc_mean, sc_frame_scale) = if c.sc.is_empty() {
        (0.0, 0.0)
    } else {
        let n = c.sc.len() as f64;
        (c.sc.iter().sum::<f64>() / n, w.sc / n)
    };
    let mut value = w.sc * sc_mean;
    if let Some(tc) = c.tc {
        value += w.tc * tc;
    }
    if let Some(d) = c.d2s {
        value += w.d2s * d;
    }
    TotalLoss {
        value,
        sc_mean,
        sc_frame_scale,
        tc_scale: if c.tc.is_some() { w.tc } else { 0.0 },
        d2s_scale: if c.d2s.is_some() { w.d2s } else { 0.0 },
    }
}
