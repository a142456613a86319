//! Linear probing on frozen backbone features, IoU metrics and the
//! beam-dropping robustness scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{derive_seed, Dataset};
use crate::encoder::{encode_points, PointEncoderParams};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::synth::{LidarSpec, PointCloud};

/// Beam-drop fractions of the three corruption severities.
pub const SEVERITIES: [f64; 3] = [0.25, 0.5, 0.75];

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, truth: u16, pred: u16) {
        self.counts[truth as usize * self.num_classes + pred as usize] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("merging confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` where TP + FP + FN = 0.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes, `None` if there are none.
    pub miou: Option<f64>,
}

/// `TP / (TP + FP + FN)` per class and their mean over classes with a
/// nonzero denominator.
pub fn iou_from_confusion(cm: &ConfusionMatrix) -> IouReport {
    iou_excluding(cm, &vec![false; cm.num_classes])
}

fn iou_excluding(cm: &ConfusionMatrix, excluded: &[bool]) -> IouReport {
    let n = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..n).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let used: Vec<f64> = per_class
        .iter()
        .zip(excluded)
        .filter(|(_, &x)| !x)
        .filter_map(|(v, _)| *v)
        .collect();
    let miou = (!used.is_empty()).then(|| used.iter().sum::<f64>() / used.len() as f64);
    IouReport { per_class, miou }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    /// Training points taken from each cloud by a fixed stride.
    pub max_points_per_cloud: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            max_points_per_cloud: 512,
        }
    }
}

/// Softmax classifier over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// num_classes x D.
    pub weight: FeatureMatrix,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const PROBE_CHUNK: usize = 1024;

fn standardize(x: &[f64], mean: &[f64], std: &[f64], out: &mut [f64]) {
    for k in 0..x.len() {
        out[k] = (x[k] - mean[k]) / std[k];
    }
}

fn logits(weight: &FeatureMatrix, bias: &[f64], z: &[f64], out: &mut [f64]) {
    for c in 0..bias.len() {
        out[c] = bias[c] + crate::matrix::dot(weight.row(c), z);
    }
}

impl LinearProbe {
    pub fn predict(&self, features: &FeatureMatrix) -> Vec<u16> {
        let (k, d) = self.weight.shape();
        (0..features.rows())
            .into_par_iter()
            .map(|i| {
                let mut z = vec![0.0; d];
                let mut s = vec![0.0; k];
                standardize(features.row(i), &self.mean, &self.std, &mut z);
                logits(&self.weight, &self.bias, &z, &mut s);
                let mut best = 0;
                for c in 1..k {
                    if s[c] > s[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// Full-batch gradient descent on the mean softmax cross-entropy. Features
/// are standardized with their own mean and standard deviation (constant
/// columns are only centered).
pub fn fit_probe(features: &FeatureMatrix, labels: &[u16], num_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} feature rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::invalid("probe needs at least one training point"));
    }
    if labels.iter().any(|&l| l as usize >= num_classes) {
        return Err(Error::invalid("probe label outside the class range"));
    }
    let mut mean = vec![0.0; d];
    for row in features.iter_rows() {
        for k in 0..d {
            mean[k] += row[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for row in features.iter_rows() {
        for k in 0..d {
            std[k] += (row[k] - mean[k]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let mut z = FeatureMatrix::zeros(n, d);
    for i in 0..n {
        standardize(features.row(i), &mean, &std, z.row_mut(i));
    }

    let mut weight = FeatureMatrix::zeros(num_classes, d);
    let mut bias = vec![0.0; num_classes];
    for _ in 0..cfg.steps {
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(PROBE_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut gw = vec![0.0; num_classes * d];
                let mut gb = vec![0.0; num_classes];
                let mut s = vec![0.0; num_classes];
                for i in c * PROBE_CHUNK..((c + 1) * PROBE_CHUNK).min(n) {
                    let zi = z.row(i);
                    logits(&weight, &bias, zi, &mut s);
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in s.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    for c in 0..num_classes {
                        let g = s[c] / sum - if labels[i] as usize == c { 1.0 } else { 0.0 };
                        gb[c] += g;
                        for k in 0..d {
                            gw[c * d + k] += g * zi[k];
                        }
                    }
                }
                (gw, gb)
            })
            .collect();
        let step = cfg.lr / n as f64;
        for (gw, gb) in &chunks {
            for (w, g) in weight.as_mut_slice().iter_mut().zip(gw) {
                *w -= step * g;
            }
            for (b, g) in bias.iter_mut().zip(gb) {
                *b -= step * g;
            }
        }
    }
    Ok(LinearProbe { weight, bias, mean, std })
}

/// Indices `0, s, 2s, ...` keeping at most `max` of `n`.
pub fn stride_subsample(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let stride = n.div_ceil(max);
    (0..n).step_by(stride).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub iou: IouReport,
    /// Classes never seen while fitting; excluded from the mIoU.
    pub absent_from_train: Vec<bool>,
    pub confusion: ConfusionMatrix,
    pub probe: LinearProbe,
}

impl ProbeResult {
    pub fn miou(&self) -> f64 {
        self.iou.miou.unwrap_or(0.0)
    }
}

fn stack_features(encoder: &PointEncoderParams, clouds: &[&PointCloud]) -> Result<(FeatureMatrix, Vec<u16>)> {
    let feats = clouds
        .par_iter()
        .map(|c| encode_points(encoder, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let labels = clouds.iter().flat_map(|c| c.labels.iter().copied()).collect();
    if refs.is_empty() {
        return Ok((FeatureMatrix::zeros(0, encoder.out_dim()), labels));
    }
    Ok((FeatureMatrix::vstack(&refs)?, labels))
}

/// Confusion of `probe` on every point of `clouds`.
pub fn evaluate_probe(
    probe: &LinearProbe,
    encoder: &PointEncoderParams,
    clouds: &[&PointCloud],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let (feats, labels) = stack_features(encoder, clouds)?;
    let pred = probe.predict(&feats);
    let mut cm = ConfusionMatrix::new(num_classes);
    for (t, p) in labels.iter().zip(&pred) {
        if *t as usize >= num_classes {
            return Err(Error::invalid("evaluation label outside the class range"));
        }
        cm.add(*t, *p);
    }
    Ok(cm)
}

/// IoU of a confusion matrix with the flagged classes left out of the mean.
pub fn score(cm: &ConfusionMatrix, absent_from_train: &[bool]) -> IouReport {
    iou_excluding(cm, absent_from_train)
}

/// Fits a probe on frozen features of `train` and scores it on `eval`.
pub fn linear_probe(
    encoder: &PointEncoderParams,
    train: &[&PointCloud],
    eval: &[&PointCloud],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let subsets: Vec<PointCloud> = train
        .iter()
        .map(|c| c.select(&stride_subsample(c.len(), cfg.max_points_per_cloud)))
        .collect();
    let refs: Vec<&PointCloud> = subsets.iter().collect();
    let (feats, labels) = stack_features(encoder, &refs)?;
    let mut absent = vec![true; num_classes];
    for &l in &labels {
        if let Some(a) = absent.get_mut(l as usize) {
            *a = false;
        }
    }
    let probe = fit_probe(&feats, &labels, num_classes, cfg)?;
    let confusion = evaluate_probe(&probe, encoder, eval, num_classes)?;
    Ok(ProbeResult {
        iou: score(&confusion, &absent),
        absent_from_train: absent,
        confusion,
        probe,
    })
}

/// Keyframe clouds of the probe training and evaluation scenes. The last
/// quarter of the scenes (at least one) is held out.
pub fn probe_split(dataset: &Dataset) -> Result<(Vec<&PointCloud>, Vec<&PointCloud>)> {
    let n = dataset.scenes.len();
    if n < 2 {
        return Err(Error::invalid("probing needs at least two scenes"));
    }
    let held = (n / 4).max(1);
    let clouds = |r: std::ops::Range<usize>| -> Vec<&PointCloud> {
        dataset.scenes[r]
            .iter()
            .flat_map(|s| s.keyframes.iter().map(|k| &k.cloud))
            .collect()
    };
    Ok((clouds(0..n - held), clouds(n - held..n)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeRr {
    /// `None` when the baseline is perfect at every severity.
    pub ce: Option<f64>,
    /// `None` when the clean score is zero.
    pub rr: Option<f64>,
}

/// `CE = Σ(1 - m_s) / Σ(1 - b_s)`, `RR = Σ m_s / (3 clean)`.
pub fn ce_rr(model: [f64; 3], baseline: [f64; 3], clean: f64) -> CeRr {
    let num: f64 = model.iter().map(|m| 1.0 - m).sum();
    let den: f64 = baseline.iter().map(|b| 1.0 - b).sum();
    let kept: f64 = model.iter().sum();
    CeRr {
        ce: (den != 0.0).then(|| num / den),
        rr: (clean != 0.0).then(|| kept / (3.0 * clean)),
    }
}

/// Rings removed for a drop fraction: `round(fraction * beams)` of them,
/// picked by a seeded shuffle.
pub fn dropped_rings(lidar: &LidarSpec, fraction: f64, seed: u64) -> Vec<usize> {
    let k = (fraction.clamp(0.0, 1.0) * lidar.num_beams as f64).round() as usize;
    let mut rings: Vec<usize> = (0..lidar.num_beams).collect();
    rings.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = rings[..k].to_vec();
    out.sort_unstable();
    out
}

/// Removes whole beam rings, recovered from each point's elevation.
pub fn corrupt_beam_missing(cloud: &PointCloud, lidar: &LidarSpec, fraction: f64, seed: u64) -> PointCloud {
    let drop = dropped_rings(lidar, fraction, seed);
    if drop.is_empty() {
        return cloud.clone();
    }
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| drop.binary_search(&lidar.ring_of(&cloud.coords[i])).is_err())
        .collect();
    cloud.select(&keep)
}

/// Probe mIoU on clean and beam-dropped evaluation clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessScores {
    pub clean: f64,
    pub corrupted: [f64; 3],
}

/// Fits a probe on clean training clouds, then scores it on the evaluation
/// clouds at every severity. Cloud `i` at severity `s` is corrupted with a
/// seed derived from `(seed, s, i)`.
pub fn robustness_scores(
    encoder: &PointEncoderParams,
    train: &[&PointCloud],
    eval: &[&PointCloud],
    lidar: &LidarSpec,
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<RobustnessScores> {
    let clean = linear_probe(encoder, train, eval, num_classes, cfg)?;
    let mut corrupted = [0.0; 3];
    for (s, &fraction) in SEVERITIES.iter().enumerate() {
        let clouds: Vec<PointCloud> = eval
            .iter()
            .enumerate()
            .map(|(i, c)| corrupt_beam_missing(c, lidar, fraction, derive_seed(seed, ((s as u64) << 32) | i as u64)))
            .collect();
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let cm = evaluate_probe(&clean.probe, encoder, &refs, num_classes)?;
        corrupted[s] = score(&cm, &clean.absent_from_train).miou.unwrap_or(0.0);
    }
    Ok(RobustnessScores {
        clean: clean.miou(),
        corrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{capture_frame, generate_scene, SceneSpec, SensorRig};

    #[test]
    fn iou_hand_example() {
        let cm = ConfusionMatrix::from_counts(&[vec![5, 5], vec![0, 10]]).unwrap();
        let r = iou_from_confusion(&cm);
        assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 10.0 / 15.0).abs() < 1e-12);
        assert!((r.miou.unwrap() - (0.5 + 10.0 / 15.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn iou_extremes() {
        let diag = ConfusionMatrix::from_counts(&[vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 0]]).unwrap();
        let r = iou_from_confusion(&diag);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.miou, Some(1.0));
        let off = ConfusionMatrix::from_counts(&[vec![0, 2], vec![7, 0]]).unwrap();
        assert_eq!(iou_from_confusion(&off).miou, Some(0.0));
    }

    #[test]
    fn iou_is_invariant_to_class_relabeling() {
        let rows = vec![vec![4, 1, 2], vec![0, 6, 3], vec![5, 0, 9]];
        let perm = [2usize, 0, 1];
        let mut permuted = vec![vec![0u64; 3]; 3];
        for t in 0..3 {
            for p in 0..3 {
                permuted[perm[t]][perm[p]] = rows[t][p];
            }
        }
        let a = iou_from_confusion(&ConfusionMatrix::from_counts(&rows).unwrap());
        let b = iou_from_confusion(&ConfusionMatrix::from_counts(&permuted).unwrap());
        for c in 0..3 {
            assert_eq!(a.per_class[c], b.per_class[perm[c]]);
        }
        assert!((a.miou.unwrap() - b.miou.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ce_rr_hand_example() {
        let r = ce_rr([0.5, 0.4, 0.3], [0.4, 0.3, 0.2], 0.6);
        assert!((r.ce.unwrap() - 1.8 / 2.1).abs() < 1e-12);
        assert!((r.rr.unwrap() - 1.2 / 1.8).abs() < 1e-12);
        assert_eq!(ce_rr([0.3, 0.2, 0.1], [0.3, 0.2, 0.1], 0.5).ce, Some(1.0));
        assert_eq!(ce_rr([0.7, 0.7, 0.7], [0.1, 0.1, 0.1], 0.7).rr, Some(1.0));
        assert_eq!(ce_rr([0.5; 3], [1.0; 3], 0.6).ce, None);
    }

    #[test]
    fn one_hot_features_are_separable() {
        let labels: Vec<u16> = (0..120).map(|i| (i % 4) as u16).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|c| if c == l as usize { 1.0 } else { 0.0 }).collect())
            .collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let probe = fit_probe(&x, &labels, 4, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.predict(&x), labels);
    }

    #[test]
    fn zero_features_give_the_majority_class() {
        let labels: Vec<u16> = (0..100).map(|i| if i < 50 { 2 } else { (i % 2) as u16 }).collect();
        let x = FeatureMatrix::zeros(100, 5);
        let probe = fit_probe(&x, &labels, 3, &ProbeConfig::default()).unwrap();
        let pred = probe.predict(&x);
        assert!(pred.iter().all(|&p| p == 2));
        let mut cm = ConfusionMatrix::new(3);
        for (t, p) in labels.iter().zip(&pred) {
            cm.add(*t, *p);
        }
        // Majority predictor: IoU of class 2 is 50/100, the rest 0.
        assert!((iou_from_confusion(&cm).miou.unwrap() - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_training_classes_are_flagged() {
        let cloud = |labels: Vec<u16>| {
            let n = labels.len();
            let coords = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
            PointCloud::new(coords, FeatureMatrix::zeros(n, 1), labels, 0.0).unwrap()
        };
        let train = cloud(vec![0, 0, 1, 1]);
        let eval = cloud(vec![0, 1, 2]);
        let enc = PointEncoderParams::init(1, 1, 8, 4, 1.0);
        let r = linear_probe(&enc, &[&train], &[&eval], 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.absent_from_train, vec![false, false, true]);
        let used: Vec<f64> = r.iou.per_class[..2].iter().flatten().copied().collect();
        assert!((r.miou() - used.iter().sum::<f64>() / used.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn beam_dropping_removes_whole_rings() {
        let rig = SensorRig::default();
        let scene = generate_scene(&SceneSpec::street(4, 6)).unwrap();
        let cloud = capture_frame(&scene, 1.0, 0, &rig).unwrap().keyframe;
        let lidar = &rig.lidar;
        assert_eq!(corrupt_beam_missing(&cloud, lidar, 0.0, 1), cloud);
        assert!(corrupt_beam_missing(&cloud, lidar, 1.0, 1).is_empty());
        let half = corrupt_beam_missing(&cloud, lidar, 0.5, 9);
        let rings = |c: &PointCloud| {
            c.coords
                .iter()
                .map(|p| lidar.ring_of(p))
                .collect::<std::collections::BTreeSet<_>>()
        };
        let before = rings(&cloud);
        let after = rings(&half);
        let dropped = dropped_rings(lidar, 0.5, 9);
        assert_eq!(dropped.len(), 8);
        assert!(dropped.iter().all(|r| !after.contains(r)));
        assert_eq!(after.len(), before.iter().filter(|r| !dropped.contains(r)).count());
        assert_eq!(corrupt_beam_missing(&cloud, lidar, 0.5, 9), half);
    }

    #[test]
    fn stride_subsample_bounds() {
        assert_eq!(stride_subsample(5, 10), vec![0, 1, 2, 3, 4]);
        let s = stride_subsample(1000, 512);
        assert!(s.len() <= 512);
        assert_eq!(s[1], 2);
    }
}
