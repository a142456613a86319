//! Central finite-difference checks of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    apply_head, apply_head_backward, encode_points_backward, encode_points_cached, pool_super,
    pool_super_backward, HeadParams, PointEncoderParams,
};
use crate::losses::{d2s_loss, spatial_contrastive, temporal_contrastive, LossOutput, Temperature};
use crate::matrix::{dot, FeatureMatrix};
use crate::synth::PointCloud;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// Pre-activations closer than this to the ReLU kink are resampled.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max absolute discrepancy relative to the larger gradient's max norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMatrix::from_vec(rows, cols, data).expect("sized")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    let mut m = random_matrix(rng, rows, cols);
    for i in 0..rows {
        let r = m.row_mut(i);
        let n = dot(r, r).sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn split2(x: &[f64], rows: usize, cols: usize) -> (FeatureMatrix, FeatureMatrix) {
    let n = rows * cols;
    (
        FeatureMatrix::from_vec(rows, cols, x[..n].to_vec()).expect("sized"),
        FeatureMatrix::from_vec(rows, cols, x[n..].to_vec()).expect("sized"),
    )
}

fn check_pair_loss(
    rng: &mut ChaCha8Rng,
    instances: usize,
    min_rows: usize,
    loss: impl Fn(&FeatureMatrix, &FeatureMatrix, &[bool]) -> LossOutput,
    with_mask: bool,
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = rng.gen_range(min_rows..=8);
        let l = rng.gen_range(2..=16);
        let q = unit_rows(rng, v, l);
        let k = unit_rows(rng, v, l);
        let mut mask: Vec<bool> = (0..v).map(|_| with_mask && rng.gen_bool(0.2)).collect();
        mask[0] = false;
        let out = loss(&q, &k, &mask);
        let analytic: Vec<f64> = out.grad_q.as_slice().iter().chain(out.grad_k.as_slice()).copied().collect();
        let x: Vec<f64> = q.as_slice().iter().chain(k.as_slice()).copied().collect();
        let numeric = central_difference(
            |x| {
                let (q, k) = split2(x, v, l);
                loss(&q, &k, &mask).value
            },
            &x,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn check_d2s(rng: &mut ChaCha8Rng, instances: usize) -> GradcheckReport {
    let e = check_pair_loss(rng, instances, 1, |q, k, m| d2s_loss(q, k, m).expect("shapes"), true);
    GradcheckReport {
        name: "d2s_loss",
        instances,
        max_rel_error: e,
    }
}

pub fn check_spatial(rng: &mut ChaCha8Rng, instances: usize) -> GradcheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let tau = Temperature::new(if rng.gen_bool(0.5) { 0.07 } else { rng.gen_range(0.05..1.0) }).expect("positive");
        worst = worst.max(check_pair_loss(
            rng,
            1,
            2,
            |q, k, m| spatial_contrastive(q, k, tau, m).expect("shapes"),
            true,
        ));
    }
    GradcheckReport {
        name: "spatial_contrastive",
        instances,
        max_rel_error: worst,
    }
}

pub fn check_temporal(rng: &mut ChaCha8Rng, instances: usize) -> GradcheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let tau = Temperature::new(if rng.gen_bool(0.5) { 0.07 } else { rng.gen_range(0.05..1.0) }).expect("positive");
        worst = worst.max(check_pair_loss(
            rng,
            1,
            2,
            |q, k, _| temporal_contrastive(q, k, tau).expect("shapes"),
            false,
        ));
    }
    GradcheckReport {
        name: "temporal_contrastive",
        instances,
        max_rel_error: worst,
    }
}

/// Gradient of `sum(G * head(W X))` w.r.t. both `W` and `X`.
pub fn check_head(rng: &mut ChaCha8Rng, instances: usize) -> GradcheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (rows, in_dim, l) = (rng.gen_range(1..=6), rng.gen_range(2..=16), rng.gen_range(2..=16));
        let head = HeadParams {
            weight: random_matrix(rng, l, in_dim),
        };
        let x = random_matrix(rng, rows, in_dim);
        let g = random_matrix(rng, rows, l);
        let out = apply_head(&head, &x).expect("shapes");
        let (gx, gw) = apply_head_backward(&head, &x, &out, &g).expect("shapes");
        let analytic: Vec<f64> = gw.as_slice().iter().chain(gx.as_slice()).copied().collect();
        let flat: Vec<f64> = head.weight.as_slice().iter().chain(x.as_slice()).copied().collect();
        let nw = l * in_dim;
        let numeric = central_difference(
            |p| {
                let head = HeadParams {
                    weight: FeatureMatrix::from_vec(l, in_dim, p[..nw].to_vec()).expect("sized"),
                };
                let x = FeatureMatrix::from_vec(rows, in_dim, p[nw..].to_vec()).expect("sized");
                dot(apply_head(&head, &x).expect("shapes").features.as_slice(), g.as_slice())
            },
            &flat,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradcheckReport {
        name: "apply_head",
        instances,
        max_rel_error: worst,
    }
}

/// Gradient of `sum(G * pool(F))` w.r.t. the member rows `F`.
pub fn check_pool(rng: &mut ChaCha8Rng, instances: usize) -> GradcheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = rng.gen_range(1..=8);
        let l = rng.gen_range(2..=16);
        let n = rng.gen_range(v..=3 * v + 4);
        let feats = unit_rows(rng, n, l);
        let ids: Vec<Option<u32>> = (0..n)
            .map(|i| {
                if i < v {
                    Some(i as u32)
                } else if rng.gen_bool(0.15) {
                    None
                } else {
                    Some(rng.gen_range(0..v) as u32)
                }
            })
            .collect();
        let g = random_matrix(rng, v, l);
        let pooled = pool_super(&feats, &ids, v).expect("ids in range");
        let analytic = pool_super_backward(&pooled, &ids, &g).expect("shapes").into_vec();
        let numeric = central_difference(
            |x| {
                let f = FeatureMatrix::from_vec(n, l, x.to_vec()).expect("sized");
                dot(pool_super(&f, &ids, v).expect("ids").features.as_slice(), g.as_slice())
            },
            feats.as_slice(),
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradcheckReport {
        name: "pool_super",
        instances,
        max_rel_error: worst,
    }
}

fn flatten_encoder(p: &PointEncoderParams) -> Vec<f64> {
    let mut v = p.w1.as_slice().to_vec();
    v.extend_from_slice(&p.b1);
    v.extend_from_slice(p.w2.as_slice());
    v.extend_from_slice(&p.b2);
    v
}

fn unflatten_encoder(x: &[f64], like: &PointEncoderParams) -> PointEncoderParams {
    let (h, i, d) = (like.hidden(), like.in_dim(), like.out_dim());
    let mut at = 0;
    let mut take = |n: usize| {
        let s = x[at..at + n].to_vec();
        at += n;
        s
    };
    PointEncoderParams {
        w1: FeatureMatrix::from_vec(h, i, take(h * i)).expect("sized"),
        b1: take(h),
        w2: FeatureMatrix::from_vec(d, h, take(d * h)).expect("sized"),
        b2: take(d),
        input_scale: like.input_scale,
    }
}

/// Gradient of `sum(G * encode(P))` w.r.t. every encoder parameter, at
/// points whose pre-activations stay clear of the ReLU kink.
pub fn check_encoder(rng: &mut ChaCha8Rng, instances: usize) -> GradcheckReport {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let channels = rng.gen_range(1..=2);
        let hidden = rng.gen_range(2..=12);
        let d = rng.gen_range(2..=16);
        let n = rng.gen_range(1..=6);
        let params = PointEncoderParams::init(rng.gen(), channels, hidden, d, rng.gen_range(1.0..10.0));
        let coords = (0..n)
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..8.0)])
            .collect();
        let cloud = PointCloud::new(coords, random_matrix(rng, n, channels), vec![0; n], 0.0).expect("sized");
        let (_, cache) = encode_points_cached(&params, &cloud).expect("shapes");
        if cache.pre_activations().as_slice().iter().any(|z| z.abs() < KINK_MARGIN) {
            continue;
        }
        let g = random_matrix(rng, n, d);
        let grads = encode_points_backward(&params, &cache, &g).expect("shapes");
        let mut analytic = grads.w1.as_slice().to_vec();
        analytic.extend_from_slice(&grads.b1);
        analytic.extend_from_slice(grads.w2.as_slice());
        analytic.extend_from_slice(&grads.b2);
        let numeric = central_difference(
            |x| {
                let p = unflatten_encoder(x, &params);
                let (out, _) = encode_points_cached(&p, &cloud).expect("shapes");
                dot(out.as_slice(), g.as_slice())
            },
            &flatten_encoder(&params),
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
        done += 1;
    }
    GradcheckReport {
        name: "encode_points",
        instances,
        max_rel_error: worst,
    }
}

/// Every suite, `instances` random cases each, from one seed.
pub fn run_all(seed: u64, instances: usize) -> Vec<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_d2s(&mut rng, instances),
        check_spatial(&mut rng, instances),
        check_temporal(&mut rng, instances),
        check_head(&mut rng, instances),
        check_encoder(&mut rng, instances),
        check_pool(&mut rng, instances),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e1 = relative_error(&[1.0, 2.0], &[1.0, 2.002]);
        let e2 = relative_error(&[1e-3, 2e-3], &[1e-3, 2.002e-3]);
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn all_suites_pass() {
        for r in run_all(7, 20) {
            assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let analytic = [1.0, 2.0, 3.0];
        let numeric = central_difference(|v| v[0] + 2.0 * v[1] + 3.1 * v[2], &[0.0; 3], STEP);
        assert!(relative_error(&analytic, &numeric) > TOLERANCE);
    }
}
