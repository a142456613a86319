//! C ABI over the flowdistill pipeline.
//!
//! Every fallible call returns an [`FdStatus`]; on failure the message is
//! available from [`fd_last_error_message`] on the same thread. Datasets
//! and checkpoints are opaque handles released with their `_free` function.
//! Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flowdistill::dataset::{generate_dataset, Dataset, DatasetConfig};
use flowdistill::encoder::encode_points;
use flowdistill::eval::{ce_rr, iou_from_confusion, linear_probe, probe_split, ConfusionMatrix, ProbeConfig};
use flowdistill::io::{load_checkpoint, read_dataset, save_checkpoint, write_dataset};
use flowdistill::losses::{d2s_loss, spatial_contrastive, temporal_contrastive, LossOutput, LossWeights, Temperature};
use flowdistill::synth::PointCloud;
use flowdistill::trainer::{run_pretraining, Checkpoint, Model, TrainConfig};
use flowdistill::{Error, FeatureMatrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Corrupt = 5,
    Panic = 6,
}

/// Opaque dataset handle.
pub struct FdDataset(Dataset);

/// Opaque checkpoint handle.
pub struct FdCheckpoint(Checkpoint);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FdDatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    pub num_classes: usize,
    pub cameras: usize,
    pub beams: usize,
    pub hz: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FdTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub dt: f64,
    pub num_sweeps: usize,
    pub tau: f64,
    pub base_lr: f64,
    pub w_sc: f64,
    pub w_tc: f64,
    pub w_d2s: f64,
    pub enable_vc: bool,
    pub enable_d2s: bool,
    pub enable_fcl: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FdHistoryRow {
    pub step: usize,
    pub lr: f64,
    pub l_sc: f64,
    pub l_tc: f64,
    pub l_d2s: f64,
    pub total: f64,
    pub skipped: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FdStatus {
    match e {
        Error::Shape(_) => FdStatus::Shape,
        Error::InvalidArgument(_) => FdStatus::InvalidArgument,
        Error::Io { .. } => FdStatus::Io,
        Error::Corrupt { .. } | Error::Manifest { .. } => FdStatus::Corrupt,
    }
}

struct Fail(FdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FdStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FdStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<FeatureMatrix, Fail> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(FdStatus::Shape, format!("{what} size overflows")))?;
    if n == 0 {
        return Ok(FeatureMatrix::zeros(rows, cols));
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(FeatureMatrix::from_vec(rows, cols, std::slice::from_raw_parts(p, n).to_vec())?)
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn copy_out(dst: *mut f64, src: &[f64]) {
    if !dst.is_null() && !src.is_empty() {
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn fd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_train_config_default(out: *mut FdTrainConfig) -> FdStatus {
    guard(|| {
        let d = TrainConfig::default();
        write_out(
            out,
            FdTrainConfig {
                seed: d.seed,
                steps: d.steps,
                dt: d.dt,
                num_sweeps: d.num_sweeps,
                tau: d.tau,
                base_lr: d.base_lr,
                w_sc: d.weights.sc,
                w_tc: d.weights.tc,
                w_d2s: d.weights.d2s,
                enable_vc: d.enable_vc,
                enable_d2s: d.enable_d2s,
                enable_fcl: d.enable_fcl,
            },
            "out",
        )
    })
}

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_config_default(out: *mut FdDatasetConfig) -> FdStatus {
    guard(|| {
        let d = DatasetConfig::default();
        write_out(
            out,
            FdDatasetConfig {
                seed: d.seed,
                scenes: d.scenes,
                num_classes: d.num_classes,
                cameras: d.cameras,
                beams: d.beams,
                hz: d.hz,
            },
            "out",
        )
    })
}

/// # Safety
/// `config` must be null or point to a valid config; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_generate(config: *const FdDatasetConfig, out: *mut *mut FdDataset) -> FdStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = generate_dataset(&DatasetConfig {
            seed: c.seed,
            scenes: c.scenes,
            num_classes: c.num_classes,
            cameras: c.cameras,
            beams: c.beams,
            hz: c.hz,
            ..DatasetConfig::default()
        })?;
        out.write(Box::into_raw(Box::new(FdDataset(d))));
        Ok(())
    })
}

/// # Safety
/// `dir` must be null or a NUL-terminated string; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_load(dir: *const c_char, out: *mut *mut FdDataset) -> FdStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = read_dataset(&dir)?;
        out.write(Box::into_raw(Box::new(FdDataset(d))));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle; `dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_save(dataset: *const FdDataset, dir: *const c_char) -> FdStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        write_dataset(&d.0, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_scene_count(dataset: *const FdDataset, out: *mut usize) -> FdStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        write_out(out, d.0.scenes.len(), "out")
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_free(dataset: *mut FdDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Runs a full pretraining from a fresh initialization.
///
/// # Safety
/// `dataset` and `config` must be null or valid; `out` null or valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn fd_pretrain(
    dataset: *const FdDataset,
    config: *const FdTrainConfig,
    out: *mut *mut FdCheckpoint,
) -> FdStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = TrainConfig {
            seed: c.seed,
            steps: c.steps,
            dt: c.dt,
            num_sweeps: c.num_sweeps,
            tau: c.tau,
            base_lr: c.base_lr,
            weights: LossWeights {
                sc: c.w_sc,
                tc: c.w_tc,
                d2s: c.w_d2s,
            },
            enable_vc: c.enable_vc,
            enable_d2s: c.enable_d2s,
            enable_fcl: c.enable_fcl,
            ..TrainConfig::default()
        };
        let ckpt = run_pretraining(&cfg, &d.0)?;
        out.write(Box::into_raw(Box::new(FdCheckpoint(ckpt))));
        Ok(())
    })
}

/// # Safety
/// `path` must be null or NUL-terminated; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_checkpoint_load(path: *const c_char, out: *mut *mut FdCheckpoint) -> FdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = load_checkpoint(&path)?;
        out.write(Box::into_raw(Box::new(FdCheckpoint(c))));
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be null or a live handle; `path` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fd_checkpoint_save(ckpt: *const FdCheckpoint, path: *const c_char) -> FdStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null("checkpoint"))?;
        save_checkpoint(&path_arg(path, "path")?, &c.0)?;
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be null or a live handle; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_checkpoint_history_len(ckpt: *const FdCheckpoint, out: *mut usize) -> FdStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null("checkpoint"))?;
        write_out(out, c.0.history.len(), "out")
    })
}

/// # Safety
/// `ckpt` must be null or a live handle; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_checkpoint_history_row(
    ckpt: *const FdCheckpoint,
    index: usize,
    out: *mut FdHistoryRow,
) -> FdStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null("checkpoint"))?;
        let h = c
            .0
            .history
            .get(index)
            .ok_or_else(|| Fail(FdStatus::InvalidArgument, format!("history row {index} out of range")))?;
        write_out(
            out,
            FdHistoryRow {
                step: h.step,
                lr: h.lr,
                l_sc: h.sc,
                l_tc: h.tc,
                l_d2s: h.d2s,
                total: h.total,
                skipped: h.skipped,
            },
            "out",
        )
    })
}

/// Backbone output width D.
///
/// # Safety
/// `ckpt` must be null or a live handle; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_checkpoint_feature_dim(ckpt: *const FdCheckpoint, out: *mut usize) -> FdStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null("checkpoint"))?;
        write_out(out, c.0.model.encoder.out_dim(), "out")
    })
}

/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fd_checkpoint_free(ckpt: *mut FdCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Backbone features of `n` points: `coords` is n x 3, `feats` n x
/// `channels`, `out` n x D.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn fd_encode_points(
    ckpt: *const FdCheckpoint,
    coords: *const f64,
    feats: *const f64,
    n: usize,
    channels: usize,
    out: *mut f64,
) -> FdStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null("checkpoint"))?;
        let xyz = matrix_arg(coords, n, 3, "coords")?;
        let f = matrix_arg(feats, n, channels, "feats")?;
        let pts = xyz.iter_rows().map(|r| [r[0], r[1], r[2]]).collect();
        let cloud = PointCloud::new(pts, f, vec![0; n], 0.0)?;
        let enc = encode_points(&c.0.model.encoder, &cloud)?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        copy_out(out, enc.as_slice());
        Ok(())
    })
}

/// Linear-probe mIoU of a checkpoint's encoder, or of a random encoder
/// initialized from `seed` when `ckpt` is null.
///
/// # Safety
/// Handles must be null or live; `out_miou` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_probe_miou(
    ckpt: *const FdCheckpoint,
    dataset: *const FdDataset,
    seed: u64,
    out_miou: *mut f64,
) -> FdStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let encoder = match ckpt.as_ref() {
            Some(c) => c.0.model.encoder.clone(),
            None => Model::init(&TrainConfig::default().model, d.0.channels(), seed).encoder,
        };
        let (train, eval) = probe_split(&d.0)?;
        let r = linear_probe(&encoder, &train, &eval, d.0.num_classes(), &ProbeConfig::default())?;
        write_out(out_miou, r.miou(), "out_miou")
    })
}

unsafe fn loss_out(
    out: LossOutput,
    value: *mut f64,
    grad_q: *mut f64,
    grad_k: *mut f64,
) -> Result<(), Fail> {
    write_out(value, out.value, "value")?;
    copy_out(grad_q, out.grad_q.as_slice());
    copy_out(grad_k, out.grad_k.as_slice());
    Ok(())
}

unsafe fn mask_arg(mask: *const u8, v: usize) -> Vec<bool> {
    if mask.is_null() || v == 0 {
        return vec![false; v];
    }
    std::slice::from_raw_parts(mask, v).iter().map(|&m| m != 0).collect()
}

/// Spatial contrastive loss of v x l matrices `q` and `k`. `mask` (v bytes,
/// nonzero = excluded) and both gradient buffers may be null.
///
/// # Safety
/// Non-null buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fd_spatial_contrastive(
    q: *const f64,
    k: *const f64,
    v: usize,
    l: usize,
    tau: f64,
    mask: *const u8,
    value: *mut f64,
    grad_q: *mut f64,
    grad_k: *mut f64,
) -> FdStatus {
    guard(|| {
        let out = spatial_contrastive(
            &matrix_arg(q, v, l, "q")?,
            &matrix_arg(k, v, l, "k")?,
            Temperature::new(tau)?,
            &mask_arg(mask, v),
        )?;
        loss_out(out, value, grad_q, grad_k)
    })
}

/// Temporal contrastive loss of row-paired v x l matrices.
///
/// # Safety
/// Non-null buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fd_temporal_contrastive(
    q_t: *const f64,
    q_other: *const f64,
    v: usize,
    l: usize,
    tau: f64,
    value: *mut f64,
    grad_q: *mut f64,
    grad_k: *mut f64,
) -> FdStatus {
    guard(|| {
        let out = temporal_contrastive(
            &matrix_arg(q_t, v, l, "q_t")?,
            &matrix_arg(q_other, v, l, "q_other")?,
            Temperature::new(tau)?,
        )?;
        loss_out(out, value, grad_q, grad_k)
    })
}

/// Dense-to-sparse cosine distance of row-paired v x l matrices.
///
/// # Safety
/// Non-null buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fd_d2s_loss(
    q_sparse: *const f64,
    q_dense: *const f64,
    v: usize,
    l: usize,
    mask: *const u8,
    value: *mut f64,
    grad_sparse: *mut f64,
    grad_dense: *mut f64,
) -> FdStatus {
    guard(|| {
        let out = d2s_loss(
            &matrix_arg(q_sparse, v, l, "q_sparse")?,
            &matrix_arg(q_dense, v, l, "q_dense")?,
            &mask_arg(mask, v),
        )?;
        loss_out(out, value, grad_sparse, grad_dense)
    })
}

/// Per-class IoU (NaN where undefined) and mIoU (NaN when no class is
/// defined) of an n x n confusion matrix, rows = ground truth.
///
/// # Safety
/// `counts` must hold n*n values and `per_class` (if non-null) n.
#[no_mangle]
pub unsafe extern "C" fn fd_iou_from_confusion(
    counts: *const u64,
    n: usize,
    per_class: *mut f64,
    miou: *mut f64,
) -> FdStatus {
    guard(|| {
        if counts.is_null() && n > 0 {
            return Err(null("counts"));
        }
        let flat = if n == 0 { &[][..] } else { std::slice::from_raw_parts(counts, n * n) };
        let rows: Vec<Vec<u64>> = flat.chunks(n.max(1)).map(<[u64]>::to_vec).collect();
        let r = iou_from_confusion(&ConfusionMatrix::from_counts(&rows)?);
        let values: Vec<f64> = r.per_class.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        copy_out(per_class, &values);
        write_out(miou, r.miou.unwrap_or(f64::NAN), "miou")
    })
}

/// Corruption error and resilience rate over three severities; NaN marks an
/// undefined ratio.
///
/// # Safety
/// `model` and `baseline` must hold three values each.
#[no_mangle]
pub unsafe extern "C" fn fd_ce_rr(
    model: *const f64,
    baseline: *const f64,
    clean: f64,
    ce: *mut f64,
    rr: *mut f64,
) -> FdStatus {
    guard(|| {
        if model.is_null() || baseline.is_null() {
            return Err(null("scores"));
        }
        let m: [f64; 3] = std::slice::from_raw_parts(model, 3).try_into().expect("three values");
        let b: [f64; 3] = std::slice::from_raw_parts(baseline, 3).try_into().expect("three values");
        let r = ce_rr(m, b, clean);
        write_out(ce, r.ce.unwrap_or(f64::NAN), "ce")?;
        write_out(rr, r.rr.unwrap_or(f64::NAN), "rr")
    })
}
