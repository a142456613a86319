//! Binary blobs with CRC32 headers, the dataset manifest, checkpoints and
//! CSV reports.
//!
//! Every blob is a 20-byte header followed by a little-endian payload:
//!
//! | offset | size | field                  |
//! |--------|------|------------------------|
//! | 0      | 4    | magic (`SFPC`, `SFIM`, `SFCK`) |
//! | 4      | 4    | u32 format version     |
//! | 8      | 8    | u64 payload length     |
//! | 16     | 4    | u32 CRC32 of payload   |

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Keyframe, SceneData};
use crate::encoder::{HeadParams, PointEncoderParams};
use crate::error::{Error, Result};
use crate::eval::ProbeResult;
use crate::geometry::RigidTransform;
use crate::matrix::FeatureMatrix;
use crate::synth::{PointCloud, SemanticImage, SensorRig, Sweep};
use crate::trainer::{AdamState, Checkpoint, HistoryRow, Model, TrainConfig};

pub const CLOUD_MAGIC: [u8; 4] = *b"SFPC";
pub const IMAGE_MAGIC: [u8; 4] = *b"SFIM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SFCK";
pub const BLOB_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Header plus payload.
pub fn encode_blob(magic: [u8; 4], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Checks magic, version, length and CRC; returns the payload. `path` only
/// labels errors.
pub fn decode_blob<'a>(bytes: &'a [u8], magic: [u8; 4], path: &Path) -> Result<&'a [u8]> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[0..4] != magic {
        return Err(corrupt(format!(
            "magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let crc = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(corrupt(format!("payload is {} bytes, header says {len}", payload.len())));
    }
    let actual = crc32fast::hash(payload);
    if actual != crc {
        return Err(corrupt(format!("CRC32 {actual:08x}, header says {crc:08x}")));
    }
    Ok(payload)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, at: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("payload truncated at byte {}", self.at),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count that must fit in the remaining payload at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.at) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(self.corrupt(format!("count {n} exceeds the payload")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn corrupt(&self, reason: String) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn finish(self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `u64 N, u32 C, N x 3 f64 coords, N x C f64 feats, N u16 labels, f64 timestamp`.
pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let c = cloud.channels();
    let mut out = Vec::with_capacity(20 + n * (26 + 8 * c));
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for p in &cloud.coords {
        put_f64s(&mut out, p);
    }
    put_f64s(&mut out, cloud.feats.as_slice());
    for l in &cloud.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&cloud.timestamp.to_le_bytes());
    out
}

pub fn decode_cloud(payload: &[u8], path: &Path) -> Result<PointCloud> {
    let mut r = Reader::new(payload, path);
    let n = r.count(26)?;
    let c = r.u32()? as usize;
    let expected = (n as u128) * (26 + 8 * c as u128) + 20;
    if expected != payload.len() as u128 {
        return Err(r.corrupt(format!("{} bytes for {n} points of {c} channels", payload.len())));
    }
    let coords = (0..n)
        .map(|_| Ok([r.f64()?, r.f64()?, r.f64()?]))
        .collect::<Result<Vec<_>>>()?;
    let feats = FeatureMatrix::from_vec(n, c, r.f64s(n * c)?)?;
    let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let timestamp = r.f64()?;
    r.finish()?;
    PointCloud::new(coords, feats, labels, timestamp)
}

/// `u32 H, u32 W, H x W u16 class ids`.
pub fn encode_image(image: &SemanticImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 2 * image.class_ids.len());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    for id in &image.class_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_image(payload: &[u8], path: &Path) -> Result<SemanticImage> {
    let mut r = Reader::new(payload, path);
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if (h as u128) * (w as u128) * 2 + 8 != payload.len() as u128 {
        return Err(r.corrupt(format!("{} bytes for a {h}x{w} image", payload.len())));
    }
    let ids = (0..h * w).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    SemanticImage::new(h, w, ids)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_blob(CLOUD_MAGIC, &encode_cloud(cloud)))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = read_file(path)?;
    decode_cloud(decode_blob(&bytes, CLOUD_MAGIC, path)?, path)
}

pub fn write_image(path: &Path, image: &SemanticImage) -> Result<()> {
    write_atomic(path, &encode_blob(IMAGE_MAGIC, &encode_image(image)))
}

pub fn read_image(path: &Path) -> Result<SemanticImage> {
    let bytes = read_file(path)?;
    decode_image(decode_blob(&bytes, IMAGE_MAGIC, path)?, path)
}

fn put_matrix(out: &mut Vec<u8>, m: &FeatureMatrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    put_f64s(out, m.as_slice());
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    put_f64s(out, v);
}

fn get_matrix(r: &mut Reader) -> Result<FeatureMatrix> {
    let rows = r.count(0)?;
    let cols = r.count(0)?;
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.bytes.len() - r.at))
        .ok_or_else(|| r.corrupt(format!("matrix {rows}x{cols} exceeds the payload")))?;
    FeatureMatrix::from_vec(rows, cols, r.f64s(n)?)
}

fn get_vec(r: &mut Reader) -> Result<Vec<f64>> {
    let n = r.count(8)?;
    r.f64s(n)
}

/// `u64 config length, config JSON, u64 classes, u64 channels, f64 input
/// scale, encoder w1 b1 w2 b2, point head, image head, u64 adam step, six
/// first moments, six second moments, u64 step, u64 history length, then per
/// row u64 step, f64 lr sc tc d2s total, u8 skipped`. Matrices are `u64
/// rows, u64 cols, f64 data`; vectors `u64 len, f64 data`.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&ckpt.config).map_err(|e| Error::invalid(format!("config encoding: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(ckpt.num_classes as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.channels as u64).to_le_bytes());
    let e = &ckpt.model.encoder;
    out.extend_from_slice(&e.input_scale.to_le_bytes());
    put_matrix(&mut out, &e.w1);
    put_vec(&mut out, &e.b1);
    put_matrix(&mut out, &e.w2);
    put_vec(&mut out, &e.b2);
    put_matrix(&mut out, &ckpt.model.point_head.weight);
    put_matrix(&mut out, &ckpt.model.image_head.weight);
    out.extend_from_slice(&ckpt.adam.step.to_le_bytes());
    for t in ckpt.adam.m.iter().chain(&ckpt.adam.v) {
        put_vec(&mut out, t);
    }
    out.extend_from_slice(&(ckpt.step as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.history.len() as u64).to_le_bytes());
    for h in &ckpt.history {
        out.extend_from_slice(&(h.step as u64).to_le_bytes());
        put_f64s(&mut out, &[h.lr, h.sc, h.tc, h.d2s, h.total]);
        out.push(h.skipped as u8);
    }
    Ok(out)
}

pub fn decode_checkpoint(payload: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(payload, path);
    let n = r.count(1)?;
    let config: TrainConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        source: e,
    })?;
    let num_classes = r.u64()? as usize;
    let channels = r.u64()? as usize;
    let input_scale = r.f64()?;
    let encoder = PointEncoderParams {
        w1: get_matrix(&mut r)?,
        b1: get_vec(&mut r)?,
        w2: get_matrix(&mut r)?,
        b2: get_vec(&mut r)?,
        input_scale,
    };
    let model = Model {
        encoder,
        point_head: HeadParams {
            weight: get_matrix(&mut r)?,
        },
        image_head: HeadParams {
            weight: get_matrix(&mut r)?,
        },
    };
    let adam_step = r.u64()?;
    let m = (0..6).map(|_| get_vec(&mut r)).collect::<Result<Vec<_>>>()?;
    let v = (0..6).map(|_| get_vec(&mut r)).collect::<Result<Vec<_>>>()?;
    let step = r.u64()? as usize;
    let rows = r.count(49)?;
    let history = (0..rows)
        .map(|_| {
            let step = r.u64()? as usize;
            let [lr, sc, tc, d2s, total] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            let skipped = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(r.corrupt(format!("flag byte {b}"))),
            };
            Ok(HistoryRow {
                step,
                lr,
                sc,
                tc,
                d2s,
                total,
                skipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let shapes_ok = model
        .tensors()
        .iter()
        .zip(m.iter().zip(&v))
        .all(|(t, (a, b))| t.len() == a.len() && t.len() == b.len());
    let e = &model.encoder;
    let dims_ok = e.w1.rows() == e.b1.len()
        && e.w2.cols() == e.w1.rows()
        && e.w2.rows() == e.b2.len()
        && e.w1.cols() == 3 + channels
        && model.point_head.weight.cols() == e.w2.rows()
        && model.image_head.weight.rows() == model.point_head.weight.rows();
    if !shapes_ok || !dims_ok {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "tensor shapes are inconsistent".into(),
        });
    }
    Ok(Checkpoint {
        config,
        num_classes,
        channels,
        model,
        adam: AdamState { step: adam_step, m, v },
        step,
        history,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_blob(CHECKPOINT_MAGIC, &encode_checkpoint(ckpt)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    decode_checkpoint(decode_blob(&bytes, CHECKPOINT_MAGIC, path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub path: String,
    pub to_keyframe: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub ego_pose: RigidTransform,
    pub cloud: String,
    pub images: Vec<String>,
    pub sweeps: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub camera_count: usize,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene_count: usize,
    pub keyframe_interval: f64,
    pub stored_sweeps: usize,
    pub rig: SensorRig,
    pub scenes: Vec<SceneEntry>,
}

fn frame_dir(scene: usize, kf: usize) -> String {
    format!("scene_{scene:04}/kf_{kf:02}")
}

/// Relative blob paths of every file a dataset writes, manifest excluded.
pub fn manifest_for(dataset: &Dataset) -> DatasetManifest {
    let scenes = dataset
        .scenes
        .iter()
        .enumerate()
        .map(|(s, scene)| SceneEntry {
            seed: scene.seed,
            class_names: dataset.class_names.clone(),
            camera_count: dataset.rig.cameras.len(),
            frames: scene
                .keyframes
                .iter()
                .enumerate()
                .map(|(k, kf)| {
                    let dir = frame_dir(s, k);
                    FrameEntry {
                        timestamp: kf.timestamp,
                        ego_pose: kf.ego_pose,
                        cloud: format!("{dir}/cloud.sfpc"),
                        images: (0..kf.images.len()).map(|c| format!("{dir}/cam_{c}.sfim")).collect(),
                        sweeps: kf
                            .sweeps
                            .iter()
                            .enumerate()
                            .map(|(i, sw)| SweepEntry {
                                path: format!("{dir}/sweep_{i}.sfpc"),
                                to_keyframe: sw.to_keyframe,
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect();
    DatasetManifest {
        format_version: MANIFEST_VERSION,
        scene_count: dataset.scenes.len(),
        keyframe_interval: dataset.keyframe_interval,
        stored_sweeps: dataset.stored_sweeps,
        rig: dataset.rig.clone(),
        scenes,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every blob, then the manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let manifest = manifest_for(dataset);
    create_dir(dir)?;
    let jobs: Vec<(PathBuf, &Keyframe, &FrameEntry)> = dataset
        .scenes
        .iter()
        .zip(&manifest.scenes)
        .flat_map(|(scene, entry)| scene.keyframes.iter().zip(&entry.frames))
        .map(|(kf, fe)| (dir.join(&fe.cloud), kf, fe))
        .collect();
    jobs.par_iter().try_for_each(|(cloud_path, kf, fe)| {
        create_dir(cloud_path.parent().expect("blob paths have a parent"))?;
        write_cloud(cloud_path, &kf.cloud)?;
        for (img, rel) in kf.images.iter().zip(&fe.images) {
            write_image(&dir.join(rel), img)?;
        }
        for (sw, entry) in kf.sweeps.iter().zip(&fe.sweeps) {
            write_cloud(&dir.join(&entry.path), &sw.cloud)?;
        }
        Ok::<(), Error>(())
    })?;
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
    json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = read_file(&path)?;
    let m: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        source: e,
    })?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            m.format_version
        )));
    }
    if m.scene_count != m.scenes.len() || m.scenes.is_empty() {
        return Err(Error::invalid(format!("{}: scene count does not match the scene list", path.display())));
    }
    let first = &m.scenes[0];
    for s in &m.scenes {
        if s.class_names != first.class_names || s.camera_count != m.rig.cameras.len() {
            return Err(Error::invalid(format!("{}: scenes disagree on classes or cameras", path.display())));
        }
        for f in &s.frames {
            if f.images.len() != s.camera_count || f.sweeps.len() != m.stored_sweeps {
                return Err(Error::invalid(format!("{}: frame entry has the wrong blob count", path.display())));
            }
        }
    }
    Ok(m)
}

/// Reads the manifest and every blob, verifying each checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let scenes = m
        .scenes
        .par_iter()
        .map(|s| {
            let keyframes = s
                .frames
                .iter()
                .map(|f| {
                    let cloud = read_cloud(&dir.join(&f.cloud))?;
                    let images = f
                        .images
                        .iter()
                        .map(|p| read_image(&dir.join(p)))
                        .collect::<Result<Vec<_>>>()?;
                    let sweeps = f
                        .sweeps
                        .iter()
                        .map(|e| {
                            Ok(Sweep {
                                cloud: read_cloud(&dir.join(&e.path))?,
                                to_keyframe: e.to_keyframe,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Keyframe {
                        timestamp: f.timestamp,
                        ego_pose: f.ego_pose,
                        cloud,
                        images,
                        sweeps,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneData { seed: s.seed, keyframes })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        rig: m.rig,
        class_names: m.scenes[0].class_names.clone(),
        keyframe_interval: m.keyframe_interval,
        stored_sweeps: m.stored_sweeps,
        scenes,
    })
}

pub const METRICS_HEADER: &str = "step,lr,L_sc,L_tc,L_d2s,total";

pub fn metrics_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for h in history {
        writeln!(s, "{},{},{},{},{},{}", h.step, h.lr, h.sc, h.tc, h.d2s, h.total).expect("string write");
    }
    s
}

pub fn write_metrics_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    write_atomic(path, metrics_csv(history).as_bytes())
}

/// `class_id,class_name,iou` per class (empty IoU where undefined or absent
/// from the probe's training set), then an `mIoU` footer row.
pub fn probe_report_csv(class_names: &[String], result: &ProbeResult) -> String {
    let mut s = String::from("class_id,class_name,iou\n");
    for (c, name) in class_names.iter().enumerate() {
        let iou = match (result.iou.per_class.get(c).copied().flatten(), result.absent_from_train[c]) {
            (Some(v), false) => v.to_string(),
            _ => String::new(),
        };
        writeln!(s, "{c},{name},{iou}").expect("string write");
    }
    writeln!(s, ",mIoU,{}", result.miou()).expect("string write");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};
    use crate::trainer::run_pretraining;

    fn cloud() -> PointCloud {
        PointCloud::new(
            vec![[1.0, -2.5, 0.125], [f64::MIN_POSITIVE, 1e300, -0.0]],
            FeatureMatrix::from_vec(2, 2, vec![1.0, 0.5, -3.0, 7.25]).unwrap(),
            vec![3, u16::MAX - 1],
            0.45,
        )
        .unwrap()
    }

    #[test]
    fn cloud_payload_layout() {
        let p = encode_cloud(&cloud());
        assert_eq!(p.len(), 8 + 4 + 2 * 24 + 2 * 2 * 8 + 2 * 2 + 8);
        assert_eq!(&p[0..8], &2u64.to_le_bytes());
        assert_eq!(&p[8..12], &2u32.to_le_bytes());
        assert_eq!(&p[12..20], &1.0f64.to_le_bytes());
        let blob = encode_blob(CLOUD_MAGIC, &p);
        assert_eq!(&blob[0..4], b"SFPC");
        assert_eq!(&blob[16..20], &crc32fast::hash(&p).to_le_bytes());
        let back = decode_cloud(decode_blob(&blob, CLOUD_MAGIC, Path::new("x")).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.coords[1][2].to_bits(), (-0.0f64).to_bits());
        assert_eq!(encode_cloud(&back), p);
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let blob = encode_blob(IMAGE_MAGIC, &encode_image(&SemanticImage::filled(3, 4, 2)));
        for i in 0..blob.len() {
            let mut bad = blob.clone();
            bad[i] ^= 0x5a;
            let err = decode_blob(&bad, IMAGE_MAGIC, Path::new("cam_0.sfim")).unwrap_err();
            assert!(err.to_string().contains("cam_0.sfim"), "{err}");
        }
        assert!(decode_blob(&blob[..blob.len() - 1], IMAGE_MAGIC, Path::new("p")).is_err());
        assert!(decode_blob(&blob, CLOUD_MAGIC, Path::new("p")).is_err());
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let p = encode_cloud(&cloud());
        assert!(decode_cloud(&p[..p.len() - 2], Path::new("p")).is_err());
        let mut huge = p.clone();
        huge[0..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_cloud(&huge, Path::new("p")).is_err());
        let img = encode_image(&SemanticImage::filled(2, 2, 1));
        assert!(decode_image(&img[..img.len() - 1], Path::new("p")).is_err());
    }

    #[test]
    fn dataset_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&DatasetConfig {
            seed: 5,
            scenes: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.scenes[0].camera_count, 3);
        assert_eq!(m.scenes[1].frames[2].sweeps[2].path, "scene_0001/kf_02/sweep_2.sfpc");

        let ckpt = run_pretraining(
            &TrainConfig {
                steps: 3,
                ..TrainConfig::default()
            },
            &d,
        )
        .unwrap();
        let path = dir.path().join("model.sfck");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(encode_checkpoint(&loaded).unwrap(), encode_checkpoint(&ckpt).unwrap());
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = [HistoryRow {
            step: 0,
            lr: 0.0004,
            sc: 1.5,
            tc: 0.0,
            d2s: 0.0,
            total: 1.5,
            skipped: false,
        }];
        assert_eq!(metrics_csv(&rows), "step,lr,L_sc,L_tc,L_d2s,total\n0,0.0004,1.5,0,0,1.5\n");
    }
}
