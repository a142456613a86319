//! In-memory synthetic datasets: scenes of evenly spaced keyframes, each
//! with its camera images and a fixed number of stored sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::synth::{
    capture_frame, generate_scene, FrameBundle, LidarSpec, PointCloud, SceneSpec, SemanticImage, SensorRig, Sweep,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    pub num_classes: usize,
    pub cameras: usize,
    pub beams: usize,
    /// LiDAR rate, Hz; sweeps are spaced `1 / hz` apart.
    pub hz: f64,
    pub keyframes_per_scene: usize,
    /// Seconds between keyframes. The first keyframe sits one interval
    /// after the start of the scene.
    pub keyframe_interval: f64,
    /// Sweeps captured before every keyframe.
    pub stored_sweeps: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 1,
            num_classes: 6,
            cameras: 3,
            beams: 16,
            hz: 20.0,
            keyframes_per_scene: 3,
            keyframe_interval: 0.5,
            stored_sweeps: 3,
        }
    }
}

impl DatasetConfig {
    pub fn rig(&self) -> Result<SensorRig> {
        let lidar = LidarSpec {
            num_beams: self.beams,
            frequency: self.hz,
            ..LidarSpec::default()
        };
        lidar.validate()?;
        SensorRig::with_cameras(lidar, self.cameras)
    }

    pub fn keyframe_times(&self) -> Vec<f64> {
        (0..self.keyframes_per_scene)
            .map(|k| (k + 1) as f64 * self.keyframe_interval)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::invalid("dataset needs at least one scene"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.keyframes_per_scene == 0 {
            return Err(Error::invalid("need at least one keyframe per scene"));
        }
        if !(self.keyframe_interval > 0.0) || !(self.hz > 0.0) {
            return Err(Error::invalid("keyframe interval and LiDAR rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub timestamp: f64,
    /// World <- vehicle.
    pub ego_pose: RigidTransform,
    pub cloud: PointCloud,
    pub images: Vec<SemanticImage>,
    /// Most recent first.
    pub sweeps: Vec<Sweep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub seed: u64,
    pub keyframes: Vec<Keyframe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rig: SensorRig,
    pub class_names: Vec<String>,
    pub keyframe_interval: f64,
    pub stored_sweeps: usize,
    pub scenes: Vec<SceneData>,
}

/// Keyframe indices `(i - m, i, i + m)` of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub scene: usize,
    pub keyframes: [usize; 3],
}

/// Independent seed for sub-stream `stream` of `base` (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scene_seed(base: u64, index: u64) -> u64 {
    derive_seed(base, index)
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rig = cfg.rig()?;
    let times = cfg.keyframe_times();
    let scenes = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(cfg.seed, i as u64);
            let scene = generate_scene(&SceneSpec::street(seed, cfg.num_classes))?;
            let keyframes = times
                .iter()
                .map(|&t| {
                    let b = capture_frame(&scene, t, cfg.stored_sweeps, &rig)?;
                    Ok(Keyframe {
                        timestamp: b.timestamp,
                        ego_pose: b.ego_pose,
                        cloud: b.keyframe,
                        images: b.images,
                        sweeps: b.sweeps,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneData { seed, keyframes })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        rig,
        class_names: crate::synth::default_class_names(cfg.num_classes),
        keyframe_interval: cfg.keyframe_interval,
        stored_sweeps: cfg.stored_sweeps,
        scenes,
    })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.scenes
            .first()
            .and_then(|s| s.keyframes.first())
            .map_or(1, |k| k.cloud.channels())
    }

    pub fn keyframe(&self, scene: usize, kf: usize) -> Result<&Keyframe> {
        self.scenes
            .get(scene)
            .and_then(|s| s.keyframes.get(kf))
            .ok_or_else(|| Error::invalid(format!("no keyframe {kf} in scene {scene}")))
    }

    /// Keyframe `kf` of `scene` with its `num_sweeps` most recent sweeps.
    pub fn bundle(&self, scene: usize, kf: usize, num_sweeps: usize) -> Result<FrameBundle> {
        if num_sweeps > self.stored_sweeps {
            return Err(Error::invalid(format!(
                "{num_sweeps} sweeps requested, dataset stores {}",
                self.stored_sweeps
            )));
        }
        let k = self.keyframe(scene, kf)?;
        Ok(FrameBundle {
            keyframe: k.cloud.clone(),
            sweeps: k.sweeps[..num_sweeps].to_vec(),
            images: k.images.clone(),
            calibrations: self.rig.cameras.clone(),
            timestamp: k.timestamp,
            ego_pose: k.ego_pose,
        })
    }

    /// Keyframe offset for a temporal span `dt`.
    pub fn stride(&self, dt: f64) -> Result<usize> {
        let m = (dt / self.keyframe_interval).round();
        if !(dt > 0.0) || m < 1.0 || (m * self.keyframe_interval - dt).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "dt {dt} is not a positive multiple of the keyframe interval {}",
                self.keyframe_interval
            )));
        }
        Ok(m as usize)
    }

    /// Every triple `(i - m, i, i + m)` in scene order.
    pub fn triples(&self, dt: f64) -> Result<Vec<Triple>> {
        let m = self.stride(dt)?;
        let mut out = Vec::new();
        for (s, scene) in self.scenes.iter().enumerate() {
            for i in m..scene.keyframes.len().saturating_sub(m) {
                out.push(Triple {
                    scene: s,
                    keyframes: [i - m, i, i + m],
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 3,
            scenes: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn keyframes_sit_on_the_interval_grid() {
        let d = generate_dataset(&small()).unwrap();
        assert_eq!(d.scenes.len(), 2);
        let ts: Vec<f64> = d.scenes[0].keyframes.iter().map(|k| k.timestamp).collect();
        assert_eq!(ts, vec![0.5, 1.0, 1.5]);
        assert_eq!(d.scenes[0].keyframes[0].sweeps.len(), 3);
        assert_eq!(d.scenes[0].keyframes[0].images.len(), 3);
        assert_ne!(d.scenes[0].seed, d.scenes[1].seed);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
    }

    #[test]
    fn triples_follow_the_stride() {
        let d = generate_dataset(&small()).unwrap();
        let t = d.triples(0.5).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1], Triple { scene: 1, keyframes: [0, 1, 2] });
        assert!(d.triples(1.0).unwrap().is_empty());
        assert!(d.triples(0.3).is_err());
    }

    #[test]
    fn bundles_take_the_most_recent_sweeps() {
        let d = generate_dataset(&small()).unwrap();
        let b = d.bundle(0, 1, 2).unwrap();
        b.validate().unwrap();
        assert_eq!(b.sweeps.len(), 2);
        assert_eq!(b.sweeps[0], d.scenes[0].keyframes[1].sweeps[0]);
        assert!(d.bundle(0, 1, 4).is_err());
    }

    #[test]
    fn scene_seeds_are_spread() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| scene_seed(0, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
