//! View-consistent semantic superpixels and their superpoints.
//!
//! A superpixel here is one semantic class within one frame. With view
//! consistency enabled a class keeps a single id across every camera; the
//! per-view variant keys ids by (camera, class) instead, which reproduces
//! the fragmented ids that make one object its own negative.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::geometry::{project_point, transform_points, CameraCalibration, Vec3};
use crate::matrix::FeatureMatrix;
use crate::synth::{FrameBundle, PointCloud, SemanticImage, SKY};

/// Identity of a superpixel: its class, and its camera when ids are not
/// unified across views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SuperpixelKey {
    pub camera: Option<usize>,
    pub class: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    /// One row-major grid per camera; `None` marks SKY.
    pub views: Vec<Vec<Option<u32>>>,
    pub view_sizes: Vec<(usize, usize)>,
    /// Key of each id; ids are dense and sorted by key.
    pub keys: Vec<SuperpixelKey>,
    /// Pixels carrying each id, summed over views.
    pub pixel_counts: Vec<usize>,
}

impl SuperpixelMap {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id_to_class(&self) -> Vec<u16> {
        self.keys.iter().map(|k| k.class).collect()
    }

    pub fn class_of(&self, id: u32) -> u16 {
        self.keys[id as usize].class
    }

    #[inline]
    pub fn id_at(&self, camera: usize, row: usize, col: usize) -> Option<u32> {
        let (_, w) = self.view_sizes[camera];
        self.views[camera][row * w + col]
    }

    /// All views flattened camera by camera, matching the row order of
    /// stacked per-pixel features.
    pub fn pixel_ids(&self) -> Vec<Option<u32>> {
        self.views.iter().flatten().copied().collect()
    }

    fn from_keyed(images: &[SemanticImage], key_of: impl Fn(usize, u16) -> SuperpixelKey) -> Self {
        let mut keys = BTreeSet::new();
        for (cam, img) in images.iter().enumerate() {
            let present: BTreeSet<u16> = img.class_ids.iter().copied().filter(|&c| c != SKY).collect();
            keys.extend(present.into_iter().map(|c| key_of(cam, c)));
        }
        let keys: Vec<SuperpixelKey> = keys.into_iter().collect();
        let mut pixel_counts = vec![0usize; keys.len()];
        let views = images
            .iter()
            .enumerate()
            .map(|(cam, img)| {
                img.class_ids
                    .iter()
                    .map(|&c| {
                        if c == SKY {
                            return None;
                        }
                        let id = keys
                            .binary_search(&key_of(cam, c))
                            .expect("key collected above");
                        pixel_counts[id] += 1;
                        Some(id as u32)
                    })
                    .collect()
            })
            .collect();
        Self {
            views,
            view_sizes: images.iter().map(|im| (im.height, im.width)).collect(),
            keys,
            pixel_counts,
        }
    }
}

/// One id per semantic class present in any view (SKY excluded); equal
/// classes share an id in every view.
pub fn build_view_consistent_superpixels(images: &[SemanticImage]) -> SuperpixelMap {
    SuperpixelMap::from_keyed(images, |_, class| SuperpixelKey {
        camera: None,
        class,
    })
}

/// Ids keyed by (camera, class): the same class seen by two cameras gets two
/// ids.
pub fn build_per_view_superpixels(images: &[SemanticImage]) -> SuperpixelMap {
    SuperpixelMap::from_keyed(images, |cam, class| SuperpixelKey {
        camera: Some(cam),
        class,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointAssignment {
    pub ids: Vec<Option<u32>>,
    /// Points per id, length V.
    pub counts: Vec<usize>,
}

impl SuperpointAssignment {
    pub fn num_superpixels(&self) -> usize {
        self.counts.len()
    }

    pub fn assigned(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Superpixel id under the first camera (in index order) whose frustum
/// contains the point.
pub fn superpixel_of_point(p: &Vec3, calibs: &[CameraCalibration], map: &SuperpixelMap) -> Option<u32> {
    for (cam, calib) in calibs.iter().enumerate() {
        if let Some(px) = project_point(p, calib) {
            let (row, col) = px.pixel();
            return map.id_at(cam, row, col);
        }
    }
    None
}

pub fn assign_points(coords: &[Vec3], calibs: &[CameraCalibration], map: &SuperpixelMap) -> SuperpointAssignment {
    let ids: Vec<Option<u32>> = coords
        .par_iter()
        .map(|p| superpixel_of_point(p, calibs, map))
        .collect();
    let mut counts = vec![0usize; map.len()];
    for id in ids.iter().flatten() {
        counts[*id as usize] += 1;
    }
    SuperpointAssignment { ids, counts }
}

pub fn assign_superpoints(cloud: &PointCloud, calibs: &[CameraCalibration], map: &SuperpixelMap) -> SuperpointAssignment {
    assign_points(&cloud.coords, calibs, map)
}

/// Keyframe points followed by every sweep moved into the keyframe frame.
pub fn build_dense_cloud(bundle: &FrameBundle) -> PointCloud {
    if bundle.sweeps.is_empty() {
        return bundle.keyframe.clone();
    }
    let mut coords = bundle.keyframe.coords.clone();
    let mut labels = bundle.keyframe.labels.clone();
    let mut feat_parts: Vec<&FeatureMatrix> = vec![&bundle.keyframe.feats];
    for sweep in &bundle.sweeps {
        coords.extend(transform_points(&sweep.cloud.coords, &sweep.to_keyframe));
        labels.extend_from_slice(&sweep.cloud.labels);
        feat_parts.push(&sweep.cloud.feats);
    }
    let feats = FeatureMatrix::vstack(&feat_parts).expect("sweeps share the keyframe channel count");
    PointCloud {
        coords,
        feats,
        labels,
        timestamp: bundle.timestamp,
    }
}

/// Same rule as [`assign_superpoints`], applied to a dense cloud against
/// the keyframe-time superpixels.
pub fn propagate_dense_superpoints(
    dense: &PointCloud,
    calibs: &[CameraCalibration],
    map_at_t: &SuperpixelMap,
) -> SuperpointAssignment {
    assign_points(&dense.coords, calibs, map_at_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use crate::synth::{self, Sweep, GROUND, VEHICLE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_class_image() {
        let map = build_view_consistent_superpixels(&[SemanticImage::filled(4, 5, 3)]);
        assert_eq!(map.len(), 1);
        assert_eq!(map.id_to_class(), vec![3]);
        assert!(map.views[0].iter().all(|&id| id == Some(0)));
        assert_eq!(map.pixel_counts, vec![20]);
    }

    #[test]
    fn all_sky_has_no_superpixels() {
        let map = build_view_consistent_superpixels(&[SemanticImage::filled(3, 3, SKY)]);
        assert!(map.is_empty());
        assert!(map.views[0].iter().all(Option::is_none));
    }

    #[test]
    fn shared_classes_share_ids_across_views() {
        let a = SemanticImage::new(1, 4, vec![GROUND, GROUND, VEHICLE, SKY]).unwrap();
        let b = SemanticImage::new(1, 4, vec![VEHICLE, VEHICLE, GROUND, 4]).unwrap();
        let map = build_view_consistent_superpixels(&[a.clone(), b.clone()]);
        assert_eq!(map.id_to_class(), vec![GROUND, VEHICLE, 4]);
        assert_eq!(map.id_at(0, 0, 2), map.id_at(1, 0, 0));
        assert_eq!(map.id_at(0, 0, 0), map.id_at(1, 0, 2));

        let split = build_per_view_superpixels(&[a, b]);
        assert_eq!(split.len(), 5);
        assert_ne!(split.id_at(0, 0, 2), split.id_at(1, 0, 0));
        assert_eq!(split.class_of(split.id_at(0, 0, 2).unwrap()), VEHICLE);
    }

    fn two_cameras() -> Vec<CameraCalibration> {
        let k = CameraIntrinsics::new(20.0, 20.0, 16.0, 16.0).unwrap();
        vec![
            CameraCalibration::looking_along(0.3, [0.0, 0.0, 1.0], k, 32, 32).unwrap(),
            CameraCalibration::looking_along(-0.3, [0.0, 0.0, 1.0], k, 32, 32).unwrap(),
        ]
    }

    fn striped_map(classes: u16) -> SuperpixelMap {
        let imgs: Vec<SemanticImage> = (0..2)
            .map(|cam| {
                let ids = (0..32 * 32)
                    .map(|i| ((i % 32 / 4 + cam) as u16) % classes)
                    .collect();
                SemanticImage::new(32, 32, ids).unwrap()
            })
            .collect();
        build_view_consistent_superpixels(&imgs)
    }

    #[test]
    fn behind_every_camera_is_none() {
        let map = striped_map(3);
        let a = assign_points(&[[-10.0, 0.0, 1.0]], &two_cameras(), &map);
        assert_eq!(a.ids, vec![None]);
        assert_eq!(a.assigned(), 0);
    }

    #[test]
    fn optical_axis_reads_principal_pixel() {
        let k = CameraIntrinsics::new(100.0, 100.0, 112.0, 112.0).unwrap();
        let calib = CameraCalibration::new(k, RigidTransform::identity(), 224, 224).unwrap();
        let mut ids = vec![0u16; 224 * 224];
        ids[112 * 224 + 112] = 2;
        let mut img = SemanticImage::new(224, 224, ids).unwrap();
        img.class_ids[0] = 1;
        let map = build_view_consistent_superpixels(&[img]);
        let a = assign_points(&[[0.0, 0.0, 5.0]], &[calib], &map);
        assert_eq!(a.ids, vec![Some(2)]);
        assert_eq!(a.counts, vec![0, 0, 1]);
    }

    /// Scalar loop oracle: cameras in order, first in-frustum hit wins.
    fn oracle_assign(points: &[Vec3], calibs: &[CameraCalibration], map: &SuperpixelMap) -> Vec<Option<u32>> {
        let mut out = Vec::new();
        for p in points {
            let mut id = None;
            for (cam, c) in calibs.iter().enumerate() {
                let pc = c.extrinsic.apply(p);
                if pc[2] <= 1e-9 {
                    continue;
                }
                let u = c.intrinsics.fx * pc[0] / pc[2] + c.intrinsics.cx;
                let v = c.intrinsics.fy * pc[1] / pc[2] + c.intrinsics.cy;
                if u >= 0.0 && v >= 0.0 && u < c.width as f64 && v < c.height as f64 {
                    id = map.views[cam][v as usize * c.width + u as usize];
                    break;
                }
            }
            out.push(id);
        }
        out
    }

    #[test]
    fn matches_first_hit_oracle_on_overlapping_cameras() {
        let map = striped_map(5);
        let calibs = two_cameras();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<Vec3> = (0..256)
            .map(|_| {
                [
                    rng.gen_range(-5.0..30.0),
                    rng.gen_range(-15.0..15.0),
                    rng.gen_range(-3.0..5.0),
                ]
            })
            .collect();
        let got = assign_points(&points, &calibs, &map);
        assert_eq!(got.ids, oracle_assign(&points, &calibs, &map));
        assert!(got.assigned() > 50);
        let total: usize = got.ids.iter().filter(|i| i.is_some()).count();
        assert_eq!(total, got.assigned());
    }

    #[test]
    fn assignment_is_permutation_equivariant() {
        let map = striped_map(4);
        let calibs = two_cameras();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec3> = (0..64)
            .map(|_| [rng.gen_range(1.0..20.0), rng.gen_range(-8.0..8.0), rng.gen_range(-2.0..3.0)])
            .collect();
        let perm: Vec<usize> = (0..64).rev().collect();
        let permuted: Vec<Vec3> = perm.iter().map(|&i| points[i]).collect();
        let a = assign_points(&points, &calibs, &map);
        let b = assign_points(&permuted, &calibs, &map);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.ids[k], a.ids[i]);
        }
        assert_eq!(a.counts, b.counts);
    }

    fn bundle_with(sweeps: Vec<Sweep>) -> FrameBundle {
        let coords = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let cloud = PointCloud::new(coords, FeatureMatrix::from_vec(2, 1, vec![1.0, 0.5]).unwrap(), vec![0, 1], 1.0).unwrap();
        let rig = synth::SensorRig::default();
        FrameBundle {
            keyframe: cloud,
            sweeps,
            images: vec![SemanticImage::filled(224, 224, 0); 3],
            calibrations: rig.cameras,
            timestamp: 1.0,
            ego_pose: RigidTransform::identity(),
        }
    }

    #[test]
    fn dense_cloud_without_sweeps_is_keyframe() {
        let b = bundle_with(vec![]);
        assert_eq!(build_dense_cloud(&b), b.keyframe);
    }

    #[test]
    fn dense_cloud_concatenates_transformed_sweeps() {
        let sweep_cloud = PointCloud::new(
            vec![[0.0, 0.0, 0.0]],
            FeatureMatrix::from_vec(1, 1, vec![0.25]).unwrap(),
            vec![4],
            0.95,
        )
        .unwrap();
        let ident = bundle_with(vec![Sweep {
            cloud: sweep_cloud.clone(),
            to_keyframe: RigidTransform::identity(),
        }]);
        let dense = build_dense_cloud(&ident);
        assert_eq!(dense.len(), 3);
        assert_eq!(&dense.coords[..2], &ident.keyframe.coords[..]);
        assert_eq!(dense.coords[2], [0.0, 0.0, 0.0]);
        assert_eq!(dense.labels, vec![0, 1, 4]);
        assert_eq!(dense.feats.as_slice(), &[1.0, 0.5, 0.25]);

        let moved = bundle_with(vec![Sweep {
            cloud: sweep_cloud,
            to_keyframe: RigidTransform::from_translation([0.5, 0.0, 0.0]),
        }]);
        assert_eq!(build_dense_cloud(&moved).coords[2], [0.5, 0.0, 0.0]);
    }
}
