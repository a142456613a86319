use std::path::Path;

use proptest::prelude::*;

use flowdistill::encoder::pool_super;
use flowdistill::eval::{iou_from_confusion, ConfusionMatrix};
use flowdistill::geometry::{CameraCalibration, CameraIntrinsics, RigidTransform, Vec3};
use flowdistill::io::{
    decode_blob, decode_cloud, decode_image, encode_blob, encode_cloud, encode_image, CLOUD_MAGIC, IMAGE_MAGIC,
};
use flowdistill::superpix::{assign_points, build_per_view_superpixels, build_view_consistent_superpixels};
use flowdistill::synth::{PointCloud, SemanticImage, SKY};
use flowdistill::FeatureMatrix;

fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
    (0usize..20, 1usize..4, any::<f64>()).prop_flat_map(|(n, c, ts)| {
        (
            prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), n),
            prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), n * c),
            prop::collection::vec(any::<u16>(), n),
        )
            .prop_map(move |(coords, feats, labels)| {
                PointCloud::new(coords, FeatureMatrix::from_vec(n, c, feats).unwrap(), labels, ts).unwrap()
            })
    })
}

fn image_strategy(classes: u16) -> impl Strategy<Value = SemanticImage> {
    (1usize..9, 1usize..9).prop_flat_map(move |(h, w)| {
        prop::collection::vec(prop_oneof![4 => 0..classes, 1 => Just(SKY)], h * w)
            .prop_map(move |ids| SemanticImage::new(h, w, ids).unwrap())
    })
}

fn rig() -> Vec<CameraCalibration> {
    let k = CameraIntrinsics::new(20.0, 20.0, 16.0, 12.0).unwrap();
    (0..3)
        .map(|i| CameraCalibration::looking_along(i as f64 * 1.1 - 1.1, [0.0, 0.0, 1.0], k, 24, 32).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cloud_blobs_round_trip(cloud in cloud_strategy()) {
        let payload = encode_cloud(&cloud);
        let blob = encode_blob(CLOUD_MAGIC, &payload);
        let back = decode_cloud(decode_blob(&blob, CLOUD_MAGIC, Path::new("c.sfpc")).unwrap(), Path::new("c.sfpc")).unwrap();
        prop_assert_eq!(encode_blob(CLOUD_MAGIC, &encode_cloud(&back)), blob);
    }

    #[test]
    fn image_blobs_round_trip(img in image_strategy(6)) {
        let blob = encode_blob(IMAGE_MAGIC, &encode_image(&img));
        let back = decode_image(decode_blob(&blob, IMAGE_MAGIC, Path::new("i.sfim")).unwrap(), Path::new("i.sfim")).unwrap();
        prop_assert_eq!(&back, &img);
    }

    #[test]
    fn any_flipped_byte_is_caught(cloud in cloud_strategy(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut blob = encode_blob(CLOUD_MAGIC, &encode_cloud(&cloud));
        let i = at.index(blob.len());
        blob[i] ^= 1 << bit;
        let err = decode_blob(&blob, CLOUD_MAGIC, Path::new("dir/x.sfpc"))
            .and_then(|p| decode_cloud(p, Path::new("dir/x.sfpc")));
        prop_assert!(err.is_err());
        prop_assert!(err.unwrap_err().to_string().contains("x.sfpc"));
    }

    #[test]
    fn view_consistency_holds(images in prop::collection::vec(image_strategy(5), 1..4)) {
        let map = build_view_consistent_superpixels(&images);
        let mut seen = std::collections::HashMap::new();
        for (cam, img) in images.iter().enumerate() {
            for r in 0..img.height {
                for c in 0..img.width {
                    let class = img.at(r, c);
                    let id = map.id_at(cam, r, c);
                    prop_assert_eq!(id.is_none(), class == SKY);
                    if let Some(id) = id {
                        prop_assert_eq!(*seen.entry(class).or_insert(id), id);
                        prop_assert_eq!(map.class_of(id), class);
                    }
                }
            }
        }
        let classes = map.id_to_class();
        let unique: std::collections::BTreeSet<_> = classes.iter().collect();
        prop_assert_eq!(unique.len(), classes.len());
        prop_assert!(map.len() <= build_per_view_superpixels(&images).len());
    }

    #[test]
    fn assignment_is_permutation_equivariant(
        pts in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..60),
        shuffle_seed in any::<u64>(),
        images in prop::collection::vec(
            prop::collection::vec(prop_oneof![4 => 0u16..4, 1 => Just(SKY)], 24 * 32), 3)
    ) {
        let images: Vec<SemanticImage> = images.into_iter().map(|ids| SemanticImage::new(24, 32, ids).unwrap()).collect();
        let map = build_view_consistent_superpixels(&images);
        let calibs = rig();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut s = shuffle_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<Vec3> = order.iter().map(|&i| pts[i]).collect();
        let a = assign_points(&pts, &calibs, &map);
        let b = assign_points(&permuted, &calibs, &map);
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(b.ids[j], a.ids[i]);
        }
        prop_assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn pooled_rows_are_unit_or_masked(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 0..30),
        ids in prop::collection::vec(prop::option::of(0u32..5), 30)
    ) {
        let n = rows.len();
        let feats = if n == 0 { FeatureMatrix::zeros(0, 4) } else { FeatureMatrix::from_rows(&rows).unwrap() };
        let pooled = pool_super(&feats, &ids[..n], 5).unwrap();
        for j in 0..5 {
            let norm: f64 = pooled.features.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            if pooled.mask[j] {
                prop_assert_eq!(norm, 0.0);
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-12);
                prop_assert!(pooled.counts[j] > 0);
            }
        }
    }

    #[test]
    fn iou_values_lie_in_unit_interval(counts in prop::collection::vec(prop::collection::vec(0u64..50, 4), 4)) {
        let r = iou_from_confusion(&ConfusionMatrix::from_counts(&counts).unwrap());
        for v in r.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        if let Some(m) = r.miou {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn inverse_transform_composes_to_identity(
        roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0,
        t in prop::array::uniform3(-50.0f64..50.0)
    ) {
        let g = RigidTransform::from_euler(roll, pitch, yaw, t);
        prop_assert!(g.compose(&g.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-12);
    }
}
