//! Deterministic synthetic street world and sensor simulator.
//!
//! Scenes are a ground plane plus labeled axis-aligned boxes, some moving at
//! constant velocity. The LiDAR and the semantic cameras are simulated by
//! exact ray casting against those primitives, so per-point and per-pixel
//! ground truth is available for every scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, CameraIntrinsics, RigidTransform, Vec3};
use crate::matrix::FeatureMatrix;

/// Class id for pixels whose ray leaves the scene.
pub const SKY: u16 = u16::MAX;

pub const DEFAULT_CLASS_NAMES: [&str; 6] = [
    "ground",
    "building",
    "vehicle",
    "pedestrian",
    "vegetation",
    "barrier",
];

pub const GROUND: u16 = 0;
pub const BUILDING: u16 = 1;
pub const VEHICLE: u16 = 2;
pub const PEDESTRIAN: u16 = 3;
pub const VEGETATION: u16 = 4;
pub const BARRIER: u16 = 5;

/// Rays must travel at least this far before a hit counts.
const MIN_HIT_DISTANCE: f64 = 1e-6;

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| {
            DEFAULT_CLASS_NAMES
                .get(c)
                .map_or_else(|| format!("class_{c}"), |s| s.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Placement {
    Fixed(Vec3),
    /// Center drawn uniformly from the box `[min, max]` using the scene seed.
    Uniform { min: Vec3, max: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: u16,
    pub size: Vec3,
    pub placement: Placement,
    /// m/s, zero for static objects.
    pub velocity: Vec3,
}

impl ObjectSpec {
    pub fn fixed(class: u16, center: Vec3, size: Vec3) -> Self {
        Self {
            class,
            size,
            placement: Placement::Fixed(center),
            velocity: [0.0; 3],
        }
    }

    pub fn moving(mut self, velocity: Vec3) -> Self {
        self.velocity = velocity;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vec3,
    pub yaw: f64,
}

/// Piecewise-linear ego pose (world <- vehicle) over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(mut waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::invalid("trajectory needs at least one waypoint"));
        }
        waypoints.sort_by(|a, b| a.t.total_cmp(&b.t));
        if waypoints.windows(2).any(|w| w[0].t == w[1].t) {
            return Err(Error::invalid("duplicate waypoint time"));
        }
        Ok(Self { waypoints })
    }

    /// Stationary ego at the origin over `[0, duration]`.
    pub fn stationary(duration: f64) -> Self {
        let wp = |t| Waypoint {
            t,
            position: [0.0; 3],
            yaw: 0.0,
        };
        Self {
            waypoints: vec![wp(0.0), wp(duration)],
        }
    }

    pub fn span(&self) -> (f64, f64) {
        (
            self.waypoints[0].t,
            self.waypoints[self.waypoints.len() - 1].t,
        )
    }

    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = self.span();
        t >= a && t <= b
    }

    pub fn pose(&self, t: f64) -> Result<RigidTransform> {
        if !self.contains(t) {
            let (a, b) = self.span();
            return Err(Error::invalid(format!(
                "time {t} outside trajectory span [{a}, {b}]"
            )));
        }
        let wps = &self.waypoints;
        let k = wps.partition_point(|w| w.t <= t).clamp(1, wps.len().max(1));
        let (a, b) = if wps.len() == 1 {
            (wps[0], wps[0])
        } else {
            (wps[(k - 1).min(wps.len() - 2)], wps[k.min(wps.len() - 1)])
        };
        let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        let lerp = |x: f64, y: f64| x + (y - x) * s;
        let pos = [
            lerp(a.position[0], b.position[0]),
            lerp(a.position[1], b.position[1]),
            lerp(a.position[2], b.position[2]),
        ];
        Ok(RigidTransform::from_yaw(lerp(a.yaw, b.yaw), pos))
    }

    /// `Γ_{t←s}`: maps points scanned at time `s` into the vehicle frame at `t`.
    pub fn relative(&self, t: f64, s: f64) -> Result<RigidTransform> {
        Ok(self.pose(t)?.inverse().compose(&self.pose(s)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Class of the `z = 0` ground plane, if present.
    pub ground_class: Option<u16>,
    pub static_objects: Vec<ObjectSpec>,
    pub dynamic_objects: Vec<ObjectSpec>,
    pub ego_trajectory: Trajectory,
}

impl SceneSpec {
    /// An empty spec over a stationary trajectory; callers add objects.
    pub fn new(seed: u64, num_classes: usize, duration: f64) -> Self {
        Self {
            seed,
            num_classes,
            class_names: default_class_names(num_classes),
            ground_class: None,
            static_objects: Vec::new(),
            dynamic_objects: Vec::new(),
            ego_trajectory: Trajectory::stationary(duration),
        }
    }

    /// A randomized street: road along world +x, ego driving down it, parked
    /// and moving vehicles, sidewalks with pedestrians and barriers, trees
    /// and building rows further out. Classes at or beyond `num_classes`
    /// are left out; classes beyond the six named ones become generic
    /// roadside clutter.
    pub fn street(seed: u64, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
        let duration = 2.0;
        let speed = rng.gen_range(3.0..6.0);
        let yaw0: f64 = rng.gen_range(-0.06..0.06);
        let yaw1 = yaw0 + rng.gen_range(-0.08..0.08);
        let mid_yaw = 0.5 * (yaw0 + yaw1);
        let end = [
            speed * duration * mid_yaw.cos(),
            speed * duration * mid_yaw.sin(),
            0.0,
        ];
        let ego_trajectory = Trajectory::new(vec![
            Waypoint {
                t: 0.0,
                position: [0.0; 3],
                yaw: yaw0,
            },
            Waypoint {
                t: duration,
                position: end,
                yaw: yaw1,
            },
        ])
        .expect("two distinct waypoints");

        let mut spec = Self {
            seed,
            num_classes,
            class_names: default_class_names(num_classes),
            ground_class: (num_classes > 0).then_some(GROUND),
            static_objects: Vec::new(),
            dynamic_objects: Vec::new(),
            ego_trajectory,
        };
        let has = |c: u16| (c as usize) < num_classes;

        let region = |rng: &mut ChaCha8Rng, x: (f64, f64), y: (f64, f64), h: f64| {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let (y0, y1) = (side * y.0, side * y.1);
            Placement::Uniform {
                min: [x.0, y0.min(y1), h],
                max: [x.1, y0.max(y1), h],
            }
        };

        if has(BUILDING) {
            for _ in 0..rng.gen_range(6..=10) {
                let size = [
                    rng.gen_range(8.0..14.0),
                    rng.gen_range(5.0..8.0),
                    rng.gen_range(6.0..14.0),
                ];
                let placement = region(&mut rng, (-15.0, 55.0), (16.0, 22.0), size[2] / 2.0);
                spec.static_objects.push(ObjectSpec {
                    class: BUILDING,
                    size,
                    placement,
                    velocity: [0.0; 3],
                });
            }
        }
        if has(VEHICLE) {
            let size = [4.5, 1.9, 1.6];
            for _ in 0..rng.gen_range(2..=4) {
                let placement = region(&mut rng, (-5.0, 40.0), (2.6, 3.2), 0.8);
                spec.static_objects.push(ObjectSpec {
                    class: VEHICLE,
                    size,
                    placement,
                    velocity: [0.0; 3],
                });
            }
            for _ in 0..rng.gen_range(1..=3) {
                let placement = region(&mut rng, (5.0, 35.0), (1.6, 2.0), 0.8);
                let vx = rng.gen_range(2.0..8.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                spec.dynamic_objects.push(ObjectSpec {
                    class: VEHICLE,
                    size,
                    placement,
                    velocity: [vx, 0.0, 0.0],
                });
            }
        }
        if has(PEDESTRIAN) {
            for i in 0..rng.gen_range(4..=8) {
                let placement = region(&mut rng, (-5.0, 35.0), (5.5, 8.0), 0.9);
                let vx = if i % 2 == 0 {
                    rng.gen_range(-1.5..1.5)
                } else {
                    0.0
                };
                let obj = ObjectSpec {
                    class: PEDESTRIAN,
                    size: [0.6, 0.6, 1.8],
                    placement,
                    velocity: [vx, 0.0, 0.0],
                };
                if vx == 0.0 {
                    spec.static_objects.push(obj);
                } else {
                    spec.dynamic_objects.push(obj);
                }
            }
        }
        if has(VEGETATION) {
            for _ in 0..rng.gen_range(4..=8) {
                let h = rng.gen_range(3.0..6.0);
                let w = rng.gen_range(2.0..3.0);
                let placement = region(&mut rng, (-10.0, 45.0), (9.5, 13.0), h / 2.0);
                spec.static_objects.push(ObjectSpec {
                    class: VEGETATION,
                    size: [w, w, h],
                    placement,
                    velocity: [0.0; 3],
                });
            }
        }
        if has(BARRIER) {
            for _ in 0..rng.gen_range(4..=8) {
                let placement = region(&mut rng, (-5.0, 40.0), (4.3, 4.7), 0.5);
                spec.static_objects.push(ObjectSpec {
                    class: BARRIER,
                    size: [2.5, 0.4, 1.0],
                    placement,
                    velocity: [0.0; 3],
                });
            }
        }
        for class in 6..num_classes {
            for _ in 0..rng.gen_range(2..=4) {
                let size = [
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..3.0),
                ];
                let placement = region(&mut rng, (-5.0, 45.0), (6.0, 14.0), size[2] / 2.0);
                spec.static_objects.push(ObjectSpec {
                    class: class as u16,
                    size,
                    placement,
                    velocity: [0.0; 3],
                });
            }
        }
        spec
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.num_classes >= SKY as usize {
            return Err(Error::invalid("num_classes collides with the SKY id"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::invalid("class_names length differs from num_classes"));
        }
        let all = self.static_objects.iter().chain(&self.dynamic_objects);
        for obj in all {
            if obj.class as usize >= self.num_classes {
                return Err(Error::invalid(format!(
                    "object class {} outside [0, {})",
                    obj.class, self.num_classes
                )));
            }
            if obj.size.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::invalid("object sizes must be positive"));
            }
        }
        if let Some(g) = self.ground_class {
            if g as usize >= self.num_classes {
                return Err(Error::invalid("ground class out of range"));
            }
        }
        if self.ground_class.is_none()
            && self.static_objects.is_empty()
            && self.dynamic_objects.is_empty()
        {
            return Err(Error::invalid("scene has zero objects"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u16,
    /// Center at `t = 0`.
    pub center: Vec3,
    pub size: Vec3,
    pub velocity: Vec3,
}

impl SceneObject {
    pub fn center_at(&self, t: f64) -> Vec3 {
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
            self.center[2] + self.velocity[2] * t,
        ]
    }

    fn bounds_at(&self, t: f64) -> (Vec3, Vec3) {
        let c = self.center_at(t);
        let h = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        (
            [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
            [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
        )
    }

    /// Entry distance of a ray from outside the box.
    fn intersect(&self, t: f64, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let (lo, hi) = self.bounds_at(t);
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < lo[k] || origin[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (a, b) = ((lo[k] - origin[k]) * inv, (hi[k] - origin[k]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t_near = t_near.max(a);
            t_far = t_far.min(b);
            if t_near > t_far {
                return None;
            }
        }
        (t_near >= MIN_HIT_DISTANCE).then_some(t_near)
    }
}

/// An instantiated scene: every placement resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub ground_class: Option<u16>,
    pub objects: Vec<SceneObject>,
    pub trajectory: Trajectory,
}

impl Scene {
    /// Nothing to hit anywhere.
    pub fn empty(num_classes: usize, trajectory: Trajectory) -> Self {
        Self {
            seed: 0,
            num_classes,
            class_names: default_class_names(num_classes),
            ground_class: None,
            objects: Vec::new(),
            trajectory,
        }
    }

    /// Nearest hit along a world-frame ray as (distance, class).
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, t: f64, max_range: f64) -> Option<(f64, u16)> {
        let mut best: Option<(f64, u16)> = None;
        if let Some(g) = self.ground_class {
            if dir[2] < 0.0 && origin[2] > 0.0 {
                let d = -origin[2] / dir[2];
                if d >= MIN_HIT_DISTANCE && d <= max_range {
                    best = Some((d, g));
                }
            }
        }
        for obj in &self.objects {
            if let Some(d) = obj.intersect(t, origin, dir) {
                if d <= max_range && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, obj.class));
                }
            }
        }
        best
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut objects = Vec::with_capacity(spec.static_objects.len() + spec.dynamic_objects.len());
    for obj in spec.static_objects.iter().chain(&spec.dynamic_objects) {
        let center = match &obj.placement {
            Placement::Fixed(c) => *c,
            Placement::Uniform { min, max } => {
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = if max[k] > min[k] {
                        rng.gen_range(min[k]..max[k])
                    } else {
                        min[k]
                    };
                }
                c
            }
        };
        objects.push(SceneObject {
            class: obj.class,
            center,
            size: obj.size,
            velocity: obj.velocity,
        });
    }
    Ok(Scene {
        seed: spec.seed,
        num_classes: spec.num_classes,
        class_names: spec.class_names.clone(),
        ground_class: spec.ground_class,
        objects,
        trajectory: spec.ego_trajectory.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub num_beams: usize,
    pub azimuth_steps: usize,
    /// Lowest beam elevation, degrees.
    pub fov_down_deg: f64,
    /// Highest beam elevation, degrees.
    pub fov_up_deg: f64,
    pub max_range: f64,
    /// Sweep rate, Hz.
    pub frequency: f64,
    /// Sensor height above the vehicle-frame origin, meters.
    pub mount_height: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            num_beams: 16,
            azimuth_steps: 256,
            fov_down_deg: -25.0,
            fov_up_deg: 5.0,
            max_range: 40.0,
            frequency: 20.0,
            mount_height: 1.8,
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0 || self.azimuth_steps == 0 {
            return Err(Error::invalid("lidar needs at least one beam and azimuth step"));
        }
        if !(self.max_range > 0.0) || !(self.frequency > 0.0) {
            return Err(Error::invalid("lidar max_range and frequency must be positive"));
        }
        if self.fov_up_deg < self.fov_down_deg {
            return Err(Error::invalid("lidar fov_up below fov_down"));
        }
        Ok(())
    }

    /// Elevation of beam `b` in radians, evenly spaced bottom to top.
    pub fn beam_elevation(&self, b: usize) -> f64 {
        let deg = if self.num_beams == 1 {
            self.fov_down_deg
        } else {
            self.fov_down_deg
                + (self.fov_up_deg - self.fov_down_deg) * b as f64 / (self.num_beams - 1) as f64
        };
        deg.to_radians()
    }

    pub fn azimuth(&self, a: usize) -> f64 {
        std::f64::consts::TAU * a as f64 / self.azimuth_steps as f64
    }

    pub fn origin(&self) -> Vec3 {
        [0.0, 0.0, self.mount_height]
    }

    /// Nearest beam ring for a vehicle-frame point.
    pub fn ring_of(&self, p: &Vec3) -> usize {
        let dz = p[2] - self.mount_height;
        let el = dz.atan2(p[0].hypot(p[1])).to_degrees();
        if self.num_beams == 1 {
            return 0;
        }
        let step = (self.fov_up_deg - self.fov_down_deg) / (self.num_beams - 1) as f64;
        let r = ((el - self.fov_down_deg) / step).round();
        r.clamp(0.0, (self.num_beams - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Vec3>,
    /// N x C per-point input features (intensity by default).
    pub feats: FeatureMatrix,
    /// Ground-truth class per point, never shown to pretraining.
    pub labels: Vec<u16>,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(coords: Vec<Vec3>, feats: FeatureMatrix, labels: Vec<u16>, timestamp: f64) -> Result<Self> {
        if feats.rows() != coords.len() || labels.len() != coords.len() {
            return Err(Error::Shape(format!(
                "cloud with {} coords, {} feature rows, {} labels",
                coords.len(),
                feats.rows(),
                labels.len()
            )));
        }
        if feats.cols() == 0 {
            return Err(Error::Shape("cloud needs at least one feature channel".into()));
        }
        Ok(Self {
            coords,
            feats,
            labels,
            timestamp,
        })
    }

    pub fn empty(channels: usize, timestamp: f64) -> Self {
        Self {
            coords: Vec::new(),
            feats: FeatureMatrix::zeros(0, channels),
            labels: Vec::new(),
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    /// Subset of points in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            feats: self.feats.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            timestamp: self.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticImage {
    pub height: usize,
    pub width: usize,
    /// Row-major class ids, `SKY` where nothing was hit.
    pub class_ids: Vec<u16>,
}

impl SemanticImage {
    pub fn new(height: usize, width: usize, class_ids: Vec<u16>) -> Result<Self> {
        if class_ids.len() != height * width {
            return Err(Error::Shape(format!(
                "{} class ids for a {height}x{width} image",
                class_ids.len()
            )));
        }
        Ok(Self {
            height,
            width,
            class_ids,
        })
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Self {
        Self {
            height,
            width,
            class_ids: vec![class; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.class_ids[row * self.width + col]
    }
}

/// LiDAR plus the surrounding cameras, all calibrated to the vehicle frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub lidar: LidarSpec,
    pub cameras: Vec<CameraCalibration>,
}

impl SensorRig {
    /// `num_cameras` pinhole cameras 60 degrees apart centered on the
    /// forward direction, sharing the LiDAR optical center.
    pub fn with_cameras(lidar: LidarSpec, num_cameras: usize) -> Result<Self> {
        if num_cameras == 0 {
            return Err(Error::invalid("rig needs at least one camera"));
        }
        let k = CameraIntrinsics::new(112.0, 112.0, 112.0, 112.0)?;
        let mid = (num_cameras as f64 - 1.0) / 2.0;
        let cameras = (0..num_cameras)
            .map(|i| {
                let yaw = ((i as f64 - mid) * 60.0).to_radians();
                CameraCalibration::looking_along(yaw, lidar.origin(), k, 224, 224)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lidar, cameras })
    }
}

impl Default for SensorRig {
    fn default() -> Self {
        Self::with_cameras(LidarSpec::default(), 3).expect("default rig is valid")
    }
}

/// Casts every beam at time `t` from `ego_pose` (world <- vehicle); hits are
/// returned in the vehicle frame.
pub fn scan_lidar(scene: &Scene, ego_pose: &RigidTransform, t: f64, lidar: &LidarSpec) -> PointCloud {
    let origin = lidar.origin();
    let origin_w = ego_pose.apply(&origin);
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for b in 0..lidar.num_beams {
        let (se, ce) = lidar.beam_elevation(b).sin_cos();
        for a in 0..lidar.azimuth_steps {
            let (sa, ca) = lidar.azimuth(a).sin_cos();
            let dir = [ce * ca, ce * sa, se];
            let dir_w = ego_pose.rotate(&dir);
            if let Some((d, class)) = scene.raycast(&origin_w, &dir_w, t, lidar.max_range) {
                coords.push([
                    origin[0] + d * dir[0],
                    origin[1] + d * dir[1],
                    origin[2] + d * dir[2],
                ]);
                labels.push(class);
            }
        }
    }
    let feats = FeatureMatrix::from_vec(coords.len(), 1, vec![1.0; coords.len()])
        .expect("one intensity per point");
    PointCloud {
        coords,
        feats,
        labels,
        timestamp: t,
    }
}

/// Ray-cast semantic class for every pixel of every camera.
pub fn render_semantic_images(
    scene: &Scene,
    ego_pose: &RigidTransform,
    t: f64,
    calibrations: &[CameraCalibration],
) -> Vec<SemanticImage> {
    calibrations
        .iter()
        .map(|cam| {
            let mut ids = vec![SKY; cam.height * cam.width];
            ids.par_chunks_mut(cam.width).enumerate().for_each(|(row, out)| {
                for (col, px) in out.iter_mut().enumerate() {
                    let (o, d) = cam.pixel_ray(row, col);
                    let ow = ego_pose.apply(&o);
                    let dw = ego_pose.rotate(&d);
                    if let Some((_, class)) = scene.raycast(&ow, &dw, t, f64::INFINITY) {
                        *px = class;
                    }
                }
            });
            SemanticImage {
                height: cam.height,
                width: cam.width,
                class_ids: ids,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub cloud: PointCloud,
    /// `Γ_{t←s}`, sweep frame to keyframe frame.
    pub to_keyframe: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub keyframe: PointCloud,
    /// Most recent sweep first.
    pub sweeps: Vec<Sweep>,
    pub images: Vec<SemanticImage>,
    pub calibrations: Vec<CameraCalibration>,
    pub timestamp: f64,
    /// World <- vehicle at `timestamp`.
    pub ego_pose: RigidTransform,
}

impl FrameBundle {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.calibrations.len() {
            return Err(Error::invalid(format!(
                "bundle has {} images for {} calibrations",
                self.images.len(),
                self.calibrations.len()
            )));
        }
        if self.sweeps.iter().any(|s| s.cloud.timestamp >= self.timestamp) {
            return Err(Error::invalid("sweep timestamp not before keyframe"));
        }
        Ok(())
    }
}

/// One keyframe bundle at time `t` with `num_sweeps` earlier scans spaced
/// at the LiDAR rate.
pub fn capture_frame(scene: &Scene, t: f64, num_sweeps: usize, rig: &SensorRig) -> Result<FrameBundle> {
    let lidar = &rig.lidar;
    let pose = scene.trajectory.pose(t)?;
    let mut sweeps = Vec::with_capacity(num_sweeps);
    for s in 1..=num_sweeps {
        let ts = t - s as f64 / lidar.frequency;
        let sweep_pose = scene.trajectory.pose(ts)?;
        sweeps.push(Sweep {
            cloud: scan_lidar(scene, &sweep_pose, ts, lidar),
            to_keyframe: pose.inverse().compose(&sweep_pose),
        });
    }
    Ok(FrameBundle {
        keyframe: scan_lidar(scene, &pose, t, lidar),
        sweeps,
        images: render_semantic_images(scene, &pose, t, &rig.cameras),
        calibrations: rig.cameras.clone(),
        timestamp: t,
        ego_pose: pose,
    })
}

/// Bundles at `center_t - dt`, `center_t`, `center_t + dt`.
pub fn sample_sequence(
    scene: &Scene,
    center_t: f64,
    dt: f64,
    num_sweeps: usize,
    rig: &SensorRig,
) -> Result<[FrameBundle; 3]> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let earliest = center_t - dt - num_sweeps as f64 / rig.lidar.frequency;
    for t in [earliest, center_t + dt] {
        if !scene.trajectory.contains(t) {
            let (a, b) = scene.trajectory.span();
            return Err(Error::invalid(format!(
                "timestamp {t} outside trajectory span [{a}, {b}]"
            )));
        }
    }
    Ok([
        capture_frame(scene, center_t - dt, num_sweeps, rig)?,
        capture_frame(scene, center_t, num_sweeps, rig)?,
        capture_frame(scene, center_t + dt, num_sweeps, rig)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, transform_points};

    fn box_spec(seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::new(seed, 6, 2.0);
        spec.static_objects.push(ObjectSpec {
            class: BUILDING,
            size: [4.0, 4.0, 4.0],
            placement: Placement::Uniform {
                min: [10.0, -5.0, 2.0],
                max: [20.0, 5.0, 2.0],
            },
            velocity: [0.0; 3],
        });
        spec
    }

    #[test]
    fn scene_generation_is_deterministic_and_seeded() {
        let a = generate_scene(&box_spec(0)).unwrap();
        let b = generate_scene(&box_spec(0)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&box_spec(1)).unwrap();
        assert_ne!(a.objects[0].center, c.objects[0].center);
    }

    #[test]
    fn rejects_zero_objects_and_bad_classes() {
        let spec = SceneSpec::new(0, 6, 1.0);
        assert!(generate_scene(&spec).is_err());
        let mut spec = box_spec(0);
        spec.static_objects[0].class = 6;
        assert!(generate_scene(&spec).is_err());
        let mut spec = box_spec(0);
        spec.num_classes = 1;
        spec.class_names.truncate(1);
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn constant_velocity_kinematics() {
        let mut spec = SceneSpec::new(0, 6, 2.0);
        spec.dynamic_objects.push(
            ObjectSpec::fixed(VEHICLE, [5.0, 1.0, 0.8], [4.5, 1.9, 1.6]).moving([2.0, 0.0, 0.0]),
        );
        let scene = generate_scene(&spec).unwrap();
        let c0 = scene.objects[0].center_at(0.0);
        let c1 = scene.objects[0].center_at(0.5);
        let oracle = [c0[0] + 2.0 * 0.5, c0[1], c0[2]];
        assert_eq!(c1, oracle);
        assert_eq!([c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2]], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ground_only_point_count_matches_ray_plane_oracle() {
        let mut spec = SceneSpec::new(0, 6, 1.0);
        spec.ground_class = Some(GROUND);
        let scene = generate_scene(&spec).unwrap();
        let lidar = LidarSpec::default();
        let cloud = scan_lidar(&scene, &RigidTransform::identity(), 0.0, &lidar);
        // Independent oracle: a downward beam at elevation e from height h
        // meets z = 0 at range h / sin(-e).
        let mut hitting = 0;
        for b in 0..lidar.num_beams {
            let deg = lidar.fov_down_deg
                + (lidar.fov_up_deg - lidar.fov_down_deg) * b as f64 / (lidar.num_beams as f64 - 1.0);
            let e = deg * std::f64::consts::PI / 180.0;
            if e < 0.0 && lidar.mount_height / (-e).sin() <= lidar.max_range {
                hitting += 1;
            }
        }
        assert!(hitting > 0);
        assert_eq!(cloud.len(), hitting * lidar.azimuth_steps);
        assert!(cloud.coords.iter().all(|p| p[2].abs() < 1e-9));
        assert!(cloud.labels.iter().all(|&l| l == GROUND));
    }

    #[test]
    fn empty_scene_gives_empty_cloud_and_sky() {
        let scene = Scene::empty(6, Trajectory::stationary(1.0));
        let rig = SensorRig::default();
        let cloud = scan_lidar(&scene, &RigidTransform::identity(), 0.0, &rig.lidar);
        assert!(cloud.is_empty());
        let imgs = render_semantic_images(&scene, &RigidTransform::identity(), 0.0, &rig.cameras);
        assert_eq!(imgs.len(), 3);
        assert!(imgs.iter().all(|im| im.class_ids.iter().all(|&c| c == SKY)));
    }

    #[test]
    fn scans_are_bit_identical() {
        let scene = generate_scene(&SceneSpec::street(3, 6)).unwrap();
        let pose = scene.trajectory.pose(0.7).unwrap();
        let lidar = LidarSpec::default();
        let a = scan_lidar(&scene, &pose, 0.7, &lidar);
        let b = scan_lidar(&scene, &pose, 0.7, &lidar);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn box_filling_view_renders_its_class() {
        let mut spec = SceneSpec::new(0, 6, 1.0);
        spec.static_objects.push(ObjectSpec::fixed(VEHICLE, [8.0, 0.0, 0.0], [4.0, 200.0, 200.0]));
        let scene = generate_scene(&spec).unwrap();
        let rig = SensorRig::default();
        let imgs = render_semantic_images(&scene, &RigidTransform::identity(), 0.0, &rig.cameras[1..2]);
        assert!(imgs[0].class_ids.iter().all(|&c| c == VEHICLE));
    }

    #[test]
    fn lidar_points_agree_with_rendered_pixels() {
        let scene = generate_scene(&SceneSpec::street(11, 6)).unwrap();
        let rig = SensorRig::default();
        let t = 1.0;
        let pose = scene.trajectory.pose(t).unwrap();
        let cloud = scan_lidar(&scene, &pose, t, &rig.lidar);
        let imgs = render_semantic_images(&scene, &pose, t, &rig.cameras);
        let mut checked = 0;
        let mut agree = 0;
        let stride = (cloud.len() / 400).max(1);
        for i in (0..cloud.len()).step_by(stride) {
            let p = cloud.coords[i];
            for (cam, img) in rig.cameras.iter().zip(&imgs) {
                if let Some(px) = project_point(&p, cam) {
                    let (r, c) = px.pixel();
                    checked += 1;
                    if img.at(r, c) == cloud.labels[i] {
                        agree += 1;
                    }
                    break;
                }
            }
            if checked == 100 {
                break;
            }
        }
        assert_eq!(checked, 100);
        assert!(agree >= 99, "only {agree}/100 projected points agree");
    }

    #[test]
    fn sequence_timestamps_and_sweeps() {
        let scene = generate_scene(&SceneSpec::street(2, 6)).unwrap();
        let rig = SensorRig::default();
        let [a, b, c] = sample_sequence(&scene, 1.0, 0.5, 2, &rig).unwrap();
        assert_eq!((a.timestamp, b.timestamp, c.timestamp), (0.5, 1.0, 1.5));
        for bundle in [&a, &b, &c] {
            bundle.validate().unwrap();
            assert_eq!(bundle.sweeps.len(), 2);
            let oracle = scene
                .trajectory
                .relative(bundle.timestamp, bundle.sweeps[0].cloud.timestamp)
                .unwrap();
            assert!(bundle.sweeps[0].to_keyframe.max_abs_diff(&oracle) < 1e-12);
        }
        let none = sample_sequence(&scene, 1.0, 0.5, 0, &rig).unwrap();
        assert!(none.iter().all(|f| f.sweeps.is_empty()));
        assert!(sample_sequence(&scene, 1.8, 0.5, 2, &rig).is_err());
        assert!(sample_sequence(&scene, 0.5, 0.5, 2, &rig).is_err());
    }

    #[test]
    fn stationary_ego_sweeps_have_identity_transform() {
        let mut spec = box_spec(4);
        spec.ground_class = Some(GROUND);
        let scene = generate_scene(&spec).unwrap();
        let rig = SensorRig::default();
        let frames = sample_sequence(&scene, 1.0, 0.5, 3, &rig).unwrap();
        for f in &frames {
            for s in &f.sweeps {
                assert!(s.to_keyframe.max_abs_diff(&RigidTransform::identity()) < 1e-12);
            }
        }
    }

    #[test]
    fn static_ground_returns_to_plane_after_sweep_transform() {
        let mut spec = SceneSpec::street(5, 6);
        spec.dynamic_objects.clear();
        let scene = generate_scene(&spec).unwrap();
        let rig = SensorRig::default();
        let frame = capture_frame(&scene, 1.0, 3, &rig).unwrap();
        for sweep in &frame.sweeps {
            let moved = transform_points(&sweep.cloud.coords, &sweep.to_keyframe);
            for (p, &l) in moved.iter().zip(&sweep.cloud.labels) {
                if l == GROUND {
                    assert!(p[2].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ring_recovers_beam_index() {
        let scene = generate_scene(&SceneSpec::street(9, 6)).unwrap();
        let lidar = LidarSpec::default();
        let pose = scene.trajectory.pose(0.2).unwrap();
        let cloud = scan_lidar(&scene, &pose, 0.2, &lidar);
        let mut rings: Vec<usize> = cloud.coords.iter().map(|p| lidar.ring_of(p)).collect();
        // Points are emitted beam-major, so rings must be non-decreasing.
        assert!(rings.windows(2).all(|w| w[0] <= w[1]));
        rings.dedup();
        assert!(rings.len() > 8);
    }
}
