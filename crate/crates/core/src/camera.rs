//! Pinhole cameras, look-at construction on a viewing sphere, and the
//! viewpoint samplers used to pose source views and refinement renders.
//!
//! World convention: right-handed, `+y` up, azimuth 0 looks from `+z`
//! toward the target and azimuth grows toward `+x`. Camera frame follows
//! the usual vision convention: `+x` right, `+y` down, `+z` forward, so
//! depth is the camera-frame `z`.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{config_err, Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square image with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn square(size: u32, fov_deg: f64) -> Intrinsics {
        let focal = 0.5 * size as f64 / (0.5 * fov_deg.to_radians()).tan();
        Intrinsics::centered(size, size, focal)
    }

    pub fn centered(width: u32, height: u32, focal: f64) -> Intrinsics {
        Intrinsics {
            focal,
            principal: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            width,
            height,
        }
    }

    /// Same field of view at a different square resolution.
    pub fn rescaled(&self, width: u32, height: u32) -> Intrinsics {
        let s = width as f64 / self.width as f64;
        Intrinsics::centered(width, height, self.focal * s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World to camera rotation.
    pub rotation: Matrix3<f64>,
    /// World to camera translation.
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3, intrinsics: Intrinsics) -> Result<Camera> {
        let cam = Camera {
            rotation,
            translation,
            intrinsics,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).abs().max() <= ORTHO_TOL;
        if !ortho || (self.rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(config_err("camera rotation is not a proper rotation"));
        }
        let k = &self.intrinsics;
        if !(k.focal > 0.0) || k.width == 0 || k.height == 0 {
            return Err(config_err(format!(
                "invalid intrinsics: focal {} size {}x{}",
                k.focal, k.width, k.height
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation * point + self.translation
    }

    pub fn project(&self, point: &Vec3) -> Projection {
        let pc = self.to_camera(point);
        let depth = pc.z;
        let k = &self.intrinsics;
        let uv = Vector2::new(
            k.focal * pc.x / depth + k.principal[0],
            k.focal * pc.y / depth + k.principal[1],
        );
        let inside = uv.x >= 0.0
            && uv.y >= 0.0
            && uv.x <= k.width as f64 - 1.0
            && uv.y <= k.height as f64 - 1.0;
        Projection {
            uv,
            depth,
            valid: depth > 0.0 && inside && uv.x.is_finite() && uv.y.is_finite(),
        }
    }

    /// Unit world-space direction through pixel coordinates `(u, v)`.
    pub fn unproject_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let dc = Vec3::new((u - k.principal[0]) / k.focal, (v - k.principal[1]) / k.focal, 1.0);
        (self.rotation.transpose() * dc).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
}

impl SphericalPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Result<SphericalPose> {
        let p = SphericalPose {
            azimuth: azimuth.rem_euclid(360.0),
            elevation,
            radius,
        };
        if !(elevation.abs() < 90.0) {
            return Err(Error::DegenerateUp(elevation));
        }
        if !(radius > 0.0) {
            return Err(config_err(format!("radius must be positive, got {radius}")));
        }
        Ok(p)
    }

    /// Offset from the target: `r·(cos el·sin az, sin el, cos el·cos az)`.
    pub fn offset(&self) -> Vec3 {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }
}

pub fn look_at_pose(pose: &SphericalPose, target: &Vec3, intrinsics: Intrinsics) -> Result<Camera> {
    if !(pose.elevation.abs() < 90.0) {
        return Err(Error::DegenerateUp(pose.elevation));
    }
    let eye = target + pose.offset();
    look_at(&eye, target, intrinsics)
}

pub fn look_at(eye: &Vec3, target: &Vec3, intrinsics: Intrinsics) -> Result<Camera> {
    let forward = (target - eye).normalize();
    let up = Vec3::y();
    let right = forward.cross(&up);
    if right.norm() < 1e-12 {
        let el = forward.y.signum() * 90.0;
        return Err(Error::DegenerateUp(el));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye);
    Camera::new(rotation, translation, intrinsics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SamplingMode {
    /// Single front reference view; sources spread over the front half sphere.
    SdFront,
    /// Four fixed reference views; sources jitter around front/left/right.
    MvdreamFour,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "SD_FRONT" => Ok(SamplingMode::SdFront),
            "MVDREAM_FOUR" => Ok(SamplingMode::MvdreamFour),
            _ => Err(config_err(format!("unknown sampling mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViewRole {
    Reference,
    Source,
    Back,
}

/// Reference elevation used by the four-view layout.
pub const MVDREAM_ELEVATION: f64 = 15.0;
pub const MVDREAM_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const DEFAULT_RADIUS: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub mode: SamplingMode,
    /// Total number of poses returned, mandatory poses included.
    pub count: usize,
    pub rng_seed: u64,
    /// Strict bound on |relative azimuth| of sampled source views.
    pub azimuth_limit: f64,
    /// Strict bound on |relative elevation| of sampled source views.
    pub elevation_limit: f64,
    /// Elevation of the front reference in `SdFront` mode.
    pub reference_elevation: f64,
    pub radius: f64,
    pub intrinsics: Intrinsics,
}

impl SamplingStrategy {
    pub fn sd_front(count: usize, rng_seed: u64, intrinsics: Intrinsics) -> Self {
        SamplingStrategy {
            mode: SamplingMode::SdFront,
            count,
            rng_seed,
            azimuth_limit: 180.0,
            elevation_limit: 30.0,
            reference_elevation: 0.0,
            radius: DEFAULT_RADIUS,
            intrinsics,
        }
    }

    pub fn mvdream_four(count: usize, rng_seed: u64, intrinsics: Intrinsics) -> Self {
        SamplingStrategy {
            mode: SamplingMode::MvdreamFour,
            count,
            rng_seed,
            azimuth_limit: 45.0,
            elevation_limit: 30.0,
            reference_elevation: MVDREAM_ELEVATION,
            radius: DEFAULT_RADIUS,
            intrinsics,
        }
    }

    fn validate(&self) -> Result<()> {
        let min = match self.mode {
            SamplingMode::SdFront => 2,
            SamplingMode::MvdreamFour => 4,
        };
        if self.count < min {
            return Err(config_err(format!(
                "{:?} needs at least {min} views for its mandatory poses, got {}",
                self.mode, self.count
            )));
        }
        if !(self.azimuth_limit > 0.0 && self.elevation_limit > 0.0) {
            return Err(config_err("angle limits must be positive"));
        }
        if !(self.radius > 0.0) {
            return Err(config_err("radius must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedView {
    pub pose: SphericalPose,
    pub camera: Camera,
    pub role: ViewRole,
}

/// Uniform draw from the open interval `(-limit, limit)`.
fn open_symmetric(rng: &mut impl Rng, limit: f64) -> f64 {
    loop {
        let v = rng.random_range(-limit..limit);
        if v.abs() < limit {
            return v;
        }
    }
}

pub fn sample_source_poses(strategy: &SamplingStrategy) -> Result<Vec<PosedView>> {
    strategy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.rng_seed);
    let r = strategy.radius;
    let mut poses: Vec<(SphericalPose, ViewRole)> = Vec::with_capacity(strategy.count);
    match strategy.mode {
        SamplingMode::SdFront => {
            let ref_el = strategy.reference_elevation;
            poses.push((SphericalPose::new(0.0, ref_el, r)?, ViewRole::Reference));
            for _ in 0..strategy.count - 2 {
                let daz = open_symmetric(&mut rng, strategy.azimuth_limit);
                let del = open_symmetric(&mut rng, strategy.elevation_limit);
                poses.push((SphericalPose::new(daz, ref_el + del, r)?, ViewRole::Source));
            }
            poses.push((SphericalPose::new(180.0, ref_el, r)?, ViewRole::Back));
        }
        SamplingMode::MvdreamFour => {
            let el = strategy.reference_elevation;
            for az in MVDREAM_AZIMUTHS {
                let role = if az == 180.0 { ViewRole::Back } else { ViewRole::Reference };
                poses.push((SphericalPose::new(az, el, r)?, role));
            }
            // front, left and right anchors
            let anchors = [0.0, 90.0, 270.0];
            for _ in 0..strategy.count - 4 {
                let anchor = anchors[rng.random_range(0..anchors.len())];
                let daz = open_symmetric(&mut rng, strategy.azimuth_limit);
                let del = open_symmetric(&mut rng, strategy.elevation_limit);
                poses.push((SphericalPose::new(anchor + daz, el + del, r)?, ViewRole::Source));
            }
        }
    }
    let target = Vec3::zeros();
    poses
        .into_iter()
        .map(|(pose, role)| {
            Ok(PosedView {
                camera: look_at_pose(&pose, &target, strategy.intrinsics)?,
                pose,
                role,
            })
        })
        .collect()
}

/// Uniform box over spherical coordinates from which refinement renders are posed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    pub radius: [f64; 2],
    pub intrinsics: Intrinsics,
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, [lo, hi]: [f64; 2], ok: bool| {
            if !(lo <= hi) {
                return Err(config_err(format!("{name} range ({lo}, {hi}) is empty")));
            }
            if !ok {
                return Err(config_err(format!("{name} range ({lo}, {hi}) out of bounds")));
            }
            Ok(())
        };
        let [a0, a1] = self.azimuth;
        check("azimuth", self.azimuth, a0 >= 0.0 && a1 <= 360.0)?;
        let [e0, e1] = self.elevation;
        check("elevation", self.elevation, e0 > -90.0 && e1 < 90.0)?;
        check("radius", self.radius, self.radius[0] > 0.0)?;
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<SphericalPose> {
        self.validate()?;
        let draw = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        let az = draw(rng, self.azimuth);
        let el = draw(rng, self.elevation);
        let r = draw(rng, self.radius);
        SphericalPose::new(az, el, r)
    }
}

pub fn sample_refine_pose(dist: &PoseDistribution, seed: u64) -> Result<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = dist.sample(&mut rng)?;
    look_at_pose(&pose, &Vec3::zeros(), dist.intrinsics)
}

/// One entry of `cameras.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
    pub role: ViewRole,
}

impl CameraRecord {
    pub fn from_view(view: &PosedView) -> CameraRecord {
        let k = view.camera.intrinsics;
        CameraRecord {
            azimuth_deg: view.pose.azimuth,
            elevation_deg: view.pose.elevation,
            radius: view.pose.radius,
            focal_px: k.focal,
            width: k.width,
            height: k.height,
            role: view.role,
        }
    }

    /// Rebuilds the camera, looking at the origin with a centered principal point.
    pub fn to_view(&self) -> Result<PosedView> {
        let pose = SphericalPose::new(self.azimuth_deg, self.elevation_deg, self.radius)?;
        let k = Intrinsics::centered(self.width, self.height, self.focal_px);
        Ok(PosedView {
            camera: look_at_pose(&pose, &Vec3::zeros(), k)?,
            pose,
            role: self.role,
        })
    }
}

pub fn cameras_to_json(records: &[CameraRecord]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(records)?;
    s.push('\n');
    Ok(s)
}

pub fn cameras_from_json(text: &str) -> Result<Vec<CameraRecord>> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_cameras(path: &Path, records: &[CameraRecord]) -> Result<()> {
    binio::write_atomic(path, cameras_to_json(records)?.as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>> {
    let bytes = binio::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()).at(path))?;
    cameras_from_json(&text).map_err(|e| e.at(path))
}

/// Signed difference `a - b` wrapped into `[-180, 180)`.
pub fn azimuth_delta(a: f64, b: f64) -> f64 {
    (a - b + 180.0).rem_euclid(360.0) - 180.0
}
