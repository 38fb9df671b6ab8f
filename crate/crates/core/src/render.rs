//! SDF volume renderer with a hand-written reverse pass.
//!
//! Opacity follows the logistic-CDF formulation: with `Φ(s) = σ(k·s)`,
//! `α_j = max((Φ(s_j) − Φ(s_{j+1})) / max(Φ(s_j), 1e-6), 0)` and
//! `w_j = α_j ∏_{i<j} (1 − α_i)` for `j < M − 1`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::camera::{Camera, PosedView, Vec3};
use crate::error::{config_err, shape_err, Result};
use crate::features::{Image, ViewSet};
use crate::fields::{FieldGrads, FieldSet, SdfEval};
use crate::nn::sigmoid;

const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub sharpness: f64,
    /// Square output size; `None` keeps the camera's own resolution.
    pub resolution: Option<u32>,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub stratified: bool,
    pub learn_sharpness: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            sharpness: 64.0,
            resolution: None,
            background: [1.0, 1.0, 1.0],
            near: 0.5,
            far: 4.5,
            stratified: false,
            learn_sharpness: false,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub const PRESETS: [u32; 2] = [512, 1024];

    pub fn preset(resolution: u32) -> Result<RenderConfig> {
        if !Self::PRESETS.contains(&resolution) {
            return Err(config_err(format!("no render preset for {resolution} px")));
        }
        Ok(RenderConfig {
            resolution: Some(resolution),
            ..RenderConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(config_err("samples_per_ray must be >= 2"));
        }
        if !(self.sharpness > 0.0) {
            return Err(config_err("sharpness must be positive"));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(config_err(format!("need 0 <= near < far, got {} and {}", self.near, self.far)));
        }
        if self.resolution == Some(0) {
            return Err(config_err("resolution must be positive"));
        }
        Ok(())
    }

    /// Camera actually rendered: the input camera, resized if a
    /// resolution is configured.
    pub fn frame_camera(&self, camera: &Camera) -> Camera {
        match self.resolution {
            Some(r) if r != camera.intrinsics.width || r != camera.intrinsics.height => {
                let mut c = camera.clone();
                c.intrinsics = camera.intrinsics.rescaled(r, r);
                c
            }
            _ => camera.clone(),
        }
    }
}

/// One ray per pixel, row-major, through pixel centers.
pub fn generate_rays(camera: &Camera, config: &RenderConfig) -> Vec<Ray> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let origin = camera.position();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| Ray {
            origin,
            direction: camera.unproject_direction(x as f64, y as f64),
            near: config.near,
            far: config.far,
        })
        .collect()
}

/// Sample depths along a ray. Uniform samples include both endpoints;
/// stratified samples draw one depth per stratum.
pub fn sample_points(ray: &Ray, samples: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let span = ray.far - ray.near;
    match rng {
        None => (0..samples)
            .map(|j| ray.near + span * j as f64 / (samples - 1) as f64)
            .collect(),
        Some(rng) => {
            let step = span / samples as f64;
            (0..samples)
                .map(|j| ray.near + step * (j as f64 + rng.random_range(0.0..1.0)))
                .collect()
        }
    }
}

fn ray_depths(ray: &Ray, config: &RenderConfig, pixel: usize) -> Vec<f64> {
    if config.stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (pixel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        sample_points(ray, config.samples_per_ray, Some(&mut rng))
    } else {
        sample_points(ray, config.samples_per_ray, None)
    }
}

/// Opacities and weights for `M` SDF samples; both have length `M − 1`.
pub fn neus_alphas(sdf: &[f64], sharpness: f64) -> (Vec<f64>, Vec<f64>) {
    let phi: Vec<f64> = sdf.iter().map(|s| sigmoid(sharpness * s)).collect();
    let alphas: Vec<f64> = phi
        .windows(2)
        .map(|p| ((p[0] - p[1]) / p[0].max(EPS)).max(0.0))
        .collect();
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = 1.0;
    for a in &alphas {
        weights.push(a * trans);
        trans *= 1.0 - a;
    }
    (alphas, weights)
}

pub fn neus_weights(sdf: &[f64], sharpness: f64) -> Vec<f64> {
    neus_alphas(sdf, sharpness).1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub color: [f64; 3],
    pub depth: f64,
    pub normal: Vec3,
    pub opacity: f64,
}

pub fn composite(weights: &[f64], colors: &[[f64; 3]], depths: &[f64], gradients: &[Vec3], background: [f64; 3]) -> Result<PixelSample> {
    let n = weights.len();
    if colors.len() != n || depths.len() != n || gradients.len() != n {
        return Err(shape_err("composite inputs must have equal lengths"));
    }
    let opacity: f64 = weights.iter().sum();
    let mut color = background.map(|b| (1.0 - opacity) * b);
    let mut depth = 0.0;
    let mut normal = Vec3::zeros();
    for j in 0..n {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        for c in 0..3 {
            color[c] += w * colors[j][c];
        }
        depth += w * depths[j];
        normal += gradients[j] * w;
    }
    let len = normal.norm();
    Ok(PixelSample {
        color,
        depth: depth / opacity.max(EPS),
        normal: if len > 0.0 { normal / len } else { normal },
        opacity,
    })
}

struct RayState {
    depths: Vec<f64>,
    evals: Vec<SdfEval>,
    alphas: Vec<f64>,
    weights: Vec<f64>,
}

fn trace_ray(fields: &FieldSet, ray: &Ray, depths: Vec<f64>, sharpness: f64) -> RayState {
    let evals: Vec<SdfEval> = depths.iter().map(|&t| fields.sdf_eval(&ray.at(t))).collect();
    let sdf: Vec<f64> = evals.iter().map(|e| e.value).collect();
    let (alphas, weights) = neus_alphas(&sdf, sharpness);
    RayState {
        depths,
        evals,
        alphas,
        weights,
    }
}

pub fn render_ray(fields: &FieldSet, ray: &Ray, config: &RenderConfig, pixel: usize) -> PixelSample {
    let st = trace_ray(fields, ray, ray_depths(ray, config, pixel), config.sharpness);
    let n = st.weights.len();
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|j| if st.weights[j] > 0.0 { fields.color(&ray.at(st.depths[j])) } else { [0.0; 3] })
        .collect();
    let grads: Vec<Vec3> = st.evals[..n].iter().map(|e| e.grad_x).collect();
    composite(&st.weights, &colors, &st.depths[..n], &grads, config.background).expect("aligned lengths")
}

/// Gradient contributions of one ray.
#[derive(Debug, Clone, Default)]
pub struct RayGrads {
    pub fields: FieldGrads,
    pub sharpness: f64,
}

/// Reverse pass of `render_ray` color w.r.t. the field parameters.
pub fn backward_ray(fields: &FieldSet, ray: &Ray, config: &RenderConfig, pixel: usize, upstream: [f64; 3]) -> RayGrads {
    let mut out = RayGrads {
        fields: FieldGrads::new(fields.texture_param_count()),
        sharpness: 0.0,
    };
    if upstream == [0.0; 3] {
        return out;
    }
    let k = config.sharpness;
    let st = trace_ray(fields, ray, ray_depths(ray, config, pixel), k);
    let n = st.weights.len();
    let bg = config.background;

    // g_j = ∂L/∂w_j, and texture gradients at samples with α_j > 0.
    let mut g = vec![0.0; n];
    for j in 0..n {
        if st.alphas[j] <= 0.0 {
            continue;
        }
        let ev = fields.color_eval(&ray.at(st.depths[j]));
        g[j] = (0..3).map(|c| upstream[c] * (ev.rgb[c] - bg[c])).sum();
        if st.weights[j] > 0.0 {
            let w = st.weights[j];
            fields.color_backward(&ev, upstream.map(|u| u * w), &mut out.fields);
        }
    }

    // ∂L/∂α_j = T_j (g_j − R_j), R_j = g_{j+1} α_{j+1} + (1 − α_{j+1}) R_{j+1}.
    let mut trans = vec![1.0; n];
    for j in 1..n {
        trans[j] = trans[j - 1] * (1.0 - st.alphas[j - 1]);
    }
    let mut d_alpha = vec![0.0; n];
    let mut r = 0.0;
    for j in (0..n).rev() {
        d_alpha[j] = trans[j] * (g[j] - r);
        r = g[j] * st.alphas[j] + (1.0 - st.alphas[j]) * r;
    }

    let phi: Vec<f64> = st.evals.iter().map(|e| sigmoid(k * e.value)).collect();
    let mut d_phi = vec![0.0; n + 1];
    for j in 0..n {
        if st.alphas[j] <= 0.0 || d_alpha[j] == 0.0 {
            continue;
        }
        if phi[j] > EPS {
            d_phi[j] += d_alpha[j] * phi[j + 1] / (phi[j] * phi[j]);
            d_phi[j + 1] -= d_alpha[j] / phi[j];
        } else {
            d_phi[j] += d_alpha[j] / EPS;
            d_phi[j + 1] -= d_alpha[j] / EPS;
        }
    }
    for (j, ev) in st.evals.iter().enumerate() {
        if d_phi[j] == 0.0 {
            continue;
        }
        let dphi_dz = phi[j] * (1.0 - phi[j]);
        fields.sdf_backward(ev, d_phi[j] * dphi_dz * k, &mut out.fields.volume);
        out.sharpness += d_phi[j] * dphi_dz * ev.value;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Image,
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    pub fn center_index(&self) -> usize {
        (self.height / 2) * self.width + self.width / 2
    }

    /// Normals mapped from `[-1, 1]` to `[0, 1]` per channel.
    pub fn normal_image(&self) -> Image {
        let data = self
            .normal
            .iter()
            .flat_map(|n| [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0])
            .collect();
        Image::new(self.width, self.height, data).expect("matching size")
    }

    /// Writes `color.png`, `normal.png` and `depth.pfm` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::from(e).at(dir))?;
        self.color.save_png(&dir.join("color.png"))?;
        self.normal_image().save_png(&dir.join("normal.png"))?;
        write_pfm(&dir.join("depth.pfm"), self.width, self.height, &self.depth)
    }
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn pfm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for x in 0..width {
            out.extend_from_slice(&(values[y * width + x] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    binio::write_atomic(path, &pfm_bytes(width, height, values))
}

pub fn render_image(fields: &FieldSet, camera: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    config.validate()?;
    let cam = config.frame_camera(camera);
    cam.validate()?;
    let rays = generate_rays(&cam, config);
    let pixels: Vec<PixelSample> = rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| render_ray(fields, ray, config, i))
        .collect();
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    let color = pixels.iter().flat_map(|p| p.color).collect();
    Ok(RenderOutput {
        width: w,
        height: h,
        color: Image::new(w, h, color)?,
        depth: pixels.iter().map(|p| p.depth).collect(),
        normal: pixels.iter().map(|p| p.normal).collect(),
        opacity: pixels.iter().map(|p| p.opacity).collect(),
    })
}

/// Renders each posed view at its own camera, e.g. to stand in for the
/// output of a multi-view generator.
pub fn render_view_set(fields: &FieldSet, views: &[PosedView], config: &RenderConfig) -> Result<ViewSet> {
    let config = RenderConfig {
        resolution: None,
        ..config.clone()
    };
    let images = views
        .iter()
        .map(|v| Ok(render_image(fields, &v.camera, &config)?.color))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet {
        images,
        views: views.to_vec(),
    })
}

/// Unclamped row-major RGB render, the differentiable view used by
/// refinement.
pub fn render_colors(fields: &FieldSet, camera: &Camera, config: &RenderConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let cam = config.frame_camera(camera);
    cam.validate()?;
    let rays = generate_rays(&cam, config);
    Ok(rays
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, ray)| render_ray(fields, ray, config, i).color)
        .collect())
}

/// Pulls a per-pixel color gradient (`W·H·3`, row-major) back to the field
/// parameters. Per-ray gradients are computed in parallel and summed in
/// pixel order, so the result does not depend on the thread count.
pub fn backward_image(fields: &FieldSet, camera: &Camera, config: &RenderConfig, upstream: &[f64]) -> Result<RayGrads> {
    config.validate()?;
    let cam = config.frame_camera(camera);
    let rays = generate_rays(&cam, config);
    if upstream.len() != rays.len() * 3 {
        return Err(shape_err(format!(
            "upstream gradient has {} values, frame needs {}",
            upstream.len(),
            rays.len() * 3
        )));
    }
    let per_ray: Vec<RayGrads> = rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| {
            let u = [upstream[3 * i], upstream[3 * i + 1], upstream[3 * i + 2]];
            backward_ray(fields, ray, config, i, u)
        })
        .collect();
    let mut total = RayGrads {
        fields: FieldGrads::new(fields.texture_param_count()),
        sharpness: 0.0,
    };
    for g in &per_ray {
        total.fields.accumulate(&g.fields);
        total.sharpness += g.sharpness;
    }
    total.fields.coalesce();
    Ok(total)
}

/// `‖I − I′‖₂` over all pixel channels and its gradient w.r.t. `I′`.
pub fn rgb_loss(target: &[f64], rendered: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != rendered.len() {
        return Err(shape_err(format!(
            "image sizes differ: {} vs {} values",
            target.len(),
            rendered.len()
        )));
    }
    let loss = target
        .iter()
        .zip(rendered)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    let grad = if loss > 0.0 {
        target.iter().zip(rendered).map(|(a, b)| (b - a) / loss).collect()
    } else {
        vec![0.0; target.len()]
    };
    Ok((loss, grad))
}

pub fn rgb_loss_images(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(shape_err("image dimensions differ"));
    }
    Ok(rgb_loss(&a.data, &b.data)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{look_at, Intrinsics};
    use crate::costvolume::GridSpec;
    use crate::fields::FieldConfig;

    fn sphere_fields(res: usize) -> FieldSet {
        FieldSet::passthrough_sdf(GridSpec::cube(res, 1.5), |x| x.norm() - 1.0, 1.0, &FieldConfig::default()).unwrap()
    }

    fn front_camera(size: u32) -> Camera {
        look_at(&Vec3::new(0.0, 0.0, 3.0), &Vec3::zeros(), Intrinsics::square(size, 40.0)).unwrap()
    }

    #[test]
    fn sample_point_cases() {
        let ray = Ray {
            origin: Vec3::zeros(),
            direction: Vec3::z(),
            near: 1.0,
            far: 3.0,
        };
        assert_eq!(sample_points(&ray, 5, None), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(sample_points(&ray, 2, None), vec![1.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_points(&ray, 8, Some(&mut rng));
        for (j, t) in s.iter().enumerate() {
            let lo = 1.0 + 0.25 * j as f64;
            assert!(*t >= lo && *t < lo + 0.25);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(s, sample_points(&ray, 8, Some(&mut rng)));
    }

    #[test]
    fn weight_cases() {
        let (a, w) = neus_alphas(&[0.5; 6], 64.0);
        assert!(a.iter().all(|&v| v == 0.0) && w.iter().all(|&v| v == 0.0));
        let w = neus_weights(&[1.0, -1.0], 100.0);
        assert!((w[0] - 1.0).abs() < 1e-12);
        let (a, _) = neus_alphas(&[-0.5, -0.2, 0.1, 0.4], 10.0);
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composite_cases() {
        let z = Vec3::z();
        let p = composite(&[1.0], &[[0.2, 0.4, 0.6]], &[2.0], &[z], [1.0; 3]).unwrap();
        assert_eq!(p.color, [0.2, 0.4, 0.6]);
        assert_eq!(p.opacity, 1.0);
        let p = composite(&[0.0, 0.0], &[[1.0; 3]; 2], &[1.0, 2.0], &[z, z], [0.1, 0.2, 0.3]).unwrap();
        assert_eq!(p.color, [0.1, 0.2, 0.3]);
        assert_eq!(p.opacity, 0.0);
        let p = composite(&[0.3, 0.5], &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], &[1.0, 2.0], &[z, z], [1.0; 3]).unwrap();
        let expect = [0.3 + 0.2, 0.2, 0.5 + 0.2];
        for c in 0..3 {
            assert!((p.color[c] - expect[c]).abs() < 1e-15);
        }
        assert!(composite(&[0.3], &[], &[1.0], &[z], [1.0; 3]).is_err());
    }

    #[test]
    fn ray_directions() {
        let cam = front_camera(33);
        let rays = generate_rays(&cam, &RenderConfig::default());
        assert!(rays.iter().all(|r| (r.direction.norm() - 1.0).abs() < 1e-9));
        let center = rays[16 * 33 + 16].direction;
        assert!((center - cam.forward()).norm() < 1e-12);
        let f = cam.intrinsics.focal;
        let c = 16.0;
        let by_hand = Vec3::new(-c / f, c / f, -1.0).normalize();
        assert!((rays[0].direction - by_hand).norm() < 1e-12, "{:?} vs {by_hand:?}", rays[0].direction);
    }

    #[test]
    fn sphere_depth_and_normal() {
        let fs = sphere_fields(48);
        let cfg = RenderConfig::default();
        let out = render_image(&fs, &front_camera(17), &cfg).unwrap();
        let c = out.center_index();
        let tol = 2.0 * (cfg.far - cfg.near) / cfg.samples_per_ray as f64;
        assert!((out.depth[c] - 2.0).abs() <= tol, "depth {}", out.depth[c]);
        assert!((out.normal[c] - Vec3::z()).norm() < 0.02, "normal {:?}", out.normal[c]);
        assert!(out.opacity[c] > 0.99);
    }

    #[test]
    fn empty_scene_is_background() {
        let fs = FieldSet::passthrough_sdf(GridSpec::cube(4, 1.0), |_| 1.0, 1.0, &FieldConfig::default()).unwrap();
        let cfg = RenderConfig {
            background: [0.2, 0.4, 0.6],
            ..RenderConfig::default()
        };
        let out = render_image(&fs, &front_camera(8), &cfg).unwrap();
        assert!(out.opacity.iter().all(|&o| o == 0.0));
        for p in out.color.data.chunks(3) {
            for c in 0..3 {
                assert!((p[c] - cfg.background[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rgb_loss_cases() {
        let a = vec![0.5; 12];
        assert_eq!(rgb_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        for i in [0, 3, 7, 11] {
            b[i] += 1.0;
        }
        let (l, g) = rgb_loss(&a, &b).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
        let h = 1e-6;
        let mut bp = b.clone();
        bp[3] += h;
        let mut bm = b.clone();
        bm[3] -= h;
        let fd = (rgb_loss(&a, &bp).unwrap().0 - rgb_loss(&a, &bm).unwrap().0) / (2.0 * h);
        assert!((g[3] - fd).abs() < 1e-8);
        assert!(rgb_loss(&a, &b[..6]).is_err());
    }

    #[test]
    fn pfm_layout() {
        let bytes = pfm_bytes(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let body: Vec<f32> = bytes[header.len()..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(body, vec![3.0, 4.0, 1.0, 2.0]);
    }
}
