//! Score-distillation refinement of field parameters.
//!
//! Each step renders the current parameters from a random pose, noises the
//! render, asks a frozen and a trainable noise predictor for ε, and pushes
//! `w(t)·(ε_pre − ε_lora)` back through the renderer.

pub mod score;

pub use score::*;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::camera::{look_at_pose, Camera, PoseDistribution, SphericalPose, Vec3};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fields::{FieldSet, SparseGrad};
use crate::render::{backward_image, render_colors, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(t) = σ_t²`
    #[default]
    SigmaSquared,
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampled timestep interval as fractions of `steps`.
    pub t_range: [f64; 2],
    pub weighting: Weighting,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            t_range: [0.02, 0.98],
            weighting: Weighting::SigmaSquared,
        }
    }
}

/// Variance-preserving schedule with scaled-linear betas.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    alphas_cumprod: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::new(ScheduleConfig::default()).expect("valid default schedule")
    }
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<DiffusionSchedule> {
        let [t0, t1] = config.t_range;
        if config.steps < 2 {
            return Err(config_err("diffusion schedule needs at least 2 steps"));
        }
        if !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(config_err("betas must satisfy 0 < start <= end < 1"));
        }
        if !(0.0 <= t0 && t0 <= t1 && t1 <= 1.0) {
            return Err(config_err(format!("timestep range ({t0}, {t1}) is invalid")));
        }
        let (s0, s1) = (config.beta_start.sqrt(), config.beta_end.sqrt());
        let n = config.steps;
        let mut acc = 1.0;
        let alphas_cumprod = (0..n)
            .map(|i| {
                let b = s0 + (s1 - s0) * i as f64 / (n - 1) as f64;
                acc *= 1.0 - b * b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { config, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn level(&self, t: usize) -> NoiseLevel {
        let a = self.alphas_cumprod[t.min(self.config.steps - 1)];
        NoiseLevel {
            alpha: a.sqrt(),
            sigma: (1.0 - a).sqrt(),
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.level(t).alpha
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.level(t).sigma
    }

    pub fn weight(&self, t: usize) -> f64 {
        match self.config.weighting {
            Weighting::SigmaSquared => self.sigma(t).powi(2),
            Weighting::Unit => 1.0,
        }
    }

    /// Inclusive integer timestep bounds.
    pub fn t_bounds(&self) -> (usize, usize) {
        let n = self.config.steps as f64;
        let lo = (self.config.t_range[0] * n).ceil() as usize;
        let hi = ((self.config.t_range[1] * n).floor() as usize).min(self.config.steps - 1);
        (lo.min(hi), hi)
    }

    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        let (lo, hi) = self.t_bounds();
        rng.random_range(lo..=hi)
    }
}

pub fn add_noise_at(x: &[f64], level: NoiseLevel, eps: &[f64]) -> Result<Vec<f64>> {
    if x.len() != eps.len() {
        return Err(shape_err(format!("image has {} values, noise {}", x.len(), eps.len())));
    }
    Ok(x.iter().zip(eps).map(|(x, e)| level.alpha * x + level.sigma * e).collect())
}

pub fn add_noise(x: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    add_noise_at(x, schedule.level(t), eps)
}

/// `w·(ε_pre − ε_lora)`.
pub fn vsd_gradient_weighted(weight: f64, eps_pre: &[f64], eps_lora: &[f64]) -> Result<Vec<f64>> {
    if eps_pre.len() != eps_lora.len() {
        return Err(shape_err("score predictions differ in length"));
    }
    Ok(eps_pre.iter().zip(eps_lora).map(|(a, b)| weight * (a - b)).collect())
}

pub fn vsd_pixel_gradient(t: usize, eps_pre: &[f64], eps_lora: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    vsd_gradient_weighted(schedule.weight(t), eps_pre, eps_lora)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ramp {
    pub lo: f64,
    pub hi: f64,
    pub ramp_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineDecay {
    pub hi: f64,
    pub lo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LRSchedule {
    pub volume: Ramp,
    pub texture: CosineDecay,
}

impl Default for LRSchedule {
    fn default() -> Self {
        LRSchedule {
            volume: Ramp {
                lo: 1e-3,
                hi: 1e-2,
                ramp_fraction: 0.5,
            },
            texture: CosineDecay { hi: 1e-2, lo: 1e-3 },
        }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        let v = &self.volume;
        if !(0.0 < v.lo && v.lo <= v.hi) || !(v.ramp_fraction > 0.0 && v.ramp_fraction <= 1.0) {
            return Err(config_err("volume learning-rate ramp is invalid"));
        }
        let t = &self.texture;
        if !(0.0 < t.lo && t.lo <= t.hi) {
            return Err(config_err("texture learning-rate decay is invalid"));
        }
        Ok(())
    }
}

/// `(η₁, η₂)` at `step` of `total`: a linear volume ramp that reaches `hi`
/// after `ramp_fraction·(total − 1)` steps, and a cosine texture decay over
/// all steps.
pub fn lr_schedule(step: usize, total: usize, schedule: &LRSchedule) -> (f64, f64) {
    let v = &schedule.volume;
    let t = &schedule.texture;
    if total <= 1 {
        return (v.lo, t.hi);
    }
    let last = (total - 1) as f64;
    let s = step.min(total - 1) as f64;
    let ramp = (s / (v.ramp_fraction * last)).min(1.0);
    let eta1 = if ramp >= 1.0 { v.hi } else { v.lo + (v.hi - v.lo) * ramp };
    let eta2 = t.hi - (t.hi - t.lo) * 0.5 * (1.0 - (std::f64::consts::PI * s / last).cos());
    (eta1, eta2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Volume,
    Hash,
    Texture,
    Sharpness,
    Pixels,
    TetSdf,
    Deformation,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Volume => "volume",
            Block::Hash => "hash",
            Block::Texture => "texture",
            Block::Sharpness => "sharpness",
            Block::Pixels => "pixels",
            Block::TetSdf => "tet_sdf",
            Block::Deformation => "deformation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub block: Block,
    pub grad: SparseGrad,
}

/// Anything with parameters that renders to an image and backpropagates a
/// pixel gradient.
pub trait Refinable {
    /// Row-major RGB render: `(width, height, values)`.
    fn render(&self, camera: &Camera) -> Result<(usize, usize, Vec<f64>)>;
    fn backward(&self, camera: &Camera, upstream: &[f64]) -> Result<Vec<BlockGrad>>;
    /// `θ_block -= delta`.
    fn apply(&mut self, block: Block, delta: &SparseGrad);
    /// Checksum of the parameters that must never change.
    fn frozen_checksum(&self) -> u64;
}

/// A field set together with the render settings used to view it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTarget {
    pub fields: FieldSet,
    pub render: RenderConfig,
}

impl Refinable for FieldTarget {
    fn render(&self, camera: &Camera) -> Result<(usize, usize, Vec<f64>)> {
        let cam = self.render.frame_camera(camera);
        let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
        Ok((w, h, render_colors(&self.fields, camera, &self.render)?))
    }

    fn backward(&self, camera: &Camera, upstream: &[f64]) -> Result<Vec<BlockGrad>> {
        let g = backward_image(&self.fields, camera, &self.render, upstream)?;
        let texture = SparseGrad {
            entries: g.fields.texture.iter().copied().enumerate().collect(),
        };
        let mut out = vec![
            BlockGrad {
                block: Block::Volume,
                grad: g.fields.volume,
            },
            BlockGrad {
                block: Block::Hash,
                grad: g.fields.hash,
            },
            BlockGrad {
                block: Block::Texture,
                grad: texture,
            },
        ];
        if self.render.learn_sharpness {
            out.push(BlockGrad {
                block: Block::Sharpness,
                grad: SparseGrad {
                    entries: vec![(0, g.sharpness)],
                },
            });
        }
        Ok(out)
    }

    fn apply(&mut self, block: Block, delta: &SparseGrad) {
        let none = SparseGrad::default();
        match block {
            Block::Volume => self.fields.apply_step(delta, &none, &[]),
            Block::Hash => self.fields.apply_step(&none, delta, &[]),
            Block::Texture => {
                let dense = delta.to_dense(self.fields.texture_param_count());
                self.fields.apply_step(&none, &none, &dense);
            }
            Block::Sharpness => {
                let d: f64 = delta.entries.iter().map(|e| e.1).sum();
                self.render.sharpness = (self.render.sharpness - d).max(1e-3);
            }
            _ => {}
        }
    }

    fn frozen_checksum(&self) -> u64 {
        self.fields.geometry_checksum()
    }
}

/// Test harness whose parameters are the pixels themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTarget {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Refinable for PixelTarget {
    fn render(&self, _camera: &Camera) -> Result<(usize, usize, Vec<f64>)> {
        Ok((self.width, self.height, self.pixels.clone()))
    }

    fn backward(&self, _camera: &Camera, upstream: &[f64]) -> Result<Vec<BlockGrad>> {
        if upstream.len() != self.pixels.len() {
            return Err(shape_err("pixel gradient does not match the image"));
        }
        Ok(vec![BlockGrad {
            block: Block::Pixels,
            grad: SparseGrad {
                entries: upstream.iter().copied().enumerate().collect(),
            },
        }])
    }

    fn apply(&mut self, block: Block, delta: &SparseGrad) {
        if block == Block::Pixels {
            for &(i, v) in &delta.entries {
                self.pixels[i] -= v;
            }
        }
    }

    fn frozen_checksum(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub particles: usize,
    pub lr: LRSchedule,
    /// η₃, texture MLP.
    pub texture_mlp_lr: f64,
    /// η₄, trainable score model.
    pub score_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub condition_id: u32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 100,
            particles: 1,
            lr: LRSchedule::default(),
            texture_mlp_lr: 1e-3,
            score_lr: 1e-3,
            clip_norm: 10.0,
            seed: 0,
            condition_id: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.particles == 0 {
            return Err(config_err("need at least one particle"));
        }
        if !(self.texture_mlp_lr > 0.0 && self.score_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(config_err("learning rates and clip norm must be positive"));
        }
        Ok(())
    }

    fn rate(&self, block: Block, eta1: f64, eta2: f64) -> f64 {
        match block {
            Block::Volume | Block::Pixels | Block::TetSdf | Block::Deformation => eta1,
            Block::Hash => eta2,
            Block::Texture | Block::Sharpness => self.texture_mlp_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub vsd_norm: f64,
    pub lora_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineTrace {
    pub rows: Vec<TraceRow>,
}

impl RefineTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,eta1,eta2,vsd_norm,lora_loss\n");
        for r in &self.rows {
            let loss = r.lora_loss.map(|l| format!("{l:e}")).unwrap_or_default();
            out.push_str(&format!("{},{:e},{:e},{:e},{}\n", r.step, r.eta1, r.eta2, r.vsd_norm, loss));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Intermediate quantities of one distillation step.
#[derive(Debug, Clone)]
pub struct VsdStep {
    pub width: usize,
    pub height: usize,
    pub render: Vec<f64>,
    pub x_t: Vec<f64>,
    pub eps_pre: Vec<f64>,
    pub eps_lora: Vec<f64>,
    pub pixel_grad: Vec<f64>,
    pub block_grads: Vec<BlockGrad>,
}

fn check_finite(values: &[f64], block: &str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            block: block.to_string(),
            step,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn vsd_step<R: Refinable + ?Sized>(
    target: &R,
    camera: &Camera,
    pose: Option<SphericalPose>,
    pre: &mut dyn ScoreProvider,
    lora: &mut dyn ScoreProvider,
    schedule: &DiffusionSchedule,
    t: usize,
    eps: &[f64],
    condition_id: u32,
    step: usize,
) -> Result<VsdStep> {
    let (width, height, render) = target.render(camera)?;
    check_finite(&render, "render", step)?;
    let x_t = add_noise(&render, t, eps, schedule)?;
    let q = ScoreQuery {
        x_t: &x_t,
        t,
        width,
        height,
        condition_id,
        pose,
        clean: &render,
    };
    let eps_pre = predict_eps(pre, &q, schedule)?;
    check_finite(&eps_pre, "eps_pretrain", step)?;
    let eps_lora = predict_eps(lora, &q, schedule)?;
    check_finite(&eps_lora, "eps_lora", step)?;
    let pixel_grad = vsd_pixel_gradient(t, &eps_pre, &eps_lora, schedule)?;
    let block_grads = target.backward(camera, &pixel_grad)?;
    for b in &block_grads {
        if b.grad.entries.iter().any(|e| !e.1.is_finite()) {
            return Err(Error::NonFinite {
                block: b.block.name().to_string(),
                step,
            });
        }
    }
    Ok(VsdStep {
        width,
        height,
        render,
        x_t,
        eps_pre,
        eps_lora,
        pixel_grad,
        block_grads,
    })
}

/// Single-particle refinement.
pub fn refine_loop<R: Refinable>(
    target: &mut R,
    pre: &mut dyn ScoreProvider,
    lora: &mut dyn ScoreProvider,
    poses: &PoseDistribution,
    schedule: &DiffusionSchedule,
    config: &RefineConfig,
) -> Result<RefineTrace> {
    refine_particles(std::slice::from_mut(target), pre, lora, poses, schedule, config)
}

/// Refines every particle against the shared score models. Trace rows are
/// emitted per particle per step.
pub fn refine_particles<R: Refinable>(
    particles: &mut [R],
    pre: &mut dyn ScoreProvider,
    lora: &mut dyn ScoreProvider,
    poses: &PoseDistribution,
    schedule: &DiffusionSchedule,
    config: &RefineConfig,
) -> Result<RefineTrace> {
    config.validate()?;
    poses.validate()?;
    let frozen: Vec<u64> = particles.iter().map(|p| p.frozen_checksum()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = RefineTrace::default();
    for step in 0..config.iterations {
        let (eta1, eta2) = lr_schedule(step, config.iterations, &config.lr);
        for target in particles.iter_mut() {
            let pose = poses.sample(&mut rng)?;
            let camera = look_at_pose(&pose, &Vec3::zeros(), poses.intrinsics)?;
            let t = schedule.sample_t(&mut rng);
            let (w, h, _) = target.render(&camera)?;
            let eps: Vec<f64> = (0..w * h * 3).map(|_| rng.sample(StandardNormal)).collect();
            let s = vsd_step(&*target, &camera, Some(pose), pre, lora, schedule, t, &eps, config.condition_id, step)?;
            for mut b in s.block_grads {
                let norm = b.grad.norm();
                if norm > config.clip_norm {
                    b.grad.scale(config.clip_norm / norm);
                }
                b.grad.scale(config.rate(b.block, eta1, eta2));
                target.apply(b.block, &b.grad);
            }
            let lora_loss = if lora.is_trainable() {
                let q = ScoreQuery {
                    x_t: &s.x_t,
                    t,
                    width: s.width,
                    height: s.height,
                    condition_id: config.condition_id,
                    pose: Some(pose),
                    clean: &s.render,
                };
                let loss = lora.regression_step(&q, &eps, config.score_lr).map_err(|e| match e {
                    Error::NonFinite { block, .. } => Error::NonFinite { block, step },
                    e => e,
                })?;
                Some(loss)
            } else {
                None
            };
            let vsd_norm = s.pixel_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            log::debug!("step {step}: t={t} vsd_norm={vsd_norm:.4e}");
            trace.rows.push(TraceRow {
                step,
                eta1,
                eta2,
                vsd_norm,
                lora_loss,
            });
        }
    }
    for (p, sum) in particles.iter().zip(frozen) {
        if p.frozen_checksum() != sum {
            return Err(config_err("frozen parameters changed during refinement"));
        }
    }
    Ok(trace)
}
