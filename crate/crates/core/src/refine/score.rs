//! Noise-prediction providers.
//!
//! Every provider answers "which noise was added to this image" and is
//! normalized to ε-prediction before gradients are formed.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiffusionSchedule, NoiseLevel};
use crate::binio::{self, ByteReader};
use crate::camera::SphericalPose;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Mlp};

pub const PROVIDER_MAGIC: &[u8; 4] = b"GDSP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProviderKind {
    AnalyticGaussian,
    ExactNoise,
    TrainableSmallNet,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Parameterization {
    #[default]
    Epsilon,
    V,
}

/// Everything a provider may look at for one prediction.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery<'a> {
    /// Noisy image, row-major RGB.
    pub x_t: &'a [f64],
    pub t: usize,
    pub width: usize,
    pub height: usize,
    pub condition_id: u32,
    pub pose: Option<SphericalPose>,
    /// The clean render behind `x_t`; only oracles read it.
    pub clean: &'a [f64],
}

impl ScoreQuery<'_> {
    pub fn len(&self) -> usize {
        self.width * self.height * 3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        if self.x_t.len() != self.len() || self.clean.len() != self.len() {
            return Err(shape_err(format!(
                "score query for {}x{} needs {} values, got x_t {} and clean {}",
                self.width,
                self.height,
                self.len(),
                self.x_t.len(),
                self.clean.len()
            )));
        }
        Ok(())
    }
}

pub trait ScoreProvider: Send {
    fn kind(&self) -> ProviderKind;

    fn parameterization(&self) -> Parameterization {
        Parameterization::Epsilon
    }

    /// Raw prediction in the provider's own parameterization.
    fn predict_raw(&mut self, query: &ScoreQuery, schedule: &DiffusionSchedule) -> Result<Vec<f64>>;

    /// One squared-error step toward `target_eps`; returns the loss before
    /// the step.
    fn regression_step(&mut self, _query: &ScoreQuery, _target_eps: &[f64], _lr: f64) -> Result<f64> {
        Err(Error::NotTrainable)
    }

    fn is_trainable(&self) -> bool {
        false
    }
}

/// Prediction normalized to ε, converting v-predictions with
/// `ε = α_t v + σ_t x_t`.
pub fn predict_eps(provider: &mut dyn ScoreProvider, query: &ScoreQuery, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    query.check()?;
    let raw = provider.predict_raw(query, schedule)?;
    if raw.len() != query.len() {
        return Err(Error::Provider(format!(
            "provider returned {} values for a {}-value image",
            raw.len(),
            query.len()
        )));
    }
    Ok(match provider.parameterization() {
        Parameterization::Epsilon => raw,
        Parameterization::V => {
            let NoiseLevel { alpha, sigma } = schedule.level(query.t);
            raw.iter().zip(query.x_t).map(|(v, x)| alpha * v + sigma * x).collect()
        }
    })
}

/// Exact ε for data distributed as `N(μ, s²I)`.
pub fn analytic_gaussian_score(x_t: &[f64], level: NoiseLevel, mean: &[f64], variance: f64) -> Vec<f64> {
    let NoiseLevel { alpha, sigma } = level;
    let denom = alpha * alpha * variance + sigma * sigma;
    x_t.iter().zip(mean).map(|(x, m)| sigma * (x - alpha * m) / denom).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl ScoreProvider for AnalyticGaussian {
    fn kind(&self) -> ProviderKind {
        ProviderKind::AnalyticGaussian
    }

    fn predict_raw(&mut self, q: &ScoreQuery, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        if self.mean.len() != q.len() {
            return Err(shape_err(format!(
                "gaussian mean has {} values, image has {}",
                self.mean.len(),
                q.len()
            )));
        }
        Ok(analytic_gaussian_score(q.x_t, schedule.level(q.t), &self.mean, self.variance))
    }
}

/// Recovers the exact noise from the clean render: `(x_t − α_t x̂)/σ_t`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExactNoise;

impl ScoreProvider for ExactNoise {
    fn kind(&self) -> ProviderKind {
        ProviderKind::ExactNoise
    }

    fn predict_raw(&mut self, q: &ScoreQuery, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let NoiseLevel { alpha, sigma } = schedule.level(q.t);
        Ok(q.x_t.iter().zip(q.clean).map(|(x, c)| (x - alpha * c) / sigma).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallNetConfig {
    /// Side of the square grid renders are box-averaged onto.
    pub grid: usize,
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub seed: u64,
    pub init_gain: f64,
}

impl Default for SmallNetConfig {
    fn default() -> Self {
        SmallNetConfig {
            grid: 8,
            hidden: vec![64],
            time_frequencies: 4,
            seed: 0,
            init_gain: 0.1,
        }
    }
}

/// Trainable ε-predictor: box-downsampled `x_t`, sinusoidal timestep
/// embedding and `(sin, cos)` of the pose angles go through an MLP whose
/// output grid is upsampled back to full resolution by nearest lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallNet {
    pub config: SmallNetConfig,
    pub mlp: Mlp,
    pub t_max: usize,
}

impl SmallNet {
    pub fn new(config: SmallNetConfig, t_max: usize) -> Result<SmallNet> {
        if config.grid == 0 {
            return Err(shape_err("small net grid must be positive"));
        }
        let mut widths = vec![Self::input_dim(&config)];
        widths.extend(&config.hidden);
        widths.push(config.grid * config.grid * 3);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mlp = Mlp::random(&widths, Activation::Relu, Activation::Identity, config.init_gain, &mut rng)?;
        Ok(SmallNet { config, mlp, t_max })
    }

    pub fn input_dim(config: &SmallNetConfig) -> usize {
        config.grid * config.grid * 3 + 2 * config.time_frequencies + 4
    }

    /// Grid cell of every pixel, row-major.
    fn cells(&self, width: usize, height: usize) -> Vec<usize> {
        let g = self.config.grid;
        (0..height)
            .flat_map(|y| (0..width).map(move |x| ((y * g) / height) * g + (x * g) / width))
            .collect()
    }

    fn input(&self, q: &ScoreQuery) -> Vec<f64> {
        let g = self.config.grid;
        let cells = self.cells(q.width, q.height);
        let mut sums = vec![0.0; g * g * 3];
        let mut counts = vec![0usize; g * g];
        for (p, &c) in cells.iter().enumerate() {
            counts[c] += 1;
            for k in 0..3 {
                sums[c * 3 + k] += q.x_t[p * 3 + k];
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                for k in 0..3 {
                    sums[c * 3 + k] /= n as f64;
                }
            }
        }
        let tau = q.t as f64 / self.t_max.max(1) as f64;
        for f in 0..self.config.time_frequencies {
            let w = (1u64 << f) as f64 * std::f64::consts::PI * tau;
            sums.push(w.sin());
            sums.push(w.cos());
        }
        let (az, el) = q
            .pose
            .map(|p| (p.azimuth.to_radians(), p.elevation.to_radians()))
            .unwrap_or((0.0, 0.0));
        sums.extend([az.sin(), az.cos(), el.sin(), el.cos()]);
        sums
    }

    fn upsample(&self, grid_out: &[f64], width: usize, height: usize) -> Vec<f64> {
        self.cells(width, height)
            .iter()
            .flat_map(|&c| [grid_out[c * 3], grid_out[c * 3 + 1], grid_out[c * 3 + 2]])
            .collect()
    }

    /// Mean squared error against `target` and its parameter gradient.
    pub fn loss_and_grad(&self, q: &ScoreQuery, target: &[f64]) -> Result<(f64, Vec<f64>)> {
        q.check()?;
        if target.len() != q.len() {
            return Err(shape_err("regression target does not match the image"));
        }
        let trace = self.mlp.trace(&self.input(q))?;
        let pred = self.upsample(trace.output(), q.width, q.height);
        let n = q.len() as f64;
        let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let mut g_grid = vec![0.0; self.mlp.output_dim()];
        for (p, &c) in self.cells(q.width, q.height).iter().enumerate() {
            for k in 0..3 {
                let i = p * 3 + k;
                g_grid[c * 3 + k] += 2.0 * (pred[i] - target[i]) / n;
            }
        }
        let mut grad = vec![0.0; self.mlp.param_count()];
        self.mlp.backward(&trace, &g_grid, Some(&mut grad));
        Ok((loss, grad))
    }
}

impl ScoreProvider for SmallNet {
    fn kind(&self) -> ProviderKind {
        ProviderKind::TrainableSmallNet
    }

    fn predict_raw(&mut self, q: &ScoreQuery, _schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        q.check()?;
        let out = self.mlp.forward(&self.input(q))?;
        Ok(self.upsample(&out, q.width, q.height))
    }

    fn regression_step(&mut self, q: &ScoreQuery, target_eps: &[f64], lr: f64) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(q, target_eps)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                block: "score_net".into(),
                step: 0,
            });
        }
        let delta: Vec<f64> = grad.iter().map(|g| -lr * g).collect();
        self.mlp.add_to_params(&delta);
        Ok(loss)
    }

    fn is_trainable(&self) -> bool {
        true
    }
}

/// Request frame: `u32 length` followed by
/// `"GDSP", u32 W, u32 H, u32 C, f32 t, u32 condition_id, f32[W·H·C]`.
pub fn encode_request(q: &ScoreQuery) -> Vec<u8> {
    let mut body = Vec::with_capacity(24 + q.len() * 4);
    body.extend_from_slice(PROVIDER_MAGIC);
    binio::put_u32(&mut body, q.width as u32);
    binio::put_u32(&mut body, q.height as u32);
    binio::put_u32(&mut body, 3);
    binio::put_f32(&mut body, q.t as f32);
    binio::put_u32(&mut body, q.condition_id);
    binio::put_f32s(&mut body, q.x_t.iter().copied());
    let mut out = Vec::with_capacity(body.len() + 4);
    binio::put_u32(&mut out, body.len() as u32);
    out.extend_from_slice(&body);
    out
}

/// Parsed request, for implementing the server side.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRequest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub t: f32,
    pub condition_id: u32,
    pub payload: Vec<f64>,
}

pub fn decode_request_body(body: &[u8]) -> Result<ProviderRequest> {
    let mut r = ByteReader::new(body);
    r.expect_magic(PROVIDER_MAGIC)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let t = r.f32()?;
    let condition_id = r.u32()?;
    let payload = r.f32s(width * height * channels)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in provider request".into()));
    }
    Ok(ProviderRequest {
        width,
        height,
        channels,
        t,
        condition_id,
        payload,
    })
}

/// Response frame: `u32 length` followed by the f32 payload.
pub fn encode_response(payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len() * 4);
    binio::put_u32(&mut out, (payload.len() * 4) as u32);
    binio::put_f32s(&mut out, payload.iter().copied());
    out
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub(crate) enum Transport {
    Tcp(BufReader<TcpStream>, BufWriter<TcpStream>),
    Pipe(Child, BufReader<ChildStdout>, BufWriter<ChildStdin>),
}

impl Transport {
    pub(crate) fn connect(address: &str) -> Result<Transport> {
        let stream = TcpStream::connect(address).map_err(|e| Error::Provider(format!("connect {address}: {e}")))?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Transport::Tcp(reader, BufWriter::new(stream)))
    }

    pub(crate) fn spawn(program: &str, args: &[String]) -> Result<Transport> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Transport::Pipe(child, BufReader::new(stdout), BufWriter::new(stdin)))
    }

    /// Sends one framed request and returns the response body.
    pub(crate) fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        let io_err = |e: Error| Error::Provider(format!("external provider: {e}"));
        let (r, w): (&mut dyn Read, &mut dyn Write) = match self {
            Transport::Tcp(r, w) => (r, w),
            Transport::Pipe(_, r, w) => (r, w),
        };
        w.write_all(request).and_then(|_| w.flush()).map_err(|e| io_err(e.into()))?;
        read_frame(&mut { r }).map_err(io_err)
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Transport::Pipe(child, ..) = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Provider living in another process, reached over TCP or a child
/// process's stdin/stdout.
pub struct External {
    transport: Transport,
    parameterization: Parameterization,
}

impl External {
    pub fn connect(address: &str, parameterization: Parameterization) -> Result<External> {
        Ok(External {
            transport: Transport::connect(address)?,
            parameterization,
        })
    }

    pub fn spawn(program: &str, args: &[String], parameterization: Parameterization) -> Result<External> {
        Ok(External {
            transport: Transport::spawn(program, args)?,
            parameterization,
        })
    }
}

impl ScoreProvider for External {
    fn kind(&self) -> ProviderKind {
        ProviderKind::External
    }

    fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    fn predict_raw(&mut self, q: &ScoreQuery, _schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let body = self.transport.exchange(&encode_request(q))?;
        if body.len() != q.len() * 4 {
            return Err(Error::Provider(format!(
                "external provider answered {} bytes, expected {}",
                body.len(),
                q.len() * 4
            )));
        }
        ByteReader::new(&body).f32s(q.len())
    }
}
