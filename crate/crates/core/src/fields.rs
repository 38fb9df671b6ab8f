//! Neural field decoders.
//!
//! The signed distance at `x` is `f_g(E(x), V(x))`: a frozen geometry MLP
//! over the positional encoding and the trilinearly sampled cost volume.
//! Color is `f_t'(h(x), x)`: a texture MLP over a multiresolution hash
//! encoding, sigmoid-bounded. A separate multi-view blending decoder
//! mirrors the pretrained-texture path that blends source-view colors.
//!
//! Every evaluation comes with a reverse pass so the renderer can push pixel
//! gradients into the volume data, the hash tables and the texture MLP.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::camera::Vec3;
use crate::costvolume::{Stencil, VoxelGrid};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{self, Activation, DenseLayer, Mlp, MlpTrace};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"GDFLD1";

/// NeRF-style frequency encoding. Output layout: the raw coordinates (when
/// `include_input`), then for each axis and level `k`: `sin(2^k π x)`,
/// `cos(2^k π x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositionalEncoding {
    pub levels: usize,
    pub include_input: bool,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        PositionalEncoding {
            levels: 6,
            include_input: true,
        }
    }
}

impl PositionalEncoding {
    pub fn output_dim(&self) -> usize {
        3 * (self.include_input as usize + 2 * self.levels)
    }

    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        self.encode_with_derivative(x).0
    }

    /// Encoding plus, per output entry, the derivative w.r.t. the single
    /// axis it depends on (`axes[i]`).
    pub fn encode_with_derivative(&self, x: &Vec3) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let n = self.output_dim();
        let mut out = Vec::with_capacity(n);
        let mut deriv = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        if self.include_input {
            for a in 0..3 {
                out.push(x[a]);
                deriv.push(1.0);
                axes.push(a);
            }
        }
        for a in 0..3 {
            for k in 0..self.levels {
                let f = (1u64 << k) as f64 * std::f64::consts::PI;
                let (s, c) = (f * x[a]).sin_cos();
                out.push(s);
                deriv.push(f * c);
                axes.push(a);
                out.push(c);
                deriv.push(-f * s);
                axes.push(a);
            }
        }
        (out, deriv, axes)
    }
}

pub fn positional_encode(x: &Vec3, enc: &PositionalEncoding) -> Vec<f64> {
    enc.encode(x)
}

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig {
            levels: 8,
            table_size: 1 << 14,
            features_per_level: 2,
            base_resolution: 16,
            growth_factor: 1.5,
        }
    }
}

impl HashConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 31 {
            return Err(config_err(format!("hash table size {} is not a power of two", self.table_size)));
        }
        if self.levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(config_err("hash levels, features and base resolution must be positive"));
        }
        if !(self.growth_factor > 1.0) {
            return Err(config_err("hash growth factor must exceed 1"));
        }
        Ok(())
    }
}

/// Multiresolution hash encoding with learnable tables, stored level-major:
/// `tables[(level·T + entry)·F + feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoding {
    pub config: HashConfig,
    pub tables: Vec<f64>,
}

/// Table offsets and trilinear weights touched by one hash lookup,
/// `8 × levels` entries, each addressing the first feature of an entry.
#[derive(Debug, Clone)]
pub struct HashStencil {
    pub offsets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl HashEncoding {
    pub fn zeros(config: HashConfig) -> Result<HashEncoding> {
        config.validate()?;
        Ok(HashEncoding {
            tables: vec![0.0; config.levels * config.table_size * config.features_per_level],
            config,
        })
    }

    /// Tables drawn uniformly from `[-scale, scale]`.
    pub fn random(config: HashConfig, scale: f64, rng: &mut impl Rng) -> Result<HashEncoding> {
        let mut h = HashEncoding::zeros(config)?;
        for v in &mut h.tables {
            *v = rng.random_range(-scale..=scale);
        }
        Ok(h)
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.features_per_level
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        let c = &self.config;
        (c.base_resolution as f64 * c.growth_factor.powi(level as i32)).floor() as usize
    }

    /// Table slot of integer grid corner `c`.
    pub fn hash(&self, c: [u32; 3]) -> usize {
        let h = (c[0].wrapping_mul(HASH_PRIMES[0]))
            ^ (c[1].wrapping_mul(HASH_PRIMES[1]))
            ^ (c[2].wrapping_mul(HASH_PRIMES[2]));
        (h as usize) & (self.config.table_size - 1)
    }

    pub fn stencil(&self, x: &Vec3) -> HashStencil {
        let c = &self.config;
        let mut offsets = Vec::with_capacity(8 * c.levels);
        let mut weights = Vec::with_capacity(8 * c.levels);
        for level in 0..c.levels {
            let res = self.level_resolution(level);
            let mut base = [0u32; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let g = x[a].clamp(0.0, 1.0) * res as f64;
                let b = (g.floor() as usize).min(res.saturating_sub(1));
                base[a] = b as u32;
                frac[a] = g - b as f64;
            }
            for corner in 0..8 {
                let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let cc = [base[0] + o[0] as u32, base[1] + o[1] as u32, base[2] + o[2] as u32];
                let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
                offsets.push((level * c.table_size + self.hash(cc)) * c.features_per_level);
                weights.push(w);
            }
        }
        HashStencil { offsets, weights }
    }

    pub fn encode_stencil(&self, st: &HashStencil) -> Vec<f64> {
        let f = self.config.features_per_level;
        let mut out = vec![0.0; self.output_dim()];
        for (i, (&off, &w)) in st.offsets.iter().zip(&st.weights).enumerate() {
            let level = i / 8;
            for k in 0..f {
                out[level * f + k] += w * self.tables[off + k];
            }
        }
        out
    }

    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        self.encode_stencil(&self.stencil(x))
    }

    /// Scatters `grad_out` (d loss / d encoding) into table-entry gradients.
    pub fn backward(&self, st: &HashStencil, grad_out: &[f64], grads: &mut SparseGrad) {
        let f = self.config.features_per_level;
        for (i, (&off, &w)) in st.offsets.iter().zip(&st.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let level = i / 8;
            for k in 0..f {
                let g = w * grad_out[level * f + k];
                if g != 0.0 {
                    grads.push(off + k, g);
                }
            }
        }
    }
}

pub fn hash_encode(x: &Vec3, hash: &HashEncoding) -> Vec<f64> {
    hash.encode(x)
}

/// Gradient over a large parameter block, stored as (index, value) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub entries: Vec<(usize, f64)>,
}

impl SparseGrad {
    pub fn push(&mut self, index: usize, value: f64) {
        self.entries.push((index, value));
    }

    pub fn extend(&mut self, other: &SparseGrad) {
        self.entries.extend_from_slice(&other.entries);
    }

    /// Sums duplicate indices in order of appearance and sorts by index.
    pub fn coalesce(&mut self) {
        self.entries.sort_by_key(|e| e.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(i, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => out.push((i, v)),
            }
        }
        self.entries = out;
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.entries.iter_mut().for_each(|e| e.1 *= k);
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut d = vec![0.0; len];
        for &(i, v) in &self.entries {
            d[i] += v;
        }
        d
    }
}

/// Geometry evaluation at one point, cached for reverse passes.
#[derive(Debug, Clone)]
pub struct SdfEval {
    pub value: f64,
    /// `∇_x s`, analytic through the encoding and the trilinear lookup.
    pub grad_x: Vec3,
    /// `∂s/∂V_c` at the query.
    pub grad_volume_features: Vec<f64>,
    pub stencil: Option<Stencil>,
}

#[derive(Debug, Clone)]
pub struct ColorEval {
    pub rgb: [f64; 3],
    hash_stencil: HashStencil,
    trace: MlpTrace,
}

/// Gradients w.r.t. the three trainable blocks of a [`FieldSet`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldGrads {
    pub volume: SparseGrad,
    pub hash: SparseGrad,
    pub texture: Vec<f64>,
}

impl FieldGrads {
    pub fn new(texture_params: usize) -> FieldGrads {
        FieldGrads {
            volume: SparseGrad::default(),
            hash: SparseGrad::default(),
            texture: vec![0.0; texture_params],
        }
    }

    pub fn accumulate(&mut self, other: &FieldGrads) {
        self.volume.extend(&other.volume);
        self.hash.extend(&other.hash);
        for (a, b) in self.texture.iter_mut().zip(&other.texture) {
            *a += b;
        }
    }

    pub fn coalesce(&mut self) {
        self.volume.coalesce();
        self.hash.coalesce();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryInit {
    /// Linear decoder producing a rounded blob from the lowest encoding
    /// frequency, nudged outward by cost-volume variance.
    BlobPrior,
    /// Seeded random softplus MLP.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoding: PositionalEncoding,
    pub hash: HashConfig,
    pub geometry_hidden: Vec<usize>,
    pub geometry_init: GeometryInit,
    pub texture_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: PositionalEncoding::default(),
            hash: HashConfig::default(),
            geometry_hidden: vec![64],
            geometry_init: GeometryInit::BlobPrior,
            texture_hidden: vec![32],
            seed: 0,
        }
    }
}

/// Parameter bundle defining the SDF and color fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub volume: VoxelGrid,
    pub geometry: Mlp,
    pub geometry_frozen: bool,
    pub hash: HashEncoding,
    pub texture: Mlp,
    pub encoding: PositionalEncoding,
}

impl FieldSet {
    pub fn new(volume: VoxelGrid, geometry: Mlp, hash: HashEncoding, texture: Mlp, encoding: PositionalEncoding) -> Result<FieldSet> {
        let fs = FieldSet {
            volume,
            geometry,
            geometry_frozen: true,
            hash,
            texture,
            encoding,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        let gin = self.encoding.output_dim() + self.volume.channels;
        if self.geometry.input_dim() != gin || self.geometry.output_dim() != 1 {
            return Err(shape_err(format!(
                "geometry decoder must map {gin} inputs to 1 output, has {} -> {}",
                self.geometry.input_dim(),
                self.geometry.output_dim()
            )));
        }
        let tin = self.hash.output_dim() + 3;
        if self.texture.input_dim() != tin || self.texture.output_dim() != 3 {
            return Err(shape_err(format!(
                "texture decoder must map {tin} inputs to 3 outputs, has {} -> {}",
                self.texture.input_dim(),
                self.texture.output_dim()
            )));
        }
        if self.texture.layers.last().unwrap().activation != Activation::Sigmoid {
            return Err(shape_err("texture decoder must end in a sigmoid"));
        }
        self.hash.config.validate()?;
        Ok(())
    }

    /// Builds a field around `volume` with freshly initialized decoders.
    pub fn from_volume(volume: VoxelGrid, config: &FieldConfig) -> Result<FieldSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = config.encoding;
        let gin = enc.output_dim() + volume.channels;
        let geometry = match config.geometry_init {
            GeometryInit::BlobPrior => blob_prior_decoder(&enc, volume.channels)?,
            GeometryInit::Random => {
                let mut widths = vec![gin];
                widths.extend(&config.geometry_hidden);
                widths.push(1);
                Mlp::random(&widths, Activation::Softplus, Activation::Identity, 1.0, &mut rng)?
            }
        };
        let hash = HashEncoding::random(config.hash, 1e-4, &mut rng)?;
        let mut widths = vec![hash.output_dim() + 3];
        widths.extend(&config.texture_hidden);
        widths.push(3);
        let texture = Mlp::random(&widths, Activation::Relu, Activation::Sigmoid, 1.0, &mut rng)?;
        FieldSet::new(volume, geometry, hash, texture, enc)
    }

    /// Field whose SDF is exactly the trilinear interpolant of `sdf` sampled
    /// on `spec`: the volume stores `sdf(x) - exterior` in one channel and
    /// the decoder adds `exterior` back, so space outside the lattice reads
    /// as `exterior`.
    pub fn passthrough_sdf(
        spec: crate::costvolume::GridSpec,
        sdf: impl Fn(&Vec3) -> f64,
        exterior: f64,
        texture: &FieldConfig,
    ) -> Result<FieldSet> {
        let volume = VoxelGrid::from_fn(spec, 1, |x| vec![sdf(x) - exterior])?;
        let mut fs = FieldSet::from_volume(volume, texture)?;
        let enc = fs.encoding;
        let mut layer = DenseLayer::zeros(enc.output_dim() + 1, 1, Activation::Identity);
        layer.weights[enc.output_dim()] = 1.0;
        layer.bias[0] = exterior;
        fs.geometry = Mlp::from_layers(vec![layer])?;
        Ok(fs)
    }

    /// Maps world coordinates into the unit cube spanned by the volume.
    pub fn normalize(&self, x: &Vec3) -> Vec3 {
        let (lo, hi) = self.volume.spec.bounds();
        Vec3::from_fn(|a, _| ((x[a] - lo[a]) / (hi[a] - lo[a])).clamp(0.0, 1.0))
    }

    fn geometry_input(&self, x: &Vec3) -> (Vec<f64>, Vec<f64>, Vec<usize>, Option<Stencil>) {
        let (mut input, deriv, axes) = self.encoding.encode_with_derivative(x);
        let stencil = self.volume.stencil(x);
        let mut feat = vec![0.0; self.volume.channels];
        if let Some(st) = &stencil {
            self.volume.apply_stencil(st, &mut feat);
        }
        input.extend_from_slice(&feat);
        (input, deriv, axes, stencil)
    }

    pub fn sdf(&self, x: &Vec3) -> f64 {
        let (input, ..) = self.geometry_input(x);
        self.geometry.forward(&input).expect("validated shapes")[0]
    }

    pub fn sdf_eval(&self, x: &Vec3) -> SdfEval {
        let (input, deriv, axes, stencil) = self.geometry_input(x);
        let trace = self.geometry.trace(&input).expect("validated shapes");
        let value = trace.output()[0];
        let g_in = self.geometry.backward(&trace, &[1.0], None);
        let ne = deriv.len();
        let mut grad_x = Vec3::zeros();
        for i in 0..ne {
            grad_x[axes[i]] += g_in[i] * deriv[i];
        }
        let grad_volume_features = g_in[ne..].to_vec();
        if let Some(st) = &stencil {
            let jac = self.volume.spatial_jacobian(st);
            for (gc, row) in grad_volume_features.iter().zip(&jac) {
                for a in 0..3 {
                    grad_x[a] += gc * row[a];
                }
            }
        }
        SdfEval {
            value,
            grad_x,
            grad_volume_features,
            stencil,
        }
    }

    /// Adds `upstream · ∂s/∂(volume data)` for a cached evaluation.
    pub fn sdf_backward(&self, eval: &SdfEval, upstream: f64, grads: &mut SparseGrad) {
        let Some(st) = &eval.stencil else { return };
        let c = self.volume.channels;
        for (v, w) in st.voxels.iter().zip(&st.weights) {
            if *w == 0.0 {
                continue;
            }
            for (ch, g) in eval.grad_volume_features.iter().enumerate() {
                let val = upstream * w * g;
                if val != 0.0 {
                    grads.push(v * c + ch, val);
                }
            }
        }
    }

    pub fn color(&self, x: &Vec3) -> [f64; 3] {
        self.color_eval(x).rgb
    }

    pub fn color_eval(&self, x: &Vec3) -> ColorEval {
        let xn = self.normalize(x);
        let hash_stencil = self.hash.stencil(&xn);
        let mut input = self.hash.encode_stencil(&hash_stencil);
        input.extend(xn.iter());
        let trace = self.texture.trace(&input).expect("validated shapes");
        let o = trace.output();
        ColorEval {
            rgb: [o[0], o[1], o[2]],
            hash_stencil,
            trace,
        }
    }

    /// Adds `upstream · ∂c/∂(hash, texture)` for a cached evaluation.
    pub fn color_backward(&self, eval: &ColorEval, upstream: [f64; 3], grads: &mut FieldGrads) {
        let g_in = self.texture.backward(&eval.trace, &upstream, Some(&mut grads.texture));
        self.hash.backward(&eval.hash_stencil, &g_in[..self.hash.output_dim()], &mut grads.hash);
    }

    pub fn texture_param_count(&self) -> usize {
        self.texture.param_count()
    }

    /// Applies `θ -= delta` for each block.
    pub fn apply_step(&mut self, volume: &SparseGrad, hash: &SparseGrad, texture: &[f64]) {
        for &(i, v) in &volume.entries {
            self.volume.data[i] -= v;
        }
        for &(i, v) in &hash.entries {
            self.hash.tables[i] -= v;
        }
        if !texture.is_empty() {
            let neg: Vec<f64> = texture.iter().map(|v| -v).collect();
            self.texture.add_to_params(&neg);
        }
    }

    pub fn geometry_checksum(&self) -> u64 {
        self.geometry.checksum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        binio::put_u32(&mut out, self.encoding.levels as u32);
        binio::put_u32(&mut out, self.encoding.include_input as u32);
        out.extend_from_slice(&self.volume.to_bytes());
        out.extend_from_slice(&nn::encode_bundle(&self.geometry.to_weight_layers()));
        out.extend_from_slice(&nn::encode_bundle(&self.texture.to_weight_layers()));
        let c = &self.hash.config;
        binio::put_u32(&mut out, c.levels as u32);
        binio::put_u32(&mut out, c.table_size as u32);
        binio::put_u32(&mut out, c.features_per_level as u32);
        binio::put_u32(&mut out, c.base_resolution as u32);
        binio::put_f32(&mut out, c.growth_factor as f32);
        binio::put_f32s(&mut out, self.hash.tables.iter().copied());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FieldSet> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let encoding = PositionalEncoding {
            levels: r.u32()? as usize,
            include_input: r.u32()? != 0,
        };
        let volume = VoxelGrid::read(&mut r)?;
        let geometry = Mlp::from_weight_layers(nn::read_bundle(&mut r)?)?;
        let texture = Mlp::from_weight_layers(nn::read_bundle(&mut r)?)?;
        let config = HashConfig {
            levels: r.u32()? as usize,
            table_size: r.u32()? as usize,
            features_per_level: r.u32()? as usize,
            base_resolution: r.u32()? as usize,
            growth_factor: r.f32()? as f64,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let tables = r.f32s(config.levels * config.table_size * config.features_per_level)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let hash = HashEncoding { config, tables };
        FieldSet::new(volume, geometry, hash, texture, encoding).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<FieldSet> {
        FieldSet::from_bytes(&binio::read_file(path)?).map_err(|e| e.at(path))
    }
}

fn blob_prior_decoder(enc: &PositionalEncoding, channels: usize) -> Result<Mlp> {
    if enc.levels == 0 {
        return Err(config_err("blob prior decoder needs at least one encoding level"));
    }
    let n = enc.output_dim() + channels;
    let mut layer = DenseLayer::zeros(n, 1, Activation::Identity);
    // s = 0.25·(1.5 − Σ_a cos(π x_a)) + (0.1 / C)·Σ_c V_c
    let base = if enc.include_input { 3 } else { 0 };
    for a in 0..3 {
        let cos0 = base + a * 2 * enc.levels + 1;
        layer.weights[cos0] = -0.25;
    }
    for c in 0..channels {
        layer.weights[enc.output_dim() + c] = 0.1 / channels as f64;
    }
    layer.bias[0] = 0.375;
    Mlp::from_layers(vec![layer])
}

pub fn decode_sdf(fields: &FieldSet, x: &Vec3) -> f64 {
    fields.sdf(x)
}

pub fn decode_color(fields: &FieldSet, x: &Vec3) -> [f64; 3] {
    fields.color(x)
}

/// What one source view contributes at a query point.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    /// Sampled 2D feature `P(F_i, x)`.
    pub feature: Vec<f64>,
    /// Sampled source-view color.
    pub color: [f64; 3],
    /// Query ray direction minus the source view's direction.
    pub direction_delta: Vec3,
}

/// Blending decoder over source views: one logit per view from
/// `(feature_i, V(x), Δd_i)`, softmax-weighted blend of view colors.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewTexture {
    pub blend: Mlp,
}

impl MultiViewTexture {
    pub fn new(blend: Mlp, feature_channels: usize, volume_channels: usize) -> Result<Self> {
        let want = feature_channels + volume_channels + 3;
        if blend.input_dim() != want || blend.output_dim() != 1 {
            return Err(shape_err(format!(
                "blend network must map {want} inputs to 1 logit, has {} -> {}",
                blend.input_dim(),
                blend.output_dim()
            )));
        }
        Ok(MultiViewTexture { blend })
    }

    pub fn logits(&self, volume_feature: &[f64], views: &[ViewSample]) -> Result<Vec<f64>> {
        views
            .iter()
            .map(|v| {
                let mut input = v.feature.clone();
                input.extend_from_slice(volume_feature);
                input.extend(v.direction_delta.iter());
                Ok(self.blend.forward(&input)?[0])
            })
            .collect()
    }
}

pub fn decode_color_mv(fields: &FieldSet, texture: &MultiViewTexture, x: &Vec3, views: &[ViewSample]) -> Result<[f64; 3]> {
    if views.is_empty() {
        return Err(shape_err("multi-view color needs at least one view"));
    }
    let vf = fields.volume.query(x);
    let logits = texture.logits(&vf, views)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut rgb = [0.0; 3];
    for (e, v) in exps.iter().zip(views) {
        for c in 0..3 {
            rgb[c] += e / z * v.color[c];
        }
    }
    Ok(rgb.map(|v| v.clamp(0.0, 1.0)))
}
