//! Variance cost volume: per-voxel feature variance across posed views,
//! regularized by a 3D convolution stack and queried trilinearly.
//!
//! File format (`GDVOL1`, little-endian): 6-byte magic, `u32` dims ×3,
//! `u32` channels, `f32` spacing, `f32` origin ×3, voxel data as `f32`
//! (voxel-major, channel-minor), then validity as `u16` per voxel.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::camera::{Camera, Vec3};
use crate::error::{config_err, shape_err, Error, Result};
use crate::features::FeatureMap;
use crate::nn::{self, WeightLayer};

pub const VOLUME_MAGIC: &[u8; 6] = b"GDVOL1";
pub const DEFAULT_RESOLUTION: usize = 150;

/// Placement of the voxel lattice. Voxel `(i, j, k)` is centered at
/// `origin + spacing·(i, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::cube(DEFAULT_RESOLUTION, 1.0)
    }
}

impl GridSpec {
    /// `resolution³` voxel centers spanning `[-half_extent, half_extent]³`.
    pub fn cube(resolution: usize, half_extent: f64) -> GridSpec {
        let spacing = 2.0 * half_extent / (resolution.max(2) - 1) as f64;
        GridSpec {
            dims: [resolution; 3],
            origin: [-half_extent; 3],
            spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(config_err(format!("grid dims must be >= 2, got {:?}", self.dims)));
        }
        if !(self.spacing > 0.0) {
            return Err(config_err(format!("grid spacing must be positive, got {}", self.spacing)));
        }
        if self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(config_err("grid dims too large"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + self.spacing * i as f64,
            self.origin[1] + self.spacing * j as f64,
            self.origin[2] + self.spacing * k as f64,
        )
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Axis-aligned bounds of the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = Vec3::from(self.origin);
        let hi = self.center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Number of views that saw each voxel.
    pub validity: Vec<u16>,
}

/// Eight-corner trilinear stencil: flat data offsets (first channel) and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub voxels: [usize; 8],
    pub weights: [f64; 8],
    /// d(weight)/d(x) per corner, world units.
    pub dweights: [[f64; 3]; 8],
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Result<VoxelGrid> {
        spec.validate()?;
        if channels == 0 {
            return Err(config_err("volume needs at least one channel"));
        }
        let n = spec.voxel_count();
        Ok(VoxelGrid {
            spec,
            channels,
            data: vec![0.0; n * channels],
            validity: vec![0; n],
        })
    }

    /// Fills channel values from a function of the voxel center; all voxels
    /// are marked valid.
    pub fn from_fn(spec: GridSpec, channels: usize, f: impl Fn(&Vec3) -> Vec<f64>) -> Result<VoxelGrid> {
        let mut g = VoxelGrid::zeros(spec, channels)?;
        for idx in 0..spec.voxel_count() {
            let [i, j, k] = spec.coords(idx);
            let v = f(&spec.center(i, j, k));
            if v.len() != channels {
                return Err(shape_err("field function returned wrong channel count"));
            }
            g.data[idx * channels..(idx + 1) * channels].copy_from_slice(&v);
            g.validity[idx] = u16::MAX;
        }
        Ok(g)
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn valid_fraction(&self) -> f64 {
        let n = self.validity.iter().filter(|&&v| v >= 2).count();
        n as f64 / self.validity.len() as f64
    }

    /// Trilinear stencil for `x`, or `None` outside the lattice.
    pub fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        let s = &self.spec;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let mut g = (x[a] - s.origin[a]) / s.spacing;
            // snap round-off so lattice points hit their voxel exactly
            if (g - g.round()).abs() <= 8.0 * f64::EPSILON * g.abs().max(1.0) {
                g = g.round();
            }
            let max = (s.dims[a] - 1) as f64;
            if !(g >= 0.0 && g <= max) {
                return None;
            }
            let b = (g.floor() as usize).min(s.dims[a] - 2);
            base[a] = b;
            frac[a] = g - b as f64;
        }
        let mut voxels = [0; 8];
        let mut weights = [0.0; 8];
        let mut dweights = [[0.0; 3]; 8];
        let inv = 1.0 / s.spacing;
        for c in 0..8 {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let w1 = |a: usize| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            let d1 = |a: usize| if o[a] == 1 { inv } else { -inv };
            voxels[c] = s.index(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
            let (wx, wy, wz) = (w1(0), w1(1), w1(2));
            weights[c] = wx * wy * wz;
            dweights[c] = [d1(0) * wy * wz, wx * d1(1) * wz, wx * wy * d1(2)];
        }
        Some(Stencil {
            voxels,
            weights,
            dweights,
        })
    }

    /// Trilinear lookup; zero outside the lattice.
    pub fn query(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        if let Some(st) = self.stencil(x) {
            self.apply_stencil(&st, &mut out);
        }
        out
    }

    pub fn apply_stencil(&self, st: &Stencil, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (v, w) in st.voxels.iter().zip(&st.weights) {
            if *w == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.voxel(*v)) {
                *o += w * d;
            }
        }
    }

    /// Spatial Jacobian `dV_c/dx_a`, row-major `channels × 3`.
    pub fn spatial_jacobian(&self, st: &Stencil) -> Vec<[f64; 3]> {
        let mut jac = vec![[0.0; 3]; self.channels];
        for (v, dw) in st.voxels.iter().zip(&st.dweights) {
            for (row, d) in jac.iter_mut().zip(self.voxel(*v)) {
                for a in 0..3 {
                    row[a] += dw[a] * d;
                }
            }
        }
        jac
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(42 + self.data.len() * 4 + self.validity.len() * 2);
        out.extend_from_slice(VOLUME_MAGIC);
        for d in s.dims {
            binio::put_u32(&mut out, d as u32);
        }
        binio::put_u32(&mut out, self.channels as u32);
        binio::put_f32(&mut out, s.spacing as f32);
        for o in s.origin {
            binio::put_f32(&mut out, o as f32);
        }
        binio::put_f32s(&mut out, self.data.iter().copied());
        for &v in &self.validity {
            binio::put_u16(&mut out, v);
        }
        out
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<VoxelGrid> {
        r.expect_magic(VOLUME_MAGIC)?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let channels = r.u32()? as usize;
        let spacing = r.f32()? as f64;
        let origin = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
        let spec = GridSpec { dims, origin, spacing };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(channels.max(1)).map(|_| n))
            .ok_or_else(|| Error::Format("volume dims overflow".into()))?;
        let data = r.f32s(n * channels)?;
        let validity = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        Ok(VoxelGrid {
            spec,
            channels,
            data,
            validity,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VoxelGrid> {
        let mut r = ByteReader::new(bytes);
        let g = VoxelGrid::read(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after volume".into()));
        }
        Ok(g)
    }
}

pub fn query_volume(grid: &VoxelGrid, x: &Vec3) -> Vec<f64> {
    grid.query(x)
}

pub fn save_volume(grid: &VoxelGrid, path: &Path) -> Result<()> {
    binio::write_atomic(path, &grid.to_bytes())
}

pub fn load_volume(path: &Path) -> Result<VoxelGrid> {
    VoxelGrid::from_bytes(&binio::read_file(path)?).map_err(|e| e.at(path))
}

/// Sorted-order population variance. Sorting makes the result bit-identical
/// under any permutation of the samples.
pub(crate) fn population_variance(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    if values.first() == values.last() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn aggregate_variance(maps: &[FeatureMap], cameras: &[Camera], spec: &GridSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    if maps.len() != cameras.len() {
        return Err(shape_err(format!(
            "{} feature maps but {} cameras",
            maps.len(),
            cameras.len()
        )));
    }
    if maps.len() < 2 {
        return Err(config_err(format!("variance aggregation needs >= 2 views, got {}", maps.len())));
    }
    if maps.len() > u16::MAX as usize {
        return Err(config_err("too many views"));
    }
    let channels = maps[0].channels;
    if maps.iter().any(|m| m.channels != channels) {
        return Err(shape_err("feature maps disagree on channel count"));
    }
    let n_vox = spec.voxel_count();
    let per_voxel: Vec<(Vec<f64>, u16)> = (0..n_vox)
        .into_par_iter()
        .map_init(
            || (vec![0.0; channels], Vec::with_capacity(maps.len() * channels)),
            |(sample, collected), idx| {
                let [i, j, k] = spec.coords(idx);
                let h = spec.center(i, j, k);
                collected.clear();
                let mut count = 0u16;
                for (map, cam) in maps.iter().zip(cameras) {
                    let p = cam.project(&h);
                    if !p.valid {
                        continue;
                    }
                    if map.sample_into(p.uv.x, p.uv.y, sample) {
                        collected.extend_from_slice(sample);
                        count += 1;
                    }
                }
                let mut var = vec![0.0; channels];
                if count >= 2 {
                    let mut column = Vec::with_capacity(count as usize);
                    for (c, out) in var.iter_mut().enumerate() {
                        column.clear();
                        column.extend(collected.iter().skip(c).step_by(channels).copied());
                        *out = population_variance(&mut column);
                    }
                }
                (var, count)
            },
        )
        .collect();
    let mut grid = VoxelGrid::zeros(*spec, channels)?;
    for (idx, (var, count)) in per_voxel.into_iter().enumerate() {
        grid.data[idx * channels..(idx + 1) * channels].copy_from_slice(&var);
        grid.validity[idx] = count;
    }
    Ok(grid)
}

/// 3×3×3 convolution stack; layer shapes `[out, in, 3, 3, 3]` with the
/// kernel indexed `[dz][dy][dx]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conv3DStack {
    pub layers: Vec<WeightLayer>,
}

impl Conv3DStack {
    pub fn new(layers: Vec<WeightLayer>) -> Result<Conv3DStack> {
        for l in &layers {
            nn::check_conv_layer(l, 5)?;
        }
        for w in layers.windows(2) {
            if w[0].out_channels() != w[1].in_channels() {
                return Err(shape_err(format!(
                    "conv3d plan broken: {} outputs feed {} inputs",
                    w[0].out_channels(),
                    w[1].in_channels()
                )));
            }
        }
        Ok(Conv3DStack { layers })
    }

    /// Single layer passing every channel through unchanged.
    pub fn identity(channels: usize) -> Conv3DStack {
        let mut weights = vec![0.0; channels * channels * 27];
        for c in 0..channels {
            weights[(c * channels + c) * 27 + 13] = 1.0;
        }
        Conv3DStack {
            layers: vec![WeightLayer {
                shape: vec![channels, channels, 3, 3, 3],
                activation: nn::Activation::Identity,
                weights,
                bias: vec![0.0; channels],
            }],
        }
    }

    pub fn load(path: &Path) -> Result<Conv3DStack> {
        let layers = nn::decode_bundle(&binio::read_file(path)?).map_err(|e| e.at(path))?;
        Conv3DStack::new(layers).map_err(|e| e.at(path))
    }

    pub fn output_channels(&self, input: usize) -> usize {
        self.layers.last().map_or(input, |l| l.out_channels())
    }
}

pub fn apply_conv3d(raw: &VoxelGrid, f3d: &Conv3DStack) -> Result<VoxelGrid> {
    let mut cur = raw.clone();
    for layer in &f3d.layers {
        cur = conv3d_layer(&cur, layer)?;
    }
    Ok(cur)
}

fn conv3d_layer(input: &VoxelGrid, layer: &WeightLayer) -> Result<VoxelGrid> {
    let (cout, cin) = (layer.out_channels(), layer.in_channels());
    if cin != input.channels {
        return Err(shape_err(format!(
            "conv3d layer expects {cin} channels, volume has {}",
            input.channels
        )));
    }
    let spec = input.spec;
    let [dx, dy, dz] = spec.dims;
    let data: Vec<f64> = (0..spec.voxel_count())
        .into_par_iter()
        .flat_map_iter(|idx| {
            let mut out = vec![0.0; cout];
            if input.validity[idx] == 0 {
                return out;
            }
            let [i, j, k] = spec.coords(idx);
            out.copy_from_slice(&layer.bias);
            for kz in 0..3 {
                let z = k as isize + kz as isize - 1;
                if z < 0 || z >= dz as isize {
                    continue;
                }
                for ky in 0..3 {
                    let y = j as isize + ky as isize - 1;
                    if y < 0 || y >= dy as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let x = i as isize + kx as isize - 1;
                        if x < 0 || x >= dx as isize {
                            continue;
                        }
                        let src = input.voxel(spec.index(x as usize, y as usize, z as usize));
                        let tap = (kz * 3 + ky) * 3 + kx;
                        for (o, ov) in out.iter_mut().enumerate() {
                            for (c, s) in src.iter().enumerate() {
                                *ov += layer.weights[(o * cin + c) * 27 + tap] * s;
                            }
                        }
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            out
        })
        .collect();
    Ok(VoxelGrid {
        spec,
        channels: cout,
        data,
        validity: input.validity.clone(),
    })
}
