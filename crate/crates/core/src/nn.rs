//! Small dense networks with hand-written reverse mode, and the `GDW1`
//! weight-bundle format shared by MLPs and convolution stacks.
//!
//! Bundle layout (little-endian): magic `GDW1`, `u32` layer count, then per
//! layer `u32` rank, `rank × u32` weight dims (first dim = output channels),
//! `u32` activation code, weights as `f32`, bias as `f32 × dims[0]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::error::{shape_err, Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GDW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Softplus => 2,
            Activation::Sigmoid => 3,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Softplus,
            3 => Activation::Sigmoid,
            _ => return Err(Error::Format(format!("unknown activation code {code}"))),
        })
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// One entry of a weight bundle. `weights` is row-major over `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLayer {
    pub shape: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl WeightLayer {
    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    fn check(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if self.shape.len() < 2 || self.weights.len() != n || self.bias.len() != self.shape[0] {
            return Err(shape_err(format!(
                "layer shape {:?} inconsistent with {} weights / {} biases",
                self.shape,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

pub fn encode_bundle(layers: &[WeightLayer]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    binio::put_u32(&mut out, layers.len() as u32);
    for l in layers {
        binio::put_u32(&mut out, l.shape.len() as u32);
        for &d in &l.shape {
            binio::put_u32(&mut out, d as u32);
        }
        binio::put_u32(&mut out, l.activation.code());
        binio::put_f32s(&mut out, l.weights.iter().copied());
        binio::put_f32s(&mut out, l.bias.iter().copied());
    }
    out
}

pub(crate) fn read_bundle(r: &mut ByteReader<'_>) -> Result<Vec<WeightLayer>> {
    r.expect_magic(WEIGHTS_MAGIC)?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if !(2..=5).contains(&rank) {
            return Err(Error::Format(format!("unsupported layer rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_code(r.u32()?)?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("layer too large".into()))?;
        let weights = r.f32s(n)?;
        let bias = r.f32s(shape[0])?;
        layers.push(WeightLayer {
            shape,
            activation,
            weights,
            bias,
        });
    }
    Ok(layers)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Vec<WeightLayer>> {
    let mut r = ByteReader::new(bytes);
    let layers = read_bundle(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after weight bundle".into()));
    }
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Multi-layer perceptron. Parameters are addressed as one flat vector:
/// for each layer, its weights then its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer pre- and post-activation values from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

impl Mlp {
    /// Builds a network with the given widths (`widths[0]` inputs), hidden
    /// activation on every layer but the last, and `output` on the last.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(shape_err(format!("invalid MLP widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::zeros(w[0], w[1], if i + 1 == n { output } else { hidden }))
            .collect();
        Ok(Mlp { layers })
    }

    /// Same as [`Mlp::new`] with Gaussian weights scaled by `gain / sqrt(fan_in)`.
    pub fn random(widths: &[usize], hidden: Activation, output: Activation, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Mlp::new(widths, hidden, output)?;
        for l in &mut mlp.layers {
            let std = gain / (l.inputs as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| shape_err(e.to_string()))?;
            for w in &mut l.weights {
                *w = dist.sample(rng);
            }
        }
        Ok(mlp)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("MLP needs at least one layer"));
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(shape_err("dense layer parameter count mismatch"));
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(shape_err(format!(
                    "layer chain mismatch: {} outputs feed {} inputs",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Adds `delta` elementwise to the flat parameter vector.
    pub fn add_to_params(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.param_count());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w += delta[k];
                k += 1;
            }
        }
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the f64 bit patterns
        let mut h: u64 = 0xcbf29ce484222325;
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.post.pop().unwrap())
    }

    pub fn trace(&self, input: &[f64]) -> Result<MlpTrace> {
        if input.len() != self.input_dim() {
            return Err(shape_err(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = post.last().map(|v| v.as_slice()).unwrap_or(input);
            let z: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    row.iter().zip(x).fold(l.bias[o], |acc, (w, xi)| acc + w * xi)
                })
                .collect();
            let y = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            post.push(y);
        }
        Ok(MlpTrace {
            input: input.to_vec(),
            pre,
            post,
        })
    }

    /// Reverse pass. Returns the gradient w.r.t. the input; when
    /// `param_grad` is given, accumulates the parameter gradient into it
    /// (flat layout, see [`Mlp::params`]).
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut g: Vec<f64> = grad_out.to_vec();
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.param_count();
                Some(o)
            })
            .collect();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let x = if li == 0 { &trace.input } else { &trace.post[li - 1] };
            let dz: Vec<f64> = (0..l.outputs)
                .map(|o| g[o] * l.activation.derivative(trace.pre[li][o], trace.post[li][o]))
                .collect();
            if let Some(pg) = param_grad.as_deref_mut() {
                let base = offsets[li];
                for o in 0..l.outputs {
                    if dz[o] == 0.0 {
                        continue;
                    }
                    let row = &mut pg[base + o * l.inputs..base + (o + 1) * l.inputs];
                    for (r, xi) in row.iter_mut().zip(x) {
                        *r += dz[o] * xi;
                    }
                    pg[base + l.weights.len() + o] += dz[o];
                }
            }
            let mut gx = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                if dz[o] == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                for (gi, w) in gx.iter_mut().zip(row) {
                    *gi += dz[o] * w;
                }
            }
            g = gx;
        }
        g
    }

    /// Forward-mode directional derivative of the output along `dir` in input space.
    pub fn directional(&self, trace: &MlpTrace, dir: &[f64]) -> Vec<f64> {
        let mut d = dir.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            d = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    let dz: f64 = row.iter().zip(&d).map(|(w, di)| w * di).sum();
                    dz * l.activation.derivative(trace.pre[li][o], trace.post[li][o])
                })
                .collect();
        }
        d
    }

    pub fn to_weight_layers(&self) -> Vec<WeightLayer> {
        self.layers
            .iter()
            .map(|l| WeightLayer {
                shape: vec![l.outputs, l.inputs],
                activation: l.activation,
                weights: l.weights.clone(),
                bias: l.bias.clone(),
            })
            .collect()
    }

    pub fn from_weight_layers(layers: Vec<WeightLayer>) -> Result<Self> {
        let dense = layers
            .into_iter()
            .map(|w| {
                w.check()?;
                if w.shape.len() != 2 {
                    return Err(shape_err(format!("dense layer must be rank 2, got {:?}", w.shape)));
                }
                Ok(DenseLayer {
                    inputs: w.shape[1],
                    outputs: w.shape[0],
                    weights: w.weights,
                    bias: w.bias,
                    activation: w.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(dense)
    }
}

pub(crate) fn check_conv_layer(w: &WeightLayer, rank: usize) -> Result<()> {
    w.check()?;
    if w.shape.len() != rank || w.shape[2..].iter().any(|&k| k != 3) {
        return Err(shape_err(format!(
            "convolution layer must have shape [out, in{}], got {:?}",
            ", 3".repeat(rank - 2),
            w.shape
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_input_grad(mlp: &Mlp, x: &[f64], out: usize, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (mlp.forward(&a).unwrap()[out] - mlp.forward(&b).unwrap()[out]) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::random(&[4, 7, 3], Activation::Softplus, Activation::Sigmoid, 1.5, &mut rng).unwrap();
        let x = [0.3, -0.8, 1.1, 0.05];
        let tr = mlp.trace(&x).unwrap();
        let mut pg = vec![0.0; mlp.param_count()];
        let gx = mlp.backward(&tr, &[0.0, 1.0, 0.0], Some(&mut pg));
        let fd = fd_input_grad(&mlp, &x, 1, 1e-6);
        for (a, b) in gx.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        for k in [0, 5, 20, mlp.param_count() - 1] {
            let mut p = mlp.clone();
            *p.param_mut(k) += 1e-6;
            let up = p.forward(&x).unwrap()[1];
            *p.param_mut(k) -= 2e-6;
            let dn = p.forward(&x).unwrap()[1];
            assert!((pg[k] - (up - dn) / 2e-6).abs() < 1e-8);
        }
        let dir = [1.0, 0.0, -2.0, 0.5];
        let dd = mlp.directional(&tr, &dir)[1];
        let expect: f64 = fd.iter().zip(&dir).map(|(g, d)| g * d).sum();
        assert!((dd - expect).abs() < 1e-8);
    }

    #[test]
    fn bundle_round_trip_and_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::random(&[3, 4, 2], Activation::Relu, Activation::Identity, 1.0, &mut rng).unwrap();
        let bytes = encode_bundle(&mlp.to_weight_layers());
        let back = Mlp::from_weight_layers(decode_bundle(&bytes).unwrap()).unwrap();
        // f32 storage: a second round trip is exact
        assert_eq!(encode_bundle(&back.to_weight_layers()), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bundle(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_bundle(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
    }
}
