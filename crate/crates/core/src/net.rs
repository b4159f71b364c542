//! Fully connected network `g(t, x; θ)` and its first-order expansion.
//!
//! The input vector is `[t, x_1, ..., x_p]`. Parameters live in one flat
//! vector; for each layer in order it holds the weight matrix row-major
//! (`fan_out × fan_in`, row `j` feeds output unit `j`) followed by the bias
//! vector. Hidden layers use the configured activation, the scalar output is
//! linear.
//!
//! The ReLU derivative at exactly zero is taken as 0.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::numkit::RngStream;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("malformed parameter block: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One layer's parameters in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activation: Activation,
}

impl MlpModel {
    /// `sizes` runs from the input width to the output width, which must be 1.
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self, NetError> {
        if sizes.len() < 2 {
            return Err(NetError::Architecture("need at least an input and an output layer".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(NetError::Architecture("layer widths must be positive".into()));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(NetError::Architecture("output width must be 1".into()));
        }
        Ok(Self { sizes, activation })
    }

    /// `p + 1 → hidden... → 1` with ReLU hidden units.
    pub fn with_hidden(n_covariates: usize, hidden: &[usize]) -> Result<Self, NetError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(n_covariates + 1);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(sizes, Activation::Relu)
    }

    /// Two hidden layers of 16 units.
    pub fn default_for(n_covariates: usize) -> Self {
        Self::with_hidden(n_covariates, &[16, 16]).expect("default architecture is valid")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), NetError> {
        let m = self.n_params();
        if theta.len() != m {
            return Err(NetError::DimensionMismatch { what: "parameter vector", expected: m, got: theta.len() });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NetError> {
        if input.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Output for the input `[t, x...]`.
    pub fn forward(&self, input: &[f64], theta: &[f64]) -> Result<f64, NetError> {
        self.check_input(input)?;
        self.check_theta(theta)?;
        Ok(self.forward_unchecked(input, theta))
    }

    pub fn forward_tx(&self, t: f64, x: &[f64], theta: &[f64]) -> Result<f64, NetError> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.push(t);
        input.extend_from_slice(x);
        self.forward(&input, theta)
    }

    fn forward_unchecked(&self, input: &[f64], theta: &[f64]) -> f64 {
        let n_layers = self.sizes.len() - 1;
        let mut a = input.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = &theta[off..off + fi * fo];
            let b = &theta[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let mut z = vec![0.0; fo];
            for j in 0..fo {
                z[j] = b[j] + dot(&w[j * fi..(j + 1) * fi], &a);
            }
            if l + 1 < n_layers {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            a = z;
        }
        a[0]
    }

    /// Output and gradient with respect to θ, in the flat layout.
    pub fn jacobian(&self, input: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>), NetError> {
        self.check_input(input)?;
        self.check_theta(theta)?;
        let mut grad = vec![0.0; theta.len()];
        let g = self.jacobian_into(input, theta, &mut grad);
        Ok((g, grad))
    }

    /// Writes ∂g/∂θ into `grad` and returns g. Dimensions are not checked.
    pub(crate) fn jacobian_into(&self, input: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        // acts[l] is the input to layer l; pre[l] its pre-activation output.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            offsets.push(off);
            let w = &theta[off..off + fi * fo];
            let b = &theta[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let a = &acts[l];
            let z: Vec<f64> = (0..fo).map(|j| b[j] + dot(&w[j * fi..(j + 1) * fi], a)).collect();
            let next = if l + 1 < n_layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(next);
        }
        let out = acts[n_layers][0];

        let mut delta = vec![1.0];
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let a = &acts[l];
            for j in 0..fo {
                let row = &mut grad[off + j * fi..off + (j + 1) * fi];
                for (r, &ak) in row.iter_mut().zip(a) {
                    *r = delta[j] * ak;
                }
                grad[off + fi * fo + j] = delta[j];
            }
            if l > 0 {
                let w = &theta[off..off + fi * fo];
                let mut back = vec![0.0; fi];
                for j in 0..fo {
                    if delta[j] != 0.0 {
                        for (bk, &wk) in back.iter_mut().zip(&w[j * fi..(j + 1) * fi]) {
                            *bk += delta[j] * wk;
                        }
                    }
                }
                for (bk, &zk) in back.iter_mut().zip(&pre[l - 1]) {
                    *bk *= self.activation.derivative(zk);
                }
                delta = back;
            }
        }
        out
    }

    /// Outputs at stacked inputs (`input_dim` values each).
    pub fn outputs(&self, inputs: &[f64], theta: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        exec::map_indexed(inputs.len() / d, |p| self.forward_unchecked(&inputs[p * d..(p + 1) * d], theta))
    }

    /// Gradient of Σ_p c_p g_p with respect to θ.
    pub fn weighted_gradient(&self, inputs: &[f64], theta: &[f64], coef: &[f64]) -> Vec<f64> {
        self.outputs_and_gradient(inputs, theta, |p, _| coef[p]).1
    }

    /// Outputs `g_p` at stacked inputs together with Σ_p c(p, g_p) ∂g_p/∂θ.
    ///
    /// Partial sums are formed over fixed chunks and added in chunk order, so
    /// the result does not depend on the thread count.
    pub fn outputs_and_gradient<C>(&self, inputs: &[f64], theta: &[f64], coef: C) -> (Vec<f64>, Vec<f64>)
    where
        C: Fn(usize, f64) -> f64 + Sync,
    {
        let d = self.input_dim();
        let m = self.n_params();
        let n = inputs.len() / d;
        const CHUNK: usize = 128;
        let partial = exec::map_indexed(n.div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc = vec![0.0; m];
            let mut buf = vec![0.0; m];
            let mut outs = Vec::with_capacity(hi - lo);
            for p in lo..hi {
                let g = self.jacobian_into(&inputs[p * d..(p + 1) * d], theta, &mut buf);
                outs.push(g);
                let w = coef(p, g);
                if w != 0.0 {
                    for (a, &b) in acc.iter_mut().zip(&buf) {
                        *a += w * b;
                    }
                }
            }
            (outs, acc)
        });
        let mut outs = Vec::with_capacity(n);
        let mut total = vec![0.0; m];
        for (o, acc) in partial {
            outs.extend(o);
            for (t, a) in total.iter_mut().zip(acc) {
                *t += a;
            }
        }
        (outs, total)
    }

    /// He-style Gaussian draw: weights N(0, scale²·2/fan_in), biases zero.
    pub fn init_params(&self, rng: &mut RngStream, scale: f64) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.n_params());
        for w in self.sizes.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let sd = scale * (2.0 / fi as f64).sqrt();
            theta.extend((0..fi * fo).map(|_| sd * rng.standard_normal()));
            theta.extend(std::iter::repeat_n(0.0, fo));
        }
        theta
    }

    pub fn unflatten(&self, theta: &[f64]) -> Result<Vec<Layer>, NetError> {
        self.check_theta(theta)?;
        let mut off = 0;
        Ok(self
            .sizes
            .windows(2)
            .map(|w| {
                let (fi, fo) = (w[0], w[1]);
                let weights = DMatrix::from_row_slice(fo, fi, &theta[off..off + fi * fo]);
                let bias = DVector::from_column_slice(&theta[off + fi * fo..off + fi * fo + fo]);
                off += fi * fo + fo;
                Layer { weights, bias }
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<Vec<f64>, NetError> {
        if layers.len() != self.sizes.len() - 1 {
            return Err(NetError::DimensionMismatch {
                what: "layer count",
                expected: self.sizes.len() - 1,
                got: layers.len(),
            });
        }
        let mut theta = Vec::with_capacity(self.n_params());
        for (layer, w) in layers.iter().zip(self.sizes.windows(2)) {
            if layer.weights.shape() != (w[1], w[0]) || layer.bias.len() != w[1] {
                return Err(NetError::Architecture("layer shape does not match the model".into()));
            }
            for j in 0..w[1] {
                theta.extend(layer.weights.row(j).iter());
            }
            theta.extend(layer.bias.iter());
        }
        Ok(theta)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const PARAM_MAGIC: &[u8; 8] = b"NSRVPRM1";

/// Architecture plus a flat parameter vector, for storage.
///
/// Binary layout (little-endian): the 8-byte magic `NSRVPRM1`, `u32`
/// activation tag (0 = ReLU, 1 = identity), `u32` number of layer sizes,
/// that many `u64` sizes, `u64` parameter count, then the `f64` parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub model: MlpModel,
    pub theta: Vec<f64>,
}

impl ParamBlock {
    pub fn new(model: MlpModel, theta: Vec<f64>) -> Result<Self, NetError> {
        model.check_theta(&theta)?;
        Ok(Self { model, theta })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * (self.model.sizes.len() + self.theta.len()));
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&self.model.activation.tag().to_le_bytes());
        out.extend_from_slice(&(self.model.sizes.len() as u32).to_le_bytes());
        for &s in &self.model.sizes {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| NetError::Format("truncated header".into()))?;
        if &magic != PARAM_MAGIC {
            return Err(NetError::Format("bad magic".into()));
        }
        let tag = read_u32(&mut r)?;
        let activation = Activation::from_tag(tag).ok_or_else(|| NetError::Format(format!("unknown activation {tag}")))?;
        let n_sizes = read_u32(&mut r)? as usize;
        if n_sizes > 1024 {
            return Err(NetError::Format(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes).map(|_| read_u64(&mut r).map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        let model = MlpModel::new(sizes, activation)?;
        let m = read_u64(&mut r)? as usize;
        if m != model.n_params() {
            return Err(NetError::Format(format!("parameter count {m} does not match architecture")));
        }
        if r.len() != 8 * m {
            return Err(NetError::Format(format!("expected {} parameter bytes, found {}", 8 * m, r.len())));
        }
        let theta = r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { model, theta })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), NetError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, NetError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| NetError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, NetError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| NetError::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// `g^lin(θ) = g(θ_MAP) + J(θ_MAP)ᵀ(θ − θ_MAP)` at a fixed set of inputs.
///
/// The Jacobian is stored as an `m × P` matrix whose column `p` is the
/// gradient at input `p`.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    model: MlpModel,
    theta_map: DVector<f64>,
    g: DVector<f64>,
    jac: DMatrix<f64>,
}

impl LinearizedModel {
    /// Expands around `theta_map` at the stacked inputs (`input_dim` values each).
    pub fn linearize(model: &MlpModel, theta_map: &[f64], inputs: &[f64]) -> Result<Self, NetError> {
        model.check_theta(theta_map)?;
        let d = model.input_dim();
        if inputs.len() % d != 0 {
            return Err(NetError::DimensionMismatch {
                what: "stacked inputs",
                expected: inputs.len().div_ceil(d) * d,
                got: inputs.len(),
            });
        }
        if theta_map.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Format("expansion point has non-finite entries".into()));
        }
        let n = inputs.len() / d;
        let m = model.n_params();
        let cols = exec::map_indexed(n, |p| {
            let mut grad = vec![0.0; m];
            let g = model.jacobian_into(&inputs[p * d..(p + 1) * d], theta_map, &mut grad);
            (g, grad)
        });
        let g = DVector::from_iterator(n, cols.iter().map(|c| c.0));
        let jac = DMatrix::from_iterator(m, n, cols.into_iter().flat_map(|c| c.1));
        Ok(Self { model: model.clone(), theta_map: DVector::from_column_slice(theta_map), g, jac })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn theta_map(&self) -> &DVector<f64> {
        &self.theta_map
    }

    pub fn g_map(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jac
    }

    pub fn n_points(&self) -> usize {
        self.g.len()
    }

    pub fn n_params(&self) -> usize {
        self.theta_map.len()
    }

    /// g^lin at every cached input.
    pub fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        let d = theta - &self.theta_map;
        &self.g + self.jac.tr_mul(&d)
    }

    /// g^lin at cached input `p`.
    pub fn eval_at(&self, p: usize, theta: &DVector<f64>) -> f64 {
        let col = self.jac.column(p);
        self.g[p] + col.iter().zip(theta.iter().zip(self.theta_map.iter())).map(|(j, (t, t0))| j * (t - t0)).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpModel {
        MlpModel::new(vec![3, 4, 5, 1], Activation::Relu).unwrap()
    }

    // Straight matrix-vector oracle using nalgebra.
    fn oracle(model: &MlpModel, input: &[f64], theta: &[f64]) -> f64 {
        let layers = model.unflatten(theta).unwrap();
        let mut a = DVector::from_column_slice(input);
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let z = &layer.weights * &a + &layer.bias;
            a = if l < last { z.map(|v| v.max(0.0)) } else { z };
        }
        a[0]
    }

    #[test]
    fn parameter_count() {
        assert_eq!(small().n_params(), 3 * 4 + 4 + 4 * 5 + 5 + 5 + 1);
        assert_eq!(MlpModel::default_for(4).n_params(), 5 * 16 + 16 + 16 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn zero_parameters() {
        let m = MlpModel::default_for(4);
        let theta = vec![0.0; m.n_params()];
        let input = [0.3, 1.0, -2.0, 0.5, 0.1];
        let (g, grad) = m.jacobian(&input, &theta).unwrap();
        assert_eq!(g, 0.0);
        let last = m.n_params() - 1;
        for (j, v) in grad.iter().enumerate() {
            assert_eq!(*v, if j == last { 1.0 } else { 0.0 });
        }
        let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(norm, 1.0);
    }

    #[test]
    fn matches_matrix_oracle() {
        let m = MlpModel::default_for(4);
        let mut rng = RngStream::new(11);
        let theta = m.init_params(&mut rng, 1.0);
        let theta: Vec<f64> = theta.iter().map(|v| v + 0.1 * rng.standard_normal()).collect();
        for _ in 0..50 {
            let input: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
            let a = m.forward(&input, &theta).unwrap();
            let b = oracle(&m, &input, &theta);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            let (g, _) = m.jacobian(&input, &theta).unwrap();
            assert_eq!(g.to_bits(), a.to_bits());
        }
    }

    #[test]
    fn linear_last_layer_scaling() {
        let m = MlpModel::new(vec![2, 3, 1], Activation::Identity).unwrap();
        let mut rng = RngStream::new(5);
        let theta: Vec<f64> = (0..m.n_params()).map(|_| rng.standard_normal()).collect();
        let mut layers = m.unflatten(&theta).unwrap();
        let input = [0.4, -1.3];
        let base = m.forward(&input, &theta).unwrap();
        layers[1].weights *= 2.5;
        layers[1].bias *= 2.5;
        let scaled = m.forward(&input, &m.flatten(&layers).unwrap()).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = MlpModel::default_for(4);
        let mut rng = RngStream::new(21);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let theta: Vec<f64> = m.init_params(&mut rng, 1.0).iter().map(|v| v + 0.2 * rng.standard_normal()).collect();
            let mut input = vec![rng.uniform()];
            input.extend((0..4).map(|_| rng.standard_normal()));
            // Skip draws with a hidden pre-activation near a kink.
            if near_kink(&m, &input, &theta, 1e-3) {
                continue;
            }
            let (_, grad) = m.jacobian(&input, &theta).unwrap();
            let mut tp = theta.clone();
            for j in 0..theta.len() {
                tp[j] = theta[j] + h;
                let up = m.forward(&input, &tp).unwrap();
                tp[j] = theta[j] - h;
                let dn = m.forward(&input, &tp).unwrap();
                tp[j] = theta[j];
                let fd = (up - dn) / (2.0 * h);
                let tol = f64::max(1e-6, 1e-4 * grad[j].abs());
                assert!((fd - grad[j]).abs() <= tol, "entry {j}: fd {fd} vs {}", grad[j]);
            }
            checked += 1;
        }
    }

    fn near_kink(m: &MlpModel, input: &[f64], theta: &[f64], eps: f64) -> bool {
        let layers = m.unflatten(theta).unwrap();
        let mut a = DVector::from_column_slice(input);
        for layer in &layers[..layers.len() - 1] {
            let z = &layer.weights * &a + &layer.bias;
            if z.iter().any(|v| v.abs() < eps) {
                return true;
            }
            a = z.map(|v| v.max(0.0));
        }
        false
    }

    #[test]
    fn weighted_gradient_matches_sum() {
        let m = small();
        let mut rng = RngStream::new(3);
        let theta = m.init_params(&mut rng, 1.0);
        let n = 600;
        let inputs: Vec<f64> = (0..n * 3).map(|_| rng.standard_normal()).collect();
        let coef: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let got = m.weighted_gradient(&inputs, &theta, &coef);
        let mut want = vec![0.0; m.n_params()];
        for p in 0..n {
            let (_, g) = m.jacobian(&inputs[p * 3..p * 3 + 3], &theta).unwrap();
            for j in 0..want.len() {
                want[j] += coef[p] * g[j];
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let outs = m.outputs(&inputs, &theta);
        assert_eq!(outs[7], m.forward(&inputs[21..24], &theta).unwrap());
    }

    #[test]
    fn dimension_errors() {
        let m = small();
        assert!(matches!(m.forward(&[1.0, 2.0], &vec![0.0; m.n_params()]), Err(NetError::DimensionMismatch { .. })));
        assert!(matches!(m.forward(&[1.0, 2.0, 3.0], &[0.0; 3]), Err(NetError::DimensionMismatch { .. })));
        assert!(MlpModel::new(vec![3, 2], Activation::Relu).is_err());
        assert!(MlpModel::new(vec![3], Activation::Relu).is_err());
    }

    #[test]
    fn param_block_round_trip() {
        let m = MlpModel::default_for(4);
        let mut rng = RngStream::new(8);
        let theta = m.init_params(&mut rng, 1.0);
        let block = ParamBlock::new(m, theta.clone()).unwrap();
        let back = ParamBlock::from_bytes(&block.to_bytes()).unwrap();
        assert_eq!(back, block);
        let json = serde_json::to_string(&block).unwrap();
        let back: ParamBlock = serde_json::from_str(&json).unwrap();
        assert!(back.theta.iter().zip(&theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut bytes = block.to_bytes();
        bytes.pop();
        assert!(ParamBlock::from_bytes(&bytes).is_err());
        assert!(ParamBlock::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn linearization_identities() {
        let m = MlpModel::default_for(2);
        let mut rng = RngStream::new(13);
        let theta = m.init_params(&mut rng, 1.0);
        let inputs: Vec<f64> = (0..40 * 3).map(|_| rng.standard_normal()).collect();
        let lin = LinearizedModel::linearize(&m, &theta, &inputs).unwrap();
        let t0 = DVector::from_column_slice(&theta);
        let at_map = lin.eval(&t0);
        for p in 0..40 {
            assert_eq!(at_map[p].to_bits(), lin.g_map()[p].to_bits());
            assert_eq!(lin.g_map()[p], m.forward(&inputs[p * 3..p * 3 + 3], &theta).unwrap());
        }
        let j = 17;
        let eps = 0.25;
        let mut t1 = t0.clone();
        t1[j] += eps;
        let moved = lin.eval(&t1);
        for p in 0..40 {
            assert!((moved[p] - at_map[p] - eps * lin.jacobian()[(j, p)]).abs() < 1e-12);
            assert!((lin.eval_at(p, &t1) - moved[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn linearization_gap_small_near_map() {
        let m = MlpModel::default_for(4);
        let mut rng = RngStream::new(17);
        let theta = m.init_params(&mut rng, 1.0);
        let mut inputs = Vec::new();
        for _ in 0..200 {
            inputs.push(rng.uniform());
            inputs.extend((0..4).map(|_| rng.standard_normal()));
        }
        let lin = LinearizedModel::linearize(&m, &theta, &inputs).unwrap();
        let mut dir: Vec<f64> = (0..theta.len()).map(|_| rng.standard_normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v *= 0.01 / norm);
        let moved: Vec<f64> = theta.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let glin = lin.eval(&DVector::from_column_slice(&moved));
        for p in 0..200 {
            let exact = m.forward(&inputs[p * 5..p * 5 + 5], &moved).unwrap();
            assert!((glin[p] - exact).abs() < 1e-3);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flatten_round_trip(seed in any::<u64>()) {
                let m = MlpModel::default_for(3);
                let mut rng = RngStream::new(seed);
                let theta: Vec<f64> = (0..m.n_params()).map(|_| rng.standard_normal() * 1e3).collect();
                let back = m.flatten(&m.unflatten(&theta).unwrap()).unwrap();
                prop_assert!(back.iter().zip(&theta).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
}
