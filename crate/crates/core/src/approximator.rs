//! Small fully-connected networks with hand-written reverse-mode gradients,
//! an Adam optimizer, and a central-difference gradient checker.
//!
//! Parameters live in one flat vector. Layers are stored in order; each layer
//! contributes its weight matrix (row-major, `out x in`) followed by its bias.

use std::ops::{Deref, DerefMut};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        output_dim: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_layers,
            output_dim,
            hidden_activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_layers {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer == self.hidden_layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Same architecture with a different output squashing; the parameter
    /// layout is unchanged, so the same `ParamVector` can be reused.
    pub fn with_output_activation(&self, act: Activation) -> Self {
        Self {
            output_activation: act,
            ..self.clone()
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases likewise.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector(values)
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector(vec![0.0; self.param_count()])
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let n = self.param_count();
        if params.len() != n {
            return Err(Error::dims("parameter vector", n, params.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self <- self + scale * other`
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Activations recorded by a batched forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// `layers[0]` is the input; `layers[l + 1]` is the output of layer `l`.
    layers: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Row-major `batch x output_dim` network output.
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Forward pass over `inputs`, a row-major `batch x input_dim` block.
pub fn forward_batch(spec: &MlpSpec, params: &[f64], inputs: &[f64]) -> Result<Tape> {
    spec.check_params(params)?;
    if !inputs.len().is_multiple_of(spec.input_dim) {
        return Err(Error::dims("batched input", spec.input_dim, inputs.len()));
    }
    let batch = inputs.len() / spec.input_dim;
    let mut layers = Vec::with_capacity(spec.hidden_layers.len() + 2);
    layers.push(inputs.to_vec());
    let mut offset = 0;
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let act = spec.activation(l);
        let mut y: Vec<f64> = (0..batch).flat_map(|_| b.iter().copied()).collect();
        // y <- x w^T + y
        // SAFETY: every buffer holds exactly the rows and columns passed with it.
        unsafe {
            matrixmultiply::dgemm(
                batch, fan_in, fan_out, 1.0,
                layers[l].as_ptr(), fan_in as isize, 1,
                w.as_ptr(), 1, fan_in as isize,
                1.0,
                y.as_mut_ptr(), fan_out as isize, 1,
            );
        }
        for v in &mut y {
            *v = act.apply(*v);
        }
        layers.push(y);
    }
    Ok(Tape { batch, layers })
}

/// Reverse pass. `upstream` is `d loss / d output`, row-major `batch x output_dim`.
///
/// Returns the parameter gradient summed over the batch and the per-row input gradient.
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    tape: &Tape,
    upstream: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    spec.check_params(params)?;
    let batch = tape.batch;
    if upstream.len() != batch * spec.output_dim {
        return Err(Error::dims(
            "upstream gradient",
            batch * spec.output_dim,
            upstream.len(),
        ));
    }
    let dims = spec.layer_dims();
    let mut grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &(i, o) in &dims {
        offsets.push(offset);
        offset += i * o + o;
    }

    let mut delta = upstream.to_vec();
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let act = spec.activation(l);
        let y = &tape.layers[l + 1];
        for (d, &yv) in delta.iter_mut().zip(y) {
            *d *= act.derivative_from_output(yv);
        }
        let x = &tape.layers[l];
        let base = offsets[l];
        let (gw, gb) = grad[base..base + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
        let w = &params[base..base + fan_in * fan_out];
        for (o, g) in gb.iter_mut().enumerate() {
            *g = (0..batch).map(|i| delta[i * fan_out + o]).sum();
        }
        let mut next = vec![0.0; batch * fan_in];
        // gw <- delta^T x, next <- delta w
        // SAFETY: as in the forward pass.
        unsafe {
            matrixmultiply::dgemm(
                fan_out, batch, fan_in, 1.0,
                delta.as_ptr(), 1, fan_out as isize,
                x.as_ptr(), fan_in as isize, 1,
                0.0,
                gw.as_mut_ptr(), fan_in as isize, 1,
            );
            matrixmultiply::dgemm(
                batch, fan_out, fan_in, 1.0,
                delta.as_ptr(), fan_out as isize, 1,
                w.as_ptr(), fan_in as isize, 1,
                0.0,
                next.as_mut_ptr(), fan_in as isize, 1,
            );
        }
        delta = next;
    }
    Ok((ParamVector(grad), delta))
}

/// Single-input forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim {
        return Err(Error::dims("network input", spec.input_dim, input.len()));
    }
    Ok(forward_batch(spec, params, input)?.layers.pop().unwrap_or_default())
}

/// Gradients of `<upstream, f(input)>` with respect to the parameters and the input.
pub fn mlp_gradient(
    spec: &MlpSpec,
    params: &[f64],
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    if input.len() != spec.input_dim {
        return Err(Error::dims("network input", spec.input_dim, input.len()));
    }
    if upstream.len() != spec.output_dim {
        return Err(Error::dims("upstream gradient", spec.output_dim, upstream.len()));
    }
    let tape = forward_batch(spec, params, input)?;
    backward(spec, params, &tape, upstream)
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.spec, &self.params, input)
    }

    pub fn forward_batch(&self, inputs: &[f64]) -> Result<Tape> {
        forward_batch(&self.spec, &self.params, inputs)
    }

    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(ParamVector, Vec<f64>)> {
        backward(&self.spec, &self.params, tape, upstream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;

    pub fn new(n_params: usize) -> Self {
        Self::with_learning_rate(n_params, Self::DEFAULT_LEARNING_RATE)
    }

    pub fn with_learning_rate(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update (descent direction). Rejects non-finite gradients
/// without touching the parameters or the optimizer state.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::dims("gradient", params.len(), grad.len()));
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::dims("adam moments", params.len(), state.first_moment.len()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalFault(format!(
            "non-finite gradient entry {i}: {}",
            grad[i]
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Largest relative error between `analytic` and a central-difference estimate of the
/// gradient of `loss` at `params`, over all coordinates or a random subset of 100.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn finite_diff_check<F, R>(
    loss: F,
    analytic: &[f64],
    params: &[f64],
    h: f64,
    rng: &mut R,
) -> f64
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    const SUBSET: usize = 100;
    let n = params.len();
    let coords: Vec<usize> = if n <= SUBSET {
        (0..n).collect()
    } else {
        index::sample(rng, n, SUBSET).into_vec()
    };
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
