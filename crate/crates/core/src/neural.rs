//! Small fully connected network used as a learned transmission-rate term.
//!
//! Parameters are flattened layer by layer, weights (row-major, `outputs x
//! inputs`) followed by biases. Backpropagation accumulates into caller-owned
//! buffers so the integrator adjoint can sum contributions over many steps
//! without allocating.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn slope<T: Real>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    fn n_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Layer shape of the rate network: `(inputs, outputs, activation)`.
pub type LayerShape = (usize, usize, Activation);

/// 3x20 Tanh input layer, three 20x20 Tanh latent layers, 20x1 Sigmoid output.
pub const LAMBDA_NET_SHAPE: [LayerShape; 5] = [
    (3, 20, Activation::Tanh),
    (20, 20, Activation::Tanh),
    (20, 20, Activation::Tanh),
    (20, 20, Activation::Tanh),
    (20, 1, Activation::Sigmoid),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
}

/// Per-layer activations recorded by [`Mlp::forward_cached`].
#[derive(Clone, Debug, Default)]
pub struct MlpCache<T> {
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Copy> MlpCache<T> {
    /// First output of the recorded pass.
    pub fn output(&self) -> T {
        self.acts[self.acts.len() - 1][0]
    }
}

impl<T: Real> Mlp<T> {
    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (idx, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::InvalidArgument(format!(
                    "layer {idx} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    idx + 1,
                    pair[1].inputs
                )));
            }
        }
        for layer in &layers {
            if layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::InvalidArgument("layer buffer sizes disagree with shape".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Builds a network of the given shape from a flat parameter vector.
    pub fn from_params(shape: &[LayerShape], params: &[T]) -> Result<Self> {
        let expected: usize = shape.iter().map(|(i, o, _)| i * o + o).sum();
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(shape.len());
        for &(inputs, outputs, activation) in shape {
            let nw = inputs * outputs;
            let weights = params[offset..offset + nw].to_vec();
            offset += nw;
            let bias = params[offset..offset + outputs].to_vec();
            offset += outputs;
            layers.push(Dense { inputs, outputs, weights, bias, activation });
        }
        Self::from_layers(layers)
    }

    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn init_uniform<R: Rng + ?Sized>(shape: &[LayerShape], rng: &mut R) -> Self {
        let layers = shape
            .iter()
            .map(|&(inputs, outputs, activation)| {
                let bound = 1.0 / (inputs as f64).sqrt();
                let mut draw = || T::lit(rng.gen_range(-bound..=bound));
                let weights = (0..inputs * outputs).map(|_| draw()).collect();
                let bias = (0..outputs).map(|_| draw()).collect();
                Dense { inputs, outputs, weights, bias, activation }
            })
            .collect();
        Self { layers }
    }

    /// The rate network with the fixed architecture, randomly initialised.
    pub fn lambda_net<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::init_uniform(&LAMBDA_NET_SHAPE, rng)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn shape(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| (l.inputs, l.outputs, l.activation)).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[T]) -> Vec<T> {
        let mut cache = MlpCache::default();
        self.forward_cached(input, &mut cache);
        cache.acts.pop().unwrap_or_default()
    }

    /// Forward pass of a single-output network.
    pub fn forward_scalar(&self, input: &[T]) -> T {
        let mut cache = MlpCache::default();
        self.forward_cached(input, &mut cache)
    }

    /// Forward pass recording activations; returns the first output.
    pub fn forward_cached(&self, input: &[T], cache: &mut MlpCache<T>) -> T {
        debug_assert_eq!(input.len(), self.input_dim());
        if cache.acts.len() != self.layers.len() + 1 {
            cache.acts = std::iter::once(input.len())
                .chain(self.layers.iter().map(|l| l.outputs))
                .map(|n| vec![T::zero(); n])
                .collect();
        }
        cache.acts[0].copy_from_slice(input);
        for (idx, layer) in self.layers.iter().enumerate() {
            let (prev, next) = cache.acts.split_at_mut(idx + 1);
            let a_in = &prev[idx];
            let a_out = &mut next[0];
            for (o, out) in a_out.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let mut z = layer.bias[o];
                for (w, a) in row.iter().zip(a_in.iter()) {
                    z += *w * *a;
                }
                *out = layer.activation.apply(z);
            }
        }
        cache.acts[self.layers.len()][0]
    }

    /// Backpropagates `upstream * d(output_0)` through the cached pass,
    /// accumulating into `grad_params` (flat layout) and `grad_input`.
    pub fn backward(
        &self,
        cache: &mut MlpCache<T>,
        upstream: T,
        grad_params: &mut [T],
        grad_input: &mut [T],
    ) {
        debug_assert_eq!(grad_params.len(), self.n_params());
        let n_layers = self.layers.len();
        let last = &self.layers[n_layers - 1];
        cache.delta.clear();
        cache.delta.resize(last.outputs, T::zero());
        cache.delta[0] = upstream * last.activation.slope(cache.acts[n_layers][0]);

        let mut offset = self.n_params();
        for idx in (0..n_layers).rev() {
            let layer = &self.layers[idx];
            let nw = layer.weights.len();
            let nb = layer.bias.len();
            offset -= nw + nb;
            let a_in = &cache.acts[idx];
            {
                let (gw, gb) = grad_params[offset..offset + nw + nb].split_at_mut(nw);
                for o in 0..layer.outputs {
                    let d = cache.delta[o];
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(a_in.iter()) {
                        *g += d * *a;
                    }
                }
            }
            cache.delta_prev.clear();
            cache.delta_prev.resize(layer.inputs, T::zero());
            for o in 0..layer.outputs {
                let d = cache.delta[o];
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (acc, w) in cache.delta_prev.iter_mut().zip(row.iter()) {
                    *acc += d * *w;
                }
            }
            if idx > 0 {
                let act = self.layers[idx - 1].activation;
                for (d, a) in cache.delta_prev.iter_mut().zip(a_in.iter()) {
                    *d *= act.slope(*a);
                }
                std::mem::swap(&mut cache.delta, &mut cache.delta_prev);
            } else {
                for (g, d) in grad_input.iter_mut().zip(cache.delta_prev.iter()) {
                    *g += *d;
                }
            }
        }
    }
}
