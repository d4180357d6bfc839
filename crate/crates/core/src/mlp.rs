//! Dense multi-layer perceptron with tanh hidden activations and a linear
//! output layer. Shared by the learned scalar-field backend and the radiance
//! decoder; callers apply their own output squash (e.g. sigmoid) so that the
//! chain rule stays in one place per use site.

use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major, `output_dim` rows of `input_dim` columns.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs captured during a forward pass, enough to run the
/// input-gradient backward pass without re-evaluating the network.
pub struct Trace {
    /// `activations[k]` is the input to layer k; the last entry is the output.
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace of a forward pass is never empty")
    }
}

impl Mlp {
    /// Deterministic random network: weights ~ U(-s, s) with s = sqrt(3/input_dim)
    /// per layer (unit-variance preserving for roughly unit inputs), zero bias.
    pub fn seeded(dims: &[usize], seed: u64) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::ShapeMismatch("mlp needs at least input and output dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (input_dim, output_dim) = (w[0], w[1]);
            if input_dim == 0 || output_dim == 0 {
                return Err(Error::ShapeMismatch("mlp layer dims must be positive".into()));
            }
            let s = (3.0 / input_dim as f64).sqrt();
            let weights = (0..input_dim * output_dim).map(|_| rng.gen_range(-s..s)).collect();
            layers.push(Layer { input_dim, output_dim, weights, bias: vec![0.0; output_dim] });
        }
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Mlp> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("mlp needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.input_dim * l.output_dim || l.bias.len() != l.output_dim {
                return Err(Error::ShapeMismatch(format!("layer {i} weight/bias sizes disagree with dims")));
            }
            if i > 0 && layers[i - 1].output_dim != l.input_dim {
                return Err(Error::ShapeMismatch(format!("layer {i} input dim mismatches previous output")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = vec![self.layers[0].input_dim];
        d.extend(self.layers.iter().map(|l| l.output_dim));
        d
    }

    /// Flat parameter vector, layer-major: (weights row-major, bias) per layer.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of `flatten_params` for the given layer dims.
    pub fn from_flat(dims: &[usize], params: &[f64]) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::ShapeMismatch("mlp needs at least input and output dims".into()));
        }
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} parameters for dims {dims:?}, got {}",
                params.len()
            )));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for w in dims.windows(2) {
            let (input_dim, output_dim) = (w[0], w[1]);
            let nw = input_dim * output_dim;
            let weights = params[off..off + nw].to_vec();
            off += nw;
            let bias = params[off..off + output_dim].to_vec();
            off += output_dim;
            layers.push(Layer { input_dim, output_dim, weights, bias });
        }
        Mlp::from_layers(layers)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).activations.pop().unwrap()
    }

    pub fn forward_traced(&self, x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.input_dim());
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let mut out = layer.bias.clone();
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                *out_v += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
            }
            if k != last {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            activations.push(out);
        }
        Trace { activations }
    }

    /// Vector-Jacobian product with respect to the input: gradient of
    /// `<dy, output>` at the traced point. `dy` has `output_dim` entries.
    pub fn vjp_input(&self, trace: &Trace, dy: &[f64]) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.output_dim());
        let last = self.layers.len() - 1;
        let mut grad = dy.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            // Undo the tanh of hidden layers: the trace stores post-activation
            // values a = tanh(z), so dtanh/dz = 1 - a^2.
            if k != last {
                let act = &trace.activations[k + 1];
                for (g, a) in grad.iter_mut().zip(act) {
                    *g *= 1.0 - a * a;
                }
            }
            let mut prev = vec![0.0; layer.input_dim];
            for (o, g) in grad.iter().enumerate() {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * g;
                }
            }
            grad = prev;
        }
        grad
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Derivative of the sigmoid expressed through its value.
pub fn sigmoid_deriv_from_value(s: f64) -> f64 {
    s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_network_outputs_bias() {
        let mut mlp = Mlp::seeded(&[3, 5, 2], 1).unwrap();
        for l in &mut mlp.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        mlp.layers.last_mut().unwrap().bias = vec![0.25, -1.5];
        let y = mlp.forward(&[9.0, -3.0, 0.5]);
        assert_eq!(y, vec![0.25, -1.5]);
    }

    #[test]
    fn flat_roundtrip_preserves_network() {
        let mlp = Mlp::seeded(&[3, 8, 4], 7).unwrap();
        let flat = mlp.flatten_params();
        let back = Mlp::from_flat(&[3, 8, 4], &flat).unwrap();
        assert_eq!(mlp, back);
    }

    #[test]
    fn vjp_matches_central_differences() {
        let mlp = Mlp::seeded(&[3, 8, 8, 2], 42).unwrap();
        let x = [0.3, -0.7, 0.2];
        let dy = [1.0, -2.0];
        let trace = mlp.forward_traced(&x);
        let grad = mlp.vjp_input(&trace, &dy);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let f = |x: &[f64; 3]| -> f64 {
                let y = mlp.forward(x);
                y[0] * dy[0] + y[1] * dy[1]
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                ((fd - grad[i]) / denom).abs() < 1e-5,
                "component {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn seeded_networks_are_reproducible() {
        let a = Mlp::seeded(&[4, 6, 3], 99).unwrap();
        let b = Mlp::seeded(&[4, 6, 3], 99).unwrap();
        assert_eq!(a, b);
    }
}
