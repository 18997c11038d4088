//! Fully connected networks with hand-written reverse-mode gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
}

/// Activations of one forward pass: `values[0]` is the input, `values[l + 1]`
/// the output of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    values: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace always holds the input")
    }
}

impl MlpNetwork {
    /// `widths[l] -> widths[l + 1]` layers with the given activations.
    /// Weights are drawn from `N(0, 1 / fan_in)`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return invalid("a network needs at least an input and an output width");
        }
        if activations.len() != widths.len() - 1 {
            return invalid(format!(
                "{} activations given for {} layers",
                activations.len(),
                widths.len() - 1
            ));
        }
        if widths.contains(&0) {
            return invalid("layer widths must be positive");
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (inputs, outputs) = (w[0], w[1]);
                let scale = (1.0 / inputs as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                DenseLayer {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![0.0; outputs],
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Tanh on every hidden layer, identity on the output layer.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut acts = vec![Activation::Tanh; widths.len().saturating_sub(2)];
        acts.push(Activation::Identity);
        Self::new(widths, &acts, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Flat parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dims(self.num_params(), params.len(), "network parameters")?;
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> ForwardTrace {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for l in &self.layers {
            let input = values.last().unwrap();
            let mut out = l.bias.clone();
            for (o, row) in out.iter_mut().zip(l.weights.chunks_exact(l.inputs)) {
                *o += row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                if l.activation == Activation::Tanh {
                    *o = o.tanh();
                }
            }
            values.push(out);
        }
        ForwardTrace { values }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut trace = self.forward(x);
        trace.values.pop().unwrap()
    }

    /// Adds `dL/dparams` into `grad` (laid out as [`params`](Self::params)) given
    /// `dL/doutput`, and returns `dL/dinput`.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad_output.len(), self.output_dim());
        debug_assert_eq!(grad.len(), self.num_params());
        let mut delta = grad_output.to_vec();
        let mut end = grad.len();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let out = &trace.values[idx + 1];
            let input = &trace.values[idx];
            if l.activation == Activation::Tanh {
                for (d, y) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - y * y;
                }
            }
            let start = end - l.num_params();
            let (gw, gb) = grad[start..end].split_at_mut(l.weights.len());
            let mut next = vec![0.0; l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                let grow = &mut gw[o * l.inputs..(o + 1) * l.inputs];
                for i in 0..l.inputs {
                    grow[i] += d * input[i];
                    next[i] += d * row[i];
                }
            }
            delta = next;
            end = start;
        }
        delta
    }

    /// `params -= learning_rate * grad`.
    pub fn descend(&mut self, grad: &[f64], learning_rate: f64) {
        debug_assert_eq!(grad.len(), self.num_params());
        let mut g = grad.iter();
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *p -= learning_rate * g.next().unwrap();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn net(widths: &[usize], seed: u64) -> MlpNetwork {
        MlpNetwork::mlp(widths, &mut stream(seed, 0)).unwrap()
    }

    #[test]
    fn construction_errors() {
        let mut rng = stream(0, 0);
        assert!(MlpNetwork::mlp(&[3], &mut rng).is_err());
        assert!(MlpNetwork::mlp(&[3, 0, 2], &mut rng).is_err());
        assert!(MlpNetwork::new(&[2, 2], &[], &mut rng).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut n = net(&[2, 5, 3], 1);
        let p: Vec<f64> = (0..n.num_params()).map(|i| i as f64 * 0.01).collect();
        n.set_params(&p).unwrap();
        assert_eq!(n.params(), p);
        assert_eq!(n.num_params(), 2 * 5 + 5 + 5 * 3 + 3);
        assert!(n.set_params(&p[1..]).is_err());
    }

    #[test]
    fn identity_layer_is_affine() {
        let mut n = MlpNetwork::new(&[2, 1], &[Activation::Identity], &mut stream(0, 0)).unwrap();
        n.set_params(&[2.0, -1.0, 0.5]).unwrap();
        assert_eq!(n.predict(&[1.0, 3.0]), vec![2.0 - 3.0 + 0.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = net(&[3, 6, 4, 2], 5);
        let x = [0.3, -0.8, 1.1];
        // Loss L = c . output for a fixed c.
        let c = [0.7, -1.3];
        let loss = |m: &MlpNetwork, x: &[f64]| m.predict(x).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let trace = n.forward(&x);
        let mut grad = vec![0.0; n.num_params()];
        let gx = n.backward(&trace, &c, &mut grad);

        let p0 = n.params();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut m = n.clone();
            let mut p = p0.clone();
            p[k] += h;
            m.set_params(&p).unwrap();
            let up = loss(&m, &x);
            p[k] -= 2.0 * h;
            m.set_params(&p).unwrap();
            let down = loss(&m, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: fd {fd} vs {}", grad[k]);
        }
        for d in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            let fd = (loss(&n, &xp) - loss(&n, &xm)) / (2.0 * h);
            assert!((fd - gx[d]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn descend_moves_against_gradient() {
        let mut n = net(&[2, 3, 1], 2);
        let p0 = n.params();
        let g = vec![1.0; n.num_params()];
        n.descend(&g, 0.1);
        for (a, b) in n.params().iter().zip(&p0) {
            assert!((a - (b - 0.1)).abs() < 1e-15);
        }
    }
}
