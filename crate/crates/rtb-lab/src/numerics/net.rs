use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
}

/// Small fully connected network. Weights are stored as `(fan_in, fan_out)`
/// matrices so a batched forward pass is `x @ W + b` per layer, with the
/// hidden activation applied to every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    pub widths: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activation: Activation,
}

/// Tape leaves for one network's parameters, in `flatten` order.
pub struct NetVars {
    pub weights: Vec<VarId>,
    pub biases: Vec<VarId>,
}

impl FeedForwardNet {
    /// Uniform init in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("network needs at least input and output widths".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero layer width".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Tensor::new(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(FeedForwardNet { widths: widths.to_vec(), weights, biases, activation })
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let weights = widths
            .windows(2)
            .map(|p| Tensor::zeros(p[0], p[1]))
            .collect();
        let biases = widths.windows(2).map(|p| Tensor::zeros(1, p[1])).collect();
        FeedForwardNet { widths: widths.to_vec(), weights, biases, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn activate(&self, t: &Tensor) -> Tensor {
        match self.activation {
            Activation::Tanh => t.map(f64::tanh),
            Activation::Gelu => t.map(|x| {
                0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
            }),
        }
    }

    /// Batched forward pass: rows of `input` are samples.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "net input width {} does not match first layer width {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w).add_row_broadcast(b);
            if i != last {
                h = self.activate(&h);
            }
        }
        Ok(h)
    }

    /// Push this net's parameters onto a tape as gradient leaves.
    pub fn load_params(&self, tape: &mut Tape) -> Result<NetVars> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(tape.param(w.clone())?);
            biases.push(tape.param(b.clone())?);
        }
        Ok(NetVars { weights, biases })
    }

    /// Forward pass recorded on the tape, using previously loaded params.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &NetVars, input: VarId) -> Result<VarId> {
        let last = vars.weights.len() - 1;
        let mut h = input;
        for i in 0..vars.weights.len() {
            h = tape.matmul(h, vars.weights[i])?;
            h = tape.add_row(h, vars.biases[i])?;
            if i != last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Gelu => tape.gelu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Parameter vector in layer order, weights row-major then bias per layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wl = w.len();
            w.data_mut().copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = b.len();
            b.data_mut().copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(())
    }

    pub fn from_flat(
        widths: &[usize],
        activation: Activation,
        flat: &[f64],
    ) -> Result<Self> {
        let mut net = FeedForwardNet::zeros(widths, activation);
        net.unflatten(flat)?;
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("from_flat", "non-finite parameter"));
        }
        Ok(net)
    }

    /// Collect tape gradients for this net into `flatten` layout. Missing
    /// slots (no gradient flowed) contribute zeros.
    pub fn collect_grads(&self, vars: &NetVars, grads: &[Option<Tensor>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            match &grads[vars.weights[i]] {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(w.len())),
            }
            match &grads[vars.biases[i]] {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(b.len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_maps_to_zero() {
        let net = FeedForwardNet::zeros(&[3, 4, 2], Activation::Tanh);
        let out = net
            .forward(&Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = FeedForwardNet::zeros(&[3, 3], Activation::Tanh);
        for i in 0..3 {
            net.weights[0].set(i, i, 1.0);
        }
        let out = net
            .forward(&Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = FeedForwardNet::new(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let input = [0.3, -1.2, 0.7];
        let out = net
            .forward(&Tensor::new(1, 3, input.to_vec()).unwrap())
            .unwrap();

        // independently coded matrix-multiply chain
        let mut h: Vec<f64> = input.to_vec();
        for (li, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            let mut next = vec![0.0; w.cols()];
            for (j, n) in next.iter_mut().enumerate() {
                let mut acc = b.get(0, j);
                for (i, &hv) in h.iter().enumerate() {
                    acc += hv * w.get(i, j);
                }
                *n = if li + 1 < net.weights.len() { acc.tanh() } else { acc };
            }
            h = next;
        }
        for (a, b) in out.data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = FeedForwardNet::new(&[4, 8, 8, 2], Activation::Gelu, &mut rng).unwrap();
        let flat = net.flatten();
        let rebuilt = FeedForwardNet::from_flat(&[4, 8, 8, 2], Activation::Gelu, &flat).unwrap();
        assert_eq!(net, rebuilt);
        assert_eq!(flat, rebuilt.flatten());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let net = FeedForwardNet::zeros(&[3, 2], Activation::Tanh);
        let err = net.forward(&Tensor::new(1, 4, vec![0.0; 4]).unwrap());
        assert!(matches!(err, Err(crate::error::Error::Config(_))));
    }
}
