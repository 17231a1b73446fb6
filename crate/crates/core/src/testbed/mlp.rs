use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Fully connected network with rectifier hidden layers and linear logits.
///
/// `dims = [d_0, d_1, …, d_L]`; layer `l` maps `d_{l-1} → d_l` with weight
/// `W_l` (`d_l × d_{l-1}`) and bias `b_l`. Layers are numbered `1..=L`;
/// the output of layer `L` is the logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    dims: Vec<usize>,
    weights: Vec<DenseMatrix>,
    biases: Vec<DVector<f64>>,
}

/// Activations of one forward pass over a batch (samples as columns).
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `outputs[0]` is the input, `outputs[l]` the post-activation output of layer `l`.
    pub outputs: Vec<DenseMatrix>,
    /// `preacts[l - 1]` is `W_l a_{l-1} + b_l`.
    pub preacts: Vec<DenseMatrix>,
}

impl ForwardPass {
    pub fn logits(&self) -> &DenseMatrix {
        self.outputs
            .last()
            .expect("forward pass has at least one layer")
    }
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// `outputs[l]` is the gradient w.r.t. the output of layer `l` (index 0: input).
    pub outputs: Vec<DenseMatrix>,
    /// Summed over the batch.
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpNetwork {
    /// He-normal weights, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        Self::validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push(DenseMatrix::from_fn(w[1], w[0], |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(DVector::zeros(w[1]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parameters(weights: Vec<DenseMatrix>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.len() != biases.len() || weights.is_empty() {
            return Err(Error::dim("need one bias per weight matrix"));
        }
        let mut dims = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *dims.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::dim("weight and bias shapes do not chain"));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameter".into()));
            }
            dims.push(w.nrows());
        }
        Self::validate_dims(&dims)?;
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    fn validate_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "a network needs at least two layers, got dims {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("zero-width layer in {dims:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_dim(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.dims[layer])
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < 1 || layer > self.num_layers() {
            return Err(Error::InvalidInput(format!(
                "layer {layer} out of range 1..={}",
                self.num_layers()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &DenseMatrix) -> Result<ForwardPass> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::dim(format!(
                "input has {} rows, network expects {}",
                inputs.nrows(),
                self.input_dim()
            )));
        }
        let last = self.num_layers();
        let mut outputs = Vec::with_capacity(last + 1);
        let mut preacts = Vec::with_capacity(last);
        outputs.push(inputs.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * outputs.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            let a = if l + 1 == last {
                z.clone()
            } else {
                z.map(|v| v.max(0.0))
            };
            preacts.push(z);
            outputs.push(a);
        }
        Ok(ForwardPass { outputs, preacts })
    }

    /// Back-propagates `d_logits` (gradient w.r.t. the logits, one column
    /// per sample) through the network.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &DenseMatrix) -> BackwardPass {
        let last = self.num_layers();
        let mut d_outputs = vec![DenseMatrix::zeros(0, 0); last + 1];
        let mut d_weights = vec![DenseMatrix::zeros(0, 0); last];
        let mut d_biases = vec![DVector::zeros(0); last];
        d_outputs[last] = d_logits.clone();
        for k in (1..=last).rev() {
            let d_pre = if k == last {
                d_outputs[k].clone()
            } else {
                d_outputs[k].zip_map(&pass.preacts[k - 1], |g, z| if z > 0.0 { g } else { 0.0 })
            };
            d_weights[k - 1] = &d_pre * pass.outputs[k - 1].transpose();
            d_biases[k - 1] = d_pre.column_sum();
            d_outputs[k - 1] = self.weights[k - 1].transpose() * &d_pre;
        }
        BackwardPass {
            outputs: d_outputs,
            weights: d_weights,
            biases: d_biases,
        }
    }

    /// Post-activation output of layer `layer` for a single input.
    pub fn forward_features(&self, x: &DVector<f64>, layer: usize) -> Result<DVector<f64>> {
        self.check_layer(layer)?;
        let pass = self.forward(&DenseMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(pass.outputs[layer].column(0).into_owned())
    }

    pub fn logits(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.forward_features(x, self.num_layers())
    }

    /// Parameters flattened in layer order: `W_1` (column-major), `b_1`, `W_2`, …
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Deterministic fingerprint of the parameters.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.dims {
            for byte in (*d as u64).to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        for v in self.flat_parameters() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Column-wise softmax of `beta · logits`.
pub fn softmax_columns(logits: &DenseMatrix, beta: f64) -> DenseMatrix {
    let mut out = logits * beta;
    for mut col in out.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let total = col.sum();
        col /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_shallow_networks() {
        assert!(MlpNetwork::new(&[3, 2], 0).is_err());
        assert!(MlpNetwork::new(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let w1 = DenseMatrix::identity(3, 3);
        let w2 = DenseMatrix::identity(2, 3);
        let net =
            MlpNetwork::from_parameters(vec![w1, w2], vec![DVector::zeros(3), DVector::zeros(2)])
                .unwrap();
        let x = DVector::from_vec(vec![0.5, 0.0, 2.0]);
        assert_eq!(net.forward_features(&x, 1).unwrap(), x);
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let mut net = MlpNetwork::new(&[4, 5, 3], 1).unwrap();
        let zeros = vec![0.0; net.num_parameters()];
        net.set_flat_parameters(&zeros).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert!(net
            .forward_features(&x, 1)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(net
            .forward_features(&x, 2)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_layer_by_layer_reference() {
        let net = MlpNetwork::new(&[4, 6, 5, 3], 7).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2, 0.8, 2.0]);
        let mut a = x.clone();
        for l in 1..=3 {
            let w = &net.weights()[l - 1];
            let b = &net.biases()[l - 1];
            let mut next = DVector::zeros(w.nrows());
            for r in 0..w.nrows() {
                let mut s = b[r];
                for c in 0..w.ncols() {
                    s += w[(r, c)] * a[c];
                }
                next[r] = if l < 3 { s.max(0.0) } else { s };
            }
            a = next;
            assert_abs_diff_eq!(net.forward_features(&x, l).unwrap(), a, epsilon = 1e-12);
        }
        assert!(net.forward_features(&x, 0).is_err());
        assert!(net.forward_features(&x, 4).is_err());
    }

    #[test]
    fn flat_parameters_round_trip() {
        let net = MlpNetwork::new(&[3, 4, 2], 3).unwrap();
        let mut other = MlpNetwork::new(&[3, 4, 2], 4).unwrap();
        assert_ne!(net.fingerprint(), other.fingerprint());
        other.set_flat_parameters(&net.flat_parameters()).unwrap();
        assert_eq!(net, other);
        assert_eq!(net.fingerprint(), other.fingerprint());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let z = DenseMatrix::from_column_slice(3, 1, &[1.0, 2.0, -0.5]);
        let shifted = z.map(|v| v + 100.0);
        assert_abs_diff_eq!(
            softmax_columns(&z, 1.0),
            softmax_columns(&shifted, 1.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(softmax_columns(&z, 0.5).sum(), 1.0, epsilon = 1e-15);
    }
}
