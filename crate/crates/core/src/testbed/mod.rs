//! Small MLP testbed: synthetic tasks, training, and per-sample
//! feature/gradient extraction.

mod data;
mod mlp;
mod train;

pub use data::{generate_task, Dataset, SyntheticTaskSpec, TaskFamily};
pub use mlp::{softmax_columns, BackwardPass, ForwardPass, MlpNetwork};
pub use train::{accuracy, cross_entropy, train, TrainConfig, TrainReport};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::representation::FeatureGradientBatch;

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "smoothing beta must lie in (0, 1], got {beta}"
        )))
    }
}

/// `q ∝ p^β`, i.e. the softmax of `β · logits`.
pub fn smoothed_predictive(logits: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
    check_beta(beta)?;
    let col = DenseMatrix::from_column_slice(logits.len(), 1, logits.as_slice());
    Ok(softmax_columns(&col, beta).column(0).into_owned())
}

/// Features and expected loss gradients (under the smoothed predictive) at
/// each requested layer, for a block of inputs.
///
/// The expected cross-entropy gradient at the logits is `p - q`; it is
/// back-propagated to the post-activation output of every layer.
pub fn features_and_gradients(
    network: &MlpNetwork,
    inputs: &DenseMatrix,
    layers: &[usize],
    beta: f64,
) -> Result<Vec<(DenseMatrix, DenseMatrix)>> {
    check_beta(beta)?;
    for &l in layers {
        network.check_layer(l)?;
    }
    let pass = network.forward(inputs)?;
    let p = softmax_columns(pass.logits(), 1.0);
    let q = softmax_columns(pass.logits(), beta);
    let back = network.backward(&pass, &(p - q));
    Ok(layers
        .iter()
        .map(|&l| (pass.outputs[l].clone(), back.outputs[l].clone()))
        .collect())
}

/// `(f_l(x), E_{y~q} ∇_{f_l} ℓ(x, y))` for one input.
pub fn feature_gradient(
    network: &MlpNetwork,
    x: &DVector<f64>,
    layer: usize,
    beta: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let inputs = DenseMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let mut out = features_and_gradients(network, &inputs, &[layer], beta)?;
    let (f, g) = out.pop().unwrap();
    Ok((f.column(0).into_owned(), g.column(0).into_owned()))
}

/// Streams the dataset through the network in shards of `shard_size`
/// samples. Returns one shard list per requested layer; shard `k` starts at
/// global index `k · shard_size`.
pub fn extract_shards(
    network: &MlpNetwork,
    data: &Dataset,
    layers: &[usize],
    beta: f64,
    shard_size: usize,
) -> Result<Vec<Vec<FeatureGradientBatch>>> {
    if shard_size == 0 {
        return Err(Error::InvalidInput("shard size must be positive".into()));
    }
    let mut out: Vec<Vec<FeatureGradientBatch>> = vec![Vec::new(); layers.len()];
    let mut start = 0;
    while start < data.len() {
        let len = shard_size.min(data.len() - start);
        let inputs = data.inputs().columns(start, len).into_owned();
        let blocks = features_and_gradients(network, &inputs, layers, beta)?;
        for ((shards, (f, g)), &l) in out.iter_mut().zip(blocks).zip(layers) {
            shards.push(FeatureGradientBatch::new(f, g, start as u64, l as u32)?);
        }
        start += len;
    }
    Ok(out)
}
