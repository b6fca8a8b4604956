//! Minimal tensors and reverse-mode differentiation.
//!
//! All arithmetic is `f64`. Weights are kept at `f32` precision by the training
//! loops (see [`ParamSet::round_f32`]) so checkpoints stored as `f32` reload
//! bit-exactly.

mod conv;
mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

pub use conv::Padding;
pub use graph::{Gradients, Graph, Reduction, Var};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{glorot, ParamSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

/// Row-wise softmax of a `[rows, c]` buffer.
pub fn softmax_rows(values: &[f64], c: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// One-hot rows for `labels` over `c` classes.
pub fn one_hot(labels: &[usize], c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), c]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * c + l] = 1.0;
    }
    t
}
