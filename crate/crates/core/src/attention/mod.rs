//! Decomposed-cluster transformer.
//!
//! The first sub-cluster (the one holding the centroid) goes through a stack
//! of self-attention blocks. Every other sub-cluster goes through a stack of
//! cross blocks: each block first adds the centroid context
//! `h = sum_j softmax_j(c W x_j^T) x_j` to all of its tokens, then runs a
//! standard self-attention block. `c` is the final encoder representation
//! of the centroid. A layer-normalized linear head with a logistic output
//! scores every member.

mod layers;
mod model;
mod params;

use ndarray::{Array1, Array2, ArrayView1};

pub use layers::{softmax, softmax_inplace};
pub use model::{model_backward, model_forward, ForwardTrace};
pub use params::{
    init_params, BlockParams, Hyper, ModelParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Multi-head scaled dot-product self-attention followed by the output
/// projection. No normalization or residual.
pub fn self_attention(tokens: &Array2<f64>, block: &BlockParams, n_head: usize) -> Array2<f64> {
    model::mha_forward(tokens, block, n_head).0
}

/// One full pre-norm block (attention and feedforward with residuals).
pub fn transformer_block(tokens: &Array2<f64>, block: &BlockParams, n_head: usize) -> Array2<f64> {
    model::block_forward(tokens, block, n_head).0
}

/// Attention of the out-of-cluster sample `centroid` over the rows of `subcluster`.
pub fn cross_attention_scores(
    centroid: ArrayView1<f64>,
    subcluster: &Array2<f64>,
    w: &Array2<f64>,
) -> Array1<f64> {
    let mut scores = model::correlation_logits(centroid, subcluster, w);
    softmax_inplace(scores.view_mut());
    scores
}

/// Score-weighted sum of the sub-cluster rows.
pub fn cross_attention_feature(
    centroid: ArrayView1<f64>,
    subcluster: &Array2<f64>,
    w: &Array2<f64>,
) -> Array1<f64> {
    subcluster
        .t()
        .dot(&cross_attention_scores(centroid, subcluster, w))
}

/// A single cross block: centroid-context injection, then a standard block.
pub fn cross_block(
    subcluster: &Array2<f64>,
    centroid: ArrayView1<f64>,
    w: &Array2<f64>,
    block: &BlockParams,
    n_head: usize,
) -> Array2<f64> {
    model::cross_block_forward(subcluster, centroid, w, block, n_head).0
}

/// The whole cross stack applied to one non-centroid sub-cluster.
pub fn cross_transformer_forward(
    subcluster: &Array2<f64>,
    centroid: ArrayView1<f64>,
    params: &ModelParams,
) -> Array2<f64> {
    params.cross.iter().fold(subcluster.clone(), |h, blk| {
        cross_block(&h, centroid, &params.correlation, blk, params.hyper.n_head)
    })
}

/// Softmax score of key `j` when only the first `keep` logits take part.
pub fn restricted_attention_score(logits: &[f64], j: usize, keep: usize) -> f64 {
    assert!(j < keep && keep <= logits.len());
    softmax(ArrayView1::from(&logits[..keep]))[j]
}
