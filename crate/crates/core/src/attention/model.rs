//! Forward and reverse passes of the block stacks and the full model.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, sigmoid, softmax_backward, softmax_inplace,
    LnCache,
};
use super::params::{BlockParams, ModelParams};
use crate::neighborhood::SubClusterBatch;

#[derive(Debug, Clone)]
pub(crate) struct MhaCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `s x s` attention matrix per head.
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

pub(crate) fn mha_forward(
    x: &Array2<f64>,
    blk: &BlockParams,
    n_head: usize,
) -> (Array2<f64>, MhaCache) {
    let q = x.dot(&blk.w_query);
    let k = x.dot(&blk.w_key);
    let v = x.dot(&blk.w_value);
    let dh = x.ncols() / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for row in p.axis_iter_mut(Axis(0)) {
            softmax_inplace(row);
        }
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let out = concat.dot(&blk.w_out);
    (
        out,
        MhaCache {
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

fn mha_backward(
    dout: &Array2<f64>,
    x: &Array2<f64>,
    cache: &MhaCache,
    blk: &BlockParams,
    grad: &mut BlockParams,
    n_head: usize,
) -> Array2<f64> {
    let dh = x.ncols() / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    grad.w_out += &cache.concat.t().dot(dout);
    let dconcat = dout.dot(&blk.w_out.t());
    let mut dq = Array2::zeros(x.raw_dim());
    let mut dk = Array2::zeros(x.raw_dim());
    let mut dv = Array2::zeros(x.raw_dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dcat = dconcat.slice(cols);
        let dp = dcat.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dcat));
        let mut dscore = Array2::zeros(p.raw_dim());
        for ((mut row, prow), dprow) in dscore
            .axis_iter_mut(Axis(0))
            .zip(p.axis_iter(Axis(0)))
            .zip(dp.axis_iter(Axis(0)))
        {
            row.assign(&softmax_backward(prow, dprow));
        }
        dscore *= scale;
        dq.slice_mut(cols).assign(&dscore.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols)
            .assign(&dscore.t().dot(&cache.q.slice(cols)));
    }
    grad.w_query += &x.t().dot(&dq);
    grad.w_key += &x.t().dot(&dk);
    grad.w_value += &x.t().dot(&dv);
    dq.dot(&blk.w_query.t()) + dk.dot(&blk.w_key.t()) + dv.dot(&blk.w_value.t())
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    ln1: LnCache,
    xn1: Array2<f64>,
    mha: MhaCache,
    ln2: LnCache,
    xn2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// `x1 = x + MHA(LN1(x))`, `y = x1 + FF(LN2(x1))`.
pub(crate) fn block_forward(
    x: &Array2<f64>,
    blk: &BlockParams,
    n_head: usize,
) -> (Array2<f64>, BlockCache) {
    let (xn1, ln1) = layer_norm(x, &blk.ln1_gain, &blk.ln1_bias);
    let (attn, mha) = mha_forward(&xn1, blk, n_head);
    let x1 = x + &attn;
    let (xn2, ln2) = layer_norm(&x1, &blk.ln2_gain, &blk.ln2_bias);
    let pre = xn2.dot(&blk.ff_in) + &blk.ff_in_bias;
    let act = pre.mapv(gelu);
    let y = &x1 + &(act.dot(&blk.ff_out) + &blk.ff_out_bias);
    (
        y,
        BlockCache {
            ln1,
            xn1,
            mha,
            ln2,
            xn2,
            pre,
            act,
        },
    )
}

fn block_backward(
    dy: &Array2<f64>,
    cache: &BlockCache,
    blk: &BlockParams,
    grad: &mut BlockParams,
    n_head: usize,
) -> Array2<f64> {
    grad.ff_out_bias += &dy.sum_axis(Axis(0));
    grad.ff_out += &cache.act.t().dot(dy);
    let mut dpre = dy.dot(&blk.ff_out.t());
    dpre.zip_mut_with(&cache.pre, |g, &x| *g *= gelu_grad(x));
    grad.ff_in_bias += &dpre.sum_axis(Axis(0));
    grad.ff_in += &cache.xn2.t().dot(&dpre);
    let dxn2 = dpre.dot(&blk.ff_in.t());
    let dx1 = dy
        + &layer_norm_backward(
            &dxn2,
            &cache.ln2,
            &blk.ln2_gain,
            &mut grad.ln2_gain,
            &mut grad.ln2_bias,
        );
    let dxn1 = mha_backward(&dx1, &cache.xn1, &cache.mha, blk, grad, n_head);
    dx1 + layer_norm_backward(
        &dxn1,
        &cache.ln1,
        &blk.ln1_gain,
        &mut grad.ln1_gain,
        &mut grad.ln1_bias,
    )
}

#[derive(Debug, Clone)]
pub(crate) struct CrossCache {
    tokens: Array2<f64>,
    /// Centroid-to-token attention weights.
    scores: Array1<f64>,
    block: BlockCache,
}

/// Centroid cross-attention logits `c W x_j^T` (`c` the centroid) for every row of `tokens`.
pub(crate) fn correlation_logits(
    centroid: ArrayView1<f64>,
    tokens: &Array2<f64>,
    w: &Array2<f64>,
) -> Array1<f64> {
    tokens.dot(&centroid.dot(w))
}

/// Add the centroid context `h = sum_j a_j x_j` to every token, then run a
/// standard block.
pub(crate) fn cross_block_forward(
    x: &Array2<f64>,
    centroid: ArrayView1<f64>,
    w: &Array2<f64>,
    blk: &BlockParams,
    n_head: usize,
) -> (Array2<f64>, CrossCache) {
    let mut scores = correlation_logits(centroid, x, w);
    softmax_inplace(scores.view_mut());
    let context = x.t().dot(&scores);
    let shifted = x + &context;
    let (y, block) = block_forward(&shifted, blk, n_head);
    (
        y,
        CrossCache {
            tokens: x.clone(),
            scores,
            block,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn cross_block_backward(
    dy: &Array2<f64>,
    cache: &CrossCache,
    centroid: ArrayView1<f64>,
    w: &Array2<f64>,
    blk: &BlockParams,
    grad: &mut BlockParams,
    dw: &mut Array2<f64>,
    dcentroid: &mut Array1<f64>,
    n_head: usize,
) -> Array2<f64> {
    let dshifted = block_backward(dy, &cache.block, blk, grad, n_head);
    let dcontext = dshifted.sum_axis(Axis(0));
    let mut dx = dshifted;
    // context = sum_j a_j x_j
    let da = cache.tokens.dot(&dcontext);
    for (mut row, &a) in dx.axis_iter_mut(Axis(0)).zip(cache.scores.iter()) {
        row.scaled_add(a, &dcontext);
    }
    let dlogits = softmax_backward(cache.scores.view(), da.view());
    // logits_j = (c W) . x_j
    let u = centroid.dot(w);
    let du = cache.tokens.t().dot(&dlogits);
    for (mut row, &g) in dx.axis_iter_mut(Axis(0)).zip(dlogits.iter()) {
        row.scaled_add(g, &u);
    }
    *dcentroid += &w.dot(&du);
    let outer = centroid
        .to_owned()
        .insert_axis(Axis(1))
        .dot(&du.view().insert_axis(Axis(0)));
    *dw += &outer;
    dx
}

/// Everything the reverse pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    k: usize,
    s: usize,
    encoder: Vec<BlockCache>,
    cross: Vec<Vec<CrossCache>>,
    centroid: Array1<f64>,
    out_ln: LnCache,
    normed: Array2<f64>,
    /// Per-token logits before the sigmoid.
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

impl ForwardTrace {
    /// Every softmax row computed during the pass (self-attention rows and
    /// centroid cross-attention vectors).
    pub fn softmax_rows(&self) -> Vec<Array1<f64>> {
        let mut rows = Vec::new();
        let blocks = self
            .encoder
            .iter()
            .chain(self.cross.iter().flatten().map(|c| &c.block));
        for b in blocks {
            for p in &b.mha.probs {
                rows.extend(p.rows().into_iter().map(|r| r.to_owned()));
            }
        }
        rows.extend(self.cross.iter().flatten().map(|c| c.scores.clone()));
        rows
    }

    /// Final encoder representation of the centroid, shared by every cross stack.
    pub fn centroid_repr(&self) -> &Array1<f64> {
        &self.centroid
    }
}

/// Run the model on one decomposed cluster. Returns per-member
/// probabilities of sharing the centroid's identity, in rank order.
pub fn model_forward(batch: &SubClusterBatch, params: &ModelParams) -> (Array1<f64>, ForwardTrace) {
    let hyper = params.hyper;
    let (k, s, n_head) = (batch.k, batch.s, hyper.n_head);
    assert_eq!(k, hyper.k, "batch k does not match model");
    assert_eq!(k * s, hyper.n, "batch size does not match model");

    let embed =
        |m: usize| &batch.sequences[m] + &params.rank_embedding.slice(s![m * s..(m + 1) * s, ..]);

    let mut hidden = embed(0);
    let mut encoder = Vec::with_capacity(params.encoder.len());
    for blk in &params.encoder {
        let (y, c) = block_forward(&hidden, blk, n_head);
        encoder.push(c);
        hidden = y;
    }
    let centroid = hidden.row(0).to_owned();
    let mut outputs = vec![hidden];
    let mut cross = Vec::with_capacity(k.saturating_sub(1));
    for m in 1..k {
        let mut h = embed(m);
        let mut caches = Vec::with_capacity(params.cross.len());
        for blk in &params.cross {
            let (y, c) = cross_block_forward(&h, centroid.view(), &params.correlation, blk, n_head);
            caches.push(c);
            h = y;
        }
        cross.push(caches);
        outputs.push(h);
    }
    let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let (normed, out_ln) = layer_norm(&out, &params.out_ln_gain, &params.out_ln_bias);
    let logits = normed.dot(&params.head_weight) + params.head_bias[0];
    let probabilities = logits.mapv(sigmoid);
    let trace = ForwardTrace {
        k,
        s,
        encoder,
        cross,
        centroid,
        out_ln,
        normed,
        logits,
        probabilities: probabilities.clone(),
    };
    (probabilities, trace)
}

/// Gradient of a scalar loss with respect to every parameter, given
/// `dloss/dq` for each member probability.
pub fn model_backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    loss_grad: ArrayView1<f64>,
) -> ModelParams {
    let mut grad = params.zeros_like();
    let (k, s, n_head) = (trace.k, trace.s, params.hyper.n_head);
    let q = &trace.probabilities;
    let dlogits = &loss_grad * &q.mapv(|p| p * (1.0 - p));
    grad.head_bias[0] = dlogits.sum();
    grad.head_weight = trace.normed.t().dot(&dlogits);
    let dnormed = dlogits
        .view()
        .insert_axis(Axis(1))
        .dot(&params.head_weight.view().insert_axis(Axis(0)));
    let dout = layer_norm_backward(
        &dnormed,
        &trace.out_ln,
        &params.out_ln_gain,
        &mut grad.out_ln_gain,
        &mut grad.out_ln_bias,
    );

    let mut dcentroid = Array1::zeros(params.hyper.d);
    for m in 1..k {
        let mut dh = dout.slice(s![m * s..(m + 1) * s, ..]).to_owned();
        for (b, cache) in trace.cross[m - 1].iter().enumerate().rev() {
            dh = cross_block_backward(
                &dh,
                cache,
                trace.centroid.view(),
                &params.correlation,
                &params.cross[b],
                &mut grad.cross[b],
                &mut grad.correlation,
                &mut dcentroid,
                n_head,
            );
        }
        grad.rank_embedding
            .slice_mut(s![m * s..(m + 1) * s, ..])
            .assign(&dh);
    }

    let mut dh = dout.slice(s![0..s, ..]).to_owned();
    dh.row_mut(0).scaled_add(1.0, &dcentroid);
    for (b, cache) in trace.encoder.iter().enumerate().rev() {
        dh = block_backward(&dh, cache, &params.encoder[b], &mut grad.encoder[b], n_head);
    }
    grad.rank_embedding.slice_mut(s![0..s, ..]).assign(&dh);
    grad
}
