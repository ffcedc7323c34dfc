//! Multi-head scaled dot-product attention assembled from graph primitives.
//! Both encoder towers (self-attention) and the hierarchical knowledge
//! mapper (cross-attention) route through this one implementation.

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, NodeId};

/// Projection parameters of one attention block, already bound to a graph.
/// Key/value projections may map from a different source width than the
/// query side; biases are optional (the mapper's projections carry none).
#[derive(Debug, Clone, Copy)]
pub struct AttentionProj {
    pub wq: NodeId,
    pub bq: Option<NodeId>,
    pub wk: NodeId,
    pub bk: Option<NodeId>,
    pub wv: NodeId,
    pub bv: Option<NodeId>,
    pub wo: NodeId,
    pub bo: Option<NodeId>,
}

/// `x . w` plus an optional bias row.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// `softmax(Q Kᵀ / sqrt(d_head)) V` per head, heads concatenated and passed
/// through the output projection. `queries` supplies the query rows;
/// `keys`/`values` are usually the same node (self-attention) or the proxy
/// set (cross-attention).
pub fn multi_head_attention(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    proj: &AttentionProj,
    heads: usize,
) -> Result<NodeId> {
    if heads == 0 {
        return Err(Error::Config("attention with zero heads".into()));
    }
    let q = linear(g, queries, proj.wq, proj.bq)?;
    let k = linear(g, keys, proj.wk, proj.bk)?;
    let v = linear(g, values, proj.wv, proj.bv)?;
    let dm = g.shape_of(q)[1];
    if g.shape_of(k)[1] != dm || g.shape_of(v)[1] != dm {
        return Err(Error::dim("attention projections", g.shape_of(k), &[0, dm]));
    }
    if dm % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {dm} not divisible by {heads} heads"
        )));
    }
    let dh = dm / heads;
    let temp = (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let attn = g.softmax(scores, temp)?;
        ctx.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        ctx[0]
    } else {
        g.concat_cols(&ctx)?
    };
    linear(g, merged, proj.wo, proj.bo)
}
