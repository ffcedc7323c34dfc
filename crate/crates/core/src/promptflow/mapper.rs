//! Knowledge compression and cross-modal mapping.
//!
//! [`compress_layer`] is the layer-specific knowledge proxy: one light
//! cross-attention (no residual, no FFN) that squeezes a layer's m prompt
//! tokens into a single proxy token, so a segment of s layers hands the
//! mapper s tokens instead of s·m. [`map_prompts`] is the hierarchical
//! knowledge mapper: pre-LN multi-head cross-attention from target-modality
//! prompt tokens onto the proxy set, residual, then a residual GELU FFN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    linear, multi_head_attention, AttentionProj, Graph, NodeId, Tensor, LN_EPS,
};

const INIT_STD: f64 = 0.02;

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng).with_requires_grad(true)
}

/// Layer-specific knowledge proxy projections, all square in the source
/// modality width.
#[derive(Debug, Clone)]
pub struct Lkp {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLkp {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

impl Lkp {
    pub fn init(d_src: usize, rng: &mut impl Rng) -> Lkp {
        Lkp {
            wq: randn(&[d_src, d_src], rng),
            wk: randn(&[d_src, d_src], rng),
            wv: randn(&[d_src, d_src], rng),
            wo: randn(&[d_src, d_src], rng),
        }
    }

    pub fn bind(&self, prefix: &str, alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId) -> BoundLkp {
        BoundLkp {
            wq: alloc(&format!("{prefix}.wq"), &self.wq),
            wk: alloc(&format!("{prefix}.wk"), &self.wk),
            wv: alloc(&format!("{prefix}.wv"), &self.wv),
            wo: alloc(&format!("{prefix}.wo"), &self.wo),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Squeezes one layer's prompts `[m, d]` into a single proxy token `[1, d]`:
/// single-head `softmax(q Kᵀ / √d) V` with learned projections, query =
/// `proxy_init`, keys = values = the prompts. No residual, no FFN.
pub fn compress_layer(
    g: &mut Graph,
    lkp: &BoundLkp,
    layer_prompts: NodeId,
    proxy_init: NodeId,
) -> Result<NodeId> {
    let d = g.shape_of(lkp.wq)[0];
    if g.shape_of(layer_prompts).get(1) != Some(&d) {
        return Err(Error::dim(
            "compress_layer prompts",
            &[g.shape_of(layer_prompts)[0], d],
            g.shape_of(layer_prompts),
        ));
    }
    if g.shape_of(proxy_init) != [1, d] {
        return Err(Error::dim(
            "compress_layer proxy_init",
            &[1, d],
            g.shape_of(proxy_init),
        ));
    }
    let proj = AttentionProj {
        wq: lkp.wq,
        bq: None,
        wk: lkp.wk,
        bk: None,
        wv: lkp.wv,
        bv: None,
        wo: lkp.wo,
        bo: None,
    };
    multi_head_attention(g, proxy_init, layer_prompts, layer_prompts, &proj, 1)
}

/// Parameter-free baseline: the proxy is the mean of the m prompt tokens.
pub fn compress_average(g: &mut Graph, layer_prompts: NodeId) -> Result<NodeId> {
    let m = g.shape_of(layer_prompts)[0];
    let weights = g.leaf_from(&[1, m], vec![1.0 / m as f64; m], false)?;
    g.matmul(weights, layer_prompts)
}

/// Two-layer GELU MLP baseline over the concatenated prompt tokens.
#[derive(Debug, Clone)]
pub struct MlpCompressor {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MlpCompressor {
    /// Hidden width m·d/2 (at least 1).
    pub fn init(m: usize, d_src: usize, rng: &mut impl Rng) -> MlpCompressor {
        let hidden = (m * d_src / 2).max(1);
        MlpCompressor {
            w1: randn(&[m * d_src, hidden], rng),
            b1: Tensor::zeros(&[hidden]).with_requires_grad(true),
            w2: randn(&[hidden, d_src], rng),
            b2: Tensor::zeros(&[d_src]).with_requires_grad(true),
        }
    }

    pub fn bind(&self, prefix: &str, alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId) -> BoundMlp {
        BoundMlp {
            w1: alloc(&format!("{prefix}.w1"), &self.w1),
            b1: alloc(&format!("{prefix}.b1"), &self.b1),
            w2: alloc(&format!("{prefix}.w2"), &self.w2),
            b2: alloc(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

pub fn compress_mlp(g: &mut Graph, mlp: &BoundMlp, layer_prompts: NodeId) -> Result<NodeId> {
    let m = g.shape_of(layer_prompts)[0];
    let rows: Vec<NodeId> = (0..m)
        .map(|i| g.slice_rows(layer_prompts, i, 1))
        .collect::<Result<_>>()?;
    let flat = g.concat_cols(&rows)?;
    let h = linear(g, flat, mlp.w1, Some(mlp.b1))?;
    let h = g.gelu(h)?;
    linear(g, h, mlp.w2, Some(mlp.b2))
}

/// Hierarchical knowledge mapper parameters. `wk`/`wv` project the source
/// modality's proxies into the target width; everything else lives in the
/// target width.
#[derive(Debug, Clone)]
pub struct Mapper {
    pub ln_q_gain: Tensor,
    pub ln_q_bias: Tensor,
    pub ln_kv_gain: Tensor,
    pub ln_kv_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMapper {
    pub heads: usize,
    pub ln_q_gain: NodeId,
    pub ln_q_bias: NodeId,
    pub ln_kv_gain: NodeId,
    pub ln_kv_bias: NodeId,
    pub attn: AttentionProj,
    pub ln_f_gain: NodeId,
    pub ln_f_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl Mapper {
    pub fn init(d_src: usize, d_tgt: usize, rng: &mut impl Rng) -> Mapper {
        Mapper {
            ln_q_gain: Tensor::ones(&[d_tgt]).with_requires_grad(true),
            ln_q_bias: Tensor::zeros(&[d_tgt]).with_requires_grad(true),
            ln_kv_gain: Tensor::ones(&[d_src]).with_requires_grad(true),
            ln_kv_bias: Tensor::zeros(&[d_src]).with_requires_grad(true),
            wq: randn(&[d_tgt, d_tgt], rng),
            wk: randn(&[d_src, d_tgt], rng),
            wv: randn(&[d_src, d_tgt], rng),
            wo: randn(&[d_tgt, d_tgt], rng),
            ln_f_gain: Tensor::ones(&[d_tgt]).with_requires_grad(true),
            ln_f_bias: Tensor::zeros(&[d_tgt]).with_requires_grad(true),
            w1: randn(&[d_tgt, 4 * d_tgt], rng),
            b1: Tensor::zeros(&[4 * d_tgt]).with_requires_grad(true),
            w2: randn(&[4 * d_tgt, d_tgt], rng),
            b2: Tensor::zeros(&[d_tgt]).with_requires_grad(true),
        }
    }

    pub fn bind(
        &self,
        prefix: &str,
        heads: usize,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> BoundMapper {
        BoundMapper {
            heads,
            ln_q_gain: alloc(&format!("{prefix}.ln_q.gain"), &self.ln_q_gain),
            ln_q_bias: alloc(&format!("{prefix}.ln_q.bias"), &self.ln_q_bias),
            ln_kv_gain: alloc(&format!("{prefix}.ln_kv.gain"), &self.ln_kv_gain),
            ln_kv_bias: alloc(&format!("{prefix}.ln_kv.bias"), &self.ln_kv_bias),
            attn: AttentionProj {
                wq: alloc(&format!("{prefix}.attn.wq"), &self.wq),
                bq: None,
                wk: alloc(&format!("{prefix}.attn.wk"), &self.wk),
                bk: None,
                wv: alloc(&format!("{prefix}.attn.wv"), &self.wv),
                bv: None,
                wo: alloc(&format!("{prefix}.attn.wo"), &self.wo),
                bo: None,
            },
            ln_f_gain: alloc(&format!("{prefix}.ln_f.gain"), &self.ln_f_gain),
            ln_f_bias: alloc(&format!("{prefix}.ln_f.bias"), &self.ln_f_bias),
            w1: alloc(&format!("{prefix}.ffn.w1"), &self.w1),
            b1: alloc(&format!("{prefix}.ffn.b1"), &self.b1),
            w2: alloc(&format!("{prefix}.ffn.w2"), &self.w2),
            b2: alloc(&format!("{prefix}.ffn.b2"), &self.b2),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.ln_q.gain"), &mut self.ln_q_gain);
        f(&format!("{prefix}.ln_q.bias"), &mut self.ln_q_bias);
        f(&format!("{prefix}.ln_kv.gain"), &mut self.ln_kv_gain);
        f(&format!("{prefix}.ln_kv.bias"), &mut self.ln_kv_bias);
        f(&format!("{prefix}.attn.wq"), &mut self.wq);
        f(&format!("{prefix}.attn.wk"), &mut self.wk);
        f(&format!("{prefix}.attn.wv"), &mut self.wv);
        f(&format!("{prefix}.attn.wo"), &mut self.wo);
        f(&format!("{prefix}.ln_f.gain"), &mut self.ln_f_gain);
        f(&format!("{prefix}.ln_f.bias"), &mut self.ln_f_bias);
        f(&format!("{prefix}.ffn.w1"), &mut self.w1);
        f(&format!("{prefix}.ffn.b1"), &mut self.b1);
        f(&format!("{prefix}.ffn.w2"), &mut self.w2);
        f(&format!("{prefix}.ffn.b2"), &mut self.b2);
    }

    /// Zeroes the attention output projection and the FFN second layer, so
    /// mapping becomes the identity on its queries.
    pub fn zero_residual_branches(&mut self) {
        for t in [&mut self.wo, &mut self.w2, &mut self.b2] {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// One mapper application: queries `[rows, d_tgt]` cross-attend to the proxy
/// matrix `[s, d_src]` with pre-LN and residual, then a residual pre-LN FFN.
fn mapper_forward(
    g: &mut Graph,
    mapper: &BoundMapper,
    queries: NodeId,
    proxy_matrix: NodeId,
) -> Result<NodeId> {
    let q_norm = g.layer_norm(queries, mapper.ln_q_gain, mapper.ln_q_bias, LN_EPS)?;
    let kv_norm = g.layer_norm(proxy_matrix, mapper.ln_kv_gain, mapper.ln_kv_bias, LN_EPS)?;
    let att = multi_head_attention(g, q_norm, kv_norm, kv_norm, &mapper.attn, mapper.heads)?;
    let x = g.add(queries, att)?;
    let f_norm = g.layer_norm(x, mapper.ln_f_gain, mapper.ln_f_bias, LN_EPS)?;
    let h = linear(g, f_norm, mapper.w1, Some(mapper.b1))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, mapper.w2, Some(mapper.b2))?;
    g.add(x, h)
}

/// How the mapper fans proxies into target layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapperScale {
    /// Layer l's prompts attend only to proxy l (layer-to-layer baseline).
    Single,
    /// Every layer's prompts attend to all proxies of the segment.
    Multi,
}

impl MapperScale {
    pub fn as_str(self) -> &'static str {
        match self {
            MapperScale::Single => "single",
            MapperScale::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Result<MapperScale> {
        match s {
            "single" => Ok(MapperScale::Single),
            "multi" => Ok(MapperScale::Multi),
            other => Err(Error::Config(format!("unknown mapper scale `{other}`"))),
        }
    }
}

/// Refines one segment's target prompts (`targets[l]` is `[m, d_tgt]`)
/// against the segment's proxies. Multi-scale flattens all target tokens
/// into one query block over the full proxy matrix; single-scale pairs each
/// layer with its own proxy.
pub fn map_prompts(
    g: &mut Graph,
    mapper: &BoundMapper,
    targets: &[NodeId],
    proxies: &[NodeId],
    scale: MapperScale,
) -> Result<Vec<NodeId>> {
    if proxies.is_empty() || targets.is_empty() {
        return Err(Error::Config("map_prompts over an empty segment".into()));
    }
    if targets.len() != proxies.len() {
        return Err(Error::Contract(format!(
            "map_prompts got {} target layers but {} proxies",
            targets.len(),
            proxies.len()
        )));
    }
    match scale {
        MapperScale::Single => targets
            .iter()
            .zip(proxies)
            .map(|(&t, &p)| mapper_forward(g, mapper, t, p))
            .collect(),
        MapperScale::Multi => {
            let m = g.shape_of(targets[0])[0];
            let stacked = g.concat_rows(targets)?;
            let proxy_matrix = g.concat_rows(proxies)?;
            let refined = mapper_forward(g, mapper, stacked, proxy_matrix)?;
            (0..targets.len())
                .map(|l| g.slice_rows(refined, l * m, m))
                .collect()
        }
    }
}
