//! Dual transformer towers with per-layer prompt slots.
//!
//! Both towers are pre-LN transformers: `x += attn(ln(x))` then
//! `x += ffn(ln(x))`, a final layer norm, and a linear projection into the
//! shared joint space. Prompted encoding REPLACES the first `m` sequence
//! rows with that layer's prompt tokens before every block, so the sequence
//! length never grows with depth and earlier prompt outputs are discarded.
//! Supplying fewer prompt layers than encoder layers sets the injection
//! depth: layers past the supplied count keep the evolved prompt rows and
//! process them as ordinary tokens.

use rand::Rng;

use crate::encoders::{EncoderConfig, Image};
use crate::error::{Error, Result};
use crate::numcore::{linear, multi_head_attention, AttentionProj, Graph, NodeId, Tensor, LN_EPS};

/// Fan-in scaled init keeps every projection's output on the same order as
/// its LayerNormed input, whatever the tower width. A flat small std would
/// leave attention and FFN contributions negligible next to the residual
/// stream at desk widths, and the readout rows (EOS, class token) would
/// then barely depend on the input.
fn fan_in_randn(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (fan_in as f64).powf(-0.5), rng).with_requires_grad(true)
}

/// One pre-LN transformer block's parameters.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Graph-side handle to one block's leaves.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub attn: AttentionProj,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}


impl TransformerBlock {
    pub fn init(width: usize, rng: &mut impl Rng) -> TransformerBlock {
        let w = width;
        TransformerBlock {
            ln1_gain: Tensor::ones(&[w]).with_requires_grad(true),
            ln1_bias: Tensor::zeros(&[w]).with_requires_grad(true),
            wq: fan_in_randn(&[w, w], w, rng),
            bq: Tensor::zeros(&[w]).with_requires_grad(true),
            wk: fan_in_randn(&[w, w], w, rng),
            bk: Tensor::zeros(&[w]).with_requires_grad(true),
            wv: fan_in_randn(&[w, w], w, rng),
            bv: Tensor::zeros(&[w]).with_requires_grad(true),
            wo: fan_in_randn(&[w, w], w, rng),
            bo: Tensor::zeros(&[w]).with_requires_grad(true),
            ln2_gain: Tensor::ones(&[w]).with_requires_grad(true),
            ln2_bias: Tensor::zeros(&[w]).with_requires_grad(true),
            w1: fan_in_randn(&[w, 4 * w], w, rng),
            b1: Tensor::zeros(&[4 * w]).with_requires_grad(true),
            w2: fan_in_randn(&[4 * w, w], 4 * w, rng),
            b2: Tensor::zeros(&[w]).with_requires_grad(true),
        }
    }

    pub fn bind(
        &self,
        prefix: &str,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> BoundBlock {
        BoundBlock {
            ln1_gain: alloc(&format!("{prefix}.ln1.gain"), &self.ln1_gain),
            ln1_bias: alloc(&format!("{prefix}.ln1.bias"), &self.ln1_bias),
            attn: AttentionProj {
                wq: alloc(&format!("{prefix}.attn.wq"), &self.wq),
                bq: Some(alloc(&format!("{prefix}.attn.bq"), &self.bq)),
                wk: alloc(&format!("{prefix}.attn.wk"), &self.wk),
                bk: Some(alloc(&format!("{prefix}.attn.bk"), &self.bk)),
                wv: alloc(&format!("{prefix}.attn.wv"), &self.wv),
                bv: Some(alloc(&format!("{prefix}.attn.bv"), &self.bv)),
                wo: alloc(&format!("{prefix}.attn.wo"), &self.wo),
                bo: Some(alloc(&format!("{prefix}.attn.bo"), &self.bo)),
            },
            ln2_gain: alloc(&format!("{prefix}.ln2.gain"), &self.ln2_gain),
            ln2_bias: alloc(&format!("{prefix}.ln2.bias"), &self.ln2_bias),
            w1: alloc(&format!("{prefix}.ffn.w1"), &self.w1),
            b1: alloc(&format!("{prefix}.ffn.b1"), &self.b1),
            w2: alloc(&format!("{prefix}.ffn.w2"), &self.w2),
            b2: alloc(&format!("{prefix}.ffn.b2"), &self.b2),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.ln1.gain"), &mut self.ln1_gain);
        f(&format!("{prefix}.ln1.bias"), &mut self.ln1_bias);
        f(&format!("{prefix}.attn.wq"), &mut self.wq);
        f(&format!("{prefix}.attn.bq"), &mut self.bq);
        f(&format!("{prefix}.attn.wk"), &mut self.wk);
        f(&format!("{prefix}.attn.bk"), &mut self.bk);
        f(&format!("{prefix}.attn.wv"), &mut self.wv);
        f(&format!("{prefix}.attn.bv"), &mut self.bv);
        f(&format!("{prefix}.attn.wo"), &mut self.wo);
        f(&format!("{prefix}.attn.bo"), &mut self.bo);
        f(&format!("{prefix}.ln2.gain"), &mut self.ln2_gain);
        f(&format!("{prefix}.ln2.bias"), &mut self.ln2_bias);
        f(&format!("{prefix}.ffn.w1"), &mut self.w1);
        f(&format!("{prefix}.ffn.b1"), &mut self.b1);
        f(&format!("{prefix}.ffn.w2"), &mut self.w2);
        f(&format!("{prefix}.ffn.b2"), &mut self.b2);
    }
}

/// `x + attn(ln(x))`, then `x + ffn(ln(x))`.
pub fn block_forward(g: &mut Graph, x: NodeId, bb: &BoundBlock, heads: usize) -> Result<NodeId> {
    let normed = g.layer_norm(x, bb.ln1_gain, bb.ln1_bias, LN_EPS)?;
    let attn = multi_head_attention(g, normed, normed, normed, &bb.attn, heads)?;
    let x = g.add(x, attn)?;
    let normed = g.layer_norm(x, bb.ln2_gain, bb.ln2_bias, LN_EPS)?;
    let h = linear(g, normed, bb.w1, Some(bb.b1))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, bb.w2, Some(bb.b2))?;
    g.add(x, h)
}

/// Replaces rows `0..m` of `x` with `prompt` (shape `[m, width]`).
fn replace_prompt_rows(g: &mut Graph, x: NodeId, prompt: NodeId, m: usize) -> Result<NodeId> {
    let rows = g.shape_of(x)[0];
    let rest = g.slice_rows(x, m, rows - m)?;
    g.concat_rows(&[prompt, rest])
}

fn validate_prompts(
    g: &Graph,
    prompts: &[NodeId],
    layers: usize,
    m: usize,
    width: usize,
    tower: &str,
) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::Contract(format!(
            "{tower} prompted encoding needs at least one prompt layer"
        )));
    }
    if prompts.len() > layers {
        return Err(Error::Contract(format!(
            "{tower} prompts supplied for {} layers, encoder has only {layers}",
            prompts.len()
        )));
    }
    for (l, &p) in prompts.iter().enumerate() {
        if g.shape_of(p) != [m, width] {
            return Err(Error::dim(
                &format!("{tower} prompt at layer {}", l + 1),
                &[m, width],
                g.shape_of(p),
            ));
        }
    }
    Ok(())
}

/// Shared trunk of both towers: optional layer-wise prompt replacement,
/// blocks, final norm, then the projection of one sequence row into the
/// joint space. Returns the `[1, d_joint]` feature.
#[allow(clippy::too_many_arguments)]
fn run_trunk(
    g: &mut Graph,
    mut x: NodeId,
    prompts: Option<&[NodeId]>,
    m: usize,
    heads: usize,
    blocks: &[BoundBlock],
    final_gain: NodeId,
    final_bias: NodeId,
    proj: NodeId,
    feature_row: usize,
) -> Result<NodeId> {
    for (l, bb) in blocks.iter().enumerate() {
        if let Some(p) = prompts {
            if l == 0 {
                x = g.concat_rows(&[p[0], x])?;
            } else if l < p.len() {
                x = replace_prompt_rows(g, x, p[l], m)?;
            }
        }
        x = block_forward(g, x, bb, heads)?;
    }
    let x = g.layer_norm(x, final_gain, final_bias, LN_EPS)?;
    let at = if prompts.is_some() { m + feature_row } else { feature_row };
    let row = g.slice_rows(x, at, 1)?;
    g.matmul(row, proj)
}

/// Text transformer parameters.
#[derive(Debug, Clone)]
pub struct TextTower {
    pub token_embedding: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub proj: Tensor,
}

/// Graph-side handle to a bound [`TextTower`].
#[derive(Debug, Clone)]
pub struct BoundText {
    pub heads: usize,
    pub prompt_len: usize,
    pub token_embedding: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub proj: NodeId,
}

impl TextTower {
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> TextTower {
        TextTower {
            token_embedding: fan_in_randn(&[config.vocab_size, config.d_t], config.d_t, rng),
            pos: fan_in_randn(&[config.max_text_len, config.d_t], config.d_t, rng),
            blocks: (0..config.layers)
                .map(|_| TransformerBlock::init(config.d_t, rng))
                .collect(),
            final_gain: Tensor::ones(&[config.d_t]).with_requires_grad(true),
            final_bias: Tensor::zeros(&[config.d_t]).with_requires_grad(true),
            proj: fan_in_randn(&[config.d_t, config.d_joint], config.d_t, rng),
        }
    }

    pub fn bind(
        &self,
        config: &EncoderConfig,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> BoundText {
        BoundText {
            heads: config.heads,
            prompt_len: config.prompt_len,
            token_embedding: alloc("text.token_embedding", &self.token_embedding),
            pos: alloc("text.pos", &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(&format!("text.blk{i}"), alloc))
                .collect(),
            final_gain: alloc("text.final.gain", &self.final_gain),
            final_bias: alloc("text.final.bias", &self.final_bias),
            proj: alloc("text.proj", &self.proj),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("text.token_embedding", &mut self.token_embedding);
        f("text.pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("text.blk{i}"), f);
        }
        f("text.final.gain", &mut self.final_gain);
        f("text.final.bias", &mut self.final_bias);
        f("text.proj", &mut self.proj);
    }

    /// Marks every parameter as not requiring gradients.
    pub fn freeze(&mut self) {
        self.visit_mut(&mut |_, t| t.requires_grad = false);
    }

    pub fn unfreeze(&mut self) {
        self.visit_mut(&mut |_, t| t.requires_grad = true);
    }
}

impl BoundText {
    /// Encodes one token sequence into the joint space (`[1, d_joint]`).
    /// `prompts`, when given, holds one `[m, d_t]` node per prompted layer
    /// (at most one per encoder layer); layer `l`'s prompt replaces rows
    /// `0..m` before block `l` runs.
    pub fn encode(
        &self,
        g: &mut Graph,
        tokens: &crate::encoders::TokenSequence,
        prompts: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        if let Some(p) = prompts {
            let width = g.shape_of(self.pos)[1];
            validate_prompts(g, p, self.blocks.len(), self.prompt_len, width, "text")?;
        }
        let emb = g.gather_rows(self.token_embedding, &tokens.ids)?;
        let x = g.add(emb, self.pos)?;
        run_trunk(
            g,
            x,
            prompts,
            self.prompt_len,
            self.heads,
            &self.blocks,
            self.final_gain,
            self.final_bias,
            self.proj,
            tokens.eos_position,
        )
    }
}

/// Vision transformer parameters.
#[derive(Debug, Clone)]
pub struct VisionTower {
    pub class_token: Tensor,
    pub patch_proj: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub proj: Tensor,
}

/// Graph-side handle to a bound [`VisionTower`].
#[derive(Debug, Clone)]
pub struct BoundVision {
    pub heads: usize,
    pub prompt_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub class_token: NodeId,
    pub patch_proj: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub proj: NodeId,
}

impl VisionTower {
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> VisionTower {
        VisionTower {
            class_token: fan_in_randn(&[1, config.d_v], config.d_v, rng),
            patch_proj: fan_in_randn(&[config.patch_dim(), config.d_v], config.patch_dim(), rng),
            pos: fan_in_randn(&[config.n_patches() + 1, config.d_v], config.d_v, rng),
            blocks: (0..config.layers)
                .map(|_| TransformerBlock::init(config.d_v, rng))
                .collect(),
            final_gain: Tensor::ones(&[config.d_v]).with_requires_grad(true),
            final_bias: Tensor::zeros(&[config.d_v]).with_requires_grad(true),
            proj: fan_in_randn(&[config.d_v, config.d_joint], config.d_v, rng),
        }
    }

    pub fn bind(
        &self,
        config: &EncoderConfig,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> BoundVision {
        BoundVision {
            heads: config.heads,
            prompt_len: config.prompt_len,
            image_size: config.image_size,
            patch_size: config.patch_size,
            channels: config.channels,
            class_token: alloc("vision.class_token", &self.class_token),
            patch_proj: alloc("vision.patch_proj", &self.patch_proj),
            pos: alloc("vision.pos", &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(&format!("vision.blk{i}"), alloc))
                .collect(),
            final_gain: alloc("vision.final.gain", &self.final_gain),
            final_bias: alloc("vision.final.bias", &self.final_bias),
            proj: alloc("vision.proj", &self.proj),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("vision.class_token", &mut self.class_token);
        f("vision.patch_proj", &mut self.patch_proj);
        f("vision.pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("vision.blk{i}"), f);
        }
        f("vision.final.gain", &mut self.final_gain);
        f("vision.final.bias", &mut self.final_bias);
        f("vision.proj", &mut self.proj);
    }

    pub fn freeze(&mut self) {
        self.visit_mut(&mut |_, t| t.requires_grad = false);
    }

    pub fn unfreeze(&mut self) {
        self.visit_mut(&mut |_, t| t.requires_grad = true);
    }

    /// Value-level patch embedding for inspection and tests; the training
    /// path keeps the same computation on-graph via
    /// [`BoundVision::embed_patches`].
    pub fn patch_embedding(
        &self,
        config: &EncoderConfig,
        image: &Image,
    ) -> Result<crate::encoders::PatchEmbedding> {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            self.bind(config, &mut alloc)
        };
        let node = bound.embed_patches(&mut g, image)?;
        Ok(crate::encoders::PatchEmbedding { tokens: g.tensor(node) })
    }
}

impl BoundVision {
    /// Splits the image into patches, projects them (no bias), prepends the
    /// class token, and adds positional embeddings: rows are
    /// `[class, patch_0, …, patch_{n-1}]`. Patches are read in row-major
    /// grid order; within a patch, pixels flatten as y, then x, then channel.
    pub fn embed_patches(&self, g: &mut Graph, image: &Image) -> Result<NodeId> {
        if image.size != self.image_size || image.channels != self.channels {
            return Err(Error::dim(
                "embed_patches image",
                &[self.image_size, self.image_size, self.channels],
                &[image.size, image.size, image.channels],
            ));
        }
        let ps = self.patch_size;
        let grid = self.image_size / ps;
        let n = grid * grid;
        let dim = ps * ps * self.channels;
        let mut flat = Vec::with_capacity(n * dim);
        for py in 0..grid {
            for px in 0..grid {
                for y in 0..ps {
                    for x in 0..ps {
                        for c in 0..self.channels {
                            flat.push(image.pixel(py * ps + y, px * ps + x, c));
                        }
                    }
                }
            }
        }
        let pixels = g.leaf_from(&[n, dim], flat, false)?;
        let projected = g.matmul(pixels, self.patch_proj)?;
        let seq = g.concat_rows(&[self.class_token, projected])?;
        g.add(seq, self.pos)
    }

    /// Encodes an embedded patch sequence into the joint space
    /// (`[1, d_joint]`), reading the class-token row after the final block.
    pub fn encode(
        &self,
        g: &mut Graph,
        patches: NodeId,
        prompts: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let width = g.shape_of(self.pos)[1];
        let expected_rows = g.shape_of(self.pos)[0];
        if g.shape_of(patches) != [expected_rows, width] {
            return Err(Error::dim(
                "encode_image patches",
                &[expected_rows, width],
                g.shape_of(patches),
            ));
        }
        if let Some(p) = prompts {
            validate_prompts(g, p, self.blocks.len(), self.prompt_len, width, "vision")?;
        }
        run_trunk(
            g,
            patches,
            prompts,
            self.prompt_len,
            self.heads,
            &self.blocks,
            self.final_gain,
            self.final_bias,
            self.proj,
            0,
        )
    }
}
