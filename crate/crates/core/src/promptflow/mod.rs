//! Bidirectional knowledge flow between the prompt stacks of the two towers.
//!
//! Each tower owns L layers of learnable prompts. A boundary splits the
//! depth into two flow segments: in the first, one modality is the source
//! and pushes knowledge into the other's prompts; past the boundary the
//! roles swap. Per layer, the source's prompts are squeezed into a single
//! proxy token ([`compress_layer`]), and the segment's proxies refine the
//! target's prompts through a cross-attention mapper ([`map_prompts`]).
//! [`BoundFlow::materialize`] runs both segments and returns the effective
//! prompts the encoders consume; source-side prompts pass through untouched.

mod mapper;

pub use mapper::{
    compress_average, compress_layer, compress_mlp, map_prompts, BoundLkp, BoundMapper, BoundMlp,
    Lkp, Mapper, MapperScale, MlpCompressor,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

const INIT_STD: f64 = 0.02;

/// Direction schedule of the knowledge flow across depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    /// Text is the source at every layer (boundary at L).
    UnidirTI,
    /// Image is the source at every layer (boundary at 0).
    UnidirIT,
    /// Text feeds image up to the boundary, then image feeds text.
    BidirTIThenIT,
    /// Image feeds text up to the boundary, then text feeds image.
    BidirITThenTI,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::UnidirTI => "unidir_ti",
            Mechanism::UnidirIT => "unidir_it",
            Mechanism::BidirTIThenIT => "bidir_ti_then_it",
            Mechanism::BidirITThenTI => "bidir_it_then_ti",
        }
    }

    pub fn parse(s: &str) -> Result<Mechanism> {
        match s {
            "unidir_ti" => Ok(Mechanism::UnidirTI),
            "unidir_it" => Ok(Mechanism::UnidirIT),
            "bidir_ti_then_it" => Ok(Mechanism::BidirTIThenIT),
            "bidir_it_then_ti" => Ok(Mechanism::BidirITThenTI),
            other => Err(Error::Config(format!("unknown flow mechanism `{other}`"))),
        }
    }
}

/// Squeeze function turning a layer's m prompts into one proxy token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    /// Learned single-head cross-attention from a per-layer query.
    Lkp,
    /// Mean of the prompt tokens.
    Average,
    /// Two-layer GELU MLP over the concatenated tokens.
    Mlp,
}

impl Compression {
    pub fn as_str(self) -> &'static str {
        match self {
            Compression::Lkp => "lkp",
            Compression::Average => "average",
            Compression::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Compression> {
        match s {
            "lkp" => Ok(Compression::Lkp),
            "average" => Ok(Compression::Average),
            "mlp" => Ok(Compression::Mlp),
            other => Err(Error::Config(format!("unknown compression `{other}`"))),
        }
    }
}

/// Everything that selects a flow variant, independent of tower widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub mechanism: Mechanism,
    pub mapper_scale: MapperScale,
    pub compression: Compression,
    pub mapper_heads: usize,
}

impl Default for FlowConfig {
    fn default() -> FlowConfig {
        FlowConfig {
            mechanism: Mechanism::BidirTIThenIT,
            mapper_scale: MapperScale::Multi,
            compression: Compression::Lkp,
            mapper_heads: 1,
        }
    }
}

/// Which modality acts as the source in (first segment, second segment).
/// The unidirectional mechanisms are the boundary-at-the-end cases of the
/// text-first schedule, so they share its assignment; the segment that does
/// not exist is never consulted.
fn source_modalities(mechanism: Mechanism) -> (Modality, Modality) {
    match mechanism {
        Mechanism::BidirITThenTI => (Modality::Visual, Modality::Text),
        _ => (Modality::Text, Modality::Visual),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

/// The two flow segments: layers `1..=k` and layers `k+1..=L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    First,
    Second,
}

fn validate_boundary(mechanism: Mechanism, boundary_k: usize, layers: usize) -> Result<()> {
    let ok = match mechanism {
        Mechanism::UnidirTI => boundary_k == layers,
        Mechanism::UnidirIT => boundary_k == 0,
        Mechanism::BidirTIThenIT | Mechanism::BidirITThenTI => {
            boundary_k >= 1 && boundary_k <= layers - 1
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "boundary {boundary_k} is invalid for mechanism {} with {layers} layers",
            mechanism.as_str()
        )))
    }
}

/// Learnable prompt state for both towers: per-layer prompt tokens plus the
/// per-layer proxy query used by compression. Proxy widths follow the source
/// modality of the segment each layer belongs to.
#[derive(Debug, Clone)]
pub struct PromptStack {
    pub mechanism: Mechanism,
    pub boundary_k: usize,
    pub text_prompts: Vec<Tensor>,
    pub visual_prompts: Vec<Tensor>,
    pub proxy_inits: Vec<Tensor>,
}

/// Initializes all prompt and proxy parameters from N(0, 0.02²). The same
/// seed reproduces the same stack bit for bit.
pub fn init_prompt_stack(
    config: &EncoderConfig,
    mechanism: Mechanism,
    boundary_k: usize,
    seed: u64,
) -> Result<PromptStack> {
    config.validate()?;
    validate_boundary(mechanism, boundary_k, config.layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = config.prompt_len;
    let (first_src, second_src) = source_modalities(mechanism);
    let mut text_prompts = Vec::with_capacity(config.layers);
    let mut visual_prompts = Vec::with_capacity(config.layers);
    let mut proxy_inits = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        text_prompts.push(trainable(&[m, config.d_t], &mut rng));
        visual_prompts.push(trainable(&[m, config.d_v], &mut rng));
        let src = if layer < boundary_k { first_src } else { second_src };
        let width = match src {
            Modality::Text => config.d_t,
            Modality::Visual => config.d_v,
        };
        proxy_inits.push(trainable(&[1, width], &mut rng));
    }
    Ok(PromptStack {
        mechanism,
        boundary_k,
        text_prompts,
        visual_prompts,
        proxy_inits,
    })
}

fn trainable(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng).with_requires_grad(true)
}

impl PromptStack {
    pub fn layers(&self) -> usize {
        self.text_prompts.len()
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, t) in self.text_prompts.iter_mut().enumerate() {
            f(&format!("prompts.text{l}"), t);
        }
        for (l, t) in self.visual_prompts.iter_mut().enumerate() {
            f(&format!("prompts.visual{l}"), t);
        }
        for (l, t) in self.proxy_inits.iter_mut().enumerate() {
            f(&format!("prompts.proxy{l}"), t);
        }
    }

    fn bind(&self, alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId) -> BoundStack {
        BoundStack {
            text_prompts: self
                .text_prompts
                .iter()
                .enumerate()
                .map(|(l, t)| alloc(&format!("prompts.text{l}"), t))
                .collect(),
            visual_prompts: self
                .visual_prompts
                .iter()
                .enumerate()
                .map(|(l, t)| alloc(&format!("prompts.visual{l}"), t))
                .collect(),
            proxy_inits: self
                .proxy_inits
                .iter()
                .enumerate()
                .map(|(l, t)| alloc(&format!("prompts.proxy{l}"), t))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct BoundStack {
    text_prompts: Vec<NodeId>,
    visual_prompts: Vec<NodeId>,
    proxy_inits: Vec<NodeId>,
}

/// Per-segment compressor parameters, matching [`Compression`].
#[derive(Debug, Clone)]
pub enum Compressor {
    Lkp(Lkp),
    Average,
    Mlp(MlpCompressor),
}

impl Compressor {
    fn init(compression: Compression, m: usize, d_src: usize, rng: &mut impl Rng) -> Compressor {
        match compression {
            Compression::Lkp => Compressor::Lkp(Lkp::init(d_src, rng)),
            Compression::Average => Compressor::Average,
            Compression::Mlp => Compressor::Mlp(MlpCompressor::init(m, d_src, rng)),
        }
    }

    fn bind(
        &self,
        prefix: &str,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> BoundCompressor {
        match self {
            Compressor::Lkp(l) => BoundCompressor::Lkp(l.bind(&format!("{prefix}.lkp"), alloc)),
            Compressor::Average => BoundCompressor::Average,
            Compressor::Mlp(m) => BoundCompressor::Mlp(m.bind(&format!("{prefix}.mlp"), alloc)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Compressor::Lkp(l) => l.visit_mut(&format!("{prefix}.lkp"), f),
            Compressor::Average => {}
            Compressor::Mlp(m) => m.visit_mut(&format!("{prefix}.mlp"), f),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundCompressor {
    Lkp(BoundLkp),
    Average,
    Mlp(BoundMlp),
}

/// One flow segment's learned machinery: the compressor producing proxies
/// from the source prompts, and the mapper refining the target prompts.
#[derive(Debug, Clone)]
pub struct SegmentParams {
    pub compressor: Compressor,
    pub mapper: Mapper,
}

impl SegmentParams {
    fn init(
        flow: &FlowConfig,
        m: usize,
        d_src: usize,
        d_tgt: usize,
        rng: &mut impl Rng,
    ) -> SegmentParams {
        SegmentParams {
            compressor: Compressor::init(flow.compression, m, d_src, rng),
            mapper: Mapper::init(d_src, d_tgt, rng),
        }
    }

    fn bind(
        &self,
        prefix: &str,
        heads: usize,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> BoundSegment {
        BoundSegment {
            compressor: self.compressor.bind(prefix, alloc),
            mapper: self.mapper.bind(&format!("{prefix}.mapper"), heads, alloc),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.compressor.visit_mut(prefix, f);
        self.mapper.visit_mut(&format!("{prefix}.mapper"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BoundSegment {
    pub compressor: BoundCompressor,
    pub mapper: BoundMapper,
}

/// The full prompt-flow state: stack plus the per-segment compressor and
/// mapper parameters. Segments that are empty under the chosen boundary
/// carry no parameters.
#[derive(Debug, Clone)]
pub struct PromptFlow {
    pub flow: FlowConfig,
    pub stack: PromptStack,
    pub first: Option<SegmentParams>,
    pub second: Option<SegmentParams>,
}

impl PromptFlow {
    /// Builds stack and segment parameters from one seed. The stack draws
    /// from the seed's stream 0 and the segments from stream 1, so the stack
    /// matches [`init_prompt_stack`] with the same arguments exactly.
    pub fn init(
        config: &EncoderConfig,
        flow: FlowConfig,
        boundary_k: usize,
        seed: u64,
    ) -> Result<PromptFlow> {
        let stack = init_prompt_stack(config, flow.mechanism, boundary_k, seed)?;
        if flow.mapper_heads == 0 {
            return Err(Error::Config("mapper_heads must be at least 1".into()));
        }
        if config.d_t % flow.mapper_heads != 0 || config.d_v % flow.mapper_heads != 0 {
            return Err(Error::Config(format!(
                "mapper_heads {} must divide both tower widths {} and {}",
                flow.mapper_heads, config.d_t, config.d_v
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let (first_src, second_src) = source_modalities(flow.mechanism);
        let widths = |m: Modality| match m {
            Modality::Text => (config.d_t, config.d_v),
            Modality::Visual => (config.d_v, config.d_t),
        };
        let first = (boundary_k > 0).then(|| {
            let (d_src, d_tgt) = widths(first_src);
            SegmentParams::init(&flow, config.prompt_len, d_src, d_tgt, &mut rng)
        });
        let second = (boundary_k < config.layers).then(|| {
            let (d_src, d_tgt) = widths(second_src);
            SegmentParams::init(&flow, config.prompt_len, d_src, d_tgt, &mut rng)
        });
        Ok(PromptFlow {
            flow,
            stack,
            first,
            second,
        })
    }

    pub fn bind(&self, alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId) -> Result<BoundFlow> {
        validate_boundary(
            self.stack.mechanism,
            self.stack.boundary_k,
            self.stack.layers(),
        )?;
        if self.flow.mechanism != self.stack.mechanism {
            return Err(Error::Config(format!(
                "flow mechanism {} does not match the stack's {}",
                self.flow.mechanism.as_str(),
                self.stack.mechanism.as_str()
            )));
        }
        let stack = self.stack.bind(alloc);
        let first = self
            .first
            .as_ref()
            .map(|s| s.bind("first", self.flow.mapper_heads, alloc));
        let second = self
            .second
            .as_ref()
            .map(|s| s.bind("second", self.flow.mapper_heads, alloc));
        Ok(BoundFlow {
            flow: self.flow,
            boundary_k: self.stack.boundary_k,
            stack,
            first,
            second,
        })
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stack.visit_mut(f);
        if let Some(s) = self.first.as_mut() {
            s.visit_mut("first", f);
        }
        if let Some(s) = self.second.as_mut() {
            s.visit_mut("second", f);
        }
    }
}

/// Graph-side prompt flow for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundFlow {
    pub flow: FlowConfig,
    pub boundary_k: usize,
    stack: BoundStack,
    first: Option<BoundSegment>,
    second: Option<BoundSegment>,
}

/// Proxy tokens of one segment, one `[1, d_src]` node per source layer.
#[derive(Debug, Clone)]
pub struct ProxySet {
    pub proxies: Vec<NodeId>,
    pub width: usize,
}

/// Prompts the encoders actually consume: `text[l]` is `[m, d_t]`,
/// `visual[l]` is `[m, d_v]`. Pass-through entries are the raw stack
/// parameters; mapped entries are refined by the other modality's proxies.
#[derive(Debug, Clone)]
pub struct EffectivePrompts {
    pub text: Vec<NodeId>,
    pub visual: Vec<NodeId>,
}

impl BoundFlow {
    pub fn layers(&self) -> usize {
        self.stack.text_prompts.len()
    }

    pub fn text_prompt(&self, layer: usize) -> NodeId {
        self.stack.text_prompts[layer]
    }

    pub fn visual_prompt(&self, layer: usize) -> NodeId {
        self.stack.visual_prompts[layer]
    }

    fn segment_range(&self, segment: Segment) -> std::ops::Range<usize> {
        match segment {
            Segment::First => 0..self.boundary_k,
            Segment::Second => self.boundary_k..self.layers(),
        }
    }

    fn segment_source(&self, segment: Segment) -> Modality {
        let (first, second) = source_modalities(self.flow.mechanism);
        match segment {
            Segment::First => first,
            Segment::Second => second,
        }
    }

    fn segment_params(&self, segment: Segment) -> Result<&BoundSegment> {
        let params = match segment {
            Segment::First => self.first.as_ref(),
            Segment::Second => self.second.as_ref(),
        };
        params.ok_or_else(|| {
            Error::Config(format!(
                "{:?} segment has no parameters; its layer range is empty",
                segment
            ))
        })
    }

    /// Compresses every source layer of one segment into its proxy token.
    pub fn build_proxies(&self, g: &mut Graph, segment: Segment) -> Result<ProxySet> {
        let range = self.segment_range(segment);
        if range.is_empty() {
            return Err(Error::Config(format!(
                "{:?} segment is empty at boundary {}",
                segment, self.boundary_k
            )));
        }
        let source = self.segment_source(segment);
        let params = self.segment_params(segment)?;
        let mut proxies = Vec::with_capacity(range.len());
        let mut width = 0;
        for layer in range {
            let prompts = match source {
                Modality::Text => self.stack.text_prompts[layer],
                Modality::Visual => self.stack.visual_prompts[layer],
            };
            width = g.shape_of(prompts)[1];
            let proxy = match &params.compressor {
                BoundCompressor::Lkp(lkp) => {
                    compress_layer(g, lkp, prompts, self.stack.proxy_inits[layer])?
                }
                BoundCompressor::Average => compress_average(g, prompts)?,
                BoundCompressor::Mlp(mlp) => compress_mlp(g, mlp, prompts)?,
            };
            proxies.push(proxy);
        }
        Ok(ProxySet { proxies, width })
    }

    /// Runs the flow end to end and returns the effective prompts for both
    /// towers. Source-side layers keep their raw parameter nodes; target
    /// layers are refined by the segment's mapper.
    pub fn materialize(&self, g: &mut Graph) -> Result<EffectivePrompts> {
        let mut text = self.stack.text_prompts.clone();
        let mut visual = self.stack.visual_prompts.clone();
        for segment in [Segment::First, Segment::Second] {
            let range = self.segment_range(segment);
            if range.is_empty() {
                continue;
            }
            let proxies = self.build_proxies(g, segment)?;
            let params = self.segment_params(segment)?;
            let targets: Vec<NodeId> = match self.segment_source(segment) {
                Modality::Text => visual[range.clone()].to_vec(),
                Modality::Visual => text[range.clone()].to_vec(),
            };
            let refined = map_prompts(
                g,
                &params.mapper,
                &targets,
                &proxies.proxies,
                self.flow.mapper_scale,
            )?;
            match self.segment_source(segment) {
                Modality::Text => visual[range].clone_from_slice(&refined),
                Modality::Visual => text[range].clone_from_slice(&refined),
            }
        }
        Ok(EffectivePrompts { text, visual })
    }
}

#[cfg(test)]
mod tests;
