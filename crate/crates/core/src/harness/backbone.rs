//! The frozen dual-tower teacher: seeded initialization, contrastive
//! pretraining on rendered benchmark images, and checkpoint IO.
//!
//! Prompt learning never updates the towers; it treats them as a fixed
//! teacher whose unprompted embeddings anchor the consistency loss. This
//! module produces that teacher. [`pretrain_backbone`] aligns captions and
//! images with a symmetric contrastive objective so the zero-shot baseline
//! is meaningful, and `epochs == 0` keeps the towers at their seeded random
//! initialization for experiments that want an untrained teacher.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blockfile::{assign_blocks, read_blocks, write_blocks};
use crate::encoders::{tokenize, EncoderConfig, TextTower, VisionTower, Vocab};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::optim::Adam;
use crate::harness::params_hash;
use crate::numcore::{Graph, NodeId, Tensor};
use crate::objectives::{builtin_templates, class_probabilities, cross_entropy, instantiate};
use crate::params::{collect_params, Registry};

/// Softmax temperature of the contrastive pretraining objective.
pub const PRETRAIN_TAU: f64 = 0.07;

/// Adam learning rate used by [`pretrain_backbone`].
pub const PRETRAIN_LR: f64 = 2e-3;

/// Offset callers add to a run seed to derive the pretraining dataset seed,
/// so the teacher never sees the few-shot benchmark images.
pub const PRETRAIN_SEED_OFFSET: u64 = 101;

/// Checkpoint block holding the encoder dimensions next to the weights.
const META_BLOCK: &str = "meta.encoder";

const META_NAMES: [&str; 11] = [
    "layers",
    "heads",
    "d_t",
    "d_v",
    "d_joint",
    "vocab_size",
    "max_text_len",
    "image_size",
    "patch_size",
    "prompt_len",
    "channels",
];

fn meta_fields(config: &EncoderConfig) -> [f64; 11] {
    [
        config.layers as f64,
        config.heads as f64,
        config.d_t as f64,
        config.d_v as f64,
        config.d_joint as f64,
        config.vocab_size as f64,
        config.max_text_len as f64,
        config.image_size as f64,
        config.patch_size as f64,
        config.prompt_len as f64,
        config.channels as f64,
    ]
}

/// Both encoder towers plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub text: TextTower,
    pub vision: VisionTower,
}

impl Backbone {
    /// Fresh towers drawn from one seeded stream, text first; the same seed
    /// always yields the same weights.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextTower::init(config, &mut rng);
        let vision = VisionTower::init(config, &mut rng);
        Ok(Backbone {
            config: config.clone(),
            text,
            vision,
        })
    }

    /// Binds both towers onto a graph, text first, matching the walk order
    /// of [`Backbone::visit_mut`].
    pub fn bind(
        &self,
        alloc: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    ) -> (crate::encoders::BoundText, crate::encoders::BoundVision) {
        let text = self.text.bind(&self.config, alloc);
        let vision = self.vision.bind(&self.config, alloc);
        (text, vision)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.text.visit_mut(f);
        self.vision.visit_mut(f);
    }

    pub fn freeze(&mut self) {
        self.text.freeze();
        self.vision.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.text.unfreeze();
        self.vision.unfreeze();
    }

    /// True while any tower parameter still asks for gradients.
    pub fn trainable(&self) -> bool {
        let mut any = false;
        collect_params(|alloc| {
            let mut probe = |name: &str, t: &Tensor| {
                any |= t.requires_grad;
                alloc(name, t)
            };
            self.text.bind(&self.config, &mut probe);
            self.vision.bind(&self.config, &mut probe);
        });
        any
    }

    /// Order-sensitive hash over every parameter name, shape, and value bit.
    pub fn weights_hash(&self) -> u64 {
        params_hash(|alloc| {
            self.bind(alloc);
        })
    }

    /// Writes the weights plus an encoder-dimension metadata block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = meta_fields(&self.config);
        let meta = Tensor::from_vec(vec![meta.len()], meta.to_vec())?;
        let mut blocks = vec![(META_BLOCK.to_string(), meta)];
        blocks.extend(collect_params(|alloc| {
            self.bind(alloc);
        }));
        write_blocks(path, &blocks)
    }

    /// Loads a checkpoint written by [`Backbone::save`], checking its stored
    /// dimensions against `expected` first. Loaded backbones come back
    /// frozen: checkpoints hold teachers, not training state.
    pub fn load(path: &Path, expected: &EncoderConfig) -> Result<Backbone> {
        let mut blocks = read_blocks(path)?;
        let meta_at = blocks
            .iter()
            .position(|(name, _)| name == META_BLOCK)
            .ok_or_else(|| {
                Error::Checkpoint("checkpoint is missing the encoder metadata block".into())
            })?;
        let (_, meta) = blocks.remove(meta_at);
        check_meta(&meta, expected)?;
        let mut backbone = Backbone::init(expected, 0)?;
        assign_blocks(blocks, |assign| backbone.visit_mut(assign))?;
        backbone.freeze();
        Ok(backbone)
    }
}

fn check_meta(meta: &Tensor, expected: &EncoderConfig) -> Result<()> {
    let want = meta_fields(expected);
    if meta.shape != [want.len()] {
        return Err(Error::Checkpoint(format!(
            "encoder metadata block has shape {:?}, expected [{}]",
            meta.shape,
            want.len()
        )));
    }
    for ((&have, &want), name) in meta.data.iter().zip(&want).zip(META_NAMES) {
        if have != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint encoder {name} is {have}, expected {want}"
            )));
        }
    }
    Ok(())
}

/// Contrastively pretrains a fresh backbone on the rendered dataset, then
/// freezes it.
///
/// Each step takes one sample per class and a caption drawn from the
/// built-in template ensemble, and applies cross-entropy over in-batch
/// cosine similarities in both directions (image against every caption,
/// caption against every image) at temperature [`PRETRAIN_TAU`]. Every
/// epoch visits each sample exactly once through per-class shuffles. With
/// `epochs == 0` the weights stay at the seeded initialization.
pub fn pretrain_backbone(
    dataset: &Dataset,
    vocab: &Vocab,
    config: &EncoderConfig,
    epochs: usize,
    seed: u64,
) -> Result<Backbone> {
    let mut backbone = Backbone::init(config, seed)?;
    let classes = dataset.classes.len();
    let rounds = dataset.spec.samples_per_class;
    let per_class: Vec<Vec<usize>> = (0..classes).map(|c| dataset.indices_of_class(c)).collect();
    for (label, indices) in per_class.iter().enumerate() {
        if indices.len() != rounds {
            return Err(Error::Protocol(format!(
                "pretraining needs equal per-class sample counts, class {label} has {} of {rounds}",
                indices.len()
            )));
        }
    }
    let names = dataset.class_names();
    let templates = builtin_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::new(PRETRAIN_LR, 0.9, 0.999, 0.0);
    for epoch in 0..epochs {
        let mut orders = per_class.clone();
        for order in &mut orders {
            order.shuffle(&mut rng);
        }
        for round in 0..rounds {
            let mut picks = Vec::with_capacity(classes);
            let mut captions = Vec::with_capacity(classes);
            for (class, order) in orders.iter().enumerate() {
                picks.push(order[round]);
                let template = &templates[rng.gen_range(0..templates.len())];
                captions.push(instantiate(template, &names[class])?);
            }
            let grads = contrastive_step(&backbone, dataset, vocab, &picks, &captions)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::NanAbort(format!(
                        "pretraining epoch {epoch} step {round}: {msg}"
                    )),
                    other => other,
                })?;
            adam.begin_step();
            let mut first_err = None;
            backbone.visit_mut(&mut |name, tensor| {
                if first_err.is_some() {
                    return;
                }
                if let Some(grad) = grads.get(name) {
                    if let Err(e) = adam.update(name, tensor, grad) {
                        first_err = Some(e);
                    }
                }
            });
            if let Some(e) = first_err {
                return Err(e);
            }
        }
    }
    backbone.freeze();
    Ok(backbone)
}

/// One symmetric contrastive step: builds the batch graph, backpropagates
/// the mean of both cross-entropy directions, and returns the gradients
/// keyed by parameter name.
fn contrastive_step(
    backbone: &Backbone,
    dataset: &Dataset,
    vocab: &Vocab,
    picks: &[usize],
    captions: &[String],
) -> Result<HashMap<String, Vec<f64>>> {
    let mut g = Graph::new();
    let mut reg = Registry::new();
    let (bt, bv) = {
        let mut alloc = reg.record(&mut g);
        (
            backbone.text.bind(&backbone.config, &mut alloc),
            backbone.vision.bind(&backbone.config, &mut alloc),
        )
    };
    let mut caption_feats = Vec::with_capacity(captions.len());
    let mut image_feats = Vec::with_capacity(picks.len());
    for (&pick, caption) in picks.iter().zip(captions) {
        let tokens = tokenize(caption, vocab, backbone.config.max_text_len)?;
        caption_feats.push(bt.encode(&mut g, &tokens, None)?);
        let patches = bv.embed_patches(&mut g, &dataset.samples[pick].image)?;
        image_feats.push(bv.encode(&mut g, patches, None)?);
    }
    let mut terms = Vec::with_capacity(2 * picks.len());
    for class in 0..picks.len() {
        let image_probs =
            class_probabilities(&mut g, image_feats[class], &caption_feats, PRETRAIN_TAU)?;
        terms.push(cross_entropy(&mut g, image_probs, class)?.0);
        let caption_probs =
            class_probabilities(&mut g, caption_feats[class], &image_feats, PRETRAIN_TAU)?;
        terms.push(cross_entropy(&mut g, caption_probs, class)?.0);
    }
    let stacked = g.stack_scalars(&terms)?;
    let loss = g.mean(stacked);
    let value = g.item(loss)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {value}")));
    }
    g.backward(loss)?;
    let mut grads = HashMap::new();
    for (name, &id) in reg.names.iter().zip(&reg.ids) {
        if let Some(grad) = g.grad(id) {
            grads.insert(name.clone(), grad.to_vec());
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_dataset, DatasetSpec};
    use crate::objectives::{predict, teacher_image_embedding, teacher_text_embeddings};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_t: 8,
            d_v: 8,
            d_joint: 8,
            vocab_size: 40,
            max_text_len: 8,
            image_size: 8,
            patch_size: 4,
            prompt_len: 2,
            channels: 3,
        }
    }

    fn tiny_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            colors: vec!["red".into(), "green".into(), "blue".into()],
            shapes: vec!["square".into(), "circle".into()],
            image_size: 8,
            noise_std: 0.02,
            samples_per_class: 4,
            seed,
        }
    }

    fn zero_shot_accuracy(backbone: &Backbone, vocab: &Vocab, eval: &Dataset) -> f64 {
        let templates = builtin_templates();
        let table = teacher_text_embeddings(
            &backbone.text,
            &backbone.config,
            vocab,
            &eval.class_names(),
            &templates,
        )
        .unwrap();
        let mut correct = 0;
        for sample in &eval.samples {
            let v =
                teacher_image_embedding(&backbone.vision, &backbone.config, &sample.image).unwrap();
            let probs = predict(&v, &table, PRETRAIN_TAU).unwrap();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == sample.label {
                correct += 1;
            }
        }
        100.0 * correct as f64 / eval.samples.len() as f64
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny_encoder();
        let a = Backbone::init(&cfg, 3).unwrap();
        let b = Backbone::init(&cfg, 3).unwrap();
        let c = Backbone::init(&cfg, 4).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        assert_ne!(a.weights_hash(), c.weights_hash());
    }

    #[test]
    fn freezing_controls_trainability_without_touching_values() {
        let cfg = tiny_encoder();
        let mut backbone = Backbone::init(&cfg, 5).unwrap();
        let before = backbone.weights_hash();
        assert!(backbone.trainable());
        backbone.freeze();
        assert!(!backbone.trainable());
        assert_eq!(backbone.weights_hash(), before);
        backbone.unfreeze();
        assert!(backbone.trainable());
    }

    #[test]
    fn zero_epochs_keeps_the_seeded_weights() {
        let cfg = tiny_encoder();
        let data = generate_dataset(&tiny_spec(11)).unwrap();
        let vocab = Vocab::builtin();
        let teacher = pretrain_backbone(&data, &vocab, &cfg, 0, 9).unwrap();
        assert!(!teacher.trainable());
        assert_eq!(teacher.weights_hash(), Backbone::init(&cfg, 9).unwrap().weights_hash());
    }

    #[test]
    fn pretraining_is_deterministic_and_moves_weights() {
        let cfg = tiny_encoder();
        let data = generate_dataset(&tiny_spec(11)).unwrap();
        let vocab = Vocab::builtin();
        let a = pretrain_backbone(&data, &vocab, &cfg, 1, 9).unwrap();
        let b = pretrain_backbone(&data, &vocab, &cfg, 1, 9).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        assert!(!a.trainable());
        assert_ne!(a.weights_hash(), Backbone::init(&cfg, 9).unwrap().weights_hash());
    }

    #[test]
    fn pretraining_beats_chance_zero_shot() {
        let cfg = tiny_encoder();
        let train = generate_dataset(&tiny_spec(11)).unwrap();
        let eval = generate_dataset(&tiny_spec(12)).unwrap();
        let vocab = Vocab::builtin();
        let teacher = pretrain_backbone(&train, &vocab, &cfg, 12, 9).unwrap();
        let acc = zero_shot_accuracy(&teacher, &vocab, &eval);
        assert!(acc >= 40.0, "zero-shot accuracy {acc} after pretraining");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_encoder();
        let data = generate_dataset(&tiny_spec(11)).unwrap();
        let vocab = Vocab::builtin();
        let teacher = pretrain_backbone(&data, &vocab, &cfg, 1, 9).unwrap();
        let dir = std::env::temp_dir().join("hicropl-backbone-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("teacher.hcpl");
        teacher.save(&path).unwrap();
        let loaded = Backbone::load(&path, &cfg).unwrap();
        assert_eq!(loaded.weights_hash(), teacher.weights_hash());
        assert!(!loaded.trainable());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_rejects_a_mismatched_config() {
        let cfg = tiny_encoder();
        let backbone = Backbone::init(&cfg, 2).unwrap();
        let dir = std::env::temp_dir().join("hicropl-backbone-mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("teacher.hcpl");
        backbone.save(&path).unwrap();
        let wider = EncoderConfig { d_t: 16, ..tiny_encoder() };
        let err = Backbone::load(&path, &wider).unwrap_err();
        match err {
            Error::Checkpoint(msg) => {
                assert!(msg.contains("d_t"), "message: {msg}");
                assert!(msg.contains("16"), "message: {msg}");
            }
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_rejects_a_checkpoint_without_metadata() {
        let cfg = tiny_encoder();
        let backbone = Backbone::init(&cfg, 2).unwrap();
        let dir = std::env::temp_dir().join("hicropl-backbone-nometa");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.hcpl");
        let blocks = collect_params(|alloc| {
            backbone.bind(alloc);
        });
        write_blocks(&path, &blocks).unwrap();
        let err = Backbone::load(&path, &cfg).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("metadata"), "message: {msg}"),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn a_poisoned_pixel_aborts_pretraining() {
        let cfg = tiny_encoder();
        let mut data = generate_dataset(&tiny_spec(11)).unwrap();
        data.samples[0].image.data[0] = f64::NAN;
        let vocab = Vocab::builtin();
        let err = pretrain_backbone(&data, &vocab, &cfg, 1, 9).unwrap_err();
        match err {
            Error::NanAbort(msg) => assert!(msg.contains("step"), "message: {msg}"),
            other => panic!("expected a NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn ragged_class_counts_are_rejected() {
        let cfg = tiny_encoder();
        let mut data = generate_dataset(&tiny_spec(11)).unwrap();
        data.samples.pop();
        let vocab = Vocab::builtin();
        let err = pretrain_backbone(&data, &vocab, &cfg, 1, 9).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "got {err:?}");
    }
}
