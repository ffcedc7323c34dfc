//! Few-shot prompt training and base-to-novel evaluation.
//!
//! [`train`] fits one prompt flow against a frozen backbone: every step
//! materializes the effective prompts, encodes the batch images and all base
//! class names through the prompted towers, and minimizes contrastive
//! cross-entropy plus the weighted frozen-teacher consistency term. Only the
//! flow's parameters receive gradients; the backbone is a constant.
//! [`evaluate_prompted`] scores a fitted flow on a sample split and
//! [`evaluate_zero_shot`] scores the bare teacher for the baseline.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{tokenize, EncoderConfig, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::harness::backbone::Backbone;
use crate::harness::dataset::{sample_few_shot, Dataset, DatasetSpec, Task};
use crate::harness::optim::Adam;
use crate::harness::{Hyperparams, RunReport};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::objectives::{
    alignment_gap, builtin_templates, class_probabilities, cross_entropy, predict,
    teacher_image_embedding, teacher_text_embeddings, total_loss, ConsistencyCriterion,
    DEFAULT_TAU,
};
use crate::params::Registry;
use crate::promptflow::{BoundFlow, EffectivePrompts, FlowConfig, PromptFlow};

/// Images per scratch graph during evaluation, bounding graph size.
const EVAL_CHUNK: usize = 32;

/// Loss-shape switches that sit outside [`Hyperparams`]: the consistency
/// criterion and term toggle, the knowledge-flow toggle, and the teacher's
/// caption templates.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub criterion: ConsistencyCriterion,
    pub use_consistency: bool,
    /// With the flow off, both towers consume their raw prompt parameters
    /// and the mapper and compressor stay unused (independent prompt tuning).
    pub use_flow: bool,
    pub templates: Vec<String>,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            criterion: ConsistencyCriterion::Cosine,
            use_consistency: true,
            use_flow: true,
            templates: builtin_templates(),
        }
    }
}

/// A fitted prompt flow together with its run report.
#[derive(Debug, Clone)]
pub struct Trained {
    pub flow: PromptFlow,
    pub report: RunReport,
}

/// The prompts the towers consume this pass: mapped by the flow, or the raw
/// stack parameters when the flow is disabled.
fn effective_prompts(g: &mut Graph, bound: &BoundFlow, use_flow: bool) -> Result<EffectivePrompts> {
    if use_flow {
        bound.materialize(g)
    } else {
        Ok(EffectivePrompts {
            text: (0..bound.layers()).map(|l| bound.text_prompt(l)).collect(),
            visual: (0..bound.layers()).map(|l| bound.visual_prompt(l)).collect(),
        })
    }
}

/// Per-run constants shared by every optimization step.
struct Episode<'a> {
    backbone: &'a Backbone,
    run_cfg: &'a EncoderConfig,
    dataset: &'a Dataset,
    /// `(sample index, position of its class in the base class list)`.
    examples: &'a [(usize, usize)],
    base_tokens: &'a [TokenSequence],
    frozen_text: Vec<Vec<f64>>,
    frozen_image: Vec<Vec<f64>>,
    criterion: ConsistencyCriterion,
    use_flow: bool,
    cons_active: bool,
    lambda: f64,
}

impl Episode<'_> {
    /// One step over `batch` (indices into `examples`): builds the loss
    /// graph, backpropagates, and returns the CE value, the raw consistency
    /// value, and the prompt-parameter gradients keyed by name.
    fn step(
        &self,
        pflow: &PromptFlow,
        batch: &[usize],
    ) -> Result<(f64, f64, HashMap<String, Vec<f64>>)> {
        let mut g = Graph::new();
        let mut reg = Registry::new();
        let bound = {
            let mut alloc = reg.record(&mut g);
            pflow.bind(&mut alloc)?
        };
        let bt = self
            .backbone
            .text
            .bind(self.run_cfg, &mut |_: &str, t: &Tensor| g.leaf(t));
        let bv = self
            .backbone
            .vision
            .bind(self.run_cfg, &mut |_: &str, t: &Tensor| g.leaf(t));
        let effective = effective_prompts(&mut g, &bound, self.use_flow)?;
        let prompted_text: Vec<NodeId> = self
            .base_tokens
            .iter()
            .map(|tokens| bt.encode(&mut g, tokens, Some(&effective.text)))
            .collect::<Result<_>>()?;
        let mut ce_terms = Vec::with_capacity(batch.len());
        let mut image_gaps = Vec::with_capacity(batch.len());
        for &ei in batch {
            let (sample, label_pos) = self.examples[ei];
            let patches = bv.embed_patches(&mut g, &self.dataset.samples[sample].image)?;
            let v_p = bv.encode(&mut g, patches, Some(&effective.visual))?;
            let probs = class_probabilities(&mut g, v_p, &prompted_text, DEFAULT_TAU)?;
            ce_terms.push(cross_entropy(&mut g, probs, label_pos)?.0);
            if self.cons_active {
                let row = &self.frozen_image[ei];
                let frozen = g.leaf_from(&[1, row.len()], row.clone(), false)?;
                image_gaps.push(alignment_gap(&mut g, self.criterion, frozen, v_p)?);
            }
        }
        let stacked = g.stack_scalars(&ce_terms)?;
        let ce = g.mean(stacked);
        let mut loss = ce;
        let mut cons_value = 0.0;
        if self.cons_active {
            let mut text_gaps = Vec::with_capacity(prompted_text.len());
            for (row, &w_p) in self.frozen_text.iter().zip(&prompted_text) {
                let frozen = g.leaf_from(&[1, row.len()], row.clone(), false)?;
                text_gaps.push(alignment_gap(&mut g, self.criterion, frozen, w_p)?);
            }
            let image_stack = g.stack_scalars(&image_gaps)?;
            let image_mean = g.mean(image_stack);
            let text_stack = g.stack_scalars(&text_gaps)?;
            let text_mean = g.mean(text_stack);
            let cons = g.add(image_mean, text_mean)?;
            cons_value = g.item(cons)?;
            let weighted = g.scale(cons, self.lambda);
            loss = g.add(ce, weighted)?;
        }
        let ce_value = g.item(ce)?;
        let total = g.item(loss)?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("total loss is {total}")));
        }
        g.backward(loss)?;
        let mut grads = HashMap::new();
        for (name, &id) in reg.names.iter().zip(&reg.ids) {
            if let Some(grad) = g.grad(id) {
                grads.insert(name.clone(), grad.to_vec());
            }
        }
        Ok((ce_value, cons_value, grads))
    }
}

/// Trains a fresh prompt flow on one K-shot episode and evaluates it on the
/// task's base and novel test splits.
///
/// The consistency term is active only when both the settings enable it and
/// `lambda > 0`; when inactive its whole subgraph is skipped, so a
/// `lambda == 0` run is bit-identical to one with the term disabled. The
/// reported per-epoch lambda is this effective weight. Epoch losses are
/// means over the epoch's steps. A non-finite loss aborts with a diagnostic
/// naming the epoch and step.
pub fn train(
    backbone: &Backbone,
    vocab: &Vocab,
    dataset: &Dataset,
    task: &Task,
    flow_config: &FlowConfig,
    hp: &Hyperparams,
    settings: &TrainSettings,
) -> Result<Trained> {
    hp.validate(backbone.config.layers)?;
    if backbone.trainable() {
        return Err(Error::Contract("training needs a frozen backbone".into()));
    }
    if settings.templates.is_empty() {
        return Err(Error::Template("at least one template is required".into()));
    }
    let run_cfg = EncoderConfig {
        prompt_len: hp.prompt_len,
        ..backbone.config.clone()
    };
    run_cfg.validate()?;
    let depth_cfg = EncoderConfig {
        layers: hp.prompt_depth,
        ..run_cfg.clone()
    };
    let mut pflow = PromptFlow::init(&depth_cfg, *flow_config, hp.boundary_k, hp.seed)?;

    let shots = sample_few_shot(task, hp.k_shots, hp.seed)?;
    let mut position = HashMap::new();
    for (pos, &class) in task.base_classes.iter().enumerate() {
        position.insert(class, pos);
    }
    let mut examples = Vec::with_capacity(shots.len());
    for &idx in &shots {
        let label = dataset.samples[idx].label;
        match position.get(&label) {
            Some(&pos) => examples.push((idx, pos)),
            None => {
                return Err(Error::Protocol(format!(
                    "training sample {idx} carries novel class {label}"
                )))
            }
        }
    }
    let base_names: Vec<String> = task
        .base_classes
        .iter()
        .map(|&c| dataset.classes[c].name.clone())
        .collect();
    let base_tokens: Vec<TokenSequence> = base_names
        .iter()
        .map(|name| tokenize(name, vocab, run_cfg.max_text_len))
        .collect::<Result<_>>()?;

    let cons_active = settings.use_consistency && hp.lambda > 0.0;
    let lambda = if cons_active { hp.lambda } else { 0.0 };
    let (frozen_text, frozen_image) = if cons_active {
        let teachers = || -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let text = teacher_text_embeddings(
                &backbone.text,
                &backbone.config,
                vocab,
                &base_names,
                &settings.templates,
            )?;
            let image = examples
                .iter()
                .map(|&(idx, _)| {
                    teacher_image_embedding(
                        &backbone.vision,
                        &backbone.config,
                        &dataset.samples[idx].image,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((text, image))
        };
        teachers().map_err(|e| match e {
            Error::Numeric(msg) => Error::NanAbort(format!("teacher embeddings: {msg}")),
            other => other,
        })?
    } else {
        (Vec::new(), Vec::new())
    };
    let episode = Episode {
        backbone,
        run_cfg: &run_cfg,
        dataset,
        examples: &examples,
        base_tokens: &base_tokens,
        frozen_text,
        frozen_image,
        criterion: settings.criterion,
        use_flow: settings.use_flow,
        cons_active,
        lambda,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(2);
    let mut adam = Adam::new(hp.lr, hp.beta1, hp.beta2, hp.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        let mut cons_sum = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(hp.batch_size).enumerate() {
            let (ce, cons, grads) = episode.step(&pflow, batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::NanAbort(format!("epoch {epoch} step {step}: {msg}")),
                other => other,
            })?;
            adam.begin_step();
            let mut first_err = None;
            pflow.visit_mut(&mut |name, tensor| {
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
            ce_sum += ce;
            cons_sum += cons;
            steps += 1;
        }
        let n = steps as f64;
        epochs.push(total_loss(ce_sum / n, cons_sum / n, lambda));
    }

    let base_acc = evaluate_prompted(
        backbone,
        vocab,
        &pflow,
        dataset,
        &task.base_test,
        &task.base_classes,
        settings.use_flow,
    )?;
    let novel_acc = evaluate_prompted(
        backbone,
        vocab,
        &pflow,
        dataset,
        &task.novel_test,
        &task.novel_classes,
        settings.use_flow,
    )?;
    let config = config_snapshot(&backbone.config, flow_config, hp, settings, &dataset.spec);
    let report = RunReport::new("default", hp.seed, base_acc, novel_acc, epochs, config)?;
    Ok(Trained {
        flow: pflow,
        report,
    })
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Percent of predictions equal to their labels.
pub fn top1_accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions against {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Protocol("evaluation split is empty".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy (percent) of the prompted model over `samples`, choosing
/// among `class_set` (indices into `dataset.classes`). The effective prompt
/// values are computed once and reused across image chunks.
pub fn evaluate_prompted(
    backbone: &Backbone,
    vocab: &Vocab,
    pflow: &PromptFlow,
    dataset: &Dataset,
    samples: &[usize],
    class_set: &[usize],
    use_flow: bool,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Protocol("evaluation split is empty".into()));
    }
    if class_set.is_empty() {
        return Err(Error::Protocol("evaluation needs a nonempty class set".into()));
    }
    let m = match pflow.stack.text_prompts.first() {
        Some(t) => t.shape[0],
        None => return Err(Error::Contract("prompt stack has no layers".into())),
    };
    let run_cfg = EncoderConfig {
        prompt_len: m,
        ..backbone.config.clone()
    };
    let mut class_rows = Vec::with_capacity(class_set.len());
    let visual_values: Vec<(Vec<usize>, Vec<f64>)> = {
        let mut g = Graph::new();
        let bound = pflow.bind(&mut |_: &str, t: &Tensor| g.leaf(t))?;
        let effective = effective_prompts(&mut g, &bound, use_flow)?;
        let bt = backbone
            .text
            .bind(&run_cfg, &mut |_: &str, t: &Tensor| g.leaf(t));
        for &class in class_set {
            let tokens = tokenize(&dataset.classes[class].name, vocab, run_cfg.max_text_len)?;
            let w_p = bt.encode(&mut g, &tokens, Some(&effective.text))?;
            class_rows.push(g.value(w_p).to_vec());
        }
        effective
            .visual
            .iter()
            .map(|&id| (g.shape_of(id).to_vec(), g.value(id).to_vec()))
            .collect()
    };
    let mut predicted = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bv = backbone
            .vision
            .bind(&run_cfg, &mut |_: &str, t: &Tensor| g.leaf(t));
        let prompts: Vec<NodeId> = visual_values
            .iter()
            .map(|(shape, values)| g.leaf_from(shape, values.clone(), false))
            .collect::<Result<_>>()?;
        for &idx in chunk {
            let patches = bv.embed_patches(&mut g, &dataset.samples[idx].image)?;
            let v_p = bv.encode(&mut g, patches, Some(&prompts))?;
            let probs = predict(g.value(v_p), &class_rows, DEFAULT_TAU)?;
            predicted.push(class_set[argmax(&probs)]);
        }
    }
    let labels: Vec<usize> = samples.iter().map(|&i| dataset.samples[i].label).collect();
    top1_accuracy(&predicted, &labels)
}

/// Zero-shot baseline: the teacher's template-ensemble class embeddings
/// against its frozen image embeddings, no prompts anywhere.
pub fn evaluate_zero_shot(
    backbone: &Backbone,
    vocab: &Vocab,
    dataset: &Dataset,
    samples: &[usize],
    class_set: &[usize],
    templates: &[String],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Protocol("evaluation split is empty".into()));
    }
    if class_set.is_empty() {
        return Err(Error::Protocol("evaluation needs a nonempty class set".into()));
    }
    let names: Vec<String> = class_set
        .iter()
        .map(|&c| dataset.classes[c].name.clone())
        .collect();
    let table = teacher_text_embeddings(&backbone.text, &backbone.config, vocab, &names, templates)?;
    let mut predicted = Vec::with_capacity(samples.len());
    for &idx in samples {
        let v = teacher_image_embedding(&backbone.vision, &backbone.config, &dataset.samples[idx].image)?;
        let probs = predict(&v, &table, DEFAULT_TAU)?;
        predicted.push(class_set[argmax(&probs)]);
    }
    let labels: Vec<usize> = samples.iter().map(|&i| dataset.samples[i].label).collect();
    top1_accuracy(&predicted, &labels)
}

/// The zero-shot [`RunReport`] for a task: both test splits scored with the
/// frozen teacher, no training and no loss trajectory.
pub fn zero_shot_report(
    backbone: &Backbone,
    vocab: &Vocab,
    dataset: &Dataset,
    task: &Task,
    templates: &[String],
    config: impl Into<String>,
) -> Result<RunReport> {
    let base = evaluate_zero_shot(
        backbone,
        vocab,
        dataset,
        &task.base_test,
        &task.base_classes,
        templates,
    )?;
    let novel = evaluate_zero_shot(
        backbone,
        vocab,
        dataset,
        &task.novel_test,
        &task.novel_classes,
        templates,
    )?;
    RunReport::new("zero_shot", 0, base, novel, Vec::new(), config)
}

/// Flat one-line `key=value` snapshot of everything that determines a run,
/// embedded in reports so any row can be reproduced.
pub fn config_snapshot(
    config: &EncoderConfig,
    flow: &FlowConfig,
    hp: &Hyperparams,
    settings: &TrainSettings,
    data: &DatasetSpec,
) -> String {
    format!(
        "encoder.layers={} encoder.heads={} encoder.d_t={} encoder.d_v={} \
         encoder.d_joint={} encoder.vocab_size={} encoder.max_text_len={} \
         encoder.image_size={} encoder.patch_size={} encoder.channels={} \
         flow.mechanism={} flow.mapper_scale={} flow.compression={} \
         flow.mapper_heads={} flow.boundary_k={} flow.enabled={} \
         train.lr={} train.beta1={} train.beta2={} train.weight_decay={} \
         train.epochs={} train.batch_size={} train.k_shots={} train.lambda={} \
         train.criterion={} train.consistency={} train.prompt_len={} \
         train.prompt_depth={} train.templates={} train.seed={} \
         data.colors={} data.shapes={} data.image_size={} data.noise_std={} \
         data.samples_per_class={} data.seed={}",
        config.layers,
        config.heads,
        config.d_t,
        config.d_v,
        config.d_joint,
        config.vocab_size,
        config.max_text_len,
        config.image_size,
        config.patch_size,
        config.channels,
        flow.mechanism.as_str(),
        flow.mapper_scale.as_str(),
        flow.compression.as_str(),
        flow.mapper_heads,
        hp.boundary_k,
        settings.use_flow,
        hp.lr,
        hp.beta1,
        hp.beta2,
        hp.weight_decay,
        hp.epochs,
        hp.batch_size,
        hp.k_shots,
        hp.lambda,
        settings.criterion.as_str(),
        settings.use_consistency,
        hp.prompt_len,
        hp.prompt_depth,
        settings.templates.len(),
        hp.seed,
        data.colors.join("+"),
        data.shapes.join("+"),
        data.image_size,
        data.noise_std,
        data.samples_per_class,
        data.seed,
    )
}
