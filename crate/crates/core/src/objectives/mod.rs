//! Prediction and training objectives: cosine-softmax classification,
//! contrastive cross-entropy, frozen-teacher consistency, and the teacher
//! embeddings themselves.
//!
//! Every objective exists in two forms that share one implementation: a
//! graph form used inside the training step, and a value form (running the
//! same ops on a scratch graph) used for evaluation. The teacher encoders
//! are frozen; their embeddings are constants of the optimization.

mod templates;

pub use templates::{builtin_templates, instantiate, load_templates, parse_templates};

use crate::encoders::{tokenize, EncoderConfig, Image, TextTower, VisionTower, Vocab};
use crate::error::{Error, Result};
use crate::numcore::{norm, Graph, NodeId};

/// Softmax temperature for classification; 1/100 mirrors a converged
/// contrastive logit scale.
pub const DEFAULT_TAU: f64 = 0.01;

/// Weight of the consistency term in the total loss.
pub const DEFAULT_LAMBDA: f64 = 12.0;

/// Probabilities below this floor are clamped before the log.
pub const CE_FLOOR: f64 = 1e-12;

/// Per-class frozen teacher embeddings alongside the prompted ones, one row
/// per class in the active label set.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingTable {
    pub frozen: Vec<Vec<f64>>,
    pub prompted: Vec<Vec<f64>>,
}

impl ClassEmbeddingTable {
    pub fn new(frozen: Vec<Vec<f64>>, prompted: Vec<Vec<f64>>) -> Result<ClassEmbeddingTable> {
        if frozen.is_empty() {
            return Err(Error::Contract("class table with zero classes".into()));
        }
        if frozen.len() != prompted.len() {
            return Err(Error::Contract(format!(
                "class table has {} frozen rows but {} prompted rows",
                frozen.len(),
                prompted.len()
            )));
        }
        for rows in [&frozen, &prompted] {
            for (c, row) in rows.iter().enumerate() {
                if row.len() != rows[0].len() {
                    return Err(Error::dim(
                        "class table row widths",
                        &[rows[0].len()],
                        &[row.len()],
                    ));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "class table row {c} contains a non-finite value"
                    )));
                }
            }
        }
        Ok(ClassEmbeddingTable { frozen, prompted })
    }

    pub fn classes(&self) -> usize {
        self.frozen.len()
    }

    pub fn predict_frozen(&self, v: &[f64], tau: f64) -> Result<Vec<f64>> {
        predict(v, &self.frozen, tau)
    }

    pub fn predict_prompted(&self, v: &[f64], tau: f64) -> Result<Vec<f64>> {
        predict(v, &self.prompted, tau)
    }
}

// ── Graph forms ──────────────────────────────────────────────────────────────

/// Cosine similarity of `v` against each class embedding, stacked into one
/// score vector.
pub fn cosine_scores(g: &mut Graph, v: NodeId, classes: &[NodeId]) -> Result<NodeId> {
    if classes.is_empty() {
        return Err(Error::Contract("cosine_scores over zero classes".into()));
    }
    let sims: Vec<NodeId> = classes
        .iter()
        .map(|&c| g.cos_sim(v, c))
        .collect::<Result<_>>()?;
    g.stack_scalars(&sims)
}

/// Class probabilities: softmax over cosine similarities at temperature
/// `tau`.
pub fn class_probabilities(
    g: &mut Graph,
    v: NodeId,
    classes: &[NodeId],
    tau: f64,
) -> Result<NodeId> {
    let scores = cosine_scores(g, v, classes)?;
    g.softmax(scores, tau)
}

/// Cross-entropy `−log p_label`, clamping the probability at [`CE_FLOOR`]
/// and reporting whether the clamp fired.
pub fn cross_entropy(g: &mut Graph, probabilities: NodeId, label: usize) -> Result<(NodeId, bool)> {
    let n = g.value(probabilities).len();
    if label >= n {
        return Err(Error::Contract(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let p = g.index(probabilities, label)?;
    let (log_p, clamped) = g.ln_clamped(p, CE_FLOOR);
    Ok((g.neg(log_p), clamped))
}

/// How frozen and prompted embeddings are compared by the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyCriterion {
    /// `1 − cos(frozen + prompted, prompted)`, the default.
    Cosine,
    /// Mean absolute difference between frozen and prompted (ablation only).
    L1,
    /// Mean squared difference between frozen and prompted (ablation only).
    Mse,
}

impl ConsistencyCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyCriterion::Cosine => "cosine",
            ConsistencyCriterion::L1 => "l1",
            ConsistencyCriterion::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<ConsistencyCriterion> {
        match s {
            "cosine" => Ok(ConsistencyCriterion::Cosine),
            "l1" => Ok(ConsistencyCriterion::L1),
            "mse" => Ok(ConsistencyCriterion::Mse),
            other => Err(Error::Config(format!(
                "unknown consistency criterion `{other}`"
            ))),
        }
    }
}

/// One modality's consistency term between a frozen and a prompted
/// embedding.
pub fn alignment_gap(
    g: &mut Graph,
    criterion: ConsistencyCriterion,
    frozen: NodeId,
    prompted: NodeId,
) -> Result<NodeId> {
    match criterion {
        ConsistencyCriterion::Cosine => {
            let summed = g.add(frozen, prompted)?;
            let cos = g.cos_sim(summed, prompted)?;
            let one = g.constant(1.0);
            g.sub(one, cos)
        }
        ConsistencyCriterion::L1 => {
            let diff = g.sub(frozen, prompted)?;
            let diff = g.abs(diff);
            Ok(g.mean(diff))
        }
        ConsistencyCriterion::Mse => {
            let diff = g.sub(frozen, prompted)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
    }
}

/// Consistency loss over one image/text pair of frozen and prompted
/// embeddings. Under the cosine criterion this is
/// `2 − cos(V+V_p, V_p) − cos(W+W_p, W_p)`, which lies in [0, 4].
pub fn consistency(
    g: &mut Graph,
    criterion: ConsistencyCriterion,
    v: NodeId,
    v_p: NodeId,
    w: NodeId,
    w_p: NodeId,
) -> Result<NodeId> {
    let image = alignment_gap(g, criterion, v, v_p)?;
    let text = alignment_gap(g, criterion, w, w_p)?;
    g.add(image, text)
}

// ── Value forms ──────────────────────────────────────────────────────────────

/// Probability vector over classes: softmax of `cos(v, class)/tau`.
pub fn predict(v: &[f64], classes: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vn = g.leaf_from(&[v.len()], v.to_vec(), false)?;
    let class_nodes: Vec<NodeId> = classes
        .iter()
        .map(|c| g.leaf_from(&[c.len()], c.clone(), false))
        .collect::<Result<_>>()?;
    let probs = class_probabilities(&mut g, vn, &class_nodes, tau)?;
    Ok(g.value(probs).to_vec())
}

/// `−log p_label` with the [`CE_FLOOR`] clamp; the flag reports a clamp.
pub fn ce_loss(probabilities: &[f64], label: usize) -> Result<(f64, bool)> {
    if label >= probabilities.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        )));
    }
    let p = probabilities[label];
    Ok((-p.max(CE_FLOOR).ln(), p < CE_FLOOR))
}

/// Consistency loss under the default cosine criterion.
pub fn consistency_loss(v: &[f64], v_p: &[f64], w: &[f64], w_p: &[f64]) -> Result<f64> {
    consistency_loss_with(ConsistencyCriterion::Cosine, v, v_p, w, w_p)
}

pub fn consistency_loss_with(
    criterion: ConsistencyCriterion,
    v: &[f64],
    v_p: &[f64],
    w: &[f64],
    w_p: &[f64],
) -> Result<f64> {
    let mut g = Graph::new();
    let vn = g.leaf_from(&[v.len()], v.to_vec(), false)?;
    let vpn = g.leaf_from(&[v_p.len()], v_p.to_vec(), false)?;
    let wn = g.leaf_from(&[w.len()], w.to_vec(), false)?;
    let wpn = g.leaf_from(&[w_p.len()], w_p.to_vec(), false)?;
    let loss = consistency(&mut g, criterion, vn, vpn, wn, wpn)?;
    g.item(loss)
}

/// The combined loss `ce + lambda·cons` with its parts kept visible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cons: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(ce: f64, cons: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        cons,
        lambda,
        total: ce + lambda * cons,
    }
}

// ── Teacher embeddings ───────────────────────────────────────────────────────

/// Scales a vector to unit L2 norm in place.
pub fn l2_normalize(row: &mut [f64]) -> Result<()> {
    let n = norm(row);
    if n == 0.0 {
        return Err(Error::Degenerate("normalizing a zero-norm vector".into()));
    }
    row.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// Frozen per-class text embeddings: every template instantiated with the
/// class name, encoded without prompts, averaged, then L2-normalized.
pub fn teacher_text_embeddings(
    tower: &TextTower,
    config: &EncoderConfig,
    vocab: &Vocab,
    class_names: &[String],
    templates: &[String],
) -> Result<Vec<Vec<f64>>> {
    if templates.is_empty() {
        return Err(Error::Template("at least one template is required".into()));
    }
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let mut mean = vec![0.0; config.d_joint];
        for template in templates {
            let caption = instantiate(template, name)?;
            let tokens = tokenize(&caption, vocab, config.max_text_len)?;
            let mut g = Graph::new();
            let bound = tower.bind(config, &mut |_, t| g.leaf(t));
            let feat = bound.encode(&mut g, &tokens, None)?;
            for (acc, v) in mean.iter_mut().zip(g.value(feat)) {
                *acc += v;
            }
        }
        let count = templates.len() as f64;
        mean.iter_mut().for_each(|v| *v /= count);
        l2_normalize(&mut mean)?;
        rows.push(mean);
    }
    Ok(rows)
}

/// Frozen image embedding: the vision encoder applied without prompts.
pub fn teacher_image_embedding(
    tower: &VisionTower,
    config: &EncoderConfig,
    image: &Image,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = tower.bind(config, &mut |_, t| g.leaf(t));
    let patches = bound.embed_patches(&mut g, image)?;
    let feat = bound.encode(&mut g, patches, None)?;
    Ok(g.value(feat).to_vec())
}

#[cfg(test)]
mod tests;
