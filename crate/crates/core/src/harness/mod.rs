//! Few-shot benchmark harness: synthetic data, teacher pretraining, prompt
//! training, base-to-novel evaluation, and the ablation grids.
//!
//! The pieces compose in a fixed order: [`generate_dataset`] renders a
//! benchmark, [`split_base_novel`] carves it into a [`Task`],
//! [`pretrain_backbone`] produces a frozen teacher, [`train`] fits a prompt
//! flow on a few-shot episode, and [`run_ablation`] sweeps named variants
//! over seeds. Every stage is seeded and bit-reproducible.

pub mod ablation;
pub mod backbone;
pub mod dataset;
pub mod optim;
pub mod train;

pub use ablation::{
    builtin_grid, grid_names, run_ablation, AblationTable, CellOutcome, Variant, VariantSummary,
};
pub use backbone::{pretrain_backbone, Backbone, PRETRAIN_SEED_OFFSET};
pub use dataset::{
    generate_dataset, load_dataset, manifest, sample_few_shot, save_dataset, split_base_novel,
    ClassDef, Dataset, DatasetSpec, Sample, SplitRule, Task,
};
pub use optim::Adam;
pub use train::{
    config_snapshot, evaluate_prompted, evaluate_zero_shot, top1_accuracy, train,
    zero_shot_report, TrainSettings, Trained,
};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::objectives::LossBreakdown;

/// Optimization and episode hyperparameters for one prompt-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_shots: usize,
    pub lambda: f64,
    pub boundary_k: usize,
    pub prompt_len: usize,
    pub prompt_depth: usize,
    pub seed: u64,
}

impl Hyperparams {
    /// Desk-scale defaults: Adam(0.9, 0.999) at lr 0.0025 with weight decay
    /// 5e-4, 50 epochs of batches of 32 at K=16, lambda 12.
    pub fn desk() -> Hyperparams {
        Hyperparams {
            lr: 0.0025,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            epochs: 50,
            batch_size: 32,
            k_shots: 16,
            lambda: 12.0,
            boundary_k: 4,
            prompt_len: 4,
            prompt_depth: 8,
            seed: 0,
        }
    }

    /// Checks ranges against the backbone's layer count. The boundary is
    /// validated later by the flow, whose rule depends on the mechanism.
    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.k_shots == 0 {
            return Err(Error::Config("k_shots must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if self.prompt_depth < 2 || self.prompt_depth > layers {
            return Err(Error::Config(format!(
                "prompt_depth must lie in 2..={layers}, got {}",
                self.prompt_depth
            )));
        }
        Ok(())
    }
}

/// Harmonic mean of base and novel accuracy, the benchmark's headline
/// metric. Both inputs must be positive.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && base.is_finite() && novel > 0.0 && novel.is_finite()) {
        return Err(Error::Contract(format!(
            "harmonic mean needs positive finite accuracies, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Outcome of one run: final accuracies (percent), their harmonic mean, the
/// per-epoch loss trajectory, and the flat config snapshot that reproduces
/// the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub epochs: Vec<LossBreakdown>,
    pub config: String,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "variant,seed,base,novel,hm";

    /// Builds a report, computing the harmonic mean of the two accuracies.
    /// A zero accuracy on either side yields `hm` 0, the formula's limit,
    /// since a degenerate run is still a reportable outcome.
    pub fn new(
        variant: impl Into<String>,
        seed: u64,
        base_acc: f64,
        novel_acc: f64,
        epochs: Vec<LossBreakdown>,
        config: impl Into<String>,
    ) -> Result<RunReport> {
        for (name, acc) in [("base", base_acc), ("novel", novel_acc)] {
            if !(0.0..=100.0).contains(&acc) {
                return Err(Error::Contract(format!(
                    "{name} accuracy {acc} is outside [0, 100]"
                )));
            }
        }
        let hm = if base_acc > 0.0 && novel_acc > 0.0 {
            harmonic_mean(base_acc, novel_acc)?
        } else {
            0.0
        };
        Ok(RunReport {
            variant: variant.into(),
            seed,
            base_acc,
            novel_acc,
            hm,
            epochs,
            config: config.into(),
        })
    }

    /// One self-describing `key=value` record on a single line: identity,
    /// accuracies, the loss trajectory, and the config snapshot.
    pub fn record_line(&self) -> String {
        let losses = if self.epochs.is_empty() {
            "-".to_string()
        } else {
            self.epochs
                .iter()
                .map(|e| format!("{:.6}/{:.6}/{:.6}", e.ce, e.cons, e.total))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "variant={} seed={} base={:.2} novel={:.2} hm={:.2} epochs={} losses={} {}",
            self.variant,
            self.seed,
            self.base_acc,
            self.novel_acc,
            self.hm,
            self.epochs.len(),
            losses,
            self.config,
        )
    }

    /// One row of the aggregate CSV (see [`RunReport::CSV_HEADER`]).
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.2},{:.2}",
            self.variant, self.seed, self.base_acc, self.novel_acc, self.hm
        )
    }
}

/// FNV-1a hash over a component's parameter names, shapes, and value bits,
/// taken through its `bind` walk. Used to assert that frozen weights stay
/// untouched by training.
pub fn params_hash(bind: impl FnOnce(&mut dyn FnMut(&str, &Tensor) -> NodeId)) -> u64 {
    let mut g = Graph::new();
    let mut h = dataset::Fnv::new();
    let mut alloc = |name: &str, t: &Tensor| {
        h.update(name.as_bytes());
        h.update(&[0xff]);
        for &e in &t.shape {
            h.update(&(e as u64).to_le_bytes());
        }
        for &v in &t.data {
            h.update(&v.to_le_bytes());
        }
        g.leaf(t)
    };
    bind(&mut alloc);
    h.finish()
}
