//! The ablation grid runner: named variants crossed with seeds, each cell an
//! independent training run, merged into one comparison table.
//!
//! Cells never share mutable state, so the grid can run on any number of
//! threads without changing its output. A failing cell records its error
//! message and the grid continues; means are taken over the seeds that
//! succeeded.

use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::harness::backbone::Backbone;
use crate::harness::dataset::{Dataset, Task};
use crate::harness::train::{train, TrainSettings};
use crate::harness::{Hyperparams, RunReport};
use crate::objectives::ConsistencyCriterion;
use crate::promptflow::{Compression, FlowConfig, MapperScale, Mechanism};

/// One named cell configuration: a flow, its hyperparameters, and the
/// loss-shape settings. The runner substitutes the seed per cell.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub flow: FlowConfig,
    pub hp: Hyperparams,
    pub settings: TrainSettings,
}

/// The outcome of one `(variant, seed)` cell: a report, or the message of
/// the error that stopped it.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub variant: String,
    pub seed: u64,
    pub result: std::result::Result<RunReport, String>,
}

/// Mean accuracies of one variant over its successful seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean_base: f64,
    pub mean_novel: f64,
    pub mean_hm: f64,
}

/// All cells of a grid run, variant-major in the order given, seeds in the
/// order given within each variant.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub cells: Vec<CellOutcome>,
}

impl AblationTable {
    /// Per-variant means over successful seeds, in first-seen variant order.
    /// A variant whose every seed failed reports zero means and a zero
    /// success count.
    pub fn summaries(&self) -> Vec<VariantSummary> {
        let mut order: Vec<&str> = Vec::new();
        for cell in &self.cells {
            if !order.contains(&cell.variant.as_str()) {
                order.push(&cell.variant);
            }
        }
        order
            .into_iter()
            .map(|name| {
                let mut ok = 0usize;
                let mut failed = 0usize;
                let (mut base, mut novel, mut hm) = (0.0, 0.0, 0.0);
                for cell in self.cells.iter().filter(|c| c.variant == name) {
                    match &cell.result {
                        Ok(report) => {
                            ok += 1;
                            base += report.base_acc;
                            novel += report.novel_acc;
                            hm += report.hm;
                        }
                        Err(_) => failed += 1,
                    }
                }
                let n = if ok == 0 { 1.0 } else { ok as f64 };
                VariantSummary {
                    variant: name.to_string(),
                    seeds_ok: ok,
                    seeds_failed: failed,
                    mean_base: base / n,
                    mean_novel: novel / n,
                    mean_hm: hm / n,
                }
            })
            .collect()
    }

    /// The aggregate CSV: header plus one row per cell. Failed cells carry
    /// `-` in the three accuracy columns.
    pub fn csv(&self) -> String {
        let mut out = String::from(RunReport::CSV_HEADER);
        out.push('\n');
        for cell in &self.cells {
            match &cell.result {
                Ok(report) => out.push_str(&report.csv_row()),
                Err(_) => out.push_str(&format!("{},{},-,-,-", cell.variant, cell.seed)),
            }
            out.push('\n');
        }
        out
    }

    /// One self-describing record per cell: the run's record line, or a
    /// `variant= seed= error=` line for failures.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for cell in &self.cells {
            match &cell.result {
                Ok(report) => out.push_str(&report.record_line()),
                Err(msg) => out.push_str(&format!(
                    "variant={} seed={} error={}",
                    cell.variant,
                    cell.seed,
                    msg.replace('\n', " ")
                )),
            }
            out.push('\n');
        }
        out
    }

    /// The comparison table: one line per variant with seed counts and mean
    /// accuracies.
    pub fn summary_lines(&self) -> String {
        let mut out = String::new();
        for s in self.summaries() {
            out.push_str(&format!(
                "variant={} seeds_ok={} seeds_failed={} base={:.2} novel={:.2} hm={:.2}\n",
                s.variant, s.seeds_ok, s.seeds_failed, s.mean_base, s.mean_novel, s.mean_hm
            ));
        }
        out
    }
}

/// Runs every variant over every seed against one frozen backbone and task.
/// Cell order in the table is deterministic regardless of `threads`. A cell
/// that errors is recorded with its message and the rest of the grid still
/// runs.
pub fn run_ablation(
    backbone: &Backbone,
    vocab: &Vocab,
    dataset: &Dataset,
    task: &Task,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Protocol("ablation needs at least one variant".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Protocol("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_cell = |&(variant, seed): &(&Variant, u64)| {
        let hp = Hyperparams {
            seed,
            ..variant.hp.clone()
        };
        let result = train(
            backbone,
            vocab,
            dataset,
            task,
            &variant.flow,
            &hp,
            &variant.settings,
        )
        .map(|fitted| {
            let mut report = fitted.report;
            report.variant = variant.name.clone();
            report
        })
        .map_err(|e| e.to_string());
        CellOutcome {
            variant: variant.name.clone(),
            seed,
            result,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Protocol(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter().map(run_cell).collect()
    });
    Ok(AblationTable { cells })
}

/// Names of the built-in grids, in presentation order.
pub fn grid_names() -> Vec<&'static str> {
    vec![
        "flow",
        "boundary",
        "mapper_scale",
        "compression",
        "criterion",
        "components",
        "depth",
        "length",
        "templates",
    ]
}

fn named(name: &str, flow: FlowConfig, hp: Hyperparams, settings: TrainSettings) -> Variant {
    Variant {
        name: name.to_string(),
        flow,
        hp,
        settings,
    }
}

/// Builds the built-in grid `name` around `base` hyperparameters. Each grid
/// varies one axis and keeps everything else at the base values:
///
/// * `flow`: the four direction mechanisms, unidirectional boundaries pinned
///   to their required endpoints.
/// * `boundary`: bidirectional boundary k over 2..=6.
/// * `mapper_scale`: single-scale against multi-scale mapping.
/// * `compression`: the proxy squeeze function.
/// * `criterion`: the consistency comparison.
/// * `components`: flow and consistency toggled in all four combinations.
/// * `depth`: prompt depth over 2, 4, 6, 8 with the boundary at half depth.
/// * `length`: prompt length over 2, 4, 8.
/// * `templates`: single caption template against the full ensemble.
pub fn builtin_grid(name: &str, base: &Hyperparams) -> Result<Vec<Variant>> {
    let flow = FlowConfig::default();
    let settings = TrainSettings::default;
    let grid = match name {
        "flow" => vec![
            named(
                "unidir_ti",
                FlowConfig {
                    mechanism: Mechanism::UnidirTI,
                    ..flow
                },
                Hyperparams {
                    boundary_k: base.prompt_depth,
                    ..base.clone()
                },
                settings(),
            ),
            named(
                "unidir_it",
                FlowConfig {
                    mechanism: Mechanism::UnidirIT,
                    ..flow
                },
                Hyperparams {
                    boundary_k: 0,
                    ..base.clone()
                },
                settings(),
            ),
            named(
                "bidir_ti_then_it",
                FlowConfig {
                    mechanism: Mechanism::BidirTIThenIT,
                    ..flow
                },
                base.clone(),
                settings(),
            ),
            named(
                "bidir_it_then_ti",
                FlowConfig {
                    mechanism: Mechanism::BidirITThenTI,
                    ..flow
                },
                base.clone(),
                settings(),
            ),
        ],
        "boundary" => (2..=6)
            .map(|k| {
                named(
                    &format!("k{k}"),
                    flow,
                    Hyperparams {
                        boundary_k: k,
                        ..base.clone()
                    },
                    settings(),
                )
            })
            .collect(),
        "mapper_scale" => [MapperScale::Single, MapperScale::Multi]
            .into_iter()
            .map(|scale| {
                named(
                    scale.as_str(),
                    FlowConfig {
                        mapper_scale: scale,
                        ..flow
                    },
                    base.clone(),
                    settings(),
                )
            })
            .collect(),
        "compression" => [Compression::Lkp, Compression::Average, Compression::Mlp]
            .into_iter()
            .map(|c| {
                named(
                    c.as_str(),
                    FlowConfig {
                        compression: c,
                        ..flow
                    },
                    base.clone(),
                    settings(),
                )
            })
            .collect(),
        "criterion" => [
            ConsistencyCriterion::Cosine,
            ConsistencyCriterion::L1,
            ConsistencyCriterion::Mse,
        ]
        .into_iter()
        .map(|criterion| {
            named(
                criterion.as_str(),
                flow,
                base.clone(),
                TrainSettings {
                    criterion,
                    ..settings()
                },
            )
        })
        .collect(),
        "components" => vec![
            named("full", flow, base.clone(), settings()),
            named(
                "no_cons",
                flow,
                base.clone(),
                TrainSettings {
                    use_consistency: false,
                    ..settings()
                },
            ),
            named(
                "no_flow",
                flow,
                base.clone(),
                TrainSettings {
                    use_flow: false,
                    ..settings()
                },
            ),
            named(
                "plain",
                flow,
                base.clone(),
                TrainSettings {
                    use_consistency: false,
                    use_flow: false,
                    ..settings()
                },
            ),
        ],
        "depth" => [2usize, 4, 6, 8]
            .into_iter()
            .map(|depth| {
                named(
                    &format!("depth{depth}"),
                    flow,
                    Hyperparams {
                        prompt_depth: depth,
                        boundary_k: depth / 2,
                        ..base.clone()
                    },
                    settings(),
                )
            })
            .collect(),
        "length" => [2usize, 4, 8]
            .into_iter()
            .map(|len| {
                named(
                    &format!("len{len}"),
                    flow,
                    Hyperparams {
                        prompt_len: len,
                        ..base.clone()
                    },
                    settings(),
                )
            })
            .collect(),
        "templates" => {
            let ensemble = settings();
            let single = TrainSettings {
                templates: ensemble.templates[..1].to_vec(),
                ..settings()
            };
            vec![
                named("single", flow, base.clone(), single),
                named("ensemble", flow, base.clone(), ensemble),
            ]
        }
        other => {
            return Err(Error::Config(format!("unknown ablation grid `{other}`")));
        }
    };
    Ok(grid)
}
