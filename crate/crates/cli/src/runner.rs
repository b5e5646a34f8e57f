//! Sweep execution: expands the configured grid, trains every point with a
//! small learning-rate race and several random restarts, and appends one
//! result block per point to `results.csv`.
//!
//! Results are deterministic for a given config and seed: each grid point,
//! restart, and fold derives its own seed from the master seed, and rows are
//! written in grid order regardless of worker scheduling. Reruns verify the
//! existing file prefix and append only what is missing, so an interrupted
//! sweep resumes to a byte-identical file.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use bnc_core::budget::{
    bnc_bits, bnc_ops, cnn_architecture, dnn_bits, dnn_ops, fc_architecture,
    size_cnn_for_budget, size_fc_for_bit_budget,
};
use bnc_core::dnn::LayerSpec;
use bnc_core::structure::{train_structure, SizePenaltyConfig, StructureDistribution};
use bnc_core::train::{train_bnc, train_dnn, OptimizerConfig};
use bnc_core::{BudgetTarget, RawDataset, TanStructure, TensorShape};

use crate::config::{BitSetting, BudgetKind, ExperimentConfig, Family};
use crate::dataset::{prepare_folds, Fold};

/// Column order of `results.csv`.
pub const RESULT_COLUMNS: [&str; 13] = [
    "dataset",
    "family",
    "structure",
    "bits_per_param",
    "B_I",
    "B_F",
    "lambda_ms",
    "lr0",
    "bits_total",
    "ops",
    "train_err",
    "test_err",
    "seed",
];

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Splits one seed stream into independent substreams; `index` 0, 1, ... give
/// distinct, reproducible children.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN))
}

/// One cell of the sweep grid.
#[derive(Debug, Clone)]
struct GridPoint {
    index: usize,
    bits: BitSetting,
    lambda_ms: f64,
    budget: Option<u64>,
}

fn expand_grid(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let mut points = Vec::new();
    let budgets: Vec<Option<u64>> = match cfg.model.family {
        Family::Fc | Family::Cnn if !cfg.sweep.budgets.is_empty() => {
            cfg.sweep.budgets.iter().copied().map(Some).collect()
        }
        _ => vec![None],
    };
    let lambdas: &[f64] = match cfg.model.family {
        Family::BncStructure => &cfg.sweep.lambda_ms,
        _ => &[0.0],
    };
    for &bits in &cfg.sweep.bits {
        for &lambda_ms in lambdas {
            for &budget in &budgets {
                points.push(GridPoint { index: points.len(), bits, lambda_ms, budget });
            }
        }
    }
    points
}

/// Per-fold outcome of the winning run at one grid point.
struct FoldOutcome {
    bits: u64,
    ops: u64,
    train_err: f64,
    test_err: f64,
}

/// Random tree-augmented structure: shuffled ordering, each later feature
/// taking one uniformly chosen predecessor as its parent.
pub(crate) fn random_tan(d: usize, seed: u64) -> TanStructure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordering: Vec<usize> = (0..d).collect();
    ordering.shuffle(&mut rng);
    let mut parents = vec![None; d];
    for pos in 1..d {
        let pick = rng.random_range(0..pos);
        parents[ordering[pos]] = Some(ordering[pick]);
    }
    TanStructure { ordering, parents }
}

/// The network shape (and its measured cost) resolved for one grid point.
pub(crate) struct ResolvedNet {
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub bits: u64,
    pub ops: u64,
    pub label: String,
}

/// Sizes the network for one bit setting and optional budget: budgets pick
/// the hidden width or channel counts, otherwise the configured architecture
/// is used as-is.
pub(crate) fn resolve_net(
    cfg: &ExperimentConfig,
    bits: BitSetting,
    budget: Option<u64>,
    num_features: usize,
    num_classes: usize,
) -> Result<ResolvedNet> {
    let quant = bits.to_dnn()?;
    let bn = cfg.model.batchnorm;
    let act = cfg.model.activation;
    match cfg.model.family {
        Family::Fc => {
            let hidden = match budget {
                Some(b) => {
                    if cfg.sweep.budget_kind != BudgetKind::Bits {
                        bail!("fully connected budgets are bit budgets");
                    }
                    size_fc_for_bit_budget(
                        b,
                        cfg.model.weight_layers,
                        quant,
                        bn,
                        num_features,
                        num_classes,
                    )?
                }
                None => cfg.model.hidden,
            };
            let layers = fc_architecture(hidden, cfg.model.weight_layers, bn, act, num_classes);
            let input_shape = TensorShape::Flat { features: num_features };
            Ok(ResolvedNet {
                bits: dnn_bits(input_shape, &layers, quant)?,
                ops: dnn_ops(input_shape, &layers)?,
                label: format!("fc-{hidden}x{}", cfg.model.weight_layers),
                input_shape,
                layers,
            })
        }
        Family::Cnn => {
            let [c, h, w] = cfg
                .dataset
                .image
                .context("cnn needs dataset.image = [channels, height, width]")?;
            if c * h * w != num_features {
                bail!(
                    "dataset.image {c}x{h}x{w} does not match {num_features} features"
                );
            }
            let input_shape = TensorShape::Image { channels: c, height: h, width: w };
            let channels = match budget {
                Some(b) => {
                    let target = match cfg.sweep.budget_kind {
                        BudgetKind::Bits => BudgetTarget::Bits(b),
                        BudgetKind::Ops => BudgetTarget::Ops(b),
                    };
                    size_cnn_for_budget(
                        target,
                        cfg.model.channels.len(),
                        quant,
                        bn,
                        input_shape,
                        num_classes,
                    )?
                }
                None => cfg.model.channels.clone(),
            };
            let layers = cnn_architecture(&channels, bn, act, num_classes);
            let label = format!(
                "cnn-{}",
                channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x")
            );
            Ok(ResolvedNet {
                bits: dnn_bits(input_shape, &layers, quant)?,
                ops: dnn_ops(input_shape, &layers)?,
                label,
                input_shape,
                layers,
            })
        }
        _ => unreachable!("resolve_net_with is for network families"),
    }
}

/// Trains every restart of one grid point and returns the winning run's rows.
fn run_point(
    cfg: &ExperimentConfig,
    folds: &[Fold],
    dnn_folds: Option<&[(RawDataset, RawDataset)]>,
    point: &GridPoint,
) -> Result<Vec<Vec<String>>> {
    let family = cfg.model.family;
    let d = folds[0].train.num_features();
    let num_classes = folds[0].train.num_classes;
    let point_seed = derive_seed(cfg.seed, point.index as u64);

    let bn_quant = if family.is_bnc() { point.bits.to_bn()? } else { None };
    let net = if family.is_bnc() {
        None
    } else {
        Some(resolve_net(cfg, point.bits, point.budget, d, num_classes)?)
    };
    let tan = (family == Family::BncTan).then(|| random_tan(d, point_seed));

    let structure_label = match family {
        Family::BncNb => "nb".to_string(),
        Family::BncTan => "tan".to_string(),
        Family::BncStructure => "learned".to_string(),
        Family::Fc | Family::Cnn => net.as_ref().expect("resolved net").label.clone(),
    };

    // Learning-rate race with random restarts: every (lr, restart) candidate
    // trains all folds; the lowest mean test error wins, earliest candidate
    // on ties.
    let mut best: Option<(f64, f64, u64, Vec<FoldOutcome>)> = None;
    for (lr_idx, &lr0) in cfg.sweep.lr_grid.iter().enumerate() {
        for draw in 0..cfg.draws {
            let run_seed = derive_seed(point_seed, (lr_idx * cfg.draws + draw) as u64);
            let opt = OptimizerConfig { lr0, ..cfg.optimizer };
            let mut outcomes = Vec::with_capacity(folds.len());
            for (f, fold) in folds.iter().enumerate() {
                let fold_seed = derive_seed(run_seed, f as u64);
                let outcome = match family {
                    Family::BncNb | Family::BncTan => {
                        let structure = match &tan {
                            Some(t) => t.clone(),
                            None => TanStructure::naive_bayes(d),
                        };
                        let (model, history) = train_bnc(
                            &fold.train,
                            Some(&fold.test),
                            structure,
                            bn_quant,
                            &cfg.hybrid,
                            &opt,
                            fold_seed,
                        )?;
                        FoldOutcome {
                            bits: bnc_bits(&model, bn_quant),
                            ops: bnc_ops(&model),
                            train_err: history.final_train_err(),
                            test_err: history.final_test_err(),
                        }
                    }
                    Family::BncStructure => {
                        let dist = StructureDistribution::random(
                            d,
                            cfg.model.max_parent_candidates,
                            fold_seed,
                        )?;
                        let penalty = SizePenaltyConfig {
                            lambda_ms: point.lambda_ms,
                            ..SizePenaltyConfig::default()
                        };
                        let outcome = train_structure(
                            &fold.train,
                            Some(&fold.test),
                            dist,
                            &cfg.hybrid,
                            &opt,
                            &penalty,
                            derive_seed(fold_seed, 1),
                        )?;
                        FoldOutcome {
                            bits: bnc_bits(&outcome.model, bn_quant),
                            ops: bnc_ops(&outcome.model),
                            train_err: outcome.history.final_train_err(),
                            test_err: outcome.history.final_test_err(),
                        }
                    }
                    Family::Fc | Family::Cnn => {
                        let net = net.as_ref().expect("resolved net");
                        let (train, test) = &dnn_folds.expect("network folds")[f];
                        let (_, history) = train_dnn(
                            train,
                            Some(test),
                            net.input_shape,
                            net.layers.clone(),
                            point.bits.to_dnn()?,
                            &opt,
                            fold_seed,
                        )?;
                        FoldOutcome {
                            bits: net.bits,
                            ops: net.ops,
                            train_err: history.final_train_err(),
                            test_err: history.final_test_err(),
                        }
                    }
                };
                outcomes.push(outcome);
            }
            let mean_test =
                outcomes.iter().map(|o| o.test_err).sum::<f64>() / outcomes.len() as f64;
            if best.as_ref().is_none_or(|(b, ..)| mean_test < *b) {
                best = Some((mean_test, lr0, run_seed, outcomes));
            }
        }
    }
    let (_, lr0, run_seed, outcomes) = best.expect("at least one candidate ran");

    // Shared row prefix: everything that identifies the grid point.
    let (bi, bf) = match point.bits {
        BitSetting::Pair { bi, bf } => (bi.to_string(), bf.to_string()),
        _ => (String::new(), String::new()),
    };
    let fixed = |dataset: String, bits: String, ops: String, tr: String, te: String| {
        vec![
            dataset,
            family.as_str().to_string(),
            structure_label.clone(),
            point.bits.bits_per_param().to_string(),
            bi.clone(),
            bf.clone(),
            point.lambda_ms.to_string(),
            lr0.to_string(),
            bits,
            ops,
            tr,
            te,
            run_seed.to_string(),
        ]
    };

    let mut rows = Vec::new();
    if outcomes.len() == 1 {
        let o = &outcomes[0];
        rows.push(fixed(
            cfg.dataset.name.clone(),
            o.bits.to_string(),
            o.ops.to_string(),
            o.train_err.to_string(),
            o.test_err.to_string(),
        ));
    } else {
        for (f, o) in outcomes.iter().enumerate() {
            rows.push(fixed(
                format!("{}#fold-{f}", cfg.dataset.name),
                o.bits.to_string(),
                o.ops.to_string(),
                o.train_err.to_string(),
                o.test_err.to_string(),
            ));
        }
        let n = outcomes.len() as f64;
        let mean = |get: fn(&FoldOutcome) -> f64| {
            outcomes.iter().map(get).sum::<f64>() / n
        };
        rows.push(fixed(
            cfg.dataset.name.clone(),
            mean(|o| o.bits as f64).to_string(),
            mean(|o| o.ops as f64).to_string(),
            mean(|o| o.train_err).to_string(),
            mean(|o| o.test_err).to_string(),
        ));
    }
    Ok(rows)
}

fn render_line(fields: &[String]) -> String {
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(fields).expect("in-memory write");
    let bytes = wtr.into_inner().expect("in-memory flush");
    String::from_utf8(bytes).expect("utf8 csv").trim_end().to_string()
}

pub struct SweepSummary {
    pub results_path: PathBuf,
    pub rows_written: usize,
    pub rows_total: usize,
    pub points_total: usize,
}

/// Runs (or resumes) the configured sweep, writing `results.csv` under
/// `out_dir` along with the resolved config for provenance.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepSummary> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    cfg.save_resolved(out_dir, cfg.seed)?;

    let folds = prepare_folds(&cfg.dataset, cfg.seed)?;
    let dnn_folds: Option<Vec<(RawDataset, RawDataset)>> = match cfg.model.family {
        Family::Fc | Family::Cnn => Some(folds.iter().map(Fold::dnn_pair).collect()),
        _ => None,
    };
    let points = expand_grid(cfg);
    let rows_per_point = if folds.len() == 1 { 1 } else { folds.len() + 1 };
    let rows_total = points.len() * rows_per_point;
    let results_path = out_dir.join("results.csv");

    // How much of the file is already done?
    let header = RESULT_COLUMNS.join(",");
    let existing: Vec<String> = if results_path.exists() {
        let text = std::fs::read_to_string(&results_path)?;
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        if let Some(first) = lines.first() {
            if first != &header {
                bail!(
                    "{} has a different header; remove it or pick another --out",
                    results_path.display()
                );
            }
        }
        lines
    } else {
        Vec::new()
    };
    let existing_rows = existing.len().saturating_sub(1);
    if existing_rows > rows_total {
        bail!(
            "{} holds {existing_rows} rows but this sweep produces {rows_total}; \
             it belongs to a different run",
            results_path.display()
        );
    }
    let complete_points = existing_rows / rows_per_point;
    let partial_rows = existing_rows % rows_per_point;

    let file = OpenOptions::new().create(true).append(true).open(&results_path)?;
    let mut out = BufWriter::new(file);
    if existing.is_empty() {
        writeln!(out, "{header}")?;
    }

    let pending: Vec<&GridPoint> = points[complete_points..].iter().collect();
    if pending.is_empty() {
        out.flush()?;
        return Ok(SweepSummary {
            results_path,
            rows_written: 0,
            rows_total,
            points_total: points.len(),
        });
    }

    let mut rows_written = 0usize;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<String>>)>();
        let folds = &folds;
        let dnn = dnn_folds.as_deref();
        scope.spawn(move || {
            pending.par_iter().for_each_with(tx, |tx, point| {
                let lines = run_point(cfg, folds, dnn, point)
                    .map(|rows| rows.iter().map(|r| render_line(r)).collect::<Vec<_>>())
                    .with_context(|| {
                        format!(
                            "grid point {} (bits_per_param={}, lambda_ms={}, budget={:?})",
                            point.index,
                            point.bits.bits_per_param(),
                            point.lambda_ms,
                            point.budget,
                        )
                    });
                let _ = tx.send((point.index, lines));
            });
        });

        // Single writer: buffer out-of-order results and append in grid order.
        let mut buffered: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        let mut next = complete_points;
        for (index, result) in rx {
            buffered.insert(index, result?);
            while let Some(lines) = buffered.remove(&next) {
                let skip = if next == complete_points { partial_rows } else { 0 };
                if skip > 0 {
                    let tail = &existing[existing.len() - skip..];
                    for (have, want) in tail.iter().zip(&lines) {
                        if have != want {
                            bail!(
                                "existing rows for grid point {next} do not match this \
                                 config; refusing to resume into {}",
                                results_path.display()
                            );
                        }
                    }
                }
                for line in &lines[skip..] {
                    writeln!(out, "{line}")?;
                    rows_written += 1;
                }
                out.flush()?;
                next += 1;
            }
        }
        Ok(())
    })?;

    Ok(SweepSummary { results_path, rows_written, rows_total, points_total: points.len() })
}
