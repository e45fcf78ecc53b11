//! The taxonomy/scale ablation: one shared supervised warm-up per seed, then
//! one continuation per arm, each scored on the test split.
//!
//! Sharing the warm-up is exact, not an approximation: warm-up epochs never
//! read the matrices or `lambda_hats`, so every arm would reach the same
//! weights on its own.

use std::fs;
use std::path::Path;

use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::eval::{evaluate, kidney_groups, EvalError, EvalReport};
use crate::scale::{build_scale_matrix_with, measure_manifest, ScaleError, ScaleFormula};
use crate::synthdata::{generate_dataset, Dataset, DatasetConfig, GenError, Split};
use crate::taxonomy::{derive_matrix, TaxonomyError, TaxonomyTree};
use crate::trainer::{fit, Matrices, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One column pair of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Arm {
    /// Taxonomy loss on (`lambda_hats` as configured) or off (`0`).
    pub htm: bool,
    /// Area-rate weights on, or all ones.
    pub hsm: bool,
}

impl Arm {
    pub fn label(self) -> String {
        let f = |b| if b { "on" } else { "off" };
        format!("htm-{}_hsm-{}", f(self.htm), f(self.hsm))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: Arm,
    pub report: EvalReport,
    pub violation: f64,
}

/// Scale matrix measured from the training split.
pub fn dataset_matrices(tree: &TaxonomyTree, ds: &Dataset, formula: ScaleFormula) -> Result<Matrices, ExperimentError> {
    let manifest = measure_manifest(ds.split(Split::Train), tree.names())?;
    let scale = build_scale_matrix_with(&manifest, formula)?;
    Ok(Matrices::new(derive_matrix(tree)?, scale)?)
}

/// Trains and scores every arm for every seed. `base.seed` is replaced by
/// each entry of `seeds`; the dataset is shared.
pub fn run_ablation(
    tree: &TaxonomyTree,
    ds: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    arms: &[Arm],
    out: Option<&Path>,
) -> Result<Vec<ArmResult>, ExperimentError> {
    let matrix = derive_matrix(tree)?;
    let test: Vec<_> = ds.split(Split::Test).collect();
    let groups = kidney_groups();
    let mut results = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let warm_cfg = TrainConfig {
            total_epochs: cfg.effective_warmup(),
            ..cfg.clone()
        };
        let unused = dataset_matrices(tree, ds, ScaleFormula::Ones)?;
        let warm = fit(ds, &unused, &warm_cfg, None, None)?;
        for &arm in arms {
            let arm_cfg = TrainConfig {
                lambda_hats: if arm.htm { cfg.lambda_hats } else { 0.0 },
                ..cfg.clone()
            };
            let formula = if arm.hsm { ScaleFormula::Ratio } else { ScaleFormula::Ones };
            let m = dataset_matrices(tree, ds, formula)?;
            let dir = out.map(|d| d.join(format!("seed{seed}")).join(arm.label()));
            let state = fit(ds, &m, &arm_cfg, dir.as_deref(), Some(warm.clone()))?;
            let report = evaluate(&state.model, &test, &matrix, &groups)?;
            if let Some(d) = &dir {
                report.write(d)?;
            }
            info!(
                "seed {seed} {}: Dice {:.2}, violation {:.4}",
                arm.label(),
                report.overall.unwrap_or(f64::NAN),
                report.violation_score()
            );
            results.push(ArmResult {
                seed,
                arm,
                violation: report.violation_score(),
                report,
            });
        }
    }
    if let Some(d) = out {
        fs::create_dir_all(d)?;
        fs::write(d.join("ablation.csv"), ablation_csv(&results))?;
    }
    Ok(results)
}

pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut s = String::from("seed,htm,hsm,regions,units,cells,average,escape,overlap,violation\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for r in results {
        let g = |k: usize| f(r.report.groups.get(k).and_then(|g| g.1));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.6}\n",
            r.seed,
            r.arm.htm,
            r.arm.hsm,
            g(0),
            g(1),
            g(2),
            f(r.report.overall),
            f(r.report.mean_escape),
            f(r.report.mean_overlap),
            r.violation
        ));
    }
    s
}

/// Generates the dataset and runs the ablation in one call.
pub fn ablation_from_scratch(
    tree: &TaxonomyTree,
    data: &DatasetConfig,
    base: &TrainConfig,
    seeds: &[u64],
    arms: &[Arm],
    out: Option<&Path>,
) -> Result<Vec<ArmResult>, ExperimentError> {
    let ds = generate_dataset(tree, data, None)?;
    run_ablation(tree, &ds, base, seeds, arms, out)
}
