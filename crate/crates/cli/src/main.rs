use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use taxoseg::eval::{compare_samples, evaluate, kidney_groups, read_samples};
use taxoseg::experiment::{dataset_matrices, run_ablation, Arm};
use taxoseg::losses::run_gradient_suite;
use taxoseg::model::Model;
use taxoseg::scale::{build_scale_matrix_with, load_manifest, ScaleFormula, TABLE1_MANIFEST};
use taxoseg::synthdata::{generate_dataset, load_dataset, Dataset, DatasetConfig, Split};
use taxoseg::taxonomy::{derive_matrix, parse_tree, TaxonomyTree, KIDNEY_TREE};
use taxoseg::trainer::{fit, load_state, parse_kv, Matrices, RunConfig};

#[derive(Parser)]
#[command(name = "taxoseg", version, about = "Taxonomy-constrained multi-scale segmentation")]
struct Cli {
    /// Seed overriding the one in any config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives the reproducible single-threaded mode).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file for matrix commands, output directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a taxonomy tree into its relation matrix CSV.
    DeriveMatrix {
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Build the scale matrix CSV from a manifest.
    ScaleMatrix {
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "ratio")]
        formula: String,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        tree: Option<PathBuf>,
        /// `scenes`, `seed`, `ratios`, `scene_side`, `patch_side`,
        /// `patches_per_class`, `noise`, `color_jitter`.
        overrides: Vec<String>,
    },
    /// Train from a run config, with `key=value` overrides.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from `<out>/state`.
        #[arg(long)]
        resume: bool,
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Signed-rank test between two `samples.csv` files, paired by patch id.
    Compare { a: PathBuf, b: PathBuf },
    /// Check every analytic loss gradient against finite differences.
    LossCheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Train and score one ablation arm.
    Ablate {
        #[arg(long, value_enum)]
        htm: Switch,
        #[arg(long, value_enum)]
        hsm: Switch,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated training seeds; defaults to `--seed` or 0.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_tree(path: Option<&Path>) -> Result<TaxonomyTree> {
    let text = match path {
        Some(p) => read(p)?,
        None => KIDNEY_TREE.to_string(),
    };
    Ok(parse_tree(&text)?)
}

fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| anyhow!("override {s:?} is not key=value"))
}

fn run_config(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::parse(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = split_override(o)?;
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn dataset_config(overrides: &[String], seed: Option<u64>) -> Result<DatasetConfig> {
    let mut cfg = DatasetConfig::default();
    for o in overrides {
        let (k, v) = split_override(o)?;
        let bad = || anyhow!("bad value {v:?} for {k}");
        match k {
            "scenes" => cfg.scenes = v.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "ratios" => {
                let r: Vec<f64> = v.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                cfg.ratios = r.try_into().map_err(|_| bad())?;
            }
            "scene_side" => cfg.generator.scene_side = v.parse().map_err(|_| bad())?,
            "patch_side" => cfg.generator.patch_side = v.parse().map_err(|_| bad())?,
            "patches_per_class" => cfg.generator.patches_per_class = v.parse().map_err(|_| bad())?,
            "noise" => cfg.generator.noise = v.parse().map_err(|_| bad())?,
            "color_jitter" => cfg.generator.color_jitter = v.parse().map_err(|_| bad())?,
            _ => bail!("unknown dataset key {k}"),
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn matrices_for(cfg: &RunConfig, tree: &TaxonomyTree, ds: &Dataset) -> Result<Matrices> {
    Ok(match &cfg.manifest {
        Some(p) => {
            let manifest = load_manifest(&read(p)?, tree.names())?;
            Matrices::new(derive_matrix(tree)?, build_scale_matrix_with(&manifest, cfg.scale_formula)?)?
        }
        None => dataset_matrices(tree, ds, cfg.scale_formula)?,
    })
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d)?;
            }
            fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .ok_or_else(|| anyhow!("no output directory; pass --out"))
}

/// Provenance record. No timestamps, so identical runs write identical files.
fn provenance(dir: &Path, cli: &Cli, command: &str, resolved: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = json!({
        "command": command,
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": cli.seed,
        "threads": cli.threads,
        "resolved": resolved,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    match &cli.cmd {
        Cmd::DeriveMatrix { tree } => {
            let t = load_tree(tree.as_deref())?;
            let m = derive_matrix(&t)?;
            write_out(cli.out.as_deref(), &m.to_csv())?;
            if let Some(p) = &cli.out {
                provenance(&parent_dir(p), cli, "derive-matrix", json!({ "tree": tree, "classes": t.len() }))?;
            }
        }
        Cmd::ScaleMatrix { tree, manifest, formula } => {
            let t = load_tree(tree.as_deref())?;
            let text = match manifest {
                Some(p) => read(p)?,
                None => TABLE1_MANIFEST.to_string(),
            };
            let f: ScaleFormula = formula.parse()?;
            let s = build_scale_matrix_with(&load_manifest(&text, t.names())?, f)?;
            write_out(cli.out.as_deref(), &s.to_csv())?;
            if let Some(p) = &cli.out {
                provenance(&parent_dir(p), cli, "scale-matrix", json!({ "manifest": manifest, "formula": formula }))?;
            }
        }
        Cmd::GenData { tree, overrides } => {
            let t = load_tree(tree.as_deref())?;
            let cfg = dataset_config(overrides, cli.seed)?;
            let dir = out_dir(cli, None)?;
            let ds = generate_dataset(&t, &cfg, Some(&dir))?;
            let counts: Vec<usize> = Split::ALL.iter().map(|&s| ds.split(s).count()).collect();
            info!("{} patches (train/val/test {:?}) in {}", ds.patches.len(), counts, dir.display());
            provenance(&dir, cli, "gen-data", json!({ "tree": tree, "dataset": cfg }))?;
        }
        Cmd::Train { config, resume, overrides } => {
            let cfg = run_config(config.as_deref(), overrides, cli.seed)?;
            let dir = out_dir(cli, Some(&cfg))?;
            let data = cfg.dataset.as_ref().ok_or_else(|| anyhow!("no dataset path; set dataset = <dir>"))?;
            let t = load_tree(cfg.tree.as_deref())?;
            let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
            let m = matrices_for(&cfg, &t, &ds)?;
            provenance(
                &dir,
                cli,
                "train",
                json!({ "config": parse_kv(&cfg.train.to_kv())?, "dataset": data, "tree": cfg.tree,
                        "manifest": cfg.manifest, "scale_formula": cfg.scale_formula }),
            )?;
            fs::write(dir.join("scale.csv"), m.scale().to_csv())?;
            let state = if *resume { Some(load_state(&dir.join("state"))?) } else { None };
            let st = fit(&ds, &m, &cfg.train, Some(&dir), state)?;
            info!("best validation Dice {:.2} at epoch {}", st.best_val, st.best_epoch);
        }
        Cmd::Eval { checkpoint, dataset, tree } => {
            let t = load_tree(tree.as_deref())?;
            let model = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let ds = load_dataset(dataset)?;
            let test: Vec<_> = ds.split(Split::Test).collect();
            let report = evaluate(&model, &test, &derive_matrix(&t)?, &kidney_groups())?;
            let dir = out_dir(cli, None)?;
            report.write(&dir)?;
            print!("{}", report.to_markdown());
            provenance(&dir, cli, "eval", json!({ "checkpoint": checkpoint, "dataset": dataset }))?;
        }
        Cmd::Compare { a, b } => {
            let r = compare_samples(&read_samples(a)?, &read_samples(b)?)?;
            println!(
                "n={} W={} p={:.6} exact={} all_zero={}",
                r.n, r.statistic, r.p_value, r.exact, r.all_zero
            );
        }
        Cmd::LossCheck { trials } => {
            let rows = run_gradient_suite(cli.seed.unwrap_or(0), *trials)?;
            println!("{:<20} {:>7} {:>14}  result", "loss", "trials", "max rel err");
            for r in &rows {
                let verdict = if r.passed { "PASS" } else { "FAIL" };
                println!("{:<20} {:>7} {:>14.3e}  {verdict}", r.name, r.trials, r.max_rel_error);
            }
            if let Some(dir) = &cli.out {
                provenance(dir, cli, "loss-check", json!({ "trials": trials }))?;
            }
            if rows.iter().any(|r| !r.passed) {
                bail!("gradient check failed");
            }
        }
        Cmd::Ablate { htm, hsm, config, seeds, overrides } => {
            let mut ds_overrides = Vec::new();
            let mut train_overrides = Vec::new();
            for o in overrides {
                let (k, _) = split_override(o)?;
                if ["scenes", "ratios", "scene_side", "patch_side", "patches_per_class", "noise", "color_jitter"].contains(&k) {
                    ds_overrides.push(o.clone());
                } else {
                    train_overrides.push(o.clone());
                }
            }
            let cfg = run_config(config.as_deref(), &train_overrides, None)?;
            let dir = out_dir(cli, Some(&cfg))?;
            let t = load_tree(cfg.tree.as_deref())?;
            let ds = match &cfg.dataset {
                Some(p) => load_dataset(p)?,
                None => generate_dataset(&t, &dataset_config(&ds_overrides, None)?, None)?,
            };
            let seeds = if seeds.is_empty() { vec![cli.seed.unwrap_or(cfg.train.seed)] } else { seeds.clone() };
            let arm = Arm { htm: htm.on(), hsm: hsm.on() };
            provenance(
                &dir,
                cli,
                "ablate",
                json!({ "arm": arm, "seeds": seeds, "config": parse_kv(&cfg.train.to_kv())? }),
            )?;
            let results = run_ablation(&t, &ds, &cfg.train, &seeds, &[arm], Some(&dir))?;
            for r in &results {
                println!(
                    "seed {} {}: Dice {:.2}, violation {:.4}",
                    r.seed,
                    r.arm.label(),
                    r.report.overall.unwrap_or(f64::NAN),
                    r.violation
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
