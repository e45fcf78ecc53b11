//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits nonzero when any criterion fails.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taxoseg::eval::wilcoxon_signed_rank;
use taxoseg::experiment::{run_ablation, Arm};
use taxoseg::losses::{bce, dice_loss, taxonomy_pair_loss, total_loss, LossValue, MaskTensor, Peer};
use taxoseg::model::{EncoderConfig, Model, ModelConfig};
use taxoseg::scale::{compute_area_rate, load_manifest, Magnification, TABLE1_MANIFEST};
use taxoseg::synthdata::{generate_dataset, DatasetConfig};
use taxoseg::tape::{Graph, Mat};
use taxoseg::taxonomy::{derive_matrix, parse_tree, validate_matrix, ClassId, Relation, KIDNEY_TREE};
use taxoseg::trainer::{fit, Matrices, TrainConfig};
use taxoseg::experiment::dataset_matrices;
use taxoseg::scale::ScaleFormula;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let el = t.elapsed();
    let within = el <= limit;
    let pass = o.pass && within;
    println!(
        "{} [{id}] {name}: {} ({:.1}s, limit {}s{})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        el.as_secs_f64(),
        limit.as_secs(),
        if within { "" } else { ", over time" }
    );
    pass
}

/// Printed area-rate column, in class order.
const PRINTED_RATES: [f64; 15] = [
    2.434, 2.600, 1.760, 1.853, 1.844, 0.097, 0.360, 0.619, 0.466, 0.083, 0.002, 0.012, 0.001, 0.001, 0.002,
];

fn table1() -> Outcome {
    let tree = parse_tree(KIDNEY_TREE).unwrap();
    let manifest = load_manifest(TABLE1_MANIFEST, tree.names()).unwrap();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (c, &printed) in manifest.classes.iter().zip(&PRINTED_RATES) {
        let a = compute_area_rate(c).unwrap();
        let tol = if printed < 0.01 { 0.0005 } else { 0.001 };
        let err = (a - printed).abs();
        worst = worst.max(err);
        ok &= err <= tol;
    }
    outcome(ok, format!("15 rows, max |error| {worst:.5}"))
}

fn closure_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut mismatches = 0;
    let mut invalid = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let tree = common::random_forest(rng.random(), n);
        let m = derive_matrix(&tree).unwrap();
        for i in 0..n {
            for j in 0..n {
                mismatches += (m.get(i, j) != common::path_relation(&tree, i, j)) as usize;
            }
        }
        invalid += (!validate_matrix(&m).is_empty()) as usize;
    }
    outcome(
        mismatches == 0 && invalid == 0,
        format!("1000 forests, {mismatches} mismatched pairs, {invalid} invalid matrices"),
    )
}

/// Central differences computed here, independently of the library helper.
fn fd_rel_error(f: &dyn Fn(&MaskTensor) -> LossValue, p: &MaskTensor) -> f64 {
    let h = 1e-5;
    let analytic = f(p).gradient;
    let mut worst: f64 = 0.0;
    for idx in 0..p.values().len() {
        let bump = |d: f64| {
            let mut v = p.values().clone();
            v.as_slice_mut().unwrap()[idx] += d;
            f(&MaskTensor::soft(v).unwrap()).value
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[idx];
        // exact zeros (superset branch where y = 1) leave only round-off
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names = ["dice_loss", "bce", "subset", "superset", "exclusive", "total"];
    let mut worst = [0.0f64; 6];
    for _ in 0..50 {
        let y = loop {
            let v = Array2::from_shape_fn((8, 8), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            if v.sum() > 0.0 && v.sum() < 64.0 {
                break MaskTensor::binary(v).unwrap();
            }
        };
        let mut interior = || MaskTensor::soft(Array2::from_shape_fn((8, 8), |_| rng.random_range(0.05..0.95))).unwrap();
        let p = interior();
        let q = interior();
        let fs: [Box<dyn Fn(&MaskTensor) -> LossValue>; 6] = [
            Box::new(|m| dice_loss(&y, m).unwrap()),
            Box::new(|m| bce(&y, m).unwrap()),
            Box::new(|m| taxonomy_pair_loss(&y, m, Relation::Subset).unwrap()),
            Box::new(|m| taxonomy_pair_loss(&y, m, Relation::Superset).unwrap()),
            Box::new(|m| taxonomy_pair_loss(&y, m, Relation::Exclusive).unwrap()),
            Box::new(|m| {
                let peers = [
                    Peer { prediction: &q, relation: Relation::Exclusive, weight: 0.8 },
                    Peer { prediction: &q, relation: Relation::Subset, weight: 0.3 },
                ];
                let t = total_loss(&y, m, &peers, 0.1).unwrap();
                LossValue { value: t.value, gradient: t.grad_self }
            }),
        ];
        for (k, f) in fs.iter().enumerate() {
            worst[k] = worst[k].max(fd_rel_error(f.as_ref(), &p));
        }
    }
    let ok = worst.iter().all(|&w| w < 1e-4);
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, format!("50 trials each; {detail}"))
}

fn descent() -> Outcome {
    let y = MaskTensor::binary(Array2::from_shape_fn((8, 8), |(r, c)| if r < 4 && c < 5 { 1.0 } else { 0.0 })).unwrap();
    let yv = y.values().clone();
    let mut details = Vec::new();
    let mut ok = true;
    for (rel, name) in [
        (Relation::Exclusive, "exclusive overlap"),
        (Relation::Subset, "subset outside"),
        (Relation::Superset, "superset escape"),
    ] {
        let violation = |p: &Array2<f64>| match rel {
            Relation::Exclusive => (p * &yv).sum(),
            _ => (p * &yv.mapv(|v| 1.0 - v)).sum(),
        };
        let mut p = Array2::from_elem((8, 8), 0.5);
        let start = violation(&p);
        let mut prev = start;
        let mut monotone = true;
        for _ in 0..200 {
            let g = taxonomy_pair_loss(&y, &MaskTensor::soft(p.clone()).unwrap(), rel).unwrap().gradient;
            p = (&p - &(g * 2.0)).mapv(|v| v.clamp(0.0, 1.0));
            let now = violation(&p);
            monotone &= now <= prev + 1e-9;
            prev = now;
        }
        ok &= monotone && prev < start;
        details.push(format!("{name} {start:.2}→{prev:.3}"));
    }
    outcome(ok, details.join(", "))
}

fn architecture() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let default = Model::new(ModelConfig::new(15, EncoderConfig::default()), 1).unwrap();
    let bank = default.token_bank();
    let d = EncoderConfig::default().d;
    ok &= bank.class_tokens.dim() == (15, d) && bank.scale_tokens.dim() == (4, d);
    ok &= default.config().head.omega_len() == 162;
    let side = EncoderConfig::default().image_side;
    let img = Array3::from_shape_fn((3, side, side), |(c, y, x)| ((c + y * 3 + x * 7) % 11) as f64 / 11.0);
    let out = default.forward(&img, ClassId(8), Magnification::X20).unwrap();
    ok &= out.logits.dim() == (2, side, side) && out.probability.dim() == (side, side);
    ok &= out.probability.iter().all(|&v| v > 0.0 && v < 1.0);
    notes.push(format!("bank 15×{d} + 4×{d}, ω 162, output 2×{side}×{side}"));

    // gradient sparsity and finite differences on a small config
    let enc = EncoderConfig {
        image_side: 16,
        patch_size: 4,
        d: 16,
        blocks: 1,
        heads: 2,
    };
    let mut model = Model::new(ModelConfig::new(15, enc), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f64>());
    let weights = Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0..1.0));
    let (class, mag) = (ClassId(6), Magnification::X10);
    let objective = |m: &Model| (&m.forward(&img, class, mag).unwrap().probability * &weights).sum();
    let grads = {
        let mut g = Graph::new(model.params());
        let v = model.forward_graph(&mut g, &img, class, mag).unwrap();
        g.backward(&[(v.probability, weights.clone())])
    };
    let rows_used = |id, used: usize| {
        grads.get(id).map(|g: &Mat| {
            (0..g.nrows()).all(|r| g.row(r).iter().any(|&x| x != 0.0) == (r == used))
        })
    };
    let sparse = rows_used(model.class_tokens_id(), class.0) == Some(true)
        && rows_used(model.scale_tokens_id(), mag.token_index()) == Some(true);
    ok &= sparse;
    notes.push(format!("token rows sparse: {sparse}"));

    let mut worst: f64 = 0.0;
    let h = 1e-5;
    let ids: Vec<_> = model.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id).cloned() else { continue };
        // the two largest-gradient entries of every tensor
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g.as_slice().unwrap()[b].abs().total_cmp(&g.as_slice().unwrap()[a].abs()));
        for &k in order.iter().take(2) {
            let a = g.as_slice().unwrap()[k];
            if a == 0.0 {
                continue;
            }
            let mut bumped = |delta: f64| {
                let orig = model.params().get(id).as_slice().unwrap()[k];
                model.params_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig + delta;
                let v = objective(&model);
                model.params_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig;
                v
            };
            let numeric = (bumped(h) - bumped(-h)) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    ok &= worst < 1e-3;
    notes.push(format!("full-model FD max rel error {worst:.1e}"));
    outcome(ok, notes.join("; "))
}

fn wilcoxon() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 200 {
        let n = rng.random_range(6..=10);
        // small integer differences produce ties and zeros
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4i32..=4) as f64).collect();
        let y = vec![0.0; n];
        let nonzero: Vec<f64> = x.iter().copied().filter(|&v| v != 0.0).collect();
        if nonzero.len() < 6 {
            continue;
        }
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        worst = worst.max((r.p_value - common::enumeration_p(&nonzero)).abs());
        cases += 1;
    }
    let hand = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap();
    let ok = worst < 1e-12 && hand.w_minus == 0.0 && (hand.p_value - 0.03125).abs() < 1e-15;
    outcome(ok, format!("200 cases, max |Δp| {worst:.1e}; hand case p = {}", hand.p_value))
}

fn ablation_config() -> TrainConfig {
    TrainConfig {
        warmup_epochs: 20,
        total_epochs: 40,
        encoder: EncoderConfig {
            image_side: 32,
            patch_size: 8,
            d: 32,
            blocks: 2,
            heads: 4,
        },
        ..TrainConfig::default()
    }
}

fn ablation() -> Outcome {
    let tree = parse_tree(KIDNEY_TREE).unwrap();
    let data = DatasetConfig {
        scenes: 60,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&tree, &data, None).unwrap();
    let arms = [Arm { htm: false, hsm: false }, Arm { htm: true, hsm: true }];
    let seeds = [0, 1, 2, 3, 4];
    let results = run_ablation(&tree, &ds, &ablation_config(), &seeds, &arms, None).unwrap();
    let mut lower = 0;
    let (mut dice_off, mut dice_on) = (0.0, 0.0);
    for pair in results.chunks(2) {
        let (off, on) = (&pair[0], &pair[1]);
        lower += (on.violation < off.violation) as usize;
        dice_off += off.report.overall.unwrap_or(0.0);
        dice_on += on.report.overall.unwrap_or(0.0);
        println!(
            "     seed {}: violation off {:.4} on {:.4}; Dice off {:.2} on {:.2}",
            off.seed,
            off.violation,
            on.violation,
            off.report.overall.unwrap_or(f64::NAN),
            on.report.overall.unwrap_or(f64::NAN)
        );
    }
    let k = seeds.len() as f64;
    let (dice_off, dice_on) = (dice_off / k, dice_on / k);
    let ok = lower >= 4 && dice_on >= dice_off - 1.0;
    outcome(
        ok,
        format!("violation lower in {lower}/5 seeds; mean Dice off {dice_off:.2}, on {dice_on:.2}"),
    )
}

fn determinism() -> Outcome {
    let tree = parse_tree(KIDNEY_TREE).unwrap();
    let data = DatasetConfig {
        scenes: 3,
        seed: 8,
        ratios: [0.34, 0.33, 0.33],
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&tree, &data, None).unwrap();
    let m: Matrices = dataset_matrices(&tree, &ds, ScaleFormula::Ratio).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 1,
        total_epochs: 3,
        encoder: EncoderConfig {
            image_side: 16,
            patch_size: 4,
            d: 16,
            blocks: 1,
            heads: 2,
        },
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pool.install(|| fit(&ds, &m, &cfg, Some(d.path()), None)).unwrap();
    }
    let files = ["history.csv", "last.ckpt", "best.ckpt"];
    let same = files
        .iter()
        .all(|f| fs::read(dirs[0].path().join(f)).unwrap() == fs::read(dirs[1].path().join(f)).unwrap());
    outcome(same, format!("{} identical across two single-threaded runs", files.join(", ")))
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        run(1, "area rates", s(1), table1),
        run(2, "closure oracle", s(30), closure_oracle),
        run(3, "loss gradients", s(60), gradients),
        run(4, "descent on each relation", s(60), descent),
        run(5, "architecture contracts", s(120), architecture),
        run(7, "signed-rank test", s(10), wilcoxon),
        run(8, "training determinism", s(120), determinism),
        run(6, "ablation direction", s(1800), ablation),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
