//! Segmentation metrics, taxonomy-violation metrics and the Wilcoxon
//! signed-rank test.
//!
//! Conventions: a probability `≥ 0.5` counts as foreground, and the Dice of
//! two empty masks is 100.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::losses::{LossError, MaskTensor};
use crate::model::{Model, ModelError};
use crate::scale::Magnification;
use crate::synthdata::{GroundTruth, PatchRecord};
use crate::taxonomy::{ClassId, Relation, TaxonomyMatrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("expected {expected} class maps, got {got}")]
    MapCount { expected: usize, got: usize },
    #[error("paired samples differ in length ({0} vs {1})")]
    Unpaired(usize, usize),
    #[error("need at least 6 nonzero differences, got {0}")]
    TooFewSamples(usize),
    #[error("no ground truth for patch {0}")]
    MissingTruth(String),
    #[error("malformed sample list: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const THRESHOLD: f64 = 0.5;

fn binarize(m: &Array2<f64>) -> Array2<bool> {
    m.mapv(|v| v >= THRESHOLD)
}

/// `100 · 2|A∩B| / (|A| + |B|)` after thresholding both masks.
pub fn dice_percent(pred: &MaskTensor, truth: &MaskTensor) -> Result<f64, EvalError> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::Shape(pred.shape(), truth.shape()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        let (p, t) = (p >= THRESHOLD, t >= THRESHOLD);
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Mass of the contained class outside its container.
    Escape,
    /// Shared foreground of two exclusive classes.
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairViolation {
    /// Container for `Escape`; the lower index for `Overlap`.
    pub i: usize,
    pub j: usize,
    pub kind: ViolationKind,
    pub numerator: f64,
    pub denominator: f64,
    /// `None` when the denominator is zero.
    pub value: Option<f64>,
}

impl PairViolation {
    fn new(i: usize, j: usize, kind: ViolationKind, numerator: f64, denominator: f64) -> Self {
        PairViolation {
            i,
            j,
            kind,
            numerator,
            denominator,
            value: (denominator > 0.0).then(|| numerator / denominator),
        }
    }
}

/// Escape for every `i ⊇ j` and overlap for every exclusive `i < j`, in
/// row-major pair order.
pub fn violation_metrics(preds: &[Array2<f64>], m: &TaxonomyMatrix) -> Result<Vec<PairViolation>, EvalError> {
    let n = m.len();
    if preds.len() != n {
        return Err(EvalError::MapCount {
            expected: n,
            got: preds.len(),
        });
    }
    if let Some(first) = preds.first() {
        for p in preds {
            if p.dim() != first.dim() {
                return Err(EvalError::Shape(first.dim(), p.dim()));
            }
        }
    }
    let bins: Vec<Array2<bool>> = preds.iter().map(binarize).collect();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            match m.get(i, j) {
                Relation::Superset => {
                    let mass: f64 = preds[j].sum();
                    let outside: f64 = preds[j]
                        .iter()
                        .zip(&bins[i])
                        .map(|(&p, &b)| if b { 0.0 } else { p })
                        .sum();
                    out.push(PairViolation::new(i, j, ViolationKind::Escape, outside, mass));
                }
                Relation::Exclusive if i < j => {
                    let a = bins[i].iter().filter(|&&b| b).count();
                    let b = bins[j].iter().filter(|&&b| b).count();
                    let both = bins[i].iter().zip(&bins[j]).filter(|(&x, &y)| x && y).count();
                    out.push(PairViolation::new(i, j, ViolationKind::Overlap, both as f64, a.min(b) as f64));
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences used.
    pub n: usize,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1 by definition.
    pub all_zero: bool,
}

/// Largest sample size tested by exact enumeration.
pub const EXACT_MAX_N: usize = 12;

/// Average ranks (1-based) of `v`, ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Paired two-sided signed-rank test of `x` against `y`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Unpaired(x.len(), y.len()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    if d.is_empty() {
        return Ok(Wilcoxon {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            exact: true,
            all_zero: true,
        });
    }
    let n = d.len();
    if n < 6 {
        return Err(EvalError::TooFewSamples(n));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let (p, exact) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, w), true)
    } else {
        (normal_p(&abs, w), false)
    };
    Ok(Wilcoxon {
        statistic: w,
        w_plus,
        w_minus,
        n,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        exact,
        all_zero: false,
    })
}

/// Counts sign assignments with `W⁺ ≤ w` by dynamic programming over doubled
/// ranks (ties make ranks half-integers), then doubles for two sides.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let r2: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = r2.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for &r in &r2 {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let limit = (w * 2.0).round() as usize;
    let below: f64 = counts[..=limit].iter().sum();
    (2.0 * below / 2f64.powi(ranks.len() as i32)).min(1.0)
}

fn normal_p(abs: &[f64], w: f64) -> f64 {
    let n = abs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let mut e = k;
        while e + 1 < sorted.len() && sorted[e + 1] == sorted[k] {
            e += 1;
        }
        let t = (e - k + 1) as f64;
        tie += t * t * t - t;
        k = e + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Runs `f` on non-overlapping `side × side` tiles of `image` (zero-padded at
/// the bottom and right edges) and stitches the outputs.
pub fn tile_predict<F>(image: &Array3<f64>, side: usize, mut f: F) -> Result<Array2<f64>, EvalError>
where
    F: FnMut(&Array3<f64>) -> Result<Array2<f64>, EvalError>,
{
    let (c, h, w) = image.dim();
    let mut out = Array2::zeros((h, w));
    for y0 in (0..h).step_by(side) {
        for x0 in (0..w).step_by(side) {
            let (th, tw) = ((h - y0).min(side), (w - x0).min(side));
            let tile = if th == side && tw == side {
                image.slice(s![.., y0..y0 + side, x0..x0 + side]).to_owned()
            } else {
                let mut t = Array3::zeros((c, side, side));
                t.slice_mut(s![.., ..th, ..tw])
                    .assign(&image.slice(s![.., y0..y0 + th, x0..x0 + tw]));
                t
            };
            let p = f(&tile)?;
            if p.dim() != (side, side) {
                return Err(EvalError::Shape(p.dim(), (side, side)));
            }
            out.slice_mut(s![y0..y0 + th, x0..x0 + tw])
                .assign(&p.slice(s![..th, ..tw]));
        }
    }
    Ok(out)
}

/// Probability map of `class` over a whole patch of any size.
pub fn predict_probability(
    model: &Model,
    image: &Array3<f64>,
    class: ClassId,
    mag: Magnification,
) -> Result<Array2<f64>, EvalError> {
    let side = model.config().encoder.image_side;
    tile_predict(image, side, |t| Ok(model.forward(t, class, mag)?.probability))
}

/// Anything that maps a patch and a class to a probability map.
pub trait Predictor: Sync {
    fn predict(&self, patch: &PatchRecord, class: ClassId) -> Result<Array2<f64>, EvalError>;
}

impl Predictor for Model {
    fn predict(&self, patch: &PatchRecord, class: ClassId) -> Result<Array2<f64>, EvalError> {
        predict_probability(self, &patch.image_f64(), class, patch.magnification)
    }
}

/// Predicts the ground truth itself.
impl Predictor for GroundTruth {
    fn predict(&self, patch: &PatchRecord, class: ClassId) -> Result<Array2<f64>, EvalError> {
        let masks = self
            .window(patch)
            .ok_or_else(|| EvalError::MissingTruth(patch.patch_id.clone()))?;
        Ok(masks[class.0].mapv(|b| if b { 1.0 } else { 0.0 }))
    }
}

/// Report groups of the default kidney taxonomy.
pub fn kidney_groups() -> Vec<(String, Range<usize>)> {
    vec![
        ("Regions".to_string(), 0..5),
        ("Units".to_string(), 5..12),
        ("Cells".to_string(), 12..15),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub patch_id: String,
    pub class: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub container_or_first: String,
    pub other: String,
    pub kind: ViolationKind,
    /// Numerators summed over patches divided by summed denominators.
    pub mean: Option<f64>,
    /// Patches with a nonzero denominator.
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Dice (%) per class; `None` when the class has no test patches.
    pub per_class: Vec<Option<f64>>,
    pub patches_per_class: Vec<usize>,
    pub groups: Vec<(String, Option<f64>)>,
    /// Mean of the present per-class values.
    pub overall: Option<f64>,
    pub pairs: Vec<PairSummary>,
    pub mean_escape: Option<f64>,
    pub mean_overlap: Option<f64>,
    pub samples: Vec<SampleDice>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    /// Escape plus overlap, with absent parts counted as zero.
    pub fn violation_score(&self) -> f64 {
        self.mean_escape.unwrap_or(0.0) + self.mean_overlap.unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,group,dice,patches\n");
        for (k, name) in self.class_names.iter().enumerate() {
            let group = self
                .group_of(k)
                .unwrap_or("");
            let d = self.per_class[k].map(|d| format!("{d:.4}")).unwrap_or_default();
            writeln!(s, "{name},{group},{d},{}", self.patches_per_class[k]).unwrap();
        }
        for (g, v) in &self.groups {
            writeln!(s, "{g} average,,{},", v.map(|d| format!("{d:.4}")).unwrap_or_default()).unwrap();
        }
        writeln!(s, "Average,,{},", self.overall.map(|d| format!("{d:.4}")).unwrap_or_default()).unwrap();
        s
    }

    fn group_of(&self, k: usize) -> Option<&str> {
        kidney_groups()
            .into_iter()
            .position(|(_, r)| r.contains(&k))
            .and_then(|g| self.groups.get(g).map(|(n, _)| n.as_str()))
    }

    pub fn to_markdown(&self) -> String {
        let f = |v: Option<f64>| v.map(|d| format!("{d:.2}")).unwrap_or_else(|| "n/a".into());
        let mut s = String::from("| ");
        for (g, _) in &self.groups {
            write!(s, "{g} | ").unwrap();
        }
        s.push_str("Average | Escape | Overlap |\n|");
        for _ in 0..self.groups.len() + 3 {
            s.push_str("---|");
        }
        s.push_str("\n| ");
        for (_, v) in &self.groups {
            write!(s, "{} | ", f(*v)).unwrap();
        }
        let g = |v: Option<f64>| v.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into());
        writeln!(s, "{} | {} | {} |", f(self.overall), g(self.mean_escape), g(self.mean_overlap)).unwrap();
        s
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("patch_id,class,dice\n");
        for r in &self.samples {
            writeln!(s, "{},{},{:.6}", r.patch_id, r.class, r.dice).unwrap();
        }
        s
    }

    pub fn violations_csv(&self) -> String {
        let mut s = String::from("class_i,class_j,kind,mean,patches\n");
        for p in &self.pairs {
            let kind = match p.kind {
                ViolationKind::Escape => "escape",
                ViolationKind::Overlap => "overlap",
            };
            let m = p.mean.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(s, "{},{},{kind},{m},{}", p.container_or_first, p.other, p.patches).unwrap();
        }
        s
    }

    /// Writes `report.csv`, `report.md`, `samples.csv` and `violations.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.md"), self.to_markdown())?;
        fs::write(dir.join("samples.csv"), self.samples_csv())?;
        fs::write(dir.join("violations.csv"), self.violations_csv())?;
        Ok(())
    }
}

/// Predicts every class on every patch, scores the labeled class with Dice
/// and all predictions with the violation metrics. Each pair's violation is
/// pooled over patches (summed numerators over summed denominators), so
/// patches where a class is essentially absent carry little weight.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    patches: &[&PatchRecord],
    matrix: &TaxonomyMatrix,
    groups: &[(String, Range<usize>)],
) -> Result<EvalReport, EvalError> {
    let n = matrix.len();
    let per_patch: Vec<(f64, Vec<PairViolation>)> = patches
        .par_iter()
        .map(|p| -> Result<_, EvalError> {
            let maps = (0..n)
                .map(|c| predictor.predict(p, ClassId(c)))
                .collect::<Result<Vec<_>, _>>()?;
            let dice = dice_percent(&MaskTensor::soft(maps[p.class.0].clone())?, &MaskTensor::binary(p.mask_f64())?)?;
            Ok((dice, violation_metrics(&maps, matrix)?))
        })
        .collect::<Result<_, _>>()?;

    let names = matrix.names().to_vec();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut samples = Vec::with_capacity(patches.len());
    let mut pair_acc: HashMap<(usize, usize, ViolationKind), (f64, f64, usize)> = HashMap::new();
    let mut pair_order = Vec::new();
    for (p, (dice, viol)) in patches.iter().zip(&per_patch) {
        sums[p.class.0] += dice;
        counts[p.class.0] += 1;
        samples.push(SampleDice {
            patch_id: p.patch_id.clone(),
            class: names[p.class.0].clone(),
            dice: *dice,
        });
        for v in viol {
            let key = (v.i, v.j, v.kind);
            let e = pair_acc.entry(key).or_insert_with(|| {
                pair_order.push(key);
                (0.0, 0.0, 0)
            });
            e.0 += v.numerator;
            e.1 += v.denominator;
            e.2 += (v.denominator > 0.0) as usize;
        }
    }
    let per_class: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let group_means = groups
        .iter()
        .map(|(g, r)| (g.clone(), mean(r.clone().filter_map(|k| per_class.get(k).copied().flatten()))))
        .collect();
    pair_order.sort();
    let pairs: Vec<PairSummary> = pair_order
        .iter()
        .map(|&(i, j, kind)| {
            let (num, den, c) = pair_acc[&(i, j, kind)];
            PairSummary {
                container_or_first: names[i].clone(),
                other: names[j].clone(),
                kind,
                mean: (den > 0.0).then(|| num / den),
                patches: c,
            }
        })
        .collect();
    let kind_mean = |k: ViolationKind| mean(pairs.iter().filter(|p| p.kind == k).filter_map(|p| p.mean));
    Ok(EvalReport {
        overall: mean(per_class.iter().flatten().copied()),
        mean_escape: kind_mean(ViolationKind::Escape),
        mean_overlap: kind_mean(ViolationKind::Overlap),
        class_names: names,
        per_class,
        patches_per_class: counts,
        groups: group_means,
        pairs,
        samples,
    })
}

/// Reads a `samples.csv`.
pub fn read_samples(path: &Path) -> Result<Vec<SampleDice>, EvalError> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

/// Pairs two sample lists by patch id and tests `a` against `b`.
pub fn compare_samples(a: &[SampleDice], b: &[SampleDice]) -> Result<Wilcoxon, EvalError> {
    let bmap: HashMap<&str, f64> = b.iter().map(|s| (s.patch_id.as_str(), s.dice)).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in a {
        if let Some(&d) = bmap.get(s.patch_id.as_str()) {
            x.push(s.dice);
            y.push(d);
        }
    }
    if x.is_empty() {
        return Err(EvalError::Format("no shared patch ids".into()));
    }
    wilcoxon_signed_rank(&x, &y)
}
