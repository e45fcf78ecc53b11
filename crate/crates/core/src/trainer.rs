//! Two-phase training with partial labels.
//!
//! Epochs `1..=warmup_epochs` minimize Dice + cross-entropy on the labeled
//! class only. Later epochs also forward every selected peer class on the same
//! crop and add the weighted taxonomy term. Per-sample graphs run on the rayon
//! pool; their gradients are summed in batch order, so the result does not
//! depend on the thread count.
//!
//! Randomness (shuffling, crop offsets) comes from a generator seeded by
//! `(seed, epoch)`, so a [`TrainState`] needs no RNG state to resume exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{dice_percent, predict_probability, EvalError};
use crate::losses::{total_loss, LossError, MaskTensor, Peer};
use crate::model::{EncoderConfig, Model, ModelConfig, ModelError};
use crate::scale::{Magnification, ScaleMatrix};
use crate::seeds::derive_seed;
use crate::synthdata::{Dataset, PatchRecord, Split};
use crate::tape::{Graph, Mat, ParamGrads, ParamId, ParamStore};
use crate::taxonomy::{ClassId, Relation, TaxonomyMatrix};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("split {0} has no patches")]
    EmptySplit(Split),
    #[error("non-finite loss at epoch {epoch}, step {step} (patches: {patches})")]
    NonFinite {
        epoch: usize,
        step: usize,
        patches: String,
    },
    #[error("matrices disagree on class names")]
    Names,
    #[error("state file: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which related classes join a labeled patch's loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PeerPolicy {
    AllRelated,
    /// The `k` largest weights; ties go to the lower class index.
    TopKByScale(usize),
    /// Weights `≥ s_min`.
    Threshold(f64),
}

impl Default for PeerPolicy {
    fn default() -> Self {
        PeerPolicy::Threshold(0.001)
    }
}

impl FromStr for PeerPolicy {
    type Err = TrainError;

    /// `all_related`, `top_k_by_scale(3)`, `threshold(0.001)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || TrainError::Config(format!("bad peer policy {s:?}"));
        if s == "all_related" {
            return Ok(PeerPolicy::AllRelated);
        }
        let (name, arg) = s
            .strip_suffix(')')
            .and_then(|t| t.split_once('('))
            .ok_or_else(bad)?;
        match name.trim() {
            "top_k_by_scale" => Ok(PeerPolicy::TopKByScale(arg.trim().parse().map_err(|_| bad())?)),
            "threshold" => {
                let v: f64 = arg.trim().parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                Ok(PeerPolicy::Threshold(v))
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for PeerPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PeerPolicy::AllRelated => write!(f, "all_related"),
            PeerPolicy::TopKByScale(k) => write!(f, "top_k_by_scale({k})"),
            PeerPolicy::Threshold(v) => write!(f, "threshold({v})"),
        }
    }
}

/// Relation and scale matrices with a read counter, so tests can show the
/// warm-up phase never consults them.
#[derive(Debug)]
pub struct Matrices {
    taxonomy: TaxonomyMatrix,
    scale: ScaleMatrix,
    reads: AtomicUsize,
}

impl Clone for Matrices {
    fn clone(&self) -> Self {
        Matrices {
            taxonomy: self.taxonomy.clone(),
            scale: self.scale.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl Matrices {
    pub fn new(taxonomy: TaxonomyMatrix, scale: ScaleMatrix) -> Result<Self, TrainError> {
        if taxonomy.names() != scale.names() {
            return Err(TrainError::Names);
        }
        Ok(Matrices {
            taxonomy,
            scale,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taxonomy.is_empty()
    }

    pub fn relation(&self, i: usize, j: usize) -> Relation {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.taxonomy.get(i, j)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.scale.get(i, j)
    }

    /// Number of lookups so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn taxonomy(&self) -> &TaxonomyMatrix {
        &self.taxonomy
    }

    pub fn scale(&self) -> &ScaleMatrix {
        &self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerChoice {
    pub class: ClassId,
    pub relation: Relation,
    pub weight: f64,
}

/// Peers of class `i` in a fixed order: by class index, or by descending
/// weight for `TopKByScale`. Unrelated classes and `i` itself never appear.
pub fn select_peers(i: ClassId, m: &Matrices, policy: PeerPolicy) -> Vec<PeerChoice> {
    let mut related: Vec<PeerChoice> = (0..m.len())
        .filter(|&j| j != i.0)
        .filter_map(|j| {
            let r = m.relation(i.0, j);
            r.is_constraining().then(|| PeerChoice {
                class: ClassId(j),
                relation: r,
                weight: m.weight(i.0, j),
            })
        })
        .collect();
    match policy {
        PeerPolicy::AllRelated => related,
        PeerPolicy::Threshold(s_min) => {
            related.retain(|p| p.weight >= s_min);
            related
        }
        PeerPolicy::TopKByScale(k) => {
            related.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.class.0.cmp(&b.class.0)));
            related.truncate(k);
            related
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub lambda_hats: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub peer_policy: PeerPolicy,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Rescale warm-up to the paper's 50-of-`paper_total_epochs` share.
    pub paper_protocol: bool,
    pub paper_total_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 10,
            total_epochs: 20,
            lambda_hats: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            peer_policy: PeerPolicy::default(),
            seed: 0,
            encoder: EncoderConfig::default(),
            paper_protocol: false,
            paper_total_epochs: 100,
        }
    }
}

impl TrainConfig {
    /// Warm-up length actually used.
    pub fn effective_warmup(&self) -> usize {
        if self.paper_protocol {
            ((50.0 / self.paper_total_epochs as f64) * self.total_epochs as f64).round() as usize
        } else {
            self.warmup_epochs
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.effective_warmup() > self.total_epochs {
            return bad("warmup_epochs exceeds total_epochs");
        }
        if !(self.lambda_hats >= 0.0) {
            return bad("lambda_hats must be ≥ 0");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive");
        }
        if self.paper_protocol && self.paper_total_epochs < 50 {
            return bad("paper_total_epochs must be ≥ 50");
        }
        self.encoder.validate()?;
        Ok(())
    }

    /// Applies one `key = value` setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "warmup_epochs" => self.warmup_epochs = p(key, value)?,
            "total_epochs" => self.total_epochs = p(key, value)?,
            "lambda_hats" => self.lambda_hats = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "peer_policy" => self.peer_policy = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "image_side" => self.encoder.image_side = p(key, value)?,
            "patch_size" => self.encoder.patch_size = p(key, value)?,
            "d" => self.encoder.d = p(key, value)?,
            "blocks" => self.encoder.blocks = p(key, value)?,
            "heads" => self.encoder.heads = p(key, value)?,
            "paper_protocol" => self.paper_protocol = p(key, value)?,
            "paper_total_epochs" => self.paper_total_epochs = p(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// `key = value` lines in a stable order, readable by [`parse_kv`].
    pub fn to_kv(&self) -> String {
        let e = &self.encoder;
        format!(
            "warmup_epochs = {}\ntotal_epochs = {}\nlambda_hats = {}\nlearning_rate = {}\n\
             beta1 = {}\nbeta2 = {}\nadam_eps = {}\nbatch_size = {}\npeer_policy = {}\nseed = {}\n\
             image_side = {}\npatch_size = {}\nd = {}\nblocks = {}\nheads = {}\n\
             paper_protocol = {}\npaper_total_epochs = {}\n",
            self.warmup_epochs,
            self.total_epochs,
            self.lambda_hats,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.batch_size,
            self.peer_policy,
            self.seed,
            e.image_side,
            e.patch_size,
            e.d,
            e.blocks,
            e.heads,
            self.paper_protocol,
            self.paper_total_epochs
        )
    }
}

/// Splits `key = value` text into pairs. `#` starts a comment; blank lines
/// are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Parse {
            line: n + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TrainError::Parse {
                line: n + 1,
                msg: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Adaptive moment estimation. Rows of the parameters listed as sparse (the
/// token bank) are only touched when their gradient row is nonzero, each
/// with its own step count, so an unused token never drifts.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: Vec<Vec<u64>>,
    sparse: Vec<bool>,
}

impl Adam {
    pub fn new(params: &ParamStore, sparse: &[ParamId], cfg: &TrainConfig) -> Self {
        let mut flags = vec![false; params.len()];
        for id in sparse {
            flags[id.0] = true;
        }
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: params.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect(),
            v: params.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect(),
            steps: params.iter().map(|(_, _, v)| vec![0; v.nrows()]).collect(),
            sparse: flags,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        for k in 0..params.len() {
            let id = ParamId(k);
            let zeros;
            let g = match grads.get(id) {
                Some(g) => g,
                None if self.sparse[k] => continue,
                None => {
                    zeros = Mat::zeros(params.get(id).dim());
                    &zeros
                }
            };
            let p = params.get_mut(id);
            for r in 0..p.nrows() {
                let grow = g.row(r);
                if self.sparse[k] && grow.iter().all(|&x| x == 0.0) {
                    continue;
                }
                self.steps[k][r] += 1;
                let t = self.steps[k][r] as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for c in 0..p.ncols() {
                    let gv = grow[c];
                    let m = &mut self.m[k][[r, c]];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                    let v = &mut self.v[k][[r, c]];
                    *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                    let mh = self.m[k][[r, c]] / c1;
                    let vh = self.v[k][[r, c]] / c2;
                    p[[r, c]] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

/// One prepared training input: a crop (or zero-padded patch) of the model's
/// input size and the valid top-left rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch_id: String,
    pub image: Array3<f64>,
    pub label: Array2<f64>,
    /// Valid `(rows, cols)`; the rest is padding.
    pub valid: (usize, usize),
    pub class: ClassId,
    pub magnification: Magnification,
}

impl Sample {
    /// Crops at `offset` `(x, y)` when the patch is larger than `side`, pads
    /// bottom-right when smaller.
    pub fn from_patch(p: &PatchRecord, side: usize, offset: (usize, usize)) -> Self {
        let ps = p.side();
        let (x0, y0) = offset;
        let h = ps.saturating_sub(y0).min(side);
        let w = ps.saturating_sub(x0).min(side);
        let mut image = Array3::zeros((3, side, side));
        let mut label = Array2::zeros((side, side));
        image
            .slice_mut(s![.., ..h, ..w])
            .assign(&p.image.slice(s![.., y0..y0 + h, x0..x0 + w]).mapv(|v| v as f64 / 255.0));
        label
            .slice_mut(s![..h, ..w])
            .assign(&p.mask.slice(s![y0..y0 + h, x0..x0 + w]).mapv(|v| if v { 1.0 } else { 0.0 }));
        Sample {
            patch_id: p.patch_id.clone(),
            image,
            label,
            valid: (h, w),
            class: p.class,
            magnification: p.magnification,
        }
    }
}

/// Scalar losses of one step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub supervised_dice: f64,
    pub supervised_bce: f64,
    pub taxonomy: f64,
    pub peer_forwards: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub joint: bool,
    pub steps: usize,
    pub loss: f64,
    pub supervised_dice: f64,
    pub supervised_bce: f64,
    pub taxonomy: f64,
    /// Validation Dice (%) per class; `None` for classes without patches.
    pub val_dice: Vec<Option<f64>>,
    pub val_mean: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Last completed epoch.
    pub epoch: usize,
    pub model: Model,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepLoss>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub best_params: ParamStore,
}

impl TrainState {
    pub fn new(n_classes: usize, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(
            ModelConfig::new(n_classes, cfg.encoder.clone()),
            derive_seed(cfg.seed, &[0x1D17]),
        )?;
        let sparse = [model.class_tokens_id(), model.scale_tokens_id()];
        let optimizer = Adam::new(model.params(), &sparse, cfg);
        let best_params = model.params().clone();
        Ok(TrainState {
            epoch: 0,
            model,
            optimizer,
            history: Vec::new(),
            steps: Vec::new(),
            best_epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_params,
        })
    }

    /// The best-validation weights as a model.
    pub fn best_model(&self) -> Result<Model, TrainError> {
        Ok(Model::from_params(self.model.config().clone(), self.best_params.clone())?)
    }
}

struct SampleOut {
    loss: f64,
    dice: f64,
    bce: f64,
    taxonomy: f64,
    peers: usize,
    grads: ParamGrads,
}

fn valid_view(m: &Mat, (h, w): (usize, usize)) -> Mat {
    m.slice(s![..h, ..w]).to_owned()
}

fn embed(g: &Mat, side: usize) -> Mat {
    let mut out = Mat::zeros((side, side));
    out.slice_mut(s![..g.nrows(), ..g.ncols()]).assign(g);
    out
}

fn sample_step(
    model: &Model,
    sample: &Sample,
    peers: &[PeerChoice],
    lambda: f64,
) -> Result<SampleOut, TrainError> {
    let side = sample.image.dim().1;
    let mut g = Graph::new(model.params());
    let own = model.forward_graph(&mut g, &sample.image, sample.class, sample.magnification)?;
    let mut peer_vars = Vec::with_capacity(peers.len());
    for p in peers {
        peer_vars.push(model.forward_graph(&mut g, &sample.image, p.class, sample.magnification)?);
    }
    let y = MaskTensor::binary(valid_view(&sample.label, sample.valid))?;
    let p_i = MaskTensor::soft(valid_view(g.value(own.probability), sample.valid))?;
    let p_js = peer_vars
        .iter()
        .map(|v| MaskTensor::soft(valid_view(g.value(v.probability), sample.valid)))
        .collect::<Result<Vec<_>, _>>()?;
    let peer_terms: Vec<Peer> = peers
        .iter()
        .zip(&p_js)
        .map(|(c, p)| Peer {
            prediction: p,
            relation: c.relation,
            weight: c.weight,
        })
        .collect();
    let tl = total_loss(&y, &p_i, &peer_terms, lambda)?;
    let mut seeds = vec![(own.probability, embed(&tl.grad_self, side))];
    for (v, gp) in peer_vars.iter().zip(&tl.grad_peers) {
        seeds.push((v.probability, embed(gp, side)));
    }
    let grads = g.backward(&seeds);
    Ok(SampleOut {
        loss: tl.value,
        dice: tl.dice,
        bce: tl.bce,
        taxonomy: tl.taxonomy,
        peers: peers.len(),
        grads,
    })
}

/// One optimizer update on a batch. The phase follows `epoch`: warm-up
/// epochs never consult `matrices`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Sample],
    matrices: &Matrices,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<StepLoss, TrainError> {
    let joint = epoch > cfg.effective_warmup() && cfg.lambda_hats > 0.0;
    let peer_sets: Vec<Vec<PeerChoice>> = batch
        .iter()
        .map(|s| {
            if joint {
                select_peers(s.class, matrices, cfg.peer_policy)
            } else {
                Vec::new()
            }
        })
        .collect();
    let model = &state.model;
    let outs: Vec<Result<SampleOut, TrainError>> = batch
        .par_iter()
        .zip(peer_sets.par_iter())
        .map(|(s, peers)| sample_step(model, s, peers, cfg.lambda_hats))
        .collect();
    let mut total = ParamGrads::zeros_like(model.params());
    let mut loss = StepLoss {
        epoch,
        step,
        loss: 0.0,
        supervised_dice: 0.0,
        supervised_bce: 0.0,
        taxonomy: 0.0,
        peer_forwards: 0,
    };
    let non_finite = || TrainError::NonFinite {
        epoch,
        step,
        patches: batch.iter().map(|s| s.patch_id.as_str()).collect::<Vec<_>>().join(","),
    };
    for out in outs {
        let out = match out {
            Err(TrainError::Loss(LossError::NonFinite)) => return Err(non_finite()),
            other => other?,
        };
        total.accumulate(&out.grads);
        loss.loss += out.loss;
        loss.supervised_dice += out.dice;
        loss.supervised_bce += out.bce;
        loss.taxonomy += out.taxonomy;
        loss.peer_forwards += out.peers;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    loss.loss /= n;
    loss.supervised_dice /= n;
    loss.supervised_bce /= n;
    loss.taxonomy /= n;
    if !loss.loss.is_finite() || total.0.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(non_finite());
    }
    state.optimizer.step(state.model.params_mut(), &total);
    Ok(loss)
}

/// Per-class validation Dice (%) and the mean over classes that have patches.
pub fn validate(model: &Model, patches: &[&PatchRecord], n_classes: usize) -> Result<(Vec<Option<f64>>, f64), TrainError> {
    let scores: Vec<(usize, f64)> = patches
        .par_iter()
        .map(|p| -> Result<(usize, f64), TrainError> {
            let prob = predict_probability(model, &p.image_f64(), p.class, p.magnification)?;
            let d = dice_percent(&MaskTensor::soft(prob)?, &MaskTensor::binary(p.mask_f64())?)?;
            Ok((p.class.0, d))
        })
        .collect::<Result<_, _>>()?;
    let mut sum = vec![0.0; n_classes];
    let mut count = vec![0usize; n_classes];
    for (c, d) in scores {
        sum[c] += d;
        count[c] += 1;
    }
    let per: Vec<Option<f64>> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((per, mean))
}

/// Shuffled order and crop offsets for one epoch.
fn epoch_plan(train: &[&PatchRecord], side: usize, seed: u64, epoch: usize) -> Vec<(usize, (usize, usize))> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE90C, epoch as u64]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for k in (1..order.len()).rev() {
        let j = rng.random_range(0..=k);
        order.swap(k, j);
    }
    order
        .into_iter()
        .map(|i| {
            let slack = train[i].side().saturating_sub(side);
            let off = (rng.random_range(0..=slack), rng.random_range(0..=slack));
            (i, off)
        })
        .collect()
}

/// Trains from `resume` (or from scratch) up to `cfg.total_epochs`,
/// validating after every epoch. With `out`, writes `history.csv`,
/// `steps.csv`, `last.ckpt`, `best.ckpt` and the resumable state.
pub fn fit(
    ds: &Dataset,
    matrices: &Matrices,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    if matrices.taxonomy().names() != ds.class_names.as_slice() {
        return Err(TrainError::Names);
    }
    let train: Vec<&PatchRecord> = ds.split(Split::Train).collect();
    let val: Vec<&PatchRecord> = ds.split(Split::Val).collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let n = ds.class_names.len();
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(n, cfg)?,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let side = cfg.encoder.image_side;
    for epoch in state.epoch + 1..=cfg.total_epochs {
        let plan = epoch_plan(&train, side, cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for (k, chunk) in plan.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&(i, off)| Sample::from_patch(train[i], side, off))
                .collect();
            let step = match train_step(&mut state, &batch, matrices, cfg, epoch, k) {
                Ok(s) => s,
                Err(e) => {
                    if let Some(dir) = out {
                        let diag = serde_json::json!({
                            "error": e.to_string(),
                            "epoch": epoch,
                            "step": k,
                            "recent_steps": state.steps.iter().rev().take(20).collect::<Vec<_>>(),
                        });
                        fs::write(dir.join("diagnostics.json"), diag.to_string())?;
                    }
                    return Err(e);
                }
            };
            sums[0] += step.loss;
            sums[1] += step.supervised_dice;
            sums[2] += step.supervised_bce;
            sums[3] += step.taxonomy;
            steps += 1;
            state.steps.push(step);
        }
        let (val_dice, val_mean) = validate(&state.model, &val, n)?;
        let avg = |v: f64| v / steps as f64;
        let record = EpochRecord {
            epoch,
            joint: epoch > cfg.effective_warmup() && cfg.lambda_hats > 0.0,
            steps,
            loss: avg(sums[0]),
            supervised_dice: avg(sums[1]),
            supervised_bce: avg(sums[2]),
            taxonomy: avg(sums[3]),
            val_dice,
            val_mean,
        };
        info!(
            "epoch {epoch}: loss {:.4} (dice {:.4}, bce {:.4}, taxonomy {:.5}), val Dice {:.2}",
            record.loss, record.supervised_dice, record.supervised_bce, record.taxonomy, val_mean
        );
        state.history.push(record);
        state.epoch = epoch;
        if val_mean > state.best_val {
            state.best_val = val_mean;
            state.best_epoch = epoch;
            state.best_params = state.model.params().clone();
        }
        if let Some(dir) = out {
            write_history(&dir.join("history.csv"), &state.history, &ds.class_names)?;
            write_steps(&dir.join("steps.csv"), &state.steps)?;
            state.model.save(&dir.join("last.ckpt"))?;
            if state.best_epoch == epoch {
                state.model.save(&dir.join("best.ckpt"))?;
            }
            save_state(&dir.join("state"), &state)?;
        }
    }
    Ok(state)
}

fn write_history(path: &Path, history: &[EpochRecord], names: &[String]) -> Result<(), TrainError> {
    let mut s = String::from("epoch,phase,steps,loss,supervised_dice,supervised_bce,taxonomy,val_mean");
    for n in names {
        write!(s, ",val_{n}").unwrap();
    }
    s.push('\n');
    for r in history {
        write!(
            s,
            "{},{},{},{:.12},{:.12},{:.12},{:.12},{:.6}",
            r.epoch,
            if r.joint { "joint" } else { "warmup" },
            r.steps,
            r.loss,
            r.supervised_dice,
            r.supervised_bce,
            r.taxonomy,
            r.val_mean
        )
        .unwrap();
        for d in &r.val_dice {
            match d {
                Some(v) => write!(s, ",{v:.6}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_steps(path: &Path, steps: &[StepLoss]) -> Result<(), TrainError> {
    let mut s = String::from("epoch,step,loss,supervised_dice,supervised_bce,taxonomy,peer_forwards\n");
    for r in steps {
        writeln!(
            s,
            "{},{},{:.12},{:.12},{:.12},{:.12},{}",
            r.epoch, r.step, r.loss, r.supervised_dice, r.supervised_bce, r.taxonomy, r.peer_forwards
        )
        .unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

const STATE_MAGIC: &[u8; 8] = b"TXSGSTAT";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    history: Vec<EpochRecord>,
    steps: Vec<StepLoss>,
    best_epoch: usize,
    best_val: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    sparse: Vec<bool>,
    row_steps: Vec<Vec<u64>>,
}

fn push_mats(buf: &mut Vec<u8>, mats: &[Mat]) {
    for m in mats {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Writes `model.ckpt`, `best.ckpt` and `optimizer.bin` into `dir`.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    state.model.save(&dir.join("model.ckpt"))?;
    state.best_model()?.save(&dir.join("best.ckpt"))?;
    let o = &state.optimizer;
    let header = StateHeader {
        epoch: state.epoch,
        history: state.history.clone(),
        steps: state.steps.clone(),
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        sparse: o.sparse.clone(),
        row_steps: o.steps.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainError::State(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    push_mats(&mut buf, &o.m);
    push_mats(&mut buf, &o.v);
    let mut f = fs::File::create(dir.join("optimizer.bin"))?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<TrainState, TrainError> {
    let model = Model::load(&dir.join("model.ckpt"))?;
    let best = Model::load(&dir.join("best.ckpt"))?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("optimizer.bin"))?.read_to_end(&mut bytes)?;
    let bad = |m: &str| TrainError::State(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != STATE_MAGIC {
        return Err(bad("not a state file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: StateHeader = serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated"))?)
        .map_err(|e| TrainError::State(e.to_string()))?;
    let mut at = 16 + hlen;
    let mut read = |shape: (usize, usize)| -> Result<Mat, TrainError> {
        let n = shape.0 * shape.1;
        let raw = bytes.get(at..at + 8 * n).ok_or_else(|| bad("truncated moments"))?;
        at += 8 * n;
        Ok(Mat::from_shape_vec(
            shape,
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        )
        .unwrap())
    };
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|(_, _, v)| v.dim()).collect();
    let m = shapes.iter().map(|&s| read(s)).collect::<Result<Vec<_>, _>>()?;
    let v = shapes.iter().map(|&s| read(s)).collect::<Result<Vec<_>, _>>()?;
    if header.sparse.len() != shapes.len() || header.row_steps.len() != shapes.len() {
        return Err(bad("optimizer does not match model"));
    }
    Ok(TrainState {
        epoch: header.epoch,
        optimizer: Adam {
            lr: header.lr,
            beta1: header.beta1,
            beta2: header.beta2,
            eps: header.eps,
            m,
            v,
            steps: header.row_steps,
            sparse: header.sparse,
        },
        history: header.history,
        steps: header.steps,
        best_epoch: header.best_epoch,
        best_val: header.best_val,
        best_params: best.params().clone(),
        model,
    })
}

/// Paths and settings of a run config file, on top of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub tree: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scale_formula: crate::scale::ScaleFormula,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "tree" => self.tree = Some(value.into()),
            "manifest" => self.manifest = Some(value.into()),
            "dataset" => self.dataset = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "scale_formula" => {
                self.scale_formula = value.parse().map_err(|e: crate::scale::ScaleError| TrainError::Config(e.to_string()))?
            }
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::{build_scale_matrix, load_manifest, ScaleMatrix, TABLE1_MANIFEST};
    use crate::taxonomy::{derive_matrix, parse_tree, KIDNEY_TREE};

    fn kidney_matrices() -> Matrices {
        let tree = parse_tree(KIDNEY_TREE).unwrap();
        let tax = derive_matrix(&tree).unwrap();
        let scale = build_scale_matrix(&load_manifest(TABLE1_MANIFEST, tree.names()).unwrap()).unwrap();
        Matrices::new(tax, scale).unwrap()
    }

    fn id(m: &Matrices, name: &str) -> ClassId {
        m.taxonomy().class_id(name).unwrap()
    }

    #[test]
    fn all_related_peers_of_tuft() {
        let m = kidney_matrices();
        let tuft = id(&m, "Tuft");
        let peers = select_peers(tuft, &m, PeerPolicy::AllRelated);
        let rel = |n: &str| peers.iter().find(|p| p.class == id(&m, n)).map(|p| p.relation);
        assert_eq!(rel("Capsule"), Some(Relation::Subset));
        assert_eq!(rel("Cortex"), Some(Relation::Subset));
        assert_eq!(rel("Podocyte"), Some(Relation::Superset));
        assert_eq!(rel("Mesangial"), Some(Relation::Superset));
        assert_eq!(rel("DT"), Some(Relation::Exclusive));
        assert_eq!(rel("Medulla"), Some(Relation::Exclusive));
        assert_eq!(rel("Artery"), None);
        assert!(peers.iter().all(|p| p.class != tuft));
        assert!(peers.windows(2).all(|w| w[0].class.0 < w[1].class.0));
    }

    #[test]
    fn top_k_and_threshold() {
        let m = kidney_matrices();
        let tuft = id(&m, "Tuft");
        let all = select_peers(tuft, &m, PeerPolicy::AllRelated);
        let best = select_peers(tuft, &m, PeerPolicy::TopKByScale(1));
        assert_eq!(best.len(), 1);
        let max = all.iter().map(|p| p.weight).fold(f64::MIN, f64::max);
        assert_eq!(best[0].weight, max);
        assert!(select_peers(tuft, &m, PeerPolicy::Threshold(2.0)).is_empty());
        assert_eq!(select_peers(tuft, &m, PeerPolicy::Threshold(0.0)), all);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        let tree = parse_tree(KIDNEY_TREE).unwrap();
        let tax = derive_matrix(&tree).unwrap();
        let m = Matrices::new(tax, ScaleMatrix::ones(tree.names().to_vec())).unwrap();
        let tuft = id(&m, "Tuft");
        let two = select_peers(tuft, &m, PeerPolicy::TopKByScale(2));
        let all = select_peers(tuft, &m, PeerPolicy::AllRelated);
        assert_eq!(two, all[..2].to_vec());
    }

    #[test]
    fn policy_round_trips() {
        for p in [PeerPolicy::AllRelated, PeerPolicy::TopKByScale(3), PeerPolicy::Threshold(0.001)] {
            assert_eq!(p.to_string().parse::<PeerPolicy>().unwrap(), p);
        }
        assert!("threshold(x)".parse::<PeerPolicy>().is_err());
        assert!("nearest".parse::<PeerPolicy>().is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("peer_policy", "top_k_by_scale(2)").unwrap();
        cfg.set("d", "32").unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&cfg.to_kv()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(parse_kv("just words").is_err());
        let run = RunConfig::parse("# comment\ntree = a.tree\nscale_formula = ones\nseed = 4\n").unwrap();
        assert_eq!(run.tree, Some(PathBuf::from("a.tree")));
        assert_eq!(run.train.seed, 4);
    }

    #[test]
    fn paper_protocol_scales_warmup() {
        let cfg = TrainConfig {
            paper_protocol: true,
            total_epochs: 20,
            paper_total_epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_warmup(), 10);
        let bad = TrainConfig {
            warmup_epochs: 30,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_crops_and_pads() {
        let p = PatchRecord {
            patch_id: "x".into(),
            scene_id: 0,
            class: ClassId(0),
            magnification: Magnification::X5,
            micron_per_pixel: 2.0,
            split: Split::Train,
            origin: (0, 0),
            image: Array3::from_shape_fn((3, 8, 8), |(c, y, x)| (c * 64 + y * 8 + x) as u8),
            mask: Array2::from_shape_fn((8, 8), |(y, x)| x > y),
            peers_present: vec![false],
        };
        let c = Sample::from_patch(&p, 4, (2, 3));
        assert_eq!(c.valid, (4, 4));
        assert_eq!(c.image[[1, 0, 0]], (64 + 3 * 8 + 2) as f64 / 255.0);
        assert_eq!(c.label[[0, 3]], 1.0);
        let big = Sample::from_patch(&p, 12, (0, 0));
        assert_eq!(big.valid, (8, 8));
        assert_eq!(big.label[[10, 10]], 0.0);
        assert_eq!(big.image[[0, 9, 0]], 0.0);
    }

    #[test]
    fn sparse_adam_skips_untouched_rows() {
        let mut store = ParamStore::new();
        let bank = store.add("bank", Mat::ones((3, 2)));
        let dense = store.add("w", Mat::ones((1, 2)));
        let mut opt = Adam::new(&store, &[bank], &TrainConfig::default());
        let mut g = ParamGrads::zeros_like(&store);
        let mut gb = Mat::zeros((3, 2));
        gb[[1, 0]] = 1.0;
        g.0[bank.0] = Some(gb);
        g.0[dense.0] = Some(Mat::from_elem((1, 2), 0.5));
        let before = store.clone();
        opt.step(&mut store, &g);
        assert_eq!(store.get(bank).row(0), before.get(bank).row(0));
        assert_eq!(store.get(bank).row(2), before.get(bank).row(2));
        assert_ne!(store.get(bank).row(1), before.get(bank).row(1));
        // first Adam step moves by lr·sign(g)
        assert!((store.get(dense)[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
