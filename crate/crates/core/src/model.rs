//! Token-prompted segmentation network.
//!
//! Pipeline for one `(image, class, magnification)` query:
//!
//! 1. **Encoder.** Non-overlapping patches are linearly embedded and given
//!    learned positional embeddings. Before every transformer block the class
//!    token `T_c[i]` and the scale token `T_s[m]` are written into the first
//!    two sequence positions, so each block sees fresh prompts.
//! 2. **Decoder.** The prompt set `[GAP(F), T_c[i], T_s[m]]` and the image
//!    tokens (plus a learned dense embedding) exchange information through one
//!    two-way attention block. The image tokens are then upsampled by 2× stages
//!    (linear map + pixel shuffle) to full resolution with `C` channels.
//! 3. **Controller.** One affine map turns `[GAP(F), T_c[i], T_s[m]]` into the
//!    flat weight vector `ω` of the dynamic head.
//! 4. **Dynamic head.** `ω` is unpacked into 1×1 convolutions applied per
//!    pixel, ending in a two-channel softmax.
//!
//! Tensors are matrices: token sequences are `tokens × d`, feature maps are
//! `pixels × channels` in raster order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scale::Magnification;
use crate::tape::{Graph, Mat, ParamId, ParamStore, Var};
use crate::taxonomy::ClassId;

/// RGB image, `3 × H × W`, values nominally in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class index {class} out of range for {n} classes")]
    ClassOutOfRange { class: usize, n: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 64,
            patch_size: 8,
            d: 64,
            blocks: 4,
            heads: 4,
        }
    }
}

impl EncoderConfig {
    /// Patch grid side `h = w`.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Tokens entering each block: two prompts plus the patch tokens.
    pub fn sequence_len(&self) -> usize {
        2 + self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_side == 0 || self.d == 0 || self.heads == 0 {
            return bad("sizes must be positive".into());
        }
        if self.image_side % self.patch_size != 0 {
            return bad(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return bad(format!(
                "patch size {} must be a power of two ≥ 2 for 2× upsampling",
                self.patch_size
            ));
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        Ok(())
    }
}

/// Channel sequence of the per-pixel dynamic head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicHeadSpec {
    pub channels: Vec<usize>,
}

impl Default for DynamicHeadSpec {
    fn default() -> Self {
        DynamicHeadSpec {
            channels: vec![8, 8, 8, 2],
        }
    }
}

impl DynamicHeadSpec {
    /// `Σ (in·out + out)` over the layers.
    pub fn omega_len(&self) -> usize {
        self.channels
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn input_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(ModelError::Config("head needs ≥ 2 positive channel counts".into()));
        }
        if *self.channels.last().unwrap() != 2 {
            return Err(ModelError::Config("head must end in 2 channels".into()));
        }
        Ok(())
    }

    /// Offsets of `(weight, bias)` for each layer inside `ω`. Weights are
    /// stored row-major as `in × out`, followed by the `out` biases.
    pub fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut at = 0;
        let mut out = Vec::new();
        for w in self.channels.windows(2) {
            let (cin, cout) = (w[0], w[1]);
            out.push((at, cin, cout, at + cin * cout));
            at += cin * cout + cout;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub encoder: EncoderConfig,
    pub head: DynamicHeadSpec,
}

impl ModelConfig {
    pub fn new(n_classes: usize, encoder: EncoderConfig) -> Self {
        ModelConfig {
            n_classes,
            encoder,
            head: DynamicHeadSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_classes == 0 {
            return Err(ModelError::Config("no classes".into()));
        }
        self.encoder.validate()?;
        self.head.validate()
    }

    /// Channel counts of the upsampling stages, starting at `d`.
    pub fn upsample_channels(&self) -> Vec<usize> {
        let c = self.head.input_channels();
        let stages = self.encoder.patch_size.trailing_zeros() as usize;
        let mut chans = vec![self.encoder.d];
        for s in 0..stages {
            let prev = chans[s];
            chans.push(if s + 1 == stages { c } else { (prev / 2).max(c) });
        }
        chans
    }
}

/// Learnable class and scale tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank {
    /// `n × d`
    pub class_tokens: Mat,
    /// `4 × d`, rows indexed by [`Magnification::token_index`].
    pub scale_tokens: Mat,
    pub d: usize,
}

/// Dense output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    /// `2 × H × W`
    pub logits: Array3<f64>,
    /// Foreground probability, `H × W`.
    pub probability: Array2<f64>,
}

/// Graph handles produced by [`Model::encode`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Patch tokens, `h·w × d` in raster order.
    pub features: Var,
    /// Final states of the two prompt positions, `2 × d`.
    pub prompts: Var,
}

/// Graph handles of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegVars {
    /// `H·W × 2`
    pub logits: Var,
    /// `H × W`
    pub probability: Var,
}

struct LnIds {
    gamma: ParamId,
    beta: ParamId,
}

struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct BlockIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    mlp: MlpIds,
}

struct DecoderIds {
    dense: ParamId,
    self_attn: AttnIds,
    ln_self: LnIds,
    token_to_image: AttnIds,
    ln_t2i: LnIds,
    mlp: MlpIds,
    ln_mlp: LnIds,
    image_to_token: AttnIds,
    ln_i2t: LnIds,
    upsample: Vec<(ParamId, ParamId)>,
}

struct Ids {
    class_tokens: ParamId,
    scale_tokens: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_final: LnIds,
    decoder: DecoderIds,
    ctrl_w: ParamId,
    ctrl_b: ParamId,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Registers every tensor in a fixed order; `make` supplies the values.
struct Builder<'a> {
    store: ParamStore,
    make: &'a mut dyn FnMut(&str, (usize, usize), Init) -> Result<Mat, ModelError>,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, shape: (usize, usize), init: Init) -> Result<ParamId, ModelError> {
        let value = (self.make)(name, shape, init)?;
        Ok(self.store.add(name, value))
    }

    fn ln(&mut self, name: &str, d: usize) -> Result<LnIds, ModelError> {
        Ok(LnIds {
            gamma: self.add(&format!("{name}.gamma"), (1, d), Init::Ones)?,
            beta: self.add(&format!("{name}.beta"), (1, d), Init::Zeros)?,
        })
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<(ParamId, ParamId), ModelError> {
        Ok((
            self.add(&format!("{name}.w"), (i, o), Init::Normal)?,
            self.add(&format!("{name}.b"), (1, o), Init::Zeros)?,
        ))
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<AttnIds, ModelError> {
        let (wq, bq) = self.linear(&format!("{name}.q"), d, d)?;
        let (wk, bk) = self.linear(&format!("{name}.k"), d, d)?;
        let (wv, bv) = self.linear(&format!("{name}.v"), d, d)?;
        let (wo, bo) = self.linear(&format!("{name}.o"), d, d)?;
        Ok(AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn mlp(&mut self, name: &str, d: usize) -> Result<MlpIds, ModelError> {
        let (w1, b1) = self.linear(&format!("{name}.fc1"), d, 4 * d)?;
        let (w2, b2) = self.linear(&format!("{name}.fc2"), 4 * d, d)?;
        Ok(MlpIds { w1, b1, w2, b2 })
    }
}

fn build(
    config: &ModelConfig,
    make: &mut dyn FnMut(&str, (usize, usize), Init) -> Result<Mat, ModelError>,
) -> Result<(ParamStore, Ids), ModelError> {
    let e = &config.encoder;
    let d = e.d;
    let tokens = e.grid() * e.grid();
    let mut b = Builder {
        store: ParamStore::new(),
        make,
    };
    let class_tokens = b.add("bank.class", (config.n_classes, d), Init::Normal)?;
    let scale_tokens = b.add("bank.scale", (4, d), Init::Normal)?;
    let (patch_w, patch_b) = b.linear("enc.patch", 3 * e.patch_size * e.patch_size, d)?;
    let pos = b.add("enc.pos", (tokens, d), Init::Normal)?;
    let mut blocks = Vec::with_capacity(e.blocks);
    for i in 0..e.blocks {
        blocks.push(BlockIds {
            ln1: b.ln(&format!("enc.{i}.ln1"), d)?,
            attn: b.attn(&format!("enc.{i}.attn"), d)?,
            ln2: b.ln(&format!("enc.{i}.ln2"), d)?,
            mlp: b.mlp(&format!("enc.{i}.mlp"), d)?,
        });
    }
    let ln_final = b.ln("enc.ln_final", d)?;
    let dense = b.add("dec.dense", (tokens, d), Init::Normal)?;
    let self_attn = b.attn("dec.self_attn", d)?;
    let ln_self = b.ln("dec.ln_self", d)?;
    let token_to_image = b.attn("dec.t2i", d)?;
    let ln_t2i = b.ln("dec.ln_t2i", d)?;
    let mlp = b.mlp("dec.mlp", d)?;
    let ln_mlp = b.ln("dec.ln_mlp", d)?;
    let image_to_token = b.attn("dec.i2t", d)?;
    let ln_i2t = b.ln("dec.ln_i2t", d)?;
    let chans = config.upsample_channels();
    let mut upsample = Vec::new();
    for (s, w) in chans.windows(2).enumerate() {
        upsample.push(b.linear(&format!("dec.up{s}"), w[0], 4 * w[1])?);
    }
    let (ctrl_w, ctrl_b) = b.linear("ctrl", 3 * d, config.head.omega_len())?;
    let ids = Ids {
        class_tokens,
        scale_tokens,
        patch_w,
        patch_b,
        pos,
        blocks,
        ln_final,
        decoder: DecoderIds {
            dense,
            self_attn,
            ln_self,
            token_to_image,
            ln_t2i,
            mlp,
            ln_mlp,
            image_to_token,
            ln_i2t,
            upsample,
        },
        ctrl_w,
        ctrl_b,
    };
    Ok((b.store, ids))
}

const INIT_STD: f64 = 0.02;

fn truncated_normal(rng: &mut impl Rng, shape: (usize, usize)) -> Mat {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Mat::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

/// Pixel-shuffle gather map: `(h·w) × 4c` → `(2h·2w) × c`.
fn pixel_shuffle_index(side: usize, c: usize) -> Arc<[usize]> {
    let out_side = 2 * side;
    let mut idx = Vec::with_capacity(out_side * out_side * c);
    for oy in 0..out_side {
        for ox in 0..out_side {
            let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
            let base = (y * side + x) * 4 * c + (dy * 2 + dx) * c;
            idx.extend(base..base + c);
        }
    }
    idx.into()
}

const CKPT_MAGIC: &[u8; 8] = b"TXSGCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    shuffle: Vec<Arc<[usize]>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model::from_params(self.config.clone(), self.params.clone()).expect("consistent clone")
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl Model {
    /// Random initialization: truncated normal (σ = 0.02) weights and tokens,
    /// zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |_: &str, shape, init| {
            Ok(match init {
                Init::Normal => truncated_normal(&mut rng, shape),
                Init::Zeros => Mat::zeros(shape),
                Init::Ones => Mat::ones(shape),
            })
        };
        let (params, ids) = build(&config, &mut make)?;
        Ok(Self::assemble(config, params, ids))
    }

    /// Rebuilds a model around existing tensors, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let mut make = |name: &str, shape: (usize, usize), _| {
            let id = params
                .id(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            let v = params.get(id);
            if v.dim() != shape {
                return Err(ModelError::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    v.dim()
                )));
            }
            Ok(v.clone())
        };
        let (store, ids) = build(&config, &mut make)?;
        if store.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                params.len()
            )));
        }
        Ok(Self::assemble(config, store, ids))
    }

    fn assemble(config: ModelConfig, params: ParamStore, ids: Ids) -> Self {
        let chans = config.upsample_channels();
        let mut side = config.encoder.grid();
        let mut shuffle = Vec::new();
        for &c in &chans[1..] {
            shuffle.push(pixel_shuffle_index(side, c));
            side *= 2;
        }
        Model {
            config,
            params,
            ids,
            shuffle,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn class_tokens_id(&self) -> ParamId {
        self.ids.class_tokens
    }

    pub fn scale_tokens_id(&self) -> ParamId {
        self.ids.scale_tokens
    }

    pub fn token_bank(&self) -> TokenBank {
        TokenBank {
            class_tokens: self.params.get(self.ids.class_tokens).clone(),
            scale_tokens: self.params.get(self.ids.scale_tokens).clone(),
            d: self.config.encoder.d,
        }
    }

    pub fn set_token_bank(&mut self, bank: TokenBank) -> Result<(), ModelError> {
        let want_c = (self.config.n_classes, self.config.encoder.d);
        let want_s = (4, self.config.encoder.d);
        if bank.class_tokens.dim() != want_c || bank.scale_tokens.dim() != want_s {
            return Err(ModelError::Shape(format!(
                "token bank must be {want_c:?} and {want_s:?}"
            )));
        }
        *self.params.get_mut(self.ids.class_tokens) = bank.class_tokens;
        *self.params.get_mut(self.ids.scale_tokens) = bank.scale_tokens;
        Ok(())
    }

    fn check_class(&self, class: ClassId) -> Result<(), ModelError> {
        if class.0 >= self.config.n_classes {
            return Err(ModelError::ClassOutOfRange {
                class: class.0,
                n: self.config.n_classes,
            });
        }
        Ok(())
    }

    fn prompt_rows(&self, g: &mut Graph, class: ClassId, mag: Magnification) -> (Var, Var) {
        let ct = g.param(self.ids.class_tokens);
        let st = g.param(self.ids.scale_tokens);
        (g.rows(ct, class.0, 1), g.rows(st, mag.token_index(), 1))
    }

    /// Patch matrix `h·w × 3p²`, rows in raster order, columns `(c, py, px)`.
    fn patchify(&self, image: &Image) -> Result<Mat, ModelError> {
        let e = &self.config.encoder;
        let want = (3, e.image_side, e.image_side);
        if image.dim() != want {
            return Err(ModelError::Shape(format!(
                "image must be {want:?}, found {:?}",
                image.dim()
            )));
        }
        let (p, grid) = (e.patch_size, e.grid());
        Ok(Mat::from_shape_fn((grid * grid, 3 * p * p), |(t, k)| {
            let (gy, gx) = (t / grid, t % grid);
            let (c, py, px) = (k / (p * p), (k / p) % p, k % p);
            image[[c, gy * p + py, gx * p + px]]
        }))
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, ln: &LnIds) -> Var {
        let gamma = g.param(ln.gamma);
        let beta = g.param(ln.beta);
        g.layer_norm(x, gamma, beta)
    }

    /// Multi-head attention; each head's output is projected by its slice of
    /// `W_o` and the projections are summed.
    fn attention(&self, g: &mut Graph, ids: &AttnIds, queries: Var, context: Var) -> Var {
        let heads = self.config.encoder.heads;
        let dh = self.config.encoder.d / heads;
        let q = g.linear(queries, ids.wq, ids.bq);
        let k = g.linear(context, ids.wk, ids.bk);
        let v = g.linear(context, ids.wv, ids.bv);
        let wo = g.param(ids.wo);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out: Option<Var> = None;
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.cols(q, h * dh, dh), g.cols(k, h * dh, dh), g.cols(v, h * dh, dh))
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            let mixed = g.matmul(weights, vh);
            let wo_h = if heads == 1 { wo } else { g.rows(wo, h * dh, dh) };
            let proj = g.matmul(mixed, wo_h);
            out = Some(match out {
                Some(acc) => g.add(acc, proj),
                None => proj,
            });
        }
        let bo = g.param(ids.bo);
        g.add_row(out.expect("heads ≥ 1"), bo)
    }

    fn mlp(&self, g: &mut Graph, ids: &MlpIds, x: Var) -> Var {
        let h = g.linear(x, ids.w1, ids.b1);
        let h = g.gelu(h);
        g.linear(h, ids.w2, ids.b2)
    }

    /// Token-guided encoder. Returns patch features `F` (`h·w × d`) and the
    /// final prompt states.
    pub fn encode(
        &self,
        g: &mut Graph,
        image: &Image,
        class: ClassId,
        mag: Magnification,
    ) -> Result<Encoded, ModelError> {
        self.check_class(class)?;
        let patches = g.constant(self.patchify(image)?);
        let tokens = g.linear(patches, self.ids.patch_w, self.ids.patch_b);
        let pos = g.param(self.ids.pos);
        let mut tokens = g.add(tokens, pos);
        let (tc, ts) = self.prompt_rows(g, class, mag);
        let n_tokens = self.config.encoder.grid().pow(2);
        let mut prompts = g.concat_rows(&[tc, ts]);
        for block in &self.ids.blocks {
            // fresh prompt injection at every block input
            let x = g.concat_rows(&[tc, ts, tokens]);
            let h = self.layer_norm(g, x, &block.ln1);
            let a = self.attention(g, &block.attn, h, h);
            let x = g.add(x, a);
            let h = self.layer_norm(g, x, &block.ln2);
            let m = self.mlp(g, &block.mlp, h);
            let x = g.add(x, m);
            prompts = g.rows(x, 0, 2);
            tokens = g.rows(x, 2, n_tokens);
        }
        let features = self.layer_norm(g, tokens, &self.ids.ln_final);
        Ok(Encoded { features, prompts })
    }

    /// `[GAP(F), T_c[i], T_s[m]]` as a `3 × d` prompt set.
    fn prompt_set(&self, g: &mut Graph, features: Var, class: ClassId, mag: Magnification) -> Var {
        let gap = g.mean_rows(features);
        let (tc, ts) = self.prompt_rows(g, class, mag);
        g.concat_rows(&[gap, tc, ts])
    }

    /// Mask decoder. Returns `e_upscale` as `H·W × C`.
    pub fn decode(
        &self,
        g: &mut Graph,
        features: Var,
        class: ClassId,
        mag: Magnification,
    ) -> Result<Var, ModelError> {
        self.check_class(class)?;
        let e = &self.config.encoder;
        let expect = (e.grid() * e.grid(), e.d);
        if g.shape(features) != expect {
            return Err(ModelError::Shape(format!(
                "features must be {expect:?}, found {:?}",
                g.shape(features)
            )));
        }
        let dec = &self.ids.decoder;
        let mut p = self.prompt_set(g, features, class, mag);
        let dense = g.param(dec.dense);
        let mut img = g.add(features, dense);

        let a = self.attention(g, &dec.self_attn, p, p);
        let x = g.add(p, a);
        p = self.layer_norm(g, x, &dec.ln_self);
        let a = self.attention(g, &dec.token_to_image, p, img);
        let x = g.add(p, a);
        p = self.layer_norm(g, x, &dec.ln_t2i);
        let m = self.mlp(g, &dec.mlp, p);
        let x = g.add(p, m);
        p = self.layer_norm(g, x, &dec.ln_mlp);
        let a = self.attention(g, &dec.image_to_token, img, p);
        let x = g.add(img, a);
        img = self.layer_norm(g, x, &dec.ln_i2t);

        let chans = self.config.upsample_channels();
        let mut side = e.grid();
        let stages = dec.upsample.len();
        for (s, &(w, b)) in dec.upsample.iter().enumerate() {
            let y = g.linear(img, w, b);
            img = g.gather(y, self.shuffle[s].clone(), (4 * side * side, chans[s + 1]));
            side *= 2;
            if s + 1 < stages {
                img = g.gelu(img);
            }
        }
        Ok(img)
    }

    /// Controller: `ω = [GAP(F), T_c[i], T_s[m]] · W_φ + b_φ`, a `1 × ω_len` row.
    pub fn head_params(
        &self,
        g: &mut Graph,
        features: Var,
        class: ClassId,
        mag: Magnification,
    ) -> Result<Var, ModelError> {
        self.check_class(class)?;
        let p = self.prompt_set(g, features, class, mag);
        let row = g.reshape(p, (1, 3 * self.config.encoder.d));
        Ok(g.linear(row, self.ids.ctrl_w, self.ids.ctrl_b))
    }

    /// Full query on a caller-owned graph, for training.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        image: &Image,
        class: ClassId,
        mag: Magnification,
    ) -> Result<SegVars, ModelError> {
        let enc = self.encode(g, image, class, mag)?;
        let up = self.decode(g, enc.features, class, mag)?;
        let omega = self.head_params(g, enc.features, class, mag)?;
        let side = self.config.encoder.image_side;
        apply_dynamic_head_graph(g, &self.config.head, up, omega, (side, side))
    }

    /// Inference.
    pub fn forward(
        &self,
        image: &Image,
        class: ClassId,
        mag: Magnification,
    ) -> Result<SegOutput, ModelError> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward_graph(&mut g, image, class, mag)?;
        let side = self.config.encoder.image_side;
        Ok(seg_output(&g, vars, (side, side)))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, v)| TensorInfo {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(json.len() + 8 * self.params.numel() + 24);
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, _, v) in self.params.iter() {
            for x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut at = 20 + hlen;
        let mut store = ParamStore::new();
        for t in header.tensors {
            let n = t.shape[0] * t.shape[1];
            let raw = bytes
                .get(at..at + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(t.name, Mat::from_shape_vec((t.shape[0], t.shape[1]), data).unwrap());
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::from_params(header.config, store)
    }
}

/// Unpacks `ω` into 1×1 convolutions and applies them to `features`
/// (`pixels × C`). ReLU between layers, softmax over the two output channels.
pub fn apply_dynamic_head_graph(
    g: &mut Graph,
    spec: &DynamicHeadSpec,
    features: Var,
    omega: Var,
    size: (usize, usize),
) -> Result<SegVars, ModelError> {
    if g.shape(omega) != (1, spec.omega_len()) {
        return Err(ModelError::Shape(format!(
            "ω must have length {}, found {:?}",
            spec.omega_len(),
            g.shape(omega)
        )));
    }
    if g.shape(features) != (size.0 * size.1, spec.input_channels()) {
        return Err(ModelError::Shape(format!(
            "head input must be {:?}, found {:?}",
            (size.0 * size.1, spec.input_channels()),
            g.shape(features)
        )));
    }
    let layout = spec.layout();
    let mut x = features;
    for (l, &(w_at, cin, cout, b_at)) in layout.iter().enumerate() {
        let w = g.gather(omega, (w_at..w_at + cin * cout).collect(), (cin, cout));
        let b = g.gather(omega, (b_at..b_at + cout).collect(), (1, cout));
        let y = g.matmul(x, w);
        x = g.add_row(y, b);
        if l + 1 < layout.len() {
            x = g.relu(x);
        }
    }
    let logits = x;
    let probs = g.softmax_rows(logits);
    let fg = g.cols(probs, 1, 1);
    let probability = g.reshape(fg, size);
    Ok(SegVars {
        logits,
        probability,
    })
}

fn seg_output(g: &Graph, vars: SegVars, (h, w): (usize, usize)) -> SegOutput {
    let l = g.value(vars.logits);
    SegOutput {
        logits: Array3::from_shape_fn((2, h, w), |(c, y, x)| l[[y * w + x, c]]),
        probability: g.value(vars.probability).clone(),
    }
}

/// Stand-alone dynamic head on a `C × H × W` embedding.
pub fn apply_dynamic_head(
    spec: &DynamicHeadSpec,
    embedding: &Array3<f64>,
    omega: &[f64],
) -> Result<SegOutput, ModelError> {
    let (c, h, w) = embedding.dim();
    if omega.len() != spec.omega_len() {
        return Err(ModelError::Shape(format!(
            "ω must have length {}, found {}",
            spec.omega_len(),
            omega.len()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let pixels = Mat::from_shape_fn((h * w, c), |(p, ch)| embedding[[ch, p / w, p % w]]);
    let x = g.constant(pixels);
    let om = g.constant(Mat::from_shape_vec((1, omega.len()), omega.to_vec()).unwrap());
    let vars = apply_dynamic_head_graph(&mut g, spec, x, om, (h, w))?;
    Ok(seg_output(&g, vars, (h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(
            5,
            EncoderConfig {
                image_side: 16,
                patch_size: 4,
                d: 16,
                blocks: 1,
                heads: 2,
            },
        )
    }

    fn image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_simple_fn((3, side, side), || rng.random::<f64>())
    }

    #[test]
    fn default_head_has_162_parameters() {
        let spec = DynamicHeadSpec::default();
        assert_eq!(spec.omega_len(), 72 + 72 + 18);
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::new(15, EncoderConfig::default());
        let m = Model::new(cfg, 0).unwrap();
        let bank = m.token_bank();
        assert_eq!(bank.class_tokens.dim(), (15, 64));
        assert_eq!(bank.scale_tokens.dim(), (4, 64));
        assert_eq!(m.config().encoder.sequence_len(), 66);
        let img = image(64, 1);
        let mut g = Graph::new(m.params());
        let enc = m.encode(&mut g, &img, ClassId(3), Magnification::X20).unwrap();
        assert_eq!(g.shape(enc.features), (64, 64)); // d × 8 × 8 as 64 tokens
        let up = m.decode(&mut g, enc.features, ClassId(3), Magnification::X20).unwrap();
        assert_eq!(g.shape(up), (64 * 64, 8));
        let omega = m.head_params(&mut g, enc.features, ClassId(3), Magnification::X20).unwrap();
        assert_eq!(g.shape(omega), (1, 162));
        assert_eq!(m.params().get(m.ids.ctrl_w).nrows(), 192);
        let out = m.forward(&img, ClassId(3), Magnification::X20).unwrap();
        assert_eq!(out.logits.dim(), (2, 64, 64));
        assert!(out.probability.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn upsample_schedule_ends_at_head_width() {
        assert_eq!(ModelConfig::new(2, EncoderConfig::default()).upsample_channels(), vec![64, 32, 16, 8]);
        assert_eq!(small().upsample_channels(), vec![16, 8, 8]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::new(small(), 0).unwrap();
        assert!(matches!(
            m.forward(&image(16, 0), ClassId(5), Magnification::X5),
            Err(ModelError::ClassOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward(&image(20, 0), ClassId(0), Magnification::X5),
            Err(ModelError::Shape(_))
        ));
        let mut cfg = small();
        cfg.encoder.image_side = 18;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = small();
        cfg.encoder.heads = 3;
        assert!(Model::new(cfg, 0).is_err());
        let spec = DynamicHeadSpec::default();
        let e = Array3::zeros((8, 4, 4));
        assert!(apply_dynamic_head(&spec, &e, &[0.0; 10]).is_err());
    }

    #[test]
    fn prompts_change_outputs() {
        let m = Model::new(small(), 3).unwrap();
        let img = image(16, 2);
        let feats = |c: usize| {
            let mut g = Graph::new(m.params());
            let e = m.encode(&mut g, &img, ClassId(c), Magnification::X10).unwrap();
            g.value(e.features).clone()
        };
        assert_ne!(feats(0), feats(1));
        let up = |mag| {
            let mut g = Graph::new(m.params());
            let e = m.encode(&mut g, &img, ClassId(0), mag).unwrap();
            let u = m.decode(&mut g, e.features, ClassId(0), mag).unwrap();
            g.value(u).clone()
        };
        assert_ne!(up(Magnification::X5), up(Magnification::X40));
    }

    #[test]
    fn zero_weights_decode_to_zero() {
        let mut m = Model::new(small(), 0).unwrap();
        for i in 0..m.params().len() {
            m.params_mut().get_mut(ParamId(i)).fill(0.0);
        }
        let mut g = Graph::new(m.params());
        let f = g.constant(Mat::zeros((16, 16)));
        let up = m.decode(&mut g, f, ClassId(0), Magnification::X5).unwrap();
        assert!(g.value(up).iter().all(|&v| v == 0.0));
        let omega = m.head_params(&mut g, f, ClassId(0), Magnification::X5).unwrap();
        assert!(g.value(omega).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_omega_gives_half() {
        let spec = DynamicHeadSpec::default();
        let e = Array3::from_shape_fn((8, 4, 4), |(c, y, x)| (c + y + x) as f64);
        let out = apply_dynamic_head(&spec, &e, &vec![0.0; 162]).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
        assert!(out.probability.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn identity_omega_passes_channel_zero() {
        // route channel 0 through both hidden layers and into the foreground logit
        let spec = DynamicHeadSpec::default();
        let mut omega = vec![0.0; 162];
        let layout = spec.layout();
        for &(w_at, _, cout, _) in &layout[..2] {
            omega[w_at] = 1.0; // in 0 → out 0
            let _ = cout;
        }
        let (w_at, _, cout, _) = layout[2];
        omega[w_at + 1] = 1.0; // in 0 → out 1 (foreground)
        assert_eq!(cout, 2);
        let e = Array3::from_shape_fn((8, 3, 3), |(c, y, x)| if c == 0 { (y * 3 + x) as f64 * 0.5 } else { -1.0 });
        let out = apply_dynamic_head(&spec, &e, &omega).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let v = e[[0, y, x]];
                let expect = 1.0 / (1.0 + (-v).exp());
                assert!((out.probability[[y, x]] - expect).abs() < 1e-12);
                assert_eq!(out.logits[[1, y, x]], v);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Model::new(small(), 9).unwrap();
        let b = Model::new(small(), 9).unwrap();
        let img = image(16, 4);
        let oa = a.forward(&img, ClassId(2), Magnification::X40).unwrap();
        let ob = b.forward(&img, ClassId(2), Magnification::X40).unwrap();
        assert_eq!(oa, ob);
    }

    #[test]
    fn class_permutation_is_consistent() {
        let m = Model::new(small(), 1).unwrap();
        let perm = [3usize, 0, 4, 1, 2]; // new row perm[k] holds old row k
        let bank = m.token_bank();
        let mut permuted = bank.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted.class_tokens.row_mut(new).assign(&bank.class_tokens.row(old));
        }
        let mut p = m.clone();
        p.set_token_bank(permuted).unwrap();
        let img = image(16, 5);
        for old in 0..5 {
            let a = m.forward(&img, ClassId(old), Magnification::X10).unwrap();
            let b = p.forward(&img, ClassId(perm[old]), Magnification::X10).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(small(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(Model::from_bytes(&bytes).is_err());
        assert!(Model::from_bytes(b"garbage garbage garbage").is_err());
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        // 1×1 grid, 4 sub-pixels of 1 channel → 2×2 raster
        let idx = pixel_shuffle_index(1, 1);
        assert_eq!(&*idx, &[0, 1, 2, 3]);
        // 2×2 grid, 1 channel: out pixel (1, 2) comes from cell (0, 1) sub (1, 0)
        let idx = pixel_shuffle_index(2, 1);
        assert_eq!(idx[4 + 2], 4 + 2);
    }
}
