//! The encoder-decoder network with its sequence head and the pooled
//! classifier head.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`, with a
//! closing layer norm after each stack. Attention over padded batches is
//! masked on keys, and the classifier pools encoder and decoder features with
//! a masked mean before its two normalized linear layers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Scalar, Tensor};
use crate::vocab::PAD_ID;
use crate::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_mult: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub enc_vocab_size: usize,
    pub dec_vocab_size: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 6,
            n_dec_layers: 6,
            ffn_mult: 4,
            max_enc_len: 80,
            max_dec_len: 40,
            enc_vocab_size: 436,
            dec_vocab_size: 54,
            n_classes: 49,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("ffn_mult", self.ffn_mult),
            ("max_enc_len", self.max_enc_len),
            ("max_dec_len", self.max_dec_len),
            ("enc_vocab_size", self.enc_vocab_size),
            ("dec_vocab_size", self.dec_vocab_size),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Param(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim();
        let attn = 4 * (d * d + d);
        let mlp = d * f + f + f * d + d;
        let norm = 2 * d;
        let embeddings = (self.enc_vocab_size + self.max_enc_len + self.dec_vocab_size + self.max_dec_len) * d;
        let enc_block = attn + mlp + 2 * norm;
        let dec_block = 2 * attn + mlp + 3 * norm;
        let final_norms = 2 * norm;
        let seq_head = d * self.dec_vocab_size + self.dec_vocab_size;
        let classifier = 2 * (2 * d) + (2 * d) * d + d + 2 * d + d * self.n_classes + self.n_classes;
        embeddings
            + self.n_enc_layers * enc_block
            + self.n_dec_layers * dec_block
            + final_norms
            + seq_head
            + classifier
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderBlock {
    pub ln1: Norm,
    pub self_attn: Attention,
    pub ln2: Norm,
    pub cross_attn: Attention,
    pub ln3: Norm,
    pub mlp: Mlp,
}

/// Indices of every parameter in the flat [`ModelParams`] list, arranged by
/// the role each one plays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub enc_tok: usize,
    pub enc_pos: usize,
    pub dec_tok: usize,
    pub dec_pos: usize,
    pub enc_blocks: Vec<EncoderBlock>,
    pub dec_blocks: Vec<DecoderBlock>,
    pub enc_norm: Norm,
    pub dec_norm: Norm,
    pub seq_head: Linear,
    pub cls_ln1: Norm,
    pub cls_fc1: Linear,
    pub cls_ln2: Norm,
    pub cls_fc2: Linear,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(Spec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Uniform { fan_in }),
            b: self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, f: usize) -> Mlp {
        Mlp {
            up: self.linear(&format!("{prefix}.up"), d, f),
            down: self.linear(&format!("{prefix}.down"), f, d),
        }
    }
}

fn layout_for(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let mut b = Builder::default();
    let enc_tok = b.add("enc.tok_emb".into(), &[cfg.enc_vocab_size, d], Init::Uniform { fan_in: d });
    let enc_pos = b.add("enc.pos_emb".into(), &[cfg.max_enc_len, d], Init::Normal { std: 0.02 });
    let dec_tok = b.add("dec.tok_emb".into(), &[cfg.dec_vocab_size, d], Init::Uniform { fan_in: d });
    let dec_pos = b.add("dec.pos_emb".into(), &[cfg.max_dec_len, d], Init::Normal { std: 0.02 });
    let enc_blocks = (0..cfg.n_enc_layers)
        .map(|i| {
            let p = format!("enc.blocks.{i}");
            EncoderBlock {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attention(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                mlp: b.mlp(&format!("{p}.mlp"), d, f),
            }
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let dec_blocks = (0..cfg.n_dec_layers)
        .map(|i| {
            let p = format!("dec.blocks.{i}");
            DecoderBlock {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attention(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                mlp: b.mlp(&format!("{p}.mlp"), d, f),
            }
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);
    let seq_head = b.linear("seq_head", d, cfg.dec_vocab_size);
    let cls_ln1 = b.norm("cls.ln1", 2 * d);
    let cls_fc1 = b.linear("cls.fc1", 2 * d, d);
    let cls_ln2 = b.norm("cls.ln2", d);
    let cls_fc2 = b.linear("cls.fc2", d, cfg.n_classes);
    let layout = Layout {
        enc_tok,
        enc_pos,
        dec_tok,
        dec_pos,
        enc_blocks,
        dec_blocks,
        enc_norm,
        dec_norm,
        seq_head,
        cls_ln1,
        cls_fc1,
        cls_ln2,
        cls_fc2,
    };
    (layout, b.specs)
}

/// Every learnable array, in a fixed order with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: linear weights uniform in +-1/sqrt(fan_in),
    /// biases and norm shifts zero, norm scales one, position tables
    /// normal(0, 0.02).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_for(config);
        let mut rng = Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::Uniform { fan_in } => {
                    let a = 1.0 / Float::sqrt(fan_in as f64);
                    Tensor::from_fn(&spec.shape, |_| T::of(rng.random_range(-a..a)))
                }
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Param(format!("{e}")))?;
                    Tensor::from_fn(&spec.shape, |_| T::of(dist.sample(&mut rng)))
                }
            };
            names.push(spec.name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names,
            tensors,
        })
    }

    /// Reassembles parameters from named arrays, e.g. a loaded checkpoint.
    /// Names and shapes must match the layout `config` implies exactly.
    pub fn from_named(config: &ModelConfig, arrays: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_for(config);
        if arrays.len() != specs.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                arrays.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(arrays) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name:?} {:?} does not match expected {:?} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind<'p>(&'p self, tape: &mut Tape<T>, trainable: bool) -> Bound<'p, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }

    /// Uses existing tape nodes as the parameters, one per tensor in order.
    pub fn attach<'p>(&'p self, tape: &Tape<T>, vars: Vec<Var>) -> Result<Bound<'p, T>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (t, &v) in self.tensors.iter().zip(&vars) {
            if tape.shape(v) != t.shape() {
                return Err(shape_err("attach", t.shape(), tape.shape(v)));
            }
        }
        Ok(Bound { params: self, vars })
    }
}

/// Parameters recorded on a particular tape.
pub struct Bound<'p, T> {
    params: &'p ModelParams<T>,
    vars: Vec<Var>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn layout(&self) -> &'p Layout {
        &self.params.layout
    }

    fn v(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Training mode carries the dropout generator; evaluation is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => tape.dropout(x, rate, true, &mut **rng),
    }
}

/// Token ids `[batch, len]` with the allow-mask used for attention and
/// pooling. The mask normally marks non-`<pad>` ids but may be supplied
/// explicitly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub mask: Mask,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::Shape {
                op: "token batch",
                lhs: vec![batch, len],
                rhs: vec![ids.len()],
            });
        }
        let mask = padding_mask(&ids, batch, len)?;
        Ok(TokenBatch {
            ids,
            batch,
            len,
            mask,
        })
    }

    pub fn with_mask(ids: Vec<usize>, batch: usize, len: usize, mask: Mask) -> Result<Self> {
        let mut b = Self::new(ids, batch, len)?;
        if mask.shape() != [batch, len] {
            return Err(Error::Shape {
                op: "token batch mask",
                lhs: vec![batch, len],
                rhs: mask.shape().to_vec(),
            });
        }
        b.mask = mask;
        Ok(b)
    }

    /// Stacks sequences, right-padding with `<pad>` to the longest.
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Result<Self> {
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r.as_ref());
            ids.extend(core::iter::repeat_n(PAD_ID, len - r.as_ref().len()));
        }
        Self::new(ids, rows.len(), len)
    }

    /// Drops trailing columns that are masked out in every row. Masked
    /// positions never influence allowed ones, so outputs at the kept
    /// positions are unchanged.
    pub fn trimmed(&self) -> TokenBatch {
        let allow = self.mask.allow();
        let keep = (0..self.len)
            .rev()
            .find(|&c| (0..self.batch).any(|r| allow[r * self.len + c]))
            .map_or(1, |c| c + 1);
        if keep == self.len {
            return self.clone();
        }
        let mut ids = Vec::with_capacity(self.batch * keep);
        let mut mask = Vec::with_capacity(self.batch * keep);
        for r in 0..self.batch {
            ids.extend_from_slice(&self.ids[r * self.len..r * self.len + keep]);
            mask.extend_from_slice(&allow[r * self.len..r * self.len + keep]);
        }
        TokenBatch {
            ids,
            batch: self.batch,
            len: keep,
            mask: Mask::new(vec![self.batch, keep], mask).expect("trimmed mask shape"),
        }
    }
}

/// Allows every position whose id is not `<pad>`.
pub fn padding_mask(ids: &[usize], batch: usize, len: usize) -> Result<Mask> {
    Mask::new(vec![batch, len], ids.iter().map(|&id| id != PAD_ID).collect())
}

/// Position `(i, j)` is allowed iff `j <= i`.
pub fn causal_mask(len: usize) -> Mask {
    let allow = (0..len * len).map(|idx| idx % len <= idx / len).collect();
    Mask::new(vec![len, len], allow).expect("square mask")
}

fn key_mask(mask: &Mask) -> Result<Mask> {
    let s = mask.shape();
    mask.clone().reshape(&[s[0], 1, 1, s[1]])
}

fn linear<T: Scalar>(tape: &mut Tape<T>, m: &Bound<'_, T>, p: Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, m.v(p.w))?;
    tape.add(y, m.v(p.b))
}

fn norm<T: Scalar>(tape: &mut Tape<T>, m: &Bound<'_, T>, p: Norm, x: Var) -> Result<Var> {
    tape.layer_norm(x, m.v(p.gamma), m.v(p.beta), LN_EPS)
}

/// `softmax(Q K^T / sqrt(dk)) V` over any leading axes. Returns the output and
/// the attention weights.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    attend(tape, q, k, v, mask, 0.0, &mut Mode::Eval)
}

fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    dropout_rate: f64,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let dk = *tape.shape(q).last().unwrap_or(&1);
    if tape.shape(k).last() != Some(&dk) || tape.shape(v).last() != Some(&dk) {
        return Err(Error::Shape {
            op: "attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::of(dk as f64).sqrt());
    let weights = tape.softmax(scores, mask)?;
    let dropped = dropout(tape, weights, dropout_rate, mode)?;
    let out = tape.matmul(dropped, v)?;
    Ok((out, weights))
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, l, heads, d / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, l, dk) = (s[0], s[1], s[2], s[3]);
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b, l, h * dk])
}

fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    m: &Bound<'_, T>,
    p: Attention,
    query: Var,
    memory: Var,
    mask: &Mask,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let cfg = m.config();
    let heads = cfg.n_heads;
    let q = linear(tape, m, p.q, query)?;
    let k = linear(tape, m, p.k, memory)?;
    let v = linear(tape, m, p.v, memory)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let (ctx, _) = attend(tape, q, k, v, Some(mask), cfg.dropout, mode)?;
    let ctx = merge_heads(tape, ctx)?;
    linear(tape, m, p.o, ctx)
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, m: &Bound<'_, T>, p: Mlp, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
    let h = linear(tape, m, p.up, x)?;
    let h = tape.gelu(h);
    let h = linear(tape, m, p.down, h)?;
    dropout(tape, h, m.config().dropout, mode)
}

fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    m: &Bound<'_, T>,
    tok_table: usize,
    pos_table: usize,
    batch: &TokenBatch,
    max_len: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if batch.len > max_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds the maximum {max_len}",
            batch.len
        )));
    }
    let tok = tape.embedding(m.v(tok_table), &batch.ids, &[batch.batch, batch.len])?;
    let positions: Vec<usize> = (0..batch.len).collect();
    let pos = tape.embedding(m.v(pos_table), &positions, &[batch.len])?;
    let x = tape.add(tok, pos)?;
    dropout(tape, x, m.config().dropout, mode)
}

/// Encoder stack over `[B, L]` ids; returns features `[B, L, d_model]`.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    m: &Bound<'_, T>,
    enc: &TokenBatch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let lay = m.layout();
    let mut x = embed(tape, m, lay.enc_tok, lay.enc_pos, enc, m.config().max_enc_len, mode)?;
    let mask = key_mask(&enc.mask)?;
    for blk in &lay.enc_blocks {
        let h = norm(tape, m, blk.ln1, x)?;
        let h = multi_head(tape, m, blk.attn, h, h, &mask, mode)?;
        x = tape.add(x, h)?;
        let h = norm(tape, m, blk.ln2, x)?;
        let h = mlp(tape, m, blk.mlp, h, mode)?;
        x = tape.add(x, h)?;
    }
    norm(tape, m, lay.enc_norm, x)
}

/// Decoder stack; returns `(sequence logits [B, L, dec_vocab], features
/// [B, L, d_model])`.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    m: &Bound<'_, T>,
    dec: &TokenBatch,
    enc_out: Var,
    enc_mask: &Mask,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let lay = m.layout();
    let es = tape.shape(enc_out).to_vec();
    if es.len() != 3 || es[0] != dec.batch || enc_mask.shape() != &es[..2] {
        return Err(Error::Shape {
            op: "decoder_forward",
            lhs: es,
            rhs: vec![dec.batch, dec.len],
        });
    }
    let mut x = embed(tape, m, lay.dec_tok, lay.dec_pos, dec, m.config().max_dec_len, mode)?;
    let self_mask = causal_mask(dec.len).intersect(&key_mask(&dec.mask)?)?;
    let cross_mask = key_mask(enc_mask)?;
    for blk in &lay.dec_blocks {
        let h = norm(tape, m, blk.ln1, x)?;
        let h = multi_head(tape, m, blk.self_attn, h, h, &self_mask, mode)?;
        x = tape.add(x, h)?;
        let h = norm(tape, m, blk.ln2, x)?;
        let h = multi_head(tape, m, blk.cross_attn, h, enc_out, &cross_mask, mode)?;
        x = tape.add(x, h)?;
        let h = norm(tape, m, blk.ln3, x)?;
        let h = mlp(tape, m, blk.mlp, h, mode)?;
        x = tape.add(x, h)?;
    }
    let features = norm(tape, m, lay.dec_norm, x)?;
    let logits = linear(tape, m, lay.seq_head, features)?;
    Ok((logits, features))
}

/// Masked mean of both feature streams, concatenated, then
/// LN -> linear -> GELU -> LN -> linear to `[B, n_classes]`.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    m: &Bound<'_, T>,
    enc_out: Var,
    dec_features: Var,
    enc_mask: &Mask,
    dec_mask: &Mask,
) -> Result<Var> {
    let lay = m.layout();
    let pe = tape.masked_mean(enc_out, enc_mask)?;
    let pd = tape.masked_mean(dec_features, dec_mask)?;
    let x = tape.concat(pe, pd)?;
    let x = norm(tape, m, lay.cls_ln1, x)?;
    let x = linear(tape, m, lay.cls_fc1, x)?;
    let x = tape.gelu(x);
    let x = norm(tape, m, lay.cls_ln2, x)?;
    linear(tape, m, lay.cls_fc2, x)
}

/// All heads of one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub enc_out: Var,
    pub seq_logits: Var,
    pub dec_features: Var,
    pub cls_logits: Var,
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    m: &Bound<'_, T>,
    enc: &TokenBatch,
    dec: &TokenBatch,
    mode: &mut Mode<'_>,
) -> Result<Outputs> {
    let enc_out = encoder_forward(tape, m, enc, mode)?;
    let (seq_logits, dec_features) = decoder_forward(tape, m, dec, enc_out, &enc.mask, mode)?;
    let cls_logits = classify(tape, m, enc_out, dec_features, &enc.mask, &dec.mask)?;
    Ok(Outputs {
        enc_out,
        seq_logits,
        dec_features,
        cls_logits,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
