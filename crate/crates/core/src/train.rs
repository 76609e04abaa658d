//! Teacher-forced training: batching, the summed dual cross-entropy, and one
//! epoch of Adam updates.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::TokenizedExample;
use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelParams, TokenBatch};
use crate::optim::{adam_step, exponential_lr, AdamState};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::vocab::PAD_ID;
use crate::Rng;

/// Optimization schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub seed: u64,
    pub eval_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr0: 1e-3,
            gamma: 0.95,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Param(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Param(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Learning rate used throughout zero-based `epoch`.
pub fn lr_at(epoch: u32, cfg: &TrainConfig) -> f64 {
    exponential_lr(cfg.lr0, cfg.gamma, epoch)
}

/// Adam moments for every parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Optimizer {
            states: params.tensors().iter().map(|t| AdamState::new(t.numel())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}

/// A padded, trimmed mini-batch ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub enc: TokenBatch,
    pub dec: TokenBatch,
    /// `[B, dec.len]`, `<pad>` where ignored.
    pub targets: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn make_batch(examples: &[&TokenizedExample]) -> Result<Batch> {
    let b = examples.len();
    if b == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let enc_len = examples[0].encoder.ids.len();
    let dec_len = examples[0].decoder_input.ids.len();
    let mut enc_ids = Vec::with_capacity(b * enc_len);
    let mut dec_ids = Vec::with_capacity(b * dec_len);
    let mut targets = Vec::with_capacity(b * dec_len);
    for ex in examples {
        if ex.encoder.ids.len() != enc_len
            || ex.decoder_input.ids.len() != dec_len
            || ex.decoder_target.len() != dec_len
        {
            return Err(Error::Shape {
                op: "make_batch",
                lhs: alloc::vec![enc_len, dec_len],
                rhs: alloc::vec![ex.encoder.ids.len(), ex.decoder_input.ids.len()],
            });
        }
        enc_ids.extend_from_slice(&ex.encoder.ids);
        dec_ids.extend_from_slice(&ex.decoder_input.ids);
        targets.extend_from_slice(&ex.decoder_target);
    }
    let enc = TokenBatch::new(enc_ids, b, enc_len)?.trimmed();
    let dec = TokenBatch::new(dec_ids, b, dec_len)?.trimmed();
    let targets = if dec.len == dec_len {
        targets
    } else {
        targets
            .chunks(dec_len)
            .flat_map(|row| row[..dec.len].iter().copied())
            .collect()
    };
    Ok(Batch {
        enc,
        dec,
        targets,
        labels: examples.iter().map(|e| e.class_label).collect(),
    })
}

/// Scalar loss nodes of one pass.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub seq: Var,
    pub cls: Var,
}

/// Summed, unweighted cross-entropy of the sequence head (pad targets
/// ignored) and the classifier.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seq_logits: Var,
    seq_targets: &[usize],
    cls_logits: Var,
    cls_targets: &[usize],
) -> Result<Loss> {
    let s = tape.shape(seq_logits).to_vec();
    if s.len() != 3 || s[0] * s[1] != seq_targets.len() {
        return Err(Error::Shape {
            op: "compute_loss",
            lhs: s,
            rhs: alloc::vec![seq_targets.len()],
        });
    }
    if let Some(row) = seq_targets.chunks(s[1]).position(|r| r.iter().all(|&t| t == PAD_ID)) {
        return Err(Error::Degenerate(format!("target row {row} is all padding")));
    }
    let flat = tape.reshape(seq_logits, &[s[0] * s[1], s[2]])?;
    let seq = tape.cross_entropy(flat, seq_targets, Some(PAD_ID))?;
    let cls = tape.cross_entropy(cls_logits, cls_targets, None)?;
    let total = tape.add(seq, cls)?;
    Ok(Loss { total, seq, cls })
}

/// Mean losses over the batches of an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub total: f64,
    pub seq: f64,
    pub cls: f64,
    pub batches: usize,
    pub examples: usize,
}

struct Accum {
    total: f64,
    seq: f64,
    cls: f64,
    batches: usize,
    examples: usize,
}

impl Accum {
    fn new() -> Self {
        Accum {
            total: 0.0,
            seq: 0.0,
            cls: 0.0,
            batches: 0,
            examples: 0,
        }
    }

    fn finish(self) -> EpochSummary {
        let n = self.batches.max(1) as f64;
        EpochSummary {
            total: self.total / n,
            seq: self.seq / n,
            cls: self.cls / n,
            batches: self.batches,
            examples: self.examples,
        }
    }
}

/// One pass over `data` in a seeded shuffled order: forward with teacher
/// forcing, summed loss, backward, and an Adam step on every parameter at
/// learning rate `lr`.
pub fn train_epoch<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Optimizer<T>,
    data: &[TokenizedExample],
    rng: &mut Rng,
    batch_size: usize,
    lr: f64,
) -> Result<EpochSummary> {
    if data.is_empty() {
        return Err(Error::Degenerate("no training examples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be >= 1".into()));
    }
    if opt.states.len() != params.len() {
        return Err(Error::Contract("optimizer does not match the parameter list".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut acc = Accum::new();
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let examples: Vec<&TokenizedExample> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = make_batch(&examples)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let out = forward(&mut tape, &bound, &batch.enc, &batch.dec, &mut Mode::Train(rng))?;
        let loss = compute_loss(&mut tape, out.seq_logits, &batch.targets, out.cls_logits, &batch.labels)?;
        let (total, seq, cls) = (
            tape.value(loss.total).item().as_f64(),
            tape.value(loss.seq).item().as_f64(),
            tape.value(loss.cls).item().as_f64(),
        );
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { batch: bi });
        }
        let vars = bound.vars().to_vec();
        let grads = tape.backward(loss.total)?;
        for ((param, state), var) in params.tensors_mut().iter_mut().zip(&mut opt.states).zip(vars) {
            let g = grads.get(var).ok_or_else(|| Error::Contract("missing parameter gradient".into()))?;
            adam_step(param, g, state, lr)?;
        }
        acc.total += total;
        acc.seq += seq;
        acc.cls += cls;
        acc.batches += 1;
        acc.examples += chunk.len();
    }
    Ok(acc.finish())
}

/// Teacher-forced losses in evaluation mode, no parameter updates.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    data: &[TokenizedExample],
    batch_size: usize,
) -> Result<EpochSummary> {
    if data.is_empty() {
        return Err(Error::Degenerate("no evaluation examples".into()));
    }
    let mut acc = Accum::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let examples: Vec<&TokenizedExample> = chunk.iter().collect();
        let batch = make_batch(&examples)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let out = forward(&mut tape, &bound, &batch.enc, &batch.dec, &mut Mode::Eval)?;
        let loss = compute_loss(&mut tape, out.seq_logits, &batch.targets, out.cls_logits, &batch.labels)?;
        acc.total += tape.value(loss.total).item().as_f64();
        acc.seq += tape.value(loss.seq).item().as_f64();
        acc.cls += tape.value(loss.cls).item().as_f64();
        acc.batches += 1;
        acc.examples += chunk.len();
    }
    Ok(acc.finish())
}
