//! Central finite-difference verification of tape gradients.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest magnitude used when normalizing an error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = Float::max(Float::max(Float::abs(analytic), Float::abs(numeric)), REL_FLOOR);
    Float::abs(analytic - numeric) / scale
}

/// Outcome of a check: the worst element over every input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences with step `h`, element by element.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads
            .get(v)
            .ok_or_else(|| Error::Contract("input has no gradient".into()))?;
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[j];
            let err = relative_error(analytic, numeric);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = analytic;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `sum(x * w)` for a fixed pseudo-random `w`, turning any tensor into a
/// scalar whose gradient exercises every output element.
pub fn probe_loss(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let w = Tensor::from_fn(&shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    });
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng as _, SeedableRng};
    let mut rng = crate::Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Finite-difference step used by [`suite`].
pub const STEP: f64 = 1e-5;

type Named = (&'static str, GradCheck);
type Scalarize = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Checks every differentiable primitive, attention, and a one-layer
/// encoder-decoder with both heads, all in `f64`.
pub fn suite() -> Result<Vec<Named>> {
    use crate::model::{causal_mask, scaled_dot_attention};
    use crate::tensor::Mask;
    use rand::SeedableRng;

    let mut out: Vec<Named> = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &Scalarize| {
        check_gradients(&inputs, STEP, f).map(|r| out.push((name, r)))
    };

    run("matmul batched", vec![random(&[2, 3, 4], 1), random(&[2, 4, 5], 2)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe_loss(t, y, 1)
    })?;
    run("matmul shared", vec![random(&[2, 3, 4], 3), random(&[4, 5], 4)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe_loss(t, y, 2)
    })?;
    run("matmul_nt batched", vec![random(&[2, 3, 4], 5), random(&[2, 5, 4], 6)], &|t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        probe_loss(t, y, 3)
    })?;
    run("matmul_nt shared", vec![random(&[3, 4], 7), random(&[5, 4], 8)], &|t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        probe_loss(t, y, 4)
    })?;
    run("add", vec![random(&[3, 4], 9), random(&[3, 4], 10)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        probe_loss(t, y, 5)
    })?;
    run("add broadcast", vec![random(&[2, 3, 4], 11), random(&[4], 12)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        probe_loss(t, y, 6)
    })?;
    run("mul", vec![random(&[3, 4], 13), random(&[3, 4], 14)], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        probe_loss(t, y, 7)
    })?;
    run("scale and sum", vec![random(&[3, 4], 15)], &|t, v| {
        let y = t.scale(v[0], 0.37);
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })?;
    run("softmax", vec![random(&[2, 3, 5], 16)], &|t, v| {
        let y = t.softmax(v[0], None)?;
        probe_loss(t, y, 8)
    })?;
    run("softmax masked", vec![random(&[2, 4, 4], 17)], &|t, v| {
        let y = t.softmax(v[0], Some(&causal_mask(4)))?;
        probe_loss(t, y, 9)
    })?;
    run("layer_norm", vec![random(&[3, 6], 18), random(&[6], 19), random(&[6], 20)], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe_loss(t, y, 10)
    })?;
    run("gelu", vec![random(&[4, 5], 21)], &|t, v| {
        let x = t.scale(v[0], 3.0);
        let y = t.gelu(x);
        probe_loss(t, y, 11)
    })?;
    run("embedding", vec![random(&[6, 3], 22)], &|t, v| {
        let y = t.embedding(v[0], &[1, 4, 1, 0, 5, 1], &[2, 3])?;
        probe_loss(t, y, 12)
    })?;
    run("dropout", vec![random(&[4, 5], 23)], &|t, v| {
        let mut rng = crate::Rng::seed_from_u64(99);
        let y = t.dropout(v[0], 0.3, true, &mut rng)?;
        probe_loss(t, y, 13)
    })?;
    run("cross_entropy", vec![random(&[4, 5], 24)], &|t, v| {
        let x = t.scale(v[0], 2.0);
        t.cross_entropy(x, &[1, 0, 3, 0], Some(0))
    })?;
    run("reshape and permute", vec![random(&[2, 3, 4], 25)], &|t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        let y = t.reshape(y, &[4, 6])?;
        probe_loss(t, y, 14)
    })?;
    run("masked_mean", vec![random(&[2, 3, 4], 26)], &|t, v| {
        let mask = Mask::new(vec![2, 3], vec![true, true, false, true, false, false])?;
        let y = t.masked_mean(v[0], &mask)?;
        probe_loss(t, y, 15)
    })?;
    run("concat", vec![random(&[2, 3], 27), random(&[2, 4], 28)], &|t, v| {
        let y = t.concat(v[0], v[1])?;
        probe_loss(t, y, 16)
    })?;
    run("attention", vec![random(&[2, 3, 4], 29), random(&[2, 5, 4], 30), random(&[2, 5, 4], 31)], &|t, v| {
        let mask = Mask::new(vec![2, 1, 5], vec![true, true, true, false, false, true, true, true, true, true])?;
        let (y, _) = scaled_dot_attention(t, v[0], v[1], v[2], Some(&mask))?;
        probe_loss(t, y, 17)
    })?;
    out.push(("encoder-decoder", model_check()?));
    Ok(out)
}

/// One encoder and one decoder layer (`d_model` 8, two heads) over a padded
/// batch, differentiating the summed sequence and classifier loss with
/// respect to every parameter.
pub fn model_check() -> Result<GradCheck> {
    use crate::model::{forward, Mode, ModelConfig, ModelParams, TokenBatch};
    use crate::train::compute_loss;

    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_mult: 2,
        max_enc_len: 7,
        max_dec_len: 5,
        enc_vocab_size: 12,
        dec_vocab_size: 9,
        n_classes: 4,
        dropout: 0.0,
    };
    let template = ModelParams::<f64>::init(&cfg, 11)?;
    // Perturb layer norm and bias parameters away from their 1/0 init.
    let inputs: Vec<Tensor<f64>> = template
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let noise = random(t.shape(), 1000 + i as u64);
            Tensor::from_fn(t.shape(), |j| t.data()[j] + 0.1 * noise.data()[j])
        })
        .collect();
    let enc = TokenBatch::from_rows(&[vec![1, 5, 3, 7, 9, 2, 0], vec![1, 6, 3, 11, 2, 0, 0]])?;
    let dec = TokenBatch::from_rows(&[vec![1, 5, 7, 6], vec![1, 8, 0, 0]])?;
    let targets = [5, 7, 6, 2, 8, 2, 0, 0];
    let labels = [0, 3];
    check_gradients(&inputs, STEP, |t, v| {
        let m = template.attach(t, v.to_vec())?;
        let o = forward(t, &m, &enc, &dec, &mut Mode::Eval)?;
        Ok(compute_loss(t, o.seq_logits, &targets, o.cls_logits, &labels)?.total)
    })
}
