//! Greedy DDx generation and pathology prediction.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{assemble_input_tokens, Case, TokenizedExample};
use crate::error::{Error, Result};
use crate::model::{argmax, classify, decoder_forward, encoder_forward, forward, Mode, ModelParams, TokenBatch};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::train::make_batch;
use crate::vocab::{is_special_id, Vocabulary, BOS_ID, EOS_ID, N_SPECIALS, PAD_ID};

/// Model output for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    /// Pathologies, most likely first, duplicates and specials removed.
    pub ddx: Vec<String>,
    /// Generated decoder ids after `<bos>`, without the stop token.
    pub raw_ids: Vec<usize>,
    pub predicted_pathology: String,
    pub predicted_class: usize,
    pub class_logits: Vec<f64>,
}

impl Diagnosis {
    /// Generated pathologies as class indices, in order, duplicates kept.
    pub fn class_sequence(&self) -> Vec<usize> {
        pathology_classes(&self.raw_ids)
    }
}

/// Class indices of the pathology ids in `ids`, skipping reserved ids.
pub fn pathology_classes(ids: &[usize]) -> Vec<usize> {
    ids.iter().filter(|&&id| !is_special_id(id)).map(|&id| id - N_SPECIALS).collect()
}

/// A checkpoint's parameters with the vocabularies they were trained on.
#[derive(Clone, Debug)]
pub struct Predictor<T = f32> {
    params: ModelParams<T>,
    enc_vocab: Vocabulary,
    dec_vocab: Vocabulary,
}

/// Greedy continuation of one batch: generated ids per row plus the encoder
/// features they were conditioned on.
struct Decoded<T> {
    enc: TokenBatch,
    enc_out: Tensor<T>,
    generated: Vec<Vec<usize>>,
}

impl<T: Scalar> Predictor<T> {
    pub fn new(params: ModelParams<T>, enc_vocab: Vocabulary, dec_vocab: Vocabulary) -> Result<Self> {
        let cfg = params.config();
        if enc_vocab.len() != cfg.enc_vocab_size
            || dec_vocab.len() != cfg.dec_vocab_size
            || dec_vocab.len() != cfg.n_classes + N_SPECIALS
        {
            return Err(Error::Contract(alloc::format!(
                "vocabulary sizes ({}, {}) do not match the model ({}, {}, {} classes)",
                enc_vocab.len(),
                dec_vocab.len(),
                cfg.enc_vocab_size,
                cfg.dec_vocab_size,
                cfg.n_classes
            )));
        }
        Ok(Predictor {
            params,
            enc_vocab,
            dec_vocab,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn enc_vocab(&self) -> &Vocabulary {
        &self.enc_vocab
    }

    pub fn dec_vocab(&self) -> &Vocabulary {
        &self.dec_vocab
    }

    /// Validated, framed and padded encoder ids for a case.
    pub fn encode_case(&self, case: &Case) -> Result<Vec<usize>> {
        case.validate()?;
        let toks = assemble_input_tokens(case)?;
        Ok(self.enc_vocab.encode(&toks, self.params.config().max_enc_len)?.ids)
    }

    fn class_name(&self, class: usize) -> String {
        self.dec_vocab.token(class + N_SPECIALS).unwrap_or_default().to_string()
    }

    /// Runs the encoder once, then re-runs the decoder per step, appending the
    /// argmax of the sequence head at each row's last position. A row stops
    /// at `<eos>` (or `<pad>`) or after `max_dec_len - 1` generated tokens.
    /// `prefixes` are forced tokens placed after `<bos>`.
    fn decode_rows(&self, enc_rows: &[Vec<usize>], prefixes: &[Vec<usize>]) -> Result<Decoded<T>> {
        let cfg = self.params.config();
        let cap = cfg.max_dec_len - 1;
        let enc = TokenBatch::from_rows(enc_rows)?.trimmed();
        let enc_out = {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let out = encoder_forward(&mut tape, &bound, &enc, &mut Mode::Eval)?;
            tape.value(out).clone()
        };
        let b = enc.batch;
        let mut generated: Vec<Vec<usize>> = prefixes.iter().map(|p| p[..p.len().min(cap)].to_vec()).collect();
        let mut done: Vec<bool> = generated.iter().map(|g| g.len() >= cap).collect();
        while done.iter().any(|d| !d) {
            let rows: Vec<Vec<usize>> = generated
                .iter()
                .map(|g| core::iter::once(BOS_ID).chain(g.iter().copied()).collect())
                .collect();
            let dec = TokenBatch::from_rows(&rows)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let eo = tape.constant(enc_out.clone());
            let (logits, _) = decoder_forward(&mut tape, &bound, &dec, eo, &enc.mask, &mut Mode::Eval)?;
            let lv = tape.value(logits).data();
            let v = cfg.dec_vocab_size;
            for r in 0..b {
                if done[r] {
                    continue;
                }
                let pos = rows[r].len() - 1;
                let off = (r * dec.len + pos) * v;
                let next = argmax(&lv[off..off + v]);
                if next == EOS_ID || next == PAD_ID {
                    done[r] = true;
                } else {
                    generated[r].push(next);
                    done[r] = generated[r].len() >= cap;
                }
            }
        }
        Ok(Decoded { enc, enc_out, generated })
    }

    /// Classifier logits over the encoder features and the decoder features of
    /// `[<bos>, generated..]`.
    fn classify_rows(&self, d: &Decoded<T>) -> Result<Vec<Vec<T>>> {
        let rows: Vec<Vec<usize>> = d
            .generated
            .iter()
            .map(|g| core::iter::once(BOS_ID).chain(g.iter().copied()).collect())
            .collect();
        let dec = TokenBatch::from_rows(&rows)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let eo = tape.constant(d.enc_out.clone());
        let (_, feats) = decoder_forward(&mut tape, &bound, &dec, eo, &d.enc.mask, &mut Mode::Eval)?;
        let cls = classify(&mut tape, &bound, eo, feats, &d.enc.mask, &dec.mask)?;
        let n = self.params.config().n_classes;
        Ok(tape.value(cls).data().chunks(n).map(<[T]>::to_vec).collect())
    }

    fn diagnosis(&self, raw_ids: Vec<usize>, logits: Vec<T>) -> Diagnosis {
        let mut seen = BTreeSet::new();
        let ddx = raw_ids
            .iter()
            .filter(|&&id| !is_special_id(id) && seen.insert(id))
            .filter_map(|&id| self.dec_vocab.token(id).map(str::to_string))
            .collect();
        let predicted_class = argmax(&logits);
        Diagnosis {
            ddx,
            raw_ids,
            predicted_pathology: self.class_name(predicted_class),
            predicted_class,
            class_logits: logits.iter().map(|x| x.as_f64()).collect(),
        }
    }

    /// Greedy generation for one encoded input; returns the ids after `<bos>`.
    pub fn greedy_decode(&self, enc_ids: &[usize]) -> Result<Vec<usize>> {
        self.greedy_decode_from(enc_ids, &[])
    }

    /// Greedy generation with the first tokens forced to `prefix`.
    pub fn greedy_decode_from(&self, enc_ids: &[usize], prefix: &[usize]) -> Result<Vec<usize>> {
        let d = self.decode_rows(&[enc_ids.to_vec()], &[prefix.to_vec()])?;
        Ok(d.generated.into_iter().next().unwrap_or_default())
    }

    /// Diagnoses already-encoded inputs as one batch.
    pub fn diagnose_encoded(&self, enc_rows: &[Vec<usize>]) -> Result<Vec<Diagnosis>> {
        if enc_rows.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.decode_rows(enc_rows, &vec![Vec::new(); enc_rows.len()])?;
        let logits = self.classify_rows(&d)?;
        Ok(d
            .generated
            .into_iter()
            .zip(logits)
            .map(|(g, l)| self.diagnosis(g, l))
            .collect())
    }

    pub fn diagnose(&self, case: &Case) -> Result<Diagnosis> {
        let enc = self.encode_case(case)?;
        Ok(self.diagnose_encoded(&[enc])?.remove(0))
    }

    /// Per-position argmax under teacher forcing (gold decoder inputs),
    /// truncated at the first predicted `<eos>` and at the gold length, plus
    /// the classifier logits of the same pass.
    pub fn teacher_forced(&self, examples: &[TokenizedExample], batch_size: usize) -> Result<Vec<Diagnosis>> {
        let mut out = Vec::with_capacity(examples.len());
        let v = self.params.config().dec_vocab_size;
        let n = self.params.config().n_classes;
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&TokenizedExample> = chunk.iter().collect();
            let batch = make_batch(&refs)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let o = forward(&mut tape, &bound, &batch.enc, &batch.dec, &mut Mode::Eval)?;
            let lv = tape.value(o.seq_logits).data();
            let cv = tape.value(o.cls_logits).data();
            for (r, ex) in chunk.iter().enumerate() {
                let gold_len = ex.decoder_input.true_length.min(batch.dec.len);
                let mut ids = Vec::new();
                for pos in 0..gold_len {
                    let off = (r * batch.dec.len + pos) * v;
                    let next = argmax(&lv[off..off + v]);
                    if next == EOS_ID || next == PAD_ID {
                        break;
                    }
                    ids.push(next);
                }
                out.push(self.diagnosis(ids, cv[r * n..(r + 1) * n].to_vec()));
            }
        }
        Ok(out)
    }
}

/// Diagnoses `cases` in chunks of `batch_size`. Every case is validated
/// first; a failure names its index.
pub fn batch_diagnose<T: Scalar>(
    predictor: &Predictor<T>,
    cases: &[Case],
    batch_size: usize,
) -> Result<Vec<Diagnosis>> {
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be >= 1".into()));
    }
    let encoded = cases
        .iter()
        .enumerate()
        .map(|(i, c)| predictor.encode_case(c).map_err(|e| e.at_record(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(cases.len());
    for chunk in encoded.chunks(batch_size) {
        out.extend(predictor.diagnose_encoded(chunk)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{decoder_corpus, encoder_corpus, generate_synthetic, Sex, SyntheticConfig};
    use crate::model::ModelConfig;

    fn tiny() -> (Predictor<f64>, Vec<Case>) {
        let recs = generate_synthetic(&SyntheticConfig {
            n_records: 12,
            n_pathologies: 4,
            n_evidence_codes: 8,
            ..Default::default()
        })
        .unwrap();
        let ev = Vocabulary::build(encoder_corpus(&recs).unwrap()).unwrap();
        let dv = Vocabulary::build(decoder_corpus(&recs)).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_mult: 2,
            max_enc_len: 24,
            max_dec_len: 6,
            enc_vocab_size: ev.len(),
            dec_vocab_size: dv.len(),
            n_classes: dv.len() - N_SPECIALS,
            dropout: 0.0,
        };
        let p = Predictor::new(ModelParams::init(&cfg, 3).unwrap(), ev, dv).unwrap();
        (p, recs.into_iter().map(|r| r.case).collect())
    }

    #[test]
    fn decode_terminates_within_cap() {
        let (p, cases) = tiny();
        for c in &cases {
            let d = p.diagnose(c).unwrap();
            assert!(d.raw_ids.len() <= 5);
            assert_eq!(d.class_logits.len(), p.params().config().n_classes);
            assert_eq!(d.predicted_class, argmax(&d.class_logits));
            let uniq: BTreeSet<_> = d.ddx.iter().collect();
            assert_eq!(uniq.len(), d.ddx.len());
            assert!(d.ddx.iter().all(|t| !t.starts_with('<')));
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let (p, cases) = tiny();
        let enc = p.encode_case(&cases[0]).unwrap();
        let a = p.greedy_decode(&enc).unwrap();
        assert_eq!(a, p.greedy_decode(&enc).unwrap());
        for k in 0..=a.len() {
            assert_eq!(p.greedy_decode_from(&enc, &a[..k]).unwrap(), a);
        }
    }

    #[test]
    fn batch_errors_name_the_record() {
        let (p, mut cases) = tiny();
        assert!(batch_diagnose(&p, &[], 4).unwrap().is_empty());
        cases[2] = Case {
            age: 30,
            sex: Sex::F,
            initial_evidence: "E_0".into(),
            evidences: Vec::new(),
        };
        match batch_diagnose(&p, &cases, 4) {
            Err(Error::Record { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_size_does_not_change_results() {
        let (p, cases) = tiny();
        let one = batch_diagnose(&p, &cases[..8], 1).unwrap();
        let eight = batch_diagnose(&p, &cases[..8], 8).unwrap();
        for (a, b) in one.iter().zip(&eight) {
            assert_eq!(a.raw_ids, b.raw_ids);
            for (x, y) in a.class_logits.iter().zip(&b.class_logits) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
