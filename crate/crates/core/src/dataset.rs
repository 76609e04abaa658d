//! Patient records, token-sequence assembly, splits, and a seeded synthetic
//! corpus with learnable evidence-to-pathology structure.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng as _, SeedableRng};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{EncodedSequence, Vocabulary, BOS, EOS, N_SPECIALS, SEP};
use crate::Rng;

pub const AGE_GROUPS: [&str; 8] = ["<1", "1-4", "5-14", "15-29", "30-44", "45-59", "60-74", "75+"];

pub const MAX_ENC_LEN: usize = 80;
pub const MAX_DEC_LEN: usize = 40;

pub fn bin_age(age: i64) -> Result<&'static str> {
    let group = match age {
        a if a < 0 => return Err(Error::Validation(format!("age must be >= 0, got {a}"))),
        0 => 0,
        1..=4 => 1,
        5..=14 => 2,
        15..=29 => 3,
        30..=44 => 4,
        45..=59 => 5,
        60..=74 => 6,
        _ => 7,
    };
    Ok(AGE_GROUPS[group])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }

    pub fn parse(s: &str) -> Result<Sex> {
        match s.trim() {
            "M" => Ok(Sex::M),
            "F" => Ok(Sex::F),
            other => Err(Error::Validation(format!("sex must be M or F, got {other:?}"))),
        }
    }
}

/// What the model sees about a patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub age: i64,
    pub sex: Sex,
    pub initial_evidence: String,
    pub evidences: Vec<String>,
}

impl Case {
    pub fn validate(&self) -> Result<()> {
        bin_age(self.age)?;
        if self.evidences.is_empty() {
            return Err(Error::Validation("evidences must not be empty".into()));
        }
        if self.initial_evidence.is_empty() {
            return Err(Error::Validation("initial_evidence must not be empty".into()));
        }
        Ok(())
    }
}

/// A case with its ground-truth differential (most probable first) and the
/// pathology the patient actually has.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub case: Case,
    pub ddx: Vec<(String, f64)>,
    pub pathology: String,
}

impl PatientRecord {
    /// Validates and stable-sorts the differential by descending probability.
    pub fn new(case: Case, mut ddx: Vec<(String, f64)>, pathology: String) -> Result<Self> {
        ddx.sort_by(|a, b| b.1.total_cmp(&a.1));
        let rec = PatientRecord {
            case,
            ddx,
            pathology,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        self.case.validate()?;
        if self.ddx.is_empty() {
            return Err(Error::Validation("differential diagnosis is empty".into()));
        }
        if let Some((name, p)) = self.ddx.iter().find(|(_, p)| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::Validation(format!(
                "probability {p} for {name:?} is outside (0, 1]"
            )));
        }
        if self.ddx.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(Error::Validation("differential is not sorted by probability".into()));
        }
        if !self.ddx.iter().any(|(name, _)| *name == self.pathology) {
            return Err(Error::Validation(format!(
                "pathology {:?} is missing from its differential",
                self.pathology
            )));
        }
        Ok(())
    }
}

/// `[<bos>, age, <sep>, sex, <sep>, initial, <sep>, e1 .. ek, <eos>]`
pub fn assemble_input_tokens(case: &Case) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(case.evidences.len() + 8);
    out.push(BOS.to_string());
    out.push(bin_age(case.age)?.to_string());
    out.push(SEP.to_string());
    out.push(case.sex.as_str().to_string());
    out.push(SEP.to_string());
    out.push(case.initial_evidence.clone());
    out.push(SEP.to_string());
    out.extend(case.evidences.iter().cloned());
    out.push(EOS.to_string());
    Ok(out)
}

/// Decoder targets `[p1 .. pn, <eos>]` and the matching teacher-forcing input
/// `[<bos>, p1 .. pn]`.
pub fn assemble_target_tokens(record: &PatientRecord) -> Result<(Vec<String>, Vec<String>)> {
    if record.ddx.is_empty() {
        return Err(Error::Validation("differential diagnosis is empty".into()));
    }
    let names = record.ddx.iter().map(|(n, _)| n.clone());
    let mut targets: Vec<String> = names.clone().collect();
    targets.push(EOS.to_string());
    let mut input = vec![BOS.to_string()];
    input.extend(names);
    Ok((targets, input))
}

/// Non-special tokens the encoder vocabulary is built from, in corpus order.
pub fn encoder_corpus<'a>(records: impl IntoIterator<Item = &'a PatientRecord>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for r in records {
        out.push(bin_age(r.case.age)?.to_string());
        out.push(r.case.sex.as_str().to_string());
        out.push(r.case.initial_evidence.clone());
        out.extend(r.case.evidences.iter().cloned());
    }
    Ok(out)
}

/// Pathology tokens the decoder vocabulary is built from, in corpus order.
pub fn decoder_corpus<'a>(records: impl IntoIterator<Item = &'a PatientRecord>) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        out.extend(r.ddx.iter().map(|(n, _)| n.clone()));
        out.push(r.pathology.clone());
    }
    out
}

/// Model-ready ids for one record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedExample {
    pub encoder: EncodedSequence,
    pub decoder_input: EncodedSequence,
    /// Same length as `decoder_input`; `<pad>` past the end.
    pub decoder_target: Vec<usize>,
    pub class_label: usize,
}

pub fn tokenize(
    record: &PatientRecord,
    enc_vocab: &Vocabulary,
    dec_vocab: &Vocabulary,
    max_enc_len: usize,
    max_dec_len: usize,
) -> Result<TokenizedExample> {
    let encoder = enc_vocab.encode(&assemble_input_tokens(&record.case)?, max_enc_len)?;
    let (targets, input) = assemble_target_tokens(record)?;
    let decoder_input = dec_vocab.encode(&input, max_dec_len)?;
    let decoder_target = dec_vocab.encode(&targets, max_dec_len)?.ids;
    let class_label = class_label(dec_vocab, &record.pathology)?;
    Ok(TokenizedExample {
        encoder,
        decoder_input,
        decoder_target,
        class_label,
    })
}

/// Classifier label: the decoder-vocabulary id minus the reserved prefix.
pub fn class_label(dec_vocab: &Vocabulary, pathology: &str) -> Result<usize> {
    dec_vocab
        .id(pathology)
        .filter(|&id| id >= N_SPECIALS)
        .map(|id| id - N_SPECIALS)
        .ok_or_else(|| Error::Validation(format!("pathology {pathology:?} not in decoder vocabulary")))
}

/// Seeded shuffle then contiguous train/val/test partition of `0..n`.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Rng::seed_from_u64(seed));
    let n_train = Float::round((n as f64) * a) as usize;
    let n_val = (Float::round((n as f64) * b) as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok([idx, val, test])
}

pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<T>; 3]> {
    let parts = split_indices(items.len(), ratios, seed)?;
    Ok(parts.map(|p| p.into_iter().map(|i| items[i].clone()).collect()))
}

/// Knobs of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pathologies: usize,
    pub n_evidence_codes: usize,
    pub n_records: usize,
    pub seed: u64,
    /// Probability of dropping each characteristic evidence, and (scaled)
    /// of adding each unrelated one.
    pub noise_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pathologies: 10,
            n_evidence_codes: 16,
            n_records: 1000,
            seed: 0,
            noise_rate: 0.1,
        }
    }
}

pub fn pathology_name(i: usize) -> String {
    format!("P{i:02}")
}

pub fn evidence_name(i: usize) -> String {
    format!("E_{i}")
}

/// Every pathology owns a distinct characteristic evidence set. A record
/// samples a pathology uniformly, keeps its characteristic evidences (each
/// dropped with `noise_rate`, except the initial one), adds unrelated noise
/// evidences, and ranks all pathologies by Jaccard overlap with the observed
/// evidence set to form its differential.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<PatientRecord>> {
    if cfg.n_pathologies < 2 {
        return Err(Error::Param(format!(
            "need at least 2 pathologies, got {}",
            cfg.n_pathologies
        )));
    }
    if cfg.n_evidence_codes < cfg.n_pathologies {
        return Err(Error::Param(format!(
            "need at least as many evidence codes ({}) as pathologies ({})",
            cfg.n_evidence_codes, cfg.n_pathologies
        )));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::Param(format!("noise rate must be in [0, 1), got {}", cfg.noise_rate)));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let n_codes = cfg.n_evidence_codes;
    let sets = characteristic_sets(&mut rng, cfg.n_pathologies, n_codes);

    let mut records = Vec::with_capacity(cfg.n_records);
    for _ in 0..cfg.n_records {
        let p = rng.random_range(0..cfg.n_pathologies);
        let age = rng.random_range(0..=90i64);
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let chars = &sets[p];
        let initial = chars[rng.random_range(0..chars.len())];
        let add_rate = if n_codes > chars.len() {
            (cfg.noise_rate * chars.len() as f64 / (n_codes - chars.len()) as f64).min(1.0)
        } else {
            0.0
        };
        let mut present = vec![false; n_codes];
        for (code, slot) in present.iter_mut().enumerate() {
            *slot = if chars.contains(&code) {
                code == initial || !rng.random_bool(cfg.noise_rate)
            } else {
                rng.random_bool(add_rate)
            };
        }
        let observed: Vec<usize> = (0..n_codes).filter(|&c| present[c]).collect();

        let mut scored: Vec<(usize, f64)> = sets
            .iter()
            .enumerate()
            .filter_map(|(q, set)| {
                let inter = set.iter().filter(|&&c| present[c]).count();
                let union = observed.len() + set.len() - inter;
                (inter > 0).then(|| (q, inter as f64 / union as f64))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let total: f64 = scored.iter().map(|s| s.1).sum();
        let ddx = scored
            .into_iter()
            .map(|(q, s)| (pathology_name(q), s / total))
            .collect();

        let case = Case {
            age,
            sex,
            initial_evidence: evidence_name(initial),
            evidences: observed.into_iter().map(evidence_name).collect(),
        };
        records.push(PatientRecord::new(case, ddx, pathology_name(p))?);
    }
    Ok(records)
}

fn characteristic_sets(rng: &mut Rng, n_pathologies: usize, n_codes: usize) -> Vec<Vec<usize>> {
    let hi = n_codes.min(5);
    let mut lo = n_codes.min(3);
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(n_pathologies);
    let mut attempts = 0;
    while sets.len() < n_pathologies {
        let size = rng.random_range(lo..=hi);
        let mut set = index::sample(rng, n_codes, size).into_vec();
        set.sort_unstable();
        if !sets.contains(&set) {
            sets.push(set);
            attempts = 0;
            continue;
        }
        attempts += 1;
        // Small code pools run out of distinct large subsets; singletons
        // always suffice because n_codes >= n_pathologies.
        if attempts > 1000 && lo > 1 {
            lo -= 1;
            attempts = 0;
        }
    }
    sets
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(age: i64, evidences: &[&str], initial: &str) -> Case {
        Case {
            age,
            sex: Sex::F,
            initial_evidence: initial.into(),
            evidences: evidences.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn age_bins() {
        assert_eq!(bin_age(0).unwrap(), "<1");
        assert_eq!(bin_age(4).unwrap(), "1-4");
        assert_eq!(bin_age(37).unwrap(), "30-44");
        assert_eq!(bin_age(74).unwrap(), "60-74");
        assert_eq!(bin_age(75).unwrap(), "75+");
        assert!(bin_age(-1).is_err());
    }

    #[test]
    fn input_template() {
        let toks = assemble_input_tokens(&case(37, &["E1", "E2"], "E1")).unwrap();
        assert_eq!(
            toks,
            ["<bos>", "30-44", "<sep>", "F", "<sep>", "E1", "<sep>", "E1", "E2", "<eos>"]
        );
        let single = assemble_input_tokens(&case(5, &["E1"], "E1")).unwrap();
        assert_eq!(single.len(), 9);
        assert_eq!(single.iter().filter(|t| *t == SEP).count(), 3);
    }

    #[test]
    fn long_input_is_emitted_fully_then_truncated_by_encode() {
        let ev: Vec<String> = (0..100).map(evidence_name).collect();
        let c = Case {
            age: 30,
            sex: Sex::M,
            initial_evidence: "E_0".into(),
            evidences: ev.clone(),
        };
        let toks = assemble_input_tokens(&c).unwrap();
        assert_eq!(toks.len(), 108);
        let vocab = Vocabulary::build(ev).unwrap();
        let enc = vocab.encode(&toks, MAX_ENC_LEN).unwrap();
        assert_eq!(enc.true_length, 80);
        assert!(!enc.ids.contains(&crate::vocab::EOS_ID));
    }

    #[test]
    fn target_shift() {
        let r = PatientRecord::new(
            case(30, &["E"], "E"),
            vec![("B".into(), 0.4), ("A".into(), 0.6)],
            "A".into(),
        )
        .unwrap();
        let (t, i) = assemble_target_tokens(&r).unwrap();
        assert_eq!(t, ["A", "B", "<eos>"]);
        assert_eq!(i, ["<bos>", "A", "B"]);
    }

    #[test]
    fn ties_keep_source_order() {
        let r = PatientRecord::new(
            case(30, &["E"], "E"),
            vec![("C".into(), 0.2), ("A".into(), 0.4), ("B".into(), 0.4)],
            "C".into(),
        )
        .unwrap();
        let names: Vec<&str> = r.ddx.iter().map(|d| d.0.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
    }

    #[test]
    fn record_validation() {
        let bad = PatientRecord::new(case(30, &["E"], "E"), vec![("A".into(), 1.0)], "Z".into());
        assert!(matches!(bad, Err(Error::Validation(_))));
        let prob = PatientRecord::new(case(30, &["E"], "E"), vec![("A".into(), 1.5)], "A".into());
        assert!(prob.is_err());
        let empty = PatientRecord::new(case(30, &[], "E"), vec![("A".into(), 1.0)], "A".into());
        assert!(empty.is_err());
    }

    #[test]
    fn tokenized_example_alignment() {
        let r = PatientRecord::new(
            case(30, &["E1", "E2"], "E1"),
            vec![("A".into(), 0.6), ("B".into(), 0.4)],
            "B".into(),
        )
        .unwrap();
        let ev = Vocabulary::build(encoder_corpus([&r]).unwrap()).unwrap();
        let dv = Vocabulary::build(decoder_corpus([&r])).unwrap();
        let ex = tokenize(&r, &ev, &dv, 80, 40).unwrap();
        assert_eq!(ex.decoder_input.ids[..3], [1, 5, 6]);
        assert_eq!(ex.decoder_target[..4], [5, 6, 2, 0]);
        for t in 0..ex.decoder_input.true_length - 1 {
            assert_eq!(ex.decoder_target[t], ex.decoder_input.ids[t + 1]);
        }
        assert_eq!(ex.class_label, 1);
    }

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..10).collect();
        let [a, b, c] = split(&items, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split(&items, (0.8, 0.1, 0.1), 3).unwrap(), [a.clone(), b.clone(), c.clone()]);
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split(&items, (0.5, 0.5, 0.5), 3).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let cfg = SyntheticConfig {
            n_records: 200,
            seed: 9,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        for r in &a {
            r.validate().unwrap();
            assert!(r.case.evidences.contains(&r.case.initial_evidence));
        }
    }

    #[test]
    fn noiseless_synthetic_ranks_truth_first() {
        let cfg = SyntheticConfig {
            n_records: 300,
            noise_rate: 0.0,
            seed: 4,
            ..Default::default()
        };
        for r in generate_synthetic(&cfg).unwrap() {
            assert_eq!(r.ddx[0].0, r.pathology);
        }
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let mut cfg = SyntheticConfig {
            n_pathologies: 1,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Param(_))));
        cfg.n_pathologies = 5;
        cfg.n_evidence_codes = 4;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn tiny_code_pool_still_gets_distinct_sets() {
        let cfg = SyntheticConfig {
            n_pathologies: 2,
            n_evidence_codes: 2,
            n_records: 20,
            seed: 1,
            noise_rate: 0.0,
        };
        for r in generate_synthetic(&cfg).unwrap() {
            assert_eq!(r.ddx[0].0, r.pathology);
        }
    }
}
