//! The pipeline behind each subcommand, as plain functions.

use std::fs::{self, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddxt_core::dataset::{
    class_label, decoder_corpus, encoder_corpus, generate_synthetic, split_indices, tokenize, Case,
    PatientRecord, SyntheticConfig, TokenizedExample,
};
use ddxt_core::infer::{batch_diagnose, pathology_classes, Diagnosis, Predictor};
use ddxt_core::metrics::{evaluate, EvalReport};
use ddxt_core::model::{ModelConfig, ModelParams};
use ddxt_core::train::{evaluate_loss, lr_at, train_epoch, Optimizer};
use ddxt_core::vocab::{Vocabulary, N_SPECIALS};
use ddxt_core::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cache::{self, Cache};
use crate::checkpoint::{self, Checkpoint, RngState, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::records::{self, OnError};
use crate::vocab_file;

pub const ENC_VOCAB_FILE: &str = "encoder.txt";
pub const DEC_VOCAB_FILE: &str = "decoder.txt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const MANIFEST: &str = "manifest.txt";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag --{what} or [paths] {what})")))
}

/// Writes `train.csv`, `val.csv`, `test.csv` and a manifest of record indices
/// per part. Returns the part sizes.
pub fn gen_data(out_dir: &Path, cfg: &SyntheticConfig, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let records = generate_synthetic(cfg)?;
    let parts = split_indices(records.len(), ratios, cfg.seed)?;
    create_dir(out_dir)?;
    let mut manifest = format!(
        "seed {}\npathologies {}\nevidence_codes {}\nrecords {}\nnoise_rate {}\n",
        cfg.seed, cfg.n_pathologies, cfg.n_evidence_codes, cfg.n_records, cfg.noise_rate
    );
    for (name, idx) in SPLIT_NAMES.iter().zip(&parts) {
        let rows: Vec<PatientRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        records::write_records(&out_dir.join(format!("{name}.csv")), &rows)?;
        let list: Vec<String> = idx.iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {}\n", list.join(" ")));
    }
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(parts.map(|p| p.len()))
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<PatientRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(records::read_records(p, OnError::Fail)?.records);
    }
    Ok(out)
}

/// Builds both vocabularies from the given CSV files, in file order.
pub fn build_vocab(inputs: &[PathBuf], out_dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
    if inputs.is_empty() {
        return Err(Error::Config("build-vocab needs at least one CSV file".into()));
    }
    let recs = read_all(inputs)?;
    let enc = Vocabulary::build(encoder_corpus(&recs)?)?;
    let dec = Vocabulary::build(decoder_corpus(&recs))?;
    create_dir(out_dir)?;
    vocab_file::write(&out_dir.join(ENC_VOCAB_FILE), &enc)?;
    vocab_file::write(&out_dir.join(DEC_VOCAB_FILE), &dec)?;
    Ok((enc, dec))
}

pub fn load_vocabs(dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
    Ok((
        vocab_file::read(&dir.join(ENC_VOCAB_FILE))?,
        vocab_file::read(&dir.join(DEC_VOCAB_FILE))?,
    ))
}

/// The run's model config with sizes taken from the vocabularies.
pub fn sized_model(cfg: &ModelConfig, enc: &Vocabulary, dec: &Vocabulary) -> Result<ModelConfig> {
    if dec.len() <= N_SPECIALS {
        return Err(Error::Data("decoder vocabulary has no pathologies".into()));
    }
    Ok(ModelConfig {
        enc_vocab_size: enc.len(),
        dec_vocab_size: dec.len(),
        n_classes: dec.len() - N_SPECIALS,
        ..cfg.clone()
    })
}

pub fn tokenize_all(
    records: &[PatientRecord],
    enc: &Vocabulary,
    dec: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Vec<TokenizedExample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            tokenize(r, enc, dec, cfg.max_enc_len, cfg.max_dec_len).map_err(|e| Error::Core(e.at_record(i)))
        })
        .collect()
}

/// Tokenizes a CSV into a binary cache.
pub fn preprocess(input: &Path, output: &Path, run: &RunConfig) -> Result<usize> {
    let (enc, dec) = load_vocabs(&run.paths.vocab_dir)?;
    let model = sized_model(&run.model, &enc, &dec)?;
    let recs = records::read_records(input, OnError::Fail)?.records;
    let examples = tokenize_all(&recs, &enc, &dec, &model)?;
    let n = examples.len();
    cache::save(
        output,
        &Cache {
            fingerprint: cache::fingerprint(&enc, &dec),
            max_enc_len: model.max_enc_len,
            max_dec_len: model.max_dec_len,
            examples,
        },
    )?;
    Ok(n)
}

fn is_cache(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(f.read(&mut head).map_err(|e| Error::io(path, e))? == 4 && &head == cache::MAGIC)
}

/// Examples from either a CSV file or a preprocessed cache.
pub fn load_examples(path: &Path, enc: &Vocabulary, dec: &Vocabulary, model: &ModelConfig) -> Result<Vec<TokenizedExample>> {
    if is_cache(path)? {
        let c = cache::load(path)?;
        if c.fingerprint != cache::fingerprint(enc, dec) {
            return Err(Error::format(path, "cache was built with different vocabularies"));
        }
        if c.max_enc_len != model.max_enc_len || c.max_dec_len != model.max_dec_len {
            return Err(Error::format(path, "cache sequence lengths differ from the model config"));
        }
        Ok(c.examples)
    } else {
        let recs = records::read_records(path, OnError::Fail)?.records;
        tokenize_all(&recs, enc, dec, model)
    }
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    pub seq_loss: f64,
    pub cls_loss: f64,
    pub val_loss: Option<f64>,
    pub examples: usize,
    pub wall_time_s: f64,
    pub examples_per_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: u32,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub log: Vec<EpochLog>,
}

/// Trains for the configured epochs, writing `last.ckpt` after every epoch,
/// `best.ckpt` whenever the validation loss improves, and one log line per
/// epoch. With `resume`, continues from `last.ckpt`.
pub fn train(run: &RunConfig, resume: bool, progress: &mut dyn Write) -> Result<TrainOutcome> {
    let (enc, dec) = load_vocabs(&run.paths.vocab_dir)?;
    let model = sized_model(&run.model, &enc, &dec)?;
    let tc = &run.train;
    let train_data = load_examples(require(&run.paths.train, "train")?, &enc, &dec, &model)?;
    let val_data = match &run.paths.val {
        Some(p) => Some(load_examples(p, &enc, &dec, &model)?),
        None => None,
    };
    let dir = &run.paths.checkpoint_dir;
    create_dir(dir)?;
    run.echo(dir)?;
    let last_path = dir.join(LAST_CKPT);
    let best_path = dir.join(BEST_CKPT);

    let (mut params, mut opt, mut rng, mut state) = if resume {
        let ck = checkpoint::load(&last_path)?;
        if *ck.config() != model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        if ck.enc_vocab != enc || ck.dec_vocab != dec {
            return Err(Error::Data("checkpoint vocabularies differ from the vocabulary files".into()));
        }
        let opt = ck.optimizer.ok_or_else(|| Error::format(&last_path, "no optimizer state to resume"))?;
        let rng = ck
            .state
            .rng
            .as_ref()
            .ok_or_else(|| Error::format(&last_path, "no generator state to resume"))?
            .restore()
            .map_err(|e| Error::format(&last_path, e))?;
        (ck.params, opt, rng, ck.state)
    } else {
        if best_path.exists() {
            fs::remove_file(&best_path).map_err(|e| Error::io(&best_path, e))?;
        }
        let params = ModelParams::<f32>::init(&model, tc.seed)?;
        let opt = Optimizer::new(&params);
        let state = TrainState {
            epoch: 0,
            best_val_loss: None,
            rng: None,
        };
        (params, opt, Rng::seed_from_u64(tc.seed), state)
    };

    let log_path = dir.join(TRAIN_LOG);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Vec::new();
    let start_epoch = state.epoch;
    let mut best = best_path.exists().then(|| best_path.clone());
    for epoch in start_epoch..tc.epochs {
        let lr = lr_at(epoch, tc);
        let t0 = Instant::now();
        let s = train_epoch(&mut params, &mut opt, &train_data, &mut rng, tc.batch_size, lr)?;
        let wall = t0.elapsed().as_secs_f64();
        let val_loss = match &val_data {
            Some(v) if (epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs => {
                Some(evaluate_loss(&params, v, tc.batch_size)?.total)
            }
            _ => None,
        };
        let improved = val_loss.is_some_and(|v| state.best_val_loss.is_none_or(|b| v < b));
        if improved {
            state.best_val_loss = val_loss;
        }
        state.epoch = epoch + 1;
        state.rng = Some(RngState::capture(&rng));
        let ck = Checkpoint {
            params: params.clone(),
            enc_vocab: enc.clone(),
            dec_vocab: dec.clone(),
            optimizer: Some(opt.clone()),
            state: state.clone(),
        };
        checkpoint::save(&last_path, &ck)?;
        if improved {
            checkpoint::save(&best_path, &ck)?;
            best = Some(best_path.clone());
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: s.total,
            seq_loss: s.seq,
            cls_loss: s.cls,
            val_loss,
            examples: s.examples,
            wall_time_s: wall,
            examples_per_s: s.examples as f64 / wall.max(1e-9),
        };
        let line = serde_json::to_string(&entry).expect("log line");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let _ = writeln!(
            progress,
            "epoch {:>3}/{}  lr {:.3e}  loss {:.4} (seq {:.4}, cls {:.4}){}  {:.0} ex/s",
            entry.epoch,
            tc.epochs,
            lr,
            s.total,
            s.seq,
            s.cls,
            val_loss.map_or(String::new(), |v| format!("  val {v:.4}")),
            entry.examples_per_s
        );
        log.push(entry);
    }
    Ok(TrainOutcome {
        epochs_run: tc.epochs - start_epoch.min(tc.epochs),
        last: last_path,
        best,
        log,
    })
}

/// `best.ckpt` if it exists, else `last.ckpt`.
pub fn default_checkpoint(dir: &Path) -> PathBuf {
    let best = dir.join(BEST_CKPT);
    if best.exists() {
        best
    } else {
        dir.join(LAST_CKPT)
    }
}

pub fn predictor(ck: Checkpoint) -> Result<Predictor<f32>> {
    Ok(Predictor::new(ck.params, ck.enc_vocab, ck.dec_vocab)?)
}

fn gold_classes(dec: &Vocabulary, rec: &PatientRecord) -> Result<(Vec<usize>, usize)> {
    let seq = rec
        .ddx
        .iter()
        .map(|(n, _)| class_label(dec, n))
        .collect::<ddxt_core::Result<Vec<_>>>()?;
    Ok((seq, class_label(dec, &rec.pathology)?))
}

pub const FREE_RUNNING: &str = "free-running greedy decoding";
pub const TEACHER_FORCED: &str = "teacher-forced (gold decoder inputs)";

/// Scores a checkpoint on the test split and writes the report files.
pub fn eval(run: &RunConfig, checkpoint_path: Option<&Path>, teacher_forced: bool) -> Result<EvalReport> {
    let ck_path = checkpoint_path.map_or_else(|| default_checkpoint(&run.paths.checkpoint_dir), Path::to_path_buf);
    let ck = checkpoint::load(&ck_path)?;
    let enc_file = run.paths.vocab_dir.join(ENC_VOCAB_FILE);
    if enc_file.exists() {
        let (enc, dec) = load_vocabs(&run.paths.vocab_dir)?;
        if enc != ck.enc_vocab || dec != ck.dec_vocab {
            return Err(Error::Data(format!(
                "vocabulary mismatch between {} and {}",
                ck_path.display(),
                run.paths.vocab_dir.display()
            )));
        }
    }
    let test_path = require(&run.paths.test, "test")?;
    let recs = records::read_records(test_path, OnError::Fail)?.records;
    let mut gold_seqs = Vec::with_capacity(recs.len());
    let mut gold_cls = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let (s, c) = gold_classes(&ck.dec_vocab, r).map_err(|e| match e {
            Error::Core(c) => Error::Data(format!("vocabulary mismatch: {}", c.at_record(i))),
            other => other,
        })?;
        gold_seqs.push(s);
        gold_cls.push(c);
    }
    let config = ck.config().clone();
    let names: Vec<String> = ck.dec_vocab.tokens()[N_SPECIALS..].to_vec();
    let enc_vocab = ck.enc_vocab.clone();
    let dec_vocab = ck.dec_vocab.clone();
    let pred = predictor(ck)?;
    let bs = run.train.batch_size;
    let diagnoses: Vec<Diagnosis> = if teacher_forced {
        let examples = tokenize_all(&recs, &enc_vocab, &dec_vocab, &config)?;
        pred.teacher_forced(&examples, bs)?
    } else {
        let cases: Vec<Case> = recs.iter().map(|r| r.case.clone()).collect();
        batch_diagnose(&pred, &cases, bs)?
    };
    let pred_seqs: Vec<Vec<usize>> = diagnoses.iter().map(|d| pathology_classes(&d.raw_ids)).collect();
    let pred_cls: Vec<usize> = diagnoses.iter().map(|d| d.predicted_class).collect();
    let mode = if teacher_forced { TEACHER_FORCED } else { FREE_RUNNING };
    let mut report = evaluate(names, &gold_seqs, &pred_seqs, &gold_cls, &pred_cls, mode)?;
    report.meta.checkpoint = Some(ck_path.display().to_string());
    crate::report::emit(&run.paths.report_dir, &report)?;
    run.echo(&run.paths.report_dir)?;
    Ok(report)
}

/// Parses one case, or an array of cases, from JSON.
pub fn parse_cases(text: &str) -> Result<Vec<Case>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("input is not valid JSON: {e}")))?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let case: Case =
                serde_json::from_value(v).map_err(|e| Error::Data(format!("case {i}: invalid field: {e}")))?;
            case.validate().map_err(|e| Error::Core(e.at_record(i)))?;
            Ok(case)
        })
        .collect()
}

/// Diagnosis as printed by `predict`.
pub fn diagnosis_json(d: &Diagnosis, with_logits: bool) -> serde_json::Value {
    let mut v = serde_json::json!({
        "ddx": d.ddx,
        "predicted_pathology": d.predicted_pathology,
    });
    if with_logits {
        v["class_logits"] = serde_json::json!(d.class_logits);
    }
    v
}

pub fn predict(checkpoint_path: &Path, input: &str, with_logits: bool) -> Result<serde_json::Value> {
    let cases = parse_cases(input)?;
    let pred = predictor(checkpoint::load(checkpoint_path)?)?;
    let out: Vec<serde_json::Value> = batch_diagnose(&pred, &cases, 64)?
        .iter()
        .map(|d| diagnosis_json(d, with_logits))
        .collect();
    let single = !input.trim_start().starts_with('[');
    Ok(if single {
        out.into_iter().next().unwrap_or_default()
    } else {
        serde_json::Value::Array(out)
    })
}
