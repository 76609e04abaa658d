use std::path::Path;

use ddxt::checkpoint::{self, Checkpoint, TrainState};
use ddxt::error::Error;
use ddxt::records::{self, OnError};
use ddxt::report;
use ddxt_core::dataset::{decoder_corpus, encoder_corpus, generate_synthetic, Case, PatientRecord, Sex, SyntheticConfig};
use ddxt_core::metrics::evaluate;
use ddxt_core::model::{ModelConfig, ModelParams};
use ddxt_core::vocab::{Vocabulary, N_SPECIALS};
use proptest::prelude::*;

fn small_checkpoint() -> Checkpoint {
    let records = generate_synthetic(&SyntheticConfig {
        n_records: 20,
        ..Default::default()
    })
    .unwrap();
    let enc = Vocabulary::build(encoder_corpus(&records).unwrap()).unwrap();
    let dec = Vocabulary::build(decoder_corpus(&records)).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_mult: 2,
        max_enc_len: 32,
        max_dec_len: 12,
        enc_vocab_size: enc.len(),
        dec_vocab_size: dec.len(),
        n_classes: dec.len() - N_SPECIALS,
        dropout: 0.1,
    };
    Checkpoint {
        params: ModelParams::init(&cfg, 3).unwrap(),
        enc_vocab: enc,
        dec_vocab: dec,
        optimizer: None,
        state: TrainState {
            epoch: 0,
            best_val_loss: None,
            rng: None,
        },
    }
}

#[test]
fn checkpoint_without_optimizer_round_trips() {
    let ck = small_checkpoint();
    let bytes = checkpoint::to_bytes(&ck);
    let back = checkpoint::from_bytes(Path::new("x.ckpt"), &bytes).unwrap();
    assert_eq!(back, ck);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let bytes = checkpoint::to_bytes(&small_checkpoint());
    let p = Path::new("x.ckpt");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut trailing = bytes.clone();
    trailing.push(0);
    for (what, buf) in [
        ("magic", bad_magic),
        ("trailing", trailing),
        ("header only", bytes[..8].to_vec()),
        ("empty", Vec::new()),
        ("half", bytes[..bytes.len() / 2].to_vec()),
    ] {
        match checkpoint::from_bytes(p, &buf) {
            Err(e @ Error::Format { .. }) => assert_eq!(e.exit_code(), 2, "{what}"),
            other => panic!("{what}: {other:?}"),
        }
    }
}

#[test]
fn missing_checkpoint_is_io_error() {
    let err = checkpoint::load(Path::new("/nonexistent/last.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

fn name() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z ,'\\-]{0,12}"
}

fn record() -> impl Strategy<Value = PatientRecord> {
    (
        0i64..110,
        any::<bool>(),
        prop::collection::vec("E_[0-9]{1,3}(_@_V_[0-9]{1,2})?", 1..6),
        prop::collection::vec((name(), 0.0f64..1.0), 1..5),
    )
        .prop_map(|(age, male, evidences, ddx)| {
            let pathology = ddx[0].0.clone();
            let case = Case {
                age,
                sex: if male { Sex::M } else { Sex::F },
                initial_evidence: evidences[0].clone(),
                evidences,
            };
            PatientRecord::new(case, ddx, pathology).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_round_trip_through_csv(recs in prop::collection::vec(record(), 0..6)) {
        let mut buf = Vec::new();
        records::write_records_to(Path::new("mem.csv"), &mut buf, &recs).unwrap();
        let back = records::parse_reader(Path::new("mem.csv"), buf.as_slice(), OnError::Fail).unwrap();
        prop_assert_eq!(back.records, recs);
        prop_assert!(back.skipped.is_empty());
    }
}

#[test]
fn report_files_have_expected_shape() {
    let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let gold = vec![vec![0, 1], vec![2], vec![1, 0, 2]];
    let pred = vec![vec![0, 2], vec![2, 1], vec![1]];
    let r = evaluate(names, &gold, &pred, &[0, 2, 1], &[0, 2, 0], "test").unwrap();
    let dir = tempfile::tempdir().unwrap();
    report::emit(dir.path(), &r).unwrap();

    let per_class: Vec<csv::StringRecord> = csv::Reader::from_path(dir.path().join(report::PER_CLASS_CSV))
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect();
    assert_eq!(per_class.len(), 4);
    assert_eq!(&per_class[3][0], "Mean");

    let confusion: Vec<csv::StringRecord> = csv::Reader::from_path(dir.path().join(report::CONFUSION_CSV))
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect();
    assert_eq!(confusion.len(), 3);
    let cells: u64 = confusion
        .iter()
        .flat_map(|row| row.iter().skip(1).map(|c| c.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(cells, r.confusion.matched());

    let back = report::read_json(&dir.path().join(report::REPORT_JSON)).unwrap();
    assert_eq!(back, r);
    assert!(report::summary_line(&r).starts_with("GTPA@1 "));
}
