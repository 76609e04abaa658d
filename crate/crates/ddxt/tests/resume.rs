use std::fs;
use std::path::Path;

use ddxt::commands::{self, LAST_CKPT};
use ddxt::config::{Layer, RunConfig};
use ddxt_core::dataset::SyntheticConfig;

fn run_config(root: &Path, ckpt_dir: &str, epochs: u32) -> RunConfig {
    let mut f = Layer::default();
    f.model.d_model = Some(16);
    f.model.n_heads = Some(2);
    f.model.n_enc_layers = Some(1);
    f.model.n_dec_layers = Some(1);
    f.model.max_enc_len = Some(32);
    f.model.max_dec_len = Some(12);
    f.train.epochs = Some(epochs);
    f.train.batch_size = Some(16);
    f.train.seed = Some(1);
    f.paths.train = Some(root.join("data/train.csv"));
    f.paths.val = Some(root.join("data/val.csv"));
    f.paths.vocab_dir = Some(root.join("vocab"));
    f.paths.checkpoint_dir = Some(root.join(ckpt_dir));
    RunConfig::resolve(None, &f).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    commands::gen_data(
        &root.join("data"),
        &SyntheticConfig {
            n_records: 60,
            ..Default::default()
        },
        (0.8, 0.1, 0.1),
    )
    .unwrap();
    commands::build_vocab(&[root.join("data/train.csv"), root.join("data/val.csv")], &root.join("vocab")).unwrap();

    let sink = &mut std::io::sink();
    let full = commands::train(&run_config(root, "full", 3), false, sink).unwrap();
    assert_eq!(full.epochs_run, 3);

    let first = commands::train(&run_config(root, "split", 2), false, sink).unwrap();
    assert_eq!(first.epochs_run, 2);
    let second = commands::train(&run_config(root, "split", 3), true, sink).unwrap();
    assert_eq!(second.epochs_run, 1);
    assert_eq!(second.log[0].epoch, 3);

    let a = fs::read(root.join("full").join(LAST_CKPT)).unwrap();
    let b = fs::read(root.join("split").join(LAST_CKPT)).unwrap();
    assert!(a == b, "resumed checkpoint differs from uninterrupted one");
}

#[test]
fn resume_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    commands::gen_data(&root.join("data"), &SyntheticConfig { n_records: 30, ..Default::default() }, (0.8, 0.1, 0.1))
        .unwrap();
    commands::build_vocab(&[root.join("data/train.csv")], &root.join("vocab")).unwrap();
    let err = commands::train(&run_config(root, "none", 1), true, &mut std::io::sink()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
