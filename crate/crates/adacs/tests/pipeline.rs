//! End-to-end pipeline and CLI contract tests at toy scale: generate data,
//! train a few steps, round-trip the checkpoint, evaluate, sweep, normalize.

use std::io::Write;
use std::process::{Command, Stdio};

use adacs::data::{build_splits, read_jsonl, write_jsonl, GenConfig, SplitConfig};
use adacs::eval::{bias_size_sweep, run_experiment, sweep_csv, BiasMode, ExperimentConfig};
use adacs::model::{fit, AdaCsModel, ModelConfig, TrainConfig};
use adacs::text::Vocabulary;
use adacs::BiasEntry;

fn toy_split_config() -> SplitConfig {
    SplitConfig {
        train_pairs: 30,
        test_pairs: 10,
        general_visible: 40,
        general_test_only: 40,
        medical_test_only: 40,
        carriers: 40,
        gen: GenConfig {
            easy_carrier_words: (3, 6),
            hard_carrier_words: (4, 8),
            ..GenConfig::default()
        },
        ..SplitConfig::default()
    }
}

#[test]
fn api_pipeline_round_trip() {
    let set = build_splits(&toy_split_config(), 1).unwrap();
    let corpus: Vec<&str> = set
        .train
        .iter()
        .flat_map(|p| [p.spoken.as_str(), p.reference.as_str()])
        .collect();
    let vocab = Vocabulary::build(&corpus).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        vocab_size: vocab.size(),
        max_seq_len: 256,
        max_decode_len: 64,
        seed: 2,
    };
    let mut model = AdaCsModel::<f32>::new(cfg).unwrap();
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        bank_size: 16,
        lr: 1e-3,
        seed: 2,
        max_steps: Some(4),
        time_budget: None,
    };
    let lexicon = set.lexicon_general.train_visible();
    fit(&mut model, &set.train, &vocab, &lexicon, &train_cfg, |_| {}).unwrap();

    // checkpoint round trip drives the same bytes
    let bytes = model.save_checkpoint(&vocab);
    let (loaded, vocab2) = AdaCsModel::<f32>::load_checkpoint(&bytes).unwrap();
    assert_eq!(bytes, loaded.save_checkpoint(&vocab2));

    // dataset file round trip
    let jsonl = write_jsonl(&set.test_general);
    let parsed = read_jsonl(&jsonl).unwrap();
    assert_eq!(parsed, set.test_general);

    // experiments run in all three modes on the loaded model
    for mode in [BiasMode::None, BiasMode::Words, BiasMode::Phrases] {
        let report = run_experiment(
            &loaded,
            &vocab2,
            &set.test_general,
            &ExperimentConfig::new(mode, 12, 3),
        )
        .unwrap();
        assert_eq!(report.config.bias_mode, mode.as_str());
        assert_eq!(report.overall.ref_words > 0, true);
    }

    // sweep emits one row per size
    let rows = bias_size_sweep(
        &loaded,
        &vocab2,
        &set.test_general,
        BiasMode::Words,
        &[5, 12],
        3,
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert!(sweep_csv(&rows).lines().count() == 3);

    // normalize accepts a bias list and returns a string for any sentence
    let entries: Vec<BiasEntry> = set.lexicon_general.test_only()[..4]
        .iter()
        .map(|p| BiasEntry::new(p, &vocab2))
        .collect();
    let bank = loaded.freeze_bank(&entries).unwrap();
    let out = loaded
        .normalize(&set.test_general[0].spoken, &vocab2, &bank)
        .unwrap();
    assert!(!out.output.is_empty());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adacs"))
}

#[test]
fn cli_unknown_subcommand_exits_2() {
    let out = cli().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = cli().args(["eval", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_runtime_failure_exits_1() {
    let out = cli()
        .args(["eval", "--ckpt", "/nonexistent.bin", "--data", "/nonexistent.jsonl", "--mode", "none"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn cli_full_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "model": {"d_model": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1,
                       "max_seq_len": 256, "max_decode_len": 64},
            "train": {"epochs": 1, "batch_size": 8, "bank_size": 16, "lr": 0.001,
                       "seed": 1, "max_steps": 3},
            "data": {"train_pairs": 24, "test_pairs": 8, "general_visible": 40,
                      "general_test_only": 40, "medical_test_only": 40, "carriers": 40,
                      "seen_phrase_rate": 0.02, "easy_fraction_train": 0.85,
                      "gen": {"easy_carrier_words": [3, 6], "hard_carrier_words": [4, 8],
                               "phrase_word_weights": [0.6, 0.3, 0.1], "max_spoken_chars": 460}}
        })
        .to_string(),
    )
    .unwrap();

    let out = cli()
        .args(["gen-data", "--out-dir"])
        .arg(&data_dir)
        .args(["--seed", "4", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["train_pairs"], 24);
    for f in [
        "train.jsonl",
        "test_general.jsonl",
        "test_medical.jsonl",
        "train_lexicon.json",
    ] {
        assert!(data_dir.join(f).exists(), "missing {f}");
    }

    // identical seeds produce byte-identical dataset files
    let data_dir2 = dir.path().join("data2");
    let out = cli()
        .args(["gen-data", "--out-dir"])
        .arg(&data_dir2)
        .args(["--seed", "4", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["train.jsonl", "test_general.jsonl", "test_medical.jsonl"] {
        assert_eq!(
            std::fs::read(data_dir.join(f)).unwrap(),
            std::fs::read(data_dir2.join(f)).unwrap(),
            "{f} differs between identical gen-data runs"
        );
    }

    let ckpt = dir.path().join("model.bin");
    let out = cli()
        .args(["train", "--data"])
        .arg(data_dir.join("train.jsonl"))
        .arg("--lexicon")
        .arg(data_dir.join("train_lexicon.json"))
        .arg("--out")
        .arg(&ckpt)
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());

    // eval in two modes emits the same JSON schema
    let mut schemas = Vec::new();
    for mode in ["none", "words"] {
        let out = cli()
            .args(["eval", "--ckpt"])
            .arg(&ckpt)
            .arg("--data")
            .arg(data_dir.join("test_general.jsonl"))
            .args(["--mode", mode, "--bank-size", "12", "--seed", "1"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        schemas.push(keys);
        assert_eq!(v["config"]["bias_mode"], mode);
    }
    assert_eq!(schemas[0], schemas[1], "eval JSON schemas must match across modes");

    // sweep writes one CSV row per size plus the header
    let csv_path = dir.path().join("sweep.csv");
    let out = cli()
        .args(["sweep", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(data_dir.join("test_general.jsonl"))
        .args(["--sizes", "5,9,12", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("size,cs_wer,n_wer,wer,examples_per_s\n"));
    assert_eq!(csv.lines().count(), 4, "3 rows + header:\n{csv}");

    // normalize reads stdin and prints one line per input line
    let bias_path = dir.path().join("bias.json");
    std::fs::write(&bias_path, "[\"ab\",\"cd\"]").unwrap();
    let mut child = cli()
        .args(["normalize", "--ckpt"])
        .arg(&ckpt)
        .arg("--bias")
        .arg(&bias_path)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"w1 ay bi w2\nsecond line here\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2, "one output line per input line");
}
