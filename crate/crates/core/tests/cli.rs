mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use smdt::cli::{load_artifacts, run, synthetic_layout, RunConfig};
use smdt::layout::build_mask_set;
use smdt::model::Model;

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

fn smdt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_smdt")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn score_identical_files_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    std::fs::write(&h, "le chat noir dort ici\nun chien\n").unwrap();
    let out = smdt(&["score", "--hyp", s(&h), "--ref", s(&h)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["bleu"], 100.0);
    assert_eq!(report["tokenization"], "whitespace");
}

#[test]
fn exit_codes() {
    assert_eq!(run(["smdt", "train"]), 1);
    assert_eq!(run(["smdt", "frobnicate"]), 1);
    assert_eq!(run(["smdt", "score", "--hyp", "x"]), 1);
    assert_eq!(run(["smdt", "train", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("c.json");
    std::fs::write(&bad, r#"{"lr": 1, "lr": 2}"#).unwrap();
    assert_eq!(run(["smdt", "prepare", "--config", s(&bad), "--out", s(dir.path())]), 1);
    let (h, r) = (dir.path().join("h"), dir.path().join("r"));
    std::fs::write(&h, "a\nb\n").unwrap();
    std::fs::write(&r, "a\n").unwrap();
    assert_eq!(run(["smdt", "score", "--hyp", s(&h), "--ref", s(&r)]), 2);
    assert_eq!(run(["smdt", "score", "--hyp", s(&h), "--ref", s(&dir.path().join("missing"))]), 2);
}

#[test]
fn dump_masks_matches_the_oracle() {
    let out = smdt(&["dump-masks", "--doc-sentences", "2,3", "--tm-lengths", "1:1,2:2", "--window", "1", "--grid"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let layout = synthetic_layout("2,3", "1:1,2:2").unwrap();
    let set = build_mask_set(&layout, 1).unwrap();
    let families = json["masks"].as_array().unwrap();
    assert_eq!(families.len(), common::FAMILIES.len());
    for (f, (name, mask)) in families.iter().zip(set.named()) {
        assert_eq!(f["name"], name);
        let rows = f["rows"].as_array().unwrap();
        for (q, ranges) in rows.iter().enumerate() {
            let mut allowed = vec![false; mask.cols()];
            for r in ranges.as_array().unwrap() {
                for k in r[0].as_u64().unwrap()..r[1].as_u64().unwrap() {
                    allowed[k as usize] = true;
                }
            }
            for (k, &a) in allowed.iter().enumerate() {
                let want = if name.starts_with("enc") {
                    common::encoder_allowed(name, &layout.tags, 1, q, k)
                } else {
                    common::decoder_allowed(name, &layout.tags, &set.decoder.lengths, q, k)
                };
                assert_eq!(a, want, "{name}[{q},{k}]");
            }
        }
        assert!(f["grid"].as_str().unwrap().contains('#'));
    }
    assert_eq!(smdt(&["dump-masks", "--doc-sentences", "2", "--tm-lengths", "1:1,1:1"]).status.code(), Some(1));
}

#[test]
fn vocab_and_index_commands() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.json");
    let index = dir.path().join("index.bin");
    let t = toy();
    let (src, tgt, docs) = (t.join("train.src"), t.join("train.tgt"), t.join("train.docs"));
    let out = smdt(&["build-vocab", "--src", s(&src), "--tgt", s(&tgt), "--merges", "40", "--out", s(&vocab)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = smdt(&[
        "build-index", "--src", s(&src), "--tgt", s(&tgt), "--doc-map", s(&docs), "--vocab", s(&vocab), "--out", s(&index),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let a = load_artifacts(&vocab, &index).unwrap();
    assert_eq!(a.vocab.merges().len(), 40);
    assert_eq!(a.index.len(), 114);
    let mut bytes = std::fs::read(&index).unwrap();
    bytes[8] = 99;
    std::fs::write(&index, bytes).unwrap();
    let err = load_artifacts(&vocab, &index).unwrap_err();
    assert!(matches!(err, smdt::SmdtError::VersionMismatch { .. }), "{err}");
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let prep = dir.path().join("prep");
    let model_dir = dir.path().join("model");
    let config = toy().join("config.json");
    let out = smdt(&["prepare", "--config", s(&config), "--out", s(&prep)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let effective = prep.join("config.json");
    let loaded: RunConfig = smdt::cli::load_config(&effective).unwrap();
    assert!(loaded.vocab.is_some() && loaded.vocab_size.is_some());

    let out = smdt(&["train", "--config", s(&effective), "--out", s(&model_dir), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(model_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let ckpt = model_dir.join("model.ckpt");
    let model = Model::load(&ckpt).unwrap();
    assert_eq!(model.config().d_model, 32);

    let hyp = dir.path().join("test.hyp");
    let t = toy();
    let out = smdt(&[
        "translate", "--config", s(&effective), "--checkpoint", s(&ckpt), "--src", s(&t.join("test.src")),
        "--doc-map", s(&t.join("test.docs")), "--beam", "2", "--out", s(&hyp),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = std::fs::read_to_string(&hyp).unwrap();
    assert_eq!(lines.lines().count(), 17);
    let out = smdt(&["score", "--hyp", s(&hyp), "--ref", s(&t.join("test.tgt")), "--smooth"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["bleu"].as_f64().unwrap() >= 0.0);
}
