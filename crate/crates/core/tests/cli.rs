use std::path::Path;
use std::process::{Command, Output};

use c3forge::pipeline::RunConfig;
use c3forge::transformer::TransformerConfig;

fn c3(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3forge"))
        .args(args)
        .env("C3_FORGE_DIR", ws)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(path: &Path) {
    let mut cfg = RunConfig::default();
    cfg.corpus.size = 40;
    let p = &mut cfg.pipeline;
    p.codec_train.epochs = 1;
    p.codec_train.kmeans_rows = 2000;
    p.contrastive.epochs = 2;
    p.classifier.steps = 20;
    let small = TransformerConfig {
        layers: 1,
        d_emb: 32,
        ffn: 64,
        ..TransformerConfig::default()
    };
    p.ar.transformer = small.clone();
    p.nar.transformer = small;
    p.ar_train.steps = 10;
    p.ar_train.warmup = 2;
    p.nar_train.steps = 10;
    p.nar_train.warmup = 2;
    cfg.eval.audio_items = 2;
    cfg.eval.caption_items = 3;
    cfg.eval.max_tokens = 30;
    std::fs::write(path, serde_json::to_string(&cfg).unwrap()).unwrap();
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let ws = tempfile::tempdir().unwrap();
    let out = c3(ws.path(), &["generate", "t2a", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_checkpoints_exit_3() {
    let ws = tempfile::tempdir().unwrap();
    let out = c3(ws.path(), &["generate", "t2a", "--text", "a steady tone plays"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // the AR stage refuses to start before the codec exists
    let out = c3(ws.path(), &["train", "ar"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn conflicting_sampler_flags_are_rejected() {
    let ws = tempfile::tempdir().unwrap();
    let out = c3(ws.path(), &["generate", "t2a", "--text", "x", "--sampler", "greedy", "--topk", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn staged_flow_end_to_end() {
    let ws = tempfile::tempdir().unwrap();
    let w = ws.path();
    let cfg = w.join("run.json");
    tiny_config(&cfg);
    let cfg = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let out = c3(w, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["corpus", "build", "--config", cfg]);
    assert!(w.join("corpus/manifest_train.jsonl").exists());
    for stage in ["codec", "clap", "ar", "nar"] {
        ok(&["train", stage, "--config", cfg]);
    }
    for f in ["codec.c3f", "clap.c3f", "classifier.c3f", "ar.c3f", "nar.c3f"] {
        assert!(w.join("checkpoints").join(f).exists(), "{f}");
    }

    let gen = |name: &str| {
        let out = w.join(name);
        ok(&["generate", "t2a", "--config", cfg, "--text", "a steady tone plays", "--seed", "7", "--out", out.to_str().unwrap()]);
        (std::fs::read(&out).unwrap(), std::fs::read(out.with_extension("tokens.json")).unwrap())
    };
    let (wav_a, tok_a) = gen("a.wav");
    let (wav_b, tok_b) = gen("b.wav");
    assert_eq!(wav_a, wav_b);
    assert_eq!(tok_a, tok_b);
    let side: serde_json::Value = serde_json::from_slice(&tok_a).unwrap();
    assert_eq!(side["tokens"]["layers"].as_array().unwrap().len(), 2);

    let clip = w.join("corpus/wav");
    let clip = std::fs::read_dir(&clip).unwrap().next().unwrap().unwrap().path();
    let enc = ok(&["encode", clip.to_str().unwrap()]);
    let dec_path = w.join("decoded.wav");
    let mut child = Command::new(env!("CARGO_BIN_EXE_c3forge"))
        .args(["decode", "--out", dec_path.to_str().unwrap()])
        .env("C3_FORGE_DIR", w)
        .stdin(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(&enc.stdout).unwrap();
    assert!(child.wait().unwrap().success());
    let orig = c3forge::audio::Waveform::read_wav(&clip).unwrap();
    let back = c3forge::audio::Waveform::read_wav(&dec_path).unwrap();
    assert_eq!(orig.len(), back.len());

    let report = ok(&["eval", "--config", cfg, "--task", "v2a", "--split", "train"]);
    let r: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    for k in ["onset_count_accuracy", "onset_ap", "fed", "class_kl"] {
        assert!(r["metrics"][k].is_number(), "{k}");
    }
    let cap = ok(&["caption", clip.to_str().unwrap(), "--config", cfg]);
    assert!(cap.stdout.ends_with(b"\n"));
    let mel = ok(&["dump-mel", clip.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&mel.stdout).lines().count() > 10);

    let runs: Vec<_> = std::fs::read_dir(w.join("runs")).unwrap().collect();
    assert!(runs.len() >= 9);
    let rec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(runs[0].as_ref().unwrap().path()).unwrap()).unwrap();
    assert_eq!(rec["input_hash"].as_str().unwrap().len(), 64);
}
