//! A reduced-budget pass over every stage that writes its artifacts to disk.

use std::path::Path;

use c3forge::ar::{Condition, Task};
use c3forge::eval::config_hash;
use c3forge::pipeline::{
    audio_report, caption_report, clip_tokens, generate_for_eval, train_ar_stage, train_codec_stage,
    train_contrastive_stage, train_nar_stage, Checkpoints, EvalConfig, Generator, PipelineConfig,
};
use c3forge::synth::{Corpus, SplitRatios};
use c3forge::transformer::TransformerConfig;

pub fn config(seed: u64) -> (PipelineConfig, EvalConfig) {
    let mut cfg = PipelineConfig::default().seeded(seed);
    cfg.codec_train.epochs = 1;
    cfg.codec_train.kmeans_rows = 2000;
    cfg.contrastive.epochs = 2;
    cfg.classifier.steps = 30;
    let small = TransformerConfig {
        layers: 1,
        d_emb: 64,
        ffn: 128,
        ..TransformerConfig::default()
    };
    cfg.ar.transformer = small.clone();
    cfg.nar.transformer = small;
    cfg.ar_train.steps = 20;
    cfg.ar_train.warmup = 5;
    cfg.nar_train.steps = 20;
    cfg.nar_train.warmup = 5;
    let ecfg = EvalConfig {
        audio_items: 4,
        caption_items: 6,
        max_tokens: 40,
        seed,
        ..EvalConfig::default()
    };
    (cfg, ecfg)
}

/// Trains, generates and evaluates into `dir`; returns the written files
/// in a fixed order.
pub fn run(dir: &Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    let (cfg, ecfg) = config(seed);
    let corpus = Corpus::generate(seed, 100, SplitRatios::default()).unwrap();
    let ck = Checkpoints::new(dir);
    let (codec, _) = train_codec_stage(&cfg, &corpus.train, &corpus.val).unwrap();
    codec.save(&ck.codec()).unwrap();
    let (clap, _, clf) = train_contrastive_stage(&cfg, &corpus.train).unwrap();
    clap.save(&ck.contrastive()).unwrap();
    clf.save(&ck.classifier()).unwrap();
    let tokens: Vec<_> = corpus.train.iter().map(|e| clip_tokens(&codec, &e.audio).unwrap()).collect();
    let (ar, _) = train_ar_stage(&cfg, &corpus.train, &tokens, &clap).unwrap();
    ar.save(&ck.ar()).unwrap();
    let (nar, _) = train_nar_stage(&cfg, &corpus.train, &tokens).unwrap();
    nar.save(&ck.nar()).unwrap();

    let gen = Generator::load(&ck).unwrap();
    let g = gen
        .generate_audio(&Condition::Text(corpus.test[0].caption.clone()), &ecfg.sampler, ecfg.max_tokens, seed)
        .unwrap();
    std::fs::write(dir.join("tokens.json"), g.tokens.to_json().unwrap()).unwrap();
    g.audio.write_wav(&dir.join("t2a.wav")).unwrap();
    let hash = config_hash(&(&cfg, &ecfg)).unwrap();
    let run = generate_for_eval(&gen, &corpus.test, Task::V2A, &ecfg).unwrap();
    audio_report(&gen, &clf, &run, &ecfg, &hash).unwrap().write(&dir.join("v2a.json")).unwrap();
    caption_report(&gen, &corpus.train, &corpus.test, &ecfg, &hash)
        .unwrap()
        .write(&dir.join("a2t.json"))
        .unwrap();

    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), std::fs::read(dir.join(&n)).unwrap())).collect()
}
