//! The full staged pipeline at acceptance scale, built once per test binary.

use std::sync::OnceLock;
use std::time::Instant;

use c3forge::ar::Task;
use c3forge::eval::{config_hash, KindClassifier, MetricReport};
use c3forge::nar::NARExample;
use c3forge::pipeline::{
    audio_report, caption_report, clip_tokens, generate_for_eval, nar_examples, train_ar_stage, train_codec_stage,
    train_contrastive_stage, train_nar_stage, EvalConfig, Generator, PipelineConfig,
};
use c3forge::synth::{Corpus, SplitRatios};

pub const SEED: u64 = 7;
pub const CORPUS: usize = 1250;

pub struct E2E {
    pub corpus: Corpus,
    pub gen: Generator,
    pub clf: KindClassifier,
    pub t2a: MetricReport,
    pub v2a: MetricReport,
    pub a2t: MetricReport,
    /// Layer-2 accuracy on held-out clips given their true layer-1 tokens.
    pub nar_heldout_accuracy: f32,
    pub train_secs: f64,
    pub total_secs: f64,
}

pub fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().seeded(SEED);
    cfg.codec_train.epochs = 10;
    cfg.ar_train.steps = 3000;
    cfg.nar_train.steps = 1500;
    cfg
}

pub fn eval_config() -> EvalConfig {
    EvalConfig {
        seed: SEED,
        ..EvalConfig::default()
    }
}

fn build() -> E2E {
    let start = Instant::now();
    let cfg = config();
    let corpus = Corpus::generate(SEED, CORPUS, SplitRatios::default()).unwrap();
    let (codec, _) = train_codec_stage(&cfg, &corpus.train, &corpus.val).unwrap();
    let (clap, _, clf) = train_contrastive_stage(&cfg, &corpus.train).unwrap();
    let tokens: Vec<_> = corpus.train.iter().map(|e| clip_tokens(&codec, &e.audio).unwrap()).collect();
    let (ar, _) = train_ar_stage(&cfg, &corpus.train, &tokens, &clap).unwrap();
    let (nar, _) = train_nar_stage(&cfg, &corpus.train, &tokens).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let held: Vec<NARExample> = corpus
        .test
        .iter()
        .flat_map(|e| nar_examples(e, &clip_tokens(&codec, &e.audio).unwrap()).unwrap())
        .collect();
    let nar_heldout_accuracy = nar.accuracy(&held).unwrap();
    let gen = Generator { codec, clap, ar, nar };
    let ecfg = eval_config();
    let hash = config_hash(&(&cfg, &ecfg)).unwrap();
    let run = generate_for_eval(&gen, &corpus.test, Task::T2A, &ecfg).unwrap();
    let t2a = audio_report(&gen, &clf, &run, &ecfg, &hash).unwrap();
    let run = generate_for_eval(&gen, &corpus.test, Task::V2A, &ecfg).unwrap();
    let v2a = audio_report(&gen, &clf, &run, &ecfg, &hash).unwrap();
    let a2t = caption_report(&gen, &corpus.train, &corpus.test, &ecfg, &hash).unwrap();
    E2E {
        corpus,
        gen,
        clf,
        t2a,
        v2a,
        a2t,
        nar_heldout_accuracy,
        train_secs,
        total_secs: start.elapsed().as_secs_f64(),
    }
}

pub fn shared() -> &'static E2E {
    static CELL: OnceLock<E2E> = OnceLock::new();
    CELL.get_or_init(build)
}
