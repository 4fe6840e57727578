use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use c3forge::ar::{Condition, Sampler, Task};
use c3forge::audio::{mel_spectrogram, AcousticTokens, Codec, Waveform};
use c3forge::conditioning::{extract_video_features, VideoFrames};
use c3forge::eval::{config_hash, KindClassifier};
use c3forge::pipeline::{
    audio_report, caption_report, clip_tokens, generate_for_eval, manifest_files, train_ar_stage, train_codec_stage,
    train_contrastive_stage, train_nar_stage, Checkpoints, ClipTokens, Generator, RunConfig, RunRecord,
};
use c3forge::synth::{build_corpus, Corpus, Split};
use c3forge::{Error, Result};

#[derive(Parser)]
#[command(name = "c3forge", version, about = "Train and run the text/video/audio token pipeline")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Opts {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    ckpt_dir: Option<PathBuf>,
    /// Corpus directory (default: <workspace>/corpus).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    #[arg(long, global = true, value_enum)]
    sampler: Option<SamplerKind>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    #[arg(long, global = true)]
    temp: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKind {
    Greedy,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Codec,
    Clap,
    Ar,
    Nar,
}

#[derive(Clone, Copy, ValueEnum)]
enum AudioTask {
    T2a,
    V2a,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic corpus management.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Train one stage; earlier stages must already have checkpoints.
    Train {
        #[arg(value_enum)]
        stage: Stage,
    },
    /// Generate audio from a caption or a video.
    Generate {
        #[arg(value_enum)]
        task: AudioTask,
        #[arg(long)]
        text: Option<String>,
        /// Video frames JSON.
        #[arg(long)]
        video: Option<PathBuf>,
    },
    /// Caption a WAV file.
    Caption { audio: PathBuf },
    /// WAV to token JSON (stdout unless --out).
    Encode { input: PathBuf },
    /// Token JSON (file or stdin) to WAV.
    Decode { input: Option<PathBuf> },
    /// Metric report for a task on a corpus split.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Log-mel spectrogram as CSV, or PGM when --out ends in .pgm.
    DumpMel { input: PathBuf },
}

#[derive(Subcommand)]
enum CorpusCmd {
    Build {
        /// Number of examples (default from config).
        #[arg(long)]
        n: Option<usize>,
    },
}

struct Ctx {
    argv: Vec<String>,
    config: RunConfig,
    seed: u64,
    workspace: PathBuf,
    corpus: PathBuf,
    ck: Checkpoints,
    out: Option<PathBuf>,
    sampler: Sampler,
    max_tokens: usize,
}

impl Ctx {
    fn new(opts: &Opts) -> Result<Self> {
        let mut config = match &opts.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = opts.seed {
            config = config.with_seed(s);
        }
        let seed = config.pipeline.seed;
        let workspace = std::env::var_os("C3_FORGE_DIR").map_or_else(|| PathBuf::from("c3forge-work"), PathBuf::from);
        let corpus = opts.corpus.clone().unwrap_or_else(|| workspace.join("corpus"));
        let ck = Checkpoints::new(opts.ckpt_dir.clone().unwrap_or_else(|| workspace.join("checkpoints")));
        let mut sampler = config.eval.sampler.clone();
        match opts.sampler {
            Some(SamplerKind::Greedy) => sampler = Sampler::Greedy,
            Some(SamplerKind::Topk) if matches!(sampler, Sampler::Greedy) => sampler = Sampler::default(),
            _ => {}
        }
        if let Sampler::TopK { k, temperature } = &mut sampler {
            if let Some(v) = opts.topk {
                *k = v;
            }
            if let Some(v) = opts.temp {
                *temperature = v;
            }
        } else if opts.topk.is_some() || opts.temp.is_some() {
            return Err(Error::InvalidArgument("--topk and --temp need --sampler topk".into()));
        }
        config.eval.sampler = sampler.clone();
        if let Some(m) = opts.max_tokens {
            config.eval.max_tokens = m;
        }
        Ok(Self {
            argv: std::env::args().skip(1).collect(),
            max_tokens: config.eval.max_tokens,
            config,
            seed,
            workspace,
            corpus,
            ck,
            out: opts.out.clone(),
            sampler,
        })
    }

    fn record(&self, name: &str, inputs: &[PathBuf]) -> Result<()> {
        let rec = RunRecord::new(self.argv.clone(), &self.config, self.seed, inputs)?;
        let tag = hex::encode(&Sha256::digest(self.argv.join("\0").as_bytes())[..6]);
        rec.write(&self.workspace.join("runs").join(format!("{name}-{tag}.json")))
    }

    fn require(&self, paths: &[PathBuf]) -> Result<()> {
        paths.iter().try_for_each(|p| Checkpoints::require(p))
    }

    /// Writes to `--out`, or to stdout when it is not given.
    fn emit(&self, bytes: &[u8]) -> Result<()> {
        match &self.out {
            Some(p) => write_file(p, bytes),
            None => {
                std::io::stdout().write_all(bytes)?;
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn train_tokens(codec: &Codec, corpus: &Corpus) -> Result<Vec<ClipTokens>> {
    corpus.train.iter().map(|e| clip_tokens(codec, &e.audio)).collect()
}

fn train(ctx: &Ctx, stage: Stage) -> Result<()> {
    let cfg = &ctx.config.pipeline;
    let ck = &ctx.ck;
    std::fs::create_dir_all(&ck.dir)?;
    let mut inputs = manifest_files(&ctx.corpus);
    let name = match stage {
        Stage::Codec => {
            let corpus = Corpus::load(&ctx.corpus)?;
            let (codec, report) = train_codec_stage(cfg, &corpus.train, &corpus.val)?;
            log::info!("held-out codec loss {:.4} -> {:.4}", report.heldout_initial, report.heldout_final);
            codec.save(&ck.codec())?;
            "train-codec"
        }
        Stage::Clap => {
            let corpus = Corpus::load(&ctx.corpus)?;
            let (clap, _, clf) = train_contrastive_stage(cfg, &corpus.train)?;
            clap.save(&ck.contrastive())?;
            clf.save(&ck.classifier())?;
            "train-clap"
        }
        Stage::Ar => {
            ctx.require(&[ck.codec(), ck.contrastive()])?;
            inputs.extend([ck.codec(), ck.contrastive()]);
            let codec = Codec::load(&ck.codec())?;
            let clap = c3forge::conditioning::ContrastiveModel::load(&ck.contrastive())?;
            let corpus = Corpus::load(&ctx.corpus)?;
            let (ar, _) = train_ar_stage(cfg, &corpus.train, &train_tokens(&codec, &corpus)?, &clap)?;
            ar.save(&ck.ar())?;
            "train-ar"
        }
        Stage::Nar => {
            ctx.require(&[ck.codec()])?;
            inputs.push(ck.codec());
            let codec = Codec::load(&ck.codec())?;
            let corpus = Corpus::load(&ctx.corpus)?;
            let (nar, _) = train_nar_stage(cfg, &corpus.train, &train_tokens(&codec, &corpus)?)?;
            nar.save(&ck.nar())?;
            "train-nar"
        }
    };
    ctx.record(name, &inputs)
}

fn generator_inputs(ck: &Checkpoints) -> Vec<PathBuf> {
    vec![ck.codec(), ck.contrastive(), ck.ar(), ck.nar()]
}

fn generate(ctx: &Ctx, task: AudioTask, text: Option<String>, video: Option<PathBuf>) -> Result<()> {
    let mut inputs = generator_inputs(&ctx.ck);
    let cond = match (task, text, video) {
        (AudioTask::T2a, Some(t), None) => Condition::Text(t),
        (AudioTask::V2a, None, Some(v)) => {
            inputs.push(v.clone());
            Condition::Video(extract_video_features(&VideoFrames::read(&v)?)?)
        }
        (AudioTask::T2a, ..) => return Err(Error::InvalidArgument("t2a takes --text only".into())),
        (AudioTask::V2a, ..) => return Err(Error::InvalidArgument("v2a takes --video only".into())),
    };
    let gen = Generator::load(&ctx.ck)?;
    let out = ctx.out.clone().unwrap_or_else(|| PathBuf::from("out.wav"));
    let g = gen.generate_audio(&cond, &ctx.sampler, ctx.max_tokens, ctx.seed)?;
    g.audio.write_wav(&out)?;
    let sidecar = serde_json::json!({
        "tokens": g.tokens,
        "ids": g.generation.ids,
        "eos": g.generation.eos,
        "truncated": g.generation.truncated,
        "sampler": ctx.sampler,
        "seed": ctx.seed,
    });
    write_file(&out.with_extension("tokens.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    ctx.record("generate", &inputs)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.opts)?;
    match cli.cmd {
        Cmd::Corpus {
            action: CorpusCmd::Build { n },
        } => {
            let c = &ctx.config.corpus;
            let dir = ctx.out.clone().unwrap_or_else(|| ctx.corpus.clone());
            build_corpus(&dir, c.seed, n.unwrap_or(c.size), c.ratios)?;
            ctx.record("corpus-build", &manifest_files(&dir))
        }
        Cmd::Train { stage } => train(&ctx, stage),
        Cmd::Generate { task, text, video } => generate(&ctx, task, text, video),
        Cmd::Caption { audio } => {
            let gen = Generator::load(&ctx.ck)?;
            let caption = gen.caption(&Waveform::read_wav(&audio)?, ctx.max_tokens)?;
            ctx.emit(format!("{caption}\n").as_bytes())?;
            let mut inputs = generator_inputs(&ctx.ck);
            inputs.push(audio);
            ctx.record("caption", &inputs)
        }
        Cmd::Encode { input } => {
            ctx.require(&[ctx.ck.codec()])?;
            let codec = Codec::load(&ctx.ck.codec())?;
            let tokens = codec.tokenize(&Waveform::read_wav(&input)?)?;
            ctx.emit(serde_json::to_string(&tokens)?.as_bytes())?;
            ctx.record("encode", &[ctx.ck.codec(), input])
        }
        Cmd::Decode { input } => {
            ctx.require(&[ctx.ck.codec()])?;
            let codec = Codec::load(&ctx.ck.codec())?;
            let mut text = String::new();
            let mut inputs = vec![ctx.ck.codec()];
            match &input {
                Some(p) if p.as_os_str() != "-" => {
                    text = std::fs::read_to_string(p)?;
                    inputs.push(p.clone());
                }
                _ => {
                    std::io::stdin().read_to_string(&mut text)?;
                }
            }
            let tokens: AcousticTokens = serde_json::from_str(&text)?;
            let out = ctx.out.clone().unwrap_or_else(|| PathBuf::from("decoded.wav"));
            codec.detokenize(&tokens)?.write_wav(&out)?;
            ctx.record("decode", &inputs)
        }
        Cmd::Eval { task, split } => {
            let gen = Generator::load(&ctx.ck)?;
            ctx.require(&[ctx.ck.classifier()])?;
            let corpus = Corpus::load(&ctx.corpus)?;
            let hash = config_hash(&ctx.config)?;
            let cfg = &ctx.config.eval;
            let report = match task {
                Task::A2T => caption_report(&gen, &corpus.train, corpus.split(split), cfg, &hash)?,
                _ => {
                    let clf = KindClassifier::load(&ctx.ck.classifier())?;
                    let run = generate_for_eval(&gen, corpus.split(split), task, cfg)?;
                    audio_report(&gen, &clf, &run, cfg, &hash)?
                }
            };
            ctx.emit(format!("{}\n", report.to_json()?).as_bytes())?;
            let mut inputs = manifest_files(&ctx.corpus);
            inputs.extend(generator_inputs(&ctx.ck));
            inputs.push(ctx.ck.classifier());
            ctx.record("eval", &inputs)
        }
        Cmd::DumpMel { input } => {
            let mel = mel_spectrogram(&Waveform::read_wav(&input)?, 512, 160, 64)?;
            let pgm = ctx.out.as_ref().is_some_and(|p| p.extension().is_some_and(|e| e == "pgm"));
            ctx.emit(&if pgm { mel.to_pgm() } else { mel.to_csv().into_bytes() })?;
            ctx.record("dump-mel", &[input])
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::MissingCheckpoint(_) => 3,
                Error::InvalidArgument(_) => 2,
                _ => 1,
            })
        }
    }
}
