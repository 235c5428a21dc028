use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use styletts::audio::{griffin_lim, mel_to_linear, MelFilterbank, MelSpectrogram, StftConfig};
use styletts::config::KeyValues;
use styletts::corpus::{encode_text, gen_corpus, Corpus, Split, END_MARKER};
use styletts::model::{Model, ModelConfig};
use styletts::numerics::Rng;
use styletts::style::{
    append_stats, combine, infer_style, interpolate, probe_stats, sample_prior, set_dimension, InferMode,
    StyleVector,
};
use styletts::training::{diagnose, load_checkpoint, parse_history, train, AnnealSchedule, TrainConfig, TrainState};
use styletts::Error;

const SEED_ENV: &str = "STYLE_TTS_SEED";

#[derive(Parser)]
#[command(name = "styletts", version, about = "Style-controllable speech synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Synthesize a spectrogram from text and a style source.
    Synth(SynthArgs),
    /// Posterior-mean style vector of a reference spectrogram.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent vector arithmetic.
    #[command(subcommand)]
    Style(StyleCmd),
    /// Collapse diagnostic over a loss history.
    Diag {
        #[arg(long)]
        history: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Full,
    Desk,
    Miniature,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// key = value file with model and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total step count to reach.
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    kl_ramp_start: Option<u64>,
    #[arg(long)]
    kl_ramp_end: Option<u64>,
    #[arg(long)]
    k_before: Option<u64>,
    #[arg(long)]
    k_after: Option<u64>,
    #[arg(long)]
    k_switch: Option<u64>,
    /// Full KL weight on every step (no annealing or gating).
    #[arg(long)]
    constant_kl: bool,
    /// Print a progress line every N steps (0 for none).
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, group = "source")]
    z: Option<PathBuf>,
    #[arg(long = "ref", group = "source")]
    reference: Option<PathBuf>,
    #[arg(long, group = "source")]
    prior_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synth")]
    id: String,
    #[arg(long, default_value_t = 1000)]
    max_frames: usize,
    /// Also write a Griffin-Lim waveform.
    #[arg(long)]
    wav: bool,
    #[arg(long, default_value_t = 60)]
    gl_iters: usize,
}

#[derive(Subcommand)]
enum StyleCmd {
    /// alpha * a + (1 - alpha) * b
    Interp {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy of z with one coordinate replaced.
    Setdim {
        #[arg(long)]
        z: Option<PathBuf>,
        /// Start from a zero vector of this length instead of --z.
        #[arg(long, conflicts_with = "z")]
        zeros: Option<usize>,
        #[arg(long)]
        dim: usize,
        #[arg(long, allow_hyphen_values = true)]
        value: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Element-wise sum.
    Combine {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => 2,
        Error::NonFinite(_) | Error::Domain { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Command::GenCorpus { out, n, seed } => cmd_gen_corpus(&out, n, seed),
        Command::Train(args) => cmd_train(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Infer { ckpt, reference, out } => cmd_infer(&ckpt, &reference, &out),
        Command::Style(cmd) => cmd_style(cmd),
        Command::Diag { history } => cmd_diag(&history),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Explicit flag, then the environment, then 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn cmd_gen_corpus(out: &Path, n: usize, seed: Option<u64>) -> Outcome {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let seed = resolve_seed(seed)?;
    let corpus = gen_corpus(&Rng::new(seed), n)?;
    corpus.save(out)?;
    println!("wrote {n} utterances to {}", out.display());
    Ok(())
}

fn base_model(scale: Option<Scale>, kv: &KeyValues) -> Result<ModelConfig, Failure> {
    let scale = match (scale, kv.get("scale")) {
        (Some(s), _) => s,
        (None, Some(v)) => Scale::from_str(v, true).map_err(|_| Failure::Usage(format!("unknown scale {v:?}")))?,
        (None, None) => Scale::Desk,
    };
    Ok(match scale {
        Scale::Full => ModelConfig::full(),
        Scale::Desk => ModelConfig::desk(),
        Scale::Miniature => ModelConfig::miniature(),
    })
}

/// Config file merged with flag overrides, validated before anything runs.
fn run_config(args: &TrainArgs) -> Result<(ModelConfig, TrainConfig), Failure> {
    let mut kv = match &args.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    let known: Vec<&str> = ModelConfig::keys()
        .iter()
        .chain(TrainConfig::keys())
        .copied()
        .chain(["scale"])
        .collect();
    kv.check_known(&known)?;
    macro_rules! flag {
        ($field:ident, $key:literal) => {
            if let Some(v) = args.$field {
                kv.set($key, v);
            }
        };
    }
    flag!(batch_size, "batch_size");
    flag!(lr, "lr");
    flag!(checkpoint_every, "checkpoint_every");
    flag!(kl_ramp_start, "kl_ramp_start");
    flag!(kl_ramp_end, "kl_ramp_end");
    flag!(k_before, "k_before");
    flag!(k_after, "k_after");
    flag!(k_switch, "k_switch");
    let seed = match (args.seed, kv.get("seed")) {
        (None, Some(_)) => None,
        (flag, _) => Some(resolve_seed(flag)?),
    };
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    let model = ModelConfig::from_kv(&kv, &base_model(args.scale, &kv)?)?;
    let mut train = TrainConfig::from_kv(&kv, &TrainConfig::default())?;
    if args.constant_kl {
        train.schedule = AnnealSchedule::constant();
    }
    train.validate()?;
    Ok((model, train))
}

fn cmd_train(args: &TrainArgs) -> Outcome {
    let (state, cfg) = match &args.resume {
        Some(dir) => {
            if args.config.is_some() || args.scale.is_some() {
                return Err(Failure::Usage("--resume takes its settings from the checkpoint".into()));
            }
            let (state, cfg) = load_checkpoint(dir)?;
            (state, cfg)
        }
        None => {
            let (model_cfg, cfg) = run_config(args)?;
            (TrainState::new(Model::new(model_cfg, cfg.seed)?), cfg)
        }
    };
    if args.steps < state.step {
        return Err(Failure::Usage(format!(
            "--steps {} is behind the checkpoint step {}",
            args.steps, state.step
        )));
    }
    let corpus = Corpus::load(&args.corpus)?;
    let utts = match args.split {
        SplitArg::Train => corpus.split(Split::Train),
        SplitArg::All => corpus.utterances.clone(),
    };
    let mut state = state;
    let every = args.log_every;
    train(&mut state, &utts, &cfg, args.steps, Some(&args.out), |step, l| {
        if every > 0 && (step % every == 0 || step == 1) {
            eprintln!(
                "step {step}\trecon {:.4}\tkl {:.4}\tstop {:.4}\tw {:.3}{}",
                l.recon_l2,
                l.kl,
                l.stop,
                l.kl_weight,
                if l.kl_active { "\tkl-on" } else { "" }
            );
        }
    })?;
    println!("trained to step {} in {}", state.step, args.out.display());
    Ok(())
}

fn style_source(args: &SynthArgs, model: &Model) -> Result<StyleVector, Failure> {
    let dim = model.cfg.latent_dim;
    match (&args.z, &args.reference, args.prior_seed) {
        (Some(p), None, None) => {
            let z = StyleVector::load(p)?;
            z.expect_len(dim)?;
            Ok(z)
        }
        (None, Some(p), None) => {
            let mel = MelSpectrogram::load(p)?;
            Ok(infer_style(model, &mel, InferMode::Mean, &mut Rng::new(0))?)
        }
        (None, None, Some(seed)) => Ok(sample_prior(dim, &mut Rng::new(seed))),
        _ => Err(Failure::Usage("give exactly one of --z, --ref, --prior-seed".into())),
    }
}

fn parse_text(text: &str) -> Result<Vec<usize>, Failure> {
    let mut ids = encode_text(text).map_err(|e| Failure::Usage(e.to_string()))?;
    if ids.is_empty() {
        return Err(Failure::Usage("--text is empty".into()));
    }
    let end = encode_text(&END_MARKER.to_string()).expect("end marker is in the alphabet")[0];
    if ids.last() != Some(&end) {
        ids.push(end);
    }
    Ok(ids)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Lib(Error::io(dir, e)))
}

fn cmd_synth(args: &SynthArgs) -> Outcome {
    let text = parse_text(&args.text)?;
    if args.max_frames == 0 {
        return Err(Failure::Usage("--max-frames must be at least 1".into()));
    }
    let model = Model::load(&args.ckpt, None)?;
    let z = style_source(args, &model)?;
    let out = model.forward_inference(&text, &z.values, args.max_frames)?;
    let mel = out.to_mel()?;
    create_dir(&args.out)?;
    let id = &args.id;
    mel.save(&args.out.join(format!("{id}.mel")))?;
    mel.save_pgm(&args.out.join(format!("{id}.pgm")))?;
    z.save(&args.out.join(format!("{id}.z")))?;
    append_stats(&args.out.join("stats.tsv"), id, &probe_stats(&mel)?)?;
    if args.wav {
        let fb = MelFilterbank::standard();
        let linear = mel_to_linear(&mel, &fb)?;
        let wav = griffin_lim(&linear, mel.frames(), args.gl_iters, StftConfig::default())?;
        wav.write_wav(&args.out.join(format!("{id}.wav")))?;
    }
    println!(
        "{id}: {} frames{}",
        out.frames(),
        if out.truncated { " (hit --max-frames)" } else { "" }
    );
    Ok(())
}

fn cmd_infer(ckpt: &Path, reference: &Path, out: &Path) -> Outcome {
    let model = Model::load(ckpt, None)?;
    let mel = MelSpectrogram::load(reference)?;
    infer_style(&model, &mel, InferMode::Mean, &mut Rng::new(0))?.save(out)?;
    Ok(())
}

fn load_pair(a: &Path, b: &Path) -> Result<(StyleVector, StyleVector), Failure> {
    let (a, b) = (StyleVector::load(a)?, StyleVector::load(b)?);
    b.expect_len(a.len())?;
    Ok((a, b))
}

fn cmd_style(cmd: StyleCmd) -> Outcome {
    let (result, out) = match cmd {
        StyleCmd::Interp { a, b, alpha, out } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Failure::Usage(format!("--alpha {alpha} outside [0, 1]")));
            }
            let (a, b) = load_pair(&a, &b)?;
            (interpolate(&a, &b, alpha)?, out)
        }
        StyleCmd::Setdim { z, zeros, dim, value, out } => {
            let z = match (z, zeros) {
                (Some(p), None) => StyleVector::load(&p)?,
                (None, Some(n)) if n > 0 => StyleVector::zeros(n),
                _ => return Err(Failure::Usage("give --z FILE or --zeros N".into())),
            };
            if dim >= z.len() {
                return Err(Failure::Usage(format!("--dim {dim} out of range for length {}", z.len())));
            }
            (set_dimension(&z, dim, value)?, out)
        }
        StyleCmd::Combine { a, b, out } => {
            let (a, b) = load_pair(&a, &b)?;
            (combine(&a, &b)?, out)
        }
    };
    result.save(&out)?;
    Ok(())
}

fn cmd_diag(history: &Path) -> Outcome {
    let text = std::fs::read_to_string(history).map_err(|e| Error::io(history, e))?;
    let report = diagnose(&parse_history(&text)?)?;
    print!("{}", report.render());
    Ok(())
}
