//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use styletts::audio::MelSpectrogram;
use styletts::corpus::{encode_text, gen_corpus, render_mel, Batch, StyleParams, Utterance};
use styletts::model::{Model, ModelConfig, Noise};
use styletts::numerics::{grad_check, GradCheckOptions, ParameterStore, Rng};
use styletts::style::{
    combine, cosine_similarity, identify_dimension, infer_style, interpolate, monotone_pairs, set_dimension,
    sweep_frame_counts, InferMode, Origin, StyleVector,
};
use styletts::training::{
    diagnose, kl_active, kl_closed_form, kl_period, kl_weight, load_checkpoint, objective, save_checkpoint, step_rng,
    train, AnnealSchedule, TrainConfig, TrainState,
};

const PROBE_SEED: u64 = 2024;
const PROBE_CORPUS: usize = 128;
const PROBE_STEPS: u64 = 3000;
const PROBE_BATCH: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(index: usize, name: &str, run: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = run();
    println!(
        "criterion {index:>2} {name:<30} {} ({:.1}s) {}",
        if o.pass { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64(),
        o.detail
    );
    o.pass
}

fn main() {
    let mut probe_model = None;
    let results = [
        report(1, "kl closed form vs monte carlo", kl_oracle),
        report(2, "gradient integrity", gradient_integrity),
        report(3, "schedule exactness", schedule_exactness),
        report(4, "trainability", trainability),
        report(5, "collapse diagnostic", collapse_diagnostic),
        report(6, "latent arithmetic", latent_arithmetic),
        report(7, "style separability probe", || separability(&mut probe_model)),
        report(8, "transfer cycle consistency", || cycle_consistency(probe_model.as_ref())),
        report(9, "reparameterization statistics", reparam_statistics),
        report(10, "determinism and formats", determinism_and_formats),
    ];
    let failures = results.iter().filter(|p| !**p).count();
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

fn kl_oracle() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
        let ls: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.0, 0.5)).collect();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for d in 0..4 {
                // log q − log p at z = μ + σε; the normalizers cancel.
                let e = rng.normal();
                let z = mu[d] + ls[d].exp() * e;
                acc += -ls[d] - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        let exact = kl_closed_form(&mu, &ls);
        worst = worst.max((mc - exact).abs() / exact);
    }
    outcome(worst < 0.01, format!("worst relative error {worst:.2e}"))
}

fn short_utterance(id: &str, text: &str, pitch: f64) -> Utterance {
    let ids = encode_text(text).unwrap();
    let style = StyleParams::new(pitch, 0.5, 1.0, 0.8).unwrap();
    let phases: Vec<f64> = (0..ids.len()).map(|i| 0.7 * i as f64).collect();
    Utterance {
        id: id.into(),
        mel: render_mel(&ids, &style, &phases).unwrap(),
        text: ids,
        style,
    }
}

fn gradient_integrity() -> Outcome {
    let a = short_utterance("a", "a~", 0.2);
    let b = short_utterance("b", "bc", 0.7);
    let frames = (a.mel.frames(), b.mel.frames());
    let batch = Batch::from_utterances(&[&a, &b]).unwrap();
    let mut model = Model::new(ModelConfig::miniature(), 5).unwrap();
    // Zero biases put ReLUs fed by the zero go-frame exactly on their kink.
    let mut jitter = Rng::new(6);
    let biases: Vec<String> = model.params.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for name in biases {
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v += jitter.uniform_range(-0.1, 0.1);
        }
    }
    let sched = AnnealSchedule {
        ramp_start_step: 1,
        ramp_end_step: 4,
        k_before: 2,
        k_after: 2,
        k_switch_step: 4,
    };
    let opts = GradCheckOptions {
        step: 1e-5,
        tol: 1e-3,
        denom_floor: 1e-4,
    };
    let report = grad_check(&model.params, opts, |tape, p| {
        let mut rng = step_rng(21, 2);
        let mut noise = Noise {
            rng: &mut rng,
            training: true,
        };
        Ok(objective(tape, &model.cfg, p, &batch, 2, &sched, &mut noise)?.total)
    })
    .unwrap();
    let worst = report.worst().map_or(0.0, |w| w.4);
    let pass = report.passed() && frames.0 <= 8 && frames.1 <= 8;
    outcome(
        pass,
        format!(
            "{} scalars, frames {:?}, max relative error {worst:.2e}",
            model.params.num_scalars(),
            frames
        ),
    )
}

fn schedule_exactness() -> Outcome {
    let s = AnnealSchedule::full();
    let mut bad = Vec::new();
    let mut prev = 0.0;
    for step in 0..=20_000u64 {
        let period = if step < 15_000 { 100 } else { 400 };
        if kl_period(step, &s) != period || kl_active(step, &s) != (step % period == 0) {
            bad.push(step);
        }
        let w = kl_weight(step, &s);
        if !(0.0..=1.0).contains(&w) || w < prev {
            bad.push(step);
        }
        prev = w;
    }
    let ends = kl_weight(0, &s) == 0.0
        && kl_weight(s.ramp_start_step, &s) == 0.0
        && kl_weight(s.ramp_end_step, &s) == 1.0
        && kl_weight(u64::MAX, &s) == 1.0;
    outcome(bad.is_empty() && ends, format!("{} mismatched steps, endpoints exact: {ends}", bad.len()))
}

fn trainability() -> Outcome {
    let corpus = gen_corpus(&Rng::new(8), 8).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = |until: u64| {
        let mut st = TrainState::new(Model::new(ModelConfig::desk(), cfg.seed).unwrap());
        train(&mut st, &corpus.utterances, &cfg, until, None, |_, _| {}).unwrap();
        st
    };
    let full = run(200);
    let first = full.history[0].1.recon_l2;
    let last = full.history[199].1.recon_l2;
    let repeat = run(200);
    let same = full.history == repeat.history && full.model.params.to_bytes() == repeat.model.params.to_bytes();
    let ratio = last / first;
    outcome(
        ratio < 0.1 && same,
        format!("recon {first:.3} -> {last:.3} (ratio {ratio:.4}), repeat identical: {same}"),
    )
}

fn collapse_diagnostic() -> Outcome {
    let corpus = gen_corpus(&Rng::new(64), 64).unwrap();
    let run = |schedule: AnnealSchedule| {
        let cfg = TrainConfig {
            batch_size: 2,
            seed: 64,
            schedule,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(Model::new(ModelConfig::desk(), cfg.seed).unwrap());
        train(&mut st, &corpus.utterances, &cfg, 2000, None, |_, _| {}).unwrap();
        diagnose(&st.history).unwrap()
    };
    let annealed = run(AnnealSchedule::desk());
    let constant = run(AnnealSchedule::constant());
    let (a, c) = (
        annealed.post_ramp_mean_kl.unwrap_or(0.0),
        constant.post_ramp_mean_kl.unwrap_or(0.0),
    );
    let order = if a > c { "annealed > constant" } else { "annealed <= constant" };
    outcome(
        a > 1e-3,
        format!("post-ramp mean KL annealed {a:.6}, constant {c:.6} ({order})"),
    )
}

fn latent_arithmetic() -> Outcome {
    let mut rng = Rng::new(606);
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    let mut check = |a: &[f64], b: &[f64], alpha: f64, dim: usize, value: f64| {
        let (va, vb) = (
            StyleVector::new(a.to_vec(), Origin::Manual),
            StyleVector::new(b.to_vec(), Origin::Manual),
        );
        let mut lerp = vec![0.0; a.len()];
        let mut sum = vec![0.0; a.len()];
        let mut set = a.to_vec();
        for i in 0..a.len() {
            lerp[i] = alpha * a[i] + (1.0 - alpha) * b[i];
            sum[i] = a[i] + b[i];
        }
        set[dim] = value;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let ok = bits(&interpolate(&va, &vb, alpha).unwrap().values) == bits(&lerp)
            && bits(&combine(&va, &vb).unwrap().values) == bits(&sum)
            && bits(&set_dimension(&va, dim, value).unwrap().values) == bits(&set);
        cases += 1;
        if !ok {
            mismatches += 1;
        }
    };
    for _ in 0..1000 {
        let n = rng.int_range(1, 64);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let alpha = rng.uniform();
        let dim = rng.int_range(0, n - 1);
        let value = rng.uniform_range(-2.0, 2.0);
        check(&a, &b, alpha, dim, value);
    }
    let a: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
    let zeros = vec![0.0; 32];
    for alpha in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0] {
        check(&a, &b, alpha, 0, 0.0);
    }
    for value in [-0.9, -0.1, 0.7] {
        check(&zeros, &zeros, 0.5, 6, value);
    }
    for value in [0.1, 0.5, 0.9] {
        check(&zeros, &zeros, 0.5, 10, value);
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {cases} cases"))
}

fn separability(slot: &mut Option<Model>) -> Outcome {
    let corpus = gen_corpus(&Rng::new(PROBE_SEED), PROBE_CORPUS).unwrap();
    let utts = corpus.utterances;
    let cfg = TrainConfig {
        batch_size: PROBE_BATCH,
        seed: PROBE_SEED,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(Model::new(ModelConfig::desk(), cfg.seed).unwrap());
    train(&mut st, &utts, &cfg, PROBE_STEPS, None, |_, _| {}).unwrap();
    let model = st.model;
    let probe = identify_dimension(&model, &utts, |u| u.style.rate).unwrap();
    let d = probe.dim;
    let column: Vec<f64> = probe.means.iter().map(|m| m[d]).collect();
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dim = model.cfg.latent_dim;
    let mut base = vec![0.0; dim];
    for m in &probe.means {
        for k in 0..dim {
            base[k] += m[k] / probe.means.len() as f64;
        }
    }
    let base = StyleVector::new(base, Origin::Manual);
    let values: Vec<f64> = (0..6).map(|i| lo + (hi - lo) * i as f64 / 5.0).collect();
    let counts = sweep_frame_counts(&model, &utts[0].text, &base, d, &values, 1000).unwrap();
    let pairs = monotone_pairs(&counts);
    *slot = Some(model);
    outcome(
        pairs >= 4,
        format!("dim {d} (rho {:.3}), frame counts {counts:?}, {pairs}/5 monotone pairs", probe.rho),
    )
}

fn cycle_consistency(model: Option<&Model>) -> Outcome {
    let Some(model) = model else {
        return outcome(false, "probe model unavailable".into());
    };
    let corpus = gen_corpus(&Rng::new(PROBE_SEED), PROBE_CORPUS).unwrap();
    let mut total = 0.0;
    let mut truncated = 0;
    for u in corpus.utterances.iter().take(8) {
        let z = infer_style(model, &u.mel, InferMode::Mean, &mut Rng::new(0)).unwrap();
        let out = model.forward_inference(&u.text, &z.values, 3 * u.mel.frames()).unwrap();
        truncated += usize::from(out.truncated);
        let back = infer_style(model, &out.to_mel().unwrap(), InferMode::Mean, &mut Rng::new(0)).unwrap();
        total += cosine_similarity(&z.values, &back.values);
    }
    let mean = total / 8.0;
    outcome(
        mean >= 0.8,
        format!("mean cosine {mean:.4} over 8 cases ({truncated} hit the frame limit)"),
    )
}

fn reparam_statistics() -> Outcome {
    let model = Model::new(ModelConfig::desk(), 9).unwrap();
    let mut rng = Rng::new(909);
    let embedding: Vec<f64> = (0..model.cfg.ref_gru_units).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let dim = model.cfg.latent_dim;
    let base = model.latent_heads(&embedding, &vec![0.0; dim]).unwrap();
    let n = 100_000;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for _ in 0..n {
        let eps = rng.normals(dim);
        let z = model.latent_heads(&embedding, &eps).unwrap().z;
        for d in 0..dim {
            sum[d] += z[d];
            sq[d] += z[d] * z[d];
        }
    }
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for d in 0..dim {
        let mean = sum[d] / n as f64;
        let var = sq[d] / n as f64 - mean * mean;
        let sigma2 = (2.0 * base.log_sigma[d]).exp();
        worst_mean = worst_mean.max((mean - base.mu[d]).abs());
        worst_var = worst_var.max((var - sigma2).abs() / sigma2);
    }
    outcome(
        worst_mean <= 0.02 && worst_var <= 0.03,
        format!("max |mean - mu| {worst_mean:.4}, max variance error {:.2}%", 100.0 * worst_var),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_styletts"))
        .args(args)
        .env_remove("STYLE_TTS_SEED")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every subcommand into `root` and reports any command that failed.
fn cli_session(root: &Path) -> Vec<String> {
    let s = |p: &str| root.join(p).to_string_lossy().into_owned();
    let runs: Vec<Vec<String>> = vec![
        vec!["gen-corpus".into(), "--out".into(), s("corpus"), "--n".into(), "6".into(), "--seed".into(), "3".into()],
        vec![
            "train".into(), "--corpus".into(), s("corpus"), "--scale".into(), "miniature".into(), "--steps".into(),
            "4".into(), "--out".into(), s("run"), "--seed".into(), "3".into(), "--batch-size".into(), "2".into(),
            "--checkpoint-every".into(), "2".into(), "--log-every".into(), "0".into(),
        ],
        vec![
            "train".into(), "--corpus".into(), s("corpus"), "--steps".into(), "6".into(), "--out".into(), s("run"),
            "--resume".into(), s("run/ckpt_4"), "--log-every".into(), "0".into(),
        ],
        vec!["infer".into(), "--ckpt".into(), s("run/ckpt_6"), "--ref".into(), s("corpus/utt00000.mel"), "--out".into(), s("z.txt")],
        vec!["style".into(), "setdim".into(), "--zeros".into(), "4".into(), "--dim".into(), "2".into(), "--value".into(), "-0.9".into(), "--out".into(), s("d.txt")],
        vec!["style".into(), "interp".into(), "--a".into(), s("z.txt"), "--b".into(), s("d.txt"), "--alpha".into(), "0.3333".into(), "--out".into(), s("i.txt")],
        vec!["style".into(), "combine".into(), "--a".into(), s("z.txt"), "--b".into(), s("d.txt"), "--out".into(), s("c.txt")],
        vec![
            "synth".into(), "--ckpt".into(), s("run/ckpt_6"), "--text".into(), "ab".into(), "--z".into(), s("c.txt"),
            "--out".into(), s("syn"), "--id".into(), "zc".into(), "--max-frames".into(), "12".into(), "--wav".into(),
            "--gl-iters".into(), "4".into(),
        ],
        vec![
            "synth".into(), "--ckpt".into(), s("run/ckpt_6"), "--text".into(), "cd".into(), "--ref".into(),
            s("corpus/utt00001.mel"), "--out".into(), s("syn"), "--id".into(), "ref".into(), "--max-frames".into(), "12".into(),
        ],
        vec![
            "synth".into(), "--ckpt".into(), s("run/ckpt_6"), "--text".into(), "ef".into(), "--prior-seed".into(), "5".into(),
            "--out".into(), s("syn"), "--id".into(), "prior".into(), "--max-frames".into(), "12".into(),
        ],
        vec!["diag".into(), "--history".into(), s("run/history.tsv")],
    ];
    let mut failed = Vec::new();
    for args in &runs {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        if !run_cli(&refs) {
            failed.push(format!("{} {}", args[0], args.get(1).map_or("", |a| a.as_str())));
        }
    }
    failed
}

fn determinism_and_formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));
    fs::create_dir_all(&one).unwrap();
    fs::create_dir_all(&two).unwrap();
    let mut failed = cli_session(&one);
    failed.extend(cli_session(&two));
    let (a, b) = (tree(&one), tree(&two));
    let identical = !a.is_empty() && a == b;

    let mut rng = Rng::new(10);
    let frames = 17;
    let values: Vec<f64> = (0..frames * 80).map(|_| rng.uniform_range(-11.0, 2.0)).collect();
    let mel = MelSpectrogram::from_log_values(frames, &values).unwrap();
    let mel_path = dir.path().join("x.mel");
    mel.save(&mel_path).unwrap();
    let mel_ok = MelSpectrogram::load(&mel_path).unwrap().raw() == mel.raw()
        && MelSpectrogram::from_bytes(&mel.to_bytes()).unwrap().to_bytes() == mel.to_bytes();

    let corpus = gen_corpus(&Rng::new(4), 4).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(Model::new(ModelConfig::miniature(), 4).unwrap());
    train(&mut st, &corpus.utterances, &cfg, 3, None, |_, _| {}).unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&st, &cfg, &ck).unwrap();
    let (back, back_cfg) = load_checkpoint(&ck).unwrap();
    let moments = |p: &ParameterStore| {
        let (m, v) = p.moments();
        (m.to_bytes(), v.to_bytes())
    };
    let ckpt_ok = back.model.params.to_bytes() == st.model.params.to_bytes()
        && moments(&back.model.params) == moments(&st.model.params)
        && back.step == st.step
        && back.history == st.history
        && back_cfg == cfg;

    outcome(
        failed.is_empty() && identical && mel_ok && ckpt_ok,
        format!(
            "{} files byte-identical across runs: {identical}, failed commands {failed:?}, MEL1 exact: {mel_ok}, checkpoint exact: {ckpt_ok}",
            a.len()
        ),
    )
}
