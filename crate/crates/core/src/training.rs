//! Loss assembly, KL annealing and gating, and the optimization loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::audio::N_MELS;
use crate::corpus::{make_batches, Batch, Utterance};
use crate::error::{Error, Result};
use crate::model::{batch_view, Model, ModelConfig, Noise};
use crate::numerics::{AdamConfig, ParameterStore, Rng, Tape, Tensor, Var};

/// KL weight ramp and gating periods. Steps count from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub ramp_start_step: u64,
    pub ramp_end_step: u64,
    pub k_before: u64,
    pub k_after: u64,
    pub k_switch_step: u64,
}

impl AnnealSchedule {
    pub fn full() -> Self {
        Self {
            ramp_start_step: 1000,
            ramp_end_step: 21000,
            k_before: 100,
            k_after: 400,
            k_switch_step: 15000,
        }
    }

    pub fn desk() -> Self {
        Self {
            ramp_start_step: 50,
            ramp_end_step: 1000,
            ..Self::full()
        }
    }

    /// Full KL weight on every step.
    pub fn constant() -> Self {
        Self {
            ramp_start_step: 0,
            ramp_end_step: 1,
            k_before: 1,
            k_after: 1,
            k_switch_step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ramp_start_step >= self.ramp_end_step {
            return Err(Error::config(format!(
                "KL ramp start {} must precede its end {}",
                self.ramp_start_step, self.ramp_end_step
            )));
        }
        if self.k_before == 0 || self.k_after == 0 {
            return Err(Error::config("KL gating periods must be at least 1"));
        }
        Ok(())
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

/// Linear ramp from 0 at `ramp_start_step` to 1 at `ramp_end_step`.
pub fn kl_weight(step: u64, s: &AnnealSchedule) -> f64 {
    if step <= s.ramp_start_step {
        0.0
    } else if step >= s.ramp_end_step {
        1.0
    } else {
        (step - s.ramp_start_step) as f64 / (s.ramp_end_step - s.ramp_start_step) as f64
    }
}

pub fn kl_period(step: u64, s: &AnnealSchedule) -> u64 {
    if step < s.k_switch_step {
        s.k_before
    } else {
        s.k_after
    }
}

pub fn kl_active(step: u64, s: &AnnealSchedule) -> bool {
    step % kl_period(step, s) == 0
}

/// KL divergence of `N(mu, exp(log_sigma)²)` from the standard normal.
pub fn kl_closed_form(mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
        .sum::<f64>()
}

/// Differentiable batch-mean KL for `[batch, latent]` inputs.
pub fn kl_var<'t>(mu: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let batch = mu.dims2().0 as f64;
    let per = mu
        .mul(mu)?
        .add(log_sigma.scale(2.0).exp()?)?
        .sub(log_sigma.scale(2.0))?
        .add_scalar(-1.0);
    Ok(per.sum().scale(0.5 / batch))
}

fn valid_count(mask: &[f64]) -> Result<f64> {
    let n: f64 = mask.iter().sum();
    if n <= 0.0 {
        return Err(Error::contract("every position is masked"));
    }
    Ok(n)
}

/// Masked mean squared error of one prediction; `mask` has one entry per row.
fn masked_mse<'t>(pred: Var<'t>, target: Var<'t>, mask: Var<'t>, count: f64) -> Result<Var<'t>> {
    let d = pred.sub(target)?;
    Ok(d.mul(d)?.mul(mask)?.sum().scale(1.0 / count))
}

/// Two-term masked L2 reconstruction loss on tape variables.
pub fn recon_var<'t>(before: Var<'t>, after: Var<'t>, target: Var<'t>, mask: &[f64]) -> Result<Var<'t>> {
    let tape = before.tape();
    let cols = before.dims2().1;
    let count = valid_count(mask)? * cols as f64;
    let m = tape.constant(Tensor::new(vec![mask.len(), 1], mask.to_vec())?);
    masked_mse(before, target, m, count)?.add(masked_mse(after, target, m, count)?)
}

/// Masked mean binary cross-entropy on tape variables.
pub fn stop_var<'t>(logits: Var<'t>, targets: &[f64], mask: &[f64]) -> Result<Var<'t>> {
    let tape = logits.tape();
    let count = valid_count(mask)?;
    let m = tape.constant(Tensor::new(vec![mask.len(), 1], mask.to_vec())?);
    let per = tape.bce_with_logits(logits, targets)?.reshape(vec![mask.len(), 1])?;
    Ok(per.mul(m)?.sum().scale(1.0 / count))
}

/// `T × 80` predictions against a target with a per-frame mask.
pub fn recon_loss(pred_before: &Tensor, pred_after: &Tensor, target: &Tensor, mask: &[f64]) -> Result<f64> {
    for t in [pred_after, target] {
        if t.shape() != pred_before.shape() {
            return Err(Error::Dimension {
                op: "recon_loss",
                lhs: pred_before.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    if mask.len() != pred_before.dims2().0 {
        return Err(Error::Dimension {
            op: "recon_loss mask",
            lhs: pred_before.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let tape = Tape::new();
    let l = recon_var(
        tape.constant(pred_before.clone()),
        tape.constant(pred_after.clone()),
        tape.constant(target.clone()),
        mask,
    )?;
    Ok(l.item())
}

pub fn stop_loss(logits: &[f64], targets: &[f64], mask: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != mask.len() || logits.is_empty() {
        return Err(Error::Dimension {
            op: "stop_loss",
            lhs: vec![logits.len()],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![logits.len(), 1], logits.to_vec())?);
    Ok(stop_var(x, targets, mask)?.item())
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon_l2: f64,
    pub kl: f64,
    pub stop: f64,
    pub kl_weight: f64,
    pub kl_active: bool,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(recon_l2: f64, kl: f64, stop: f64, kl_weight: f64, kl_active: bool) -> Self {
        let total = recon_l2 + stop + if kl_active { kl_weight * kl } else { 0.0 };
        Self {
            recon_l2,
            kl,
            stop,
            kl_weight,
            kl_active,
            total,
        }
    }
}

/// The objective for one batch on `tape`, with each term's variable.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Builds the full training objective for `batch` at `step`.
pub fn objective<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    params: &ParameterStore,
    batch: &Batch,
    step: u64,
    sched: &AnnealSchedule,
    noise: &mut Noise<'_>,
) -> Result<Objective<'t>> {
    let net = crate::model::Net::new(cfg, params);
    let fwd = net.teacher_forced(tape, &batch_view(batch), noise)?;
    let mask = batch.frame_mask();
    let target = tape.constant(Tensor::new(vec![mask.len(), N_MELS], batch.mels.clone())?);
    let recon = recon_var(fwd.mel_before, fwd.mel_after, target, &mask)?;
    let stop = stop_var(fwd.stop_logits, &batch.stop_targets, &mask)?;
    let kl = kl_var(fwd.mu, fwd.log_sigma)?;
    let weight = kl_weight(step, sched);
    let active = kl_active(step, sched);
    let mut total = recon.add(stop)?;
    if active {
        total = total.add(kl.scale(weight))?;
    }
    Ok(Objective {
        total,
        breakdown: LossBreakdown::assemble(recon.item(), kl.item(), stop.item(), weight, active),
    })
}

/// Optimization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub schedule: AnnealSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
            schedule: AnnealSchedule::desk(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "lr",
    "clip_norm",
    "seed",
    "checkpoint_every",
    "kl_ramp_start",
    "kl_ramp_end",
    "k_before",
    "k_after",
    "k_switch",
];

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        TRAIN_KEYS
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.adam.lr);
        kv.set("clip_norm", self.clip_norm);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("kl_ramp_start", self.schedule.ramp_start_step);
        kv.set("kl_ramp_end", self.schedule.ramp_end_step);
        kv.set("k_before", self.schedule.k_before);
        kv.set("k_after", self.schedule.k_after);
        kv.set("k_switch", self.schedule.k_switch_step);
        kv
    }

    pub fn from_kv(kv: &KeyValues, base: &TrainConfig) -> Result<Self> {
        let s = base.schedule;
        let cfg = Self {
            batch_size: kv.parsed_or("batch_size", base.batch_size)?,
            adam: AdamConfig {
                lr: kv.parsed_or("lr", base.adam.lr)?,
                ..base.adam
            },
            clip_norm: kv.parsed_or("clip_norm", base.clip_norm)?,
            seed: kv.parsed_or("seed", base.seed)?,
            checkpoint_every: kv.parsed_or("checkpoint_every", base.checkpoint_every)?,
            schedule: AnnealSchedule {
                ramp_start_step: kv.parsed_or("kl_ramp_start", s.ramp_start_step)?,
                ramp_end_step: kv.parsed_or("kl_ramp_end", s.ramp_end_step)?,
                k_before: kv.parsed_or("k_before", s.k_before)?,
                k_after: kv.parsed_or("k_after", s.k_after)?,
                k_switch_step: kv.parsed_or("k_switch", s.k_switch_step)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Model, optimizer moments (inside the parameter store), step counter
/// and loss history.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub history: Vec<(u64, LossBreakdown)>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self {
            step: 0,
            model,
            history: Vec::new(),
        }
    }
}

/// Randomness for dropout, zoneout and ε at `step`; independent of how the
/// run was split into resumed segments.
pub fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::new(seed).split(2).split(step)
}

fn epoch_rng(seed: u64, epoch: u64) -> Rng {
    Rng::new(seed).split(1).split(epoch)
}

/// Forward, backward, clip, Adam update; appends to the history.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let step = state.step + 1;
    let mut rng = step_rng(cfg.seed, step);
    let breakdown = {
        let tape = Tape::new();
        let mut noise = Noise {
            rng: &mut rng,
            training: true,
        };
        let model = &state.model;
        let obj = objective(&tape, &model.cfg, &model.params, batch, step, &cfg.schedule, &mut noise)?;
        if let Some(what) = tape.first_non_finite() {
            return Err(Error::NonFinite(format!("{what} at step {step}")));
        }
        tape.backward(obj.total, &mut state.model.params)?;
        obj.breakdown
    };
    if !state.model.params.grad_norm().is_finite() {
        return Err(Error::NonFinite(format!("gradient at step {step}")));
    }
    state.model.params.clip_grad_norm(cfg.clip_norm);
    state.model.params.adam_step(&cfg.adam, step)?;
    state.model.params.clear_grads();
    state.step = step;
    state.history.push((step, breakdown));
    Ok(breakdown)
}

/// Batches of the epoch containing `step` and the index of its batch.
pub struct EpochBatches<'a> {
    utts: &'a [Utterance],
    batch_size: usize,
    seed: u64,
    epoch: Option<u64>,
    batches: Vec<Batch>,
}

impl<'a> EpochBatches<'a> {
    pub fn new(utts: &'a [Utterance], batch_size: usize, seed: u64) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        Ok(Self {
            utts,
            batch_size,
            seed,
            epoch: None,
            batches: Vec::new(),
        })
    }

    pub fn per_epoch(&self) -> u64 {
        self.utts.len().div_ceil(self.batch_size) as u64
    }

    /// Batch used at 1-based `step`.
    pub fn for_step(&mut self, step: u64) -> Result<&Batch> {
        let n = self.per_epoch();
        let epoch = (step - 1) / n;
        if self.epoch != Some(epoch) {
            self.batches = make_batches(self.utts, self.batch_size, &mut epoch_rng(self.seed, epoch))?;
            self.epoch = Some(epoch);
        }
        Ok(&self.batches[((step - 1) % n) as usize])
    }
}

pub const HISTORY_FILE: &str = "history.tsv";
const HISTORY_HEADER: &str = "step\trecon_l2\tkl\tstop\tkl_weight\tkl_active\ttotal";
const MOMENT_M: &str = "adam_m.vstp";
const MOMENT_V: &str = "adam_v.vstp";
const STATE_FILE: &str = "state.txt";

pub fn render_history(history: &[(u64, LossBreakdown)]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for (step, l) in history {
        let _ = writeln!(
            s,
            "{step}\t{}\t{}\t{}\t{}\t{}\t{}",
            l.recon_l2,
            l.kl,
            l.stop,
            l.kl_weight,
            u8::from(l.kl_active),
            l.total
        );
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<(u64, LossBreakdown)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HISTORY_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                detail: format!("unexpected header {h:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                detail: "empty history".into(),
            })
        }
    }
    let mut out: Vec<(u64, LossBreakdown)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse { line: i + 1, detail };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let step = f[0].parse::<u64>().map_err(|e| bad(format!("{:?}: {e}", f[0])))?;
        if out.last().is_some_and(|(s, _)| *s >= step) {
            return Err(bad(format!("step {step} is not increasing")));
        }
        let active = match f[5] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("kl_active {other:?} is not 0 or 1"))),
        };
        out.push((
            step,
            LossBreakdown {
                recon_l2: num(f[1])?,
                kl: num(f[2])?,
                stop: num(f[3])?,
                kl_weight: num(f[4])?,
                kl_active: active,
                total: num(f[6])?,
            },
        ));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 2,
            detail: "history has no rows".into(),
        });
    }
    Ok(out)
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes model, optimizer moments, train settings and history to `dir`.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    state.model.save(dir)?;
    let (m, v) = state.model.params.moments();
    m.save(&dir.join(MOMENT_M))?;
    v.save(&dir.join(MOMENT_V))?;
    let mut kv = cfg.to_kv();
    kv.set("step", state.step);
    write_file(&dir.join(STATE_FILE), &kv.render())?;
    write_file(&dir.join(HISTORY_FILE), &render_history(&state.history))
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut model = Model::load(dir, None)?;
    let m = ParameterStore::load(&dir.join(MOMENT_M))?;
    let v = ParameterStore::load(&dir.join(MOMENT_V))?;
    model.params.set_moments(&m, &v)?;
    let kv = KeyValues::load(&dir.join(STATE_FILE))?;
    let cfg = TrainConfig::from_kv(&kv, &TrainConfig::default())?;
    let step: u64 = kv
        .parsed("step")?
        .ok_or_else(|| Error::format("checkpoint state", "missing step"))?;
    let text = std::fs::read_to_string(dir.join(HISTORY_FILE)).map_err(|e| Error::io(dir.join(HISTORY_FILE), e))?;
    let history = if step == 0 { Vec::new() } else { parse_history(&text)? };
    if history.last().map_or(0, |(s, _)| *s) != step {
        return Err(Error::format("checkpoint", "history does not end at the checkpoint step"));
    }
    Ok((TrainState { step, model, history }, cfg))
}

/// Runs training until `state.step == until`. With `out`, checkpoints are
/// written every `cfg.checkpoint_every` steps and at the end, and the
/// history file is refreshed alongside. `progress` sees each step.
pub fn train(
    state: &mut TrainState,
    utts: &[Utterance],
    cfg: &TrainConfig,
    until: u64,
    out: Option<&Path>,
    mut progress: impl FnMut(u64, &LossBreakdown),
) -> Result<()> {
    cfg.validate()?;
    let mut batches = EpochBatches::new(utts, cfg.batch_size, cfg.seed)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.step < until {
        let batch = batches.for_step(state.step + 1)?;
        let loss = train_step(state, batch, cfg)?;
        progress(state.step, &loss);
        if let Some(dir) = out {
            let periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
            if periodic || state.step == until {
                save_checkpoint(state, cfg, &checkpoint_dir(dir, state.step))?;
                write_file(&dir.join(HISTORY_FILE), &render_history(&state.history))?;
            }
        }
    }
    Ok(())
}

/// Collapse diagnostic over a loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub steps: usize,
    /// Mean KL over the last tenth of the run (at least one row).
    pub final_window_mean_kl: f64,
    /// Rows with full KL weight.
    pub post_ramp_rows: usize,
    pub post_ramp_mean_kl: Option<f64>,
    pub post_ramp_min_kl: Option<f64>,
    pub first_full_weight_step: Option<u64>,
    pub final_kl_weight: f64,
    pub active_fraction: f64,
    pub collapsed: bool,
}

pub const COLLAPSE_THRESHOLD: f64 = 1e-3;

pub fn diagnose(history: &[(u64, LossBreakdown)]) -> Result<CollapseReport> {
    if history.is_empty() {
        return Err(Error::EmptyInput("history has no rows".into()));
    }
    let n = history.len();
    let window = &history[n - (n / 10).max(1)..];
    let final_window_mean_kl = window.iter().map(|(_, l)| l.kl).sum::<f64>() / window.len() as f64;
    let post: Vec<f64> = history.iter().filter(|(_, l)| l.kl_weight >= 1.0).map(|(_, l)| l.kl).collect();
    let post_ramp_mean_kl = (!post.is_empty()).then(|| post.iter().sum::<f64>() / post.len() as f64);
    let post_ramp_min_kl = post.iter().copied().reduce(f64::min);
    Ok(CollapseReport {
        steps: n,
        final_window_mean_kl,
        post_ramp_rows: post.len(),
        post_ramp_mean_kl,
        post_ramp_min_kl,
        first_full_weight_step: history.iter().find(|(_, l)| l.kl_weight >= 1.0).map(|(s, _)| *s),
        final_kl_weight: history[n - 1].1.kl_weight,
        active_fraction: history.iter().filter(|(_, l)| l.kl_active).count() as f64 / n as f64,
        collapsed: post_ramp_mean_kl.is_some_and(|m| m < COLLAPSE_THRESHOLD),
    })
}

impl CollapseReport {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "steps\t{}", self.steps);
        let _ = writeln!(s, "final_window_mean_kl\t{:.6}", self.final_window_mean_kl);
        let _ = writeln!(s, "post_ramp_rows\t{}", self.post_ramp_rows);
        let _ = writeln!(s, "post_ramp_mean_kl\t{}", opt(self.post_ramp_mean_kl));
        let _ = writeln!(s, "post_ramp_min_kl\t{}", opt(self.post_ramp_min_kl));
        let _ = writeln!(
            s,
            "first_full_weight_step\t{}",
            self.first_full_weight_step.map_or_else(|| "n/a".to_string(), |v| v.to_string())
        );
        let _ = writeln!(s, "final_kl_weight\t{:.6}", self.final_kl_weight);
        let _ = writeln!(s, "kl_active_fraction\t{:.6}", self.active_fraction);
        let _ = writeln!(s, "collapse\t{}", if self.collapsed { "yes" } else { "no" });
        s
    }
}

#[cfg(test)]
mod tests;
