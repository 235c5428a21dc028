use super::*;
use crate::corpus::{encode_text, render_mel, StyleParams};
use crate::numerics::{grad_check, GradCheckOptions, Rng};
use proptest::prelude::*;

fn utterance(id: &str, text: &str, rate: f64, pitch: f64) -> Utterance {
    let text = encode_text(text).unwrap();
    let style = StyleParams::new(pitch, 0.4, rate, 0.7).unwrap();
    let phases: Vec<f64> = (0..text.len()).map(|i| 0.5 * i as f64).collect();
    Utterance {
        id: id.into(),
        mel: render_mel(&text, &style, &phases).unwrap(),
        text,
        style,
    }
}

fn tiny_corpus() -> Vec<Utterance> {
    vec![
        utterance("a", "ab~", 1.0, 0.2),
        utterance("b", "cde~", 0.9, 0.8),
        utterance("c", "f~", 0.7, 0.5),
        utterance("d", "gh~", 1.0, 0.1),
    ]
}

fn mini_state() -> TrainState {
    TrainState::new(Model::new(ModelConfig::miniature(), 3).unwrap())
}

fn mini_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        seed: 21,
        schedule: AnnealSchedule {
            ramp_start_step: 1,
            ramp_end_step: 4,
            k_before: 2,
            k_after: 3,
            k_switch_step: 4,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn kl_examples() {
    assert_eq!(kl_closed_form(&[0.0; 4], &[0.0; 4]), 0.0);
    assert_eq!(kl_closed_form(&[1.0], &[0.0]), 0.5);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = Rng::new(41);
    let mu: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
    let ls: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.0, 0.5)).collect();
    // E_q[log q(z) − log p(z)] with z = mu + σ·ε; the 2π terms cancel.
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for d in 0..4 {
            let e = rng.normal();
            let z = mu[d] + ls[d].exp() * e;
            acc += -ls[d] - 0.5 * e * e + 0.5 * z * z;
        }
    }
    let mc = acc / n as f64;
    let exact = kl_closed_form(&mu, &ls);
    assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
}

#[test]
fn kl_var_is_batch_mean() {
    let tape = Tape::new();
    let mu = [0.5, -1.0, 0.2, 0.0];
    let ls = [0.1, -0.3, 0.0, 0.4];
    let m = tape.constant(Tensor::new(vec![2, 2], mu.to_vec()).unwrap());
    let l = tape.constant(Tensor::new(vec![2, 2], ls.to_vec()).unwrap());
    let expected = (kl_closed_form(&mu[..2], &ls[..2]) + kl_closed_form(&mu[2..], &ls[2..])) / 2.0;
    assert!((kl_var(m, l).unwrap().item() - expected).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_is_non_negative(pairs in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..16)) {
        let (mu, ls): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let kl = kl_closed_form(&mu, &ls);
        prop_assert!(kl >= 0.0);
        if mu.iter().chain(&ls).any(|&v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn kl_weight_is_monotone_and_bounded(start in 0u64..500, len in 1u64..500, steps in prop::collection::vec(0u64..2000, 2..40)) {
        let s = AnnealSchedule { ramp_start_step: start, ramp_end_step: start + len, ..AnnealSchedule::full() };
        let mut steps = steps;
        steps.sort_unstable();
        let w: Vec<f64> = steps.iter().map(|&t| kl_weight(t, &s)).collect();
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn kl_period_switches_exactly(step in 0u64..40_000) {
        let s = AnnealSchedule::full();
        let k = if step < 15_000 { 100 } else { 400 };
        prop_assert_eq!(kl_period(step, &s), k);
        prop_assert_eq!(kl_active(step, &s), step % k == 0);
    }
}

#[test]
fn recon_loss_examples() {
    let target = Tensor::full(&[3, 80], -2.0);
    let plus = Tensor::full(&[3, 80], -1.0);
    assert_eq!(recon_loss(&target, &target, &target, &[1.0; 3]).unwrap(), 0.0);
    assert!((recon_loss(&target, &plus, &target, &[1.0; 3]).unwrap() - 1.0).abs() < 1e-12);

    let mut junk = plus.clone();
    junk.data_mut()[2 * 80..].fill(40.0);
    let a = recon_loss(&target, &plus, &target, &[1.0, 1.0, 0.0]).unwrap();
    let b = recon_loss(&target, &junk, &target, &[1.0, 1.0, 0.0]).unwrap();
    assert_eq!(a, b);
    assert!(recon_loss(&target, &plus, &target, &[0.0; 3]).is_err());
    assert!(recon_loss(&target, &Tensor::zeros(&[2, 80]), &target, &[1.0; 3]).is_err());
}

#[test]
fn stop_loss_examples() {
    let l = stop_loss(&[0.0; 5], &[0.0, 0.0, 1.0, 1.0, 0.0], &[1.0; 5]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

    let sat = stop_loss(&[-50.0, -50.0, 50.0], &[0.0, 0.0, 1.0], &[1.0; 3]).unwrap();
    assert!(sat < 1e-8);

    let mask = [1.0, 1.0, 0.0, 0.0];
    let a = stop_loss(&[0.3, -1.0, 7.0, -2.0], &[0.0, 1.0, 1.0, 1.0], &mask).unwrap();
    let b = stop_loss(&[0.3, -1.0, -2.0, 7.0], &[0.0, 1.0, 1.0, 1.0], &mask).unwrap();
    assert_eq!(a, b);
}

#[test]
fn schedule_examples() {
    let s = AnnealSchedule::full();
    assert_eq!(kl_weight(0, &s), 0.0);
    assert_eq!(kl_weight(11_000, &s), 0.5);
    assert_eq!(kl_weight(1_000_000, &s), 1.0);
    assert!(kl_active(14_900, &s));
    assert!(kl_active(15_200, &s));
    assert!(!kl_active(15_100, &s));
    let c = AnnealSchedule::constant();
    assert!((1..50).all(|t| kl_weight(t, &c) == 1.0 && kl_active(t, &c)));
    assert!(AnnealSchedule { ramp_end_step: 1000, ..s }.validate().is_err());
    assert!(AnnealSchedule { k_after: 0, ..s }.validate().is_err());
}

#[test]
fn gating_drops_kl_from_total() {
    let on = LossBreakdown::assemble(1.0, 3.0, 0.5, 0.5, true);
    let off = LossBreakdown::assemble(1.0, 3.0, 0.5, 0.5, false);
    assert_eq!(on.total, 3.0);
    assert_eq!(off.total, 1.5);
    assert_eq!(off.kl, 3.0);
}

fn objective_total(state: &TrainState, batch: &Batch, step: u64, cfg: &TrainConfig) -> LossBreakdown {
    let tape = Tape::new();
    let mut rng = step_rng(cfg.seed, step);
    let mut noise = Noise {
        rng: &mut rng,
        training: true,
    };
    let m = &state.model;
    objective(&tape, &m.cfg, &m.params, batch, step, &cfg.schedule, &mut noise)
        .unwrap()
        .breakdown
}

#[test]
fn gated_step_total_excludes_kl() {
    let state = mini_state();
    let cfg = mini_cfg();
    let utts = tiny_corpus();
    let batch = Batch::from_utterances(&[&utts[0], &utts[1]]).unwrap();
    // Step 3: weight 2/3, period 2, inactive. Step 2: weight 1/3, active.
    let off = objective_total(&state, &batch, 3, &cfg);
    assert!(!off.kl_active && off.kl > 0.0);
    assert!((off.total - (off.recon_l2 + off.stop)).abs() < 1e-12);
    let on = objective_total(&state, &batch, 2, &cfg);
    assert!(on.kl_active);
    assert!((on.total - (on.recon_l2 + on.stop + on.kl / 3.0)).abs() < 1e-9);
}

#[test]
fn infinite_clip_equals_unclipped() {
    let utts = tiny_corpus();
    let batch = Batch::from_utterances(&[&utts[0], &utts[2]]).unwrap();
    let cfg = TrainConfig {
        clip_norm: f64::INFINITY,
        ..mini_cfg()
    };
    let mut a = mini_state();
    train_step(&mut a, &batch, &cfg).unwrap();

    let mut b = mini_state();
    let tape = Tape::new();
    let mut rng = step_rng(cfg.seed, 1);
    let mut noise = Noise {
        rng: &mut rng,
        training: true,
    };
    let obj = {
        let m = &b.model;
        objective(&tape, &m.cfg, &m.params, &batch, 1, &cfg.schedule, &mut noise).unwrap()
    };
    tape.backward(obj.total, &mut b.model.params).unwrap();
    b.model.params.adam_step(&cfg.adam, 1).unwrap();
    b.model.params.clear_grads();
    assert_eq!(a.model.params.to_bytes(), b.model.params.to_bytes());
}

#[test]
fn objective_gradients_match_finite_differences() {
    let utts = tiny_corpus();
    let batch = Batch::from_utterances(&[&utts[0], &utts[2]]).unwrap();
    let mut model = Model::new(ModelConfig::miniature(), 5).unwrap();
    // Zero biases put zero-input ReLUs exactly on their kink.
    let mut jitter = Rng::new(6);
    let biases: Vec<String> = model.params.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for name in biases {
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v += jitter.uniform_range(-0.1, 0.1);
        }
    }
    let cfg = mini_cfg();
    let opts = GradCheckOptions {
        step: 1e-5,
        tol: 1e-3,
        denom_floor: 1e-4,
    };
    let report = grad_check(&model.params, opts, |tape, p| {
        let mut rng = step_rng(cfg.seed, 2);
        let mut noise = Noise {
            rng: &mut rng,
            training: true,
        };
        Ok(objective(tape, &model.cfg, p, &batch, 2, &cfg.schedule, &mut noise)?.total)
    })
    .unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
}

#[test]
fn runs_are_deterministic_and_resume_without_gaps() {
    let utts = tiny_corpus();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..mini_cfg()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut full = mini_state();
    train(&mut full, &utts, &cfg, 5, Some(dir.path()), |_, _| {}).unwrap();
    assert_eq!(full.history.len(), 5);
    let text = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(parse_history(&text).unwrap(), full.history);
    assert_eq!(text.lines().count(), 6);

    let mut again = mini_state();
    train(&mut again, &utts, &cfg, 5, None, |_, _| {}).unwrap();
    assert_eq!(again.history, full.history);
    assert_eq!(again.model.params.to_bytes(), full.model.params.to_bytes());

    let (mut resumed, rcfg) = load_checkpoint(&checkpoint_dir(dir.path(), 2)).unwrap();
    assert_eq!(rcfg, cfg);
    assert_eq!(resumed.step, 2);
    train(&mut resumed, &utts, &rcfg, 5, None, |_, _| {}).unwrap();
    let steps: Vec<u64> = resumed.history.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.model.params.to_bytes(), full.model.params.to_bytes());
}

#[test]
fn epoch_batches_cover_corpus() {
    let utts = tiny_corpus();
    let mut eb = EpochBatches::new(&utts, 3, 9).unwrap();
    assert_eq!(eb.per_epoch(), 2);
    let mut ids: Vec<String> = Vec::new();
    for step in 1..=2 {
        ids.extend(eb.for_step(step).unwrap().ids.clone());
    }
    ids.sort();
    assert_eq!(ids, vec!["a", "b", "c", "d"]);
}

#[test]
fn history_round_trip_and_errors() {
    let h = vec![
        (1, LossBreakdown::assemble(2.5, 0.1, 0.7, 0.0, false)),
        (2, LossBreakdown::assemble(2.0, 0.2, 0.6, 0.5, true)),
    ];
    assert_eq!(parse_history(&render_history(&h)).unwrap(), h);
    assert!(parse_history("").is_err());
    assert!(parse_history(&render_history(&[])).is_err());
    let swapped = render_history(&[h[1], h[0]]);
    assert!(matches!(parse_history(&swapped), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn diagnose_flags_collapse() {
    let row = |kl, w| LossBreakdown::assemble(1.0, kl, 0.1, w, true);
    let collapsed: Vec<_> = (1..=20).map(|s| (s, row(0.0, if s > 5 { 1.0 } else { 0.2 }))).collect();
    let r = diagnose(&collapsed).unwrap();
    assert!(r.collapsed);
    assert_eq!(r.post_ramp_rows, 15);
    assert_eq!(r.first_full_weight_step, Some(6));
    assert!(r.render().contains("collapse\tyes"));

    let healthy: Vec<_> = (1..=20).map(|s| (s, row(0.5, 1.0))).collect();
    let r = diagnose(&healthy).unwrap();
    assert!(!r.collapsed);
    assert_eq!(r.post_ramp_mean_kl, Some(0.5));

    let ramping: Vec<_> = (1..=20).map(|s| (s, row(0.0, 0.5))).collect();
    assert!(!diagnose(&ramping).unwrap().collapsed);
    assert!(diagnose(&[]).is_err());
}

#[test]
fn train_config_round_trip() {
    let cfg = mini_cfg();
    assert_eq!(TrainConfig::from_kv(&cfg.to_kv(), &TrainConfig::default()).unwrap(), cfg);
    let bad = TrainConfig { batch_size: 0, ..cfg };
    assert!(bad.validate().is_err());
}
