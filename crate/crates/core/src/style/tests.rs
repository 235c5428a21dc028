use super::*;
use crate::audio::log_floor;
use crate::corpus::encode_text;
use crate::model::ModelConfig;
use crate::numerics::Rng;
use proptest::prelude::*;

fn v(values: &[f64]) -> StyleVector {
    StyleVector::new(values.to_vec(), Origin::Manual)
}

fn mel_from(frames: usize, f: impl Fn(usize, usize) -> f64) -> MelSpectrogram {
    let mut vals = Vec::with_capacity(frames * 80);
    for t in 0..frames {
        for b in 0..80 {
            vals.push(f(t, b));
        }
    }
    MelSpectrogram::from_log_values(frames, &vals).unwrap()
}

#[test]
fn interpolate_examples() {
    let a = v(&[3.0, 0.0, 0.0]);
    let b = v(&[0.0, 3.0, 0.0]);
    let third = interpolate(&a, &b, 1.0 / 3.0).unwrap();
    assert_eq!(third.values, vec![1.0, 2.0, 0.0]);
    assert_eq!(third.origin, Origin::Interpolated);
    assert_eq!(interpolate(&a, &b, 1.0).unwrap().values, a.values);
    assert!(interpolate(&a, &b, 1.5).is_err());
    assert!(interpolate(&a, &v(&[1.0]), 0.5).is_err());
}

#[test]
fn set_dimension_examples() {
    let z = StyleVector::zeros(32);
    let s = set_dimension(&z, 6, -0.9).unwrap();
    assert_eq!(s.values.iter().filter(|&&x| x != 0.0).count(), 1);
    assert_eq!(s.values[6], -0.9);
    assert_eq!(set_dimension(&z, 10, 0.5).unwrap().values[10], 0.5);
    assert!(set_dimension(&z, 32, 0.1).is_err());
}

#[test]
fn combine_examples() {
    let a = set_dimension(&StyleVector::zeros(32), 6, 0.7).unwrap();
    let b = set_dimension(&StyleVector::zeros(32), 10, 0.9).unwrap();
    let c = combine(&a, &b).unwrap();
    let set: Vec<usize> = (0..32).filter(|&i| c.values[i] != 0.0).collect();
    assert_eq!(set, vec![6, 10]);
    assert_eq!(combine(&a, &StyleVector::zeros(32)).unwrap().values, a.values);
    assert!(combine(&a, &StyleVector::zeros(3)).is_err());
}

proptest! {
    #[test]
    fn vector_ops_match_direct_arithmetic(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40),
        alpha in 0.0f64..=1.0,
        value in -2.0f64..2.0,
        pick in 0usize..1000,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (a, b) = (v(&x), v(&y));
        let i = interpolate(&a, &b, alpha).unwrap();
        for k in 0..x.len() {
            prop_assert_eq!(i.values[k], alpha * x[k] + (1.0 - alpha) * y[k]);
        }
        let swapped = interpolate(&b, &a, 1.0 - alpha).unwrap();
        for k in 0..x.len() {
            prop_assert!((swapped.values[k] - i.values[k]).abs() <= 1e-12);
        }
        prop_assert_eq!(&interpolate(&a, &a, alpha).unwrap().values, &x.iter().map(|t| alpha * t + (1.0 - alpha) * t).collect::<Vec<_>>());
        prop_assert_eq!(&combine(&a, &b).unwrap().values, &combine(&b, &a).unwrap().values);
        let d = pick % x.len();
        let s = set_dimension(&a, d, value).unwrap();
        for k in 0..x.len() {
            prop_assert_eq!(s.values[k].to_bits(), if k == d { value.to_bits() } else { x[k].to_bits() });
        }
        prop_assert_eq!(&set_dimension(&a, d, x[d]).unwrap(), &a);
    }
}

#[test]
fn prior_samples_have_unit_moments() {
    let mut rng = Rng::new(12);
    let n = 100_000;
    let dim = 8;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for _ in 0..n {
        let z = sample_prior(dim, &mut rng);
        for d in 0..dim {
            sum[d] += z.values[d];
            sq[d] += z.values[d] * z.values[d];
        }
    }
    for d in 0..dim {
        let mean = sum[d] / n as f64;
        let var = sq[d] / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }
    let mut r1 = Rng::new(5);
    let mut r2 = Rng::new(5);
    let first = sample_prior(4, &mut r1);
    assert_eq!(first, sample_prior(4, &mut r2));
    assert_ne!(first, sample_prior(4, &mut r1));
}

#[test]
fn inference_modes() {
    let model = Model::new(ModelConfig::miniature(), 2).unwrap();
    let mel = mel_from(24, |t, b| -3.0 + ((t * 7 + b) % 11) as f64 * 0.2);
    let a = infer_style(&model, &mel, InferMode::Mean, &mut Rng::new(1)).unwrap();
    let b = infer_style(&model, &mel, InferMode::Mean, &mut Rng::new(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    let s = infer_style(&model, &mel, InferMode::Sample, &mut Rng::new(1)).unwrap();
    assert_ne!(s, a);
    let emb = model.reference_encode(&mel).unwrap();
    assert_eq!(model.latent_heads(&emb, &[0.0; 4]).unwrap().z, a.values);
}

#[test]
fn transfer_checks_text() {
    let model = Model::new(ModelConfig::miniature(), 2).unwrap();
    let mel = mel_from(16, |_, b| -2.0 - b as f64 * 0.01);
    assert!(transfer(&model, &[], &mel, 10).is_err());
    let out = transfer(&model, &encode_text("ab~").unwrap(), &mel, 10).unwrap();
    assert!(out.frames() >= 1 && out.frames() <= 10);
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap(), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
    // Ties share the average rank: ranks (1.5, 1.5, 3) against (1, 2, 3).
    let rho = spearman(&[5.0, 5.0, 9.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((rho - 0.866_025_403_784_438_6).abs() < 1e-12);
    assert!(spearman(&[1.0], &[1.0]).is_err());
}

#[test]
fn monotone_pair_counting() {
    assert_eq!(monotone_pairs(&[10, 12, 15, 15, 20, 30]), 4);
    assert_eq!(monotone_pairs(&[30, 20, 10, 5]), 3);
    assert_eq!(monotone_pairs(&[3]), 0);
}

#[test]
fn cosine_examples() {
    assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
}

#[test]
fn probe_examples() {
    let hump = mel_from(5, |_, b| -((b as f64 - 40.0) / 3.0).powi(2));
    let s = probe_stats(&hump).unwrap();
    assert_eq!(s.frame_count, 5);
    assert!((s.centroid_mean - 40.0).abs() < 0.01, "{}", s.centroid_mean);
    assert!(s.centroid_var < 1e-12);

    let flat = probe_stats(&mel_from(3, |_, _| -1.0)).unwrap();
    assert!((flat.centroid_mean - 39.5).abs() < 1e-9);
    assert!((flat.mean_energy - (-2.0f64).exp()).abs() < 1e-9);
    assert!(flat.centroid_mean >= 0.0 && flat.centroid_mean <= 79.0);

    let floor = probe_stats(&mel_from(2, |_, _| log_floor())).unwrap();
    assert!(floor.centroid_mean.is_finite());
}

#[test]
fn vector_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.txt");
    let z = v(&[0.1, -1.0 / 3.0, 2.5e-17, 7.0]);
    z.save(&path).unwrap();
    let back = StyleVector::load(&path).unwrap();
    assert_eq!(back, z);
    assert!(StyleVector::parse("0.1\nabc\n").is_err());
    assert!(matches!(StyleVector::parse("1\n2\nnan\n"), Err(Error::Parse { line: 3, .. })));
    assert!(back.expect_len(3).is_err());
}

#[test]
fn stats_file_has_single_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.tsv");
    let s = probe_stats(&mel_from(3, |_, _| -1.0)).unwrap();
    append_stats(&path, "a", &s).unwrap();
    append_stats(&path, "b", &s).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], STATS_HEADER);
    assert!(lines[2].starts_with("b\t3\t"));
}

#[test]
fn floor_padding_is_part_of_the_reference() {
    // The recognition network sees every frame it is given, so trailing
    // log-floor frames shift μ. The size of the shift is measured, not bounded.
    let model = Model::new(ModelConfig::miniature(), 4).unwrap();
    let mel = mel_from(20, |t, b| -4.0 + ((t + 3 * b) % 7) as f64 * 0.3);
    let mut rng = Rng::new(0);
    let plain = infer_style(&model, &mel, InferMode::Mean, &mut rng).unwrap();
    assert_eq!(plain, infer_style(&model, &mel, InferMode::Mean, &mut rng).unwrap());
    for extra in [1, 10, 100] {
        let padded = infer_style(&model, &mel.padded(extra), InferMode::Mean, &mut rng).unwrap();
        assert!(padded.values.iter().all(|v| v.is_finite()));
        let cos = cosine_similarity(&plain.values, &padded.values);
        assert!((-1.0..=1.0 + 1e-12).contains(&cos));
    }
}
