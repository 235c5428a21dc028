//! Latent-space style control and spectrogram probes.

use std::fmt::Write as _;
use std::path::Path;

use crate::audio::MelSpectrogram;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::{DecoderOutput, Model};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Inferred,
    Manual,
    Interpolated,
    Combined,
    PriorSample,
}

/// A point in latent space together with how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub values: Vec<f64>,
    pub origin: Origin,
}

impl StyleVector {
    pub fn new(values: Vec<f64>, origin: Origin) -> Self {
        Self { values, origin }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim], Origin::Manual)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One value per line, full round-trip precision.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for v in &self.values {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|e| Error::Parse {
                line: i + 1,
                detail: format!("{line:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("non-finite value {line:?}"),
                });
            }
            values.push(v);
        }
        if values.is_empty() {
            return Err(Error::format("style vector", "no values"));
        }
        Ok(Self::new(values, Origin::Manual))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fails unless the vector has `dim` entries.
    pub fn expect_len(&self, dim: usize) -> Result<()> {
        if self.len() != dim {
            return Err(Error::format(
                "style vector",
                format!("expected {dim} values, found {}", self.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    Mean,
    Sample,
}

/// Recognition network on `reference`: the posterior mean, or a
/// reparameterized sample with ε drawn from `rng`.
pub fn infer_style(model: &Model, reference: &MelSpectrogram, mode: InferMode, rng: &mut Rng) -> Result<StyleVector> {
    let emb = model.reference_encode(reference)?;
    let dim = model.cfg.latent_dim;
    let eps = match mode {
        InferMode::Mean => vec![0.0; dim],
        InferMode::Sample => rng.normals(dim),
    };
    let lat = model.latent_heads(&emb, &eps)?;
    let values = match mode {
        InferMode::Mean => lat.mu,
        InferMode::Sample => lat.z,
    };
    Ok(StyleVector::new(values, Origin::Inferred))
}

fn same_len(a: &StyleVector, b: &StyleVector, op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b`.
pub fn interpolate(a: &StyleVector, b: &StyleVector, alpha: f64) -> Result<StyleVector> {
    same_len(a, b, "interpolate")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
    Ok(StyleVector::new(values, Origin::Interpolated))
}

pub fn set_dimension(z: &StyleVector, dim: usize, value: f64) -> Result<StyleVector> {
    if dim >= z.len() {
        return Err(Error::contract(format!("dimension {dim} out of range for length {}", z.len())));
    }
    let mut values = z.values.clone();
    values[dim] = value;
    Ok(StyleVector::new(values, Origin::Manual))
}

pub fn combine(a: &StyleVector, b: &StyleVector) -> Result<StyleVector> {
    same_len(a, b, "combine")?;
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
    Ok(StyleVector::new(values, Origin::Combined))
}

pub fn sample_prior(dim: usize, rng: &mut Rng) -> StyleVector {
    StyleVector::new(rng.normals(dim), Origin::PriorSample)
}

/// Synthesizes `text` in the style of `reference` using the posterior mean.
pub fn transfer(model: &Model, text: &[usize], reference: &MelSpectrogram, max_frames: usize) -> Result<DecoderOutput> {
    crate::corpus::check_tokens(text)?;
    let z = infer_style(model, reference, InferMode::Mean, &mut Rng::new(0))?;
    model.forward_inference(text, &z.values, max_frames)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension {
            op: "spearman",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Latent dimension whose posterior mean best tracks a style factor.
#[derive(Clone, Debug, PartialEq)]
pub struct DimensionProbe {
    pub dim: usize,
    /// Signed correlation of the chosen dimension.
    pub rho: f64,
    pub correlations: Vec<f64>,
    /// Posterior means, one per utterance.
    pub means: Vec<Vec<f64>>,
}

/// Picks `argmax_d |spearman(mu_d, factor)|` over `utts`.
pub fn identify_dimension(model: &Model, utts: &[Utterance], factor: impl Fn(&Utterance) -> f64) -> Result<DimensionProbe> {
    let mut rng = Rng::new(0);
    let means = utts
        .iter()
        .map(|u| infer_style(model, &u.mel, InferMode::Mean, &mut rng).map(|z| z.values))
        .collect::<Result<Vec<_>>>()?;
    let target: Vec<f64> = utts.iter().map(factor).collect();
    let correlations = (0..model.cfg.latent_dim)
        .map(|d| spearman(&means.iter().map(|m| m[d]).collect::<Vec<_>>(), &target))
        .collect::<Result<Vec<_>>>()?;
    let dim = (0..correlations.len())
        .max_by(|&a, &b| correlations[a].abs().total_cmp(&correlations[b].abs()))
        .ok_or_else(|| Error::EmptyInput("latent space has no dimensions".into()))?;
    Ok(DimensionProbe {
        dim,
        rho: correlations[dim],
        correlations,
        means,
    })
}

/// Frame counts from synthesizing `text` with `dim` of `base` set to each value.
pub fn sweep_frame_counts(
    model: &Model,
    text: &[usize],
    base: &StyleVector,
    dim: usize,
    values: &[f64],
    max_frames: usize,
) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|&v| {
            let z = set_dimension(base, dim, v)?;
            Ok(model.forward_inference(text, &z.values, max_frames)?.frames())
        })
        .collect()
}

/// Number of consecutive pairs moving in the majority direction; ties count
/// against monotonicity.
pub fn monotone_pairs(counts: &[usize]) -> usize {
    let up = counts.windows(2).filter(|w| w[1] > w[0]).count();
    let down = counts.windows(2).filter(|w| w[1] < w[0]).count();
    up.max(down)
}

/// Summary statistics used to measure style factors in a spectrogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrogramStats {
    pub frame_count: usize,
    /// Mean linear power over all frames and bands.
    pub mean_energy: f64,
    /// Mean of the per-frame energy-weighted band centroid.
    pub centroid_mean: f64,
    /// Population variance of the per-frame centroid.
    pub centroid_var: f64,
}

pub fn probe_stats(m: &MelSpectrogram) -> Result<SpectrogramStats> {
    let frames = m.frames();
    if frames == 0 {
        return Err(Error::EmptyInput("spectrogram has no frames".into()));
    }
    let bands = m.n_mels();
    let mut centroids = Vec::with_capacity(frames);
    let mut power = 0.0;
    for t in 0..frames {
        let (mut num, mut den) = (0.0, 0.0);
        for (b, &v) in m.frame(t).iter().enumerate() {
            let w = f64::from(v).exp();
            num += b as f64 * w;
            den += w;
            power += w * w;
        }
        centroids.push(num / den);
    }
    let centroid_mean = centroids.iter().sum::<f64>() / frames as f64;
    let centroid_var = centroids.iter().map(|c| (c - centroid_mean).powi(2)).sum::<f64>() / frames as f64;
    Ok(SpectrogramStats {
        frame_count: frames,
        mean_energy: power / (frames * bands) as f64,
        centroid_mean,
        centroid_var,
    })
}

pub const STATS_HEADER: &str = "id\tframe_count\tmean_energy\tcentroid_mean\tcentroid_var";

pub fn stats_row(id: &str, s: &SpectrogramStats) -> String {
    format!(
        "{id}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
        s.frame_count, s.mean_energy, s.centroid_mean, s.centroid_var
    )
}

/// Appends a row to a stats TSV, writing the header first for a new file.
pub fn append_stats(path: &Path, id: &str, s: &SpectrogramStats) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(STATS_HEADER);
        text.push('\n');
    }
    text.push_str(&stats_row(id, s));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
