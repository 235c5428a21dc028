//! Waveform analysis: Hann-windowed STFT, mel filterbank, log-mel
//! extraction, Griffin-Lim phase reconstruction and the on-disk formats
//! (MEL1 spectrograms, 16-bit WAV, PGM images).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 80;
pub const FRAME_SHIFT_MS: f64 = 12.5;
pub const FRAME_LENGTH_MS: f64 = 50.0;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 7600.0;
/// Magnitudes are clamped to this value before taking the log.
pub const LOG_FLOOR: f64 = 1e-5;

/// `ln(LOG_FLOOR)`, the value of a silent mel bin.
pub fn log_floor() -> f64 {
    LOG_FLOOR.ln()
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if let Some(s) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0 + 1e-9) {
            return Err(Error::contract(format!("sample {s} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let to_io = |e: hound::Error| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::format("wav", other.to_string()),
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                .map_err(to_io)?;
        }
        w.finalize().map_err(to_io)
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut r = hound::WavReader::open(path).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::format("wav", other.to_string()),
        })?;
        let spec = r.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::format("wav", "expected 16-bit PCM mono"));
        }
        let samples = r
            .samples::<i16>()
            .map(|s| s.map(|v| (f64::from(v) / 32767.0).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("wav", e.to_string()))?;
        Self::new(samples, spec.sample_rate)
    }
}

/// Framing parameters shared by analysis and resynthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_fft: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_length_ms: FRAME_LENGTH_MS,
            frame_shift_ms: FRAME_SHIFT_MS,
            n_fft: N_FFT,
        }
    }
}

impl StftConfig {
    pub fn frame_length(&self) -> usize {
        (self.frame_length_ms * f64::from(self.sample_rate) / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.frame_shift_ms * f64::from(self.sample_rate) / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.frame_length() == 0 || self.frame_shift() == 0 {
            return Err(Error::config("frame length and shift must be at least one sample"));
        }
        if self.frame_length() > self.n_fft {
            return Err(Error::config(format!(
                "frame of {} samples exceeds n_fft {}",
                self.frame_length(),
                self.n_fft
            )));
        }
        Ok(())
    }

    /// Number of complete frames in a signal of `n` samples.
    pub fn frame_count(&self, n: usize) -> usize {
        let len = self.frame_length();
        if n < len {
            0
        } else {
            (n - len) / self.frame_shift() + 1
        }
    }
}

/// Periodic Hann window of `len` samples.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// One-sided short-time spectrum, `frames × bins`, row-major.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

struct Framer {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Framer {
    fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: hann(cfg.frame_length()),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
            cfg,
        })
    }

    fn analyze(&self, samples: &[f64]) -> Result<Spectrum> {
        let frames = self.cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::EmptyInput(format!(
                "signal of {} samples is shorter than one {}-sample frame",
                samples.len(),
                self.cfg.frame_length()
            )));
        }
        let (len, hop, n_fft, bins) = (
            self.cfg.frame_length(),
            self.cfg.frame_shift(),
            self.cfg.n_fft,
            self.cfg.n_bins(),
        );
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, (s, w)) in samples[f * hop..f * hop + len].iter().zip(&self.window).enumerate() {
                buf[i] = Complex64::new(s * w, 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrum { frames, bins, data })
    }

    // Least-squares inverse: overlap-add of windowed frames divided by the
    // summed squared window.
    fn synthesize(&self, spec: &Spectrum) -> Vec<f64> {
        let (len, hop, n_fft, bins) = (
            self.cfg.frame_length(),
            self.cfg.frame_shift(),
            self.cfg.n_fft,
            self.cfg.n_bins(),
        );
        let n = (spec.frames - 1) * hop + len;
        let mut out = vec![0.0; n];
        let mut norm = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for f in 0..spec.frames {
            let row = &spec.data[f * bins..(f + 1) * bins];
            buf[..bins].copy_from_slice(row);
            buf[0].im = 0.0;
            buf[bins - 1].im = 0.0;
            for k in 1..n_fft - bins + 1 {
                buf[n_fft - k] = row[k].conj();
            }
            self.inverse.process(&mut buf);
            for i in 0..len {
                let w = self.window[i];
                out[f * hop + i] += w * buf[i].re / n_fft as f64;
                norm[f * hop + i] += w * w;
            }
        }
        for (o, &z) in out.iter_mut().zip(&norm) {
            *o = if z > 1e-10 { *o / z } else { 0.0 };
        }
        out
    }
}

/// Hann-windowed STFT. Each `frame_length`-sample frame is zero-padded to
/// `n_fft`; frames start every `frame_shift` samples and only complete
/// frames are produced.
pub fn stft(w: &Waveform, frame_length_ms: f64, frame_shift_ms: f64, n_fft: usize) -> Result<Spectrum> {
    let cfg = StftConfig {
        sample_rate: w.sample_rate,
        frame_length_ms,
        frame_shift_ms,
        n_fft,
    };
    Framer::new(cfg)?.analyze(&w.samples)
}

/// Triangular filters equally spaced on the HTK mel scale, peak weight 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
    pinv: Vec<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if !(0.0..f_max).contains(&f_min) || f_max > f64::from(sample_rate) / 2.0 {
            return Err(Error::config(format!(
                "mel band edges {f_min}..{f_max} Hz invalid at {sample_rate} Hz"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
            if weights[m * n_bins..(m + 1) * n_bins].iter().all(|&w| w <= 0.0) {
                return Err(Error::config(format!(
                    "mel filter {m} covers no FFT bin; increase n_fft or reduce n_mels"
                )));
            }
        }
        let pinv = DMatrix::from_row_slice(n_mels, n_bins, &weights)
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::config(format!("filterbank pseudo-inverse failed: {e}")))?;
        let mut pinv_rows = vec![0.0; n_bins * n_mels];
        for k in 0..n_bins {
            for m in 0..n_mels {
                pinv_rows[k * n_mels + m] = pinv[(k, m)];
            }
        }
        Ok(Self {
            weights,
            n_mels,
            n_bins,
            sample_rate,
            f_min,
            f_max,
            pinv: pinv_rows,
        })
    }

    /// The filterbank used throughout: 80 bands, 50 Hz to 7.6 kHz at 16 kHz.
    pub fn standard() -> Self {
        Self::new(SAMPLE_RATE, N_FFT, N_MELS, F_MIN, F_MAX).expect("standard filterbank parameters are valid")
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn band_edges(&self) -> (f64, f64) {
        (self.f_min, self.f_max)
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins + bin]
    }

    /// `log(max(fb · |X|, floor))` for a `frames × bins` magnitude matrix.
    pub fn apply_log(&self, linear: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; frames * self.n_mels];
        for t in 0..frames {
            let row = &linear[t * self.n_bins..(t + 1) * self.n_bins];
            for m in 0..self.n_mels {
                let w = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
                let e: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                out[t * self.n_mels + m] = e.max(LOG_FLOOR).ln();
            }
        }
        out
    }
}

/// `frames × 80` log-mel magnitudes, stored at `f32` precision so the MEL1
/// file format round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    data: Vec<f32>,
    pub frame_shift_ms: f32,
    pub frame_length_ms: f32,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    /// Builds a spectrogram from `frames × 80` log values with the standard
    /// framing metadata. Values below the log floor are raised to it.
    pub fn from_log_values(frames: usize, values: &[f64]) -> Result<Self> {
        if values.len() != frames * N_MELS {
            return Err(Error::Dimension {
                op: "mel spectrogram",
                lhs: vec![frames, N_MELS],
                rhs: vec![values.len()],
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mel value {v}")));
        }
        let floor = log_floor() as f32;
        Ok(Self {
            frames,
            data: values.iter().map(|&v| (v as f32).max(floor)).collect(),
            frame_shift_ms: FRAME_SHIFT_MS as f32,
            frame_length_ms: FRAME_LENGTH_MS as f32,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn at(&self, frame: usize, band: usize) -> f64 {
        f64::from(self.data[frame * N_MELS + band])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    /// Appends `extra` frames at the log floor.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.data.extend(std::iter::repeat(log_floor() as f32).take(extra * N_MELS));
        out.frames += extra;
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(24 + self.data.len() * 4);
        b.extend_from_slice(b"MEL1");
        b.extend_from_slice(&(self.frames as u32).to_le_bytes());
        b.extend_from_slice(&(N_MELS as u32).to_le_bytes());
        b.extend_from_slice(&self.frame_shift_ms.to_le_bytes());
        b.extend_from_slice(&self.frame_length_ms.to_le_bytes());
        b.extend_from_slice(&self.sample_rate.to_le_bytes());
        for v in &self.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("MEL1 file", d.to_string());
        if bytes.len() < 24 || &bytes[..4] != b"MEL1" {
            return Err(bad("missing MEL1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let frames = u32_at(4) as usize;
        let n_mels = u32_at(8) as usize;
        if n_mels != N_MELS {
            return Err(bad(&format!("expected {N_MELS} mel bands, found {n_mels}")));
        }
        if frames == 0 {
            return Err(bad("zero frames"));
        }
        if bytes.len() != 24 + frames * n_mels * 4 {
            return Err(bad("payload length does not match header"));
        }
        let data: Vec<f32> = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite payload"));
        }
        Ok(Self {
            frames,
            data,
            frame_shift_ms: f32_at(12),
            frame_length_ms: f32_at(16),
            sample_rate: u32_at(20),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// 8-bit binary PGM: time on the x axis, lowest band on the bottom row,
    /// min-max normalized over the whole image.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.frames, N_MELS).into_bytes();
        for band in (0..N_MELS).rev() {
            for t in 0..self.frames {
                let v = self.data[t * N_MELS + band];
                let px = if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                };
                out.push(px);
            }
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Log-mel spectrogram of a waveform: `log(max(fb · |STFT|, 1e-5))`.
pub fn mel_extract(w: &Waveform, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if w.sample_rate != fb.sample_rate {
        return Err(Error::config(format!(
            "waveform at {} Hz but filterbank built for {} Hz",
            w.sample_rate, fb.sample_rate
        )));
    }
    let n_fft = (fb.n_bins - 1) * 2;
    if fb.n_mels != N_MELS {
        return Err(Error::config(format!("filterbank has {} bands, expected {N_MELS}", fb.n_mels)));
    }
    let spec = stft(w, FRAME_LENGTH_MS, FRAME_SHIFT_MS, n_fft)?;
    let mut m = MelSpectrogram::from_log_values(spec.frames, &fb.apply_log(&spec.magnitudes(), spec.frames))?;
    m.sample_rate = w.sample_rate;
    Ok(m)
}

/// Maps log-mel frames back to linear STFT magnitudes through the
/// filterbank's pseudo-inverse, clamping negative results to zero.
pub fn mel_to_linear(m: &MelSpectrogram, fb: &MelFilterbank) -> Result<Vec<f64>> {
    if fb.n_mels != m.n_mels() {
        return Err(Error::Dimension {
            op: "mel_to_linear",
            lhs: vec![m.frames, m.n_mels()],
            rhs: vec![fb.n_mels, fb.n_bins],
        });
    }
    let floor = log_floor() as f32;
    let mut out = vec![0.0; m.frames * fb.n_bins];
    for t in 0..m.frames {
        let mel: Vec<f64> = m
            .frame(t)
            .iter()
            .map(|&v| if v <= floor { 0.0 } else { f64::from(v).exp() })
            .collect();
        for k in 0..fb.n_bins {
            let row = &fb.pinv[k * fb.n_mels..(k + 1) * fb.n_mels];
            let v: f64 = row.iter().zip(&mel).map(|(a, b)| a * b).sum();
            out[t * fb.n_bins + k] = v.max(0.0);
        }
    }
    Ok(out)
}

/// Spectral convergence `‖|STFT(x)| − M‖ / ‖M‖`, with one-sided bins
/// weighted so the norm matches the full Hermitian spectrum.
pub fn spectral_convergence(estimate: &[f64], target: &[f64], bins: usize) -> f64 {
    let weight = |k: usize| if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (e, t)) in estimate.iter().zip(target).enumerate() {
        let w = weight(i % bins);
        num += w * (e - t) * (e - t);
        den += w * t * t;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Result of [`griffin_lim_traced`].
#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

/// Reconstructs a waveform whose STFT magnitude approximates `linear_mag`
/// (`frames × (n_fft/2+1)`), starting from zero phase.
pub fn griffin_lim(linear_mag: &[f64], frames: usize, iters: usize, cfg: StftConfig) -> Result<Waveform> {
    Ok(griffin_lim_traced(linear_mag, frames, iters, cfg)?.waveform)
}

pub fn griffin_lim_traced(
    linear_mag: &[f64],
    frames: usize,
    iters: usize,
    cfg: StftConfig,
) -> Result<GriffinLimOutput> {
    if iters == 0 {
        return Err(Error::contract("griffin_lim needs at least one iteration"));
    }
    if frames == 0 {
        return Err(Error::EmptyInput("no frames to invert".into()));
    }
    let framer = Framer::new(cfg)?;
    let bins = cfg.n_bins();
    if linear_mag.len() != frames * bins {
        return Err(Error::Dimension {
            op: "griffin_lim",
            lhs: vec![frames, bins],
            rhs: vec![linear_mag.len()],
        });
    }
    if let Some(v) = linear_mag.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!("magnitude {v} is negative or non-finite")));
    }
    let mut spec = Spectrum {
        frames,
        bins,
        data: linear_mag.iter().map(|&m| Complex64::new(m, 0.0)).collect(),
    };
    let mut convergence = Vec::with_capacity(iters);
    let mut signal = Vec::new();
    for _ in 0..iters {
        signal = framer.synthesize(&spec);
        let rebuilt = framer.analyze(&signal)?;
        convergence.push(spectral_convergence(&rebuilt.magnitudes(), linear_mag, bins));
        for ((dst, src), &m) in spec.data.iter_mut().zip(&rebuilt.data).zip(linear_mag) {
            let n = src.norm();
            *dst = if n > 1e-12 {
                src * (m / n)
            } else {
                Complex64::new(m, 0.0)
            };
        }
    }
    let peak = signal.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    if peak > 1.0 {
        signal.iter_mut().for_each(|s| *s /= peak);
    }
    Ok(GriffinLimOutput {
        waveform: Waveform::new(signal, cfg.sample_rate)?,
        convergence,
    })
}
