//! The synthesis network: recognition network and latent heads, text
//! encoder with additive latent conditioning, location-sensitive attention,
//! autoregressive decoder with stop head, and postnet.

mod config;
mod net;

use std::path::Path;

pub use config::ModelConfig;
pub use net::{normalize, norm_center, norm_scale, BatchView, DecoderVars, Forward, Memory, Net, Noise};

use crate::audio::MelSpectrogram;
use crate::config::KeyValues;
use crate::corpus::{check_tokens, Batch};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Rng, Tape, Tensor};

/// Posterior parameters and the reparameterized sample for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVariable {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

impl LatentVariable {
    /// Largest `|z − mu − exp(log_sigma) ⊙ eps|`.
    pub fn reparam_residual(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.mu)
            .zip(self.log_sigma.iter().zip(&self.eps))
            .map(|((z, m), (ls, e))| (z - (m + ls.exp() * e)).abs())
            .fold(0.0, f64::max)
    }
}

/// Encoder states of one utterance, `length × enc_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub states: Tensor,
    pub length: usize,
}

/// Decoder recurrent state for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// `T × 80` log-mel frames before the postnet.
    pub mel_before: Tensor,
    pub mel_after: Tensor,
    pub stop_logits: Vec<f64>,
    /// `T × L` attention weights.
    pub alignments: Tensor,
    /// Set when decoding hit `max_frames` without a stop decision.
    pub truncated: bool,
}

impl DecoderOutput {
    pub fn frames(&self) -> usize {
        self.stop_logits.len()
    }

    /// The post-postnet frames as a spectrogram (clamped at the log floor).
    pub fn to_mel(&self) -> Result<MelSpectrogram> {
        MelSpectrogram::from_log_values(self.frames(), self.mel_after.data())
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
}

pub const PARAMS_FILE: &str = "params.vstp";
pub const CONFIG_FILE: &str = "model.cfg";

fn item_rows(t: &Tensor, steps: usize, b: usize, len: usize) -> Tensor {
    let cols = t.dims2().1;
    let data = t.data()[b * steps * cols..(b * steps + len) * cols].to_vec();
    Tensor::new(vec![len, cols], data).expect("non-empty slice")
}

fn alignment_matrix(steps: &[Vec<f64>], b: usize, text_steps: usize, text_len: usize, frames: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * text_len);
    for w in &steps[..frames] {
        data.extend_from_slice(&w[b * text_steps..b * text_steps + text_len]);
    }
    Tensor::new(vec![frames, text_len], data).expect("non-empty alignment")
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = net::init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn net(&self) -> Net<'_> {
        Net::new(&self.cfg, &self.params)
    }

    /// Fixed-length embedding of a reference spectrogram.
    pub fn reference_encode(&self, x: &MelSpectrogram) -> Result<Vec<f64>> {
        if x.frames() == 0 {
            return Err(Error::contract("reference spectrogram has no frames"));
        }
        let tape = Tape::new();
        let net = self.net();
        let input = net.mel_input(&tape, &x.to_f64(), &[x.frames()], x.frames())?;
        Ok(net.reference_encode(&tape, input, &[x.frames()], x.frames())?.data())
    }

    pub fn latent_heads(&self, embedding: &[f64], eps: &[f64]) -> Result<LatentVariable> {
        let tape = Tape::new();
        let emb = tape.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec())?);
        let (mu, ls, z) = self.net().latent(&tape, emb, eps)?;
        Ok(LatentVariable {
            mu: mu.data(),
            log_sigma: ls.data(),
            z: z.data(),
            eps: eps.to_vec(),
        })
    }

    /// Evaluation-mode text encoding (no zoneout).
    pub fn text_encode(&self, text: &[usize]) -> Result<EncoderStates> {
        check_tokens(text)?;
        let tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut noise = Noise {
            rng: &mut rng,
            training: false,
        };
        let s = self.net().text_encode(&tape, text, &[text.len()], text.len(), &mut noise)?;
        Ok(EncoderStates {
            states: s.value(),
            length: text.len(),
        })
    }

    pub fn condition(&self, enc: &EncoderStates, z: &[f64]) -> Result<EncoderStates> {
        let tape = Tape::new();
        let s = tape.constant(enc.states.clone());
        let z = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let out = self.net().condition(&tape, s, z, enc.length)?;
        Ok(EncoderStates {
            states: out.value(),
            length: enc.length,
        })
    }

    /// Context vector and attention weights for one decoder query.
    pub fn attend(&self, query: &[f64], enc: &EncoderStates, prev: &[f64], cum: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let l = enc.length;
        if prev.len() != l || cum.len() != l {
            return Err(Error::Dimension {
                op: "attend",
                lhs: vec![l],
                rhs: vec![prev.len(), cum.len()],
            });
        }
        let tape = Tape::new();
        let net = self.net();
        let mem = net.memory(&tape, tape.constant(enc.states.clone()), &[l], l)?;
        let q = tape.constant(Tensor::new(vec![1, query.len()], query.to_vec())?);
        let prev = tape.constant(Tensor::new(vec![l, 1], prev.to_vec())?);
        let cum = tape.constant(Tensor::new(vec![l, 1], cum.to_vec())?);
        let (ctx, w) = net.attend(&tape, q, &mem, prev, cum)?;
        Ok((ctx.data(), w.data()))
    }

    pub fn initial_state(&self) -> DecoderState {
        let z = vec![0.0; self.cfg.dec_lstm_units];
        DecoderState {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z,
        }
    }

    /// One evaluation-mode decoder step. `prev_frame` is a log-mel row.
    pub fn decode_step(&self, prev_frame: &[f64], context: &[f64], state: &DecoderState) -> Result<(Vec<f64>, f64, DecoderState)> {
        let tape = Tape::new();
        let row = |v: &[f64]| -> Result<_> { Ok(tape.constant(Tensor::new(vec![1, v.len()], v.to_vec())?)) };
        let prev: Vec<f64> = prev_frame.iter().map(|&v| normalize(v)).collect();
        let mut st = DecoderVars {
            h1: row(&state.h1)?,
            c1: row(&state.c1)?,
            h2: row(&state.h2)?,
            c2: row(&state.c2)?,
            prev_w: row(&[0.0])?,
            cum_w: row(&[0.0])?,
            ctx: row(context)?,
        };
        let mut rng = Rng::new(0);
        let mut noise = Noise {
            rng: &mut rng,
            training: false,
        };
        let (frame, stop) = self.net().decode_step(&tape, row(&prev)?, row(context)?, &mut st, &mut noise)?;
        Ok((
            frame.data(),
            stop.item(),
            DecoderState {
                h1: st.h1.data(),
                c1: st.c1.data(),
                h2: st.h2.data(),
                c2: st.c2.data(),
            },
        ))
    }

    /// Teacher-forced pass over a batch; one output and latent per item.
    pub fn forward_teacher_forced(&self, batch: &Batch, rng: &mut Rng, training: bool) -> Result<(Vec<DecoderOutput>, Vec<LatentVariable>)> {
        let tape = Tape::new();
        let view = batch_view(batch);
        let mut noise = Noise { rng, training };
        let fwd = self.net().teacher_forced(&tape, &view, &mut noise)?;
        let (before, after, stops) = (fwd.mel_before.value(), fwd.mel_after.value(), fwd.stop_logits.value());
        let (mu, ls, z) = (fwd.mu.value(), fwd.log_sigma.value(), fwd.z.value());
        let zd = self.cfg.latent_dim;
        let mut outs = Vec::with_capacity(batch.size());
        let mut lats = Vec::with_capacity(batch.size());
        for b in 0..batch.size() {
            let len = batch.mel_lengths[b];
            let steps = batch.max_frames;
            outs.push(DecoderOutput {
                mel_before: item_rows(&before, steps, b, len),
                mel_after: item_rows(&after, steps, b, len),
                stop_logits: stops.data()[b * steps..b * steps + len].to_vec(),
                alignments: alignment_matrix(&fwd.alignments, b, batch.max_text, batch.text_lengths[b], len),
                truncated: false,
            });
            lats.push(LatentVariable {
                mu: mu.row(b).to_vec(),
                log_sigma: ls.row(b).to_vec(),
                z: z.row(b).to_vec(),
                eps: fwd.eps[b * zd..(b + 1) * zd].to_vec(),
            });
        }
        Ok((outs, lats))
    }

    /// Free-running synthesis from `z`, stopping when the stop probability
    /// exceeds one half or after `max_frames` frames.
    pub fn forward_inference(&self, text: &[usize], z: &[f64], max_frames: usize) -> Result<DecoderOutput> {
        if max_frames == 0 {
            return Err(Error::contract("max_frames must be at least 1"));
        }
        if z.len() != self.cfg.latent_dim {
            return Err(Error::Dimension {
                op: "forward_inference z",
                lhs: vec![self.cfg.latent_dim],
                rhs: vec![z.len()],
            });
        }
        check_tokens(text)?;
        let l = text.len();
        let tape = Tape::new();
        let net = self.net();
        let mut rng = Rng::new(0);
        let mut noise = Noise {
            rng: &mut rng,
            training: false,
        };
        let enc = net.text_encode(&tape, text, &[l], l, &mut noise)?;
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let enc = net.condition(&tape, enc, zv, l)?;
        let mem = net.memory(&tape, enc, &[l], l)?;
        let mut st = net.decoder_init(&tape, 1, l);
        let mut prev = tape.constant(Tensor::zeros(&[1, self.cfg.mel_dim]));
        let (mut frames, mut stops, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        let mut truncated = true;
        for _ in 0..max_frames {
            let (frame, stop, w) = net.step(&tape, prev, &mem, &mut st, &mut noise)?;
            frames.push(frame);
            stops.push(stop.item());
            weights.extend(w.data());
            prev = frame.add_scalar(-norm_center()).scale(1.0 / norm_scale());
            if sigmoid(stop.item()) > 0.5 {
                truncated = false;
                break;
            }
        }
        let t = frames.len();
        let before = tape.stack_time(&frames)?;
        let after = before.add(net.postnet(&tape, before, &[t], t)?)?;
        let bad = tape.first_non_finite();
        if let Some(what) = bad {
            return Err(Error::NonFinite(what));
        }
        Ok(DecoderOutput {
            mel_before: before.value(),
            mel_after: after.value(),
            stop_logits: stops,
            alignments: Tensor::new(vec![t, l], weights)?,
            truncated,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join(PARAMS_FILE))?;
        let kv = self.cfg.to_kv();
        let text = format!("{}hash = {}\n", kv.render(), kv.fingerprint());
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint directory. The stored hash must match the stored
    /// configuration and, when given, `expected`.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut kv = KeyValues::load(&dir.join(CONFIG_FILE))?;
        let stored = kv
            .get("hash")
            .ok_or_else(|| Error::format("checkpoint config", "missing hash line"))?
            .to_string();
        let mut body = KeyValues::new();
        for k in ModelConfig::keys() {
            if let Some(v) = kv.get(k) {
                body.set(k, v);
            }
        }
        kv.set("hash", "");
        kv.check_known(&[ModelConfig::keys(), &["hash"]].concat())?;
        let cfg = ModelConfig::from_kv(&body, &ModelConfig::desk())?;
        if cfg.fingerprint() != stored {
            return Err(Error::format(
                "checkpoint config",
                format!("hash {stored} does not match configuration ({})", cfg.fingerprint()),
            ));
        }
        if let Some(exp) = expected {
            if exp.fingerprint() != stored {
                return Err(Error::format(
                    "checkpoint config",
                    format!("hash {stored} does not match expected {}", exp.fingerprint()),
                ));
            }
        }
        let mut model = Model::new(cfg, 0)?;
        let loaded = ParameterStore::load(&dir.join(PARAMS_FILE))?;
        model.params.load_values_from(&loaded)?;
        Ok(model)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn batch_view(batch: &Batch) -> BatchView<'_> {
    BatchView {
        text_ids: &batch.text_ids,
        text_lengths: &batch.text_lengths,
        max_text: batch.max_text,
        mels: &batch.mels,
        mel_lengths: &batch.mel_lengths,
        max_frames: batch.max_frames,
    }
}
