//! Batched graph construction. Every sequence tensor is item-major:
//! step `t` of item `b` lives in row `b * steps + t`. Padded steps are
//! masked so that each item's result matches running it alone.

use super::config::ModelConfig;
use crate::audio::log_floor;
use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::numerics::{Conv1dGeom, Conv2dGeom, ParameterStore, Rng, Tape, Tensor, Var};

/// Log-mel values enter the networks as `(x - center) / scale`, which maps
/// the log floor to -1 and 0 dB to +1.
pub fn norm_center() -> f64 {
    log_floor() / 2.0
}

pub fn norm_scale() -> f64 {
    -log_floor() / 2.0
}

pub fn normalize(x: f64) -> f64 {
    (x - norm_center()) / norm_scale()
}

/// Sequence lengths after one stride-2 convolution with padding 1.
pub(crate) fn halve(len: usize) -> usize {
    len.div_ceil(2)
}

/// Source of stochasticity for a forward pass. Dropout and zoneout apply
/// only when `training` is set; `eps` is always drawn.
pub struct Noise<'a> {
    pub rng: &'a mut Rng,
    pub training: bool,
}

/// `[rows, 1]` mask with ones for `t < lengths[b]`, repeated `inner` times per step.
fn step_mask(lengths: &[usize], steps: usize, inner: usize) -> Tensor {
    let mut m = vec![0.0; lengths.len() * steps * inner];
    for (b, &len) in lengths.iter().enumerate() {
        m[b * steps * inner..(b * steps + len.min(steps)) * inner].fill(1.0);
    }
    Tensor::from_parts(vec![m.len(), 1], m)
}

/// Blends `new` and `prev` as `keep ⊙ prev + (1 − keep) ⊙ new`.
fn hold<'t>(tape: &'t Tape, new: Var<'t>, prev: Var<'t>, keep: Tensor) -> Result<Var<'t>> {
    let shape = keep.shape().to_vec();
    let inv: Vec<f64> = keep.data().iter().map(|k| 1.0 - k).collect();
    let inv = tape.constant(Tensor::new(shape, inv)?);
    new.mul(inv)?.add(prev.mul(tape.constant(keep))?)
}

/// Builds the tape graph for one parameter snapshot.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParameterStore,
}

/// Decoder recurrent state plus attention bookkeeping.
pub struct DecoderVars<'t> {
    pub h1: Var<'t>,
    pub c1: Var<'t>,
    pub h2: Var<'t>,
    pub c2: Var<'t>,
    pub prev_w: Var<'t>,
    pub cum_w: Var<'t>,
    /// Context from the previous step, fed to the first layer.
    pub ctx: Var<'t>,
}

/// Conditioned text memory shared by all decoder steps.
pub struct Memory<'t> {
    pub states: Var<'t>,
    pub processed: Var<'t>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub steps: usize,
}

/// Output of a teacher-forced pass over a batch.
pub struct Forward<'t> {
    pub mel_before: Var<'t>,
    pub mel_after: Var<'t>,
    pub stop_logits: Var<'t>,
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
    pub z: Var<'t>,
    pub eps: Vec<f64>,
    /// Attention weights per decoder step, `batch * text_steps` each.
    pub alignments: Vec<Vec<f64>>,
}

/// Everything a teacher-forced pass needs from a batch.
pub struct BatchView<'b> {
    pub text_ids: &'b [usize],
    pub text_lengths: &'b [usize],
    pub max_text: usize,
    /// Log-mel rows, `batch * max_frames` by 80.
    pub mels: &'b [f64],
    pub mel_lengths: &'b [usize],
    pub max_frames: usize,
}

impl BatchView<'_> {
    pub fn batch(&self) -> usize {
        self.text_lengths.len()
    }
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParameterStore) -> Self {
        Self { cfg, params }
    }

    fn p<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        tape.param(self.params, name)
    }

    fn linear<'t>(&self, tape: &'t Tape, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        x.matmul(self.p(tape, &format!("{prefix}.w"))?)?
            .add(self.p(tape, &format!("{prefix}.b"))?)
    }

    /// Normalized, zero-padded network input for `mels`.
    pub fn mel_input<'t>(&self, tape: &'t Tape, mels: &[f64], lengths: &[usize], steps: usize) -> Result<Var<'t>> {
        let dim = self.cfg.mel_dim;
        let mut x: Vec<f64> = mels.iter().map(|&v| normalize(v)).collect();
        for (b, &len) in lengths.iter().enumerate() {
            x[(b * steps + len) * dim..(b + 1) * steps * dim].fill(0.0);
        }
        Ok(tape.constant(Tensor::new(vec![lengths.len() * steps, dim], x)?))
    }

    /// Six strided 2-D convolutions and a GRU over a normalized mel batch
    /// `[batch * steps, mel_dim]`; returns the GRU state at each item's own
    /// final step, `[batch, ref_gru_units]`.
    pub fn reference_encode<'t>(&self, tape: &'t Tape, x: Var<'t>, lengths: &[usize], steps: usize) -> Result<Var<'t>> {
        let batch = lengths.len();
        if batch == 0 || steps == 0 || lengths.iter().any(|&l| l == 0 || l > steps) {
            return Err(Error::contract("reference encoder needs at least one frame per item"));
        }
        let mut h = x.reshape(vec![batch * steps * self.cfg.mel_dim, 1])?;
        let (mut height, mut width, mut in_ch) = (steps, self.cfg.mel_dim, 1);
        let mut lens = lengths.to_vec();
        for (k, &out_ch) in self.cfg.ref_conv_channels.iter().enumerate() {
            let geom = Conv2dGeom {
                batch,
                height,
                width,
                in_ch,
                out_ch,
                kernel: (3, 3),
                stride: (2, 2),
                pad: (1, 1),
            };
            let w = self.p(tape, &format!("ref.conv{k}.w"))?;
            let b = self.p(tape, &format!("ref.conv{k}.b"))?;
            let y = tape.conv2d(h, w, geom)?.add(b)?.relu();
            height = geom.out_height();
            width = geom.out_width();
            in_ch = out_ch;
            lens.iter_mut().for_each(|l| *l = halve(*l));
            h = y.mul(tape.constant(step_mask(&lens, height, width)))?;
        }
        let seq = h.reshape(vec![batch * height, width * in_ch])?;
        let units = self.cfg.ref_gru_units;
        let xg = seq
            .matmul(self.p(tape, "ref.gru.wx")?)?
            .add(self.p(tape, "ref.gru.bx")?)?;
        let wh = self.p(tape, "ref.gru.wh")?;
        let bh = self.p(tape, "ref.gru.bh")?;
        let mut state = tape.constant(Tensor::zeros(&[batch, units]));
        for t in 0..height {
            let hg = state.matmul(wh)?.add(bh)?;
            let next = tape.gru_cell(xg.time_slice(height, t)?, hg, state)?;
            state = if lens.iter().all(|&l| t < l) {
                next
            } else {
                let keep: Vec<f64> = lens.iter().map(|&l| if t < l { 0.0 } else { 1.0 }).collect();
                hold(tape, next, state, Tensor::new(vec![batch, 1], keep)?)?
            };
        }
        Ok(state)
    }

    /// Linear mean and log-σ heads plus the reparameterized sample.
    pub fn latent<'t>(&self, tape: &'t Tape, emb: Var<'t>, eps: &[f64]) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let mu = self.linear(tape, emb, "latent.mu")?;
        let log_sigma = self.linear(tape, emb, "latent.ls")?;
        let shape = mu.shape();
        if eps.len() != mu.value().numel() {
            return Err(Error::Dimension {
                op: "latent eps",
                lhs: shape,
                rhs: vec![eps.len()],
            });
        }
        let eps = tape.constant(Tensor::new(shape, eps.to_vec())?);
        let z = mu.add(log_sigma.exp()?.mul(eps)?)?;
        Ok((mu, log_sigma, z))
    }

    /// Text encoder: embedding, masked convolutions, bidirectional LSTM.
    /// Returns `[batch * steps, enc_dim]`.
    pub fn text_encode<'t>(
        &self,
        tape: &'t Tape,
        ids: &[usize],
        lengths: &[usize],
        steps: usize,
        noise: &mut Noise<'_>,
    ) -> Result<Var<'t>> {
        let batch = lengths.len();
        if lengths.iter().any(|&l| l == 0 || l > steps) || ids.len() != batch * steps {
            return Err(Error::EmptyInput("text batch with an empty or oversized item".into()));
        }
        for (b, &len) in lengths.iter().enumerate() {
            if let Some(&bad) = ids[b * steps..b * steps + len].iter().find(|&&i| i == 0 || i > VOCAB_SIZE) {
                return Err(Error::Vocabulary { id: bad, max: VOCAB_SIZE });
            }
        }
        let mask = tape.constant(step_mask(lengths, steps, 1));
        let mut h = tape.gather(self.p(tape, "text.embed")?, ids)?.mul(mask)?;
        let mut in_ch = self.cfg.text_embed_dim;
        for k in 0..self.cfg.enc_conv_layers {
            let geom = Conv1dGeom {
                batch,
                steps,
                in_ch,
                out_ch: self.cfg.enc_conv_channels,
                kernel: self.cfg.enc_conv_kernel,
            };
            let w = self.p(tape, &format!("text.conv{k}.w"))?;
            let b = self.p(tape, &format!("text.conv{k}.b"))?;
            h = tape.conv1d(h, w, geom)?.add(b)?.relu().mul(mask)?;
            in_ch = self.cfg.enc_conv_channels;
        }
        let zoneout = if noise.training { self.cfg.zoneout_prob } else { 0.0 };
        let fw = self.lstm_layer(tape, h, lengths, steps, "text.lstm.fw", false, zoneout, noise.rng)?;
        let bw = self.lstm_layer(tape, h, lengths, steps, "text.lstm.bw", true, zoneout, noise.rng)?;
        tape.concat_cols(&[fw, bw])
    }

    /// One LSTM direction over an item-major sequence with per-item lengths.
    /// Steps beyond an item's length hold the state; zoneout keeps each
    /// hidden and cell unit's previous value with probability `zoneout`.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_layer<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        lengths: &[usize],
        steps: usize,
        prefix: &str,
        reverse: bool,
        zoneout: f64,
        rng: &mut Rng,
    ) -> Result<Var<'t>> {
        let batch = lengths.len();
        let wh = self.p(tape, &format!("{prefix}.wh"))?;
        let units = wh.dims2().0;
        let xg = x
            .matmul(self.p(tape, &format!("{prefix}.wx"))?)?
            .add(self.p(tape, &format!("{prefix}.b"))?)?;
        let mut h = tape.constant(Tensor::zeros(&[batch, units]));
        let mut c = h;
        let mut outputs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let gates = xg.time_slice(steps, t)?.add(h.matmul(wh)?)?;
            let hc = tape.lstm_cell(gates, c)?;
            let (h_new, c_new) = (hc.slice_cols(0, units)?, hc.slice_cols(units, units)?);
            let padded = lengths.iter().any(|&l| t >= l);
            if zoneout > 0.0 || padded {
                let mut keep_h = vec![0.0; batch * units];
                let mut keep_c = vec![0.0; batch * units];
                for b in 0..batch {
                    for j in 0..units {
                        let i = b * units + j;
                        let beyond = t >= lengths[b];
                        if zoneout > 0.0 {
                            keep_h[i] = f64::from(u8::from(rng.bernoulli(zoneout) || beyond));
                            keep_c[i] = f64::from(u8::from(rng.bernoulli(zoneout) || beyond));
                        } else {
                            keep_h[i] = f64::from(u8::from(beyond));
                            keep_c[i] = keep_h[i];
                        }
                    }
                }
                h = hold(tape, h_new, h, Tensor::new(vec![batch, units], keep_h)?)?;
                c = hold(tape, c_new, c, Tensor::new(vec![batch, units], keep_c)?)?;
            } else {
                h = h_new;
                c = c_new;
            }
            outputs[t] = h;
        }
        tape.stack_time(&outputs)
    }

    /// Adds `FC(z)` to every step of the encoder states.
    pub fn condition<'t>(&self, tape: &'t Tape, states: Var<'t>, z: Var<'t>, steps: usize) -> Result<Var<'t>> {
        let shift = self.linear(tape, z, "cond")?;
        states.add(shift.repeat_rows(steps))
    }

    pub fn memory<'t>(&self, tape: &'t Tape, states: Var<'t>, lengths: &[usize], steps: usize) -> Result<Memory<'t>> {
        let processed = states.matmul(self.p(tape, "attn.memory.w")?)?;
        let valid = (0..lengths.len() * steps).map(|i| i % steps < lengths[i / steps]).collect();
        Ok(Memory {
            states,
            processed,
            valid,
            batch: lengths.len(),
            steps,
        })
    }

    pub fn decoder_init<'t>(&self, tape: &'t Tape, batch: usize, text_steps: usize) -> DecoderVars<'t> {
        let units = self.cfg.dec_lstm_units;
        let zero = tape.constant(Tensor::zeros(&[batch, units]));
        let w0 = tape.constant(Tensor::zeros(&[batch * text_steps, 1]));
        DecoderVars {
            h1: zero,
            c1: zero,
            h2: zero,
            c2: zero,
            prev_w: w0,
            cum_w: w0,
            ctx: tape.constant(Tensor::zeros(&[batch, self.cfg.enc_dim()])),
        }
    }

    /// Location-sensitive attention. Returns the context `[batch, enc_dim]`
    /// and weights `[batch * steps, 1]`.
    pub fn attend<'t>(
        &self,
        tape: &'t Tape,
        query: Var<'t>,
        mem: &Memory<'t>,
        prev_w: Var<'t>,
        cum_w: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let q = query.matmul(self.p(tape, "attn.query.w")?)?;
        let loc = tape.concat_cols(&[prev_w, cum_w])?;
        let geom = Conv1dGeom {
            batch: mem.batch,
            steps: mem.steps,
            in_ch: 2,
            out_ch: self.cfg.attn_location_filters,
            kernel: self.cfg.attn_location_kernel,
        };
        let f = tape
            .conv1d(loc, self.p(tape, "attn.loc.conv")?, geom)?
            .matmul(self.p(tape, "attn.loc.w")?)?;
        let energies = mem
            .processed
            .add(q.repeat_rows(mem.steps))?
            .add(f)?
            .add(self.p(tape, "attn.b")?)?
            .tanh()
            .matmul(self.p(tape, "attn.v")?)?;
        let w = tape.segment_softmax(energies, mem.steps, &mem.valid)?;
        let ctx = tape.weighted_pool(w, mem.states, mem.steps)?;
        Ok((ctx, w))
    }

    /// Prenet then the first LSTM layer over `[prenet, previous context]`.
    /// Its output is the attention query.
    pub fn attention_rnn<'t>(
        &self,
        tape: &'t Tape,
        prev_frame: Var<'t>,
        st: &mut DecoderVars<'t>,
        noise: &mut Noise<'_>,
    ) -> Result<()> {
        let units = self.cfg.dec_lstm_units;
        let mut p = prev_frame;
        for k in 0..self.cfg.dec_prenet_dims.len() {
            p = self.linear(tape, p, &format!("dec.prenet{k}"))?.relu();
            if noise.training && self.cfg.prenet_dropout > 0.0 {
                let keep = 1.0 - self.cfg.prenet_dropout;
                let n = p.value().numel();
                let m: Vec<f64> = (0..n)
                    .map(|_| if noise.rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                p = p.mul(tape.constant(Tensor::new(p.shape(), m)?))?;
            }
        }
        let g1 = self.linear(tape, tape.concat_cols(&[p, st.ctx, st.h1])?, "dec.lstm1")?;
        let hc1 = tape.lstm_cell(g1, st.c1)?;
        st.h1 = hc1.slice_cols(0, units)?;
        st.c1 = hc1.slice_cols(units, units)?;
        Ok(())
    }

    /// Second LSTM layer over `[h1, ctx]` and the frame/stop projections
    /// from `[h2, ctx]`. Stores `ctx` for the next step.
    pub fn decoder_rnn<'t>(&self, tape: &'t Tape, ctx: Var<'t>, st: &mut DecoderVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let units = self.cfg.dec_lstm_units;
        let g2 = self.linear(tape, tape.concat_cols(&[st.h1, ctx, st.h2])?, "dec.lstm2")?;
        let hc2 = tape.lstm_cell(g2, st.c2)?;
        st.h2 = hc2.slice_cols(0, units)?;
        st.c2 = hc2.slice_cols(units, units)?;
        st.ctx = ctx;
        let out = tape.concat_cols(&[st.h2, ctx])?;
        let frame = self.linear(tape, out, "dec.frame")?;
        let stop = self.linear(tape, out, "dec.stop")?;
        Ok((frame, stop))
    }

    /// Decoder step with the attention context held at `ctx`.
    /// `prev_frame` is in the normalized domain; the frame is a log-mel row.
    pub fn decode_step<'t>(
        &self,
        tape: &'t Tape,
        prev_frame: Var<'t>,
        ctx: Var<'t>,
        st: &mut DecoderVars<'t>,
        noise: &mut Noise<'_>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        st.ctx = ctx;
        self.attention_rnn(tape, prev_frame, st, noise)?;
        self.decoder_rnn(tape, ctx, st)
    }

    /// One decoder step: attention RNN, attention on its output, decoder RNN.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        prev_frame: Var<'t>,
        mem: &Memory<'t>,
        st: &mut DecoderVars<'t>,
        noise: &mut Noise<'_>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        self.attention_rnn(tape, prev_frame, st, noise)?;
        let (ctx, w) = self.attend(tape, st.h1, mem, st.prev_w, st.cum_w)?;
        st.prev_w = w;
        st.cum_w = st.cum_w.add(w)?;
        let (frame, stop) = self.decoder_rnn(tape, ctx, st)?;
        Ok((frame, stop, w))
    }

    /// Residual from the convolutional postnet over log-mel rows
    /// `[batch * steps, mel_dim]`.
    pub fn postnet<'t>(&self, tape: &'t Tape, mel: Var<'t>, lengths: &[usize], steps: usize) -> Result<Var<'t>> {
        let mask = tape.constant(step_mask(lengths, steps, 1));
        let mut h = mel.add_scalar(-norm_center()).scale(1.0 / norm_scale()).mul(mask)?;
        let layers = self.cfg.postnet_layers;
        let mut in_ch = self.cfg.mel_dim;
        for k in 0..layers {
            let out_ch = if k + 1 == layers {
                self.cfg.mel_dim
            } else {
                self.cfg.postnet_channels
            };
            let geom = Conv1dGeom {
                batch: lengths.len(),
                steps,
                in_ch,
                out_ch,
                kernel: self.cfg.postnet_kernel,
            };
            let w = self.p(tape, &format!("post.conv{k}.w"))?;
            let b = self.p(tape, &format!("post.conv{k}.b"))?;
            h = tape.conv1d(h, w, geom)?.add(b)?;
            if k + 1 < layers {
                h = h.tanh().mul(mask)?;
            }
            in_ch = out_ch;
        }
        Ok(h)
    }

    /// Full teacher-forced pass: recognition network on the target mels,
    /// conditioned text encoding, decoding over `max_frames` steps, postnet.
    pub fn teacher_forced<'t>(&self, tape: &'t Tape, view: &BatchView<'_>, noise: &mut Noise<'_>) -> Result<Forward<'t>> {
        let batch = view.batch();
        let steps = view.max_frames;
        let x = self.mel_input(tape, view.mels, view.mel_lengths, steps)?;
        let emb = self.reference_encode(tape, x, view.mel_lengths, steps)?;
        let eps = noise.rng.normals(batch * self.cfg.latent_dim);
        let (mu, log_sigma, z) = self.latent(tape, emb, &eps)?;
        let enc = self.text_encode(tape, view.text_ids, view.text_lengths, view.max_text, noise)?;
        let enc = self.condition(tape, enc, z, view.max_text)?;
        let mem = self.memory(tape, enc, view.text_lengths, view.max_text)?;
        let mut st = self.decoder_init(tape, batch, view.max_text);
        let go = tape.constant(Tensor::zeros(&[batch, self.cfg.mel_dim]));
        let mut frames = Vec::with_capacity(steps);
        let mut stops = Vec::with_capacity(steps);
        let mut alignments = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev = if t == 0 { go } else { x.time_slice(steps, t - 1)? };
            let (frame, stop, w) = self.step(tape, prev, &mem, &mut st, noise)?;
            frames.push(frame);
            stops.push(stop);
            alignments.push(w.data());
        }
        let mel_before = tape.stack_time(&frames)?;
        let stop_logits = tape.stack_time(&stops)?;
        let residual = self.postnet(tape, mel_before, view.mel_lengths, steps)?;
        let mel_after = mel_before.add(residual)?;
        Ok(Forward {
            mel_before,
            mel_after,
            stop_logits,
            mu,
            log_sigma,
            z,
            eps,
            alignments,
        })
    }
}

/// Parameter names with shapes and initializers for `cfg`.
pub(crate) enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    /// LSTM bias: zeros except the forget-gate block, which is one.
    ForgetBias,
    Constant(f64),
}

pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let dense = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], Init::Glorot { fan_in: i, fan_out: o }));
        out.push((format!("{name}.b"), vec![1, o], Init::Zeros));
    };

    let mut in_ch = 1;
    let mut width = cfg.mel_dim;
    for (k, &c) in cfg.ref_conv_channels.iter().enumerate() {
        out.push((
            format!("ref.conv{k}.w"),
            vec![9 * in_ch, c],
            Init::Glorot {
                fan_in: 9 * in_ch,
                fan_out: 9 * c,
            },
        ));
        out.push((format!("ref.conv{k}.b"), vec![1, c], Init::Zeros));
        in_ch = c;
        width = halve(width);
    }
    let g = cfg.ref_gru_units;
    let feat = width * in_ch;
    out.push(("ref.gru.wx".into(), vec![feat, 3 * g], Init::Glorot { fan_in: feat, fan_out: 3 * g }));
    out.push(("ref.gru.bx".into(), vec![1, 3 * g], Init::Zeros));
    out.push(("ref.gru.wh".into(), vec![g, 3 * g], Init::Glorot { fan_in: g, fan_out: 3 * g }));
    out.push(("ref.gru.bh".into(), vec![1, 3 * g], Init::Zeros));
    dense(&mut out, "latent.mu", g, cfg.latent_dim);
    dense(&mut out, "latent.ls", g, cfg.latent_dim);

    let e = cfg.text_embed_dim;
    out.push(("text.embed".into(), vec![VOCAB_SIZE + 1, e], Init::Glorot { fan_in: 1, fan_out: e }));
    let mut in_ch = e;
    for k in 0..cfg.enc_conv_layers {
        let c = cfg.enc_conv_channels;
        let fan = cfg.enc_conv_kernel * in_ch;
        out.push((
            format!("text.conv{k}.w"),
            vec![fan, c],
            Init::Glorot {
                fan_in: fan,
                fan_out: cfg.enc_conv_kernel * c,
            },
        ));
        out.push((format!("text.conv{k}.b"), vec![1, c], Init::Zeros));
        in_ch = c;
    }
    let h = cfg.enc_lstm_units;
    for dir in ["fw", "bw"] {
        out.push((
            format!("text.lstm.{dir}.wx"),
            vec![in_ch, 4 * h],
            Init::Glorot {
                fan_in: in_ch,
                fan_out: 4 * h,
            },
        ));
        out.push((format!("text.lstm.{dir}.wh"), vec![h, 4 * h], Init::Glorot { fan_in: h, fan_out: 4 * h }));
        out.push((format!("text.lstm.{dir}.b"), vec![1, 4 * h], Init::ForgetBias));
    }
    let d = cfg.enc_dim();
    dense(&mut out, "cond", cfg.latent_dim, d);

    let a = cfg.attn_dim;
    let hd = cfg.dec_lstm_units;
    let f = cfg.attn_location_filters;
    out.push(("attn.query.w".into(), vec![hd, a], Init::Glorot { fan_in: hd, fan_out: a }));
    out.push(("attn.memory.w".into(), vec![d, a], Init::Glorot { fan_in: d, fan_out: a }));
    let lk = cfg.attn_location_kernel;
    out.push((
        "attn.loc.conv".into(),
        vec![2 * lk, f],
        Init::Glorot {
            fan_in: 2 * lk,
            fan_out: lk * f,
        },
    ));
    out.push(("attn.loc.w".into(), vec![f, a], Init::Glorot { fan_in: f, fan_out: a }));
    out.push(("attn.b".into(), vec![1, a], Init::Zeros));
    out.push(("attn.v".into(), vec![a, 1], Init::Glorot { fan_in: a, fan_out: 1 }));

    let mut in_dim = cfg.mel_dim;
    for (k, &p) in cfg.dec_prenet_dims.iter().enumerate() {
        dense(&mut out, &format!("dec.prenet{k}"), in_dim, p);
        in_dim = p;
    }
    for (name, first) in [("dec.lstm1", in_dim), ("dec.lstm2", hd)] {
        let fan = first + d + hd;
        out.push((format!("{name}.w"), vec![fan, 4 * hd], Init::Glorot { fan_in: fan, fan_out: 4 * hd }));
        out.push((format!("{name}.b"), vec![1, 4 * hd], Init::ForgetBias));
    }
    out.push((
        "dec.frame.w".into(),
        vec![hd + d, cfg.mel_dim],
        Init::Glorot {
            fan_in: hd + d,
            fan_out: cfg.mel_dim,
        },
    ));
    out.push(("dec.frame.b".into(), vec![1, cfg.mel_dim], Init::Constant(norm_center())));
    dense(&mut out, "dec.stop", hd + d, 1);

    let mut in_ch = cfg.mel_dim;
    for k in 0..cfg.postnet_layers {
        let c = if k + 1 == cfg.postnet_layers {
            cfg.mel_dim
        } else {
            cfg.postnet_channels
        };
        let fan = cfg.postnet_kernel * in_ch;
        out.push((
            format!("post.conv{k}.w"),
            vec![fan, c],
            Init::Glorot {
                fan_in: fan,
                fan_out: cfg.postnet_kernel * c,
            },
        ));
        out.push((format!("post.conv{k}.b"), vec![1, c], Init::Zeros));
        in_ch = c;
    }
    out
}

pub(crate) fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = Rng::new(seed).split(0);
    let mut store = ParameterStore::new(seed);
    for (name, shape, init) in layout(cfg) {
        match init {
            Init::Glorot { fan_in, fan_out } => store.init_glorot(&name, &shape, fan_in, fan_out, &mut rng)?,
            Init::Zeros => store.init_zeros(&name, &shape)?,
            Init::Constant(v) => store.insert(&name, Tensor::full(&shape, v))?,
            Init::ForgetBias => {
                let n = shape[1] / 4;
                let data = (0..shape[1]).map(|i| if (n..2 * n).contains(&i) { 1.0 } else { 0.0 }).collect();
                store.insert(&name, Tensor::new(shape, data)?)?
            }
        }
    }
    Ok(store)
}
