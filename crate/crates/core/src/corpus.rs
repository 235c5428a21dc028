//! Synthetic, style-parameterised speech corpus.
//!
//! Each utterance is a character sequence paired with a log-mel spectrogram
//! drawn directly in the mel domain: every token becomes a run of frames
//! holding a fundamental hump plus a token-specific upper partial. Four
//! ground-truth style factors shape the rendering:
//!
//! * `pitch_base` moves the fundamental's centre band,
//! * `pitch_var` scales a per-token sinusoidal centre contour,
//! * `rate` sets frames per token (4 at the fastest, 16 at the slowest),
//! * `energy` scales linear amplitude.

use std::fmt::Write as _;
use std::path::Path;

use crate::audio::{log_floor, MelSpectrogram, LOG_FLOOR, N_MELS};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Characters in token-id order; id 0 is reserved for padding.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz .,~";
pub const END_MARKER: char = '~';
pub const VOCAB_SIZE: usize = 30;
pub const MIN_TOKENS: usize = 3;
pub const MAX_TOKENS: usize = 20;
pub const MAX_TEXT_LEN: usize = 64;

pub fn char_to_id(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c).map(|i| i + 1)
}

pub fn id_to_char(id: usize) -> Option<char> {
    if id == 0 {
        None
    } else {
        ALPHABET.chars().nth(id - 1)
    }
}

/// Maps text to token ids. Upper-case letters are folded to lower case.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            char_to_id(c).ok_or_else(|| Error::format("text", format!("character {c:?} not in alphabet")))
        })
        .collect()
}

pub fn decode_text(ids: &[usize]) -> Result<String> {
    ids.iter()
        .map(|&id| {
            id_to_char(id).ok_or(Error::Vocabulary {
                id,
                max: VOCAB_SIZE,
            })
        })
        .collect()
}

pub fn check_tokens(ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("token sequence is empty".into()));
    }
    if let Some(&id) = ids.iter().find(|&&id| id == 0 || id > VOCAB_SIZE) {
        return Err(Error::Vocabulary {
            id,
            max: VOCAB_SIZE,
        });
    }
    Ok(())
}

/// Ground-truth generative style factors, each normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleParams {
    pub pitch_base: f64,
    pub pitch_var: f64,
    pub rate: f64,
    pub energy: f64,
}

impl StyleParams {
    pub fn new(pitch_base: f64, pitch_var: f64, rate: f64, energy: f64) -> Result<Self> {
        let s = Self {
            pitch_base,
            pitch_var,
            rate,
            energy,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("style field {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn fields(&self) -> [(&'static str, f64); 4] {
        [
            ("pitch_base", self.pitch_base),
            ("pitch_var", self.pitch_var),
            ("rate", self.rate),
            ("energy", self.energy),
        ]
    }

    pub fn uniform(rng: &mut Rng) -> Self {
        Self {
            pitch_base: rng.uniform(),
            pitch_var: rng.uniform(),
            rate: rng.uniform(),
            energy: rng.uniform(),
        }
    }
}

/// Frames rendered per token: rate 0 → 16, rate 1 → 4.
pub fn frames_per_token(rate: f64) -> usize {
    (16.0 - 12.0 * rate).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: Vec<usize>,
    pub mel: MelSpectrogram,
    pub style: StyleParams,
}

impl Utterance {
    pub fn text_string(&self) -> String {
        decode_text(&self.text).expect("generated text is in the alphabet")
    }
}

const CENTER_LOW: f64 = 12.0;
const CENTER_SPAN: f64 = 36.0;
const CONTOUR_DEPTH: f64 = 5.0;
const FUNDAMENTAL_WIDTH: f64 = 1.5;
const PARTIAL_WIDTH: f64 = 2.0;

struct TokenVoice {
    amplitude: f64,
    partial_offset: f64,
    partial_gain: f64,
}

fn token_voice(id: usize) -> TokenVoice {
    let amplitude = match id_to_char(id) {
        Some(' ' | '.' | ',') => 0.15,
        Some(END_MARKER) => 0.5,
        _ => 1.0,
    };
    TokenVoice {
        amplitude,
        partial_offset: 9.0 + ((id * 7) % 8) as f64,
        partial_gain: 0.3 + 0.4 * ((id * 11) % 10) as f64 / 9.0,
    }
}

/// Renders the log-mel spectrogram for `text` under `style`. `phases` holds
/// one contour phase per token.
pub fn render_mel(text: &[usize], style: &StyleParams, phases: &[f64]) -> Result<MelSpectrogram> {
    style.validate()?;
    check_tokens(text)?;
    if phases.len() != text.len() {
        return Err(Error::contract("one contour phase per token required"));
    }
    let fpt = frames_per_token(style.rate);
    let frames = fpt * text.len();
    let mut values = Vec::with_capacity(frames * N_MELS);
    let base = CENTER_LOW + CENTER_SPAN * style.pitch_base;
    let two_pi = 2.0 * std::f64::consts::PI;
    for (&id, &phase) in text.iter().zip(phases) {
        let voice = token_voice(id);
        let amp = style.energy * voice.amplitude;
        for j in 0..fpt {
            let center = base + CONTOUR_DEPTH * style.pitch_var * (two_pi * j as f64 / fpt as f64 + phase).sin();
            let partial = center + voice.partial_offset;
            for band in 0..N_MELS {
                let b = band as f64;
                let lin = amp
                    * ((-(b - center).powi(2) / (2.0 * FUNDAMENTAL_WIDTH * FUNDAMENTAL_WIDTH)).exp()
                        + voice.partial_gain * (-(b - partial).powi(2) / (2.0 * PARTIAL_WIDTH * PARTIAL_WIDTH)).exp());
                values.push(lin.max(LOG_FLOOR).ln());
            }
        }
    }
    MelSpectrogram::from_log_values(frames, &values)
}

/// Text and per-token contour phases drawn from `rng`; never depends on style.
pub fn sample_script(rng: &mut Rng) -> (Vec<usize>, Vec<f64>) {
    let n = rng.int_range(MIN_TOKENS, MAX_TOKENS);
    let mut text = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        let u = rng.uniform();
        let c = if u < 0.80 {
            (b'a' + rng.int_range(0, 25) as u8) as char
        } else if u < 0.92 {
            ' '
        } else if u < 0.96 {
            '.'
        } else {
            ','
        };
        text.push(char_to_id(c).expect("alphabet character"));
    }
    text.push(char_to_id(END_MARKER).expect("end marker"));
    let phases = (0..n).map(|_| rng.uniform_range(0.0, 2.0 * std::f64::consts::PI)).collect();
    (text, phases)
}

/// One utterance, fully determined by the stream state of `rng` and `style`.
pub fn gen_utterance(rng: &mut Rng, style: StyleParams, id: &str) -> Result<Utterance> {
    style.validate()?;
    let (text, phases) = sample_script(rng);
    let mel = render_mel(&text, &style, &phases)?;
    Ok(Utterance {
        id: id.to_string(),
        text,
        mel,
        style,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<Utterance> {
        self.utterances
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(u, _)| u.clone())
            .collect()
    }

    /// Writes `<id>.mel` files, then `manifest.tsv` last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("id\tsplit\ttext\tpitch_base\tpitch_var\trate\tenergy\n");
        for (u, s) in self.utterances.iter().zip(&self.splits) {
            u.mel.save(&dir.join(format!("{}.mel", u.id)))?;
            let st = u.style;
            writeln!(
                manifest,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                u.id,
                s.as_str(),
                u.text_string(),
                st.pitch_base,
                st.pitch_var,
                st.rate,
                st.energy
            )
            .expect("writing to a String cannot fail");
        }
        let path = dir.join("manifest.tsv");
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.tsv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut utterances = Vec::new();
        let mut splits = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parse_err = |d: String| Error::Parse { line: i + 1, detail: d };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(parse_err(format!("expected 7 columns, found {}", cols.len())));
            }
            let split = match cols[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(parse_err(format!("unknown split {other}"))),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{s}: {e}")));
            let style = StyleParams::new(num(cols[3])?, num(cols[4])?, num(cols[5])?, num(cols[6])?)?;
            let text = encode_text(cols[2])?;
            let mel = MelSpectrogram::load(&dir.join(format!("{}.mel", cols[0])))?;
            utterances.push(Utterance {
                id: cols[0].to_string(),
                text,
                mel,
                style,
            });
            splits.push(split);
        }
        if utterances.is_empty() {
            return Err(Error::EmptyInput(format!("{} lists no utterances", path.display())));
        }
        Ok(Self { utterances, splits })
    }
}

/// `n` utterances with uniformly drawn styles. Each utterance owns the
/// child stream `rng.split(i)`; the last fifth (rounded down) is the test split.
pub fn gen_corpus(rng: &Rng, n: usize) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::contract("corpus size must be at least 1"));
    }
    let n_test = n / 5;
    let mut utterances = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = rng.split(i as u64);
        let style = StyleParams::uniform(&mut stream);
        utterances.push(gen_utterance(&mut stream, style, &format!("utt{i:05}"))?);
        splits.push(if i < n - n_test { Split::Train } else { Split::Test });
    }
    Ok(Corpus { utterances, splits })
}

/// Padded minibatch. Mel rows are item-major: frame `t` of item `b` is row
/// `b * max_frames + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub styles: Vec<StyleParams>,
    pub text_ids: Vec<usize>,
    pub text_lengths: Vec<usize>,
    pub max_text: usize,
    pub mels: Vec<f64>,
    pub mel_lengths: Vec<usize>,
    pub max_frames: usize,
    pub stop_targets: Vec<f64>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::contract("batch of zero utterances"));
        }
        for u in utts {
            check_tokens(&u.text)?;
        }
        let max_text = utts.iter().map(|u| u.text.len()).max().expect("non-empty");
        let max_frames = utts.iter().map(|u| u.mel.frames()).max().expect("non-empty");
        let b = utts.len();
        let mut text_ids = vec![0; b * max_text];
        let mut mels = vec![log_floor(); b * max_frames * N_MELS];
        let mut stop_targets = vec![0.0; b * max_frames];
        for (i, u) in utts.iter().enumerate() {
            text_ids[i * max_text..i * max_text + u.text.len()].copy_from_slice(&u.text);
            let src = u.mel.to_f64();
            mels[i * max_frames * N_MELS..i * max_frames * N_MELS + src.len()].copy_from_slice(&src);
            for t in u.mel.frames() - 1..max_frames {
                stop_targets[i * max_frames + t] = 1.0;
            }
        }
        Ok(Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            styles: utts.iter().map(|u| u.style).collect(),
            text_ids,
            text_lengths: utts.iter().map(|u| u.text.len()).collect(),
            max_text,
            mels,
            mel_lengths: utts.iter().map(|u| u.mel.frames()).collect(),
            max_frames,
            stop_targets,
        })
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    /// 1.0 for real frames, 0.0 for padding; one entry per mel row.
    pub fn frame_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.size() * self.max_frames];
        for (b, &len) in self.mel_lengths.iter().enumerate() {
            m[b * self.max_frames..b * self.max_frames + len].fill(1.0);
        }
        m
    }

    pub fn text_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.size() * self.max_text];
        for (b, &len) in self.text_lengths.iter().enumerate() {
            m[b * self.max_text..b * self.max_text + len].fill(true);
        }
        m
    }
}

/// Length-bucketed, shuffled batches. Utterances are shuffled, sorted by
/// frame count within windows of four batches, chunked, and the batch order
/// is shuffled again.
pub fn make_batches(utts: &[Utterance], batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if utts.is_empty() {
        return Err(Error::contract("cannot batch an empty corpus"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    rng.shuffle(&mut order);
    for window in order.chunks_mut(batch_size * 4) {
        window.sort_by_key(|&i| utts[i].mel.frames());
    }
    let mut batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Utterance> = chunk.iter().map(|&i| &utts[i]).collect();
            Batch::from_utterances(&members)
        })
        .collect::<Result<Vec<_>>>()?;
    rng.shuffle(&mut batches);
    Ok(batches)
}
