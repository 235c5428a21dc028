use crate::audio::N_MELS;
use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};

/// Network dimensions. `enc_lstm_units` is per direction, so encoder states
/// have `2 * enc_lstm_units` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub mel_dim: usize,
    pub text_embed_dim: usize,
    pub enc_conv_channels: usize,
    pub enc_conv_layers: usize,
    pub enc_conv_kernel: usize,
    pub enc_lstm_units: usize,
    pub ref_conv_channels: Vec<usize>,
    pub ref_gru_units: usize,
    pub attn_dim: usize,
    pub attn_location_filters: usize,
    pub attn_location_kernel: usize,
    pub dec_prenet_dims: Vec<usize>,
    pub dec_lstm_units: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub zoneout_prob: f64,
    pub prenet_dropout: f64,
}

const KEYS: &[&str] = &[
    "latent_dim",
    "mel_dim",
    "text_embed_dim",
    "enc_conv_channels",
    "enc_conv_layers",
    "enc_conv_kernel",
    "enc_lstm_units",
    "ref_conv_channels",
    "ref_gru_units",
    "attn_dim",
    "attn_location_filters",
    "attn_location_kernel",
    "dec_prenet_dims",
    "dec_lstm_units",
    "postnet_channels",
    "postnet_layers",
    "postnet_kernel",
    "zoneout_prob",
    "prenet_dropout",
];

impl ModelConfig {
    /// Full-size dimensions.
    pub fn full() -> Self {
        Self {
            latent_dim: 32,
            mel_dim: N_MELS,
            text_embed_dim: 512,
            enc_conv_channels: 512,
            enc_conv_layers: 3,
            enc_conv_kernel: 5,
            enc_lstm_units: 256,
            ref_conv_channels: vec![32, 32, 64, 64, 128, 128],
            ref_gru_units: 128,
            attn_dim: 128,
            attn_location_filters: 32,
            attn_location_kernel: 31,
            dec_prenet_dims: vec![256, 256],
            dec_lstm_units: 1024,
            postnet_channels: 512,
            postnet_layers: 5,
            postnet_kernel: 5,
            zoneout_prob: 0.1,
            prenet_dropout: 0.5,
        }
    }

    /// Single-core scale used by the tests and the default CLI runs.
    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            mel_dim: N_MELS,
            text_embed_dim: 32,
            enc_conv_channels: 32,
            enc_conv_layers: 3,
            enc_conv_kernel: 5,
            enc_lstm_units: 16,
            ref_conv_channels: vec![16, 16, 32, 32, 64, 64],
            ref_gru_units: 64,
            attn_dim: 32,
            attn_location_filters: 8,
            attn_location_kernel: 15,
            dec_prenet_dims: vec![64, 64],
            dec_lstm_units: 64,
            postnet_channels: 64,
            postnet_layers: 5,
            postnet_kernel: 5,
            zoneout_prob: 0.1,
            prenet_dropout: 0.5,
        }
    }

    /// Tiny dimensions for finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            latent_dim: 4,
            mel_dim: N_MELS,
            text_embed_dim: 16,
            enc_conv_channels: 16,
            enc_conv_layers: 3,
            enc_conv_kernel: 5,
            enc_lstm_units: 8,
            ref_conv_channels: vec![16; 6],
            ref_gru_units: 16,
            attn_dim: 16,
            attn_location_filters: 16,
            attn_location_kernel: 5,
            dec_prenet_dims: vec![16, 16],
            dec_lstm_units: 16,
            postnet_channels: 16,
            postnet_layers: 5,
            postnet_kernel: 5,
            zoneout_prob: 0.1,
            prenet_dropout: 0.5,
        }
    }

    /// Width of the text-encoder states.
    pub fn enc_dim(&self) -> usize {
        2 * self.enc_lstm_units
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("text_embed_dim", self.text_embed_dim),
            ("enc_conv_channels", self.enc_conv_channels),
            ("enc_conv_layers", self.enc_conv_layers),
            ("enc_lstm_units", self.enc_lstm_units),
            ("ref_gru_units", self.ref_gru_units),
            ("attn_dim", self.attn_dim),
            ("attn_location_filters", self.attn_location_filters),
            ("dec_lstm_units", self.dec_lstm_units),
            ("postnet_channels", self.postnet_channels),
            ("postnet_layers", self.postnet_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.mel_dim != N_MELS {
            return Err(Error::config(format!("mel_dim must be {N_MELS}")));
        }
        for (name, k) in [
            ("enc_conv_kernel", self.enc_conv_kernel),
            ("attn_location_kernel", self.attn_location_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.ref_conv_channels.len() != 6 || self.ref_conv_channels.contains(&0) {
            return Err(Error::config("ref_conv_channels needs six positive entries"));
        }
        if self.dec_prenet_dims.is_empty() || self.dec_prenet_dims.contains(&0) {
            return Err(Error::config("dec_prenet_dims needs positive entries"));
        }
        if !(0.0..1.0).contains(&self.zoneout_prob) {
            return Err(Error::config(format!("zoneout_prob {} outside [0, 1)", self.zoneout_prob)));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::config(format!("prenet_dropout {} outside [0, 1)", self.prenet_dropout)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("latent_dim", self.latent_dim);
        kv.set("mel_dim", self.mel_dim);
        kv.set("text_embed_dim", self.text_embed_dim);
        kv.set("enc_conv_channels", self.enc_conv_channels);
        kv.set("enc_conv_layers", self.enc_conv_layers);
        kv.set("enc_conv_kernel", self.enc_conv_kernel);
        kv.set("enc_lstm_units", self.enc_lstm_units);
        kv.set("ref_conv_channels", join_list(&self.ref_conv_channels));
        kv.set("ref_gru_units", self.ref_gru_units);
        kv.set("attn_dim", self.attn_dim);
        kv.set("attn_location_filters", self.attn_location_filters);
        kv.set("attn_location_kernel", self.attn_location_kernel);
        kv.set("dec_prenet_dims", join_list(&self.dec_prenet_dims));
        kv.set("dec_lstm_units", self.dec_lstm_units);
        kv.set("postnet_channels", self.postnet_channels);
        kv.set("postnet_layers", self.postnet_layers);
        kv.set("postnet_kernel", self.postnet_kernel);
        kv.set("zoneout_prob", self.zoneout_prob);
        kv.set("prenet_dropout", self.prenet_dropout);
        kv
    }

    /// Reads the model keys of `kv` over `base`; other keys are ignored.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let cfg = Self {
            latent_dim: kv.parsed_or("latent_dim", base.latent_dim)?,
            mel_dim: kv.parsed_or("mel_dim", base.mel_dim)?,
            text_embed_dim: kv.parsed_or("text_embed_dim", base.text_embed_dim)?,
            enc_conv_channels: kv.parsed_or("enc_conv_channels", base.enc_conv_channels)?,
            enc_conv_layers: kv.parsed_or("enc_conv_layers", base.enc_conv_layers)?,
            enc_conv_kernel: kv.parsed_or("enc_conv_kernel", base.enc_conv_kernel)?,
            enc_lstm_units: kv.parsed_or("enc_lstm_units", base.enc_lstm_units)?,
            ref_conv_channels: kv.list_or("ref_conv_channels", base.ref_conv_channels.clone())?,
            ref_gru_units: kv.parsed_or("ref_gru_units", base.ref_gru_units)?,
            attn_dim: kv.parsed_or("attn_dim", base.attn_dim)?,
            attn_location_filters: kv.parsed_or("attn_location_filters", base.attn_location_filters)?,
            attn_location_kernel: kv.parsed_or("attn_location_kernel", base.attn_location_kernel)?,
            dec_prenet_dims: kv.list_or("dec_prenet_dims", base.dec_prenet_dims.clone())?,
            dec_lstm_units: kv.parsed_or("dec_lstm_units", base.dec_lstm_units)?,
            postnet_channels: kv.parsed_or("postnet_channels", base.postnet_channels)?,
            postnet_layers: kv.parsed_or("postnet_layers", base.postnet_layers)?,
            postnet_kernel: kv.parsed_or("postnet_kernel", base.postnet_kernel)?,
            zoneout_prob: kv.parsed_or("zoneout_prob", base.zoneout_prob)?,
            prenet_dropout: kv.parsed_or("prenet_dropout", base.prenet_dropout)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn fingerprint(&self) -> String {
        self.to_kv().fingerprint()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
