use crate::attention::{AttentionConfig, AttentionKind};
use crate::error::{Error, Result};

/// Sizes, regularisers and architectural switches of the synthesizer.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_symbols: usize,
    pub embedding_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    pub encoder_channels: usize,
    /// Units per direction of the bidirectional encoder LSTM.
    pub encoder_lstm: usize,
    /// Width of the input d-vector.
    pub speaker_dim: usize,
    /// Width of the linear speaker projection; used when `mod_speaker_projection` is set.
    pub speaker_projection_dim: usize,
    pub prenet_dims: [usize; 2],
    pub decoder_lstm: [usize; 2],
    pub mel_channels: usize,
    pub reduction_factor: usize,
    pub attention: AttentionConfig,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    /// Keys carry a linear projection of the d-vector instead of the raw vector.
    pub mod_speaker_projection: bool,
    /// Second decoder LSTM also sees the previous context.
    pub mod_skip_context: bool,
    /// Frame projection reads the previous context instead of the current one.
    pub mod_prev_context: bool,
    pub zoneout: [f64; 2],
    pub prenet_dropout: f64,
    pub encoder_dropout: f64,
}

impl SynthConfig {
    /// Toy dimensions with the given attention and no modifications.
    pub fn toy(n_symbols: usize, kind: AttentionKind) -> Self {
        let attention = match kind {
            AttentionKind::Lsa => AttentionConfig::lsa(32),
            AttentionKind::Dca => AttentionConfig::dca(32),
        };
        Self {
            n_symbols,
            embedding_dim: 32,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_channels: 32,
            encoder_lstm: 16,
            speaker_dim: 16,
            speaker_projection_dim: 16,
            prenet_dims: [32, 32],
            decoder_lstm: [64, 64],
            mel_channels: 16,
            reduction_factor: 2,
            attention,
            postnet_layers: 3,
            postnet_channels: 32,
            postnet_kernel: 5,
            mod_speaker_projection: false,
            mod_skip_context: false,
            mod_prev_context: false,
            zoneout: [0.1, 0.1],
            prenet_dropout: 0.5,
            encoder_dropout: 0.1,
        }
    }

    /// Named model variant: `lsa`, `dca` or `proposed` (DCA with all three
    /// modifications and the heavier regularisation).
    pub fn preset(name: &str, n_symbols: usize) -> Result<Self> {
        match name {
            "lsa" => Ok(Self::toy(n_symbols, AttentionKind::Lsa)),
            "dca" => Ok(Self::toy(n_symbols, AttentionKind::Dca)),
            "proposed" => {
                let mut c = Self::toy(n_symbols, AttentionKind::Dca);
                c.mod_speaker_projection = true;
                c.mod_skip_context = true;
                c.mod_prev_context = true;
                c.attention.dynamic_dropout = 0.1;
                c.zoneout = [0.1, 0.15];
                Ok(c)
            }
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    /// Same architecture with every stochastic regulariser disabled.
    pub fn without_regularisers(mut self) -> Self {
        self.zoneout = [0.0, 0.0];
        self.prenet_dropout = 0.0;
        self.encoder_dropout = 0.0;
        self.attention.dynamic_dropout = 0.0;
        self
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.encoder_lstm
    }

    /// Width of the speaker block appended to every key.
    pub fn speaker_block_dim(&self) -> usize {
        if self.mod_speaker_projection {
            self.speaker_projection_dim
        } else {
            self.speaker_dim
        }
    }

    pub fn key_dim(&self) -> usize {
        self.encoder_dim() + self.speaker_block_dim()
    }

    pub fn frames_per_step(&self) -> usize {
        self.reduction_factor
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_symbols", self.n_symbols),
            ("embedding_dim", self.embedding_dim),
            ("encoder_channels", self.encoder_channels),
            ("encoder_lstm", self.encoder_lstm),
            ("speaker_dim", self.speaker_dim),
            ("prenet_dims[0]", self.prenet_dims[0]),
            ("prenet_dims[1]", self.prenet_dims[1]),
            ("decoder_lstm[0]", self.decoder_lstm[0]),
            ("decoder_lstm[1]", self.decoder_lstm[1]),
            ("mel_channels", self.mel_channels),
            ("reduction_factor", self.reduction_factor),
            ("postnet_channels", self.postnet_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.mod_speaker_projection && self.speaker_projection_dim == 0 {
            return Err(Error::Config("speaker_projection_dim must be positive".into()));
        }
        if self.postnet_layers < 2 {
            return Err(Error::Config("postnet needs at least two layers".into()));
        }
        for (name, k) in [("encoder_kernel", self.encoder_kernel), ("postnet_kernel", self.postnet_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        for (name, p) in [("zoneout[0]", self.zoneout[0]), ("zoneout[1]", self.zoneout[1])] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        for (name, p) in [("prenet_dropout", self.prenet_dropout), ("encoder_dropout", self.encoder_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        self.attention.validate()
    }
}
