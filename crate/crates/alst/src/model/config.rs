use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// One token per utterance: the mean of all its frames.
    Utterance,
    /// One token per aligned phoneme segment.
    Phoneme,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Each utterance is encoded as its own sequence; no positions.
    None,
    /// The whole patient history is one sequence; no positions.
    LongitudinalNoPos,
    OrderTrainable,
    OrderSinusoid,
    DaySinusoid,
    DayTrainable,
}

impl PositionMode {
    pub const ALL: [PositionMode; 6] = [
        PositionMode::None,
        PositionMode::LongitudinalNoPos,
        PositionMode::OrderTrainable,
        PositionMode::OrderSinusoid,
        PositionMode::DaySinusoid,
        PositionMode::DayTrainable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PositionMode::None => "none",
            PositionMode::LongitudinalNoPos => "longitudinal_no_pos",
            PositionMode::OrderTrainable => "order_trainable",
            PositionMode::OrderSinusoid => "order_sinusoid",
            PositionMode::DaySinusoid => "day_sinusoid",
            PositionMode::DayTrainable => "day_trainable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether utterances of one patient may attend to each other.
    pub fn is_longitudinal(self) -> bool {
        self != PositionMode::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlstConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub pooling_mode: PoolingMode,
    pub position_mode: PositionMode,
    pub lambda_ce: f64,
    /// Rows of the order table; later ranks share the last row.
    pub max_order: usize,
    pub day_bucket_size: usize,
    pub max_day_buckets: usize,
    /// Rows of the within-utterance position table.
    pub max_utterance_tokens: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub embedding_init_std: f64,
    /// Phoneme labels with a learned embedding row; unknown labels share one
    /// extra row. Ignored in utterance pooling.
    pub phoneme_vocab: Vec<String>,
}

impl Default for AlstConfig {
    fn default() -> Self {
        AlstConfig {
            input_dim: 1024,
            hidden_dim: 512,
            num_layers: 2,
            num_heads: 1,
            ffn_dim: 2048,
            num_classes: NUM_CLASSES,
            pooling_mode: PoolingMode::Utterance,
            position_mode: PositionMode::LongitudinalNoPos,
            lambda_ce: 1.0,
            max_order: 64,
            day_bucket_size: 30,
            max_day_buckets: 120,
            max_utterance_tokens: 128,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            embedding_init_std: 0.02,
            phoneme_vocab: Vec::new(),
        }
    }
}

impl AlstConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_order", self.max_order),
            ("day_bucket_size", self.day_bucket_size),
            ("max_day_buckets", self.max_day_buckets),
            ("max_utterance_tokens", self.max_utterance_tokens),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if !(self.lambda_ce >= 0.0 && self.lambda_ce.is_finite()) {
            return fail(format!("lambda_ce must be finite and >= 0, got {}", self.lambda_ce));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Rows of the token-identity table: the vocabulary plus `<unk>` in
    /// phoneme pooling, one generic row in utterance pooling.
    pub fn token_table_rows(&self) -> usize {
        match self.pooling_mode {
            PoolingMode::Utterance => 1,
            PoolingMode::Phoneme => self.phoneme_vocab.len() + 1,
        }
    }

    pub fn token_id(&self, phoneme: &str) -> usize {
        match self.pooling_mode {
            PoolingMode::Utterance => 0,
            PoolingMode::Phoneme => self
                .phoneme_vocab
                .binary_search_by(|p| p.as_str().cmp(phoneme))
                .unwrap_or(self.phoneme_vocab.len()),
        }
    }
}
