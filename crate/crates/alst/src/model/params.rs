//! Parameter storage. All weights live in one flat `Vec<Tensor>` so the
//! optimizer can treat them uniformly; [`Layout`] names the slots.

use numcore::init::{normal, xavier_uniform};
use numcore::Tensor;
use rand::Rng;

use super::config::{AlstConfig, PositionMode};
use crate::error::{Error, Result};

/// Slot indices of one transformer block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln2: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub input: Linear,
    pub blocks: Vec<BlockLayout>,
    pub output: Linear,
    pub token_embedding: usize,
    pub within_position: Option<usize>,
    pub order_embedding: Option<usize>,
    pub day_embedding: Option<usize>,
    pub scorer: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlstParams {
    pub config: AlstConfig,
    pub layout: Layout,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Embedding,
}

struct Builder<'c> {
    config: &'c AlstConfig,
    names: Vec<String>,
    shapes: Vec<(Vec<usize>, Init)>,
}

impl Builder<'_> {
    fn slot(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((shape, init));
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.slot(format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier),
            bias: self.slot(format!("{name}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str) -> Norm {
        let h = self.config.hidden_dim;
        Norm {
            gain: self.slot(format!("{name}.gain"), vec![h], Init::Ones),
            bias: self.slot(format!("{name}.bias"), vec![h], Init::Zeros),
        }
    }

    fn table(&mut self, name: &str, rows: usize) -> usize {
        self.slot(name.into(), vec![rows, self.config.hidden_dim], Init::Embedding)
    }
}

fn build_layout(config: &AlstConfig) -> (Layout, Builder<'_>) {
    let (h, f) = (config.hidden_dim, config.ffn_dim);
    let mut b = Builder {
        config,
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let input = b.linear("input_projection", config.input_dim, h);
    let blocks = (0..config.num_layers)
        .map(|l| {
            let p = format!("blocks.{l}");
            BlockLayout {
                query: b.linear(&format!("{p}.query"), h, h),
                key: b.linear(&format!("{p}.key"), h, h),
                value: b.linear(&format!("{p}.value"), h, h),
                attn_out: b.linear(&format!("{p}.attn_out"), h, h),
                ln1: b.norm(&format!("{p}.ln1")),
                ffn_in: b.linear(&format!("{p}.ffn_in"), h, f),
                ffn_out: b.linear(&format!("{p}.ffn_out"), f, h),
                ln2: b.norm(&format!("{p}.ln2")),
            }
        })
        .collect();
    let output = b.linear("output_projection", h, h);
    let token_embedding = b.table("token_embedding", config.token_table_rows());
    let trainable_positions = matches!(
        config.position_mode,
        PositionMode::OrderTrainable | PositionMode::DayTrainable
    );
    let within_position = trainable_positions.then(|| b.table("within_utterance_position", config.max_utterance_tokens));
    let order_embedding =
        (config.position_mode == PositionMode::OrderTrainable).then(|| b.table("order_embedding", config.max_order));
    let day_embedding =
        (config.position_mode == PositionMode::DayTrainable).then(|| b.table("day_embedding", config.max_day_buckets));
    let scorer = b.linear("scorer", h, 1 + config.num_classes);
    let layout = Layout {
        input,
        blocks,
        output,
        token_embedding,
        within_position,
        order_embedding,
        day_embedding,
        scorer,
    };
    (layout, b)
}

impl AlstParams {
    /// Fresh weights: Xavier-uniform matrices, zero biases, unit layer-norm
    /// gains, `N(0, embedding_init_std)` tables.
    pub fn init<R: Rng + ?Sized>(config: &AlstConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        let tensors = builder
            .shapes
            .iter()
            .map(|(shape, init)| match init {
                Init::Xavier => xavier_uniform(shape[0], shape[1], rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, 1.0),
                Init::Embedding => normal(shape, config.embedding_init_std, rng),
            })
            .collect();
        Ok(AlstParams {
            config: config.clone(),
            layout,
            names: builder.names,
            tensors,
        })
    }

    /// Rebuilds from named tensors (checkpoint load). Names and shapes must
    /// match what `config` implies.
    pub fn from_named(config: &AlstConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        if named.len() != builder.names.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, config implies {}",
                named.len(),
                builder.names.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, (shape, _))) in named.into_iter().zip(builder.names.iter().zip(&builder.shapes)) {
            if &name != want_name || t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} {:?} does not match expected {want_name} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(AlstParams {
            config: config.clone(),
            layout,
            names: builder.names,
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
}

/// Closed-form trainable parameter count for `config`:
///
/// ```text
///   input projection      in*H + H
/// + per layer             4(H*H + H)            q, k, v, attention output
///                       + 2 * 2H                two layer norms
///                       + H*F + F + F*H + H     feed-forward
/// + output projection     H*H + H
/// + scorer                H*(1 + C) + (1 + C)
/// + token table           T*H   (T = 1 for utterance pooling, |vocab| + 1 for phonemes)
/// + position tables       (P + R)*H for trainable modes
///                         (P within-utterance rows, R order or day rows)
/// ```
pub fn parameter_count_formula(config: &AlstConfig) -> usize {
    let (i, h, f, c) = (config.input_dim, config.hidden_dim, config.ffn_dim, config.num_classes);
    let per_layer = 4 * (h * h + h) + 4 * h + h * f + f + f * h + h;
    let positions = match config.position_mode {
        PositionMode::OrderTrainable => (config.max_utterance_tokens + config.max_order) * h,
        PositionMode::DayTrainable => (config.max_utterance_tokens + config.max_day_buckets) * h,
        _ => 0,
    };
    i * h + h + config.num_layers * per_layer + h * h + h + h * (1 + c) + (1 + c) + config.token_table_rows() * h + positions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PoolingMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn count(config: &AlstConfig) -> usize {
        AlstParams::init(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().parameter_count()
    }

    #[test]
    fn default_config_is_about_seven_million() {
        let c = AlstConfig::default();
        assert_eq!(count(&c), 7_095_814);
        assert_eq!(parameter_count_formula(&c), 7_095_814);
    }

    #[test]
    fn hidden_one_toy_config_by_hand() {
        let c = AlstConfig {
            input_dim: 3,
            hidden_dim: 1,
            num_layers: 1,
            ffn_dim: 2,
            ..AlstConfig::default()
        };
        // input 3+1, block 4*(1+1) + 4 + (2+2) + (2+1), output 1+1,
        // scorer 6+6, generic token row 1.
        let expected = 4 + (8 + 4 + 4 + 3) + 2 + 12 + 1;
        assert_eq!(count(&c), expected);
        assert_eq!(parameter_count_formula(&c), expected);
    }

    #[test]
    fn layers_add_one_block_each() {
        let base = AlstConfig {
            input_dim: 7,
            hidden_dim: 8,
            ffn_dim: 12,
            num_layers: 1,
            ..AlstConfig::default()
        };
        let block = 4 * (64 + 8) + 32 + 8 * 12 + 12 + 12 * 8 + 8;
        for layers in 2..5 {
            let c = AlstConfig { num_layers: layers, ..base.clone() };
            assert_eq!(count(&c) - count(&base), (layers - 1) * block);
        }
    }

    #[test]
    fn formula_matches_every_mode() {
        for position_mode in PositionMode::ALL {
            for pooling_mode in [PoolingMode::Utterance, PoolingMode::Phoneme] {
                let c = AlstConfig {
                    input_dim: 5,
                    hidden_dim: 4,
                    ffn_dim: 6,
                    position_mode,
                    pooling_mode,
                    phoneme_vocab: vec!["AY1".into(), "T".into()],
                    ..AlstConfig::default()
                };
                assert_eq!(count(&c), parameter_count_formula(&c), "{position_mode:?} {pooling_mode:?}");
            }
        }
    }

    #[test]
    fn from_named_round_trip_and_mismatch() {
        let c = AlstConfig {
            input_dim: 3,
            hidden_dim: 4,
            ffn_dim: 4,
            ..AlstConfig::default()
        };
        let p = AlstParams::init(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let named: Vec<_> = p.names.iter().cloned().zip(p.tensors.iter().cloned()).collect();
        assert_eq!(AlstParams::from_named(&c, named.clone()).unwrap(), p);
        let wider = AlstConfig { hidden_dim: 8, ..c };
        assert!(AlstParams::from_named(&wider, named).is_err());
    }
}
