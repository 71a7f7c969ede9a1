use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{normal_tensor, LayerNorm, Linear};
use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Hyperparameters of the bidirectional encoder used for both pooling stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for BertConfig {
    fn default() -> Self {
        Self { model_dim: 512, heads: 8, layers: 1, ff_dim: 1024, dropout: 0.1, max_positions: 64 }
    }
}

impl BertConfig {
    /// Checks the config for sequences of up to `seq_len` rows (the class token adds one).
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_positions < seq_len + 1 {
            return Err(Error::Config(format!(
                "max_positions {} cannot hold {} rows plus the class token",
                self.max_positions, seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: LayerNorm,
}

/// Output of an encoder pass.
pub struct EncoderOutput<T: Scalar> {
    /// Encoder output at the class-token position, `[N, D]`.
    pub cls: Var<T>,
    /// Attention probabilities per layer, each `[N * heads, L + 1, L + 1]`.
    pub attention: Vec<Tensor<T>>,
}

/// Post-norm transformer encoder with a learned class token and learned positions.
#[derive(Debug, Clone)]
pub struct BertEncoder {
    pub config: BertConfig,
    cls_token: ParamId,
    positions: ParamId,
    layers: Vec<EncoderLayer>,
}

impl BertEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: BertConfig, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        let cls_token = store.add_param(&format!("{name}.cls_token"), normal_tensor(&[d], INIT_STD, rng));
        let positions =
            store.add_param(&format!("{name}.positions"), normal_tensor(&[config.max_positions, d], INIT_STD, rng));
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    query: Linear::with_normal(store, &format!("{p}.query"), d, d, INIT_STD, rng),
                    key: Linear::with_normal(store, &format!("{p}.key"), d, d, INIT_STD, rng),
                    value: Linear::with_normal(store, &format!("{p}.value"), d, d, INIT_STD, rng),
                    attn_out: Linear::with_normal(store, &format!("{p}.attn_out"), d, d, INIT_STD, rng),
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d),
                    ff_in: Linear::with_normal(store, &format!("{p}.ff_in"), d, config.ff_dim, INIT_STD, rng),
                    ff_out: Linear::with_normal(store, &format!("{p}.ff_out"), config.ff_dim, d, INIT_STD, rng),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d),
                }
            })
            .collect();
        Self { config, cls_token, positions, layers }
    }

    /// Encodes `[N, L, D]` rows and returns the class-token output.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, seq: &Var<T>) -> EncoderOutput<T> {
        let shape = seq.shape().to_vec();
        assert_eq!(shape.len(), 3, "encoder input must be [N, L, D]");
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.config.model_dim, "encoder width mismatch");
        assert!(l < self.config.max_positions, "sequence of {l} rows exceeds max_positions");
        let tokens = l + 1;
        let pos_all = ctx.param(self.positions);
        let pos = if tokens == self.config.max_positions {
            pos_all
        } else {
            let rows: Vec<Var<T>> = (0..tokens).map(|i| pos_all.select(0, i).reshape(&[1, d])).collect();
            Var::concat(&rows, 0)
        };
        let mut h = seq.prepend_token(&ctx.param(self.cls_token)).add_broadcast(&pos);
        h = ctx.dropout(&h, self.config.dropout);
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, probs) = self.layer_forward(ctx, layer, &h, n, tokens);
            attention.push(probs);
            h = next;
        }
        EncoderOutput { cls: h.select(1, 0), attention }
    }

    fn layer_forward<T: Scalar>(
        &self,
        ctx: &Ctx<T>,
        layer: &EncoderLayer,
        x: &Var<T>,
        n: usize,
        tokens: usize,
    ) -> (Var<T>, Tensor<T>) {
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let split = |v: Var<T>| {
            v.reshape(&[n, tokens, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * heads, tokens, dh])
        };
        let q = split(layer.query.forward(ctx, x));
        let k = split(layer.key.forward(ctx, x));
        let v = split(layer.value.forward(ctx, x));
        let scores = q.bmm(&k, false, true).scale(T::lit(1.0 / (dh as f64).sqrt()));
        let probs = scores.softmax_last();
        let probs_value = probs.value().clone();
        let attended = ctx
            .dropout(&probs, self.config.dropout)
            .bmm(&v, false, false)
            .reshape(&[n, heads, tokens, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[n, tokens, d]);
        let attn = ctx.dropout(&layer.attn_out.forward(ctx, &attended), self.config.dropout);
        let h = layer.attn_norm.forward(ctx, &x.add(&attn));
        let ff = layer.ff_out.forward(ctx, &layer.ff_in.forward(ctx, &h).gelu());
        let ff = ctx.dropout(&ff, self.config.dropout);
        (layer.ff_norm.forward(ctx, &h.add(&ff)), probs_value)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn encoder(layers: usize, seed: u64) -> (ParamStore<f64>, BertEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BertConfig { model_dim: 16, heads: 4, layers, ff_dim: 32, dropout: 0.1, max_positions: 8 };
        let enc = BertEncoder::new(&mut store, "bert", cfg, &mut rng);
        (store, enc)
    }

    fn random_seq(n: usize, l: usize, d: usize, seed: u64) -> Var<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(normal_tensor(&[n, l, d], 1.0, &mut rng))
    }

    #[test]
    fn zero_layers_returns_token_plus_position() {
        let (store, enc) = encoder(0, 1);
        let ctx = Ctx::eval(&store);
        let out = enc.forward(&ctx, &random_seq(2, 4, 16, 2));
        let tok = store.get(store.id("bert.cls_token").unwrap()).data();
        let pos = &store.get(store.id("bert.positions").unwrap()).data()[..16];
        for b in 0..2 {
            for j in 0..16 {
                assert_eq!(out.cls.value().data()[b * 16 + j], tok[j] + pos[j]);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, enc) = encoder(2, 3);
        let ctx = Ctx::eval(&store);
        let out = enc.forward(&ctx, &random_seq(3, 5, 16, 4));
        assert_eq!(out.attention.len(), 2);
        for probs in &out.attention {
            assert_eq!(probs.shape(), [12, 6, 6]);
            for row in probs.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_row_independent() {
        let (store, enc) = encoder(1, 5);
        let ctx = Ctx::eval(&store);
        let one = random_seq(1, 4, 16, 6);
        let twice = Var::concat(&[one.clone(), one.clone()], 0);
        let a = enc.forward(&ctx, &twice).cls;
        let d = a.value().data();
        for j in 0..16 {
            assert!((d[j] - d[16 + j]).abs() < 1e-12);
        }
        let b = enc.forward(&ctx, &twice).cls;
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = BertConfig { model_dim: 10, heads: 4, ..BertConfig::default() };
        assert!(cfg.validate(4).is_err());
        let cfg = BertConfig { max_positions: 4, ..BertConfig::default() };
        assert!(cfg.validate(4).is_err());
        assert!(BertConfig::default().validate(16).is_ok());
    }
}
