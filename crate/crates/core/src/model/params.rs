use rand::Rng;

use super::config::{Dimensions, ModelConfig};
use crate::aggregator::AggregatorParams;
use crate::encoder::{glorot, uniform, EncoderParams};
use crate::error::{HsacnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Review-level parameters of one tower (user or item).
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams<P> {
    pub aggregator: AggregatorParams<P>,
    /// `W_u` (or `W_i`), `[d_l, d_s]`.
    pub projection: P,
    /// `b_proj_u` (or `b_proj_i`), `[d_l]`.
    pub projection_bias: P,
    /// Free embeddings, one `d_l` row per entity.
    pub embedding: P,
    /// Rating bias per entity.
    pub bias: P,
}

impl<P> TowerParams<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> TowerParams<Q> {
        TowerParams {
            aggregator: self.aggregator.map(|n, p| f(&format!("{prefix}.aggregator.{n}"), p)),
            projection: f(&format!("{prefix}.projection"), &self.projection),
            projection_bias: f(&format!("{prefix}.projection_bias"), &self.projection_bias),
            embedding: f(&format!("{prefix}.embedding"), &self.embedding),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn into_vec(self, out: &mut Vec<P>) {
        out.extend(self.aggregator.into_vec());
        out.extend([self.projection, self.projection_bias, self.embedding, self.bias]);
    }
}

/// Every learnable array of the model. Generic over the leaf type: stored
/// tensors, tape variables, gradients or optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct HsacnParams<P> {
    /// Word embeddings `E`, `[V, d]`.
    pub embedding: P,
    pub word_encoder: EncoderParams<P>,
    pub word_aggregator: AggregatorParams<P>,
    pub sentence_encoder: EncoderParams<P>,
    pub sentence_aggregator: AggregatorParams<P>,
    pub user: TowerParams<P>,
    pub item: TowerParams<P>,
    /// Prediction weights `w_f`, `[d_l]`.
    pub w_f: P,
    pub global_bias: P,
}

impl<P> HsacnParams<P> {
    /// Applies `f` to every field with its stable name.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> HsacnParams<Q> {
        HsacnParams {
            embedding: f("embedding", &self.embedding),
            word_encoder: self.word_encoder.map(|n, p| f(&format!("word.encoder.{n}"), p)),
            word_aggregator: self.word_aggregator.map(|n, p| f(&format!("word.aggregator.{n}"), p)),
            sentence_encoder: self.sentence_encoder.map(|n, p| f(&format!("sentence.encoder.{n}"), p)),
            sentence_aggregator: self
                .sentence_aggregator
                .map(|n, p| f(&format!("sentence.aggregator.{n}"), p)),
            user: self.user.map("user", &mut f),
            item: self.item.map("item", &mut f),
            w_f: f("w_f", &self.w_f),
            global_bias: f("global_bias", &self.global_bias),
        }
    }

    /// Fields in the same order as [`HsacnParams::names`].
    pub fn into_vec(self) -> Vec<P> {
        let mut out = vec![self.embedding];
        out.extend(self.word_encoder.into_vec());
        out.extend(self.word_aggregator.into_vec());
        out.extend(self.sentence_encoder.into_vec());
        out.extend(self.sentence_aggregator.into_vec());
        self.user.into_vec(&mut out);
        self.item.into_vec(&mut out);
        out.extend([self.w_f, self.global_bias]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.map(|n, _| n.to_string()).into_vec()
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        self.map(|n, p| (n.to_string(), p)).into_vec()
    }

    /// Mutable access to every field, in [`HsacnParams::names`] order.
    pub fn fields_mut(&mut self) -> Vec<&mut P> {
        let HsacnParams {
            embedding,
            word_encoder,
            word_aggregator,
            sentence_encoder,
            sentence_aggregator,
            user,
            item,
            w_f,
            global_bias,
        } = self;
        let mut out = vec![embedding];
        out.extend(word_encoder.fields_mut());
        out.extend(word_aggregator.fields_mut());
        out.extend(sentence_encoder.fields_mut());
        out.extend(sentence_aggregator.fields_mut());
        for tower in [user, item] {
            let TowerParams {
                aggregator,
                projection,
                projection_bias,
                embedding,
                bias,
            } = tower;
            out.extend(aggregator.fields_mut());
            out.extend([projection, projection_bias, embedding, bias]);
        }
        out.extend([w_f, global_bias]);
        out
    }
}

impl<T: Real> HsacnParams<Tensor<T>> {
    /// Random initialization: Glorot-uniform matrices, uniform ±0.1 tables
    /// and free vectors, zero biases, global bias at `mean_rating`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, dims: Dimensions, mean_rating: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if dims.vocab < 2 || dims.users == 0 || dims.items == 0 {
            return Err(HsacnError::Parameter(format!("degenerate table sizes {dims:?}")));
        }
        let dl = cfg.latent;
        let tower = |n: usize, rng: &mut R| TowerParams {
            aggregator: AggregatorParams::init(cfg.sentence_hidden, rng),
            projection: glorot(dl, cfg.sentence_hidden, rng),
            projection_bias: Tensor::zeros(&[dl]),
            embedding: uniform(&[n, dl], 0.1, rng),
            bias: Tensor::zeros(&[n]),
        };
        let embedding = uniform(&[dims.vocab, cfg.embed_dim], 0.1, rng);
        let word_encoder = EncoderParams::init(&cfg.word_encoder(), rng);
        let word_aggregator = AggregatorParams::init(cfg.word_hidden, rng);
        let sentence_encoder = EncoderParams::init(&cfg.sentence_encoder(), rng);
        let sentence_aggregator = AggregatorParams::init(cfg.sentence_hidden, rng);
        let user = tower(dims.users, rng);
        let item = tower(dims.items, rng);
        let w_f = uniform(&[dl], 0.1, rng);
        Ok(HsacnParams {
            embedding,
            word_encoder,
            word_aggregator,
            sentence_encoder,
            sentence_aggregator,
            user,
            item,
            w_f,
            global_bias: Tensor::scalar(T::of(mean_rating)),
        })
    }

    pub fn dimensions(&self) -> Dimensions {
        Dimensions {
            vocab: self.embedding.shape()[0],
            users: self.user.bias.len(),
            items: self.item.bias.len(),
        }
    }

    /// Expected shape of every field, in name order.
    pub fn expected_shapes(cfg: &ModelConfig, dims: Dimensions) -> Vec<Vec<usize>> {
        let (d, dw, ds, dl, n) = (cfg.embed_dim, cfg.word_hidden, cfg.sentence_hidden, cfg.latent, cfg.kernel_width);
        let enc = |din: usize, dk: usize| {
            let (p, dh) = (2 * cfg.clip + 1, dk / cfg.heads);
            vec![
                vec![dk, n * din],
                vec![dk, n * din],
                vec![dk, n * din],
                vec![dk],
                vec![dk],
                vec![dk],
                vec![p, dh],
                vec![p, dh],
                vec![dk, dk],
                vec![dk],
            ]
        };
        let agg = |dk: usize| {
            let dp = crate::aggregator::projection_dim(dk);
            vec![vec![dp, dk], vec![dp], vec![dp]]
        };
        let tower = |count: usize| {
            let mut v = agg(ds);
            v.extend([vec![dl, ds], vec![dl], vec![count, dl], vec![count]]);
            v
        };
        let mut out = vec![vec![dims.vocab, d]];
        out.extend(enc(d, dw));
        out.extend(agg(dw));
        out.extend(enc(dw, ds));
        out.extend(agg(ds));
        out.extend(tower(dims.users));
        out.extend(tower(dims.items));
        out.extend([vec![dl], vec![1]]);
        out
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let want = Self::expected_shapes(cfg, self.dimensions());
        for ((name, t), shape) in self.named().into_iter().zip(want) {
            if t.shape() != shape.as_slice() {
                return Err(HsacnError::Parameter(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(HsacnError::Parameter(format!("{name} holds a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn cast<U: Real>(&self) -> HsacnParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// True for the rating-bias parameters trained by the bias-only baseline.
pub fn is_bias(name: &str) -> bool {
    matches!(name, "user.bias" | "item.bias" | "global_bias")
}
