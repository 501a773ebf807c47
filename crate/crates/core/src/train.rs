//! Adam training of the squared-error objective with validation-based model
//! selection, and clamped RMSE evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HsacnError, Result};
use crate::ingest::{Corpus, Split};
use crate::model::{accumulate, is_bias, Dimensions, Example, HsacnParams, Model, ModelConfig};
use crate::parallel::{map_ordered, Parallelism};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Train only the rating biases (`w_f` held at zero).
    pub bias_only: bool,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            bias_only: false,
            parallelism: Parallelism::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HsacnError::Parameter(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter. `step` is the 1-based count after
/// this update.
pub fn adam_update<T: Real>(theta: &mut [T], m: &mut [T], v: &mut [T], g: &[T], step: u64, cfg: &TrainConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for k in 0..theta.len() {
        let gk = g[k].f64();
        let mk = b1 * m[k].f64() + (1.0 - b1) * gk;
        let vk = b2 * v[k].f64() + (1.0 - b2) * gk * gk;
        m[k] = T::of(mk);
        v[k] = T::of(vk);
        let update = cfg.learning_rate * (mk / c1) / ((vk / c2).sqrt() + cfg.epsilon);
        theta[k] = T::of(theta[k].f64() - update);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

/// Parameters with the lowest validation RMSE seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint<T> {
    pub epoch: usize,
    pub val_rmse: f64,
    pub params: HsacnParams<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: HsacnParams<Tensor<T>>,
    pub first_moment: HsacnParams<Tensor<T>>,
    pub second_moment: HsacnParams<Tensor<T>>,
    pub step: u64,
    pub best: Option<BestCheckpoint<T>>,
    pub log: Vec<EpochRecord>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: HsacnParams<Tensor<T>>) -> Self {
        TrainState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
            best: None,
            log: Vec::new(),
        }
    }

    /// Applies one Adam step with dense gradients laid out like the
    /// parameters. Nothing is modified when a gradient is not finite.
    pub fn adam_step(&mut self, grads: &HsacnParams<Tensor<T>>, cfg: &TrainConfig) -> Result<()> {
        if let Some((name, _)) = grads.named().into_iter().find(|(_, g)| !g.is_finite()) {
            return Err(HsacnError::Divergence(name));
        }
        self.step += 1;
        let names = self.params.names();
        let gs = grads.map(|_, g| g).into_vec();
        let params = self.params.fields_mut();
        let ms = self.first_moment.fields_mut();
        let vs = self.second_moment.fields_mut();
        for ((((name, p), m), v), g) in names.iter().zip(params).zip(ms).zip(vs).zip(gs) {
            if cfg.bias_only && !is_bias(name) {
                continue;
            }
            adam_update(p.data_mut(), m.data_mut(), v.data_mut(), g.data(), self.step, cfg);
        }
        Ok(())
    }
}

/// Randomly initialized parameters for `corpus`; `w_f` starts at zero for
/// the bias-only baseline.
pub fn initial_params<T: Real>(corpus: &Corpus, cfg: &ModelConfig, seed: u64, bias_only: bool) -> Result<HsacnParams<Tensor<T>>> {
    let dims = Dimensions {
        vocab: corpus.vocab.len(),
        users: corpus.users.len(),
        items: corpus.items.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HsacnParams::init(cfg, dims, corpus.train_mean, &mut rng)?;
    if bias_only {
        params.w_f = Tensor::zeros(params.w_f.shape());
    }
    Ok(params)
}

fn examples(corpus: &Corpus, split: Split) -> Result<Vec<(Example, f64)>> {
    corpus
        .split(split)
        .iter()
        .map(|it| Ok((Example::from_corpus(corpus, it.user, it.item)?, it.rating)))
        .collect()
}

/// Inference-mode predictions (unclamped) for every interaction of a split,
/// paired with the true ratings.
pub fn predict_split<T: Real>(
    params: &HsacnParams<Tensor<T>>,
    cfg: &ModelConfig,
    corpus: &Corpus,
    split: Split,
    parallelism: Parallelism,
) -> Result<Vec<(f64, f64)>> {
    let model = Model::new(params, cfg)?;
    let data = examples(corpus, split)?;
    predict_examples(&model, corpus, &data, parallelism)
}

fn predict_examples<T: Real>(
    model: &Model<'_, T>,
    corpus: &Corpus,
    data: &[(Example, f64)],
    parallelism: Parallelism,
) -> Result<Vec<(f64, f64)>> {
    // With w_f = 0 the interaction term vanishes exactly; skip the towers.
    let bias_only = model.params.w_f.data().iter().all(|&w| w == T::zero());
    map_ordered(data, parallelism, |_, (e, y)| {
        model.predict_example(&corpus.reviews, e, bias_only).map(|p| (p, *y))
    })
    .into_iter()
    .collect()
}

/// `√((1/N) Σ (R − clamp(R̂, 1, 5))²)`.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(HsacnError::Parameter("RMSE over an empty set".into()));
    }
    let sse: f64 = pairs
        .iter()
        .map(|&(p, y)| {
            let d = y - p.clamp(1.0, 5.0);
            d * d
        })
        .sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// RMSE of clamped predictions on a split, dropout off.
pub fn evaluate<T: Real>(
    params: &HsacnParams<Tensor<T>>,
    cfg: &ModelConfig,
    corpus: &Corpus,
    split: Split,
    parallelism: Parallelism,
) -> Result<f64> {
    if corpus.split(split).is_empty() {
        return Err(HsacnError::Parameter(format!("split {split:?} is empty")));
    }
    rmse(&predict_split(params, cfg, corpus, split, parallelism)?)
}

/// Result of [`train`]. When training diverged, `divergence` names the
/// offending quantity and `best` holds the last good parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: BestCheckpoint<T>,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub divergence: Option<String>,
}

/// Dropout stream for the example at `position` of the epoch's order.
fn example_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Mini-batch Adam over the training split. After every epoch the
/// validation RMSE is computed and `on_epoch` receives the record.
pub fn train<T: Real>(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: HsacnParams<Tensor<T>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    init.check(model_cfg)?;
    let train_set = examples(corpus, Split::Train)?;
    let val_set = examples(corpus, Split::Validation)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HsacnError::Parameter("training and validation splits must be non-empty".into()));
    }
    let mut state = TrainState::new(init);
    let mut buffer = state.params.zeros_like();
    let mut best = BestCheckpoint {
        epoch: 0,
        val_rmse: f64::INFINITY,
        params: state.params.clone(),
    };
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut divergence = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);

        let mut sse = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let results = {
                let model = Model::new(&state.params, model_cfg)?;
                map_ordered(chunk, cfg.parallelism, |k, &idx| {
                    let (e, y) = &train_set[idx];
                    let mut rng = example_rng(cfg.seed, epoch, b * cfg.batch_size + k);
                    model.example_gradient(&corpus.reviews, e, *y, scale, cfg.bias_only, &mut rng)
                })
            };
            for t in buffer.fields_mut() {
                t.data_mut().fill(T::zero());
            }
            for (res, &idx) in results.into_iter().zip(chunk) {
                let (pred, grads) = res?;
                if !pred.is_finite() {
                    divergence = Some("prediction".to_string());
                    break 'epochs;
                }
                let d = pred - train_set[idx].1;
                sse += d * d;
                accumulate(&mut buffer, &grads);
            }
            match state.adam_step(&buffer, cfg) {
                Ok(()) => {}
                Err(HsacnError::Divergence(name)) => {
                    divergence = Some(name);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let model = Model::new(&state.params, model_cfg);
        let val_rmse = match model {
            Ok(model) => rmse(&predict_examples(&model, corpus, &val_set, cfg.parallelism)?)?,
            Err(HsacnError::Parameter(msg)) => {
                divergence = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_mse: sse / train_set.len() as f64,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        state.log.push(record);
        if !val_rmse.is_finite() {
            divergence = Some("validation RMSE".to_string());
            break;
        }
        if val_rmse < best.val_rmse {
            best = BestCheckpoint {
                epoch,
                val_rmse,
                params: state.params.clone(),
            };
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        log: state.log,
        stopped_early,
        divergence,
    })
}
