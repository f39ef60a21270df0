//! Likelihood training: teacher-forced NLL gradients, the score-function
//! estimator for hard attention, ADADELTA and BLEU-based early stopping.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::attention::HardBaseline;
use crate::autodiff::{Gradients, ParamStore, RngState, Tape};
use crate::bleu::corpus_bleu4;
use crate::corpus::{FeaturePack, ParallelCorpus};
use crate::decoder::{teacher_forced, HardPolicy, RunMode};
use crate::error::{Error, Result};
use crate::model::{DropoutMasks, ImageAttention, Model};
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

/// RNG streams derived from the training seed.
pub const SHUFFLE_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;
pub const SAMPLE_STREAM: u64 = 3;

/// ADADELTA accumulators `E[g²]` and `E[Δx²]` per parameter.
#[derive(Clone, Debug)]
pub struct AdadeltaState<T> {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<Tensor<T>>,
    pub sq_delta: Vec<Tensor<T>>,
}

impl<T: Real> AdadeltaState<T> {
    pub const DEFAULT_RHO: f64 = 0.95;
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_hyper(params, Self::DEFAULT_RHO, Self::DEFAULT_EPS)
    }

    pub fn with_hyper(params: &ParamStore<T>, rho: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { rho, eps, sq_grad: zeros.clone(), sq_delta: zeros }
    }
}

/// One ADADELTA step; parameters absent from `grads` see a zero gradient.
pub fn adadelta_update<T: Real>(params: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdadeltaState<T>) {
    let rho = T::from_f64c(state.rho);
    let one_minus = T::from_f64c(1.0 - state.rho);
    let eps = T::from_f64c(state.eps);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id);
        let value = params.value_mut(id).data_mut();
        let eg = state.sq_grad[i].data_mut();
        let ed = state.sq_delta[i].data_mut();
        for k in 0..value.len() {
            let gk = g.map(|g| g.data()[k]).unwrap_or_else(T::zero);
            eg[k] = rho * eg[k] + one_minus * gk * gk;
            let delta = -((ed[k] + eps).sqrt() / (eg[k] + eps).sqrt()) * gk;
            ed[k] = rho * ed[k] + one_minus * delta * delta;
            value[k] = value[k] + delta;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Monte Carlo samples per batch for hard attention.
    pub samples: usize,
    /// Write elapsed seconds in the log; off gives byte-reproducible logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 40,
            dropout: 0.5,
            patience: 20,
            max_epochs: 100,
            seed: 1234,
            samples: 1,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Paper-default batch size: 80 for text-only, 40 for multimodal models.
    pub fn default_batch_size(attention: ImageAttention) -> usize {
        if attention == ImageAttention::None {
            80
        } else {
            40
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be ≥ 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A sentence pair as vocabulary indices; targets end with end-of-sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Grid index in the dataset's feature pack.
    pub feature: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub features: Option<FeaturePack>,
    /// Reference target tokens (without end-of-sentence) for BLEU.
    pub references: Vec<Vec<String>>,
}

impl Dataset {
    pub fn from_corpus(corpus: &ParallelCorpus, src: &Vocabulary, tgt: &Vocabulary) -> Result<Self> {
        corpus.validate()?;
        let examples = corpus
            .source
            .iter()
            .zip(&corpus.target)
            .enumerate()
            .map(|(i, (s, t))| Example {
                source: src.encode(s),
                target: tgt.encode(t),
                feature: corpus.features.as_ref().map(|_| i),
            })
            .collect();
        Ok(Self { examples, features: corpus.features.clone(), references: corpus.target.clone() })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn features_of<T: Real>(&self, ex: &Example) -> Option<Tensor<T>> {
        match (ex.feature, &self.features) {
            (Some(i), Some(p)) => Some(p.get(i)),
            _ => None,
        }
    }

    /// Fails when the model needs images the dataset lacks, or `L·D` disagrees.
    pub fn check_features<T: Real>(&self, model: &Model<T>) -> Result<()> {
        let cfg = model.config();
        if !cfg.is_multimodal() {
            return Ok(());
        }
        match &self.features {
            None => Err(Error::InvalidArgument(format!("{} image attention needs image features", cfg.image_attention))),
            Some(p) if p.dim() != cfg.img_dim => Err(Error::FeatureFormat(format!(
                "features are {} × {}, model expects width {}",
                p.locations(),
                p.dim(),
                cfg.img_dim
            ))),
            Some(_) => Ok(()),
        }
    }
}

/// Teacher-forced negative log-likelihood and its per-token mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllReport {
    pub total: f64,
    pub per_token: f64,
}

pub fn nll_loss<T: Real>(
    model: &Model<T>,
    source: &[usize],
    target: &[usize],
    features: Option<&Tensor<T>>,
) -> Result<NllReport> {
    let total = model.nll(source, target, features)?;
    Ok(NllReport { total, per_token: total / target.len() as f64 })
}

/// Random state consumed by gradient computation.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub dropout: RngState,
    pub sample: RngState,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            dropout: RngState::with_stream(seed, DROPOUT_STREAM),
            sample: RngState::with_stream(seed, SAMPLE_STREAM),
        }
    }
}

/// Averaged gradient of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchGradient<T> {
    pub grads: Gradients<T>,
    /// Summed target NLL over the batch (sampled γ for hard attention).
    pub nll: f64,
    pub tokens: usize,
}

fn masks_for<T: Real>(model: &Model<T>, dropout: f64, rng: &mut RngState) -> Result<Option<DropoutMasks<T>>> {
    if dropout > 0.0 {
        Ok(Some(DropoutMasks::sample(model.config(), dropout, rng)?))
    } else {
        Ok(None)
    }
}

/// Mean NLL gradient of a batch for the deterministic attention modes.
pub fn batch_gradient<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    batch: &[usize],
    dropout: f64,
    rngs: &mut TrainRngs,
) -> Result<BatchGradient<T>> {
    let mut grads = Gradients::empty(model.params.len());
    let (mut nll, mut tokens) = (0.0, 0);
    for &i in batch {
        let ex = &data.examples[i];
        let feats = data.features_of::<T>(ex);
        let masks = masks_for(model, dropout, &mut rngs.dropout)?;
        let mut tape = Tape::new(&model.params);
        let mode = RunMode { masks: masks.as_ref(), hard: HardPolicy::Argmax };
        let out = teacher_forced(&mut tape, &model.arch, &ex.source, &ex.target, feats.as_ref(), mode)?;
        nll += tape.item(out.nll).to_f64c();
        tokens += ex.target.len();
        grads.add_assign(&tape.backward(out.nll)?);
    }
    grads.scale(T::from_f64c(1.0 / batch.len() as f64));
    Ok(BatchGradient { grads, nll, tokens })
}

/// Score-function gradient for hard attention.
///
/// For each of `samples` draws, every sentence is decoded with γ sampled per
/// step; the loss differentiated is
/// `−log p(y|γ̃) − (log p(y|γ̃) − b) · Σ_t log α_{t,γ̃_t}`, whose gradient is
/// the negated single-sample estimate of ∂L/∂W. Gradients are averaged over
/// samples and sentences, then the baseline moves towards the mean sampled
/// log-likelihood. Returns `Ok(None)` (batch skipped) on a non-finite
/// likelihood.
pub fn hard_step_gradient<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    batch: &[usize],
    samples: usize,
    dropout: f64,
    rngs: &mut TrainRngs,
    baseline: &mut HardBaseline,
) -> Result<Option<BatchGradient<T>>> {
    if model.config().image_attention != ImageAttention::Hard {
        return Err(Error::InvalidArgument("hard_step_gradient needs hard image attention".into()));
    }
    if samples == 0 || batch.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample and one sentence".into()));
    }
    let b = baseline.value;
    let mut grads = Gradients::empty(model.params.len());
    let (mut nll, mut tokens, mut ll_sum) = (0.0, 0, 0.0);
    for _ in 0..samples {
        for &i in batch {
            let ex = &data.examples[i];
            let feats = data.features_of::<T>(ex);
            let masks = masks_for(model, dropout, &mut rngs.dropout)?;
            let mut tape = Tape::new(&model.params);
            let mode = RunMode { masks: masks.as_ref(), hard: HardPolicy::Sample(&mut rngs.sample) };
            let out = teacher_forced(&mut tape, &model.arch, &ex.source, &ex.target, feats.as_ref(), mode)?;
            let ll = -tape.item(out.nll).to_f64c();
            if !ll.is_finite() {
                warn!("non-finite sampled log-likelihood; skipping batch");
                return Ok(None);
            }
            let log_alpha = out.log_alpha_sum.expect("hard attention records log α");
            let score = tape.affine(log_alpha, T::from_f64c(-(ll - b)), T::zero());
            let surrogate = tape.add(out.nll, score)?;
            grads.add_assign(&tape.backward(surrogate)?);
            nll -= ll;
            ll_sum += ll;
            tokens += ex.target.len();
        }
    }
    let n = (samples * batch.len()) as f64;
    grads.scale(T::from_f64c(1.0 / n));
    baseline.update(ll_sum / n);
    Ok(Some(BatchGradient { grads, nll: nll / samples as f64, tokens: tokens / samples }))
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Copy, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    /// Records an epoch's dev score; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

/// Groups indices into batches of similar target length, in shuffled order.
pub fn make_batches(data: &Dataset, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, rng);
    let pool = batch_size * 10;
    let mut batches = Vec::new();
    for chunk in order.chunks_mut(pool) {
        chunk.sort_by_key(|&i| data.examples[i].target.len());
        batches.extend(chunk.chunks(batch_size).map(|c| c.to_vec()));
    }
    shuffle(&mut batches, rng);
    batches
}

fn shuffle<X>(xs: &mut [X], rng: &mut RngState) {
    for i in (1..xs.len()).rev() {
        let j = rng.below(i + 1);
        xs.swap(i, j);
    }
}

/// Greedy-decodes every example and returns token strings (no end marker).
pub fn translate_dataset<T: Real>(model: &Model<T>, data: &Dataset, tgt: &Vocabulary) -> Result<Vec<Vec<String>>> {
    data.examples
        .iter()
        .map(|ex| {
            let feats = data.features_of::<T>(ex);
            let (tokens, _) = model.greedy_decode(&ex.source, feats.as_ref(), 2 * ex.source.len() + 5)?;
            Ok(tgt.decode(&tokens))
        })
        .collect()
}

/// Corpus BLEU-4 of greedy translations against the dataset references.
pub fn dev_bleu<T: Real>(model: &Model<T>, data: &Dataset, tgt: &Vocabulary) -> Result<f64> {
    let hyps = translate_dataset(model, data, tgt)?;
    Ok(corpus_bleu4(&hyps, &data.references)?.score)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_bleu: f64,
    pub baseline: Option<f64>,
    pub seconds: Option<f64>,
}

impl EpochLog {
    /// `epoch \t loss \t bleu \t baseline \t seconds`; absent values print `-`.
    pub fn line(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{:.6}\t{:.4}\t{}\t{}",
            self.epoch,
            self.train_loss,
            self.dev_bleu,
            opt(self.baseline, 6),
            opt(self.seconds, 3)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_bleu: f64,
    pub baseline: Option<f64>,
}

/// Trains with ADADELTA, evaluating dev BLEU-4 after every epoch. On return
/// `model` holds the parameters of the best epoch. Log lines are written to
/// `log` as they are produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    dev: &Dataset,
    tgt: &Vocabulary,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    config.validate()?;
    if dev.is_empty() || train_set.is_empty() {
        return Err(Error::InvalidArgument("training and dev sets must be nonempty".into()));
    }
    train_set.check_features(model)?;
    dev.check_features(model)?;

    let hard = model.config().image_attention == ImageAttention::Hard;
    let mut shuffle_rng = RngState::with_stream(config.seed, SHUFFLE_STREAM);
    let mut rngs = TrainRngs::new(config.seed);
    let mut optimizer = AdadeltaState::new(&model.params);
    let mut baseline = HardBaseline::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        let (mut nll, mut tokens) = (0.0, 0usize);
        for batch in make_batches(train_set, config.batch_size, &mut shuffle_rng) {
            let step = if hard {
                hard_step_gradient(model, train_set, &batch, config.samples, config.dropout, &mut rngs, &mut baseline)?
            } else {
                Some(batch_gradient(model, train_set, &batch, config.dropout, &mut rngs)?)
            };
            let Some(step) = step else { continue };
            if !step.grads.all_finite() {
                warn!("non-finite gradient in epoch {epoch}; batch skipped");
                continue;
            }
            nll += step.nll;
            tokens += step.tokens;
            adadelta_update(&mut model.params, &step.grads, &mut optimizer);
        }
        let bleu = dev_bleu(model, dev, tgt)?;
        let entry = EpochLog {
            epoch,
            train_loss: nll / tokens.max(1) as f64,
            dev_bleu: bleu,
            baseline: hard.then_some(baseline.value),
            seconds: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        writeln!(log, "{}", entry.line())?;
        info!("epoch {epoch}: loss {:.4} dev BLEU {:.2}", entry.train_loss, bleu);
        epochs.push(entry);
        let (improved, stop) = stopper.observe(epoch, bleu);
        if improved {
            best = model.params.clone();
        }
        if stop {
            break;
        }
    }
    model.params.copy_values_from(&best)?;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_bleu: stopper.best,
        baseline: hard.then_some(baseline.value),
    })
}
