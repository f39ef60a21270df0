//! Random problem instances, a whole-model gradient check and scoring for
//! the planted-signal task.

use crate::autodiff::{grad_check, GradCheckReport, RngState, Tape, DEFAULT_EPSILON};
use crate::bleu::corpus_bleu4;
use crate::corpus::{class_word, SyntheticSplit};
use crate::decoder::{teacher_forced, HardPolicy, RunMode};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::{Real, Tensor};
use crate::training::Dataset;
use crate::vocab::{Vocabulary, EOS};

/// A random sentence pair with image features.
#[derive(Clone, Debug)]
pub struct Instance {
    pub source: Vec<usize>,
    /// Ends with end-of-sentence.
    pub target: Vec<usize>,
    pub features: Tensor<f64>,
}

/// Draws tokens from the non-reserved range and features from `N(0, 1)`.
pub fn random_instance(
    src_vocab: usize,
    tgt_vocab: usize,
    src_len: usize,
    tgt_len: usize,
    locations: usize,
    img_dim: usize,
    rng: &mut RngState,
) -> Instance {
    let first = crate::vocab::RESERVED.len();
    let source = (0..src_len).map(|_| first + rng.below(src_vocab - first)).collect();
    let mut target: Vec<usize> = (1..tgt_len).map(|_| first + rng.below(tgt_vocab - first)).collect();
    target.push(EOS);
    let features = Tensor::new(vec![locations, img_dim], (0..locations * img_dim).map(|_| rng.normal()).collect())
        .expect("shape matches data");
    Instance { source, target, features }
}

/// Replaces every parameter value with a draw from `N(0, std²)`.
pub fn randomize_params<T: Real>(model: &mut Model<T>, std: f64, rng: &mut RngState) {
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = T::from_f64c(std * rng.normal()));
    }
}

/// Checks the teacher-forced NLL gradient of `instance` for every parameter
/// of `model` (hard attention uses argmax selection).
pub fn model_grad_check(model: &mut Model<f64>, instance: &Instance) -> Result<GradCheckReport> {
    let arch = model.arch.clone();
    let feats = model.config().is_multimodal().then_some(&instance.features);
    grad_check(&mut model.params, DEFAULT_EPSILON, |tape: &mut Tape<'_, f64>| {
        let mode = RunMode { masks: None, hard: HardPolicy::Argmax };
        Ok(teacher_forced(tape, &arch, &instance.source, &instance.target, feats, mode)?.nll)
    })
}

/// Scores on the planted-signal task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedReport {
    /// Fraction of sentences whose decoded token at the object slot is the
    /// planted class.
    pub obj_accuracy: f64,
    /// Mean image attention weight on the planted cell at the object-slot
    /// step; `None` for text-only models.
    pub attention_mass: Option<f64>,
    pub bleu: f64,
}

/// Greedy-decodes a synthetic split and scores it against its labels.
pub fn evaluate_planted<T: Real>(
    model: &Model<T>,
    split: &SyntheticSplit,
    src: &Vocabulary,
    tgt: &Vocabulary,
    obj_slot: usize,
) -> Result<PlantedReport> {
    let data = Dataset::from_corpus(&split.corpus, src, tgt)?;
    let (mut correct, mut mass) = (0usize, 0.0);
    let mut hyps = Vec::with_capacity(data.len());
    for (ex, label) in data.examples.iter().zip(&split.labels) {
        let feats = data.features_of::<T>(ex);
        let (tokens, trace) = model.greedy_decode(&ex.source, feats.as_ref(), 2 * ex.source.len() + 5)?;
        let words = tgt.decode(&tokens);
        if words.get(obj_slot).map(String::as_str) == Some(class_word(label.class).as_str()) {
            correct += 1;
        }
        if let Some(alpha) = trace.steps.get(obj_slot).and_then(|s| s.image_alpha.as_ref()) {
            mass += alpha[label.cell];
        }
        hyps.push(words);
    }
    let n = data.len() as f64;
    Ok(PlantedReport {
        obj_accuracy: correct as f64 / n,
        attention_mass: model.config().is_multimodal().then_some(mass / n),
        bleu: corpus_bleu4(&hyps, &data.references)?.score,
    })
}
