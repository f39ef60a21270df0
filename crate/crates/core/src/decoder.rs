//! Conditional-GRU decoder with optional second attention over image
//! annotations, deep output layer, teacher-forced likelihood and greedy
//! decoding.
//!
//! One decode step runs REC1 → text attention → image attention → gating →
//! REC2 → output layer.

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, gate_context, ground_annotations, hard_attend, local_attend, project_annotations, soft_attend, HardChoice,
};
use crate::autodiff::{RngState, Tape, Var};
use crate::encoder::{encode, gru_step, init_state, EncoderMaskVars};
use crate::error::{Error, Result};
use crate::model::{Arch, DeepOutputIds, DropoutMasks, ImageAttention, Model};
use crate::tensor::{argmax, Real, Tensor};
use crate::vocab::EOS;

/// Everything recorded about one decode step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub text_alpha: Vec<f64>,
    /// Full-length image weights; zero outside the local window.
    pub image_alpha: Option<Vec<f64>>,
    /// Local attention weights before the Gaussian reweighting (full length).
    pub image_alpha_pre: Option<Vec<f64>>,
    pub beta: Option<f64>,
    pub position: Option<f64>,
    pub window: Option<(usize, usize)>,
    pub selected: Option<usize>,
    pub logits: Vec<f64>,
}

/// Per-step records of a decoded or teacher-forced sentence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepTrace>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// How hard attention chooses annotations over a whole sentence.
pub enum HardPolicy<'r> {
    Sample(&'r mut RngState),
    Argmax,
    /// One forced index per step.
    Forced(&'r [usize]),
}

/// Mask constants placed on the tape for one sentence.
#[derive(Clone, Copy, Debug, Default)]
struct MaskVars {
    tgt_emb: Option<Var>,
    dec_state1: Option<Var>,
    dec_state2: Option<Var>,
    text_ctx: Option<Var>,
    img_ctx: Option<Var>,
    out_hidden: Option<Var>,
}

/// Image side of a [`SentenceContext`].
#[derive(Clone, Copy, Debug)]
pub struct ImageContext {
    pub annotations: Var,
    pub projected: Var,
    pub len: usize,
    pub half_width: usize,
    pub grounding_weights: Option<Var>,
}

/// Sentence-level quantities shared by every decode step.
#[derive(Clone, Copy, Debug)]
pub struct SentenceContext {
    pub text: Var,
    pub text_projected: Var,
    pub image: Option<ImageContext>,
    pub initial_state: Var,
    masks: MaskVars,
}

fn masked<T: Real>(tape: &mut Tape<'_, T>, x: Var, mask: Option<Var>) -> Result<Var> {
    match mask {
        Some(m) => tape.mul(x, m),
        None => Ok(x),
    }
}

fn masked_rows<T: Real>(tape: &mut Tape<'_, T>, x: Var, mask: Option<Var>) -> Result<Var> {
    match mask {
        Some(m) => tape.mul_row(x, m),
        None => Ok(x),
    }
}

fn values<T: Real>(tape: &Tape<'_, T>, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|x| x.to_f64c()).collect()
}

/// Encodes the source, computes `s0`, applies grounding and precomputes the
/// annotation projections.
pub fn prepare<T: Real>(
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    source: &[usize],
    features: Option<&Tensor<T>>,
    masks: Option<&DropoutMasks<T>>,
) -> Result<SentenceContext> {
    let cfg = &arch.config;
    if let Some(&bad) = source.iter().find(|&&t| t >= cfg.src_vocab) {
        return Err(Error::TokenOutOfRange { index: bad, size: cfg.src_vocab });
    }
    let mut c = |t: Option<&Tensor<T>>| t.map(|t| tape.constant(t.clone()));
    let enc_masks = EncoderMaskVars {
        embedding: c(masks.map(|m| &m.src_emb)),
        forward_state: c(masks.map(|m| &m.enc_forward)),
        backward_state: c(masks.map(|m| &m.enc_backward)),
    };
    let text_ann_mask = c(masks.map(|m| &m.text_ann));
    let img_ann_mask = c(masks.and_then(|m| m.img_ann.as_ref()));
    let mask_vars = MaskVars {
        tgt_emb: c(masks.map(|m| &m.tgt_emb)),
        dec_state1: c(masks.map(|m| &m.dec_state1)),
        dec_state2: c(masks.map(|m| &m.dec_state2)),
        text_ctx: c(masks.map(|m| &m.text_ctx)),
        img_ctx: c(masks.and_then(|m| m.img_ctx.as_ref())),
        out_hidden: c(masks.map(|m| &m.out_hidden)),
    };

    let annotations = encode(tape, &arch.encoder, source, enc_masks)?;
    let s0 = init_state(tape, &arch.encoder, annotations)?;
    let text = masked_rows(tape, annotations, text_ann_mask)?;
    let text_projected = project_annotations(tape, &arch.decoder.text_attn, text)?;

    let image = match (&arch.decoder.image_attn, features) {
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!(
                "{} image attention needs image features",
                cfg.image_attention
            )))
        }
        (Some(attn), Some(f)) => {
            if f.rank() != 2 || f.cols() != cfg.img_dim {
                return Err(Error::Shape(format!(
                    "image features must be [L, {}], got {:?}",
                    cfg.img_dim,
                    f.shape()
                )));
            }
            let len = f.rows();
            let feats = tape.constant(f.clone());
            let mut ann = masked_rows(tape, feats, img_ann_mask)?;
            let mut grounding_weights = None;
            if let Some(g) = &arch.decoder.grounding {
                let grounded = ground_annotations(tape, g, ann, s0)?;
                ann = grounded.annotations;
                grounding_weights = Some(grounded.weights);
            }
            let projected = project_annotations(tape, attn, ann)?;
            let half_width = cfg.local_half_width.unwrap_or_else(|| attention::default_half_width(len));
            Some(ImageContext { annotations: ann, projected, len, half_width, grounding_weights })
        }
    };
    Ok(SentenceContext { text, text_projected, image, initial_state: s0, masks: mask_vars })
}

/// Target embedding of the previous token; the first step uses a zero vector.
fn target_embedding<T: Real>(tape: &mut Tape<'_, T>, arch: &Arch, y_prev: Option<usize>) -> Result<Var> {
    match y_prev {
        Some(y) => {
            if y >= arch.config.tgt_vocab {
                return Err(Error::TokenOutOfRange { index: y, size: arch.config.tgt_vocab });
            }
            let table = tape.param(arch.decoder.tgt_emb);
            tape.lookup(table, y)
        }
        None => Ok(tape.constant(Tensor::zeros(&[arch.config.embed_dim]))),
    }
}

/// REC1: hidden-state proposal `s'` from `s_{t−1}` and `E_Y[y_{t−1}]`.
pub fn rec1<T: Real>(
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    s_prev: Var,
    y_prev: Option<usize>,
) -> Result<Var> {
    let emb = target_embedding(tape, arch, y_prev)?;
    gru_step(tape, &arch.decoder.rec1, &[emb], s_prev, None)
}

/// REC2 with the text context only.
pub fn rec2_mono<T: Real>(tape: &mut Tape<'_, T>, arch: &Arch, s_prime: Var, context: Var) -> Result<Var> {
    gru_step(tape, &arch.decoder.rec2, &[context], s_prime, None)
}

/// REC2 with text and image contexts, each through its own input weights.
pub fn rec2_multi<T: Real>(
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    s_prime: Var,
    context: Var,
    image_context: Var,
) -> Result<Var> {
    if arch.decoder.rec2.inputs.len() < 2 {
        return Err(Error::InvalidArgument("model has no image input in REC2".into()));
    }
    gru_step(tape, &arch.decoder.rec2, &[context, image_context], s_prime, None)
}

/// Deep output `L_o tanh(L_s s_t + L_c c_t [+ L_i i_t] + L_w E_Y[y_{t−1}] + b) + b_o`.
pub fn output_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    ids: &DeepOutputIds,
    state: Var,
    context: Var,
    image_context: Option<Var>,
    prev_embedding: Var,
    hidden_mask: Option<Var>,
) -> Result<Var> {
    let l_s = tape.param(ids.l_s);
    let l_c = tape.param(ids.l_c);
    let l_w = tape.param(ids.l_w);
    let b_t = tape.param(ids.b_t);
    let mut terms = vec![tape.matvec(l_s, state)?, tape.matvec(l_c, context)?];
    if let (Some(l_i), Some(i)) = (ids.l_i, image_context) {
        let l_i = tape.param(l_i);
        terms.push(tape.matvec(l_i, i)?);
    }
    terms.push(tape.matvec(l_w, prev_embedding)?);
    terms.push(b_t);
    let pre = tape.add_all(&terms)?;
    let hidden = tape.tanh(pre);
    let hidden = masked(tape, hidden, hidden_mask)?;
    let l_o = tape.param(ids.l_o);
    let b_o = tape.param(ids.b_o);
    let logits = tape.matvec(l_o, hidden)?;
    tape.add(logits, b_o)
}

/// Result of one [`decode_step`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: Var,
    pub logits: Var,
    /// `log α_{t,γ_t}` for hard attention.
    pub log_alpha: Option<Var>,
    pub trace: StepTrace,
}

/// One decoder step from `s_{t−1}` and `y_{t−1}`.
pub fn decode_step<T: Real>(
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    ctx: &SentenceContext,
    s_prev: Var,
    y_prev: Option<usize>,
    hard: HardChoice<'_>,
) -> Result<StepOutput> {
    let dec = &arch.decoder;
    let cfg = &arch.config;
    let mut trace = StepTrace::default();

    let emb = target_embedding(tape, arch, y_prev)?;
    let emb = masked(tape, emb, ctx.masks.tgt_emb)?;
    let s_prime = gru_step(tape, &dec.rec1, &[emb], s_prev, ctx.masks.dec_state1)?;

    let text = soft_attend(tape, &dec.text_attn, ctx.text, ctx.text_projected, s_prime)?;
    trace.text_alpha = values(tape, text.alpha);
    let c_t = masked(tape, text.context, ctx.masks.text_ctx)?;

    let mut log_alpha = None;
    let image_context = match (cfg.image_attention, ctx.image, &dec.image_attn) {
        (ImageAttention::None, _, _) => None,
        (_, None, _) | (_, _, None) => {
            return Err(Error::InvalidArgument("image attention requested without image annotations".into()))
        }
        (mode, Some(img), Some(attn)) => {
            let context = match mode {
                ImageAttention::Soft => {
                    let out = soft_attend(tape, attn, img.annotations, img.projected, s_prime)?;
                    trace.image_alpha = Some(values(tape, out.alpha));
                    out.context
                }
                ImageAttention::Hard => {
                    let e = attention::attn_energies(tape, attn, img.projected, s_prime)?;
                    let out = hard_attend(tape, e, img.annotations, hard)?;
                    trace.image_alpha = Some(values(tape, out.alpha));
                    trace.selected = Some(out.index);
                    log_alpha = Some(out.log_alpha);
                    out.context
                }
                ImageAttention::Local => {
                    let local = dec.local.as_ref().expect("local attention parameters");
                    let out =
                        local_attend(tape, attn, local, img.annotations, img.projected, s_prime, img.half_width)?;
                    let full = out.full(tape, out.alpha, img.len);
                    let pre = out.full(tape, out.alpha_pre, img.len);
                    trace.image_alpha = Some(full.iter().map(|x| x.to_f64c()).collect());
                    trace.image_alpha_pre = Some(pre.iter().map(|x| x.to_f64c()).collect());
                    trace.position = Some(tape.item(out.position).to_f64c());
                    trace.window = Some((out.lo, out.hi));
                    out.context
                }
                ImageAttention::None => unreachable!(),
            };
            let context = match &dec.gating {
                Some(g) => {
                    let (gated, beta) = gate_context(tape, g, s_prev, context)?;
                    trace.beta = Some(tape.item(beta).to_f64c());
                    gated
                }
                None => context,
            };
            Some(masked(tape, context, ctx.masks.img_ctx)?)
        }
    };

    let mut inputs = vec![c_t];
    inputs.extend(image_context);
    let state = gru_step(tape, &dec.rec2, &inputs, s_prime, ctx.masks.dec_state2)?;
    let logits = output_logits(tape, &dec.output, state, c_t, image_context, emb, ctx.masks.out_hidden)?;
    trace.logits = values(tape, logits);
    Ok(StepOutput { state, logits, log_alpha, trace })
}

/// Per-sentence options of a forward pass.
pub struct RunMode<'a, 'r, T> {
    pub masks: Option<&'a DropoutMasks<T>>,
    pub hard: HardPolicy<'r>,
}

impl<T> RunMode<'_, '_, T> {
    /// No dropout, argmax hard attention.
    pub fn eval() -> Self {
        Self { masks: None, hard: HardPolicy::Argmax }
    }
}

/// Teacher-forced pass over a target sentence.
#[derive(Clone, Debug)]
pub struct ForcedOutput {
    /// `−Σ_t log p(y_t | y_<t, C, I)`.
    pub nll: Var,
    pub step_log_probs: Vec<f64>,
    /// `Σ_t log α_{t,γ_t}` (hard attention only).
    pub log_alpha_sum: Option<Var>,
    pub selected: Vec<usize>,
    pub trace: DecodeTrace,
}

/// Runs the decoder with gold previous tokens and sums the target
/// log-probabilities.
pub fn teacher_forced<T: Real>(
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    source: &[usize],
    target: &[usize],
    features: Option<&Tensor<T>>,
    mode: RunMode<'_, '_, T>,
) -> Result<ForcedOutput> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty target sentence".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= arch.config.tgt_vocab) {
        return Err(Error::TokenOutOfRange { index: bad, size: arch.config.tgt_vocab });
    }
    let RunMode { masks, mut hard } = mode;
    if let HardPolicy::Forced(f) = &hard {
        if f.len() < target.len() {
            return Err(Error::InvalidArgument("forced hard-attention indices shorter than target".into()));
        }
    }
    let ctx = prepare(tape, arch, source, features, masks)?;
    let mut state = ctx.initial_state;
    let mut picks = Vec::with_capacity(target.len());
    let mut log_alphas = Vec::new();
    let mut out = ForcedOutput {
        nll: state,
        step_log_probs: Vec::with_capacity(target.len()),
        log_alpha_sum: None,
        selected: Vec::new(),
        trace: DecodeTrace::default(),
    };
    for (t, &y) in target.iter().enumerate() {
        let choice = match &mut hard {
            HardPolicy::Sample(rng) => HardChoice::Sample(rng),
            HardPolicy::Argmax => HardChoice::Argmax,
            HardPolicy::Forced(f) => HardChoice::Forced(f[t]),
        };
        let y_prev = if t == 0 { None } else { Some(target[t - 1]) };
        let step = decode_step(tape, arch, &ctx, state, y_prev, choice)?;
        state = step.state;
        let lp = tape.log_softmax(step.logits)?;
        let pick = tape.pick(lp, y)?;
        out.step_log_probs.push(tape.item(pick).to_f64c());
        picks.push(pick);
        if let Some(la) = step.log_alpha {
            log_alphas.push(la);
        }
        if let Some(s) = step.trace.selected {
            out.selected.push(s);
        }
        out.trace.steps.push(step.trace);
    }
    let all = tape.concat(&picks)?;
    let total = tape.sum(all);
    out.nll = tape.neg(total);
    if !log_alphas.is_empty() {
        let all = tape.concat(&log_alphas)?;
        out.log_alpha_sum = Some(tape.sum(all));
    }
    Ok(out)
}

/// Greedy decoding: argmax token each step until end-of-sentence or
/// `max_len` tokens. The returned tokens exclude the end-of-sentence marker;
/// the trace has one row per emitted token including it.
pub fn greedy_decode<T: Real>(
    model: &Model<T>,
    source: &[usize],
    features: Option<&Tensor<T>>,
    max_len: usize,
) -> Result<(Vec<usize>, DecodeTrace)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be ≥ 1".into()));
    }
    let arch = &model.arch;
    let mut tape = Tape::inference(&model.params);
    let ctx = prepare(&mut tape, arch, source, features, None)?;
    let mut state = ctx.initial_state;
    let mut prev = None;
    let mut tokens = Vec::new();
    let mut trace = DecodeTrace::default();
    for _ in 0..max_len {
        let step = decode_step(&mut tape, arch, &ctx, state, prev, HardChoice::Argmax)?;
        let y = argmax(tape.value(step.logits).data());
        trace.steps.push(step.trace);
        state = step.state;
        if y == EOS {
            break;
        }
        tokens.push(y);
        prev = Some(y);
    }
    Ok((tokens, trace))
}

impl<T: Real> Model<T> {
    /// Teacher-forced negative log-likelihood in evaluation mode.
    pub fn nll(&self, source: &[usize], target: &[usize], features: Option<&Tensor<T>>) -> Result<f64> {
        let mut tape = Tape::inference(&self.params);
        let out = teacher_forced(&mut tape, &self.arch, source, target, features, RunMode::eval())?;
        Ok(tape.item(out.nll).to_f64c())
    }

    pub fn greedy_decode(
        &self,
        source: &[usize],
        features: Option<&Tensor<T>>,
        max_len: usize,
    ) -> Result<(Vec<usize>, DecodeTrace)> {
        greedy_decode(self, source, features, max_len)
    }
}
