//! Attention over annotation sequences: soft, hard stochastic and local
//! (predictive-alignment) attention, plus the image-side refinements (gating
//! scalar, grounding).
//!
//! Attention projections are stored `[in, out]`, so with an annotation width
//! `D` and attention width `A` the matrices are `U_a: [H, A]`,
//! `W_a: [D, A]` and `v: [A]`. Image attention with doubling uses `A = 2D`.

use crate::autodiff::{init_gaussian, init_zero, ParamId, ParamStore, RngState, Tape, Var, GAUSSIAN_STD};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Real, Tensor};

/// Baseline decay and update weight of the moving-average baseline.
pub const BASELINE_DECAY: f64 = 0.9;
pub const BASELINE_WEIGHT: f64 = 0.1;

/// Largest default half-width of the local window.
pub const LOCAL_MAX_HALF_WIDTH: usize = 49;

#[derive(Clone, Debug)]
pub struct SoftAttnIds {
    pub u_a: ParamId,
    pub w_a: ParamId,
    pub v: ParamId,
    pub dim: usize,
}

impl SoftAttnIds {
    pub fn alloc<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state: usize,
        annotation: usize,
        dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Self {
            u_a: store.add(format!("{prefix}.U_a"), init_gaussian(&[state, dim], GAUSSIAN_STD, rng)?),
            w_a: store.add(format!("{prefix}.W_a"), init_gaussian(&[annotation, dim], GAUSSIAN_STD, rng)?),
            v: store.add(format!("{prefix}.v"), init_gaussian(&[dim], GAUSSIAN_STD, rng)?),
            dim,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LocalAttnIds {
    /// `[H, H]`, applied as `U_p s'`.
    pub u_p: ParamId,
    /// `[1, H]`.
    pub v_p: ParamId,
}

impl LocalAttnIds {
    pub fn alloc<T: Real>(store: &mut ParamStore<T>, prefix: &str, state: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            u_p: store.add(format!("{prefix}.U_p"), init_gaussian(&[state, state], GAUSSIAN_STD, rng)?),
            v_p: store.add(format!("{prefix}.v_p"), init_gaussian(&[1, state], GAUSSIAN_STD, rng)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct GatingIds {
    /// `[1, H]`.
    pub w_beta: ParamId,
    /// `[1]`.
    pub b_beta: ParamId,
}

impl GatingIds {
    pub fn alloc<T: Real>(store: &mut ParamStore<T>, prefix: &str, state: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            w_beta: store.add(format!("{prefix}.W_beta"), init_gaussian(&[1, state], GAUSSIAN_STD, rng)?),
            b_beta: store.add(format!("{prefix}.b_beta"), init_zero(&[1])),
        })
    }
}

#[derive(Clone, Debug)]
pub struct GroundingIds {
    /// `[D, H]`; present only when the decoder width differs from `D`.
    pub proj: Option<ParamId>,
    /// `[G, D]` position-shared 1×1 convolution.
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    /// `[G]`.
    pub conv2_w: ParamId,
    /// `[1]`.
    pub conv2_b: ParamId,
}

impl GroundingIds {
    pub fn alloc<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state: usize,
        annotation: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let proj = if state != annotation {
            Some(store.add(format!("{prefix}.proj"), init_gaussian(&[annotation, state], GAUSSIAN_STD, rng)?))
        } else {
            None
        };
        Ok(Self {
            proj,
            conv1_w: store.add(format!("{prefix}.conv1.W"), init_gaussian(&[hidden, annotation], GAUSSIAN_STD, rng)?),
            conv1_b: store.add(format!("{prefix}.conv1.b"), init_zero(&[hidden])),
            conv2_w: store.add(format!("{prefix}.conv2.W"), init_gaussian(&[hidden], GAUSSIAN_STD, rng)?),
            conv2_b: store.add(format!("{prefix}.conv2.b"), init_zero(&[1])),
        })
    }
}

/// `W_a a_l` for every annotation, `[L, A]`. Independent of the decoder
/// state, so it is computed once per sentence.
pub fn project_annotations<T: Real>(tape: &mut Tape<'_, T>, p: &SoftAttnIds, annotations: Var) -> Result<Var> {
    let w_a = tape.param(p.w_a);
    tape.matmul(annotations, w_a)
}

/// `e_l = vᵀ tanh(U_a s' + W_a a_l)` for precomputed projections `[L, A]`.
pub fn attn_energies<T: Real>(tape: &mut Tape<'_, T>, p: &SoftAttnIds, projected: Var, s_prime: Var) -> Result<Var> {
    let u_a = tape.param(p.u_a);
    let v = tape.param(p.v);
    let us = tape.vecmat(s_prime, u_a)?;
    let pre = tape.add_row(projected, us)?;
    let act = tape.tanh(pre);
    tape.matvec(act, v)
}

/// Output of [`soft_attend`].
#[derive(Clone, Copy, Debug)]
pub struct SoftAttention {
    pub alpha: Var,
    pub context: Var,
}

/// `α = softmax(e)`, `context = Σ_l α_l a_l`.
pub fn soft_attend<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &SoftAttnIds,
    annotations: Var,
    projected: Var,
    s_prime: Var,
) -> Result<SoftAttention> {
    let e = attn_energies(tape, p, projected, s_prime)?;
    let alpha = tape.softmax(e, 0)?;
    let context = tape.vecmat(alpha, annotations)?;
    Ok(SoftAttention { alpha, context })
}

/// How hard attention picks its annotation.
pub enum HardChoice<'r> {
    /// Draw γ ~ Multinoulli(α).
    Sample(&'r mut RngState),
    /// Deterministic `argmax α` (inference).
    Argmax,
    /// A fixed index (enumeration oracles, replay).
    Forced(usize),
}

/// Output of [`hard_attend`].
#[derive(Clone, Debug)]
pub struct HardAttention {
    pub alpha: Var,
    /// Index of the single `1` in γ.
    pub index: usize,
    /// Exactly the selected annotation row.
    pub context: Var,
    /// `log α_index`, differentiable, for the score-function term.
    pub log_alpha: Var,
}

impl HardAttention {
    /// γ as an explicit one-hot vector of length `len`.
    pub fn one_hot(&self, len: usize) -> Vec<u8> {
        (0..len).map(|i| u8::from(i == self.index)).collect()
    }
}

/// Tolerance on Σα before a distribution is accepted for sampling.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Picks one index from a normalized distribution.
pub fn select_index<T: Real>(alpha: &[T], choice: HardChoice<'_>) -> Result<usize> {
    let total: f64 = alpha.iter().map(|a| a.to_f64c()).sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE || alpha.iter().any(|&a| a < T::zero() || !a.is_finite()) {
        return Err(Error::InvalidArgument(format!("attention weights are not a distribution (sum {total})")));
    }
    match choice {
        HardChoice::Sample(rng) => {
            let probs: Vec<f64> = alpha.iter().map(|a| a.to_f64c()).collect();
            Ok(rng.categorical(&probs))
        }
        HardChoice::Argmax => Ok(argmax(alpha)),
        HardChoice::Forced(i) if i < alpha.len() => Ok(i),
        HardChoice::Forced(i) => Err(Error::InvalidArgument(format!("forced index {i} out of {} positions", alpha.len()))),
    }
}

/// Hard stochastic attention over energies `e`: the context is the chosen
/// annotation itself.
pub fn hard_attend<T: Real>(
    tape: &mut Tape<'_, T>,
    energies: Var,
    annotations: Var,
    choice: HardChoice<'_>,
) -> Result<HardAttention> {
    let alpha = tape.softmax(energies, 0)?;
    let index = select_index(tape.value(alpha).data(), choice)?;
    let context = tape.row(annotations, index)?;
    let log_probs = tape.log_softmax(energies)?;
    let log_alpha = tape.pick(log_probs, index)?;
    Ok(HardAttention { alpha, index, context, log_alpha })
}

/// Default window half-width for `L` annotations: `min(49, ⌊L/4⌋)`, at least 1.
pub fn default_half_width(len: usize) -> usize {
    (len / 4).clamp(1, LOCAL_MAX_HALF_WIDTH)
}

/// Output of [`local_attend`].
#[derive(Clone, Debug)]
pub struct LocalAttention {
    /// Window-restricted, Gaussian-reweighted weights (length `hi − lo + 1`).
    pub alpha: Var,
    /// Window-restricted softmax before reweighting.
    pub alpha_pre: Var,
    pub context: Var,
    /// Predicted position `p_t ∈ [0, L]`.
    pub position: Var,
    /// Inclusive window bounds.
    pub lo: usize,
    pub hi: usize,
    pub half_width: usize,
}

impl LocalAttention {
    /// Scatters window weights into a length-`len` vector (zeros outside).
    pub fn full<T: Real>(&self, tape: &Tape<'_, T>, w: Var, len: usize) -> Vec<T> {
        let mut out = vec![T::zero(); len];
        out[self.lo..=self.hi].copy_from_slice(tape.value(w).data());
        out
    }
}

/// Integer window `[⌈p − D⌉, ⌊p + D⌋]` clipped to `[0, L − 1]`.
pub fn local_window(position: f64, half_width: usize, len: usize) -> (usize, usize) {
    let d = half_width as f64;
    let last = (len - 1) as f64;
    let lo = (position - d).ceil().clamp(0.0, last) as usize;
    let hi = (position + d).floor().clamp(0.0, last) as usize;
    if lo <= hi {
        (lo, hi)
    } else {
        (hi, hi)
    }
}

/// Local attention: predict `p_t = L · σ(v_pᵀ tanh(U_p s'))`, run soft
/// attention inside the window around it, then multiply each weight by
/// `exp(−(i − p_t)² / (2σ²))` with `σ = D / 2`. The reweighted weights are
/// not renormalized.
pub fn local_attend<T: Real>(
    tape: &mut Tape<'_, T>,
    soft: &SoftAttnIds,
    local: &LocalAttnIds,
    annotations: Var,
    projected: Var,
    s_prime: Var,
    half_width: usize,
) -> Result<LocalAttention> {
    if half_width == 0 {
        return Err(Error::InvalidArgument("local attention half-width must be ≥ 1".into()));
    }
    let len = tape.shape(annotations)[0];
    let u_p = tape.param(local.u_p);
    let v_p = tape.param(local.v_p);
    let q = tape.matvec(u_p, s_prime)?;
    let q = tape.tanh(q);
    let score = tape.matvec(v_p, q)?;
    let gate = tape.sigmoid(score);
    let position = tape.affine(gate, T::from_usize(len).unwrap(), T::zero());

    let (lo, hi) = local_window(tape.item(position).to_f64c(), half_width, len);
    let ann_w = tape.slice_rows(annotations, lo, hi + 1)?;
    let proj_w = tape.slice_rows(projected, lo, hi + 1)?;
    let e = attn_energies(tape, soft, proj_w, s_prime)?;
    let alpha_pre = tape.softmax(e, 0)?;

    let sigma = half_width as f64 / 2.0;
    let idx = tape.constant(Tensor::vector((lo..=hi).map(|i| T::from_usize(i).unwrap()).collect()));
    let neg_p = tape.neg(position);
    let diff = tape.add_scalar(idx, neg_p)?;
    let sq = tape.mul(diff, diff)?;
    let expo = tape.affine(sq, T::from_f64c(-1.0 / (2.0 * sigma * sigma)), T::zero());
    let weight = tape.exp(expo);
    let alpha = tape.mul(alpha_pre, weight)?;
    let context = tape.vecmat(alpha, ann_w)?;
    Ok(LocalAttention { alpha, alpha_pre, context, position, lo, hi, half_width })
}

/// `β = σ(W_β s_{t−1} + b_β)`; returns `(β · context, β)`.
pub fn gate_context<T: Real>(tape: &mut Tape<'_, T>, p: &GatingIds, s_prev: Var, context: Var) -> Result<(Var, Var)> {
    let w = tape.param(p.w_beta);
    let b = tape.param(p.b_beta);
    let pre = tape.matvec(w, s_prev)?;
    let pre = tape.add(pre, b)?;
    let beta = tape.sigmoid(pre);
    let gated = tape.scalar_mul(beta, context)?;
    Ok((gated, beta))
}

/// Output of [`ground_annotations`].
#[derive(Clone, Copy, Debug)]
pub struct Grounding {
    pub annotations: Var,
    pub weights: Var,
}

/// Reweights image annotations once per sentence against the initial decoder
/// state: `a_i ← ᾱ_i a_i` with
/// `ᾱ = softmax(conv2(tanh(conv1(normalize(tanh(a_i + P s0))))))`.
pub fn ground_annotations<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &GroundingIds,
    annotations: Var,
    s0: Var,
) -> Result<Grounding> {
    let s = match p.proj {
        Some(proj) => {
            let w = tape.param(proj);
            tape.matvec(w, s0)?
        }
        None => s0,
    };
    let merged = tape.add_row(annotations, s)?;
    let merged = tape.tanh(merged);
    let normed = tape.l2_normalize(merged, 1)?;
    let w1 = tape.param(p.conv1_w);
    let b1 = tape.param(p.conv1_b);
    let w2 = tape.param(p.conv2_w);
    let b2 = tape.param(p.conv2_b);
    let h = tape.matmul_bt(normed, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.tanh(h);
    let scores = tape.matvec(h, w2)?;
    let scores = tape.add_scalar(scores, b2)?;
    let weights = tape.softmax(scores, 0)?;
    let annotations = tape.scale_rows(annotations, weights)?;
    Ok(Grounding { annotations, weights })
}

/// Moving-average baseline `b ← 0.9 b + 0.1 ℓ` for the score-function term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HardBaseline {
    pub value: f64,
    pub updates: u64,
}

impl HardBaseline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, log_likelihood: f64) -> f64 {
        self.value = BASELINE_DECAY * self.value + BASELINE_WEIGHT * log_likelihood;
        self.updates += 1;
        self.value
    }
}
