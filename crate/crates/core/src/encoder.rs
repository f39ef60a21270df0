//! Source embedding, bidirectional GRU encoding and decoder-state
//! initialization.
//!
//! GRU weights are stored `[out, in]` and applied with `W x`:
//!
//! ```text
//! z  = σ(Σ_k W_z^k x_k + U_z h + b_z)
//! r  = σ(Σ_k W_r^k x_k + U_r h + b_r)
//! h̲  = tanh(Σ_k W^k x_k + b + r ⊙ (U h))
//! h' = (1 − z) ⊙ h̲ + z ⊙ h
//! ```
//!
//! The same cell serves the encoder directions and both decoder transitions;
//! a cell may take several input blocks, each with its own `W` triplet.

use crate::autodiff::{init_gaussian, init_orthogonal, init_zero, ParamId, ParamStore, RngState, Tape, Var, GAUSSIAN_STD};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Input-side weights of one input block of a GRU cell.
#[derive(Clone, Debug)]
pub struct GruInputIds {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct GruCellIds {
    pub inputs: Vec<GruInputIds>,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl GruCellIds {
    /// Allocates a cell with one input block per entry of `inputs`
    /// (`(suffix, width)`); recurrent matrices are orthogonal, the rest
    /// Gaussian, biases zero.
    pub fn alloc<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: &[(&str, usize)],
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(inputs.len());
        for &(suffix, width) in inputs {
            blocks.push(GruInputIds {
                w_z: store.add(format!("{prefix}.W_z{suffix}"), init_gaussian(&[hidden, width], GAUSSIAN_STD, rng)?),
                w_r: store.add(format!("{prefix}.W_r{suffix}"), init_gaussian(&[hidden, width], GAUSSIAN_STD, rng)?),
                w_h: store.add(format!("{prefix}.W{suffix}"), init_gaussian(&[hidden, width], GAUSSIAN_STD, rng)?),
                width,
            });
        }
        Ok(Self {
            inputs: blocks,
            u_z: store.add(format!("{prefix}.U_z"), init_orthogonal(&[hidden, hidden], rng)?),
            u_r: store.add(format!("{prefix}.U_r"), init_orthogonal(&[hidden, hidden], rng)?),
            u_h: store.add(format!("{prefix}.U"), init_orthogonal(&[hidden, hidden], rng)?),
            b_z: store.add(format!("{prefix}.b_z"), init_zero(&[hidden])),
            b_r: store.add(format!("{prefix}.b_r"), init_zero(&[hidden])),
            b_h: store.add(format!("{prefix}.b"), init_zero(&[hidden])),
            hidden,
        })
    }
}

/// One GRU transition. `xs` feeds the first `xs.len()` input blocks of the
/// cell; `state_mask`, when given, multiplies the state before the recurrent
/// products (the mix with `h_prev` is unmasked).
pub fn gru_step<T: Real>(
    tape: &mut Tape<'_, T>,
    cell: &GruCellIds,
    xs: &[Var],
    h_prev: Var,
    state_mask: Option<Var>,
) -> Result<Var> {
    if xs.is_empty() || xs.len() > cell.inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "GRU cell has {} input blocks, got {} inputs",
            cell.inputs.len(),
            xs.len()
        )));
    }
    let h_in = match state_mask {
        Some(m) => tape.mul(h_prev, m)?,
        None => h_prev,
    };

    let gate = |tape: &mut Tape<'_, T>, pick: fn(&GruInputIds) -> ParamId| -> Result<Var> {
        let mut terms = Vec::with_capacity(xs.len());
        for (x, block) in xs.iter().zip(&cell.inputs) {
            let w = tape.param(pick(block));
            terms.push(tape.matvec(w, *x)?);
        }
        tape.add_all(&terms)
    };

    let u_z = tape.param(cell.u_z);
    let u_r = tape.param(cell.u_r);
    let u_h = tape.param(cell.u_h);
    let b_z = tape.param(cell.b_z);
    let b_r = tape.param(cell.b_r);
    let b_h = tape.param(cell.b_h);

    let wz = gate(tape, |b| b.w_z)?;
    let uz = tape.matvec(u_z, h_in)?;
    let z = tape.add(wz, uz)?;
    let z = tape.add(z, b_z)?;
    let z = tape.sigmoid(z);

    let wr = gate(tape, |b| b.w_r)?;
    let ur = tape.matvec(u_r, h_in)?;
    let r = tape.add(wr, ur)?;
    let r = tape.add(r, b_r)?;
    let r = tape.sigmoid(r);

    let wh = gate(tape, |b| b.w_h)?;
    let wh = tape.add(wh, b_h)?;
    let uh = tape.matvec(u_h, h_in)?;
    let ruh = tape.mul(r, uh)?;
    let cand = tape.add(wh, ruh)?;
    let cand = tape.tanh(cand);

    let keep = tape.one_minus(z);
    let a = tape.mul(keep, cand)?;
    let b = tape.mul(z, h_prev)?;
    tape.add(a, b)
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub src_emb: ParamId,
    pub forward: GruCellIds,
    pub backward: GruCellIds,
    pub init_w1: ParamId,
    pub init_b1: ParamId,
    pub init_w2: ParamId,
    pub init_b2: ParamId,
    pub hidden: usize,
}

impl EncoderIds {
    pub fn alloc<T: Real>(
        store: &mut ParamStore<T>,
        src_vocab: usize,
        embed: usize,
        hidden: usize,
        dec_hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let src_emb = store.add("enc.E_X", init_gaussian(&[src_vocab, embed], GAUSSIAN_STD, rng)?);
        let forward = GruCellIds::alloc(store, "enc.fwd", &[("", embed)], hidden, rng)?;
        let backward = GruCellIds::alloc(store, "enc.bwd", &[("", embed)], hidden, rng)?;
        Ok(Self {
            src_emb,
            forward,
            backward,
            init_w1: store.add("enc.init.W1", init_gaussian(&[hidden, 2 * hidden], GAUSSIAN_STD, rng)?),
            init_b1: store.add("enc.init.b1", init_zero(&[hidden])),
            init_w2: store.add("enc.init.W2", init_gaussian(&[dec_hidden, hidden], GAUSSIAN_STD, rng)?),
            init_b2: store.add("enc.init.b2", init_zero(&[dec_hidden])),
            hidden,
        })
    }
}

/// Dropout masks used by the encoder, as tape constants.
#[derive(Clone, Copy, Debug, Default)]
pub struct EncoderMaskVars {
    pub embedding: Option<Var>,
    pub forward_state: Option<Var>,
    pub backward_state: Option<Var>,
}

/// Encodes `tokens` into the annotation matrix `[M, 2H]`, row `t` being
/// `[→h_t ; ←h_t]`. Both directions start from a zero state.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &EncoderIds,
    tokens: &[usize],
    masks: EncoderMaskVars,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
    }
    let table = tape.param(enc.src_emb);
    let mut embs = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let e = tape.lookup(table, t)?;
        embs.push(match masks.embedding {
            Some(m) => tape.mul(e, m)?,
            None => e,
        });
    }

    let zero = tape.constant(crate::tensor::Tensor::zeros(&[enc.hidden]));
    let mut fwd = Vec::with_capacity(tokens.len());
    let mut h = zero;
    for &e in &embs {
        h = gru_step(tape, &enc.forward, &[e], h, masks.forward_state)?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; tokens.len()];
    let mut h = zero;
    for (t, &e) in embs.iter().enumerate().rev() {
        h = gru_step(tape, &enc.backward, &[e], h, masks.backward_state)?;
        bwd[t] = h;
    }
    let mut rows = Vec::with_capacity(tokens.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        rows.push(tape.concat(&[f, b])?);
    }
    tape.stack_rows(&rows)
}

/// `s0 = tanh(W2 tanh(W1 h_M + b1) + b2)` where `h_M` is the last annotation row.
pub fn init_state<T: Real>(tape: &mut Tape<'_, T>, enc: &EncoderIds, annotations: Var) -> Result<Var> {
    let m = tape.shape(annotations)[0];
    let last = tape.row(annotations, m - 1)?;
    let w1 = tape.param(enc.init_w1);
    let b1 = tape.param(enc.init_b1);
    let w2 = tape.param(enc.init_w2);
    let b2 = tape.param(enc.init_b2);
    let h = tape.matvec(w1, last)?;
    let h = tape.add(h, b1)?;
    let h = tape.tanh(h);
    let s = tape.matvec(w2, h)?;
    let s = tape.add(s, b2)?;
    Ok(tape.tanh(s))
}
