//! Plain-loop reference implementations used as test oracles.
#![allow(dead_code)]

use mmattn::autodiff::{ParamStore, RngState};
use mmattn::{Model, ModelConfig, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(store: &ParamStore<f64>, name: &str) -> Mat {
    let t = store.value(store.find(name).unwrap_or_else(|| panic!("no parameter {name}")));
    assert_eq!(t.rank(), 2, "{name} is not a matrix");
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn vector(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).data().to_vec()
}

/// `W x` for `W` stored `[out, in]`.
pub fn mv(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `xᵀ M` for `M` stored `[in, out]`.
pub fn vm(x: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    (0..cols).map(|j| x.iter().zip(m).map(|(xi, row)| xi * row[j]).sum()).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(e: &[f64]) -> Vec<f64> {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|x| x / s).collect()
}

/// GRU step with named parameters `{prefix}.W_z{suffix}` etc.
pub fn gru(store: &ParamStore<f64>, prefix: &str, inputs: &[(&str, &[f64])], h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let mut z = vector(store, &format!("{prefix}.b_z"));
    let mut r = vector(store, &format!("{prefix}.b_r"));
    let mut c = vector(store, &format!("{prefix}.b"));
    for (suffix, x) in inputs {
        z = add(&z, &mv(&mat(store, &format!("{prefix}.W_z{suffix}")), x));
        r = add(&r, &mv(&mat(store, &format!("{prefix}.W_r{suffix}")), x));
        c = add(&c, &mv(&mat(store, &format!("{prefix}.W{suffix}")), x));
    }
    let uz = mv(&mat(store, &format!("{prefix}.U_z")), h);
    let ur = mv(&mat(store, &format!("{prefix}.U_r")), h);
    let uh = mv(&mat(store, &format!("{prefix}.U")), h);
    (0..n)
        .map(|i| {
            let zi = sig(z[i] + uz[i]);
            let ri = sig(r[i] + ur[i]);
            let cand = (c[i] + ri * uh[i]).tanh();
            (1.0 - zi) * cand + zi * h[i]
        })
        .collect()
}

/// Annotations `[M][2H]` from the bidirectional encoder.
pub fn encode(store: &ParamStore<f64>, tokens: &[usize]) -> Mat {
    let emb = mat(store, "enc.E_X");
    let hidden = vector(store, "enc.fwd.b").len();
    let mut fwd = Vec::new();
    let mut h = vec![0.0; hidden];
    for &t in tokens {
        h = gru(store, "enc.fwd", &[("", &emb[t])], &h);
        fwd.push(h.clone());
    }
    let mut bwd = vec![Vec::new(); tokens.len()];
    let mut h = vec![0.0; hidden];
    for (i, &t) in tokens.iter().enumerate().rev() {
        h = gru(store, "enc.bwd", &[("", &emb[t])], &h);
        bwd[i] = h.clone();
    }
    fwd.into_iter().zip(bwd).map(|(f, b)| [f, b].concat()).collect()
}

/// `s0 = tanh(W2 tanh(W1 h_M + b1) + b2)`.
pub fn init_state(store: &ParamStore<f64>, ann: &Mat) -> Vec<f64> {
    let last = ann.last().unwrap();
    let h1: Vec<f64> =
        add(&mv(&mat(store, "enc.init.W1"), last), &vector(store, "enc.init.b1")).iter().map(|x| x.tanh()).collect();
    add(&mv(&mat(store, "enc.init.W2"), &h1), &vector(store, "enc.init.b2")).iter().map(|x| x.tanh()).collect()
}

/// Energies `vᵀ tanh(U_aᵀ s' + W_aᵀ a_l)` for attention `prefix`.
pub fn energies(store: &ParamStore<f64>, prefix: &str, ann: &Mat, s: &[f64]) -> Vec<f64> {
    let ua = vm(s, &mat(store, &format!("{prefix}.U_a")));
    let wa = mat(store, &format!("{prefix}.W_a"));
    let v = vector(store, &format!("{prefix}.v"));
    ann.iter()
        .map(|a| {
            let pre = add(&ua, &vm(a, &wa));
            pre.iter().zip(&v).map(|(p, vi)| vi * p.tanh()).sum()
        })
        .collect()
}

pub fn weighted(alpha: &[f64], ann: &Mat) -> Vec<f64> {
    let d = ann[0].len();
    (0..d).map(|j| alpha.iter().zip(ann).map(|(a, row)| a * row[j]).sum()).collect()
}

/// Grounded annotations and weights.
pub fn ground(store: &ParamStore<f64>, ann: &Mat, s0: &[f64]) -> (Mat, Vec<f64>) {
    let s = match store.find("dec.ground.proj") {
        Some(_) => mv(&mat(store, "dec.ground.proj"), s0),
        None => s0.to_vec(),
    };
    let w1 = mat(store, "dec.ground.conv1.W");
    let b1 = vector(store, "dec.ground.conv1.b");
    let w2 = vector(store, "dec.ground.conv2.W");
    let b2 = vector(store, "dec.ground.conv2.b")[0];
    let scores: Vec<f64> = ann
        .iter()
        .map(|a| {
            let m: Vec<f64> = add(a, &s).iter().map(|x| x.tanh()).collect();
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let n: Vec<f64> = m.iter().map(|x| x / norm).collect();
            let h: Vec<f64> = add(&mv(&w1, &n), &b1).iter().map(|x| x.tanh()).collect();
            h.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>() + b2
        })
        .collect();
    let w = softmax(&scores);
    (ann.iter().zip(&w).map(|(a, wi)| a.iter().map(|x| x * wi).collect()).collect(), w)
}

/// Deep output logits.
pub fn logits(store: &ParamStore<f64>, s: &[f64], c: &[f64], i: Option<&[f64]>, emb: &[f64]) -> Vec<f64> {
    let mut pre = add(&mv(&mat(store, "dec.out.L_s"), s), &mv(&mat(store, "dec.out.L_c"), c));
    if let Some(i) = i {
        pre = add(&pre, &mv(&mat(store, "dec.out.L_i"), i));
    }
    pre = add(&pre, &mv(&mat(store, "dec.out.L_w"), emb));
    pre = add(&pre, &vector(store, "dec.out.b"));
    let h: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
    add(&mv(&mat(store, "dec.out.L_o"), &h), &vector(store, "dec.out.b_o"))
}

pub fn tiny_config(attention: mmattn::ImageAttention) -> ModelConfig {
    ModelConfig {
        src_vocab: 9,
        tgt_vocab: 8,
        embed_dim: 4,
        enc_hidden: 3,
        dec_hidden: 5,
        out_dim: 4,
        img_dim: 6,
        image_attention: attention,
        grounding_hidden: 4,
        ..ModelConfig::default()
    }
}

/// A model with every parameter drawn from `N(0, std²)`.
pub fn random_model(config: ModelConfig, seed: u64, std: f64) -> Model<f64> {
    let mut m = Model::<f64>::new(config, seed).unwrap();
    let mut rng = RngState::with_stream(seed, 42);
    mmattn::diagnostics::randomize_params(&mut m, std, &mut rng);
    m
}

pub fn rows(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gradient as one flat vector in parameter order; missing entries are zero.
pub fn flat(grads: &mmattn::autodiff::Gradients<f64>, store: &ParamStore<f64>) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(id, p)| match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.value.len()],
        })
        .collect()
}

/// `Σ_γ α_γ log p(y | γ)` for a one-step target, enumerating every location.
pub fn expected_log_likelihood(m: &Model<f64>, source: &[usize], target: &[usize], feats: &Tensor<f64>) -> f64 {
    use mmattn::autodiff::Tape;
    use mmattn::decoder::{teacher_forced, HardPolicy, RunMode};
    assert_eq!(target.len(), 1);
    (0..feats.rows())
        .map(|g| {
            let forced = [g];
            let mut tape = Tape::inference(&m.params);
            let mode = RunMode { masks: None, hard: HardPolicy::Forced(&forced) };
            let out = teacher_forced(&mut tape, &m.arch, source, target, Some(feats), mode).unwrap();
            let log_alpha = tape.item(out.log_alpha_sum.unwrap());
            log_alpha.exp() * -tape.item(out.nll)
        })
        .sum()
}

/// Central-difference gradient of [`expected_log_likelihood`].
pub fn enumeration_gradient(m: &mut Model<f64>, source: &[usize], target: &[usize], feats: &Tensor<f64>) -> Vec<f64> {
    let h = 1e-5;
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    let mut out = Vec::new();
    for id in ids {
        for k in 0..m.params.value(id).len() {
            let orig = m.params.value(id).data()[k];
            m.params.value_mut(id).data_mut()[k] = orig + h;
            let up = expected_log_likelihood(m, source, target, feats);
            m.params.value_mut(id).data_mut()[k] = orig - h;
            let down = expected_log_likelihood(m, source, target, feats);
            m.params.value_mut(id).data_mut()[k] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// One-step hard-attention toy over three locations: width-2 layers, target
/// `[EOS]`. The fixture has balanced α and distinct per-location likelihoods,
/// so dropping the score-function term breaks dozens of coordinates.
pub fn reinforce_fixture() -> (Model<f64>, mmattn::training::Dataset) {
    use mmattn::corpus::FeaturePack;
    use mmattn::training::{Dataset, Example};
    let config = ModelConfig {
        src_vocab: 5,
        tgt_vocab: 4,
        embed_dim: 2,
        enc_hidden: 2,
        dec_hidden: 2,
        out_dim: 2,
        img_dim: 2,
        image_attention: mmattn::ImageAttention::Hard,
        ..ModelConfig::default()
    };
    let m = random_model(config, 41, 1.0);
    let mut rng = RngState::new(111);
    let mut pack = FeaturePack::new(3, 2).unwrap();
    pack.push(&(0..6).map(|_| (3.0 * rng.normal()) as f32).collect::<Vec<_>>()).unwrap();
    let data = Dataset {
        examples: vec![Example { source: vec![3, 4], target: vec![mmattn::vocab::EOS], feature: Some(0) }],
        features: Some(pack),
        references: vec![vec![]],
    };
    (m, data)
}

/// Mean and standard error of `n` single-sample hard-attention gradients.
pub fn monte_carlo_gradient(
    m: &Model<f64>,
    data: &mmattn::training::Dataset,
    n: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    use mmattn::attention::HardBaseline;
    use mmattn::training::{hard_step_gradient, TrainRngs};
    let mut rngs = TrainRngs::new(seed);
    let mut baseline = HardBaseline::new();
    let mut s1 = vec![0.0; m.params.num_elements()];
    let mut s2 = s1.clone();
    for _ in 0..n {
        let g = hard_step_gradient(m, data, &[0], 1, 0.0, &mut rngs, &mut baseline).unwrap().unwrap();
        for (k, x) in flat(&g.grads, &m.params).into_iter().enumerate() {
            s1[k] += x;
            s2[k] += x * x;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = s1.iter().map(|s| s / nf).collect();
    let se = s2.iter().zip(&mean).map(|(s, mu)| ((s / nf - mu * mu).max(0.0) / nf).sqrt()).collect();
    (mean, se)
}
