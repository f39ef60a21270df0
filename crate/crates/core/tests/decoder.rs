mod common;

use common::*;
use mmattn::autodiff::{RngState, Tape};
use mmattn::decoder::{output_logits, rec1, rec2_mono, rec2_multi, teacher_forced, HardPolicy, RunMode};
use mmattn::diagnostics::random_instance;
use mmattn::training::{adadelta_update, AdadeltaState};
use mmattn::vocab::EOS;
use mmattn::{ImageAttention, Model, ModelConfig, Tensor};

fn zeroed(config: ModelConfig) -> Model<f64> {
    let mut m = Model::<f64>::new(config, 1).unwrap();
    m.zero_all();
    m
}

fn vec_const(tape: &mut Tape<'_, f64>, v: &[f64]) -> mmattn::autodiff::Var {
    tape.constant(Tensor::vector(v.to_vec()))
}

#[test]
fn rec1_closed_forms_and_oracle() {
    let m = zeroed(tiny_config(ImageAttention::Soft));
    let s = [0.4, -0.2, 1.0, 0.0, 0.6];
    let mut tape = Tape::inference(&m.params);
    let sv = vec_const(&mut tape, &s);
    let out = rec1(&mut tape, &m.arch, sv, Some(3)).unwrap();
    assert_eq!(tape.value(out).data(), &[0.2, -0.1, 0.5, 0.0, 0.3]);
    let zero = vec_const(&mut tape, &[0.0; 5]);
    let out = rec1(&mut tape, &m.arch, zero, Some(3)).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0; 5]);

    let m = random_model(tiny_config(ImageAttention::Soft), 2, 0.7);
    let mut tape = Tape::inference(&m.params);
    let sv = vec_const(&mut tape, &s);
    let out = rec1(&mut tape, &m.arch, sv, Some(3)).unwrap();
    let emb = mat(&m.params, "dec.E_Y")[3].clone();
    let want = gru(&m.params, "dec.rec1", &[("", &emb)], &s);
    assert!(max_diff(tape.value(out).data(), &want) <= 1e-14);
}

#[test]
fn rec2_closed_forms_and_oracles() {
    let s = [0.4, -0.2, 1.0, 0.0, 0.6];
    let c = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
    let i = [0.9, -0.8, 0.7, 0.6, -0.5, 0.4];

    let m = zeroed(tiny_config(ImageAttention::Soft));
    let mut tape = Tape::inference(&m.params);
    let (sv, cv, iv) = (vec_const(&mut tape, &s), vec_const(&mut tape, &c), vec_const(&mut tape, &i));
    let mono = rec2_mono(&mut tape, &m.arch, sv, cv).unwrap();
    let multi = rec2_multi(&mut tape, &m.arch, sv, cv, iv).unwrap();
    assert_eq!(tape.value(mono).data(), &[0.2, -0.1, 0.5, 0.0, 0.3]);
    assert_eq!(tape.value(multi).data(), &[0.2, -0.1, 0.5, 0.0, 0.3]);

    let mut m = random_model(tiny_config(ImageAttention::Soft), 3, 0.7);
    let mut tape = Tape::inference(&m.params);
    let (sv, cv, iv) = (vec_const(&mut tape, &s), vec_const(&mut tape, &c), vec_const(&mut tape, &i));
    let mono = rec2_mono(&mut tape, &m.arch, sv, cv).unwrap();
    let multi = rec2_multi(&mut tape, &m.arch, sv, cv, iv).unwrap();
    let want_mono = gru(&m.params, "dec.rec2", &[("", &c)], &s);
    let want_multi = gru(&m.params, "dec.rec2", &[("", &c), ("_img", &i)], &s);
    assert!(max_diff(tape.value(mono).data(), &want_mono) <= 1e-14);
    assert!(max_diff(tape.value(multi).data(), &want_multi) <= 1e-14);

    // A zero text context with zero input weights leaves only the recurrent gates.
    let zero_c = [0.0; 6];
    let want_gates_only = gru(&m.params, "dec.rec2", &[], &s);
    let mut tape = Tape::inference(&m.params);
    let (sv, cv) = (vec_const(&mut tape, &s), vec_const(&mut tape, &zero_c));
    let out = rec2_mono(&mut tape, &m.arch, sv, cv).unwrap();
    assert!(max_diff(tape.value(out).data(), &want_gates_only) <= 1e-14);

    // Zero image weights and a zero image context reduce to the text-only cell.
    m.zero_image_pathway();
    let zero_i = [0.0; 6];
    let mut tape = Tape::inference(&m.params);
    let (sv, cv, iv) = (vec_const(&mut tape, &s), vec_const(&mut tape, &c), vec_const(&mut tape, &zero_i));
    let mono = rec2_mono(&mut tape, &m.arch, sv, cv).unwrap();
    let multi = rec2_multi(&mut tape, &m.arch, sv, cv, iv).unwrap();
    assert_eq!(tape.value(mono).data(), tape.value(multi).data());
}

#[test]
fn output_layer_closed_forms_and_oracle() {
    let m = zeroed(tiny_config(ImageAttention::Soft));
    let mut tape = Tape::inference(&m.params);
    let s = vec_const(&mut tape, &[0.5; 5]);
    let c = vec_const(&mut tape, &[0.5; 6]);
    let i = vec_const(&mut tape, &[0.5; 6]);
    let e = vec_const(&mut tape, &[0.5; 4]);
    let l = output_logits(&mut tape, &m.arch.decoder.output, s, c, Some(i), e, None).unwrap();
    assert_eq!(tape.value(l).data(), &[0.0; 8]);

    let m = random_model(tiny_config(ImageAttention::Soft), 4, 0.7);
    let (sv, cv, iv, ev) = ([0.1, 0.2, 0.3, 0.4, 0.5], [0.3; 6], [-0.2; 6], [0.7, 0.1, -0.4, 0.2]);
    let mut tape = Tape::inference(&m.params);
    let (s, c, i, e) =
        (vec_const(&mut tape, &sv), vec_const(&mut tape, &cv), vec_const(&mut tape, &iv), vec_const(&mut tape, &ev));
    let l = output_logits(&mut tape, &m.arch.decoder.output, s, c, Some(i), e, None).unwrap();
    let want = logits(&m.params, &sv, &cv, Some(&iv), &ev);
    assert!(max_diff(tape.value(l).data(), &want) <= 1e-14);
    let p = tape.softmax(l, 0).unwrap();
    assert!((tape.value(p).data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
}

/// Per-step target log-probabilities computed with the loop oracles.
fn oracle_log_probs(m: &Model<f64>, source: &[usize], target: &[usize], feats: &Tensor<f64>) -> Vec<f64> {
    let p = &m.params;
    let cfg = m.config();
    let ann = common::encode(p, source);
    let s0 = common::init_state(p, &ann);
    let mut img = rows(feats);
    if cfg.grounding {
        img = ground(p, &img, &s0).0;
    }
    let emb_table = mat(p, "dec.E_Y");
    let mut state = s0;
    let mut out = Vec::new();
    for (t, &y) in target.iter().enumerate() {
        let emb = if t == 0 { vec![0.0; cfg.embed_dim] } else { emb_table[target[t - 1]].clone() };
        let s_prime = gru(p, "dec.rec1", &[("", &emb)], &state);
        let c = weighted(&softmax(&energies(p, "dec.att_text", &ann, &s_prime)), &ann);
        let image = match cfg.image_attention {
            ImageAttention::None => None,
            ImageAttention::Soft => Some(weighted(&softmax(&energies(p, "dec.att_img", &img, &s_prime)), &img)),
            ImageAttention::Hard => {
                let alpha = softmax(&energies(p, "dec.att_img", &img, &s_prime));
                Some(img[mmattn::tensor::argmax(&alpha)].clone())
            }
            ImageAttention::Local => unreachable!(),
        };
        let image = image.map(|i| {
            if cfg.gating {
                let w = vector(p, "dec.gate.W_beta");
                let beta = sig(w.iter().zip(&state).map(|(a, b)| a * b).sum::<f64>() + vector(p, "dec.gate.b_beta")[0]);
                i.iter().map(|x| beta * x).collect()
            } else {
                i
            }
        });
        let new_state = match &image {
            Some(i) => gru(p, "dec.rec2", &[("", &c), ("_img", i)], &s_prime),
            None => gru(p, "dec.rec2", &[("", &c)], &s_prime),
        };
        let l = logits(p, &new_state, &c, image.as_deref(), &emb);
        let lp = softmax(&l)[y].ln();
        out.push(lp);
        state = new_state;
    }
    out
}

fn forced_log_probs(m: &Model<f64>, source: &[usize], target: &[usize], feats: &Tensor<f64>) -> (Vec<f64>, f64) {
    let mut tape = Tape::inference(&m.params);
    let f = m.config().is_multimodal().then_some(feats);
    let out = teacher_forced(&mut tape, &m.arch, source, target, f, RunMode::eval()).unwrap();
    (out.step_log_probs, tape.item(out.nll))
}

#[test]
fn full_decoder_matches_composite_oracle() {
    let variants = [
        tiny_config(ImageAttention::None),
        tiny_config(ImageAttention::Soft),
        tiny_config(ImageAttention::Hard),
        ModelConfig { gating: true, grounding: true, ..tiny_config(ImageAttention::Soft) },
        ModelConfig { doubling: true, gating: true, ..tiny_config(ImageAttention::Soft) },
    ];
    for (k, config) in variants.into_iter().enumerate() {
        let m = random_model(config, 10 + k as u64, 0.6);
        let mut rng = RngState::new(k as u64);
        let inst = random_instance(9, 8, 3, 4, 4, 6, &mut rng);
        let (got, nll) = forced_log_probs(&m, &inst.source, &inst.target, &inst.features);
        let want = oracle_log_probs(&m, &inst.source, &inst.target, &inst.features);
        assert!(max_diff(&got, &want) <= 1e-12, "variant {k}: {got:?} vs {want:?}");
        assert!((nll + want.iter().sum::<f64>()).abs() <= 1e-12);
    }
}

#[test]
fn zero_model_loss_is_log_vocab_per_token() {
    let m = zeroed(tiny_config(ImageAttention::Soft));
    let mut rng = RngState::new(1);
    let inst = random_instance(9, 8, 3, 5, 4, 6, &mut rng);
    let nll = m.nll(&inst.source, &inst.target, Some(&inst.features)).unwrap();
    assert!((nll / 5.0 - 8f64.ln()).abs() <= 1e-12);
}

#[test]
fn one_token_target_loss_is_that_steps_log_prob() {
    let m = random_model(tiny_config(ImageAttention::Soft), 5, 0.6);
    let mut rng = RngState::new(2);
    let inst = random_instance(9, 8, 3, 1, 4, 6, &mut rng);
    let (lp, nll) = forced_log_probs(&m, &inst.source, &inst.target, &inst.features);
    assert_eq!(lp.len(), 1);
    assert_eq!(nll, -lp[0]);
}

#[test]
fn zeroed_image_pathway_reduces_to_text_only_decoder() {
    for attention in [ImageAttention::Soft, ImageAttention::Hard, ImageAttention::Local] {
        let config = ModelConfig { gating: true, grounding: true, ..tiny_config(attention) };
        let mut multi = random_model(config.clone(), 20, 0.6);
        multi.zero_image_pathway();
        let mut mono = Model::<f64>::new(ModelConfig { image_attention: ImageAttention::None, gating: false, grounding: false, ..config }, 0).unwrap();
        let ids: Vec<_> = mono.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src = multi.params.find(&name).unwrap();
            *mono.params.value_mut(id) = multi.params.value(src).clone();
        }
        let mut rng = RngState::new(21);
        let inst = random_instance(9, 8, 3, 4, 4, 6, &mut rng);
        let run = |m: &Model<f64>| {
            let mut tape = Tape::inference(&m.params);
            let f = m.config().is_multimodal().then_some(&inst.features);
            let out = teacher_forced(&mut tape, &m.arch, &inst.source, &inst.target, f, RunMode::eval()).unwrap();
            out.trace.steps.into_iter().flat_map(|s| s.logits).collect::<Vec<f64>>()
        };
        assert!(max_diff(&run(&multi), &run(&mono)) <= 1e-12, "{attention}");
    }
}

#[test]
fn missing_features_are_rejected() {
    let m = random_model(tiny_config(ImageAttention::Soft), 6, 0.6);
    assert!(m.nll(&[3, 4], &[3, EOS], None).is_err());
    let wrong = Tensor::zeros(&[4, 5]);
    assert!(m.nll(&[3, 4], &[3, EOS], Some(&wrong)).is_err());
    assert!(m.nll(&[3, 4], &[], Some(&Tensor::zeros(&[4, 6]))).is_err());
    assert!(m.nll(&[3, 4], &[30], Some(&Tensor::zeros(&[4, 6]))).is_err());
}

#[test]
fn greedy_decode_length_limits() {
    let m = random_model(tiny_config(ImageAttention::Soft), 7, 0.6);
    let feats = Tensor::zeros(&[4, 6]);
    let (tokens, trace) = m.greedy_decode(&[3, 4, 5], Some(&feats), 1).unwrap();
    assert_eq!(trace.len(), 1);
    assert!(tokens.len() <= 1);
    assert!(m.greedy_decode(&[3], Some(&feats), 0).is_err());

    let mut eos = random_model(tiny_config(ImageAttention::Soft), 8, 0.6);
    let id = eos.params.find("dec.out.b_o").unwrap();
    eos.params.value_mut(id).data_mut()[EOS] = 1e6;
    let (tokens, trace) = eos.greedy_decode(&[3, 4, 5], Some(&feats), 10).unwrap();
    assert!(tokens.is_empty());
    assert_eq!(trace.len(), 1);
}

#[test]
fn decoding_is_deterministic_and_traces_are_valid() {
    let m = random_model(ModelConfig { gating: true, ..tiny_config(ImageAttention::Local) }, 9, 0.6);
    let mut rng = RngState::new(3);
    let inst = random_instance(9, 8, 3, 4, 8, 6, &mut rng);
    let a = m.greedy_decode(&inst.source, Some(&inst.features), 6).unwrap();
    let b = m.greedy_decode(&inst.source, Some(&inst.features), 6).unwrap();
    assert_eq!(a, b);
    for step in &a.1.steps {
        assert!((step.text_alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let alpha = step.image_alpha.as_ref().unwrap();
        let pre = step.image_alpha_pre.as_ref().unwrap();
        let (lo, hi) = step.window.unwrap();
        for (i, (&w, &p)) in alpha.iter().zip(pre).enumerate() {
            assert!(w <= p);
            if i < lo || i > hi {
                assert_eq!(w, 0.0);
            }
        }
        assert!((0.0..=1.0).contains(&step.beta.unwrap()));
    }
}

#[test]
fn toy_model_memorizes_a_pair() {
    let config = ModelConfig {
        src_vocab: 6,
        tgt_vocab: 6,
        embed_dim: 8,
        enc_hidden: 8,
        dec_hidden: 8,
        out_dim: 8,
        img_dim: 4,
        image_attention: ImageAttention::Soft,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::new(config, 3).unwrap();
    let source = [3, 4, 5];
    let target = [5, 3, 4, EOS];
    let feats = Tensor::filled(&[4, 4], 0.1);
    let mut opt = AdadeltaState::new(&m.params);
    for _ in 0..400 {
        let grads = {
            let mut tape = Tape::new(&m.params);
            let out = teacher_forced(&mut tape, &m.arch, &source, &target, Some(&feats), RunMode { masks: None, hard: HardPolicy::Argmax }).unwrap();
            tape.backward(out.nll).unwrap()
        };
        adadelta_update(&mut m.params, &grads, &mut opt);
    }
    let (tokens, _) = m.greedy_decode(&source, Some(&feats), 10).unwrap();
    assert_eq!(tokens, vec![5, 3, 4]);
}
