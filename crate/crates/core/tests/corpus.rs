use std::fs;

use mmattn::checkpoint;
use mmattn::config::RunSettings;
use mmattn::corpus::{
    attention_pgm, class_word, dump_attention, gen_synthetic, load_corpus, read_labels, FeaturePack, ParallelCorpus,
    SyntheticSpec, OBJ_TOKEN,
};
use mmattn::decoder::{DecodeTrace, StepTrace};
use mmattn::vocab::{Vocabulary, EOS, PAD, UNK};
use mmattn::{Error, ImageAttention, Model, ModelConfig};
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn three_line_files_load_as_three_pairs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.src"), "a b\nc\n d  e f \n").unwrap();
    fs::write(dir.path().join("a.tgt"), "x\ny z\nw\n").unwrap();
    let c = load_corpus(dir.path().join("a.src"), dir.path().join("a.tgt"), None).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(c.source[2], toks("d e f"));
    assert_eq!(c.target[1], toks("y z"));
}

#[test]
fn mismatched_line_counts_name_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.src"), "a\nb\nc\n").unwrap();
    fs::write(dir.path().join("a.tgt"), "x\ny\n").unwrap();
    let err = load_corpus(dir.path().join("a.src"), dir.path().join("a.tgt"), None).unwrap_err();
    assert!(matches!(err, Error::LineCountMismatch { src: 3, tgt: 2, .. }));
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains('2'), "{msg}");
}

#[test]
fn missing_files_and_bad_feature_packs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_corpus(dir.path().join("nope.src"), dir.path().join("nope.tgt"), None).is_err());
    fs::write(dir.path().join("a.src"), "a\nb\n").unwrap();
    fs::write(dir.path().join("a.tgt"), "x\ny\n").unwrap();
    fs::write(dir.path().join("bad.feat"), b"JUNKJUNKJUNKJUNKJUNKJUNK").unwrap();
    let r = load_corpus(dir.path().join("a.src"), dir.path().join("a.tgt"), Some(&dir.path().join("bad.feat")));
    assert!(matches!(r, Err(Error::FeatureFormat(_))));
    let mut one = FeaturePack::new(2, 2).unwrap();
    one.push(&[0.0; 4]).unwrap();
    one.write(dir.path().join("one.feat")).unwrap();
    let r = load_corpus(dir.path().join("a.src"), dir.path().join("a.tgt"), Some(&dir.path().join("one.feat")));
    assert!(matches!(r, Err(Error::FeatureFormat(_))));
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut pack = FeaturePack::new(3, 2).unwrap();
    pack.push(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    pack.push(&[-1.0, 0.5, 1e-7, 9.0, 0.0, -0.0]).unwrap();
    let c = ParallelCorpus { source: vec![toks("a b c"), toks("d")], target: vec![toks("x"), toks("y z")], features: Some(pack) };
    c.write(dir.path(), "rt").unwrap();
    let back = load_corpus(dir.path().join("rt.src"), dir.path().join("rt.tgt"), Some(&dir.path().join("rt.feat"))).unwrap();
    assert_eq!(back, c);
}

#[test]
fn feature_pack_layout() {
    let mut pack = FeaturePack::new(2, 3).unwrap();
    pack.push(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let bytes = pack.to_bytes();
    assert_eq!(&bytes[..4], b"MMAF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
    assert_eq!(bytes.len(), 24 + 6 * 4);
    assert_eq!(f32::from_le_bytes(bytes[24 + 12..24 + 16].try_into().unwrap()), 4.0);
    let t = pack.get::<f64>(0);
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    assert!(pack.push(&[0.0; 5]).is_err());
    assert!(FeaturePack::new(0, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn feature_pack_round_trip_is_bit_exact(
        len in 1usize..5, dim in 1usize..5, count in 0usize..4,
        bits in proptest::collection::vec(any::<u32>(), 64),
    ) {
        let mut pack = FeaturePack::new(len, dim).unwrap();
        let mut k = 0;
        for _ in 0..count {
            let grid: Vec<f32> = (0..len * dim).map(|_| { k += 1; f32::from_bits(bits[k % bits.len()]) }).collect();
            pack.push(&grid).unwrap();
        }
        let back = FeaturePack::from_bytes(&pack.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), pack.to_bytes());
        prop_assert_eq!(back.count(), count);
    }
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { train: 50, dev: 10, test: 10, ..Default::default() }
}

#[test]
fn synthetic_generation_is_reproducible() {
    let a = gen_synthetic(&small_spec()).unwrap();
    let b = gen_synthetic(&small_spec()).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic(&SyntheticSpec { seed: 2, ..small_spec() }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn synthetic_structure() {
    let spec = small_spec();
    let data = gen_synthetic(&spec).unwrap();
    let mut sorted = data.mapping.clone();
    sorted.sort();
    assert_eq!(sorted, (0..spec.words).collect::<Vec<_>>());
    for (i, sig) in data.signatures.iter().enumerate() {
        let norm: f32 = sig.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() <= 1e-5);
        for other in &data.signatures[i + 1..] {
            let dot: f32 = sig.iter().zip(other).map(|(a, b)| a * b).sum();
            assert!(dot.abs() <= 1e-5);
        }
    }
    let split = &data.train;
    let feats = split.corpus.features.as_ref().unwrap();
    assert_eq!((feats.locations(), feats.dim(), feats.count()), (16, 8, 50));
    for ((src, tgt), label) in split.corpus.source.iter().zip(&split.corpus.target).zip(&split.labels) {
        assert_eq!(src.len(), spec.sentence_len);
        assert_eq!(src[spec.obj_slot], OBJ_TOKEN);
        assert_eq!(tgt[spec.obj_slot], class_word(label.class));
        for (pos, (s, t)) in src.iter().zip(tgt).enumerate() {
            if pos != spec.obj_slot {
                let w: usize = s[1..].parse().unwrap();
                assert_eq!(t, &format!("v{}", data.mapping[w]));
            }
        }
        assert!(label.class >= 1 && label.class <= spec.classes && label.cell < 16);
    }
}

#[test]
fn noiseless_two_class_grids_hold_exactly_one_signature() {
    let spec = SyntheticSpec { grid: 2, classes: 2, noise_std: 0.0, train: 40, dev: 5, test: 5, ..Default::default() };
    let data = gen_synthetic(&spec).unwrap();
    let feats = data.train.corpus.features.as_ref().unwrap();
    for (i, label) in data.train.labels.iter().enumerate() {
        for cell in 0..4 {
            let row = &feats.raw(i)[cell * 8..(cell + 1) * 8];
            if cell == label.cell {
                assert_eq!(row, data.signatures[label.class - 1].as_slice());
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn class_labels_are_uniform() {
    let spec = SyntheticSpec { train: 10_000, dev: 1, test: 1, ..Default::default() };
    let data = gen_synthetic(&spec).unwrap();
    let mut counts = vec![0usize; spec.classes];
    for l in &data.train.labels {
        counts[l.class - 1] += 1;
    }
    for c in counts {
        let share = c as f64 / 10_000.0;
        assert!((share - 0.25).abs() <= 0.02, "{share}");
    }
}

#[test]
fn source_text_carries_no_class_information() {
    // The best text-only predictor picks the majority class given the source;
    // with sources drawn independently of the class this is near 1/K.
    let spec = SyntheticSpec { train: 4000, dev: 1, test: 1, ..Default::default() };
    let data = gen_synthetic(&spec).unwrap();
    let mut by_first = std::collections::HashMap::<String, Vec<usize>>::new();
    for (src, l) in data.train.corpus.source.iter().zip(&data.train.labels) {
        by_first.entry(src[0].clone()).or_insert_with(|| vec![0; spec.classes])[l.class - 1] += 1;
    }
    for counts in by_first.values() {
        let total: usize = counts.iter().sum();
        let best = *counts.iter().max().unwrap() as f64 / total as f64;
        assert!(best < 0.40, "{counts:?}");
    }
}

#[test]
fn invalid_synthetic_specs_are_rejected() {
    for spec in [
        SyntheticSpec { classes: 17, ..small_spec() },
        SyntheticSpec { obj_slot: 6, ..small_spec() },
        SyntheticSpec { grid: 0, ..small_spec() },
        SyntheticSpec { noise_std: -1.0, ..small_spec() },
        SyntheticSpec { classes: 9, img_dim: 8, ..small_spec() },
    ] {
        assert!(gen_synthetic(&spec).is_err());
    }
}

#[test]
fn synthetic_data_written_to_disk_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&small_spec()).unwrap();
    data.write(dir.path()).unwrap();
    let p = |f: &str| dir.path().join(f);
    let dev = load_corpus(p("dev.src"), p("dev.tgt"), Some(&p("dev.feat"))).unwrap();
    assert_eq!(dev, data.dev.corpus);
    assert_eq!(read_labels(p("dev.labels")).unwrap(), data.dev.labels);
    let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(p("spec.json")).unwrap()).unwrap();
    assert_eq!(spec, small_spec());
}

fn step(alpha: Vec<f64>, beta: Option<f64>) -> StepTrace {
    StepTrace { image_alpha: Some(alpha), beta, ..Default::default() }
}

fn pixels(pgm: &[u8], n: usize) -> &[u8] {
    &pgm[pgm.len() - n..]
}

#[test]
fn pgm_rendering() {
    let uniform = attention_pgm(&[1.0 / 9.0; 9], 3).unwrap();
    assert!(uniform.starts_with(b"P5\n3 3\n255\n"));
    assert!(pixels(&uniform, 9).iter().all(|&p| p == 255));
    let mut one_hot = vec![0.0; 9];
    one_hot[4] = 1.0;
    let pgm = attention_pgm(&one_hot, 3).unwrap();
    assert_eq!(pixels(&pgm, 9).iter().filter(|&&p| p == 255).count(), 1);
    assert_eq!(pixels(&pgm, 9).iter().filter(|&&p| p == 0).count(), 8);
    let pgm = attention_pgm(&[0.1, 0.2, 0.4, 0.3], 2).unwrap();
    assert_eq!(pixels(&pgm, 4), &[64, 128, 255, 191]);
    assert!(attention_pgm(&[0.5; 5], 2).is_err());
}

#[test]
fn two_step_dump_writes_two_rows_and_two_maps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = DecodeTrace { steps: vec![step(vec![0.25; 4], Some(0.5)), step(vec![0.0, 0.0, 1.0, 0.0], Some(0.75))] };
    let files = dump_attention(&trace, 2, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let csv = fs::read_to_string(dir.path().join("attention.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "a0,a1,a2,a3,beta");
    assert!(lines[2].starts_with("0.00000000,0.00000000,1.00000000,0.00000000,0.75"));
    let pgm = fs::read(dir.path().join("step_001.pgm")).unwrap();
    assert_eq!(pixels(&pgm, 4), &[0, 0, 255, 0]);
}

#[test]
fn non_square_grids_dump_csv_only() {
    let dir = tempfile::tempdir().unwrap();
    let trace = DecodeTrace { steps: vec![step(vec![0.2; 5], None)] };
    let files = dump_attention(&trace, 2, dir.path()).unwrap();
    assert_eq!(files, vec![dir.path().join("attention.csv")]);
    let csv = fs::read_to_string(&files[0]).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(','));
    let text_only = DecodeTrace { steps: vec![StepTrace::default()] };
    assert!(dump_attention(&text_only, 2, dir.path()).is_err());
}

#[test]
fn vocabulary_reserves_and_round_trips() {
    let v = Vocabulary::build(&[toks("b a a c"), toks("c a")], 2);
    assert_eq!(v.tokens(), &["</s>", "<unk>", "<pad>", "a", "c"]);
    assert_eq!((v.get("</s>"), v.get("<unk>"), v.get("<pad>")), (Some(EOS), Some(UNK), Some(PAD)));
    assert_eq!(v.encode(&toks("a b")), vec![3, UNK, EOS]);
    assert_eq!(v.decode(&[4, 3, EOS, 3]), toks("c a"));
    let dir = tempfile::tempdir().unwrap();
    v.save(dir.path().join("v")).unwrap();
    let back = Vocabulary::load(dir.path().join("v")).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.hash(), v.hash());
    assert!(Vocabulary::from_text("a\nb\n").is_err());
}

fn ckpt_config() -> ModelConfig {
    ModelConfig {
        src_vocab: 6,
        tgt_vocab: 5,
        embed_dim: 4,
        enc_hidden: 3,
        dec_hidden: 4,
        out_dim: 3,
        img_dim: 5,
        image_attention: ImageAttention::Local,
        gating: true,
        grounding: true,
        grounding_hidden: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_and_vocabulary_check() {
    let dir = tempfile::tempdir().unwrap();
    let src = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
    let tgt = Vocabulary::from_tokens(["x", "y"]).unwrap();
    let model = Model::<f32>::new(ckpt_config(), 9).unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &model, &src, &tgt).unwrap();
    let (back, s2, t2) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!((s2, t2), (src.clone(), tgt.clone()));
    assert_eq!(back.config(), model.config());
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(checkpoint::to_bytes(&back, &src, &tgt).unwrap(), fs::read(&path).unwrap());

    let other = Vocabulary::from_tokens(["x", "z"]).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(matches!(checkpoint::from_bytes::<f32>(&bytes, &src, &other), Err(Error::Checkpoint(_))));
    other.save(checkpoint::tgt_vocab_path(&path)).unwrap();
    assert!(checkpoint::load::<f32>(&path).is_err());

    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 4], &src, &tgt).is_err());
    assert!(checkpoint::from_bytes::<f32>(b"NOPE", &src, &tgt).is_err());
}

#[test]
fn settings_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    fs::write(
        &path,
        "# desk run\ntrain_src = data/train.src\ntrain_tgt=data/train.tgt\nimage_attention = soft\ndec_hidden = 64\n\nseed = 7\n",
    )
    .unwrap();
    let mut s = RunSettings::load(&path).unwrap();
    assert_eq!(s.dec_hidden, 64);
    assert_eq!(s.image_attention, ImageAttention::Soft);
    assert_eq!(s.train_config().batch_size, 40);
    s.set_pair("batch_size=5").unwrap();
    s.set_pair("image_attention=none").unwrap();
    let t = s.train_config();
    assert_eq!((t.batch_size, t.seed), (5, 7));
    let m = s.model_config(10, 11, 8);
    assert_eq!((m.src_vocab, m.tgt_vocab, m.img_dim, m.dec_hidden), (10, 11, 8, 64));
    assert!(s.set_pair("unknown_key=1").is_err());
    assert!(s.set_pair("dec_hidden=lots").is_err());
    assert!(s.set_pair("no equals sign").is_err());
}
