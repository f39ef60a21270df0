use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mmattn::autodiff::RngState;
use mmattn::bleu::{corpus_bleu4, tokenize, BleuReport};
use mmattn::checkpoint;
use mmattn::config::RunSettings;
use mmattn::corpus::{dump_attention, gen_synthetic, load_corpus, read_sentences, FeaturePack, SyntheticSpec};
use mmattn::diagnostics::{model_grad_check, random_instance, randomize_params};
use mmattn::training::{train, Dataset};
use mmattn::vocab::Vocabulary;
use mmattn::{Error, ImageAttention, Model, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "mmattn", version, about = "Doubly-attentive multimodal translation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-signal synthetic task.
    GenData(GenDataArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Greedy-translate a source file.
    Translate(TranslateArgs),
    /// Corpus BLEU-4 of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Write image attention maps for one sentence.
    AttnDump(AttnDumpArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 8)]
    img_dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    words: usize,
    #[arg(long, default_value_t = 6)]
    sentence_len: usize,
    #[arg(long, default_value_t = 2)]
    obj_slot: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Settings file; omit to use defaults plus overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set seed=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    image_attention: Option<ImageAttention>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum output length; defaults to twice the source length plus 5.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentence, whitespace tokenized.
    #[arg(long)]
    sentence: String,
    #[arg(long)]
    features: PathBuf,
    /// Which grid of the feature pack to attend over.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = ImageAttention::Soft)]
    attention: ImageAttention,
    #[arg(long)]
    gating: bool,
    #[arg(long)]
    doubling: bool,
    #[arg(long)]
    grounding: bool,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 6)]
    embed: usize,
    #[arg(long, default_value_t = 10)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    src_len: usize,
    #[arg(long, default_value_t = 3)]
    tgt_len: usize,
    #[arg(long, default_value_t = 4)]
    locations: usize,
    #[arg(long, default_value_t = 8)]
    img_dim: usize,
    #[arg(long, default_value_t = 16)]
    grounding_hidden: usize,
    /// Standard deviation of the random parameter values.
    #[arg(long, default_value_t = 0.4)]
    scale: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        grid: a.grid,
        img_dim: a.img_dim,
        classes: a.classes,
        words: a.words,
        sentence_len: a.sentence_len,
        obj_slot: a.obj_slot,
        noise_std: a.noise_std,
        seed: a.seed,
        train: a.train,
        dev: a.dev,
        test: a.test,
    };
    gen_synthetic(&spec)?.write(&a.out)?;
    println!("wrote synthetic task to {}", a.out.display());
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("missing required setting {key}")))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut s = match &a.config {
        Some(path) => RunSettings::load(path)?,
        None => RunSettings::default(),
    };
    for o in &a.overrides {
        s.set_pair(o)?;
    }
    if let Some(v) = a.image_attention {
        s.image_attention = v;
    }
    if let Some(v) = a.seed {
        s.train.seed = v;
    }
    if let Some(v) = a.max_epochs {
        s.train.max_epochs = v;
    }
    if let Some(v) = a.output {
        s.output = v;
    }

    let multimodal = s.image_attention != ImageAttention::None;
    let feats = |p: &Option<PathBuf>, key: &str| -> Result<Option<PathBuf>> {
        if multimodal {
            Ok(Some(required(p, key)?.clone()))
        } else {
            Ok(None)
        }
    };
    let train_feat = feats(&s.train_features, "train_features")?;
    let dev_feat = feats(&s.dev_features, "dev_features")?;
    let train_corpus = load_corpus(
        required(&s.train_src, "train_src")?,
        required(&s.train_tgt, "train_tgt")?,
        train_feat.as_deref(),
    )?;
    let dev_corpus =
        load_corpus(required(&s.dev_src, "dev_src")?, required(&s.dev_tgt, "dev_tgt")?, dev_feat.as_deref())?;
    let src = Vocabulary::build(&train_corpus.source, s.min_count);
    let tgt = Vocabulary::build(&train_corpus.target, s.min_count);
    let img_dim = train_corpus.features.as_ref().map(FeaturePack::dim).unwrap_or(0);
    let config = s.model_config(src.len(), tgt.len(), img_dim);
    let mut model = Model::<f32>::new(config, s.train.seed)?;
    let train_set = Dataset::from_corpus(&train_corpus, &src, &tgt)?;
    let dev_set = Dataset::from_corpus(&dev_corpus, &src, &tgt)?;
    info!("{} parameters, {} training pairs", model.params.num_elements(), train_set.len());

    let report = match &s.log {
        Some(path) => {
            let mut w = create(path)?;
            let r = train(&mut model, &train_set, &dev_set, &tgt, &s.train_config(), &mut w)?;
            w.flush()?;
            r
        }
        None => train(&mut model, &train_set, &dev_set, &tgt, &s.train_config(), &mut io::stdout().lock())?,
    };
    checkpoint::save(&s.output, &model, &src, &tgt)?;
    eprintln!(
        "best dev BLEU {:.2} at epoch {}; checkpoint written to {}",
        report.best_bleu,
        report.best_epoch,
        s.output.display()
    );
    Ok(())
}

fn feature_for(pack: Option<&FeaturePack>, i: usize) -> Result<Option<mmattn::Tensor<f32>>> {
    match pack {
        None => Ok(None),
        Some(p) if i < p.count() => Ok(Some(p.get(i))),
        Some(p) => Err(Error::FeatureFormat(format!("feature index {i} but the pack holds {}", p.count()))),
    }
}

fn translate(a: TranslateArgs) -> Result<()> {
    let (model, src, tgt) = checkpoint::load::<f32>(&a.checkpoint)?;
    let sentences = read_sentences(&a.src)?;
    let pack = a.features.as_ref().map(FeaturePack::read).transpose()?;
    if model.config().is_multimodal() && pack.is_none() {
        return Err(Error::InvalidArgument("this model needs --features".into()));
    }
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    for (i, s) in sentences.iter().enumerate() {
        let ids = src.encode(s);
        let feats = feature_for(pack.as_ref(), i)?;
        let max_len = a.max_len.unwrap_or(2 * ids.len() + 5);
        let (tokens, _) = model.greedy_decode(&ids, feats.as_ref(), max_len)?;
        writeln!(out, "{}", tgt.decode(&tokens).join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let hyp = read_sentences(&a.hyp)?;
    let reference = read_sentences(&a.reference)?;
    let report = corpus_bleu4(&hyp, &reference)?;
    println!("{}", BleuReport::HEADER);
    println!("{report}");
    Ok(())
}

fn attn_dump(a: AttnDumpArgs) -> Result<()> {
    let (model, src, tgt) = checkpoint::load::<f32>(&a.checkpoint)?;
    if !model.config().is_multimodal() {
        return Err(Error::InvalidArgument("text-only models have no image attention".into()));
    }
    let pack = FeaturePack::read(&a.features)?;
    let feats = feature_for(Some(&pack), a.index)?;
    let ids = src.encode(&tokenize(&a.sentence));
    let (tokens, trace) = model.greedy_decode(&ids, feats.as_ref(), a.max_len)?;
    let side = (pack.locations() as f64).sqrt().round() as usize;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let files = dump_attention(&trace, side, &a.out)?;
    println!("{}", tgt.decode(&tokens).join(" "));
    eprintln!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let config = ModelConfig {
        src_vocab: a.vocab,
        tgt_vocab: a.vocab,
        embed_dim: a.embed,
        enc_hidden: a.hidden,
        dec_hidden: a.hidden,
        out_dim: a.embed,
        img_dim: a.img_dim,
        image_attention: a.attention,
        gating: a.gating,
        doubling: a.doubling,
        grounding: a.grounding,
        grounding_hidden: a.grounding_hidden,
        local_half_width: None,
    };
    let mut model = Model::<f64>::new(config, a.seed)?;
    let mut rng = RngState::with_stream(a.seed, 7);
    randomize_params(&mut model, a.scale, &mut rng);
    let inst = random_instance(a.vocab, a.vocab, a.src_len, a.tgt_len, a.locations, a.img_dim, &mut rng);
    let r = model_grad_check(&mut model, &inst)?;
    let pass = r.max_rel_error <= a.tolerance;
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) over {} coordinates: {}",
        r.max_rel_error,
        r.param,
        r.index,
        r.analytic,
        r.numeric,
        r.coordinates,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Translate(a) => translate(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::AttnDump(a) => attn_dump(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
