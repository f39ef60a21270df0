//! Trains one model on the planted-signal task and reports OBJ-slot accuracy,
//! attention mass on the planted cell and test BLEU.
//!
//! cargo run --release --example planted -- [none|soft|hard|local] [epochs]

use std::time::Instant;

use mmattn::corpus::{gen_synthetic, SyntheticSpec};
use mmattn::diagnostics::evaluate_planted;
use mmattn::training::{train, Dataset, TrainConfig};
use mmattn::vocab::Vocabulary;
use mmattn::{ImageAttention, Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let attention: ImageAttention = args.next().as_deref().unwrap_or("soft").parse()?;
    let epochs: usize = args.next().as_deref().unwrap_or("30").parse()?;

    let spec = SyntheticSpec::default();
    let data = gen_synthetic(&spec)?;
    let src = Vocabulary::build(&data.train.corpus.source, 1);
    let tgt = Vocabulary::build(&data.train.corpus.target, 1);
    let config = ModelConfig {
        src_vocab: src.len(),
        tgt_vocab: tgt.len(),
        embed_dim: 32,
        enc_hidden: 64,
        dec_hidden: 64,
        out_dim: 32,
        img_dim: spec.img_dim,
        image_attention: attention,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(config, 1)?;
    let train_set = Dataset::from_corpus(&data.train.corpus, &src, &tgt)?;
    let dev = Dataset::from_corpus(&data.dev.corpus, &src, &tgt)?;
    let tc = TrainConfig { batch_size: 20, dropout: 0.0, max_epochs: epochs, seed: 1, ..TrainConfig::default() };

    let start = Instant::now();
    println!("epoch\tloss\tdev_bleu\tbaseline\tseconds");
    let report = train(&mut model, &train_set, &dev, &tgt, &tc, &mut std::io::stdout())?;
    println!("best epoch {} (dev BLEU {:.2}) in {:.0?}", report.best_epoch, report.best_bleu, start.elapsed());

    let r = evaluate_planted(&model, &data.test, &src, &tgt, spec.obj_slot)?;
    println!("test OBJ accuracy {:.3}", r.obj_accuracy);
    if let Some(mass) = r.attention_mass {
        println!("attention on planted cell {mass:.3}");
    }
    println!("test BLEU {:.2}", r.bleu);
    Ok(())
}
