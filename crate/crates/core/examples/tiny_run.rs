//! Trains every decoder of the tiny preset on a synthetic corpus and prints
//! test-set scores next to their baselines.
//!
//! cargo run --release -p autodial-core --example tiny_run -- [epochs] [n_train]

use std::time::Instant;

use autodial::data::{build_label_spaces, synth_corpus, DialogueTask, SynthConfig, Vocab};
use autodial::infer::{evaluate, InferOptions};
use autodial::model::{AutodialModel, DecoderSpec};
use autodial::train::{train, TrainConfig, TrainMode};
use autodial::transformer::ModelConfig;

fn main() -> autodial::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let (all, report) = synth_corpus(&SynthConfig {
        n_dialogues: n_train + n_train / 5,
        ..SynthConfig::default()
    });
    let (train_set, test_set) = all.split_at(n_train);
    let vocab = Vocab::from_corpus(&all);
    let spaces = build_label_spaces(&all);
    println!("vocab {} | {:?}", vocab.len(), report);
    let mut specs: Vec<DecoderSpec> = DialogueTask::CLASSIFICATION
        .iter()
        .map(|&t| DecoderSpec::classification(t, spaces.get(t).unwrap().clone()))
        .collect();
    let cfg = ModelConfig::tiny(vocab.len());
    specs.push(DecoderSpec::generative("dst", vec![DialogueTask::Dst], cfg.gen_dec_layers));
    let mut model = AutodialModel::build(cfg, specs, 13)?.with_vocab(vocab);
    for task in ["act", "intent", "domain", "dst"] {
        let mode = if task == "dst" { TrainMode::Generative } else { TrainMode::Autodial };
        let tc = TrainConfig {
            epochs,
            cache_encoder: true,
            ..TrainConfig::tiny(mode)
        };
        let t0 = Instant::now();
        let r = train(&mut model, task, train_set, &tc)?;
        println!("{task}: losses {:?} in {:.1}s", r.epoch_losses, t0.elapsed().as_secs_f64());
    }
    let t0 = Instant::now();
    let eval = evaluate(&model, train_set, test_set, &["act", "intent", "domain", "dst"], &InferOptions::default())?;
    print!("{}", eval.to_table());
    println!("eval {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
