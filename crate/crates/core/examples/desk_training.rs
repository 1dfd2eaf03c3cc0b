//! Contrastive fine-tuning on the synthetic fixtures with the default
//! configuration, printing STS Spearman before and after.
//!
//! `cargo run --release -p sentemb-core --example desk_training -- [seed]`

use std::collections::BTreeMap;
use std::time::Instant;

use sentemb::eval::evaluate_sts;
use sentemb::train::{apply_adapters, train_cse, TrainConfig};
use sentemb::{make_reference_model, synthetic, validate_dataset, Encoder, RepresentationMethod};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let base = make_reference_model(seed);
    let triplets = synthetic::nli_triplets(200, 1);
    let sts = validate_dataset(synthetic::sts_pairs(300, 2)).expect("fixture is valid");
    let sets: BTreeMap<_, _> = [("synthetic-sts".to_string(), sts)].into_iter().collect();
    let method = RepresentationMethod::prompt_eol();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };

    let adapted = apply_adapters(&base, &cfg.lora, seed).expect("reference model takes adapters");
    let before = evaluate_sts(&sets, &method, &Encoder::new(&adapted, 16))
        .expect("evaluation succeeds")
        .average;
    let started = Instant::now();
    let (trained, log) = train_cse(&triplets, adapted, &cfg).expect("training succeeds");
    let elapsed = started.elapsed();
    let after = evaluate_sts(&sets, &method, &Encoder::new(&trained, 16))
        .expect("evaluation succeeds")
        .average;

    for s in &log.steps {
        println!("step {:>3}  loss {:.5}", s.step, s.loss);
    }
    let (first, last) = log.quarter_means().expect("at least four steps");
    println!("loss quarter means: first {first:.5}  last {last:.5}");
    println!("spearman: before {before:.4}  after {after:.4}");
    println!("training time: {elapsed:.2?}");
}
