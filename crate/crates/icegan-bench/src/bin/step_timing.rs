//! Wall-clock timing of full-scale training batches; used to size runs.

use icegan_core::config::RunConfig;
use icegan_core::data::generate_toy_corpus;
use icegan_core::train::Trainer;

fn main() {
    icegan_core::tune_allocator();
    let cfg = RunConfig::default();
    let corpus = generate_toy_corpus(20, 9, cfg.corpus_seed()).expect("corpus");
    let train: Vec<_> = corpus
        .iter()
        .filter(|s| s.subject_id != "s00")
        .cloned()
        .collect();
    println!("train pairs: {}", train.len());
    let dir = std::env::temp_dir().join("icegan_step_timing");
    let mut trainer = Trainer::new(cfg, &train, &dir).expect("trainer");
    let picks: Vec<(usize, usize)> = (0..16).map(|i| (i, i % 5)).collect();

    for batch in 0..6 {
        let t = std::time::Instant::now();
        let losses = trainer.train_batch(0, batch, &picks, 1e-3).expect("step");
        let dt = t.elapsed().as_secs_f64();
        println!(
            "batch {batch}: {dt:.2}s  d_adv={:.4} l_margin={:.4} l_pixel={:.4}",
            losses.d_adv, losses.l_margin, losses.l_pixel
        );
    }
}
