//! Generates a synthetic task pool, splits it and prints one task.

use mkgd::synth::{split_pool, synth_generate, synth_vocab, SyntheticTaskSpec};

fn main() -> mkgd::Result<()> {
    let spec = SyntheticTaskSpec::desk(5);
    let tasks = synth_generate(&spec, 20)?;
    let (train, valid, test) = split_pool(&tasks, 5);
    let vocab = synth_vocab(&spec, 200);
    println!(
        "{} tasks: {} train, {} valid, {} test; vocabulary {}",
        tasks.len(),
        train.len(),
        valid.len(),
        test.len(),
        vocab.len()
    );
    let t = &tasks[0];
    println!("task {} goal {:?}", t.task_id, t.goal);
    for (h, r, tail) in t.triplet_set() {
        println!("  {h} {r} {tail}");
    }
    for s in t.samples.iter().take(3) {
        println!("  user: {}\n  bot:  {}  (gold {:?})", s.history, s.response, s.gold);
    }
    let task = t.to_task(&vocab, 8, 14, 0)?;
    println!("support {} query {}", task.support.len(), task.query.len());
    Ok(())
}
