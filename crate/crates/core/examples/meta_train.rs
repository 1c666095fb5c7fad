//! Meta-trains on synthetic tasks and compares fast adaptation from the
//! meta-learned initialization against a fresh one on held-out tasks.
//!
//! `cargo run --release --example meta_train -- [seed]`

use std::time::Instant;

use mkgd::meta::{adapt, meta_train, MetaConfig, Task, TaskSampler};
use mkgd::model::{KnowledgeModel, ModelConfig};
use mkgd::synth::{synth_generate_from, synth_vocab, SyntheticTaskSpec};

fn main() -> mkgd::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let spec = SyntheticTaskSpec::desk(seed);
    let vocab = synth_vocab(&spec, 200);
    let cfg = MetaConfig::desk();
    let tasks = |first, n, k_s| -> mkgd::Result<Vec<Task<_>>> {
        let spec = SyntheticTaskSpec { samples_per_task: k_s + cfg.k_query, ..spec.clone() };
        synth_generate_from(&spec, first, n)?
            .iter()
            .map(|t| t.to_task(&vocab, k_s, cfg.k_query, cfg.seed))
            .collect()
    };
    let train = tasks(0, 50, cfg.k_support)?;
    let valid = tasks(1000, 8, cfg.k_support)?;
    let test = tasks(2000, 20, 32)?;

    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(cfg.seed)?;
    let t0 = Instant::now();
    let mut sampler = TaskSampler::new(train, cfg.seed);
    let run = meta_train(&model, &init, &mut sampler, &cfg, &valid)?;
    println!(
        "meta-train: {} episodes, best episode {}, best valid loss {:.3}, stop {:?}, {:.1}s",
        run.episodes_run,
        run.best_episode,
        run.best_val,
        run.stop,
        t0.elapsed().as_secs_f64()
    );

    for k in [8, 32] {
        let (mut wins, mut gap, mut acc_meta, mut acc_fresh) = (0, 0.0, 0.0, 0.0);
        for task in &test {
            let task = task.with_support_size(k)?;
            let m = adapt(&model, &run.best, &task, &cfg, &[])?;
            let f = adapt(&model, &init, &task, &cfg, &[])?;
            if m.post.losses.nll < f.post.losses.nll {
                wins += 1;
            }
            gap += (f.post.losses.nll - m.post.losses.nll) / test.len() as f64;
            acc_meta += m.post.sel_acc / test.len() as f64;
            acc_fresh += f.post.sel_acc / test.len() as f64;
        }
        println!(
            "support {k:>2}: meta wins {wins}/{} tasks, mean nll gap {gap:.3}, sel_acc meta {acc_meta:.3} fresh {acc_fresh:.3}",
            test.len()
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
