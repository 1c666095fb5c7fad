//! Adapts one initialization to held-out tasks with growing support sets.

use mkgd::meta::{adapt, MetaConfig};
use mkgd::model::{KnowledgeModel, ModelConfig};
use mkgd::synth::{synth_generate, synth_vocab, SyntheticTaskSpec};

fn main() -> mkgd::Result<()> {
    let cfg = MetaConfig::desk();
    let spec = SyntheticTaskSpec { samples_per_task: 32 + cfg.k_query, ..SyntheticTaskSpec::desk(9) };
    let vocab = synth_vocab(&spec, 200);
    let tasks = synth_generate(&spec, 4)?;
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(0)?;
    for k in [2, 8, 16, 32] {
        let (mut pre, mut post) = (0.0, 0.0);
        for t in &tasks {
            let task = t.to_task(&vocab, k, cfg.k_query, 0)?;
            let a = adapt(&model, &init, &task, &cfg, &[])?;
            pre += a.pre.losses.nll / tasks.len() as f64;
            post += a.post.losses.nll / tasks.len() as f64;
        }
        println!("support {k:>2}: query nll {pre:.3} -> {post:.3}");
    }
    Ok(())
}
