//! Trains the model on one synthetic task and shows how the prior and
//! posterior spread over the graph's triplets.

use mkgd::meta::{supervised_train, TrainConfig};
use mkgd::model::{argmax, KnowledgeModel, ModelConfig};
use mkgd::synth::{synth_generate, synth_vocab, SyntheticTaskSpec};

fn main() -> mkgd::Result<()> {
    let spec = SyntheticTaskSpec::desk(2);
    let vocab = synth_vocab(&spec, 200);
    let task = &synth_generate(&spec, 1)?[0];
    let samples = task.samples(&vocab)?;
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(0)?;
    let cfg = TrainConfig { steps: 150, ..TrainConfig::desk() };
    let (params, history) = supervised_train(&model, &init, &samples, &cfg)?;
    println!(
        "batch loss {:.3} -> {:.3}",
        history[0].stats.losses.total,
        history.last().unwrap().stats.losses.total
    );
    for s in samples.iter().take(4) {
        let out = model.run(&params, s)?;
        let fmt = |p: &[f64]| p.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
        println!(
            "gold {:?}  prior [{}] -> {}  posterior [{}] -> {}",
            s.gold_triplet,
            fmt(&out.prior),
            argmax(&out.prior),
            fmt(&out.posterior),
            argmax(&out.posterior)
        );
        let g = model.generate(&params, &s.history, &s.knowledge, 20)?;
        println!("  {} => {}", vocab.render(&s.history), vocab.render(&g.tokens));
    }
    Ok(())
}
