//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mkgd::knowledge::DialogueSample;
use mkgd::meta::{
    adapt, meta_batch_step, meta_train, supervised_train, BatchStats, Learner, MetaConfig, Task, TaskSampler,
    TrainConfig,
};
use mkgd::metrics::{bleu_n, char_f1, distinct_n, evaluate_samples, perplexity, Scored};
use mkgd::model::{kl_div_loss, total_loss, KnowledgeModel, ModelConfig};
use mkgd::params::{load_checkpoint, save_checkpoint};
use mkgd::synth::{synth_generate_from, synth_vocab, SyntheticTaskSpec};
use mkgd::{Grads, ParamStore, Tape, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_sample(uid: u64, history: Vec<usize>, response: Vec<usize>) -> DialogueSample {
    DialogueSample::new(uid, history, response, Arc::new(vec![vec![4, 9, 7], vec![5, 9, 8]]), Some(0)).unwrap()
}

fn desk_tasks(
    spec: &SyntheticTaskSpec,
    vocab: &mkgd::vocab::Vocab,
    first: u64,
    n: usize,
    k_support: usize,
    cfg: &MetaConfig,
) -> Vec<Task<DialogueSample>> {
    let spec = SyntheticTaskSpec {
        samples_per_task: k_support + cfg.k_query,
        ..spec.clone()
    };
    synth_generate_from(&spec, first, n)
        .unwrap()
        .iter()
        .map(|t| t.to_task(vocab, k_support, cfg.k_query, cfg.seed).unwrap())
        .collect()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let model = KnowledgeModel::new(ModelConfig::new(10, 4, 4));
    let params = model.init_params(3).unwrap();
    let sample = tiny_sample(0, vec![4, 5, 6], vec![7, 8]);
    let (_, grads) = model.loss_and_grads(&params, &sample).unwrap();
    let h = 1e-5;
    let (mut worst_rel, mut worst_abs_small, mut n) = (0.0f64, 0.0f64, 0);
    for (name, t) in params.iter() {
        let analytic = grads.get(name).unwrap().values();
        for i in 0..t.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().values_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().values_mut()[i] -= h;
            let fd = (model.run(&plus, &sample).unwrap().losses.total
                - model.run(&minus, &sample).unwrap().losses.total)
                / (2.0 * h);
            let a = analytic[i];
            if a.abs() < 1e-6 {
                worst_abs_small = worst_abs_small.max((a - fd).abs());
            } else {
                worst_rel = worst_rel.max((a - fd).abs() / a.abs());
            }
            n += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_rel < 1e-4 && worst_abs_small < 1e-7 && secs < 30.0,
        format!("{n} entries, worst relative {worst_rel:.2e}, worst absolute below 1e-6 {worst_abs_small:.2e}, {secs:.1}s"),
    )
}

fn loss_values() -> Outcome {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let q = tape.constant(Tensor::vector(vec![0.5, 0.5]));
    let kl = kl_div_loss(&mut tape, p, q).unwrap();
    let kl = tape.value(kl).item().unwrap();

    let v = 10;
    let model = KnowledgeModel::new(ModelConfig::new(v, 4, 4));
    let mut params = model.init_params(0).unwrap();
    KnowledgeModel::zero_params(&mut params);
    let sample = tiny_sample(0, vec![4, 5], vec![7, 8, 6]);
    let m = sample.response.len() + 1;
    let nll = model.run(&params, &sample).unwrap().losses.nll;
    let uniform = m as f64 * (v as f64).ln();
    let total = total_loss(1.0, 2.0, 3.0).unwrap();
    check(
        (kl - 2f64.ln()).abs() <= 1e-9 && (nll - uniform).abs() <= 1e-12 * uniform && total == 6.0,
        format!("kl {kl:.12}, uniform nll {nll:.15} vs {uniform:.15} over {m} targets, total {total}"),
    )
}

fn metric_oracles() -> Outcome {
    let h = vec!["a b c d".to_string()];
    let r = vec!["a b x d".to_string()];
    let b1 = bleu_n(&h, &r, 1).unwrap();
    let b2 = bleu_n(&h, &r, 2).unwrap();
    let d1 = distinct_n(&["a a a".to_string()], 1).unwrap();
    let f1 = char_f1("abc", "abd");
    let model = KnowledgeModel::new(ModelConfig::new(100, 4, 4));
    let mut params = model.init_params(0).unwrap();
    KnowledgeModel::zero_params(&mut params);
    let samples: Vec<_> = (0..3)
        .map(|i| tiny_sample(i, vec![10 + i as usize, 20], vec![30, 40 + i as usize, 50]))
        .collect();
    let ppl = perplexity(&Scored { model: &model, params: &params }, &samples).unwrap();
    check(
        (b1 - 0.75).abs() <= 1e-12
            && (b2 - 0.5).abs() <= 1e-12
            && (d1 - 1.0 / 3.0).abs() <= 1e-12
            && (f1 - 2.0 / 3.0).abs() <= 1e-12
            && (ppl - 100.0).abs() <= 1e-6,
        format!("bleu1 {b1}, bleu2 {b2}, distinct1 {d1:.6}, char f1 {f1:.6}, uniform ppl {ppl:.9}"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticTaskSpec::desk(4);
    let vocab = synth_vocab(&spec, 200);
    let sample = synth_generate_from(&spec, 0, 1).unwrap()[0].samples(&vocab).unwrap().remove(0);
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(0).unwrap();
    let initial = model.run(&init, &sample).unwrap().losses.total;
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 1,
        ..TrainConfig::desk()
    };
    let (params, history) = supervised_train(&model, &init, std::slice::from_ref(&sample), &cfg).unwrap();
    let hit = history.iter().position(|s| s.stats.losses.total < 0.1 * initial);
    let secs = start.elapsed().as_secs_f64();
    let end = model.run(&params, &sample).unwrap().losses;
    check(
        hit.is_some() && secs < 60.0,
        format!(
            "initial {initial:.3}, below 10% at step {hit:?}, final kl {:.1e} nll {:.4} bow {:.4} with bow floor {:.4}, {secs:.1}s",
            end.kl,
            end.nll,
            end.bow,
            bow_floor(&sample.response)
        ),
    )
}

/// Smallest value of a summed bag-of-words loss: the response length times
/// the entropy of its token histogram.
fn bow_floor(response: &[usize]) -> f64 {
    let m = response.len() as f64;
    let mut counts = std::collections::BTreeMap::new();
    for t in response {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    counts.values().map(|&c: &f64| -c * (c / m).ln()).sum()
}

struct TrendResult {
    wins: usize,
    n: usize,
    sel_meta: f64,
    sel_fresh: f64,
    gap8: f64,
    gap32: f64,
    train_time: Duration,
}

fn trend_experiment() -> TrendResult {
    let cfg = MetaConfig::desk();
    let spec = SyntheticTaskSpec::desk(11);
    let vocab = synth_vocab(&spec, 200);
    let train = desk_tasks(&spec, &vocab, 0, 50, cfg.k_support, &cfg);
    let valid = desk_tasks(&spec, &vocab, 1000, 8, cfg.k_support, &cfg);
    let test = desk_tasks(&spec, &vocab, 2000, 20, 32, &cfg);
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(cfg.seed).unwrap();
    let start = Instant::now();
    let mut sampler = TaskSampler::new(train, cfg.seed);
    let run = meta_train(&model, &init, &mut sampler, &cfg, &valid).unwrap();
    let train_time = start.elapsed();
    let mut r = TrendResult {
        wins: 0,
        n: test.len(),
        sel_meta: 0.0,
        sel_fresh: 0.0,
        gap8: 0.0,
        gap32: 0.0,
        train_time,
    };
    let seen: Vec<u64> = sampler.pool().iter().map(|t| t.task_id).collect();
    for task in &test {
        for k in [8, 32] {
            let t = task.with_support_size(k).unwrap();
            let m = adapt(&model, &run.best, &t, &cfg, &seen).unwrap();
            let f = adapt(&model, &init, &t, &cfg, &seen).unwrap();
            let gap = (f.post.losses.nll - m.post.losses.nll) / test.len() as f64;
            if k == 8 {
                r.gap8 += gap;
                r.wins += usize::from(m.post.losses.nll < f.post.losses.nll);
                r.sel_meta += m.post.sel_acc / test.len() as f64;
                r.sel_fresh += f.post.sel_acc / test.len() as f64;
            } else {
                r.gap32 += gap;
            }
        }
    }
    r
}

fn fast_adaptation(r: &TrendResult) -> Outcome {
    let secs = r.train_time.as_secs_f64();
    check(
        r.wins * 5 >= r.n * 4 && r.sel_meta > r.sel_fresh && secs <= 300.0,
        format!(
            "meta beats fresh on {}/{} tasks, selection accuracy {:.3} vs {:.3}, meta-train {secs:.1}s",
            r.wins, r.n, r.sel_meta, r.sel_fresh
        ),
    )
}

fn adaptation_size(r: &TrendResult) -> Outcome {
    check(
        r.gap8 > r.gap32,
        format!("mean nll gap {:.3} at support 8, {:.3} at support 32", r.gap8, r.gap32),
    )
}

struct Counting<'a> {
    model: &'a KnowledgeModel,
    seen: RefCell<BTreeSet<u64>>,
}

impl Learner for Counting<'_> {
    type Sample = DialogueSample;
    fn loss_and_grads(&self, params: &ParamStore, samples: &[DialogueSample]) -> mkgd::Result<(BatchStats, Grads)> {
        self.seen.borrow_mut().extend(samples.iter().map(|s| s.uid));
        Learner::loss_and_grads(self.model, params, samples)
    }
    fn evaluate(&self, params: &ParamStore, samples: &[DialogueSample]) -> mkgd::Result<BatchStats> {
        self.seen.borrow_mut().extend(samples.iter().map(|s| s.uid));
        Learner::evaluate(self.model, params, samples)
    }
}

fn batch_arithmetic() -> Outcome {
    let cfg = MetaConfig {
        num_tasks: 5,
        k_support: 8,
        k_query: 14,
        ..MetaConfig::desk()
    };
    let spec = SyntheticTaskSpec::desk(6);
    let vocab = synth_vocab(&spec, 200);
    let pool = desk_tasks(&spec, &vocab, 0, 12, cfg.k_support, &cfg);
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let params = model.init_params(0).unwrap();
    let learner = Counting {
        model: &model,
        seen: RefCell::new(BTreeSet::new()),
    };
    let mut sampler = TaskSampler::new(pool, 1);
    let batch = sampler.sample(cfg.num_tasks).unwrap();
    let mut outer = cfg.outer_optimizer(&params);
    meta_batch_step(&learner, &params, &batch, &cfg, &mut outer).unwrap();
    let touched = learner.seen.borrow().len();
    check(
        touched == cfg.episode_samples() && touched == 110,
        format!("{touched} distinct samples touched, episode size {}", cfg.episode_samples()),
    )
}

fn determinism_and_persistence() -> Outcome {
    let cfg = MetaConfig {
        max_episodes: 6,
        eval_every: 2,
        ..MetaConfig::desk()
    };
    let spec = SyntheticTaskSpec::desk(8);
    let vocab = synth_vocab(&spec, 200);
    let train = desk_tasks(&spec, &vocab, 0, 10, cfg.k_support, &cfg);
    let valid = desk_tasks(&spec, &vocab, 100, 2, cfg.k_support, &cfg);
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(cfg.seed).unwrap();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let mut sampler = TaskSampler::new(train.clone(), cfg.seed);
            meta_train(&model, &init, &mut sampler, &cfg, &valid).unwrap()
        })
        .collect();
    let same_log = runs[0].log.to_csv() == runs[1].log.to_csv();
    let same_params = runs[0].best.bit_identical(&runs[1].best);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.ckpt");
    let outer = cfg.outer_optimizer(&runs[0].best);
    save_checkpoint(&path, &runs[0].best, outer.adam_state()).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    let reloaded = KnowledgeModel::from_params(&loaded).unwrap();
    let render = |ids: &[usize]| vocab.render(ids);
    let before = evaluate_samples(&model, &runs[0].best, &valid[0].query, render, 20).unwrap();
    let after = evaluate_samples(&reloaded, &loaded, &valid[0].query, render, 20).unwrap();
    let bits = |r: &mkgd::metrics::EvalReport| {
        [r.ppl, r.f1, r.bleu1, r.bleu2, r.distinct1, r.distinct2, r.sel_acc].map(f64::to_bits)
    };
    let same_eval = bits(&before.report) == bits(&after.report) && before.hypotheses == after.hypotheses;
    let round_trip = loaded.bit_identical(&runs[0].best);
    check(
        same_log && same_params && round_trip && same_eval,
        format!(
            "identical logs {same_log}, identical params {same_params}, bit-exact reload {round_trip}, identical evaluation {same_eval}"
        ),
    )
}

fn degenerate_configs() -> Outcome {
    let spec = SyntheticTaskSpec::desk(10);
    let vocab = synth_vocab(&spec, 200);
    let base = MetaConfig::desk();
    let tasks = desk_tasks(&spec, &vocab, 0, 6, base.k_support, &base);
    let model = KnowledgeModel::new(ModelConfig::desk(vocab.len()));
    let init = model.init_params(0).unwrap();

    let zero = MetaConfig {
        max_episodes: 0,
        ..base.clone()
    };
    let mut sampler = TaskSampler::new(tasks.clone(), 0);
    let run = meta_train(&model, &init, &mut sampler, &zero, &tasks[..1]).unwrap();
    let untouched = run.best.bit_identical(&init);

    let single = MetaConfig {
        num_tasks: 1,
        inner_steps: 0,
        ..base
    };
    let mut outer = single.outer_optimizer(&init);
    let (meta, _) = meta_batch_step(&model, &init, &[&tasks[0]], &single, &mut outer).unwrap();
    let tc = TrainConfig {
        lr: single.beta,
        optimizer: single.outer_optimizer,
        batch_size: tasks[0].query.len(),
        steps: 1,
        clip_norm: single.clip_norm,
        seed: 0,
    };
    let (sup, _) = supervised_train(&model, &init, &tasks[0].query, &tc).unwrap();
    let same_step = meta.bit_identical(&sup);
    let moved = !meta.bit_identical(&init);
    check(
        untouched && same_step && moved,
        format!("zero episodes untouched {untouched}, degenerate meta step equals supervised step {same_step}"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient oracle", gradient_oracle()),
        (2, "loss unit values", loss_values()),
        (3, "metric oracles", metric_oracles()),
        (4, "overfit one sample", overfit()),
    ];
    let trend = trend_experiment();
    results.push((5, "fast-adaptation trend", fast_adaptation(&trend)));
    results.push((6, "adaptation-size trend", adaptation_size(&trend)));
    results.push((7, "batch arithmetic", batch_arithmetic()));
    results.push((8, "determinism and persistence", determinism_and_persistence()));
    results.push((9, "degenerate configs", degenerate_configs()));
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
