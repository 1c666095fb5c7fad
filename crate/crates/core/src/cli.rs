//! Command-line front end: `synth`, `meta-train`, `train-baseline`,
//! `adapt-eval` and `chat`.
//!
//! Exit codes: 0 on success, 2 for usage, data or checkpoint errors, 3 when
//! training or evaluation produces non-finite values.

use std::fs;
use std::io::{BufRead, BufReader, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::{Preset, RunConfig};
use crate::error::{Error, Result};
use crate::knowledge::{DialogueGoal, KnowledgeTriplet};
use crate::meta::{adapt, meta_train, supervised_train, StopReason, Task, TaskSampler};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::model::KnowledgeModel;
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::synth::{read_tasks, split_pool, synth_generate, synth_vocab, write_tasks, TextTask};
use crate::vocab::Vocab;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "mkgd", version, about = "Knowledge-grounded dialogue generation with meta-learned fast adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Hyperparameter preset (desk or paper)
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    /// key = value config file applied over the preset [default: none]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed; beats the config file and MKGD_SEED [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra KEY=VALUE override, repeatable, applied last [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic task pool with a 70/15/15 split
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of tasks
        #[arg(long, default_value_t = 50)]
        tasks: usize,
        /// Output directory [default: data_dir from the config, synth]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Entity pool size [default: 20]
        #[arg(long)]
        n_entities: Option<usize>,
        /// Relation pool size [default: 4]
        #[arg(long)]
        n_relations: Option<usize>,
        /// Triplets per graph [default: 4]
        #[arg(long)]
        n_triplets: Option<usize>,
        /// Dialogue samples per task [default: 22]
        #[arg(long)]
        samples_per_task: Option<usize>,
    },
    /// Meta-train from a synthetic pool and save the best checkpoint
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth` [default: synth]
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Output directory [default: run]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Episode budget [default: 120 (desk), 20000 (paper)]
        #[arg(long)]
        max_episodes: Option<usize>,
        /// Inner learning rate [default: 0.003 (desk), 0.0001 (paper)]
        #[arg(long)]
        alpha: Option<f64>,
        /// Outer learning rate [default: 0.003 (desk), 0.0001 (paper)]
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train the non-meta baseline on every training sample
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth` [default: synth]
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Output directory [default: run]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Optimizer steps [default: 600 (desk), 20000 (paper)]
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate [default: 0.003 (desk), 0.0001 (paper)]
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Adapt a checkpoint to each held-out task and report metrics
    AdaptEval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth` [default: synth]
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint to start from
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Task file inside the data directory
        #[arg(long, default_value = "test")]
        split: String,
        /// Support samples per task [default: k_support, 8]
        #[arg(long)]
        support_size: Option<usize>,
        /// Write the JSON report here [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Generate responses grounded in a knowledge graph
    Chat {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Vocabulary file, one token per line [default: <data_dir>/vocab.txt]
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// JSON object with `knowledge` triples and an optional `goal`
        #[arg(long, value_name = "FILE")]
        graph: PathBuf,
        /// Read user lines from this file instead of stdin [default: stdin]
        #[arg(long, value_name = "FILE")]
        script: Option<PathBuf>,
        /// Longest response in tokens [default: 20]
        #[arg(long)]
        max_len: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::MetaTrain { common, .. }
            | Command::TrainBaseline { common, .. }
            | Command::AdaptEval { common, .. }
            | Command::Chat { common, .. } => common,
        }
    }
}

/// Layers preset, file, environment and flags into one config.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(common.preset);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

/// Runs a parsed command, writing results to `out` and diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = resolve_config(cli.command.common()).and_then(|cfg| dispatch(cli.command, cfg, out, err));
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, mut cfg: RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth {
            tasks,
            out: dir,
            n_entities,
            n_relations,
            n_triplets,
            samples_per_task,
            ..
        } => {
            cfg.n_entities = n_entities.unwrap_or(cfg.n_entities);
            cfg.n_relations = n_relations.unwrap_or(cfg.n_relations);
            cfg.n_triplets = n_triplets.unwrap_or(cfg.n_triplets);
            cfg.samples_per_task = samples_per_task.unwrap_or(cfg.samples_per_task);
            let dir = dir.unwrap_or_else(|| cfg.data_dir.clone());
            cmd_synth(&cfg, tasks, &dir, out)
        }
        Command::MetaTrain {
            data,
            out: dir,
            max_episodes,
            alpha,
            beta,
            ..
        } => {
            if let Some(v) = max_episodes {
                cfg.meta.max_episodes = v;
            }
            if let Some(v) = alpha {
                cfg.meta.alpha = v;
            }
            if let Some(v) = beta {
                cfg.meta.beta = v;
            }
            apply_dirs(&mut cfg, data, dir);
            cmd_meta_train(&cfg, out, err)
        }
        Command::TrainBaseline {
            data,
            out: dir,
            steps,
            lr,
            ..
        } => {
            if let Some(v) = steps {
                cfg.baseline.steps = v;
            }
            if let Some(v) = lr {
                cfg.baseline.lr = v;
            }
            apply_dirs(&mut cfg, data, dir);
            cmd_train_baseline(&cfg, out)
        }
        Command::AdaptEval {
            data,
            checkpoint,
            split,
            support_size,
            out: report_path,
            ..
        } => {
            apply_dirs(&mut cfg, data, None);
            let report = cmd_adapt_eval(&cfg, &checkpoint, &split, support_size, err)?;
            match report_path {
                Some(p) => fs::write(p, format!("{report}\n"))?,
                None => writeln!(out, "{report}")?,
            }
            Ok(EXIT_OK)
        }
        Command::Chat {
            checkpoint,
            vocab,
            graph,
            script,
            max_len,
            ..
        } => {
            if let Some(v) = max_len {
                cfg.max_len = v;
            }
            let vocab = vocab.unwrap_or_else(|| cfg.data_dir.join("vocab.txt"));
            let session = ChatSession::load(&checkpoint, &vocab, &graph, cfg.max_len)?;
            match script {
                Some(p) => {
                    let f = fs::File::open(p)?;
                    session.run(BufReader::new(f), out, false)?;
                }
                None => {
                    let stdin = std::io::stdin();
                    let interactive = stdin.is_terminal();
                    session.run(stdin.lock(), out, interactive)?;
                }
            }
            Ok(EXIT_OK)
        }
    }
}

fn apply_dirs(cfg: &mut RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) {
    if let Some(d) = data {
        cfg.data_dir = d;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `tasks.jsonl`, `train/valid/test.jsonl`, `vocab.txt` and
/// `manifest.json` into `dir`.
pub fn cmd_synth(cfg: &RunConfig, n_tasks: usize, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let spec = cfg.synth_spec();
    let tasks = synth_generate(&spec, n_tasks)?;
    create_dir(dir)?;
    let (train, valid, test) = split_pool(&tasks, cfg.seed);
    for (name, set) in [("tasks", &tasks), ("train", &train), ("valid", &valid), ("test", &test)] {
        let mut buf = Vec::new();
        write_tasks(set, &mut buf)?;
        write_file(&dir.join(format!("{name}.jsonl")), &buf)?;
    }
    let vocab = synth_vocab(&spec, cfg.vocab_cap);
    let mut buf = Vec::new();
    vocab.write_to(&mut buf)?;
    write_file(&dir.join("vocab.txt"), &buf)?;
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "tasks": tasks.len(),
        "triplets": tasks.iter().map(|t| t.triplets.len()).sum::<usize>(),
        "samples": tasks.iter().map(|t| t.samples.len()).sum::<usize>(),
        "train": train.len(),
        "valid": valid.len(),
        "test": test.len(),
        "vocab": vocab.len(),
        "n_entities": spec.n_entities,
        "n_relations": spec.n_relations,
        "n_triplets": spec.n_triplets,
        "samples_per_task": spec.samples_per_task,
    });
    write_file(&dir.join("manifest.json"), format!("{manifest:#}\n").as_bytes())?;
    writeln!(out, "wrote {} tasks to {}", tasks.len(), dir.display())?;
    Ok(EXIT_OK)
}

fn read_split(dir: &Path, name: &str) -> Result<Vec<TextTask>> {
    let path = dir.join(format!("{name}.jsonl"));
    let f = fs::File::open(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    read_tasks(BufReader::new(f))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Vocab::read_from(BufReader::new(f))
}

fn to_tasks(texts: &[TextTask], vocab: &Vocab, k_support: usize, cfg: &RunConfig) -> Result<Vec<Task<crate::knowledge::DialogueSample>>> {
    texts
        .iter()
        .map(|t| t.to_task(vocab, k_support, cfg.meta.k_query, cfg.seed))
        .collect()
}

fn build_model(cfg: &RunConfig, vocab: &Vocab) -> KnowledgeModel {
    KnowledgeModel::new(cfg.model_config(vocab.len()))
}

/// Meta-trains and writes `meta.ckpt`, `train_log.csv` and `config.txt`.
/// Divergence keeps the best checkpoint so far and exits with code 3.
pub fn cmd_meta_train(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let vocab = read_vocab(&cfg.data_dir.join("vocab.txt"))?;
    let train = to_tasks(&read_split(&cfg.data_dir, "train")?, &vocab, cfg.meta.k_support, cfg)?;
    let valid = to_tasks(&read_split(&cfg.data_dir, "valid")?, &vocab, cfg.meta.k_support, cfg)?;
    let meta = cfg.meta_config();
    let model = build_model(cfg, &vocab);
    let init = model.init_params(cfg.seed)?;
    let mut sampler = TaskSampler::new(train, meta.seed);
    let run = meta_train(&model, &init, &mut sampler, &meta, &valid)?;
    create_dir(&cfg.out_dir)?;
    save_checkpoint(&cfg.out_dir.join("meta.ckpt"), &run.best, None)?;
    write_file(&cfg.out_dir.join("train_log.csv"), run.log.to_csv().as_bytes())?;
    write_file(&cfg.out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    writeln!(
        out,
        "episodes {} best episode {} best validation loss {} stop {:?}",
        run.episodes_run, run.best_episode, run.best_val, run.stop
    )?;
    if let StopReason::Diverged(msg) = &run.stop {
        writeln!(err, "training diverged: {msg}; kept the best checkpoint")?;
        return Ok(EXIT_NUMERIC);
    }
    Ok(EXIT_OK)
}

/// Trains on every sample of the training tasks; writes `baseline.ckpt` and
/// `baseline_log.csv`.
pub fn cmd_train_baseline(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let vocab = read_vocab(&cfg.data_dir.join("vocab.txt"))?;
    let mut samples = Vec::new();
    for t in read_split(&cfg.data_dir, "train")? {
        samples.extend(t.samples(&vocab)?);
    }
    let model = build_model(cfg, &vocab);
    let init = model.init_params(cfg.seed)?;
    let (params, history) = supervised_train(&model, &init, &samples, &cfg.train_config())?;
    create_dir(&cfg.out_dir)?;
    save_checkpoint(&cfg.out_dir.join("baseline.ckpt"), &params, None)?;
    let mut log = String::from("step,kl,nll,bow,total,sel_acc\n");
    for h in &history {
        let l = h.stats.losses;
        log.push_str(&format!("{},{},{},{},{},{}\n", h.step, l.kl, l.nll, l.bow, l.total, h.stats.sel_acc));
    }
    write_file(&cfg.out_dir.join("baseline_log.csv"), log.as_bytes())?;
    if let Some(last) = history.last() {
        writeln!(out, "steps {} final batch loss {}", history.len(), last.stats.losses.total)?;
    }
    Ok(EXIT_OK)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<(KnowledgeModel, ParamStore)> {
    let (params, _) = load_checkpoint(path)?;
    let model = KnowledgeModel::from_params(&params)?.with_loss_weights(cfg.kl_weight, cfg.nll_weight, cfg.bow_weight);
    Ok((model, params))
}

fn check_vocab(model: &KnowledgeModel, vocab: &Vocab) -> Result<()> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} tokens, vocabulary has {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Adapts to every task of `split` and returns `{"pre": .., "post": ..}`.
pub fn cmd_adapt_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    support_size: Option<usize>,
    err: &mut dyn Write,
) -> Result<String> {
    let (model, params) = load_model(checkpoint, cfg)?;
    let vocab = read_vocab(&cfg.data_dir.join("vocab.txt"))?;
    check_vocab(&model, &vocab)?;
    let k = support_size.unwrap_or(cfg.meta.k_support);
    let tasks = to_tasks(&read_split(&cfg.data_dir, split)?, &vocab, k, cfg)?;
    let seen: Vec<u64> = match read_split(&cfg.data_dir, "train") {
        Ok(t) => t.iter().map(|t| t.task_id).collect(),
        Err(_) => Vec::new(),
    };
    let meta = cfg.meta_config();
    let render = |ids: &[usize]| vocab.render(ids);
    let (mut pre, mut post) = (EvalAccumulator::default(), EvalAccumulator::default());
    for task in &tasks {
        let a = adapt(&model, &params, task, &meta, &seen)?;
        pre.add(&model, &params, &task.query, render, cfg.max_len)?;
        post.add(&model, &a.params, &task.query, render, cfg.max_len)?;
        writeln!(
            err,
            "task {}: query nll {:.4} -> {:.4}",
            task.task_id, a.pre.losses.nll, a.post.losses.nll
        )?;
    }
    let report = |r: EvalReport| serde_json::to_value(r).expect("report serializes");
    let pre = pre.finish()?.report;
    let post = post.finish()?.report;
    Ok(serde_json::json!({ "pre": report(pre), "post": report(post) }).to_string())
}

#[derive(Deserialize)]
struct GraphFile {
    #[serde(default)]
    goal: Option<Vec<String>>,
    knowledge: Vec<[String; 3]>,
}

/// A loaded model, vocabulary and knowledge graph for scripted or
/// interactive generation.
pub struct ChatSession {
    model: KnowledgeModel,
    params: ParamStore,
    vocab: Vocab,
    triplets: Vec<KnowledgeTriplet>,
    knowledge: Arc<Vec<Vec<usize>>>,
    max_len: usize,
}

impl ChatSession {
    pub fn load(checkpoint: &Path, vocab: &Path, graph: &Path, max_len: usize) -> Result<Self> {
        let (params, _) = load_checkpoint(checkpoint)?;
        let model = KnowledgeModel::from_params(&params)?;
        let vocab = read_vocab(vocab)?;
        check_vocab(&model, &vocab)?;
        let text = fs::read_to_string(graph)?;
        let g: GraphFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if let Some(goal) = &g.goal {
            DialogueGoal::from_path(goal)?;
        }
        let triplets = g
            .knowledge
            .iter()
            .map(|[h, r, t]| KnowledgeTriplet::new(h.as_str(), r.as_str(), t.as_str()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(model, params, vocab, triplets, max_len)
    }

    pub fn new(
        model: KnowledgeModel,
        params: ParamStore,
        vocab: Vocab,
        triplets: Vec<KnowledgeTriplet>,
        max_len: usize,
    ) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::Schema {
                field: "knowledge".into(),
            });
        }
        let knowledge = Arc::new(triplets.iter().map(|t| vocab.numericalize(&t.linearize())).collect());
        Ok(ChatSession {
            model,
            params,
            vocab,
            triplets,
            knowledge,
            max_len,
        })
    }

    /// Response text and the selected triplet for one user line.
    pub fn respond(&self, line: &str) -> Result<(String, &KnowledgeTriplet)> {
        let history = self.vocab.numericalize(line);
        let g = self.model.generate(&self.params, &history, &self.knowledge, self.max_len)?;
        Ok((self.vocab.render(&g.tokens), &self.triplets[g.selected_triplet]))
    }

    /// Answers every non-empty line until end of input. Blank lines only
    /// re-prompt.
    pub fn run(&self, input: impl BufRead, out: &mut dyn Write, prompt: bool) -> Result<usize> {
        let mut turns = 0;
        if prompt {
            write!(out, "> ")?;
            out.flush()?;
        }
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                let (text, k) = self.respond(line.trim())?;
                writeln!(out, "bot: {text}")?;
                writeln!(out, "knowledge: {}", k.linearize())?;
                turns += 1;
            }
            if prompt {
                write!(out, "> ")?;
                out.flush()?;
            }
        }
        Ok(turns)
    }
}
