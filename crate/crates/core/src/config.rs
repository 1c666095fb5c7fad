//! Run configuration in a `key = value` text format.
//!
//! Values are layered: built-in defaults, then a named preset, then a config
//! file, then the `MKGD_SEED` environment variable, then explicit overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{MetaConfig, TrainConfig};
use crate::model::ModelConfig;
use crate::synth::SyntheticTaskSpec;

pub const SEED_ENV: &str = "MKGD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::contract(format!("unknown preset `{other}` (desk or paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_cap: usize,
    pub kl_weight: f64,
    pub nll_weight: f64,
    pub bow_weight: f64,
    pub meta: MetaConfig,
    pub baseline: TrainConfig,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triplets: usize,
    pub samples_per_task: usize,
    pub max_len: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

/// Every recognized key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "embed_dim",
    "hidden_dim",
    "vocab_cap",
    "kl_weight",
    "nll_weight",
    "bow_weight",
    "alpha",
    "beta",
    "num_tasks",
    "k_support",
    "k_query",
    "inner_steps",
    "test_update_steps",
    "adapt_batch_size",
    "inner_optimizer",
    "outer_optimizer",
    "max_episodes",
    "early_stop_patience",
    "eval_every",
    "clip_norm",
    "per_task_copies",
    "baseline_lr",
    "baseline_batch_size",
    "baseline_steps",
    "n_entities",
    "n_relations",
    "n_triplets",
    "samples_per_task",
    "max_len",
    "data_dir",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Schema {
        field: key.to_string(),
    })
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_optional<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".to_string(), T::to_string)
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let synth = SyntheticTaskSpec::desk(0);
        let (model, meta, baseline, vocab_cap) = match p {
            Preset::Desk => (ModelConfig::desk(0), MetaConfig::desk(), TrainConfig::desk(), 200),
            Preset::Paper => (ModelConfig::paper(0), MetaConfig::paper(), TrainConfig::paper(), 30_000),
        };
        RunConfig {
            preset: p,
            seed: 0,
            embed_dim: model.embed_dim,
            hidden_dim: model.hidden_dim,
            vocab_cap,
            kl_weight: model.kl_weight,
            nll_weight: model.nll_weight,
            bow_weight: model.bow_weight,
            meta,
            baseline,
            n_entities: synth.n_entities,
            n_relations: synth.n_relations,
            n_triplets: synth.n_triplets,
            samples_per_task: synth.samples_per_task,
            max_len: 20,
            data_dir: PathBuf::from("synth"),
            out_dir: PathBuf::from("run"),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.meta;
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "vocab_cap" => self.vocab_cap = parse(key, value)?,
            "kl_weight" => self.kl_weight = parse(key, value)?,
            "nll_weight" => self.nll_weight = parse(key, value)?,
            "bow_weight" => self.bow_weight = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "beta" => m.beta = parse(key, value)?,
            "num_tasks" => m.num_tasks = parse(key, value)?,
            "k_support" => m.k_support = parse(key, value)?,
            "k_query" => m.k_query = parse(key, value)?,
            "inner_steps" => m.inner_steps = parse(key, value)?,
            "test_update_steps" => m.test_update_steps = parse(key, value)?,
            "adapt_batch_size" => m.adapt_batch_size = parse_optional(key, value)?,
            "inner_optimizer" => m.inner_optimizer = parse(key, value)?,
            "outer_optimizer" => m.outer_optimizer = parse(key, value)?,
            "max_episodes" => m.max_episodes = parse(key, value)?,
            "early_stop_patience" => m.early_stop_patience = parse(key, value)?,
            "eval_every" => m.eval_every = parse(key, value)?,
            "clip_norm" => {
                m.clip_norm = parse_optional(key, value)?;
                self.baseline.clip_norm = m.clip_norm;
            }
            "per_task_copies" => m.per_task_copies = parse(key, value)?,
            "baseline_lr" => self.baseline.lr = parse(key, value)?,
            "baseline_batch_size" => self.baseline.batch_size = parse(key, value)?,
            "baseline_steps" => self.baseline.steps = parse(key, value)?,
            "n_entities" => self.n_entities = parse(key, value)?,
            "n_relations" => self.n_relations = parse(key, value)?,
            "n_triplets" => self.n_triplets = parse(key, value)?,
            "samples_per_task" => self.samples_per_task = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            other => {
                return Err(Error::Schema {
                    field: other.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.meta;
        Some(match key {
            "seed" => self.seed.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "vocab_cap" => self.vocab_cap.to_string(),
            "kl_weight" => self.kl_weight.to_string(),
            "nll_weight" => self.nll_weight.to_string(),
            "bow_weight" => self.bow_weight.to_string(),
            "alpha" => m.alpha.to_string(),
            "beta" => m.beta.to_string(),
            "num_tasks" => m.num_tasks.to_string(),
            "k_support" => m.k_support.to_string(),
            "k_query" => m.k_query.to_string(),
            "inner_steps" => m.inner_steps.to_string(),
            "test_update_steps" => m.test_update_steps.to_string(),
            "adapt_batch_size" => show_optional(&m.adapt_batch_size),
            "inner_optimizer" => m.inner_optimizer.to_string(),
            "outer_optimizer" => m.outer_optimizer.to_string(),
            "max_episodes" => m.max_episodes.to_string(),
            "early_stop_patience" => m.early_stop_patience.to_string(),
            "eval_every" => m.eval_every.to_string(),
            "clip_norm" => show_optional(&m.clip_norm),
            "per_task_copies" => m.per_task_copies.to_string(),
            "baseline_lr" => self.baseline.lr.to_string(),
            "baseline_batch_size" => self.baseline.batch_size.to_string(),
            "baseline_steps" => self.baseline.steps.to_string(),
            "n_entities" => self.n_entities.to_string(),
            "n_relations" => self.n_relations.to_string(),
            "n_triplets" => self.n_triplets.to_string(),
            "samples_per_task" => self.samples_per_task.to_string(),
            "max_len" => self.max_len.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Schema { field } => Error::Parse {
                    line: i + 1,
                    message: format!("bad key or value for `{field}`"),
                },
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Reads the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v),
            Err(_) => Ok(()),
        }
    }

    /// Full rendering that [`apply_text`](Self::apply_text) reads back.
    pub fn to_text(&self) -> String {
        let mut out = format!("# preset: {}\n", self.preset);
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("known key")));
        }
        out
    }

    /// Model dimensions for a vocabulary of `vocab_size`.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            kl_weight: self.kl_weight,
            nll_weight: self.nll_weight,
            bow_weight: self.bow_weight,
            ..ModelConfig::new(vocab_size, self.embed_dim, self.hidden_dim)
        }
    }

    /// Meta settings with the run seed.
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            seed: self.seed,
            ..self.meta.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.baseline.clone()
        }
    }

    pub fn synth_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            n_triplets: self.n_triplets,
            samples_per_task: self.samples_per_task,
            seed: self.seed,
            ..SyntheticTaskSpec::desk(self.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    #[test]
    fn presets_hold_documented_sizes() {
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.embed_dim, d.hidden_dim, d.vocab_cap), (32, 32, 200));
        let p = RunConfig::preset(Preset::Paper);
        assert_eq!((p.embed_dim, p.hidden_dim, p.vocab_cap), (300, 300, 30_000));
        assert_eq!((p.meta.alpha, p.meta.beta), (1e-4, 1e-4));
        assert_eq!((p.meta.num_tasks, p.meta.k_support, p.meta.k_query), (5, 8, 14));
        assert_eq!((p.meta.inner_steps, p.meta.test_update_steps), (4, 10));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset(Preset::Paper);
        c.set("clip_norm", "none").unwrap();
        c.set("adapt_batch_size", "4").unwrap();
        c.set("inner_optimizer", "sgd").unwrap();
        let mut back = RunConfig::preset(Preset::Paper);
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta.inner_optimizer, OptimizerKind::Sgd);
        assert_eq!(back.meta.clip_norm, None);
    }

    #[test]
    fn file_overrides_preset_and_later_sets_override_file() {
        let mut c = RunConfig::preset(Preset::Desk);
        c.apply_text("# comment\nalpha = 0.5\n\nmax_episodes=7 # trailing\n").unwrap();
        assert_eq!((c.meta.alpha, c.meta.max_episodes), (0.5, 7));
        c.set("alpha", "0.25").unwrap();
        assert_eq!(c.meta.alpha, 0.25);
        assert_eq!(c.meta.beta, MetaConfig::desk().beta);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let mut c = RunConfig::default();
        match c.apply_text("seed = 1\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match c.apply_text("seed = x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.set("bogus", "1"), Err(Error::Schema { .. })));
    }

    #[test]
    fn every_key_renders() {
        let c = RunConfig::default();
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
        assert_eq!(c.to_text().lines().count(), KEYS.len() + 1);
    }

    #[test]
    fn seed_flows_into_sub_configs() {
        let mut c = RunConfig::default();
        c.set("seed", "42").unwrap();
        assert_eq!(c.meta_config().seed, 42);
        assert_eq!(c.train_config().seed, 42);
        assert_eq!(c.synth_spec().seed, 42);
    }
}
