//! Seeded synthetic knowledge-dialogue tasks.
//!
//! Every task owns a fresh random graph over a shared entity and relation
//! pool, with one triplet per relation. Each sample asks about one triplet (the gold one) and the response
//! verbalizes it, so the tail token is always in the response.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{DialogueGoal, DialogueSample, KnowledgeTriplet};
use crate::meta::{split_support_query, Task};
use crate::vocab::Vocab;

/// History and response patterns. Placeholders: `{A}` and `{B}` are the goal
/// topics, `{H}`, `{R}`, `{T}` the gold triplet's fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub history: String,
    pub response: String,
}

impl Template {
    pub fn new(history: &str, response: &str) -> Self {
        Template {
            history: history.to_string(),
            response: response.to_string(),
        }
    }
}

fn fill(pattern: &str, goal: &DialogueGoal, t: &KnowledgeTriplet) -> String {
    pattern
        .replace("{A}", &goal.topic_a)
        .replace("{B}", &goal.topic_b)
        .replace("{H}", &t.head)
        .replace("{R}", &t.relation)
        .replace("{T}", &t.tail)
}

pub fn default_templates() -> Vec<Template> {
    vec![
        Template::new("let us talk about {A} . what is the {R} of {H} ?", "the {R} of {H} is {T}"),
        Template::new("i like {A} . tell me the {R} of {H}", "{H} has {R} {T}"),
        Template::new("{A} is great . do you know {H} {R} ?", "yes , {H} {R} {T} ."),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triplets: usize,
    pub samples_per_task: usize,
    pub templates: Vec<Template>,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Enough samples per task for one 8 + 14 support/query split.
    pub fn desk(seed: u64) -> Self {
        SyntheticTaskSpec {
            n_entities: 20,
            n_relations: 4,
            n_triplets: 4,
            samples_per_task: 22,
            templates: default_templates(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::contract("template set must be non-empty"));
        }
        if self.n_entities < 3 || self.n_relations == 0 || self.n_triplets == 0 || self.samples_per_task == 0 {
            return Err(Error::contract("synthetic spec needs 3+ entities and positive counts"));
        }
        if self.n_triplets > self.n_relations {
            return Err(Error::contract(format!(
                "{} triplets need at least as many relations, got {}",
                self.n_triplets, self.n_relations
            )));
        }
        Ok(())
    }
}

/// Text-level sample with an exact gold label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub history: String,
    pub response: String,
    pub gold: usize,
}

/// A generated task before numericalization; one JSON line per task on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTask {
    pub task_id: u64,
    pub goal: DialogueGoal,
    pub triplets: Vec<KnowledgeTriplet>,
    pub samples: Vec<TextSample>,
}

impl TextTask {
    pub fn triplet_set(&self) -> BTreeSet<(String, String, String)> {
        self.triplets
            .iter()
            .map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone()))
            .collect()
    }

    /// Numericalized samples with uids `task_id << 20 | index`.
    pub fn samples(&self, vocab: &Vocab) -> Result<Vec<DialogueSample>> {
        let knowledge = Arc::new(self.triplets.iter().map(|t| vocab.numericalize(&t.linearize())).collect::<Vec<_>>());
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                DialogueSample::new(
                    (self.task_id << 20) | i as u64,
                    vocab.numericalize(&s.history),
                    vocab.numericalize(&s.response),
                    knowledge.clone(),
                    Some(s.gold),
                )
            })
            .collect()
    }

    /// Seeded support/query split of the numericalized samples.
    pub fn to_task(&self, vocab: &Vocab, k_support: usize, k_query: usize, seed: u64) -> Result<Task<DialogueSample>> {
        split_support_query(self.task_id, self.samples(vocab)?, k_support, k_query, seed ^ self.task_id)
    }
}

fn task_rng(seed: u64, task_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_id);
    rng
}

/// Generates tasks `first_id .. first_id + n_tasks`. Each task draws from its
/// own RNG stream, so a task does not depend on how many others are made.
pub fn synth_generate_from(spec: &SyntheticTaskSpec, first_id: u64, n_tasks: usize) -> Result<Vec<TextTask>> {
    spec.validate()?;
    let entities: Vec<String> = (0..spec.n_entities).map(|i| format!("e{i}")).collect();
    let relations: Vec<String> = (0..spec.n_relations).map(|i| format!("r{i}")).collect();
    (first_id..first_id + n_tasks as u64)
        .map(|task_id| {
            let mut rng = task_rng(spec.seed, task_id);
            let topics: Vec<&String> = entities.choose_multiple(&mut rng, 2).collect();
            let goal = DialogueGoal {
                topic_a: topics[0].clone(),
                topic_b: topics[1].clone(),
            };
            let rels: Vec<usize> = rand::seq::index::sample(&mut rng, spec.n_relations, spec.n_triplets).into_vec();
            let triplets = rels
                .iter()
                .map(|&r| {
                    let head = topics[rng.gen_range(0..2)];
                    let tail = loop {
                        let e = &entities[rng.gen_range(0..entities.len())];
                        if e != head {
                            break e;
                        }
                    };
                    KnowledgeTriplet::new(head.as_str(), relations[r].as_str(), tail.as_str())
                })
                .collect::<Result<Vec<_>>>()?;
            let samples = (0..spec.samples_per_task)
                .map(|_| {
                    let gold = rng.gen_range(0..triplets.len());
                    let tpl = &spec.templates[rng.gen_range(0..spec.templates.len())];
                    TextSample {
                        history: fill(&tpl.history, &goal, &triplets[gold]),
                        response: fill(&tpl.response, &goal, &triplets[gold]),
                        gold,
                    }
                })
                .collect();
            Ok(TextTask {
                task_id,
                goal,
                triplets,
                samples,
            })
        })
        .collect()
}

pub fn synth_generate(spec: &SyntheticTaskSpec, n_tasks: usize) -> Result<Vec<TextTask>> {
    synth_generate_from(spec, 0, n_tasks)
}

/// Vocabulary over every entity, relation and template word of the spec, so
/// held-out tasks never hit UNK.
pub fn synth_vocab(spec: &SyntheticTaskSpec, max_size: usize) -> Vocab {
    let mut words: Vec<String> = (0..spec.n_entities)
        .map(|i| format!("e{i}"))
        .chain((0..spec.n_relations).map(|i| format!("r{i}")))
        .collect();
    for t in &spec.templates {
        for w in t.history.split_whitespace().chain(t.response.split_whitespace()) {
            if !(w.starts_with('{') && w.ends_with('}')) {
                words.push(w.to_string());
            }
        }
    }
    Vocab::build(words.iter().map(String::as_str), max_size)
}

/// Seeded 70/15/15 split by task.
pub fn split_pool<T: Clone>(tasks: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..tasks.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = tasks.len() * 70 / 100;
    let n_valid = tasks.len() * 15 / 100;
    let pick = |r: &[usize]| r.iter().map(|&i| tasks[i].clone()).collect::<Vec<_>>();
    (
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_valid]),
        pick(&idx[n_train + n_valid..]),
    )
}

pub fn write_tasks(tasks: &[TextTask], mut w: impl Write) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks(r: impl BufRead) -> Result<Vec<TextTask>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TextTask = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if t.triplets.is_empty() || t.samples.iter().any(|s| s.gold >= t.triplets.len()) {
            return Err(Error::Schema {
                field: "triplets".into(),
            });
        }
        if !ids.insert(t.task_id) {
            return Err(Error::Data(format!("duplicate task id {}", t.task_id)));
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::argmax;

    #[test]
    fn same_seed_same_tasks() {
        let spec = SyntheticTaskSpec::desk(7);
        assert_eq!(synth_generate(&spec, 5).unwrap(), synth_generate(&spec, 5).unwrap());
        assert_ne!(synth_generate(&spec, 5).unwrap(), synth_generate(&SyntheticTaskSpec::desk(8), 5).unwrap());
        // a task does not depend on the batch it was generated in
        assert_eq!(synth_generate(&spec, 5).unwrap()[3], synth_generate_from(&spec, 3, 1).unwrap()[0]);
    }

    #[test]
    fn responses_contain_gold_tail() {
        for t in synth_generate(&SyntheticTaskSpec::desk(1), 20).unwrap() {
            for s in &t.samples {
                let tail = &t.triplets[s.gold].tail;
                assert!(s.response.split_whitespace().any(|w| w == tail), "{s:?}");
                assert!(s.history.contains(&t.goal.topic_a));
            }
        }
    }

    #[test]
    fn graphs_are_distinct_and_well_formed() {
        let tasks = synth_generate(&SyntheticTaskSpec::desk(3), 50).unwrap();
        let sets: HashSet<_> = tasks.iter().map(TextTask::triplet_set).collect();
        assert_eq!(sets.len(), 50);
        for t in &tasks {
            let rels: HashSet<_> = t.triplets.iter().map(|k| &k.relation).collect();
            assert_eq!(rels.len(), t.triplets.len());
            assert!(t.triplets.iter().all(|k| k.head == t.goal.topic_a || k.head == t.goal.topic_b));
            assert!(t.triplets.iter().all(|k| k.head != k.tail));
        }
    }

    #[test]
    fn oracle_reader_of_gold_scores_one() {
        let spec = SyntheticTaskSpec::desk(2);
        let vocab = synth_vocab(&spec, 200);
        for t in synth_generate(&spec, 10).unwrap() {
            for s in t.samples(&vocab).unwrap() {
                let n = s.knowledge.len();
                let prior: Vec<f64> = (0..n).map(|i| if Some(i) == s.gold_triplet { 1.0 } else { 0.0 }).collect();
                assert_eq!(Some(argmax(&prior)), s.gold_triplet);
                assert!(s.response.iter().chain(&s.history).all(|&id| id != crate::vocab::UNK));
            }
        }
    }

    #[test]
    fn task_split_and_file_round_trip() {
        let spec = SyntheticTaskSpec::desk(4);
        let tasks = synth_generate(&spec, 20).unwrap();
        let (tr, va, te) = split_pool(&tasks, 0);
        assert_eq!((tr.len(), va.len(), te.len()), (14, 3, 3));
        let mut buf = Vec::new();
        write_tasks(&tasks, &mut buf).unwrap();
        assert_eq!(read_tasks(&buf[..]).unwrap(), tasks);
        let vocab = synth_vocab(&spec, 200);
        let task = tasks[0].to_task(&vocab, 8, 14, 0).unwrap();
        assert_eq!((task.support.len(), task.query.len()), (8, 14));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SyntheticTaskSpec::desk(0);
        spec.templates.clear();
        assert!(synth_generate(&spec, 1).is_err());
        let spec = SyntheticTaskSpec {
            n_triplets: 20,
            ..SyntheticTaskSpec::desk(0)
        };
        assert!(synth_generate(&spec, 1).is_err());
    }
}
