//! Knowledge graphs, dialogue goals and numericalized dialogue samples.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal first stage of every dialogue goal.
pub const START_MARKER: &str = "[start]";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl KnowledgeTriplet {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Result<Self> {
        let t = KnowledgeTriplet {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        };
        if t.head.trim().is_empty() || t.relation.trim().is_empty() || t.tail.trim().is_empty() {
            return Err(Error::contract(format!("triplet with an empty field: {t:?}")));
        }
        Ok(t)
    }

    /// "head relation tail", the sequence the knowledge encoder reads.
    pub fn linearize(&self) -> String {
        format!("{} {} {}", self.head, self.relation, self.tail)
    }
}

/// `[start] -> topic_a -> topic_b`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueGoal {
    pub topic_a: String,
    pub topic_b: String,
}

impl DialogueGoal {
    /// Parses a three-stage goal path. Both `[start]` and DuConv's `START`
    /// are accepted as the start marker.
    pub fn from_path(path: &[String]) -> Result<Self> {
        if path.len() != 3 {
            return Err(Error::Schema {
                field: "goal".into(),
            });
        }
        let marker = path[0].trim();
        if !(marker.eq_ignore_ascii_case(START_MARKER) || marker.eq_ignore_ascii_case("start")) {
            return Err(Error::Schema {
                field: "goal".into(),
            });
        }
        Ok(DialogueGoal {
            topic_a: path[1].clone(),
            topic_b: path[2].clone(),
        })
    }

    pub fn path(&self) -> [String; 3] {
        [
            START_MARKER.to_string(),
            self.topic_a.clone(),
            self.topic_b.clone(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    triplets: Vec<KnowledgeTriplet>,
    goal: DialogueGoal,
}

impl KnowledgeGraph {
    pub fn new(triplets: Vec<KnowledgeTriplet>, goal: DialogueGoal) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::contract("a knowledge graph needs at least one triplet"));
        }
        Ok(KnowledgeGraph { triplets, goal })
    }

    pub fn triplets(&self) -> &[KnowledgeTriplet] {
        &self.triplets
    }

    pub fn goal(&self) -> &DialogueGoal {
        &self.goal
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn entities(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .triplets
            .iter()
            .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn relations(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.triplets.iter().map(|t| t.relation.as_str()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Token ids of every linearized triplet in one graph.
pub type TripletTokens = Arc<Vec<Vec<usize>>>;

/// One numericalized (history, response, graph) record.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueSample {
    /// Identifier unique within a corpus or generated pool.
    pub uid: u64,
    pub history: Vec<usize>,
    pub response: Vec<usize>,
    pub knowledge: TripletTokens,
    pub gold_triplet: Option<usize>,
}

impl DialogueSample {
    pub fn new(
        uid: u64,
        history: Vec<usize>,
        response: Vec<usize>,
        knowledge: TripletTokens,
        gold_triplet: Option<usize>,
    ) -> Result<Self> {
        if history.is_empty() || response.is_empty() {
            return Err(Error::contract("history and response must be non-empty"));
        }
        if knowledge.is_empty() || knowledge.iter().any(Vec::is_empty) {
            return Err(Error::contract("knowledge needs at least one non-empty triplet"));
        }
        if let Some(g) = gold_triplet {
            if g >= knowledge.len() {
                return Err(Error::contract(format!(
                    "gold triplet {g} out of range for {} triplets",
                    knowledge.len()
                )));
            }
        }
        Ok(DialogueSample {
            uid,
            history,
            response,
            knowledge,
            gold_triplet,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn goal_requires_start_marker() {
        let g = DialogueGoal::from_path(&s(&["[start]", "Milena", "The Row"])).unwrap();
        assert_eq!(g.topic_a, "Milena");
        assert!(DialogueGoal::from_path(&s(&["START", "a", "b"])).is_ok());
        assert!(DialogueGoal::from_path(&s(&["a", "b", "c"])).is_err());
        assert!(DialogueGoal::from_path(&s(&["[start]", "b"])).is_err());
    }

    #[test]
    fn triplet_fields_non_empty() {
        assert!(KnowledgeTriplet::new("a", " ", "c").is_err());
        assert_eq!(KnowledgeTriplet::new("a", "b", "c").unwrap().linearize(), "a b c");
    }

    #[test]
    fn graph_needs_triplets() {
        let goal = DialogueGoal::from_path(&s(&["[start]", "a", "b"])).unwrap();
        assert!(KnowledgeGraph::new(vec![], goal.clone()).is_err());
        let g = KnowledgeGraph::new(
            vec![
                KnowledgeTriplet::new("a", "born", "x").unwrap(),
                KnowledgeTriplet::new("b", "born", "a").unwrap(),
            ],
            goal,
        )
        .unwrap();
        assert_eq!(g.entities(), vec!["a", "b", "x"]);
        assert_eq!(g.relations(), vec!["born"]);
    }

    #[test]
    fn sample_invariants() {
        let k: TripletTokens = Arc::new(vec![vec![4, 5, 6]]);
        assert!(DialogueSample::new(0, vec![], vec![4], k.clone(), None).is_err());
        assert!(DialogueSample::new(0, vec![4], vec![4], k.clone(), Some(1)).is_err());
        assert!(DialogueSample::new(0, vec![4], vec![4], k, Some(0)).is_ok());
    }
}
