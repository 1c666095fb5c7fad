//! DuConv-format JSON-lines ingestion.
//!
//! One record per line with fields `goal`, `knowledge` and either
//! `conversation` (train/valid) or `history` + `response` (test). A
//! conversation of `2n` utterances yields `n` samples whose responses are
//! the utterances at odd positions.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::knowledge::{DialogueGoal, DialogueSample, KnowledgeGraph, KnowledgeTriplet};
use crate::vocab::{tokenize, Vocab};

/// A validated DuConv record. Field order is alphabetical so the serialized
/// form matches a sorted-key JSON rendering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuConvRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversation: Option<Vec<String>>,
    pub goal: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<String>>,
    pub knowledge: Vec<[String; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

fn schema(field: &str) -> Error {
    Error::Schema {
        field: field.to_string(),
    }
}

fn strings(v: &Value, field: &str) -> Result<Vec<String>> {
    v.as_array()
        .ok_or_else(|| schema(field))?
        .iter()
        .map(|s| s.as_str().map(str::to_string).ok_or_else(|| schema(field)))
        .collect()
}

impl DuConvRecord {
    /// Validates a decoded JSON object. A nested goal (list of paths, as in
    /// the released corpus) is reduced to its first path.
    pub fn from_value(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| schema("record"))?;
        let goal_v = obj.get("goal").ok_or_else(|| schema("goal"))?;
        let goal = match goal_v.as_array().and_then(|a| a.first()) {
            Some(Value::Array(_)) => strings(&goal_v[0], "goal")?,
            _ => strings(goal_v, "goal")?,
        };
        DialogueGoal::from_path(&goal)?;

        let know_v = obj.get("knowledge").ok_or_else(|| schema("knowledge"))?;
        let mut knowledge = Vec::new();
        for t in know_v.as_array().ok_or_else(|| schema("knowledge"))? {
            let parts = strings(t, "knowledge")?;
            let [h, r, tl]: [String; 3] = parts.try_into().map_err(|_| schema("knowledge"))?;
            KnowledgeTriplet::new(h.as_str(), r.as_str(), tl.as_str()).map_err(|_| schema("knowledge"))?;
            knowledge.push([h, r, tl]);
        }
        if knowledge.is_empty() {
            return Err(schema("knowledge"));
        }

        let conversation = obj.get("conversation").map(|c| strings(c, "conversation")).transpose()?;
        let history = obj.get("history").map(|c| strings(c, "history")).transpose()?;
        let response = obj
            .get("response")
            .map(|r| r.as_str().map(str::to_string).ok_or_else(|| schema("response")))
            .transpose()?;
        match (&conversation, &history, &response) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            (None, Some(_), None) => return Err(schema("response")),
            (None, None, Some(_)) => return Err(schema("history")),
            (None, None, None) => return Err(schema("conversation")),
            (Some(_), _, _) => return Err(schema("conversation")),
        }
        Ok(DuConvRecord {
            conversation,
            goal,
            history,
            knowledge,
            response,
        })
    }

    pub fn goal(&self) -> DialogueGoal {
        DialogueGoal::from_path(&self.goal).expect("validated on parse")
    }

    pub fn graph(&self) -> KnowledgeGraph {
        let triplets = self
            .knowledge
            .iter()
            .map(|[h, r, t]| KnowledgeTriplet::new(h.as_str(), r.as_str(), t.as_str()).expect("validated on parse"))
            .collect();
        KnowledgeGraph::new(triplets, self.goal()).expect("validated on parse")
    }

    /// (history, response) text pairs. Utterances are joined with single
    /// spaces; an empty test history falls back to the two goal topics.
    pub fn dialogue_pairs(&self) -> Vec<(String, String)> {
        let join = |u: &[String]| u.iter().map(|s| s.trim()).collect::<Vec<_>>().join(" ");
        match (&self.conversation, &self.history, &self.response) {
            (Some(conv), _, _) => (1..conv.len())
                .step_by(2)
                .map(|i| (join(&conv[..i]), conv[i].trim().to_string()))
                .collect(),
            (None, Some(h), Some(r)) => {
                let mut history = join(h);
                if tokenize(&history).is_empty() {
                    let g = self.goal();
                    history = format!("{} {}", g.topic_a, g.topic_b);
                }
                vec![(history, r.trim().to_string())]
            }
            _ => Vec::new(),
        }
    }

    /// Single-line JSON with sorted keys.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        self.goal.iter().skip(1).map(String::as_str)
            .chain(self.knowledge.iter().flat_map(|t| t.iter().map(String::as_str)))
            .chain(self.conversation.iter().flatten().map(String::as_str))
            .chain(self.history.iter().flatten().map(String::as_str))
            .chain(self.response.iter().map(String::as_str))
    }
}

/// Parses JSON lines; blank lines are skipped, line numbers start at 1.
pub fn parse_duconv(reader: impl BufRead) -> Result<Vec<DuConvRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(DuConvRecord::from_value(&v)?);
    }
    Ok(out)
}

/// Vocabulary over goal topics, triplets and utterances of `records`.
pub fn build_vocab(records: &[DuConvRecord], max_size: usize) -> Vocab {
    let texts: Vec<String> = records.iter().flat_map(|r| r.texts().map(str::to_string)).collect();
    Vocab::build(texts.iter().flat_map(|t| t.split_whitespace()), max_size)
}

fn char_counts(s: &str) -> HashMap<char, usize> {
    let mut m = HashMap::new();
    for c in s.chars().filter(|c| !c.is_whitespace()) {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// Size of the character-multiset intersection, whitespace ignored.
pub fn char_overlap(a: &str, b: &str) -> usize {
    let ca = char_counts(a);
    char_counts(b)
        .iter()
        .map(|(c, n)| (*n).min(ca.get(c).copied().unwrap_or(0)))
        .sum()
}

/// Triplet whose tail shares the most characters with `response`; the first
/// wins ties and zero overlap gives no label.
pub fn gold_by_overlap(response: &str, triplets: &[[String; 3]]) -> Option<usize> {
    let mut best = None;
    let mut best_n = 0;
    for (i, t) in triplets.iter().enumerate() {
        let n = char_overlap(response, &t[2]);
        if n > best_n {
            best_n = n;
            best = Some(i);
        }
    }
    best
}

/// Numericalizes every (history, response) pair. Sample uids count up from
/// `first_uid` in record order; pairs with an empty side are skipped.
pub fn to_samples(records: &[DuConvRecord], vocab: &Vocab, first_uid: u64) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    let mut uid = first_uid;
    for r in records {
        let knowledge = Arc::new(
            r.knowledge
                .iter()
                .map(|t| vocab.numericalize(&t.join(" ")))
                .collect::<Vec<_>>(),
        );
        for (h, y) in r.dialogue_pairs() {
            let (hx, yx) = (vocab.numericalize(&h), vocab.numericalize(&y));
            if hx.is_empty() || yx.is_empty() {
                continue;
            }
            let gold = gold_by_overlap(&y, &r.knowledge);
            out.push(DialogueSample::new(uid, hx, yx, knowledge.clone(), gold)?);
            uid += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"goal": ["[start]", "Milena", "The Row"], "knowledge": [["Milena", "stars", "Ann"], ["The Row", "genre", "drama"]], "conversation": ["hi", "do you know Milena ?", "no", "Milena stars Ann"]}
{ "knowledge":[["a","r","bb"]],"goal":[["START","a","b"],["a","r","bb"]],"history":[],"response":"it is bb" }

{"goal":["[start]","x","y"],"knowledge":[["x","likes","y"]],"history":["hello there"],"response":"x likes y"}
"#;

    #[test]
    fn parses_goal_and_expands_conversation() {
        let recs = parse_duconv(FIXTURE.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].goal().topic_a, "Milena");
        assert_eq!(recs[0].goal().topic_b, "The Row");
        let pairs = recs[0].dialogue_pairs();
        assert_eq!(
            pairs,
            vec![
                ("hi".to_string(), "do you know Milena ?".to_string()),
                ("hi do you know Milena ? no".to_string(), "Milena stars Ann".to_string()),
            ]
        );
        assert_eq!(recs[1].dialogue_pairs(), vec![("a b".to_string(), "it is bb".to_string())]);
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(parse_duconv("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn canonical_round_trip() {
        let recs = parse_duconv(FIXTURE.as_bytes()).unwrap();
        let lines: Vec<&str> = FIXTURE.lines().filter(|l| !l.trim().is_empty()).collect();
        for (r, line) in recs.iter().zip(lines) {
            // oracle: sorted-key rendering of the source with a flat goal
            let mut v: Value = serde_json::from_str(line).unwrap();
            if v["goal"][0].is_array() {
                v["goal"] = v["goal"][0].clone();
            }
            assert_eq!(r.to_json(), v.to_string());
            let again = parse_duconv(r.to_json().as_bytes()).unwrap();
            assert_eq!(&again[0], r);
        }
    }

    #[test]
    fn errors_carry_line_and_field() {
        let bad = "{\"goal\":[\"[start]\",\"a\",\"b\"],\"knowledge\":[[\"a\",\"r\",\"t\"]],\"conversation\":[]}\n{oops";
        match parse_duconv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let missing = r#"{"goal":["[start]","a","b"],"conversation":["x","y"]}"#;
        match parse_duconv(missing.as_bytes()) {
            Err(Error::Schema { field }) => assert_eq!(field, "knowledge"),
            other => panic!("{other:?}"),
        }
        let both = r#"{"goal":["[start]","a","b"],"knowledge":[["a","r","t"]],"conversation":["x"],"history":[],"response":"y"}"#;
        assert!(matches!(parse_duconv(both.as_bytes()), Err(Error::Schema { .. })));
        let no_resp = r#"{"goal":["[start]","a","b"],"knowledge":[["a","r","t"]],"history":["x"]}"#;
        match parse_duconv(no_resp.as_bytes()) {
            Err(Error::Schema { field }) => assert_eq!(field, "response"),
            other => panic!("{other:?}"),
        }
        let bad_goal = r#"{"goal":["a","b","c"],"knowledge":[["a","r","t"]],"conversation":["x","y"]}"#;
        assert!(matches!(parse_duconv(bad_goal.as_bytes()), Err(Error::Schema { .. })));
    }

    #[test]
    fn gold_label_by_character_overlap() {
        let k = vec![
            ["a".to_string(), "r".to_string(), "xyz".to_string()],
            ["a".to_string(), "r".to_string(), "abc".to_string()],
        ];
        assert_eq!(gold_by_overlap("the abc one", &k), Some(1));
        assert_eq!(gold_by_overlap("qqq", &k), None);
        assert_eq!(char_overlap("aab", "ab a"), 3);
    }

    #[test]
    fn samples_are_valid_and_numericalized() {
        let recs = parse_duconv(FIXTURE.as_bytes()).unwrap();
        let vocab = build_vocab(&recs, 200);
        let samples = to_samples(&recs, &vocab, 10).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples.iter().map(|s| s.uid).collect::<Vec<_>>(), vec![10, 11, 12, 13]);
        assert!(samples.iter().all(|s| !s.history.is_empty() && !s.response.is_empty()));
        assert_eq!(vocab.render(&samples[1].response), "Milena stars Ann");
        assert_eq!(samples[1].gold_triplet, Some(0));
        assert_eq!(samples[3].gold_triplet, Some(0));
    }
}
