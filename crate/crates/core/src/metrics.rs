//! Evaluation metrics: BLEU-1/2, DISTINCT-1/2, character and token F1,
//! perplexity and knowledge-selection accuracy.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::DialogueSample;
use crate::model::{argmax, KnowledgeModel};
use crate::params::ParamStore;

fn ngrams<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::contract("n-gram order must be at least 1"));
    }
    Ok(())
}

/// Cumulative sentence-level BLEU of one pair, with brevity penalty and no
/// smoothing.
pub fn sentence_bleu<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> Result<f64> {
    check_order(n)?;
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for m in 1..=n {
        let h = ngrams(hyp, m);
        let r = ngrams(reference, m);
        let total: usize = h.values().sum();
        let matched: usize = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if hyp.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Mean sentence BLEU over whitespace-tokenized pairs.
pub fn bleu_n(hypotheses: &[String], references: &[String], n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        sum += sentence_bleu(&h, &r, n)?;
    }
    Ok(sum / hypotheses.len() as f64)
}

/// Unique n-grams over total n-grams across all hypotheses.
pub fn distinct_n(hypotheses: &[String], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        let toks: Vec<&str> = h.split_whitespace().collect();
        if toks.len() >= n {
            for w in toks.windows(n) {
                unique.insert(w.to_vec());
                total += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    })
}

fn multiset_f1<T: Eq + Hash>(a: Vec<T>, b: Vec<T>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (la, lb) = (a.len(), b.len());
    let mut counts: HashMap<T, usize> = HashMap::new();
    for x in a {
        *counts.entry(x).or_insert(0) += 1;
    }
    let mut common = 0;
    for y in b {
        if let Some(c) = counts.get_mut(&y) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (la + lb) as f64
}

/// F1 over the character multisets of two strings, whitespace excluded.
pub fn char_f1(hypothesis: &str, reference: &str) -> f64 {
    let chars = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<_>>();
    multiset_f1(chars(hypothesis), chars(reference))
}

/// F1 over whitespace-token multisets.
pub fn token_f1(hypothesis: &str, reference: &str) -> f64 {
    multiset_f1(
        hypothesis.split_whitespace().collect(),
        reference.split_whitespace().collect(),
    )
}

fn mean_pairwise(h: &[String], r: &[String], f: fn(&str, &str) -> f64) -> Result<f64> {
    if h.len() != r.len() {
        return Err(Error::contract(format!("{} hypotheses vs {} references", h.len(), r.len())));
    }
    if h.is_empty() {
        return Ok(0.0);
    }
    Ok(h.iter().zip(r).map(|(a, b)| f(a, b)).sum::<f64>() / h.len() as f64)
}

pub fn corpus_char_f1(hypotheses: &[String], references: &[String]) -> Result<f64> {
    mean_pairwise(hypotheses, references, char_f1)
}

pub fn corpus_token_f1(hypotheses: &[String], references: &[String]) -> Result<f64> {
    mean_pairwise(hypotheses, references, token_f1)
}

/// Anything that reports a summed teacher-forced NLL and its token count.
pub trait SequenceScorer {
    type Sample;
    fn score(&self, sample: &Self::Sample) -> Result<(f64, usize)>;
}

/// A model paired with its parameters.
pub struct Scored<'a> {
    pub model: &'a KnowledgeModel,
    pub params: &'a ParamStore,
}

impl SequenceScorer for Scored<'_> {
    type Sample = DialogueSample;
    fn score(&self, sample: &DialogueSample) -> Result<(f64, usize)> {
        self.model.prior_nll(self.params, sample)
    }
}

/// `exp(total NLL / total tokens)`.
pub fn perplexity<S: SequenceScorer>(scorer: &S, samples: &[S::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("perplexity needs samples"));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for s in samples {
        let (n, c) = scorer.score(s)?;
        if !n.is_finite() {
            return Err(Error::Numeric { op: "perplexity" });
        }
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::contract("perplexity over zero tokens"));
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric { op: "perplexity" });
    }
    Ok(ppl)
}

/// Fraction of samples whose prior argmax equals the gold index.
pub fn selection_accuracy(priors: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if priors.len() != gold.len() {
        return Err(Error::contract(format!("{} priors vs {} gold labels", priors.len(), gold.len())));
    }
    if priors.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (p, &g) in priors.iter().zip(gold) {
        if g >= p.len() {
            return Err(Error::contract(format!("gold index {g} out of range for {} triplets", p.len())));
        }
        if argmax(p) == g {
            hits += 1;
        }
    }
    Ok(hits as f64 / priors.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub sel_acc: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Generated and reference texts plus the scores of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub token_f1: f64,
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

/// Pools generations and scores across several (model, parameters) pairs,
/// e.g. one adapted copy per task, into one corpus-level report.
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    hypotheses: Vec<String>,
    references: Vec<String>,
    priors: Vec<Vec<f64>>,
    gold: Vec<usize>,
    nll: f64,
    tokens: usize,
}

impl EvalAccumulator {
    /// Greedy-decodes every sample and scores it against its response.
    pub fn add(
        &mut self,
        model: &KnowledgeModel,
        params: &ParamStore,
        samples: &[DialogueSample],
        render: impl Fn(&[usize]) -> String,
        max_len: usize,
    ) -> Result<()> {
        for s in samples {
            let g = model.generate(params, &s.history, &s.knowledge, max_len)?;
            let (nll, count) = model.prior_nll(params, s)?;
            if !nll.is_finite() {
                return Err(Error::Numeric { op: "perplexity" });
            }
            self.nll += nll;
            self.tokens += count;
            self.hypotheses.push(render(&g.tokens));
            self.references.push(render(&s.response));
            if let Some(k) = s.gold_triplet {
                self.priors.push(g.prior);
                self.gold.push(k);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Evaluation> {
        if self.tokens == 0 {
            return Err(Error::contract("evaluation needs samples"));
        }
        let (h, r) = (&self.hypotheses, &self.references);
        let report = EvalReport {
            ppl: (self.nll / self.tokens as f64).exp(),
            f1: corpus_char_f1(h, r)?,
            bleu1: bleu_n(h, r, 1)?,
            bleu2: bleu_n(h, r, 2)?,
            distinct1: distinct_n(h, 1)?,
            distinct2: distinct_n(h, 2)?,
            sel_acc: selection_accuracy(&self.priors, &self.gold)?,
            n_samples: h.len(),
        };
        if !report.ppl.is_finite() {
            return Err(Error::Numeric { op: "perplexity" });
        }
        Ok(Evaluation {
            report,
            token_f1: corpus_token_f1(h, r)?,
            hypotheses: self.hypotheses,
            references: self.references,
        })
    }
}

/// Scores one set of samples with one parameter store.
pub fn evaluate_samples(
    model: &KnowledgeModel,
    params: &ParamStore,
    samples: &[DialogueSample],
    render: impl Fn(&[usize]) -> String,
    max_len: usize,
) -> Result<Evaluation> {
    let mut acc = EvalAccumulator::default();
    acc.add(model, params, samples, render, max_len)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_hand_counts() {
        let h = s(&["a b c d"]);
        let r = s(&["a b x d"]);
        assert_abs_diff_eq!(bleu_n(&h, &r, 1).unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(bleu_n(&h, &r, 2).unwrap(), (0.75f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(bleu_n(&h, &h, 2).unwrap(), 1.0);
        assert!(bleu_n(&h, &s(&[]), 1).is_err());
    }

    #[test]
    fn bleu_brevity_and_zero_precision() {
        // two of three reference tokens, both matched: BP = exp(1 - 3/2)
        let v = bleu_n(&s(&["a b"]), &s(&["a b c"]), 1).unwrap();
        assert_abs_diff_eq!(v, (-0.5f64).exp(), epsilon = 1e-15);
        assert_eq!(bleu_n(&s(&["a b"]), &s(&["b a"]), 2).unwrap(), 0.0);
        assert_eq!(bleu_n(&s(&["a"]), &s(&["a"]), 2).unwrap(), 0.0);
    }

    #[test]
    fn distinct_examples() {
        assert_abs_diff_eq!(distinct_n(&s(&["a a a"]), 1).unwrap(), 1.0 / 3.0);
        assert_abs_diff_eq!(distinct_n(&s(&["a b", "a c"]), 1).unwrap(), 0.75);
        assert_eq!(distinct_n(&s(&["a b c", "d e"]), 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&s(&["a"]), 2).unwrap(), 0.0);
        let fwd = distinct_n(&s(&["a b a", "b a c"]), 2).unwrap();
        let rev = distinct_n(&s(&["b a c", "a b a"]), 2).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(char_f1("abc", "abc"), 1.0);
        assert_abs_diff_eq!(char_f1("abc", "abd"), 2.0 / 3.0);
        assert_eq!(char_f1("abc", "xyz"), 0.0);
        assert_eq!(char_f1("", "abc"), 0.0);
        assert_eq!(char_f1("aab", "abb"), char_f1("abb", "aab"));
        assert_abs_diff_eq!(token_f1("a b c", "a b d e"), 4.0 / 7.0);
    }

    #[test]
    fn selection_examples() {
        let p = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        assert_eq!(selection_accuracy(&p, &[0, 0]).unwrap(), 0.5);
        assert_eq!(selection_accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(selection_accuracy(&p, &[1, 0]).unwrap(), 0.0);
        assert!(selection_accuracy(&p, &[0]).is_err());
        assert!(selection_accuracy(&p, &[0, 2]).is_err());
    }

    struct Fixed(Vec<(f64, usize)>);

    impl SequenceScorer for Fixed {
        type Sample = usize;
        fn score(&self, i: &usize) -> Result<(f64, usize)> {
            Ok(self.0[*i])
        }
    }

    #[test]
    fn perplexity_pools_tokens() {
        let v = 100f64;
        let uniform = Fixed(vec![(3.0 * v.ln(), 3), (5.0 * v.ln(), 5)]);
        assert_abs_diff_eq!(perplexity(&uniform, &[0, 1]).unwrap(), 100.0, epsilon = 1e-9);
        assert_eq!(perplexity(&Fixed(vec![(0.0, 4)]), &[0]).unwrap(), 1.0);
        let mixed = Fixed(vec![(1.0, 2), (3.0, 2), (0.5, 1)]);
        let a = perplexity(&mixed, &[0, 1, 2]).unwrap();
        let b = perplexity(&mixed, &[2, 0, 1]).unwrap();
        assert_abs_diff_eq!(a, (4.5f64 / 5.0).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        assert!(perplexity(&Fixed(vec![(f64::NAN, 1)]), &[0]).is_err());
        assert!(perplexity(&mixed, &[]).is_err());
    }

    #[test]
    fn report_has_eight_keys() {
        let r = EvalReport {
            ppl: 1.0,
            f1: 0.0,
            bleu1: 0.0,
            bleu2: 0.0,
            distinct1: 0.0,
            distinct2: 0.0,
            sel_acc: 0.0,
            n_samples: 0,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["bleu1", "bleu2", "distinct1", "distinct2", "f1", "n_samples", "ppl", "sel_acc"]
        );
    }
}
