//! Scores a handful of responses with BLEU, char F1 and distinct-n.

use mkgd::metrics::{bleu_n, char_f1, corpus_char_f1, distinct_n, sentence_bleu};

fn main() -> mkgd::Result<()> {
    let hyps: Vec<String> = ["the cat sat on the mat", "a dog ran", "the cat sat"].map(String::from).to_vec();
    let refs: Vec<String> = ["the cat sat on the mat", "the dog ran home", "a cat sat down"].map(String::from).to_vec();
    for (h, r) in hyps.iter().zip(&refs) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        println!(
            "{h:<24} | {r:<24} bleu1 {:.3} bleu2 {:.3} f1 {:.3}",
            sentence_bleu(&ht, &rt, 1)?,
            sentence_bleu(&ht, &rt, 2)?,
            char_f1(h, r)
        );
    }
    println!(
        "corpus: bleu1 {:.3} bleu2 {:.3} f1 {:.3} distinct1 {:.3} distinct2 {:.3}",
        bleu_n(&hyps, &refs, 1)?,
        bleu_n(&hyps, &refs, 2)?,
        corpus_char_f1(&hyps, &refs)?,
        distinct_n(&hyps, 1)?,
        distinct_n(&hyps, 2)?
    );
    Ok(())
}
