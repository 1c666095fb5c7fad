//! Parses DuConv-style JSON lines into numericalized dialogue samples.

use std::io::Cursor;

use mkgd::duconv::{build_vocab, parse_duconv, to_samples};

const CORPUS: &str = r#"{"goal": [["START", "Alice", "Bob"]], "knowledge": [["Alice", "born in", "Paris"], ["Bob", "likes", "jazz"]], "conversation": ["do you know Alice", "Alice was born in Paris", "and Bob", "Bob likes jazz"]}

{"goal": [["START", "Carol", "Dave"]], "knowledge": [["Carol", "plays", "chess"]], "history": ["who is Carol"], "response": "Carol plays chess"}
"#;

fn main() -> mkgd::Result<()> {
    let records = parse_duconv(Cursor::new(CORPUS))?;
    let vocab = build_vocab(&records, 100);
    let samples = to_samples(&records, &vocab, 0)?;
    println!("{} records, {} samples, vocabulary {}", records.len(), samples.len(), vocab.len());
    for (r, pair) in records.iter().flat_map(|r| r.dialogue_pairs().into_iter().map(move |p| (r, p))) {
        println!("goal {:?}: {:?} -> {:?}", r.goal().path(), pair.0, pair.1);
    }
    for s in &samples {
        println!("uid {} history {:?} response {:?} gold {:?}", s.uid, s.history, s.response, s.gold_triplet);
    }
    println!("{}", records[1].to_json());
    Ok(())
}
