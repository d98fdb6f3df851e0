//! Cleans a few raw notes, trains a byte-level BPE on them, and shows the
//! encode/decode round trip.

use longseq::textprep::{clean_note, RawDocument};
use longseq::tokenizer::train_bpe;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = [
        "Pt [**First Name 123**] seen @ 10AM.\n\nTemp 38°C, stable.",
        "Patient   denies chest pain. Started on heparin drip [**Hospital 4**].",
        "Renal function stable; Cr 1.2. Continue heparin, recheck in AM.",
    ];
    let docs: Vec<_> = raw
        .iter()
        .enumerate()
        .map(|(i, text)| {
            clean_note(&RawDocument {
                id: format!("note-{i}"),
                text: text.to_string(),
            })
        })
        .collect();
    for d in &docs {
        println!("{}: {}", d.id, d.text);
    }

    let tok = train_bpe(docs.iter().map(|d| d.text.as_str()), 320)?;
    println!("vocab {} ({} merges)", tok.vocab_size(), tok.num_merges());

    let text = "patient started on heparin, unseen words survive too: ß∑";
    let ids = tok.encode(text, true);
    println!("{} tokens: {:?}", ids.len(), ids);
    let back = tok.decode(&ids)?;
    println!("decoded: {back}");
    assert_eq!(back, text);
    Ok(())
}
