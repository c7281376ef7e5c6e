use featflow::corpus::{synthetic, Tokenizer};
use proptest::prelude::*;
use std::sync::OnceLock;

fn trained() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let mut docs = synthetic::documents(synthetic::Domain::English, 300, 1);
        docs.extend(synthetic::documents(synthetic::Domain::Code, 300, 2));
        Tokenizer::train(&docs, 400, 0).unwrap()
    })
}

proptest! {
    #[test]
    fn arbitrary_bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let tok = trained();
        let ids = tok.encode(&bytes);
        prop_assert_eq!(tok.decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn grammar_text_round_trips(seed in 0u64..1000) {
        let tok = trained();
        let doc = &synthetic::documents(synthetic::Domain::Code, 1, seed)[0];
        let ids = tok.encode(doc.as_bytes());
        prop_assert!(ids.len() < doc.len());
        prop_assert_eq!(tok.decode(&ids).unwrap(), doc.as_bytes());
    }
}

#[test]
fn every_id_reencodes_to_itself() {
    let tok = trained();
    for id in 0..tok.vocab_size() as u32 {
        let bytes = tok.decode(&[id]).unwrap();
        assert_eq!(tok.encode(&bytes), vec![id], "id {id}");
    }
}

#[test]
fn training_is_deterministic_and_text_format_reloads() {
    let docs = synthetic::documents(synthetic::Domain::English, 200, 3);
    let a = Tokenizer::train(&docs, 300, 0).unwrap();
    let b = Tokenizer::train(&docs, 300, 0).unwrap();
    assert_eq!(a.merges(), b.merges());
    let back = Tokenizer::from_text(&a.to_text()).unwrap();
    assert_eq!(back.merges(), a.merges());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tok.txt");
    a.save(&p).unwrap();
    assert_eq!(Tokenizer::load(&p).unwrap().encode(docs[0].as_bytes()), a.encode(docs[0].as_bytes()));
}
