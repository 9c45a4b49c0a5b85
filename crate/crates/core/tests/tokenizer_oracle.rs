use lookask_core::vlm::testkit::{tokenizer_files, TINY_MERGES, TINY_VOCAB};
use lookask_core::vlm::BpeTokenizer;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn tiny() -> BpeTokenizer {
    BpeTokenizer::from_strs(TINY_VOCAB, TINY_MERGES).unwrap()
}

#[test]
fn ids_match_reference_encoder() {
    let fx: Fixture = serde_json::from_str(include_str!("fixtures/bpe_oracle.json")).unwrap();
    assert_eq!(fx.cases.len(), 20);
    let tok = tiny();
    for case in &fx.cases {
        assert_eq!(tok.encode(&case.text), case.ids, "{:?}", case.text);
        assert_eq!(tok.decode(&case.ids, false), case.text);
    }
}

#[test]
fn truncated_merges_still_round_trip() {
    let (v, m) = tokenizer_files(Some(10));
    let tok = BpeTokenizer::from_strs(&v, &m).unwrap();
    assert_eq!(tok.vocab_size(), 267);
    let text = "the quick brown fox, naïve café 🙂";
    assert_eq!(tok.decode(&tok.encode(text), false), text);
    assert!(tok.encode(text).len() >= tiny().encode(text).len());
}

#[test]
fn special_tokens_skipped_on_request() {
    let tok = tiny();
    let eos = tok.token_id("<|endoftext|>").unwrap();
    assert!(tok.is_special(eos));
    let mut ids = tok.encode("hello");
    ids.push(eos);
    assert_eq!(tok.decode(&ids, true), "hello");
    assert_eq!(tok.decode(&ids, false), "hello<|endoftext|>");
}

#[test]
fn malformed_files_rejected() {
    assert!(BpeTokenizer::from_strs("{", TINY_MERGES).is_err());
    assert!(BpeTokenizer::from_strs(r#"{"a":0}"#, "").is_err());
    let bad = format!("{TINY_MERGES}zz_not_in_vocab qq\n");
    assert!(BpeTokenizer::from_strs(TINY_VOCAB, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_any_utf8(s in any::<String>()) {
        let tok = tiny();
        prop_assert_eq!(tok.decode(&tok.encode(&s), false), s);
    }
}
