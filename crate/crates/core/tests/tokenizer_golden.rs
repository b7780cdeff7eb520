mod common;

use serde::Deserialize;
use vvclip::tokenizer::TokenizerSpec;

#[derive(Deserialize)]
struct Golden {
    sot: u32,
    eot: u32,
    cases: Vec<Case>,
}

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn golden() -> Golden {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tokenizer_golden.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toy(context: usize) -> TokenizerSpec {
    let a = common::assets();
    TokenizerSpec::from_files(&a.join("toy_vocab.txt"), &a.join("toy_merges.txt"), context).unwrap()
}

#[test]
fn encode_matches_reference_ids() {
    let g = golden();
    let tok = toy(77);
    assert_eq!((tok.start_id, tok.end_id), (g.sot, g.eot));
    for case in &g.cases {
        assert_eq!(tok.encode(&case.text), case.ids, "{:?}", case.text);
    }
}

#[test]
fn tokenize_wraps_and_pads() {
    let g = golden();
    let tok = toy(16);
    for case in &g.cases {
        let p = tok.tokenize(&case.text);
        assert_eq!(p.ids.len(), 16);
        assert_eq!(p.ids[0], g.sot);
        assert_eq!(p.ids[p.eot_index], g.eot);
        let body = &p.ids[1..p.eot_index];
        let keep = case.ids.len().min(14);
        assert_eq!(body, &case.ids[..keep], "{:?}", case.text);
        assert!(p.ids[p.eot_index + 1..].iter().all(|&id| id == tok.pad_id));
    }
}
