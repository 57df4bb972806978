use std::collections::BTreeMap;

use proptest::prelude::*;
use semvar_core::dag::render_prompt;
use semvar_core::prompt::{parse_prompt_template, Tokenizer};

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop_oneof![Just("a"), Just("b"), Just(" "), Just(","), Just("cc")], 0..6)
        .prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    /// Equal hashes at a boundary mean equal token prefixes, and the
    /// converse holds for every pair of rendered prompts.
    #[test]
    fn boundary_hash_identifies_prefix(
        parts in proptest::collection::vec((text(), text(), text()), 2..5)
    ) {
        let mut tok = Tokenizer::new();
        let mut rendered = Vec::new();
        for (head, value, tail) in &parts {
            let t = parse_prompt_template(&format!("{head}{{{{input:x}}}}{tail}{{{{output:y}}}}")).unwrap();
            let vals: BTreeMap<String, String> = [("x".to_string(), value.clone())].into_iter().collect();
            rendered.push(render_prompt(&t, &mut tok, &vals));
        }
        for a in &rendered {
            prop_assert_eq!(a.pieces.len(), a.chain.len() + 1);
            let toks = a.tokens();
            prop_assert_eq!(toks.len(), a.token_len());
            for b in &rendered {
                let tb = b.tokens();
                for (ea, eb) in a.chain.positions.iter().zip(&b.chain.positions) {
                    let same = toks[..ea.token_offset] == tb[..eb.token_offset];
                    prop_assert_eq!(ea.hash == eb.hash, same);
                }
            }
        }
    }

    #[test]
    fn tokenizer_round_trip(s in "[a-z ,.\\n]{0,40}") {
        let mut tok = Tokenizer::new();
        let ids = tok.tokenize(&s);
        prop_assert_eq!(tok.detokenize(&ids).unwrap(), s.clone());
        prop_assert_eq!(tok.count(&s), ids.len());
    }
}
