//! Prefix hashes at placeholder boundaries.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::prompt::{Direction, PromptTemplate, Segment, TokenSeq, Tokenizer};

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Continues a 64-bit FNV-1a hash over token ids in little-endian byte order.
pub fn fnv1a_extend(mut hash: u64, tokens: &[u32]) -> u64 {
    for t in tokens {
        for b in t.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixEntry {
    /// Offset of the boundary in the rendered prompt text.
    pub byte_offset: usize,
    /// Number of prompt tokens before the boundary.
    pub token_offset: usize,
    pub hash: u64,
}

/// One entry per placeholder boundary; entry k hashes every token before
/// boundary k.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixHashChain {
    pub positions: Vec<PrefixEntry>,
}

impl PrefixHashChain {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn hashes(&self) -> Vec<u64> {
        self.positions.iter().map(|e| e.hash).collect()
    }

    /// Hashes of boundaries with a non-empty prefix; empty prefixes are not
    /// sharing opportunities.
    pub fn shareable_hashes(&self) -> Vec<u64> {
        self.positions
            .iter()
            .filter(|e| e.token_offset > 0)
            .map(|e| e.hash)
            .collect()
    }
}

/// A template tokenized against resolved input values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// `pieces[k]` holds the tokens between boundary k-1 and boundary k;
    /// the final piece holds tokens after the last boundary.
    pub pieces: Vec<TokenSeq>,
    pub chain: PrefixHashChain,
    /// False when rendering stopped at an unresolved input.
    pub complete: bool,
}

impl RenderedPrompt {
    pub fn token_len(&self) -> usize {
        self.pieces.iter().map(|p| p.len()).sum()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.pieces.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Renders the prompt part of `template` (everything before the output
/// placeholder). Constant text and each input value are tokenized as separate
/// pieces, so boundaries always fall between tokens.
pub fn render_prompt(
    template: &PromptTemplate,
    tokenizer: &mut Tokenizer,
    values: &BTreeMap<String, String>,
) -> RenderedPrompt {
    let mut out = RenderedPrompt {
        complete: true,
        ..Default::default()
    };
    let mut piece: Vec<u32> = Vec::new();
    let mut hash = FNV_OFFSET;
    let mut token_offset = 0;
    for seg in template.segments() {
        match seg {
            Segment::Text(t) => {
                let toks = tokenizer.tokenize(t);
                hash = fnv1a_extend(hash, &toks);
                token_offset += toks.len();
                piece.extend_from_slice(&toks);
                out.text.push_str(t);
            }
            Segment::Placeholder(p) => {
                out.chain.positions.push(PrefixEntry {
                    byte_offset: out.text.len(),
                    token_offset,
                    hash,
                });
                out.pieces.push(TokenSeq(core::mem::take(&mut piece)));
                if p.direction == Direction::Output {
                    out.pieces.push(TokenSeq::new());
                    return out;
                }
                let Some(value) = values.get(&p.name) else {
                    out.complete = false;
                    out.pieces.push(TokenSeq::new());
                    return out;
                };
                let toks = tokenizer.tokenize(value);
                hash = fnv1a_extend(hash, &toks);
                token_offset += toks.len();
                piece.extend_from_slice(&toks);
                out.text.push_str(value);
            }
        }
    }
    out.pieces.push(TokenSeq(piece));
    out
}

/// The chain of prefix hashes for `template` given currently resolved inputs.
pub fn prefix_hashes(
    template: &PromptTemplate,
    tokenizer: &mut Tokenizer,
    values: &BTreeMap<String, String>,
) -> PrefixHashChain {
    render_prompt(template, tokenizer, values).chain
}
