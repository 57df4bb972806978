use rand::Rng;

const ONSETS: [&str; 12] = ["b", "d", "f", "k", "l", "m", "n", "p", "r", "s", "t", "v"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Seeded word sampler. Every word is a single alphanumeric run, so text of
/// `n` space-separated words tokenizes to exactly `n` tokens.
pub struct Corpus {
    words: Vec<String>,
}

impl Corpus {
    pub fn new() -> Self {
        let mut words = Vec::new();
        for a in ONSETS {
            for b in NUCLEI {
                for c in ONSETS {
                    for d in NUCLEI {
                        words.push(format!("{a}{b}{c}{d}"));
                    }
                }
            }
        }
        Corpus { words }
    }

    pub fn words(&self, rng: &mut impl Rng, n: usize) -> String {
        let mut out = String::with_capacity(n * 5);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&self.words[rng.random_range(0..self.words.len())]);
        }
        out
    }
}

impl Default for Corpus {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use semvar_core::prompt::Tokenizer;

    #[test]
    fn exact_token_counts() {
        let c = Corpus::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tok = Tokenizer::new();
        for n in [0, 1, 2, 50, 2000] {
            let text = c.words(&mut rng, n);
            assert_eq!(tok.tokenize(&text).len(), n);
        }
    }

    #[test]
    fn seeded() {
        let c = Corpus::new();
        let a = c.words(&mut ChaCha8Rng::seed_from_u64(1), 20);
        let b = c.words(&mut ChaCha8Rng::seed_from_u64(1), 20);
        assert_eq!(a, b);
    }
}
