/// Character-level tokenizer.
///
/// Ids 0..3 are the padding, end-of-sequence and unknown markers; then come
/// newline, printable ASCII and the printable Latin-1 supplement. Every
/// uppercase letter is exactly one token, which is what the verbalizer
/// needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    chars: Vec<char>,
}

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const FIRST_CHAR: usize = 3;
/// Surface form of [`UNK`]; [`Tokenizer::sanitize`] maps unknown characters
/// to it so that decoding inverts encoding.
pub const REPLACEMENT: char = '\u{FFFD}';

impl Default for Tokenizer {
    fn default() -> Self {
        let mut chars = vec!['\n'];
        chars.extend((0x20u8..=0x7e).map(char::from));
        chars.extend((0xa0u32..=0xff).filter_map(char::from_u32));
        Tokenizer { chars }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        FIRST_CHAR + self.chars.len()
    }

    pub fn token_of(&self, c: char) -> Option<usize> {
        let code = c as u32;
        let pos = match code {
            0x0a => Some(0),
            0x20..=0x7e => Some(1 + (code - 0x20) as usize),
            0xa0..=0xff => Some(1 + 95 + (code - 0xa0) as usize),
            _ => None,
        }?;
        Some(FIRST_CHAR + pos)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.token_of(c).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Self::encode`] on sanitized text. Padding and
    /// end-of-sequence decode to nothing.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| match t {
                PAD | EOS => None,
                UNK => Some(REPLACEMENT),
                t => self.chars.get(t - FIRST_CHAR).copied().or(Some(REPLACEMENT)),
            })
            .collect()
    }

    /// Replaces characters outside the vocabulary with [`REPLACEMENT`].
    pub fn sanitize(&self, text: &str) -> String {
        text.chars()
            .map(|c| if self.token_of(c).is_some() { c } else { REPLACEMENT })
            .collect()
    }

    pub fn is_special(&self, token: usize) -> bool {
        token < FIRST_CHAR
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn letters_are_single_tokens() {
        let t = Tokenizer::default();
        let toks = t.encode("ABC");
        assert_eq!(toks.len(), 3);
        assert_eq!(t.decode(&toks), "ABC");
        for c in 'A'..='Z' {
            assert_eq!(t.encode(&c.to_string()).len(), 1);
        }
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let t = Tokenizer::default();
        assert_eq!(t.encode("日"), vec![UNK]);
        assert_eq!(t.sanitize("a日é"), "a\u{FFFD}é");
        assert_eq!(t.decode(&t.encode("a日é")), "a\u{FFFD}é");
        assert_eq!(t.decode(&[EOS, PAD]), "");
    }

    #[test]
    fn ids_are_dense() {
        let t = Tokenizer::default();
        let mut seen = vec![false; t.vocab_size()];
        for c in t.chars.iter() {
            seen[t.token_of(*c).unwrap()] = true;
        }
        assert!(seen[FIRST_CHAR..].iter().all(|&s| s));
    }

    proptest! {
        #[test]
        fn sanitized_text_roundtrips(s in "\\PC*") {
            let t = Tokenizer::default();
            let clean = t.sanitize(&s);
            prop_assert_eq!(t.decode(&t.encode(&clean)), clean);
        }
    }
}
