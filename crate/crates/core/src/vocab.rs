//! Fixed character-level vocabulary shared by tasks and policies.
//!
//! Token ids are stable constants: digits, arithmetic operators, separators,
//! episode delimiters, the answer-prompt marker and end-of-sequence. Episode
//! delimiters are single reserved ids so segmentation is unambiguous.

pub type Tok = u16;

pub const DIGIT_BASE: Tok = 0; // ids 0..=9 are the digits 0..=9
pub const PLUS: Tok = 10;
pub const MINUS: Tok = 11;
pub const TIMES: Tok = 12;
pub const EQUALS: Tok = 13;
pub const QUERY: Tok = 14;
pub const PAD: Tok = 15;
pub const EP_OPEN: Tok = 16;
pub const EP_CLOSE: Tok = 17;
pub const ANSWER_MARK: Tok = 18;
pub const EOS: Tok = 19;

/// Vocabulary size of the task alphabet.
pub const VOCAB_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { size: VOCAB_SIZE }
    }
}

impl Vocabulary {
    pub fn contains(&self, t: Tok) -> bool {
        (t as usize) < self.size
    }
}

pub fn digit(d: u8) -> Tok {
    debug_assert!(d <= 9);
    DIGIT_BASE + Tok::from(d)
}

pub fn is_digit(t: Tok) -> bool {
    t <= 9
}

pub fn is_delimiter(t: Tok) -> bool {
    t == EP_OPEN || t == EP_CLOSE
}

pub fn is_operator(t: Tok) -> bool {
    t == PLUS || t == MINUS || t == TIMES
}

/// Render a token sequence as a compact string (one glyph per token except
/// the delimiters). Used by the task-set line format and log output.
pub fn render(tokens: &[Tok]) -> String {
    let mut s = String::new();
    for &t in tokens {
        match t {
            0..=9 => s.push(char::from(b'0' + t as u8)),
            PLUS => s.push('+'),
            MINUS => s.push('-'),
            TIMES => s.push('*'),
            EQUALS => s.push('='),
            QUERY => s.push('?'),
            PAD => s.push('_'),
            EP_OPEN => s.push_str("<e>"),
            EP_CLOSE => s.push_str("</e>"),
            ANSWER_MARK => s.push('#'),
            EOS => s.push('$'),
            other => s.push_str(&format!("[{other}]")),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_distinct_and_in_range() {
        let all = [
            PLUS, MINUS, TIMES, EQUALS, QUERY, PAD, EP_OPEN, EP_CLOSE, ANSWER_MARK, EOS,
        ];
        for (i, a) in all.iter().enumerate() {
            assert!((*a as usize) < VOCAB_SIZE);
            assert!(!is_digit(*a));
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn render_roundtrips_readably() {
        let toks = vec![digit(3), PLUS, digit(4), EQUALS, digit(7)];
        assert_eq!(render(&toks), "3+4=7");
    }
}
