//! Amino-acid sequence validation and fixed-length context shaping.

use std::fmt;

use thiserror::Error;

/// The 20 standard one-letter residue codes, in canonical order.
pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Context length used throughout the model.
pub const DEFAULT_CONTEXT: usize = 22;

/// Number of token symbols: 20 residues plus padding.
pub const VOCAB_SIZE: usize = 21;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SequenceError {
    #[error("empty sequence")]
    EmptySequence,
    /// Position is 0-based.
    #[error("invalid residue {1:?} at position {0}")]
    InvalidResidue(usize, char),
}

/// Position of `code` in [`ALPHABET`].
pub fn residue_index(code: u8) -> Option<usize> {
    ALPHABET.iter().position(|&c| c == code)
}

/// A validated, uppercase amino-acid string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AaSequence {
    residues: Vec<u8>,
}

impl AaSequence {
    pub fn parse(text: &str) -> Result<Self, SequenceError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(SequenceError::EmptySequence);
        }
        let mut residues = Vec::with_capacity(trimmed.len());
        for (pos, ch) in trimmed.chars().enumerate() {
            let up = ch.to_ascii_uppercase();
            if !up.is_ascii() || residue_index(up as u8).is_none() {
                return Err(SequenceError::InvalidResidue(pos, ch));
            }
            residues.push(up as u8);
        }
        Ok(Self { residues })
    }

    pub fn residues(&self) -> &[u8] {
        &self.residues
    }

    pub fn raw_length(&self) -> usize {
        self.residues.len()
    }

    pub fn as_str(&self) -> &str {
        // only ASCII letters are ever stored
        std::str::from_utf8(&self.residues).expect("ascii residues")
    }

    /// Fits the sequence to `context` tokens: the N-terminal prefix is kept
    /// and the remainder is padded on the right.
    pub fn shape(&self, context: usize) -> ShapedSequence {
        assert!(context >= 1, "context length must be positive");
        let kept = self.residues.len().min(context);
        let mut tokens: Vec<Token> = self.residues[..kept]
            .iter()
            .map(|&c| Token::Residue(c))
            .collect();
        tokens.resize(context, Token::Pad);
        let mut mask = vec![true; kept];
        mask.resize(context, false);
        ShapedSequence { tokens, mask }
    }
}

impl fmt::Display for AaSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AaSequence {
    type Err = SequenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

pub fn parse_sequence(text: &str) -> Result<AaSequence, SequenceError> {
    AaSequence::parse(text)
}

pub fn shape_sequence(seq: &AaSequence, context: usize) -> ShapedSequence {
    seq.shape(context)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Residue(u8),
    Pad,
}

impl Token {
    /// Vocabulary index: residues follow [`ALPHABET`], padding is 20.
    pub fn index(self) -> usize {
        match self {
            Token::Residue(c) => residue_index(c).expect("validated residue"),
            Token::Pad => ALPHABET.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapedSequence {
    pub tokens: Vec<Token>,
    /// True at real-residue positions.
    pub mask: Vec<bool>,
}

impl ShapedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Residues kept after shaping, as a sequence.
    pub fn kept(&self) -> AaSequence {
        let residues = self
            .tokens
            .iter()
            .filter_map(|t| match t {
                Token::Residue(c) => Some(*c),
                Token::Pad => None,
            })
            .collect();
        AaSequence { residues }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_uppercases() {
        let s = parse_sequence("CASSLAPGATNEKLFF").unwrap();
        assert_eq!(s.raw_length(), 16);
        let s = parse_sequence("casslap").unwrap();
        assert_eq!(s.as_str(), "CASSLAP");
        assert_eq!(s.raw_length(), 7);
    }

    #[test]
    fn rejects_forbidden_symbols() {
        assert_eq!(
            parse_sequence("CASSXLF"),
            Err(SequenceError::InvalidResidue(4, 'X'))
        );
        for bad in ['B', 'J', 'O', 'U', 'X', 'Z', '*', 'é'] {
            let text = format!("AC{bad}");
            assert_eq!(
                parse_sequence(&text),
                Err(SequenceError::InvalidResidue(2, bad))
            );
        }
        assert_eq!(parse_sequence("   "), Err(SequenceError::EmptySequence));
    }

    #[test]
    fn shaping_pads_and_truncates() {
        let s = parse_sequence("GILGFVFTL").unwrap().shape(22);
        assert_eq!(s.len(), 22);
        assert_eq!(s.real_len(), 9);
        assert!(s.tokens[9..].iter().all(|t| *t == Token::Pad));

        let exact = parse_sequence(&"A".repeat(22)).unwrap().shape(22);
        assert!(exact.mask.iter().all(|&m| m));

        let long: String = ALPHABET
            .iter()
            .chain(ALPHABET.iter())
            .map(|&c| c as char)
            .take(30)
            .collect();
        let s = parse_sequence(&long).unwrap().shape(22);
        assert_eq!(s.kept().as_str(), &long[..22]);
        assert!(s.mask.iter().all(|&m| m));
    }

    #[test]
    fn token_indices() {
        assert_eq!(Token::Residue(b'A').index(), 0);
        assert_eq!(Token::Residue(b'Y').index(), 19);
        assert_eq!(Token::Pad.index(), 20);
    }
}
