//! Token vocabulary.
//!
//! The standard vocabulary shared by every task:
//!
//! | ids     | tokens                                         |
//! |---------|------------------------------------------------|
//! | 0       | `[MASK]` (absorbing state, never a target)     |
//! | 1       | `[EOS]`                                        |
//! | 2       | `[PAD]` (left padding of prompts)              |
//! | 3       | `[SEP]` (end of prompt, opens the answer)      |
//! | 4       | `[EOA]` (closes the answer)                    |
//! | 5..=9   | task tags: copy, sort, modsum, countdown, sudoku |
//! | 10..=19 | digits `0`..`9`                                |
//! | 20..=23 | `+`, `-`, `*`, `=`                             |
//! | 24      | `_` (blank sudoku cell)                        |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const SEP: usize = 3;
pub const EOA: usize = 4;
pub const TAG_COPY: usize = 5;
pub const TAG_SORT: usize = 6;
pub const TAG_MODSUM: usize = 7;
pub const TAG_COUNTDOWN: usize = 8;
pub const TAG_SUDOKU: usize = 9;
pub const DIGIT0: usize = 10;
pub const PLUS: usize = 20;
pub const MINUS: usize = 21;
pub const TIMES: usize = 22;
pub const EQUALS: usize = 23;
pub const BLANK: usize = 24;
pub const STANDARD_SIZE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub size: usize,
    pub mask_id: usize,
    pub eos_id: usize,
}

impl Vocabulary {
    pub fn new(size: usize, mask_id: usize, eos_id: usize) -> Result<Self> {
        let v = Vocabulary {
            size,
            mask_id,
            eos_id,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn standard() -> Self {
        Vocabulary {
            size: STANDARD_SIZE,
            mask_id: MASK,
            eos_id: EOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.mask_id >= self.size || self.eos_id >= self.size {
            return Err(Error::Config(format!(
                "vocabulary ids out of range: size {}, mask {}, eos {}",
                self.size, self.mask_id, self.eos_id
            )));
        }
        if self.mask_id == self.eos_id {
            return Err(Error::Config("mask_id and eos_id must differ".into()));
        }
        Ok(())
    }

    /// Number of tokens a model can predict (everything except the mask).
    pub fn predictable(&self) -> usize {
        self.size - 1
    }
}

pub fn digit(d: usize) -> usize {
    debug_assert!(d < 10);
    DIGIT0 + d
}

pub fn as_digit(token: usize) -> Option<usize> {
    (DIGIT0..DIGIT0 + 10).contains(&token).then(|| token - DIGIT0)
}

/// Human-readable token name, used in logs and CLI output.
pub fn token_name(token: usize) -> String {
    match token {
        MASK => "[MASK]".into(),
        EOS => "[EOS]".into(),
        PAD => "[PAD]".into(),
        SEP => "[SEP]".into(),
        EOA => "[EOA]".into(),
        TAG_COPY => "copy:".into(),
        TAG_SORT => "sort:".into(),
        TAG_MODSUM => "modsum:".into(),
        TAG_COUNTDOWN => "countdown:".into(),
        TAG_SUDOKU => "sudoku:".into(),
        PLUS => "+".into(),
        MINUS => "-".into(),
        TIMES => "*".into(),
        EQUALS => "=".into(),
        BLANK => "_".into(),
        t => match as_digit(t) {
            Some(d) => d.to_string(),
            None => format!("<{t}>"),
        },
    }
}

pub fn render(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| token_name(t))
        .collect::<Vec<_>>()
        .join(" ")
}
