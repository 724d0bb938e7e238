//! Character vocabulary and the two toy tasks.
//!
//! Sequences are framed by `;`, which doubles as start and end marker. A copy
//! example looks like `;4071|4071;` and an addition example like `;27+41=068;`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const CHARS: &str = "0123456789+=|;";
pub const VOCAB_SIZE: usize = 14;
pub const EOS: u32 = 13;
pub const PLUS: u32 = 10;
pub const EQUALS: u32 = 11;
pub const BAR: u32 = 12;

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| {
            CHARS
                .chars()
                .position(|x| x == c)
                .map(|i| i as u32)
                .ok_or(Error::UnknownSymbol(c))
        })
        .collect()
}

pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| CHARS.chars().nth(t as usize).unwrap_or('?'))
        .collect()
}

/// Position of the first `=` or `|`; training loss starts after it.
pub fn delimiter_pos(tokens: &[u32]) -> Option<usize> {
    tokens.iter().position(|&t| t == EQUALS || t == BAR)
}

/// A task prompt with its acceptable answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub references: Vec<String>,
}

fn digits(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

/// `;a+b=` with zero-padded two-digit operands and a three-digit answer.
pub fn addition_example(a: u32, b: u32) -> (String, String) {
    (format!(";{a:02}+{b:02}="), format!("{:03}", a + b))
}

/// Every addition problem, one line each (`;ab+cd=xyz;`).
pub fn addition_corpus() -> Vec<String> {
    let mut out = Vec::with_capacity(10_000);
    for a in 0..100 {
        for b in 0..100 {
            let (p, ans) = addition_example(a, b);
            out.push(format!("{p}{ans};"));
        }
    }
    out
}

/// Seeded addition prompts drawn uniformly (with replacement) from all pairs.
pub fn addition_prompts(n: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = rng_for(seed, "addition_prompts", 0);
    (0..n)
        .map(|i| {
            let (a, b) = (rng.random_range(0..100), rng.random_range(0..100));
            let (text, ans) = addition_example(a, b);
            Prompt {
                id: format!("add-{i:04}"),
                tokens: encode(&text).expect("digits only"),
                text,
                references: vec![ans],
            }
        })
        .collect()
}

/// Copy lines `;s|s;` with `s` of 1 to `max_len` digits.
pub fn copy_corpus(n: usize, max_len: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_for(seed, "copy_corpus", 0);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let s = digits(&mut rng, len);
            format!(";{s}|{s};")
        })
        .collect()
}

pub fn encode_corpus(lines: &[String]) -> Result<Vec<Vec<u32>>> {
    lines.iter().map(|l| encode(l.trim())).collect()
}
