//! Closed-vocabulary tokenization and the order-aware bag-of-tokens layer
//! shared by the reward text encoder and the generator's condition embedding.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::nn::{sinusoidal, ParamId, ParamSet};
use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("out-of-vocabulary token `{0}`")]
    OutOfVocabulary(String),
    #[error("empty prompt")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>, TokenError> {
        let ids: Vec<u32> = prompt
            .split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| TokenError::OutOfVocabulary(w.to_string()))
            })
            .collect::<Result<_, _>>()?;
        if ids.is_empty() {
            return Err(TokenError::Empty);
        }
        Ok(ids)
    }
}

/// Mean over tokens of `E[tok] + B[tok] ⊙ P[pos]`, with `P` fixed sinusoidal
/// position features. The `B ⊙ P` term makes the bag sensitive to word order.
#[derive(Clone, Copy, Debug)]
pub struct TokenBag {
    pub embed: ParamId,
    pub order: ParamId,
    pub dim: usize,
}

impl TokenBag {
    pub fn new(params: &mut ParamSet, name: &str, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let embed = params.add_normal(&format!("{name}.embed"), vocab_size, dim, 1.0, rng);
        let order = params.add_normal(&format!("{name}.order"), vocab_size, dim, 0.5, rng);
        Self { embed, order, dim }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, batch: &[Vec<u32>]) -> Var {
        let d = self.dim;
        let n_tok: usize = batch.iter().map(Vec::len).sum();
        let mut idx = Vec::with_capacity(n_tok * d);
        let mut pos = Matrix::zeros(n_tok, d);
        let mut pool = Matrix::zeros(batch.len(), n_tok);
        let mut row = 0;
        for (b, toks) in batch.iter().enumerate() {
            for (i, &t) in toks.iter().enumerate() {
                idx.extend((0..d).map(|j| t * d as u32 + j as u32));
                pos.row_mut(row).copy_from_slice(&sinusoidal(0.15 * (i as f64 + 1.0), d));
                *pool.at_mut(b, row) = 1.0 / toks.len() as f64;
                row += 1;
            }
        }
        let idx = Arc::new(idx);
        let e = tape.param(params, self.embed);
        let o = tape.param(params, self.order);
        let e_rows = tape.gather(e, idx.clone(), n_tok, d);
        let o_rows = tape.gather(o, idx, n_tok, d);
        let pos = tape.constant(pos);
        let o_rows = tape.mul(o_rows, pos);
        let tok = tape.add(e_rows, o_rows);
        let pool = tape.constant(pool);
        tape.matmul(pool, tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unknown_token_is_named() {
        let v = Vocabulary::from(vec!["a".to_string(), "red".to_string()]);
        assert_eq!(v.tokenize("a red"), Ok(vec![0, 1]));
        assert_eq!(v.tokenize("a blue"), Err(TokenError::OutOfVocabulary("blue".into())));
        assert_eq!(v.tokenize("  "), Err(TokenError::Empty));
    }

    #[test]
    fn bag_depends_on_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let bag = TokenBag::new(&mut params, "bag", 3, 8, &mut rng);
        let mut tape = Tape::new();
        let out = bag.forward(&mut tape, &params, &[vec![0, 1, 2], vec![2, 1, 0]]);
        let m = tape.value(out);
        let diff: f64 = m.row(0).iter().zip(m.row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3);
    }
}
