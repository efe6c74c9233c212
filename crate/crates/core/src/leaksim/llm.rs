//! Token-by-token generation as a sequence of fixed-size emission segments.

use rand::Rng as _;

use super::{emit_into, LeakageModel, SimError};
use crate::rng;
use crate::trace::Trace;

/// A language model reduced to what its emissions depend on: each token
/// id owns a fixed operand vector of `ops_per_token` nonzero bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmSpec {
    pub vocab_size: usize,
    pub ops_per_token: usize,
    pub leakage: LeakageModel,
    operands: Vec<Vec<u8>>,
}

impl LlmSpec {
    pub fn new(
        vocab_size: usize,
        ops_per_token: usize,
        operand_seed: u64,
        leakage: LeakageModel,
    ) -> Result<Self, SimError> {
        if vocab_size < 2 {
            return Err(SimError::InvalidParameter(format!("vocab_size = {vocab_size} < 2")));
        }
        if ops_per_token == 0 {
            return Err(SimError::InvalidParameter("ops_per_token = 0".into()));
        }
        leakage.check()?;
        let mut rng = rng::stream(operand_seed, 0x11a);
        // Nonzero operands keep every token segment the same length, even
        // under time-mode zero skipping.
        let operands = (0..vocab_size)
            .map(|_| (0..ops_per_token).map(|_| rng.random_range(1..=255u8)).collect())
            .collect();
        Ok(Self {
            vocab_size,
            ops_per_token,
            leakage,
            operands,
        })
    }

    pub fn operands(&self, token: u32) -> Option<&[u8]> {
        self.operands.get(token as usize).map(Vec::as_slice)
    }

    /// Samples per generated token.
    pub fn segment_len(&self) -> usize {
        self.ops_per_token * self.leakage.samples_per_op
    }
}

/// Emission of generating `tokens`, one segment per token. The trace is
/// labelled 0 and carries its token count under `n_tokens`.
pub fn simulate_llm(tokens: &[u32], spec: &LlmSpec, seed: u64) -> Result<Trace, SimError> {
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(SimError::UnknownToken {
            token,
            vocab: spec.vocab_size,
        });
    }
    let mut rng = rng::stream(seed, 0);
    let mut samples = Vec::with_capacity(tokens.len() * spec.segment_len());
    for &t in tokens {
        for &op in &spec.operands[t as usize] {
            emit_into(op, spec.leakage.a, &spec.leakage, &mut rng, &mut samples);
        }
    }
    Ok(Trace::new(samples, 0).with_meta("n_tokens", tokens.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaksim::ZeroSkip;

    fn spec() -> LlmSpec {
        LlmSpec::new(16, 32, 0, LeakageModel::default()).unwrap()
    }

    #[test]
    fn more_tokens_longer_trace() {
        let one = simulate_llm(&[3], &spec(), 0).unwrap();
        let two = simulate_llm(&[3, 5], &spec(), 0).unwrap();
        assert!(two.len() > one.len());
        assert_eq!(one.len(), 128);
        assert_eq!(two.meta["n_tokens"], "2");
    }

    #[test]
    fn length_is_strictly_increasing_in_time_mode_too() {
        let m = LeakageModel {
            zero_skip: ZeroSkip::Time,
            ..Default::default()
        };
        let spec = LlmSpec::new(4, 8, 1, m).unwrap();
        let mut last = 0;
        for n in 1..6 {
            let toks: Vec<u32> = (0..n).map(|i| i % 4).collect();
            let len = simulate_llm(&toks, &spec, 2).unwrap().len();
            assert!(len > last);
            last = len;
        }
    }

    #[test]
    fn empty_generation_is_empty_trace() {
        assert!(simulate_llm(&[], &spec(), 0).unwrap().is_empty());
    }

    #[test]
    fn unknown_token() {
        assert_eq!(
            simulate_llm(&[1, 16], &spec(), 0).unwrap_err(),
            SimError::UnknownToken { token: 16, vocab: 16 }
        );
    }

    #[test]
    fn vocabulary_needs_two_tokens() {
        assert!(LlmSpec::new(1, 4, 0, LeakageModel::default()).is_err());
    }
}
