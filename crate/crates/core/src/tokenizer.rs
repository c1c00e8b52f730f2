//! Visual tokenizer head: a bias-free projection followed by a row softmax,
//! turning each continuous patch representation into a distribution over the
//! visual vocabulary.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TokenizerHead {
    /// `K × d` projection, one prototype row per visual word.
    pub weight: ParamId,
    pub vocab: usize,
    pub width: usize,
}

impl TokenizerHead {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab: usize,
        width: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::invalid(format!("visual vocabulary must have at least 2 words, got {vocab}")));
        }
        let weight = store.add("vt.head", &[vocab, width], Init::Normal(std), seed)?;
        Ok(Self { weight, vocab, width })
    }

    /// `softmax(reps · Wᵀ)` row-wise: `n × d → n × K`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, reps: Var) -> Result<Var> {
        let (n, d) = tape.value(reps).require_matrix("tokenize")?;
        if d != self.width {
            return Err(Error::shape("tokenize", &[n, d], &[self.vocab, self.width]));
        }
        let logits = tape.matmul_bt(reps, bind[self.weight])?;
        tape.softmax_rows(logits)
    }
}

/// A point on the probability simplex over the visual vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticToken<T> {
    pub probs: Vec<T>,
}

impl<T: Scalar> ProbabilisticToken<T> {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    pub fn one_hot(k: usize, j: usize) -> Self {
        let mut probs = vec![T::zero(); k];
        probs[j] = T::one();
        Self { probs }
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![T::one() / T::of(k as f64); k],
        }
    }
}

/// Splits an `n × K` probability matrix into tokens.
pub fn tokens_from_tensor<T: Scalar>(probs: &Tensor<T>) -> Vec<ProbabilisticToken<T>> {
    probs
        .data()
        .chunks(probs.cols())
        .map(|r| ProbabilisticToken { probs: r.to_vec() })
        .collect()
}

/// Stacks tokens into an `n × K` matrix.
pub fn tokens_to_tensor<T: Scalar>(tokens: &[ProbabilisticToken<T>]) -> Result<Tensor<T>> {
    let k = tokens.first().map_or(0, |t| t.probs.len());
    if tokens.iter().any(|t| t.probs.len() != k) {
        return Err(Error::invalid("tokens have differing vocabulary sizes"));
    }
    Tensor::matrix(tokens.len(), k, tokens.iter().flat_map(|t| t.probs.iter().copied()).collect())
}

/// Tokenizes representations outside of any training graph.
pub fn tokenize<T: Scalar>(
    store: &ParamStore<T>,
    head: &TokenizerHead,
    reps: &Tensor<T>,
) -> Result<Vec<ProbabilisticToken<T>>> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, |_| false);
    let r = tape.constant(reps.clone());
    let v = head.forward(&mut tape, &bind, r)?;
    Ok(tokens_from_tensor(tape.value(v)))
}

/// Fractions of probability values in threshold-delimited intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    /// Strictly decreasing.
    pub thresholds: Vec<f64>,
    /// `thresholds.len() + 1` buckets: `[t₁,1]`, `[t₂,t₁)`, …, `[0,t_last)`.
    pub bucket_counts: Vec<u64>,
    pub bucket_ratios: Vec<f64>,
    pub token_count: usize,
    pub vocab_size: usize,
}

impl SparsityReport {
    pub fn interval_labels(&self) -> Vec<String> {
        let t = &self.thresholds;
        let mut labels = vec![format!(">={:e}", t[0])];
        for w in t.windows(2) {
            labels.push(format!("[{:e},{:e})", w[1], w[0]));
        }
        labels.push(format!("<{:e}", t[t.len() - 1]));
        labels
    }
}

impl fmt::Display for SparsityReport {
    /// One line per interval: `interval<TAB>count<TAB>ratio`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for ((label, count), ratio) in self
            .interval_labels()
            .iter()
            .zip(&self.bucket_counts)
            .zip(&self.bucket_ratios)
        {
            writeln!(f, "{label}\t{count}\t{ratio:.6}")?;
        }
        Ok(())
    }
}

/// Buckets every probability value (evaluated in `f64`) by the thresholds.
pub fn sparsity_stats<T: Scalar>(tokens: &[ProbabilisticToken<T>], thresholds: &[f64]) -> Result<SparsityReport> {
    if tokens.is_empty() {
        return Err(Error::invalid("sparsity_stats needs at least one token"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::invalid(format!("thresholds must lie in (0, 1), got {thresholds:?}")));
    }
    if thresholds.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(format!("thresholds must be strictly decreasing, got {thresholds:?}")));
    }
    let vocab_size = tokens[0].probs.len();
    let mut counts = vec![0u64; thresholds.len() + 1];
    for token in tokens {
        if token.probs.len() != vocab_size {
            return Err(Error::invalid("tokens have differing vocabulary sizes"));
        }
        for &p in &token.probs {
            let p = p.f64();
            let bucket = thresholds.iter().position(|&t| p >= t).unwrap_or(thresholds.len());
            counts[bucket] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let bucket_ratios = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(SparsityReport {
        thresholds: thresholds.to_vec(),
        bucket_counts: counts,
        bucket_ratios,
        token_count: tokens.len(),
        vocab_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn head_with(weight: Tensor<f64>) -> (ParamStore<f64>, TokenizerHead) {
        let mut store = ParamStore::new();
        let (k, d) = (weight.shape()[0], weight.shape()[1]);
        let head = TokenizerHead::register(&mut store, k, d, 0.02, 0).unwrap();
        store.set_value("vt.head", weight).unwrap();
        (store, head)
    }

    #[test]
    fn zero_weight_gives_uniform_tokens() {
        let (store, head) = head_with(Tensor::zeros(&[5, 3]));
        let reps = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.0, 9.0, 1.0]]).unwrap();
        for t in tokenize(&store, &head, &reps).unwrap() {
            assert!(t.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn reference_token() {
        let w = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let (store, head) = head_with(w);
        let reps = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let t = &tokenize(&store, &head, &reps).unwrap()[0];
        for (a, b) in t.probs.iter().zip([0.24472847, 0.66524096, 0.09003057]) {
            assert!((a - b).abs() < 1e-8);
        }
        let big = Tensor::from_rows(&[&[100.0, 200.0]]).unwrap();
        let t = &tokenize(&store, &head, &big).unwrap()[0];
        assert!(t.probs[1] > 1.0 - 1e-12 && t.argmax() == 1);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (store, head) = head_with(Tensor::zeros(&[3, 2]));
        assert!(tokenize(&store, &head, &Tensor::zeros(&[1, 3])).is_err());
        assert!(TokenizerHead::register(&mut ParamStore::<f64>::new(), 1, 2, 0.02, 0).is_err());
    }

    #[test]
    fn sparsity_reference_buckets() {
        let uniform = [ProbabilisticToken::<f64>::uniform(4)];
        let r = sparsity_stats(&uniform, &[1e-4]).unwrap();
        assert_eq!(r.bucket_counts, vec![4, 0]);
        assert_eq!(r.bucket_ratios, vec![1.0, 0.0]);

        let peaked = [ProbabilisticToken {
            probs: vec![1.0 - 3e-7, 1e-7, 1e-7, 1e-7],
        }];
        let r = sparsity_stats(&peaked, &[1e-4, 1e-5, 1e-6]).unwrap();
        assert_eq!(r.bucket_ratios, vec![0.25, 0.0, 0.0, 0.75]);
        let text = r.to_string();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().starts_with(">=1e-4\t1\t"));
    }

    #[test]
    fn sparsity_rejects_bad_input() {
        let t = [ProbabilisticToken::<f64>::uniform(4)];
        assert!(sparsity_stats::<f64>(&[], &[1e-4]).is_err());
        assert!(sparsity_stats(&t, &[1e-5, 1e-4]).is_err());
        assert!(sparsity_stats(&t, &[1e-4, 1e-4]).is_err());
        assert!(sparsity_stats(&t, &[1.5]).is_err());
    }

    proptest! {
        #[test]
        fn tokens_lie_on_simplex_and_argmax_is_scale_invariant(
            w in prop::collection::vec(-3.0f64..3.0, 12),
            r in prop::collection::vec(-3.0f64..3.0, 3),
            alpha in 0.01f64..50.0,
        ) {
            let (store, head) = head_with(Tensor::matrix(4, 3, w).unwrap());
            let reps = Tensor::matrix(1, 3, r.clone()).unwrap();
            let t = &tokenize(&store, &head, &reps).unwrap()[0];
            prop_assert!(t.probs.iter().all(|&p| p >= 0.0));
            prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let scaled = Tensor::matrix(1, 3, r.iter().map(|x| x * alpha).collect()).unwrap();
            let ts = &tokenize(&store, &head, &scaled).unwrap()[0];
            prop_assert_eq!(t.argmax(), ts.argmax());
        }
    }
}
