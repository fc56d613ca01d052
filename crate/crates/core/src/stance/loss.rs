use serde::{Deserialize, Serialize};

use super::StanceError;

/// Weight of the classification loss in the joint objective.
pub const DEFAULT_LAMBDA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    /// Length-normalised.
    Mean,
}

/// Negative log-likelihood of a token sequence from per-token log-probabilities.
pub fn nll_from_logprobs(token_logprobs: &[f64], reduction: Reduction) -> Result<f64, StanceError> {
    if token_logprobs.is_empty() {
        return Err(StanceError::EmptySequence);
    }
    // Neumaier compensated summation.
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for (index, &value) in token_logprobs.iter().enumerate() {
        if value.is_nan() || value > 0.0 {
            return Err(StanceError::PositiveLogprob { index, value });
        }
        let t = sum + value;
        if sum.abs() >= value.abs() {
            carry += (sum - t) + value;
        } else {
            carry += (value - t) + sum;
        }
        sum = t;
    }
    let total = -(sum + carry);
    let nll = match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / token_logprobs.len() as f64,
    };
    Ok(if nll == 0.0 { 0.0 } else { nll })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_gen: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// `lambda * l_cls + (1 - lambda) * l_gen`.
pub fn combine_losses(l_cls: f64, l_gen: f64, lambda: f64) -> Result<LossBreakdown, StanceError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(StanceError::LambdaOutOfRange(lambda));
    }
    for l in [l_cls, l_gen] {
        if !l.is_finite() || l < 0.0 {
            return Err(StanceError::InvalidLoss(l));
        }
    }
    Ok(LossBreakdown {
        l_cls,
        l_gen,
        lambda,
        l_total: lambda * l_cls + (1.0 - lambda) * l_gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nll_examples() {
        assert_eq!(nll_from_logprobs(&[-0.5, -1.5], Reduction::Sum), Ok(2.0));
        assert_eq!(nll_from_logprobs(&[-0.5, -1.5], Reduction::Mean), Ok(1.0));
        let zero = nll_from_logprobs(&[0.0], Reduction::Sum).unwrap();
        assert_eq!(zero, 0.0);
        assert!(zero.is_sign_positive());
        assert_eq!(nll_from_logprobs(&[], Reduction::Sum), Err(StanceError::EmptySequence));
        assert_eq!(
            nll_from_logprobs(&[-1.0, 0.5], Reduction::Sum),
            Err(StanceError::PositiveLogprob { index: 1, value: 0.5 })
        );
        assert!(nll_from_logprobs(&[f64::NAN], Reduction::Sum).is_err());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_losses(1.0, 2.0, DEFAULT_LAMBDA).unwrap().l_total, 1.3);
        assert_eq!(combine_losses(5.0, 2.0, 1.0).unwrap().l_total, 5.0);
        assert_eq!(combine_losses(5.0, 2.0, 0.0).unwrap().l_total, 2.0);
        assert_eq!(combine_losses(1.0, 1.0, 1.5), Err(StanceError::LambdaOutOfRange(1.5)));
        assert_eq!(combine_losses(-1.0, 1.0, 0.5), Err(StanceError::InvalidLoss(-1.0)));
    }

    proptest! {
        #[test]
        fn nll_nonnegative_and_zero_iff_certain(lps in prop::collection::vec(prop_oneof![Just(0.0), -20.0f64..0.0], 1..50)) {
            let v = nll_from_logprobs(&lps, Reduction::Sum).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, lps.iter().all(|&x| x == 0.0));
        }

        #[test]
        fn combine_fixed_point(x in 0.0f64..100.0, lambda in 0.0f64..=1.0) {
            let t = combine_losses(x, x, lambda).unwrap().l_total;
            prop_assert!((t - x).abs() <= 1e-12 * x.max(1.0));
        }

        #[test]
        fn combine_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0, d in 0.0f64..5.0, lambda in 0.0f64..=1.0) {
            let base = combine_losses(a, b, lambda).unwrap().l_total;
            prop_assert!(combine_losses(a + d, b, lambda).unwrap().l_total >= base);
            prop_assert!(combine_losses(a, b + d, lambda).unwrap().l_total >= base);
        }
    }
}
