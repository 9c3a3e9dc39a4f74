//! Implicit (stochastic) dropout placements used as baselines.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Score assigned to dropped keys before the softmax.
pub const DROPKEY_SENTINEL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    #[default]
    None,
    /// Inverted dropout on each attention sublayer's input tokens.
    InputTokens,
    /// Drop post-softmax attention weights and renormalize each row.
    AttentionWeights,
    /// Drop pre-softmax scores by setting them to [`DROPKEY_SENTINEL`].
    ScoresPrekey,
    /// Inverted dropout on the feed-forward hidden activations.
    FfHidden,
}

/// A dropout mode and its rate `p` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DropoutPlacement {
    pub mode: DropoutMode,
    #[serde(default)]
    pub rate: f64,
}

impl DropoutPlacement {
    pub const NONE: DropoutPlacement = DropoutPlacement {
        mode: DropoutMode::None,
        rate: 0.0,
    };

    pub fn new(mode: DropoutMode, rate: f64) -> Result<Self> {
        let placement = DropoutPlacement { mode, rate };
        placement.validate()?;
        Ok(placement)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::contract("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Whether this placement draws masks at all.
    pub fn is_active(&self) -> bool {
        self.mode != DropoutMode::None && self.rate > 0.0
    }
}

/// Draws the keep mask for `mode` on `target`. For attention-weight dropout a
/// row whose kept mass would be zero is left unmasked, so renormalization is
/// always defined.
pub(crate) fn draw_mask(mode: DropoutMode, target: &Matrix, p: f64, rng: &mut dyn RngCore) -> Matrix {
    let mut keep = rng::keep_mask(target.rows(), target.cols(), 1.0 - p, rng);
    if mode == DropoutMode::AttentionWeights {
        for i in 0..target.rows() {
            let kept: f64 = keep.row(i).iter().zip(target.row(i)).map(|(k, a)| k * a).sum();
            if kept <= 0.0 {
                keep.row_mut(i).fill(1.0);
            }
        }
    }
    keep
}

/// Applies one implicit dropout mode to a matrix.
///
/// `target` is the mode's natural operand: tokens or hidden activations for
/// the inverted modes, attention weights for `AttentionWeights`, raw scores
/// for `ScoresPrekey`. `p == 0` and `DropoutMode::None` return the input
/// unchanged without touching `rng`.
pub fn apply_implicit_dropout(
    target: &Matrix,
    mode: DropoutMode,
    p: f64,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    DropoutPlacement { mode, rate: p }.validate()?;
    if mode == DropoutMode::None || p == 0.0 {
        return Ok(target.clone());
    }
    let keep = draw_mask(mode, target, p, rng);
    Ok(match mode {
        DropoutMode::None => unreachable!(),
        DropoutMode::InputTokens | DropoutMode::FfHidden => {
            target.hadamard(&keep)?.scale(1.0 / (1.0 - p))
        }
        DropoutMode::AttentionWeights => {
            let mut out = target.hadamard(&keep)?;
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            out
        }
        DropoutMode::ScoresPrekey => {
            let mut out = target.clone();
            for (o, k) in out.data_mut().iter_mut().zip(keep.data()) {
                if *k == 0.0 {
                    *o = DROPKEY_SENTINEL;
                }
            }
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn attention_like() -> Matrix {
        Matrix::from_rows(&[[0.2, 0.3, 0.5], [0.6, 0.1, 0.3], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]])
    }

    #[test]
    fn zero_rate_is_identity() {
        let x = attention_like();
        for mode in [
            DropoutMode::InputTokens,
            DropoutMode::AttentionWeights,
            DropoutMode::ScoresPrekey,
            DropoutMode::FfHidden,
        ] {
            assert_eq!(apply_implicit_dropout(&x, mode, 0.0, &mut stream(0, 0)).unwrap(), x);
        }
    }

    #[test]
    fn rate_must_be_below_one() {
        let x = attention_like();
        assert!(apply_implicit_dropout(&x, DropoutMode::FfHidden, 1.0, &mut stream(0, 0)).is_err());
        assert!(DropoutPlacement::new(DropoutMode::FfHidden, -0.1).is_err());
    }

    #[test]
    fn attention_weight_rows_renormalize() {
        let mut rng = stream(3, 0);
        for _ in 0..200 {
            let out =
                apply_implicit_dropout(&attention_like(), DropoutMode::AttentionWeights, 0.5, &mut rng)
                    .unwrap();
            for s in out.row_sums() {
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dropkey_then_softmax_rows_sum_to_one() {
        let scores = Matrix::from_rows(&[[0.4, -1.2, 2.0], [0.0, 0.0, 0.0]]);
        let mut rng = stream(4, 0);
        for _ in 0..200 {
            let masked = apply_implicit_dropout(&scores, DropoutMode::ScoresPrekey, 0.6, &mut rng).unwrap();
            for s in masked.row_softmax().row_sums() {
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn inverted_dropout_preserves_the_mean() {
        // Each entry of the average is a mean of n draws of x * Bernoulli(0.5) / 0.5,
        // whose standard deviation is |x|.
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let n = 100_000;
        let mut rng = stream(5, 0);
        let mut acc = Matrix::zeros(2, 2);
        for _ in 0..n {
            let d = apply_implicit_dropout(&x, DropoutMode::InputTokens, 0.5, &mut rng).unwrap();
            acc = acc.add(&d).unwrap();
        }
        let mean = acc.scale(1.0 / n as f64);
        for k in 0..4 {
            let sigma = x.data()[k].abs() / (n as f64).sqrt();
            assert!((mean.data()[k] - x.data()[k]).abs() <= 3.0 * sigma);
        }
    }
}
