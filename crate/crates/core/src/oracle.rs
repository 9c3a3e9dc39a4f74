//! Monte Carlo estimates of dropout moments and regularizers.
//!
//! Masks are unscaled Bernoulli draws with keep probability `1 - p`, and the
//! deviation of an input is `X~ = (1 - M) ⊙ X`. Every estimator here draws
//! its masks in the same order from the generator it is handed, so two
//! estimators fed identically seeded generators see identical masks.

use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::reg::{check_rate, Component, MomentMatrix, Provenance};
use crate::rng::{keep_mask, stream};

/// Stream id used by [`MaskBatch::draw`].
pub const MASK_STREAM: u64 = 0x6d61_736b;

fn check_samples(n_t: usize) -> Result<()> {
    if n_t == 0 {
        Err(Error::contract("the sample count must be at least 1"))
    } else {
        Ok(())
    }
}

/// Applies a keep mask to `x`, returning the dropped part `(1 - M) ⊙ X`.
pub fn deviation_from_mask(x: &Matrix, keep: &Matrix) -> Result<Matrix> {
    if x.shape() != keep.shape() {
        return Err(Error::shape("deviation", x.shape(), keep.shape()));
    }
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        if keep.get(i, j) == 0.0 {
            x.get(i, j)
        } else {
            0.0
        }
    }))
}

/// One draw of `X~ = (1 - M) ⊙ X`.
pub fn sample_deviation(x: &Matrix, p: f64, rng: &mut dyn RngCore) -> Result<Matrix> {
    check_rate(p)?;
    let keep = keep_mask(x.rows(), x.cols(), 1.0 - p, rng);
    deviation_from_mask(x, &keep)
}

/// Running per-entry sum and sum of squares of matrix samples.
///
/// Shards built independently can be merged; merging in a fixed order keeps
/// the result reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    sum: Matrix,
    sum_sq: Matrix,
    count: usize,
}

impl Accumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        Accumulator {
            sum: Matrix::zeros(rows, cols),
            sum_sq: Matrix::zeros(rows, cols),
            count: 0,
        }
    }

    pub fn push(&mut self, sample: &Matrix) -> Result<()> {
        if sample.shape() != self.sum.shape() {
            return Err(Error::shape("accumulate", self.sum.shape(), sample.shape()));
        }
        for ((s, q), v) in self
            .sum
            .data_mut()
            .iter_mut()
            .zip(self.sum_sq.data_mut().iter_mut())
            .zip(sample.data())
        {
            *s += v;
            *q += v * v;
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Accumulator) -> Result<()> {
        if other.sum.shape() != self.sum.shape() {
            return Err(Error::shape("merge", self.sum.shape(), other.sum.shape()));
        }
        self.sum.add_assign(&other.sum);
        self.sum_sq.add_assign(&other.sum_sq);
        self.count += other.count;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Matrix {
        self.sum.scale(1.0 / self.count.max(1) as f64)
    }

    /// Unbiased per-entry sample variance (zero with fewer than two samples).
    pub fn variance(&self) -> Matrix {
        let n = self.count as f64;
        if self.count < 2 {
            return Matrix::zeros(self.sum.rows(), self.sum.cols());
        }
        Matrix::from_fn(self.sum.rows(), self.sum.cols(), |i, j| {
            let mean = self.sum.get(i, j) / n;
            ((self.sum_sq.get(i, j) - n * mean * mean) / (n - 1.0)).max(0.0)
        })
    }

    pub fn into_moment(self) -> MomentMatrix {
        MomentMatrix {
            matrix: self.mean(),
            provenance: Provenance::Empirical,
            variance: Some(self.variance()),
        }
    }

    pub fn into_estimate(self) -> Estimate {
        let n = self.count;
        Estimate {
            mean: self.mean().get(0, 0),
            stderr: math::sqrt(self.variance().get(0, 0) / n.max(1) as f64),
            n_samples: n,
        }
    }
}

/// A Monte Carlo mean of a scalar with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// A batch of stored masks, for when several estimators must see the same
/// draws without re-seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub masks: Vec<Matrix>,
    pub keep_prob: f64,
    pub seed: u64,
}

impl MaskBatch {
    /// `n_t` masks of shape `rows x cols` from stream [`MASK_STREAM`] of `seed`.
    pub fn draw(rows: usize, cols: usize, p: f64, n_t: usize, seed: u64) -> Result<Self> {
        check_rate(p)?;
        check_samples(n_t)?;
        let mut rng = stream(seed, MASK_STREAM);
        let masks = (0..n_t).map(|_| keep_mask(rows, cols, 1.0 - p, &mut rng)).collect();
        Ok(MaskBatch {
            masks,
            keep_prob: 1.0 - p,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Fraction of kept entries over the whole batch.
    pub fn keep_frequency(&self) -> f64 {
        let (kept, total) = self.masks.iter().fold((0.0, 0usize), |(k, t), m| {
            (k + m.sum(), t + m.rows() * m.cols())
        });
        kept / total as f64
    }

    pub fn moment_b(&self, x: &Matrix) -> Result<MomentMatrix> {
        let mut acc = Accumulator::new(x.cols(), x.cols());
        for m in &self.masks {
            acc.push(&b_sample(&deviation_from_mask(x, m)?)?)?;
        }
        Ok(acc.into_moment())
    }

    pub fn moment_psi(&self, x: &Matrix, a: &Matrix) -> Result<MomentMatrix> {
        let y = a.t_matmul(a)?;
        let mut acc = Accumulator::new(x.cols(), x.cols());
        for m in &self.masks {
            acc.push(&psi_sample(&deviation_from_mask(x, m)?, &y)?)?;
        }
        Ok(acc.into_moment())
    }

    pub fn regularizer(&self, kind: Component, x: &Matrix, weights: &[Matrix], a: Option<&Matrix>) -> Result<Estimate> {
        let term = JTerm::new(kind, x, weights, a)?;
        let mut acc = Accumulator::new(1, 1);
        for m in &self.masks {
            acc.push(&Matrix::scalar(term.eval(&deviation_from_mask(x, m)?)?))?;
        }
        Ok(acc.into_estimate())
    }
}

fn b_sample(dev: &Matrix) -> Result<Matrix> {
    dev.t_matmul(dev)
}

fn psi_sample(dev: &Matrix, y: &Matrix) -> Result<Matrix> {
    dev.t_matmul(&y.matmul(dev)?)
}

/// `E[X~^T X~]` averaged over `n_t` draws.
pub fn empirical_b(x: &Matrix, p: f64, n_t: usize, rng: &mut dyn RngCore) -> Result<MomentMatrix> {
    Ok(accumulate_b(x, p, n_t, rng)?.into_moment())
}

/// Shard form of [`empirical_b`], for merging partial sums.
pub fn accumulate_b(x: &Matrix, p: f64, n_t: usize, rng: &mut dyn RngCore) -> Result<Accumulator> {
    check_samples(n_t)?;
    let mut acc = Accumulator::new(x.cols(), x.cols());
    for _ in 0..n_t {
        acc.push(&b_sample(&sample_deviation(x, p, rng)?)?)?;
    }
    Ok(acc)
}

/// `E[X~^T A^T A X~]` averaged over `n_t` draws.
pub fn empirical_psi(x: &Matrix, a: &Matrix, p: f64, n_t: usize, rng: &mut dyn RngCore) -> Result<MomentMatrix> {
    Ok(accumulate_psi(x, a, p, n_t, rng)?.into_moment())
}

/// Shard form of [`empirical_psi`].
pub fn accumulate_psi(x: &Matrix, a: &Matrix, p: f64, n_t: usize, rng: &mut dyn RngCore) -> Result<Accumulator> {
    check_samples(n_t)?;
    if a.shape() != (x.rows(), x.rows()) {
        return Err(Error::shape("empirical psi", x.shape(), a.shape()));
    }
    let y = a.t_matmul(a)?;
    let mut acc = Accumulator::new(x.cols(), x.cols());
    for _ in 0..n_t {
        acc.push(&psi_sample(&sample_deviation(x, p, rng)?, &y)?)?;
    }
    Ok(acc)
}

/// The per-sample expression behind one regularizer, with its constant
/// factors precomputed.
enum JTerm {
    /// `‖X~ M‖²` with the right factor `M` fixed.
    Right(Matrix),
    /// `‖L X~ R‖²`.
    Sandwich(Matrix, Matrix),
}

impl JTerm {
    fn new(kind: Component, x: &Matrix, weights: &[Matrix], a: Option<&Matrix>) -> Result<Self> {
        let want = match kind {
            Component::Q | Component::K => 2,
            _ => 1,
        };
        if weights.len() != want {
            return Err(Error::contract(alloc::format!(
                "regularizer {} takes {want} weight matrices, got {}",
                kind.label(),
                weights.len()
            )));
        }
        let d = x.cols();
        for w in weights {
            if w.cols() != d {
                return Err(Error::shape("empirical regularizer", x.shape(), w.shape()));
            }
        }
        Ok(match kind {
            Component::Q | Component::K => {
                let (wq, wk) = (&weights[0], &weights[1]);
                if wq.rows() != wk.rows() {
                    return Err(Error::shape("empirical regularizer", wq.shape(), wk.shape()));
                }
                // X~ W_q^T W_k X^T for queries. For keys, ‖X M X~^T‖ = ‖X~ M^T X^T‖.
                let m = wq.t_matmul(wk)?;
                if kind == Component::Q {
                    JTerm::Right(m.matmul_t(x)?)
                } else {
                    JTerm::Right(m.transpose().matmul_t(x)?)
                }
            }
            Component::V | Component::Ff => JTerm::Right(weights[0].transpose()),
            Component::Av => {
                let a = a.ok_or_else(|| Error::contract("regularizer AV needs attention weights"))?;
                if a.shape() != (x.rows(), x.rows()) {
                    return Err(Error::shape("empirical regularizer", x.shape(), a.shape()));
                }
                JTerm::Sandwich(a.clone(), weights[0].transpose())
            }
        })
    }

    fn eval(&self, dev: &Matrix) -> Result<f64> {
        let v = match self {
            JTerm::Right(m) => dev.matmul(m)?.frobenius_sq(),
            JTerm::Sandwich(l, r) => l.matmul(dev)?.matmul(r)?.frobenius_sq(),
        };
        Ok(0.5 * v)
    }
}

/// Monte Carlo value of `½ E‖·‖²_F` for regularizer `kind`.
///
/// `weights` is `[W_q, W_k]` for queries and keys and `[W]` otherwise; `a` is
/// required for the attention-conditioned value term.
pub fn empirical_j(
    kind: Component,
    x: &Matrix,
    weights: &[Matrix],
    a: Option<&Matrix>,
    p: f64,
    n_t: usize,
    rng: &mut dyn RngCore,
) -> Result<Estimate> {
    check_samples(n_t)?;
    let term = JTerm::new(kind, x, weights, a)?;
    let mut acc = Accumulator::new(1, 1);
    for _ in 0..n_t {
        acc.push(&Matrix::scalar(term.eval(&sample_deviation(x, p, rng)?)?))?;
    }
    Ok(acc.into_estimate())
}

/// Per-entry comparison of a Monte Carlo moment against a closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub target: Matrix,
    pub estimate: Matrix,
    pub stderr: Matrix,
    pub max_z: f64,
    pub n_samples: usize,
}

impl ConvergenceReport {
    /// `|estimate - target| / stderr` at `(i, j)`; zero when both the gap and
    /// the error vanish, infinite when only the error does.
    pub fn z(&self, i: usize, j: usize) -> f64 {
        let gap = math::abs(self.estimate.get(i, j) - self.target.get(i, j));
        let se = self.stderr.get(i, j);
        if se > 0.0 {
            gap / se
        } else if gap == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// Largest z-score on the diagonal and off it.
    pub fn max_z_split(&self) -> (f64, f64) {
        let (mut diag, mut off) = (0.0f64, 0.0f64);
        for i in 0..self.target.rows() {
            for j in 0..self.target.cols() {
                if i == j {
                    diag = diag.max(self.z(i, j));
                } else {
                    off = off.max(self.z(i, j));
                }
            }
        }
        (diag, off)
    }
}

pub fn convergence_report(empirical: &MomentMatrix, target: &MomentMatrix, n_t: usize) -> Result<ConvergenceReport> {
    check_samples(n_t)?;
    if empirical.matrix.shape() != target.matrix.shape() {
        return Err(Error::shape("convergence report", empirical.matrix.shape(), target.matrix.shape()));
    }
    let variance = empirical
        .variance
        .as_ref()
        .ok_or_else(|| Error::contract("the empirical moment carries no variance"))?;
    let stderr = variance.map(|v| math::sqrt(v / n_t as f64));
    let mut report = ConvergenceReport {
        target: target.matrix.clone(),
        estimate: empirical.matrix.clone(),
        stderr,
        max_z: 0.0,
        n_samples: n_t,
    };
    let (diag, off) = report.max_z_split();
    report.max_z = diag.max(off);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reg::{closed_form_b, closed_form_psi, reg_query, MomentForm};
    use crate::rng::uniform;

    #[test]
    fn zero_rate_gives_zero_deviation() {
        let x = uniform(3, 4, 1.0, &mut stream(1, 0));
        let mut rng = stream(2, 0);
        for _ in 0..50 {
            assert_eq!(sample_deviation(&x, 0.0, &mut rng).unwrap(), Matrix::zeros(3, 4));
        }
        let b = empirical_b(&x, 0.0, 10, &mut rng).unwrap();
        assert_eq!(b.matrix, Matrix::zeros(4, 4));
        assert_eq!(b.provenance, Provenance::Empirical);
        let a = Matrix::identity(3);
        assert_eq!(empirical_psi(&x, &a, 0.0, 10, &mut rng).unwrap().matrix, Matrix::zeros(4, 4));
    }

    #[test]
    fn near_one_rate_drops_almost_everything() {
        let x = Matrix::filled(20, 20, 1.0);
        let dev = sample_deviation(&x, 0.99, &mut stream(3, 0)).unwrap();
        assert!(dev.sum() > 380.0);
    }

    #[test]
    fn mean_deviation_is_p_x() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let p = 0.3;
        let mut acc = Accumulator::new(2, 2);
        let mut rng = stream(4, 0);
        let n = 100_000;
        for _ in 0..n {
            acc.push(&sample_deviation(&x, p, &mut rng).unwrap()).unwrap();
        }
        let (mean, var) = (acc.mean(), acc.variance());
        for i in 0..2 {
            for j in 0..2 {
                let se = (var[(i, j)] / n as f64).sqrt();
                assert!((mean[(i, j)] - p * x[(i, j)]).abs() <= 4.0 * se);
            }
        }
    }

    #[test]
    fn scalar_case_uses_p_not_p_squared() {
        let x = Matrix::from_rows(&[[2.0]]);
        let n = 200_000;
        let b = empirical_b(&x, 0.2, n, &mut stream(5, 0)).unwrap();
        let exact = closed_form_b(&x, 0.2, MomentForm::Exact).unwrap();
        assert!((exact.matrix[(0, 0)] - 0.8).abs() < 1e-15);
        let report = convergence_report(&b, &exact, n).unwrap();
        assert!(report.max_z < 4.0, "{}", report.max_z);
        let approx = closed_form_b(&x, 0.2, MomentForm::Approx).unwrap();
        assert!(convergence_report(&b, &approx, n).unwrap().max_z > 50.0);
    }

    #[test]
    fn psi_with_identity_matches_b_on_same_masks() {
        let x = uniform(3, 2, 1.0, &mut stream(6, 0));
        let b = empirical_b(&x, 0.4, 500, &mut stream(7, 0)).unwrap();
        let psi = empirical_psi(&x, &Matrix::identity(3), 0.4, 500, &mut stream(7, 0)).unwrap();
        assert!(b.matrix.max_abs_diff(&psi.matrix).unwrap() <= 1e-14);
    }

    #[test]
    fn psi_converges_to_exact() {
        let mut rng = stream(8, 0);
        let x = uniform(3, 2, 1.0, &mut rng);
        let a = uniform(3, 3, 2.0, &mut rng).row_softmax();
        let n = 100_000;
        let psi = empirical_psi(&x, &a, 0.2, n, &mut rng).unwrap();
        let exact = closed_form_psi(&x, &a, 0.2, MomentForm::Exact).unwrap();
        assert!(convergence_report(&psi, &exact, n).unwrap().max_z < 4.0);
    }

    #[test]
    fn sample_moments_are_symmetric_psd() {
        let x = uniform(4, 3, 1.0, &mut stream(9, 0));
        let mut rng = stream(10, 0);
        for _ in 0..50 {
            let b = empirical_b(&x, 0.5, 1, &mut rng).unwrap();
            assert!(b.is_symmetric(1e-14));
            let probe = uniform(1, 3, 1.0, &mut rng);
            assert!(b.rayleigh_quotient(probe.data()) >= -1e-14);
        }
    }

    #[test]
    fn query_estimate_converges_to_exact_form() {
        let mut rng = stream(11, 0);
        let x = uniform(3, 2, 1.0, &mut rng);
        let wq = uniform(2, 2, 1.0, &mut rng);
        let wk = uniform(2, 2, 1.0, &mut rng);
        let est = empirical_j(Component::Q, &x, &[wq.clone(), wk.clone()], None, 0.3, 100_000, &mut rng).unwrap();
        let exact = reg_query(&x, &wq, &wk, 0.3, MomentForm::Exact).unwrap();
        assert!((est.mean - exact).abs() <= 4.0 * est.stderr);
    }

    #[test]
    fn trivial_regularizer_estimates() {
        let x = uniform(3, 2, 1.0, &mut stream(12, 0));
        let w = uniform(2, 2, 1.0, &mut stream(13, 0));
        let e = empirical_j(Component::V, &x, &[w.clone()], None, 0.0, 20, &mut stream(14, 0)).unwrap();
        assert_eq!(e.mean, 0.0);
        let e = empirical_j(Component::V, &x, &[Matrix::zeros(2, 2)], None, 0.4, 20, &mut stream(14, 0)).unwrap();
        assert_eq!(e.mean, 0.0);
        assert!(empirical_j(Component::Q, &x, &[w.clone()], None, 0.4, 20, &mut stream(14, 0)).is_err());
        assert!(empirical_j(Component::Av, &x, &[w], None, 0.4, 20, &mut stream(14, 0)).is_err());
    }

    #[test]
    fn identical_moments_have_zero_z() {
        let x = uniform(3, 2, 1.0, &mut stream(15, 0));
        let b = empirical_b(&x, 0.2, 100, &mut stream(16, 0)).unwrap();
        let target = MomentMatrix {
            variance: None,
            ..b.clone()
        };
        assert_eq!(convergence_report(&b, &target, 100).unwrap().max_z, 0.0);
        assert!(convergence_report(&b, &b, 0).is_err());
        let wrong = closed_form_b(&Matrix::identity(3), 0.2, MomentForm::Exact).unwrap();
        assert!(convergence_report(&b, &wrong, 100).is_err());
        assert!(convergence_report(&wrong, &b, 100).is_err());
    }

    #[test]
    fn shards_merge_to_sequential_totals() {
        let x = uniform(3, 2, 1.0, &mut stream(17, 0));
        let mut whole = accumulate_b(&x, 0.2, 40, &mut stream(18, 0)).unwrap();
        let mut rng = stream(18, 0);
        let mut merged = accumulate_b(&x, 0.2, 25, &mut rng).unwrap();
        merged.merge(&accumulate_b(&x, 0.2, 15, &mut rng).unwrap()).unwrap();
        assert_eq!(merged.count(), 40);
        assert!(merged.mean().max_abs_diff(&whole.mean()).unwrap() <= 1e-14);
        whole.merge(&Accumulator::new(2, 2)).unwrap();
        assert_eq!(whole.count(), 40);
    }

    #[test]
    fn mask_batch_keep_frequency() {
        let p = 0.2;
        let batch = MaskBatch::draw(4, 3, p, 10_000, 19).unwrap();
        assert_eq!(batch.len(), 10_000);
        assert!(batch.masks.iter().all(|m| m.data().iter().all(|v| *v == 0.0 || *v == 1.0)));
        let n = 120_000.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((batch.keep_frequency() - 0.8).abs() <= 5.0 * sigma);
        assert_eq!(batch, MaskBatch::draw(4, 3, p, 10_000, 19).unwrap());
    }
}
