//! Dense vectors and matrices, probability utilities and projection
//! operators shared by every other module. All information quantities are
//! in nats.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Lower clamp applied to probabilities before taking logarithms in
/// [`cross_entropy`] and [`kl_divergence`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Singular values at or below this fraction of the largest one count as zero
/// when building projectors.
pub const RANK_TOLERANCE: f64 = 1e-10;

const SUM_TOLERANCE: f64 = 1e-9;

/// A finite real vector.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<f64>", into = "Vec<f64>"))]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "vector",
                expected: 1,
                got: 0,
            });
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.0)
    }

    pub fn distance(&self, other: &RealVector) -> f64 {
        math::distance(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

/// Row-major finite real matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| math::dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = RealMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut out = RealMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    /// Largest absolute entry of `self − selfᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols.min(self.rows) {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Largest absolute entry of `self·self − self` (square matrices).
    pub fn idempotence_error(&self) -> f64 {
        let sq = self.matmul(self).expect("square matrix");
        sq.data
            .iter()
            .zip(&self.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &RealMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Probability distribution over an ordered finite label set, identified by
/// position.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<f64>", into = "Vec<f64>"))]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::InvalidDistribution("empty label set".into()));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "masses must be finite and nonnegative: {masses:?}"
            )));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("masses sum to {total}")));
        }
        Ok(Self(masses))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn degenerate(n: usize, label: usize) -> Self {
        let mut m = vec![0.0; n];
        m[label] = 1.0;
        Self(m)
    }

    /// Normalises nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution("weights do not normalise".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest mass, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.0.iter().enumerate() {
            if m > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_degenerate(&self) -> bool {
        self.0.iter().any(|&m| m == 1.0)
    }

    pub fn total_variation(&self, other: &ProbDist) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Pointwise mean of several distributions over the same labels.
    pub fn mean(dists: &[ProbDist]) -> Result<ProbDist> {
        let first = dists.first().ok_or(Error::EmptySplit)?;
        let mut acc = vec![0.0; first.len()];
        for d in dists {
            check_same_labels(first, d)?;
            for (a, m) in acc.iter_mut().zip(&d.0) {
                *a += m;
            }
        }
        ProbDist::from_weights(&acc)
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(p: ProbDist) -> Self {
        p.0
    }
}

fn check_same_labels(p: &ProbDist, q: &ProbDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LabelMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Max-subtracted softmax over raw slices; output sums to one.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| math::exp(z - max)).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

pub fn softmax(logits: &RealVector) -> Result<ProbDist> {
    softmax_checked(logits.as_slice())
}

pub(crate) fn softmax_checked(logits: &[f64]) -> Result<ProbDist> {
    if logits.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "softmax",
            expected: 1,
            got: 0,
        });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    Ok(ProbDist(softmax_slice(logits)))
}

pub(crate) fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * math::ln(m))
        .sum::<f64>()
}

/// Shannon entropy in nats; `0·ln 0 = 0`.
pub fn entropy(p: &ProbDist) -> f64 {
    entropy_slice(&p.0).max(0.0)
}

pub(crate) fn cross_entropy_slice(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(&pm, _)| pm > 0.0)
        .map(|(&pm, &qm)| pm * math::ln(qm.max(PROB_FLOOR)))
        .sum::<f64>()
}

/// `−Σ p ln q` with `q` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_same_labels(p, q)?;
    Ok(cross_entropy_slice(&p.0, &q.0))
}

pub(crate) fn kl_slice(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pm, _)| pm > 0.0)
        .map(|(&pm, &qm)| {
            let pc = pm.max(PROB_FLOOR);
            pm * (math::ln(pc) - math::ln(qm.max(PROB_FLOOR)))
        })
        .sum();
    kl.max(0.0)
}

/// `KL(p‖q)` in nats, both arguments clamped below at [`PROB_FLOOR`].
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_same_labels(p, q)?;
    Ok(kl_slice(&p.0, &q.0))
}

/// Orthogonal projector onto the kernel of a matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NullspaceProjector {
    pub matrix: RealMatrix,
    /// Dimension of the row space that was projected out.
    pub removed_rank: usize,
    /// Rows of the input that fell below the rank tolerance.
    pub dropped_rows: usize,
}

impl NullspaceProjector {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }
}

/// Orthonormal basis for the span of `vectors` (each of length `dim`), via
/// one-sided Jacobi rotations. Directions whose singular value is at most
/// [`RANK_TOLERANCE`] times the largest are discarded.
pub fn orthonormal_basis(vectors: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = vectors.to_vec();
    let n = cols.len();
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = math::dot(&cols[i], &cols[i]);
                let beta = math::dot(&cols[j], &cols[j]);
                let gamma = math::dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * math::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + math::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                for k in 0..dim {
                    let a = cols[i][k];
                    let b = cols[j][k];
                    cols[i][k] = c * a - s * b;
                    cols[j][k] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = cols.iter().map(|c| math::norm(c)).collect();
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (c, &s) in cols.iter().zip(&sigma) {
        if sigma_max == 0.0 || s <= RANK_TOLERANCE * sigma_max {
            continue;
        }
        // Re-orthogonalise against the accepted basis to clean up rounding.
        let mut v: Vec<f64> = c.iter().map(|x| x / s).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj = math::dot(&v, b);
                for (vk, bk) in v.iter_mut().zip(b) {
                    *vk -= proj * bk;
                }
            }
        }
        let nv = math::norm(&v);
        if nv > 0.5 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

/// `I − Σ q qᵀ` over an orthonormal basis, symmetric by construction.
pub fn complement_projector(basis: &[Vec<f64>], dim: usize) -> RealMatrix {
    let mut m = RealMatrix::identity(dim);
    for r in 0..dim {
        for c in r..dim {
            let s: f64 = basis.iter().map(|q| q[r] * q[c]).sum();
            m.data[r * dim + c] -= s;
            if c != r {
                m.data[c * dim + r] = m.data[r * dim + c];
            }
        }
    }
    m
}

/// Orthogonal projector onto `ker W`.
pub fn nullspace_projector(w: &RealMatrix) -> Result<NullspaceProjector> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::DimensionMismatch {
            context: "nullspace_projector",
            expected: 1,
            got: 0,
        });
    }
    let rows: Vec<Vec<f64>> = (0..w.rows()).map(|r| w.row(r).to_vec()).collect();
    let basis = orthonormal_basis(&rows, w.cols());
    let dropped = w.rows() - basis.len();
    if dropped > 0 {
        log::warn!(
            "nullspace_projector: {dropped} of {} rows below rank tolerance dropped",
            w.rows()
        );
    }
    Ok(NullspaceProjector {
        matrix: complement_projector(&basis, w.cols()),
        removed_rank: basis.len(),
        dropped_rows: dropped,
    })
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(f: F, x: &RealVector, step: f64) -> Result<RealVector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step {step}")));
    }
    let mut probe = x.as_slice().to_vec();
    let mut grad = Vec::with_capacity(x.dim());
    for i in 0..x.dim() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((up - down) / (2.0 * step));
    }
    RealVector::new(grad)
}

/// Largest relative deviation between two gradients, with an absolute floor
/// so that near-zero components do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = math::norm(analytic).max(math::norm(numeric)).max(1e-8);
    math::distance(analytic, numeric) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&RealVector::new(vec![0.0; 4]).unwrap()).unwrap();
        for m in p.masses() {
            approx(*m, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&RealVector::new(vec![1000.0, 0.0]).unwrap()).unwrap();
        approx(p.masses()[0], 1.0, 1e-15);
        assert!(p.masses()[1] >= 0.0 && p.masses()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // exp(1)/(e + e² + e³) etc. evaluated at f64 without max-subtraction.
        let e = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let total: f64 = e.iter().sum();
        let p = softmax(&RealVector::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for (m, ei) in p.masses().iter().zip(e) {
            approx(*m, ei / total, 1e-15);
        }
        approx(p.masses()[2], 0.665_240_955_774_821_5, 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_checked(&[0.0, f64::NAN]).is_err());
        assert!(RealVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn entropy_examples() {
        approx(entropy(&ProbDist::uniform(4)), 4f64.ln(), 1e-12);
        approx(entropy(&ProbDist::degenerate(3, 1)), 0.0, 0.0);
        let p = ProbDist::new(vec![0.5, 0.25, 0.25]).unwrap();
        approx(entropy(&p), 1.5 * 2f64.ln(), 1e-12);
        approx(entropy(&p), 1.039_720_770_839_917_9, 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let d = ProbDist::degenerate(2, 0);
        approx(cross_entropy(&d, &d).unwrap(), 0.0, 0.0);
        approx(cross_entropy(&d, &ProbDist::uniform(2)).unwrap(), 2f64.ln(), 1e-12);
        assert!(matches!(
            cross_entropy(&d, &ProbDist::uniform(3)),
            Err(Error::LabelMismatch { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let p = ProbDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        approx(kl_divergence(&p, &p).unwrap(), 0.0, 1e-15);
        approx(
            kl_divergence(&ProbDist::degenerate(2, 1), &ProbDist::uniform(2)).unwrap(),
            2f64.ln(),
            1e-12,
        );
        assert!(kl_divergence(&p, &ProbDist::uniform(2)).is_err());
    }

    fn random_dist(r: &mut rng::LabRng, n: usize) -> ProbDist {
        let w: Vec<f64> = (0..n).map(|_| rng::unit(r) + 1e-3).collect();
        ProbDist::from_weights(&w).unwrap()
    }

    #[test]
    fn ce_and_kl_match_summation_oracle() {
        let mut r = rng::seeded(11);
        for _ in 0..50 {
            let p = random_dist(&mut r, 5);
            let q = random_dist(&mut r, 5);
            let mut ce = 0.0;
            let mut kl = 0.0;
            for i in 0..5 {
                let (a, b) = (p.masses()[i], q.masses()[i]);
                ce -= a * b.ln();
                kl += a * (a / b).ln();
            }
            approx(cross_entropy(&p, &q).unwrap(), ce, 1e-9);
            approx(kl_divergence(&p, &q).unwrap(), kl, 1e-9);
            approx(
                kl_divergence(&p, &q).unwrap(),
                cross_entropy(&p, &q).unwrap() - entropy(&p),
                1e-12,
            );
        }
    }

    #[test]
    fn projector_for_single_axis_row() {
        let w = RealMatrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = nullspace_projector(&w).unwrap();
        let mut expect = RealMatrix::identity(4);
        expect.data[0] = 0.0;
        assert!(p.matrix.max_abs_diff(&expect) < 1e-15);
        assert_eq!(p.removed_rank, 1);
    }

    #[test]
    fn projector_of_invertible_matrix_is_zero() {
        let w = RealMatrix::from_rows(&[
            vec![2.0, 1.0, 0.0],
            vec![0.0, 1.0, 3.0],
            vec![1.0, 0.0, 1.0],
        ])
        .unwrap();
        let p = nullspace_projector(&w).unwrap();
        assert!(p.matrix.max_abs_diff(&RealMatrix::zeros(3, 3)) < 1e-12);
    }

    #[test]
    fn rank_deficient_rows_are_dropped() {
        let w = RealMatrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![2.0, 4.0, 0.0]]).unwrap();
        let p = nullspace_projector(&w).unwrap();
        assert_eq!(p.removed_rank, 1);
        assert_eq!(p.dropped_rows, 1);
    }

    #[test]
    fn random_projector_annihilates_and_is_idempotent() {
        let mut r = rng::seeded(5);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| rng::gaussian_vec(&mut r, 8, 1.0)).collect();
        let w = RealMatrix::from_rows(&rows).unwrap();
        let p = nullspace_projector(&w).unwrap();
        assert!(p.matrix.asymmetry() == 0.0);
        assert!(p.matrix.idempotence_error() < 1e-12);
        for _ in 0..100 {
            let x = rng::gaussian_vec(&mut r, 8, 1.0);
            let px = p.apply(&x);
            let wpx = w.mul_vec(&px);
            assert!(math::norm(&wpx) <= 1e-8 * math::norm(&x));
            let ppx = p.apply(&px);
            assert!(math::distance(&ppx, &px) <= 1e-8 * math::norm(&x));
        }
    }

    #[test]
    fn finite_differences_of_quadratic_and_constant() {
        let x = RealVector::new(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|v| v.iter().map(|a| a * a).sum(), &x, 1e-4).unwrap();
        approx(g.as_slice()[0], 2.0, 1e-6);
        approx(g.as_slice()[1], 4.0, 1e-6);
        let g = finite_diff_gradient(|_| 3.0, &x, 1e-4).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(finite_diff_gradient(|_| f64::NAN, &x, 1e-4).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        // d/dx CE(p, softmax(Wx)) = Wᵀ(softmax(Wx) − p).
        let mut r = rng::seeded(3);
        for _ in 0..100 {
            let w = RealMatrix::new(3, 4, rng::gaussian_vec(&mut r, 12, 1.0)).unwrap();
            let p = random_dist(&mut r, 3);
            let x = RealVector::new(rng::gaussian_vec(&mut r, 4, 1.0)).unwrap();
            let f = |v: &[f64]| cross_entropy_slice(p.masses(), &softmax_slice(&w.mul_vec(v)));
            let s = softmax_slice(&w.mul_vec(x.as_slice()));
            let resid: Vec<f64> = s.iter().zip(p.masses()).map(|(a, b)| a - b).collect();
            let analytic = w.transpose_mul_vec(&resid);
            let numeric = finite_diff_gradient(f, &x, 1e-5).unwrap();
            assert!(relative_error(&analytic, numeric.as_slice()) <= 1e-4);
        }
    }
}
