//! Distances between feature sets: Fréchet distance and k-NN precision/recall.

use crate::{Error, Result};

/// Diagonal shrinkage added to both covariances before the square root.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;
pub const DEFAULT_NEIGHBORS: usize = 3;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    fn identity(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        (0..n).for_each(|i| a[i * n + i] = 1.0);
        Self { n, a }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    fn mul(&self, o: &Self) -> Self {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let v = self.at(i, k);
                for j in 0..n {
                    a[i * n + j] += v * o.at(k, j);
                }
            }
        }
        Self { n, a }
    }

    fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.at(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn frobenius_dist(&self, o: &Self) -> f64 {
        self.a.iter().zip(&o.a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn frobenius(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Gauss–Jordan with partial pivoting; `None` when numerically singular.
    fn inverse(&self) -> Option<Self> {
        let n = self.n;
        let mut m = self.a.clone();
        let mut inv = Self::identity(n).a;
        let scale = self.a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
            if m[pivot * n + col].abs() <= 1e-300 * scale {
                return None;
            }
            if pivot != col {
                for j in 0..n {
                    m.swap(pivot * n + j, col * n + j);
                    inv.swap(pivot * n + j, col * n + j);
                }
            }
            let p = m[col * n + col];
            for j in 0..n {
                m[col * n + j] /= p;
                inv[col * n + j] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = m[i * n + col];
                    if f != 0.0 {
                        for j in 0..n {
                            m[i * n + j] -= f * m[col * n + j];
                            inv[i * n + j] -= f * inv[col * n + j];
                        }
                    }
                }
            }
        }
        Some(Self { n, a: inv })
    }

    fn condition_number(&self) -> f64 {
        self.inverse().map_or(f64::INFINITY, |inv| self.norm1() * inv.norm1())
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n,
            a: self.a.iter().map(|v| v * s).collect(),
        }
    }

    fn average(&self, o: &Self) -> Self {
        Self {
            n: self.n,
            a: self.a.iter().zip(&o.a).map(|(x, y)| 0.5 * (x + y)).collect(),
        }
    }
}

/// Principal square root by the Denman–Beavers iteration.
///
/// Valid for matrices whose eigenvalues are real and positive, which holds for
/// a product of two symmetric positive definite matrices.
pub(crate) fn sqrtm(m: &Mat) -> Result<Mat> {
    let fail = || Error::SqrtNotConverged {
        condition_number: m.condition_number(),
    };
    let n = m.n;
    let t = m.trace();
    if !(t > 0.0 && t.is_finite()) {
        return Err(fail());
    }
    // iterate on a unit-trace copy for conditioning, rescale at the end
    let s = n as f64 / t;
    let mut y = m.scaled(s);
    let mut z = Mat::identity(n);
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let yi = y.inverse().ok_or_else(fail)?;
        let zi = z.inverse().ok_or_else(fail)?;
        let y_next = y.average(&zi);
        let z_next = z.average(&yi);
        let change = y_next.frobenius_dist(&y);
        y = y_next;
        z = z_next;
        let norm = y.frobenius();
        // near-singular inputs stall at rounding level instead of reaching the tight bound
        if change <= 1e-13 * norm || (change >= prev && change <= 1e-6 * norm) {
            return Ok(y.scaled(1.0 / s.sqrt()));
        }
        prev = change;
    }
    Err(fail())
}

fn check_features(set: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = set.first().map(Vec::len).ok_or_else(|| Error::invalid(format!("{what} is empty")))?;
    if d == 0 || set.iter().any(|f| f.len() != d) {
        return Err(Error::invalid(format!("{what} has ragged or empty feature vectors")));
    }
    Ok(d)
}

fn mean_and_covariance(set: &[Vec<f64>], d: usize) -> (Vec<f64>, Mat) {
    let n = set.len() as f64;
    let mut mu = vec![0.0; d];
    for f in set {
        mu.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = Mat { n: d, a: vec![0.0; d * d] };
    let denom = (set.len().max(2) - 1) as f64;
    for f in set {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in 0..d {
                cov.a[i * d + j] += di * (f[j] - mu[j]) / denom;
            }
        }
    }
    for i in 0..d {
        cov.a[i * d + i] += COVARIANCE_SHRINKAGE;
    }
    (mu, cov)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa·Σb)^{1/2})` on feature vectors.
///
/// Covariances use the unbiased estimator plus [`COVARIANCE_SHRINKAGE`]·I.
/// Tiny negative values from rounding are clamped to zero.
pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let d = check_features(set_a, "first feature set")?;
    if check_features(set_b, "second feature set")? != d {
        return Err(Error::invalid("feature sets differ in dimension"));
    }
    let (ma, ca) = mean_and_covariance(set_a, d);
    let (mb, cb) = mean_and_covariance(set_b, d);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let root = sqrtm(&ca.mul(&cb))?;
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * root.trace()).max(0.0))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii2(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    set.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = set
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| dist2(p, q))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(points: &[Vec<f64>], manifold: &[Vec<f64>], radii2: &[f64]) -> f64 {
    let inside = points
        .iter()
        .filter(|p| manifold.iter().zip(radii2).any(|(c, &r)| dist2(p, c) <= r))
        .count();
    inside as f64 / points.len() as f64
}

/// k-NN manifold precision and recall of `set_a` against reference `set_b`.
///
/// Precision is the fraction of `set_a` inside the union of `set_b`'s k-NN
/// balls; recall swaps the roles.
pub fn precision_recall(set_a: &[Vec<f64>], set_b: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    let d = check_features(set_a, "first feature set")?;
    if check_features(set_b, "second feature set")? != d {
        return Err(Error::invalid("feature sets differ in dimension"));
    }
    if k == 0 || k >= set_a.len() || k >= set_b.len() {
        return Err(Error::invalid(format!(
            "k = {k} needs both sets larger than k (sizes {} and {})",
            set_a.len(),
            set_b.len()
        )));
    }
    let ra = knn_radii2(set_a, k);
    let rb = knn_radii2(set_b, k);
    Ok((coverage(set_a, set_b, &rb), coverage(set_b, set_a, &ra)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn gaussian(n: usize, d: usize, mean: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| mean + rng.normal() as f64).collect()).collect()
    }

    #[test]
    fn identical_sets_are_at_zero() {
        let mut rng = Rng::new(1);
        let a = gaussian(50, 4, 0.0, &mut rng);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-4);
        assert_eq!(precision_recall(&a, &a, 3).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn one_dimensional_unit_shift() {
        let mut rng = Rng::new(2);
        let a = gaussian(10_000, 1, 0.0, &mut rng);
        let b = gaussian(10_000, 1, 1.0, &mut rng);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
    }

    fn oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        // Tr((Σa Σb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}) via symmetric eigendecompositions
        let d = a[0].len();
        let stats = |s: &[Vec<f64>]| {
            let n = s.len() as f64;
            let m = DMatrix::from_fn(s.len(), d, |i, j| s[i][j]);
            let mu = m.row_mean();
            let c = DMatrix::from_fn(s.len(), d, |i, j| s[i][j] - mu[j]);
            let cov = c.transpose() * c / (n - 1.0) + DMatrix::identity(d, d) * COVARIANCE_SHRINKAGE;
            (mu, cov)
        };
        let (ma, ca) = stats(a);
        let (mb, cb) = stats(b);
        let sqrt_sym = |m: DMatrix<f64>| {
            let e = SymmetricEigen::new(m);
            let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
            &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
        };
        let ra = sqrt_sym(ca.clone());
        let inner = sqrt_sym(&ra * &cb * &ra);
        (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * inner.trace()
    }

    #[test]
    fn matches_eigendecomposition_oracle() {
        let mut rng = Rng::new(3);
        for trial in 0..5 {
            let mut a = gaussian(40, 4, 0.0, &mut rng);
            let b = gaussian(60, 4, 0.3 * trial as f64, &mut rng);
            // correlate the first set's coordinates
            for f in &mut a {
                f[1] += 0.8 * f[0];
                f[3] *= 2.5;
            }
            let ours = frechet_distance(&a, &b).unwrap();
            let want = oracle(&a, &b);
            assert!((ours - want).abs() < 1e-4, "trial {trial}: {ours} vs {want}");
        }
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let mut rng = Rng::new(4);
        let a = gaussian(30, 3, 0.0, &mut rng);
        let b = gaussian(25, 3, 0.5, &mut rng);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn singular_product_reports_condition_number() {
        let m = Mat { n: 2, a: vec![1.0, 0.0, 0.0, 0.0] };
        match sqrtm(&m) {
            Err(Error::SqrtNotConverged { condition_number }) => assert!(condition_number.is_infinite()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = Mat { n: 2, a: vec![4.0, 1.0, 1.0, 3.0] };
        let r = sqrtm(&m).unwrap();
        assert!(r.mul(&r).frobenius_dist(&m) < 1e-10);
    }

    #[test]
    fn far_clusters_have_no_overlap() {
        let mut rng = Rng::new(5);
        let a = gaussian(20, 2, 0.0, &mut rng);
        let b = gaussian(20, 2, 100.0, &mut rng);
        assert_eq!(precision_recall(&a, &b, 3).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&a, &b, 20).is_err());
    }

    #[test]
    fn precision_matches_brute_force_membership() {
        let mut rng = Rng::new(6);
        let a = gaussian(30, 2, 0.0, &mut rng);
        let b = gaussian(30, 2, 1.5, &mut rng);
        let k = 3;
        // brute force: sort every b point's distances to the other b points
        let inside = a
            .iter()
            .filter(|p| {
                b.iter().enumerate().any(|(i, c)| {
                    let mut ds: Vec<f64> = b
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, q)| (q[0] - c[0]).hypot(q[1] - c[1]))
                        .collect();
                    ds.sort_by(f64::total_cmp);
                    (p[0] - c[0]).hypot(p[1] - c[1]) <= ds[k - 1]
                })
            })
            .count();
        let (precision, _) = precision_recall(&a, &b, k).unwrap();
        assert_eq!(precision, inside as f64 / 30.0);
        assert!(precision > 0.0 && precision < 1.0);
    }
}
