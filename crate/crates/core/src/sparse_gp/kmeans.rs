use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const MAX_ITERS: usize = 100;
const REL_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `m` cluster centres of the rows of `x`: k-means++ seeding followed by
/// Lloyd iterations until the inertia stops improving.
pub fn kmeans_init(x: &Matrix, m: usize, rng: &mut Rng) -> Result<Matrix> {
    let n = x.rows();
    if m == 0 {
        return Err(Error::Invalid("k-means needs at least one centre".into()));
    }
    if m > n {
        return Err(Error::Invalid(format!("k-means asked for {m} centres from {n} points")));
    }
    let dims = x.cols();
    let mut centres = Matrix::zeros(m, dims);
    centres.row_mut(0).copy_from_slice(x.row(rng.below(n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centres.row(0))).collect();
    for c in 1..m {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Never reuse a point that is already a centre.
            if nearest[chosen] == 0.0 {
                nearest.iter().position(|d| *d > 0.0).unwrap_or(chosen)
            } else {
                chosen
            }
        } else {
            rng.below(n)
        };
        centres.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centres.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut next = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let (best, d) = (0..m)
                .map(|c| (c, sq_dist(x.row(i), centres.row(c))))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            *a = best;
            next += d;
        }
        let mut sums = Matrix::zeros(m, dims);
        let mut counts = vec![0usize; m];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..m {
            // Empty clusters keep their previous centre.
            if counts[c] > 0 {
                let k = counts[c] as f64;
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / k;
                }
            }
        }
        let converged = inertia.is_finite() && (inertia - next).abs() <= REL_TOL * inertia.max(f64::MIN_POSITIVE);
        inertia = next;
        if converged || next == 0.0 {
            break;
        }
    }
    Ok(centres)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points() -> Matrix {
        Matrix::from_rows(&[[0.0, 0.1], [0.9, 0.8], [0.5, 0.5], [0.2, 0.7], [0.65, 0.05]]).unwrap()
    }

    #[test]
    fn all_points_as_centres_is_a_permutation() {
        let x = points();
        let z = kmeans_init(&x, 5, &mut Rng::new(3)).unwrap();
        let mut seen = vec![false; 5];
        for c in 0..5 {
            let i = (0..5).find(|&i| x.row(i) == z.row(c)).expect("centre is a data point");
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn single_centre_is_the_mean() {
        let z = kmeans_init(&points(), 1, &mut Rng::new(1)).unwrap();
        assert!((z[(0, 0)] - 0.45).abs() < 1e-12);
        assert!((z[(0, 1)] - 0.43).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let x = Matrix::from_fn(60, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let a = kmeans_init(&x, 6, &mut Rng::new(9)).unwrap();
        let b = kmeans_init(&x, 6, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(kmeans_init(&points(), 0, &mut Rng::new(0)).is_err());
        assert!(kmeans_init(&points(), 6, &mut Rng::new(0)).is_err());
    }
}
