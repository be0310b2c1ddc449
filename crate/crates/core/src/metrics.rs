//! Two-sample metrics and the reverse-ODE NLL score.

use rayon::prelude::*;

use crate::densities::{standard_normal_log_density, EmpiricalSet};
use crate::error::{check_dim, Error, Result};
use crate::integrators::{integrate_terminal, Method, VectorField};

/// Largest sample count for exact assignment.
pub const MAX_EXACT_W2: usize = 4096;

/// Energy distance `2A − B − C`, where `A`, `B`, `C` are the mean pairwise
/// Euclidean distances across, within `X` and within `Y` (all ordered pairs,
/// including `i = j`).
pub fn energy_distance(x: &EmpiricalSet, y: &EmpiricalSet) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    let (a, b, c) = if x.dim() == 1 {
        let mut xs = x.as_flat().to_vec();
        let mut ys = y.as_flat().to_vec();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        (cross_mean_1d(&xs, &ys), within_mean_1d(&xs), within_mean_1d(&ys))
    } else {
        (cross_mean(x, y), cross_mean(x, x), cross_mean(y, y))
    };
    Ok(2.0 * a - b - c)
}

fn within_mean_1d(s: &[f64]) -> f64 {
    // Σ_{i<j} (s_j − s_i) = Σ_j s_j (2j − n + 1) for sorted s.
    let n = s.len();
    let total: f64 = s.iter().enumerate().map(|(j, v)| v * (2.0 * j as f64 - n as f64 + 1.0)).sum();
    2.0 * total / (n * n) as f64
}

fn cross_mean_1d(xs: &[f64], ys: &[f64]) -> f64 {
    let mut prefix = Vec::with_capacity(ys.len() + 1);
    prefix.push(0.0);
    for v in ys {
        prefix.push(prefix.last().unwrap() + v);
    }
    let total = prefix[ys.len()];
    let m = ys.len() as f64;
    let mut sum = 0.0;
    for &x in xs {
        let k = ys.partition_point(|y| *y < x);
        let kf = k as f64;
        sum += x * kf - prefix[k] + (total - prefix[k]) - x * (m - kf);
    }
    sum / (xs.len() as f64 * m)
}

fn cross_mean(x: &EmpiricalSet, y: &EmpiricalSet) -> f64 {
    let rows: Vec<f64> = x
        .as_flat()
        .par_chunks_exact(x.dim())
        .map(|p| y.rows().map(|q| dist(p, q)).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (x.len() * y.len()) as f64
}

#[inline]
fn dist(p: &[f64], q: &[f64]) -> f64 {
    sq_dist(p, q).sqrt()
}

#[inline]
fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Exact 2-Wasserstein distance between two equal-size empirical sets:
/// sorted coupling in 1D, optimal assignment on squared distances otherwise.
pub fn wasserstein2(x: &EmpiricalSet, y: &EmpiricalSet) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    let n = x.len();
    if n != y.len() {
        return Err(Error::InvalidParameter(format!("W2 needs equal sample counts, got {n} and {}", y.len())));
    }
    if x.dim() == 1 {
        let mut xs = x.as_flat().to_vec();
        let mut ys = y.as_flat().to_vec();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let s: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok((s / n as f64).sqrt());
    }
    if n > MAX_EXACT_W2 {
        return Err(Error::InvalidParameter(format!(
            "exact W2 supports at most {MAX_EXACT_W2} points, got {n}; subsample first"
        )));
    }
    let cost: Vec<f64> = x.rows().flat_map(|p| y.rows().map(move |q| sq_dist(p, q))).collect();
    let assignment = hungarian(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, j)| cost[i * n + j]).sum();
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// W2 on subsets of at most `n` rows each, drawn with the given seed.
pub fn wasserstein2_subsampled(x: &EmpiricalSet, y: &EmpiricalSet, n: usize, seed: u64) -> Result<f64> {
    let n = n.min(MAX_EXACT_W2).min(x.len()).min(y.len());
    wasserstein2(&x.subset(n, seed), &y.subset(n, seed.wrapping_add(1)))
}

/// Minimum-cost perfect assignment on a square row-major cost matrix
/// (shortest augmenting paths with potentials, O(n³)). Returns the column
/// assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Negative log-likelihood score: each sample is carried from `t = 1` back to
/// `t = 0` by `dx/dτ = −v(x, 1 − τ)`, and the score is the mean of
/// `−ln N(x(τ=1) | 0, I)`.
///
/// This deliberately omits the log-determinant of the flow Jacobian, so it
/// scores transport consistency rather than being a true likelihood.
pub fn nll(field: &(impl VectorField + ?Sized), samples: &EmpiricalSet, tol: f64) -> Result<f64> {
    let reversed = |x: &[f64], tau: f64, out: &mut [f64]| -> Result<()> {
        field.eval(x, 1.0 - tau, out)?;
        out.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    };
    let d = samples.dim();
    let ends: Vec<Result<f64>> = samples
        .as_flat()
        .par_chunks_exact(d)
        .enumerate()
        .map(|(i, x)| {
            let z = integrate_terminal(&reversed, x, 0.0, 1.0, Method::Adaptive { tol }).map_err(|e| match e {
                Error::Divergence { t } => Error::SampleDivergence { index: i, t: 1.0 - t },
                other => other,
            })?;
            Ok(-standard_normal_log_density(&z))
        })
        .collect();
    let mut total = 0.0;
    for e in ends {
        total += e?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{Density, Gaussian};
    use crate::rng;

    fn set(v: Vec<f64>, d: usize) -> EmpiricalSet {
        EmpiricalSet::new(v, d, "t").unwrap()
    }

    fn naive_energy(x: &EmpiricalSet, y: &EmpiricalSet) -> f64 {
        let m = |a: &EmpiricalSet, b: &EmpiricalSet| {
            let mut s = 0.0;
            for p in a.rows() {
                for q in b.rows() {
                    s += dist(p, q);
                }
            }
            s / (a.len() * b.len()) as f64
        };
        2.0 * m(x, y) - m(x, x) - m(y, y)
    }

    #[test]
    fn energy_examples() {
        let x = set(vec![0.0], 1);
        let y = set(vec![1.0], 1);
        assert_eq!(energy_distance(&x, &y).unwrap(), 2.0);
        let a = Density::from(Gaussian::standard(2)).sample(1, 50).unwrap();
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn energy_matches_naive() {
        for d in [1, 2, 3] {
            let x = Density::from(Gaussian::standard(d)).sample(2, 137).unwrap();
            let y = Density::from(Gaussian::isotropic(d, 0.5, 2.0).unwrap()).sample(3, 91).unwrap();
            let e = energy_distance(&x, &y).unwrap();
            let n = naive_energy(&x, &y);
            assert!((e - n).abs() < 1e-12, "d={d}: {e} vs {n}");
            assert!((e - energy_distance(&y, &x).unwrap()).abs() < 1e-12);
        }
        let x = set(vec![0.0, 1.0], 2);
        assert!(energy_distance(&x, &set(vec![1.0], 1)).is_err());
    }

    #[test]
    fn energy_zero_on_permuted_copy() {
        let x = Density::from(Gaussian::standard(2)).sample(4, 64).unwrap();
        let mut rows: Vec<Vec<f64>> = x.rows().map(|r| r.to_vec()).collect();
        rows.reverse();
        let y = EmpiricalSet::from_rows(&rows, "p").unwrap();
        assert!(energy_distance(&x, &y).unwrap().abs() < 1e-12);
        let mut moved = rows.clone();
        moved[0][0] += 0.5;
        let z = EmpiricalSet::from_rows(&moved, "m").unwrap();
        assert!(energy_distance(&x, &z).unwrap() > 1e-6);
    }

    #[test]
    fn w2_examples() {
        assert_eq!(wasserstein2(&set(vec![0.0], 1), &set(vec![3.0], 1)).unwrap(), 3.0);
        let x = Density::from(Gaussian::standard(2)).sample(5, 30).unwrap();
        assert!(wasserstein2(&x, &x).unwrap() < 1e-12);
        assert!(wasserstein2(&x, &set(vec![0.0, 0.0], 2)).is_err());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn w2_matches_brute_force() {
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for seed in 0..10 {
            let x = Density::from(Gaussian::standard(2)).sample(seed, 6).unwrap();
            let y = Density::from(Gaussian::isotropic(2, 1.0, 0.5).unwrap()).sample(seed + 100, 6).unwrap();
            let best = perms
                .iter()
                .map(|p| (0..6).map(|i| sq_dist(x.row(i), y.row(p[i]))).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let w = wasserstein2(&x, &y).unwrap();
            assert!((w - (best / 6.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_triangle_inequality() {
        for seed in 0u64..5 {
            let g = |s: u64| Density::from(Gaussian::isotropic(2, s as f64 * 0.3, 1.0).unwrap()).sample(seed * 10 + s, 64).unwrap();
            let (a, b, c) = (g(0), g(1), g(2));
            let ab = wasserstein2(&a, &b).unwrap();
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn hungarian_small() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = hungarian(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn nll_of_gaussian_samples_under_zero_field() {
        let zero = |_: &[f64], _: f64, out: &mut [f64]| {
            out.fill(0.0);
            Ok(())
        };
        let s = Density::from(Gaussian::standard(2)).sample(7, 10_000).unwrap();
        let v = nll(&zero, &s, 1e-6).unwrap();
        let expect = 1.0 + (2.0 * std::f64::consts::PI).ln();
        assert!((v - expect).abs() < 0.02 * expect);
        let origin = set(vec![0.0, 0.0], 2);
        assert!((nll(&zero, &origin, 1e-6).unwrap() - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn nll_divergence_names_sample() {
        let blow = |x: &[f64], _: f64, out: &mut [f64]| {
            out[0] = if x[0] > 5.0 { f64::NAN } else { -1e3 * x[0].max(0.0) - 1.0 };
            Ok(())
        };
        let s = set(vec![0.0, 4.0], 1);
        match nll(&blow, &s, 1e-6) {
            Err(Error::SampleDivergence { index, .. }) => assert_eq!(index, 0),
            other => panic!("{other:?}"),
        }
        let _ = rng::seeded(0);
    }
}
