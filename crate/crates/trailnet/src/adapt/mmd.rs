//! Multi-kernel maximum mean discrepancy: Gaussian kernel bank, median-
//! heuristic bandwidths, biased/unbiased squared-MMD estimators with exact
//! analytic gradients, and a permutation-test null sampler.

use crate::exec;
use crate::rng::{Stream, StreamKey};

use super::AdaptError;

/// Convex combination of Gaussian kernels k_j(x,y) = exp(-||x-y||²/(2σ_j²)).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub bandwidths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self, AdaptError> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(AdaptError::Argument(format!(
                "kernel bank needs matching nonempty lists, got {} bandwidths / {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|s| !(*s > 0.0)) {
            return Err(AdaptError::Argument("bandwidths must be positive".into()));
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(AdaptError::Argument("kernel weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AdaptError::Argument(format!("kernel weights sum to {sum}, need 1")));
        }
        Ok(KernelBank { bandwidths, weights })
    }

    /// Geometric ladder around a center bandwidth: σ0·spread^j with j
    /// centered on zero (five kernels, spread 2 → σ0/4 … 4σ0), equal
    /// weights.
    pub fn around(sigma0: f64, count: usize, spread: f64) -> Result<Self, AdaptError> {
        if !(sigma0 > 0.0) || count == 0 || !(spread > 0.0) {
            return Err(AdaptError::Argument(format!(
                "bad bank parameters sigma0={sigma0} count={count} spread={spread}"
            )));
        }
        let mid = (count as f64 - 1.0) / 2.0;
        let bandwidths = (0..count).map(|i| sigma0 * spread.powf(i as f64 - mid)).collect();
        KernelBank::new(bandwidths, vec![1.0 / count as f64; count])
    }

    /// Combined kernel value from a squared distance.
    #[inline]
    pub fn eval_d2(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Biased,
    Unbiased,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows of X and Y,
/// excluding the zero self-distances. This is the center of the kernel
/// ladder; bandwidths never receive gradients.
pub fn median_bandwidth(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64, AdaptError> {
    let pooled: Vec<&Vec<f64>> = xs.iter().chain(ys.iter()).collect();
    if pooled.len() < 2 {
        return Err(AdaptError::Argument(format!(
            "median bandwidth needs at least 2 pooled points, got {}",
            pooled.len()
        )));
    }
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(dist2(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dists[dists.len() / 2];
    if median <= 0.0 {
        return Err(AdaptError::DegenerateInput);
    }
    Ok(median)
}

fn check_sizes(xs: &[Vec<f64>], ys: &[Vec<f64>], estimator: Estimator) -> Result<(), AdaptError> {
    let (m, n) = (xs.len(), ys.len());
    let need = match estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if m < need || n < need {
        return Err(AdaptError::Argument(format!(
            "{estimator:?} estimator needs m,n >= {need}, got {m},{n}"
        )));
    }
    let d = xs[0].len();
    if xs.iter().chain(ys.iter()).any(|r| r.len() != d) {
        return Err(AdaptError::Argument("inconsistent row dimensions".into()));
    }
    Ok(())
}

/// Squared MMD between the empirical distributions of X and Y.
///
/// Biased (V-statistic): kxx/m² + kyy/n² − 2kxy/(mn), including self-pairs;
/// always ≥ 0 and exactly 0 when X == Y. Unbiased (U-statistic): self-pairs
/// excluded, denominators m(m−1) and n(n−1); zero-mean under p = q and may
/// be negative.
pub fn mmd2(
    bank: &KernelBank,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    estimator: Estimator,
) -> Result<f64, AdaptError> {
    check_sizes(xs, ys, estimator)?;
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let mut kxx = 0.0;
    let mut kyy = 0.0;
    let mut kxy = 0.0;
    match estimator {
        Estimator::Biased => {
            for a in xs {
                for b in xs {
                    kxx += bank.eval_d2(dist2(a, b));
                }
            }
            for a in ys {
                for b in ys {
                    kyy += bank.eval_d2(dist2(a, b));
                }
            }
            for a in xs {
                for b in ys {
                    kxy += bank.eval_d2(dist2(a, b));
                }
            }
            Ok(kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n))
        }
        Estimator::Unbiased => {
            for (i, a) in xs.iter().enumerate() {
                for (j, b) in xs.iter().enumerate() {
                    if i != j {
                        kxx += bank.eval_d2(dist2(a, b));
                    }
                }
            }
            for (i, a) in ys.iter().enumerate() {
                for (j, b) in ys.iter().enumerate() {
                    if i != j {
                        kyy += bank.eval_d2(dist2(a, b));
                    }
                }
            }
            for a in xs {
                for b in ys {
                    kxy += bank.eval_d2(dist2(a, b));
                }
            }
            Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
        }
    }
}

/// Adds `scale * ∂k(a,b)/∂a` to `out`. For the Gaussian bank,
/// ∂k_j/∂a = k_j(a,b)·(b−a)/σ_j².
fn add_kernel_grad(bank: &KernelBank, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let d2 = dist2(a, b);
    let mut coeff = 0.0;
    for (s, w) in bank.bandwidths.iter().zip(&bank.weights) {
        let s2 = s * s;
        coeff += w * (-d2 / (2.0 * s2)).exp() / s2;
    }
    for ((o, av), bv) in out.iter_mut().zip(a).zip(b) {
        *o += scale * coeff * (bv - av);
    }
}

/// Analytic gradient of `mmd2` with respect to every row of X and Y.
/// Bandwidths are treated as constants.
pub fn mmd2_grad(
    bank: &KernelBank,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    estimator: Estimator,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), AdaptError> {
    check_sizes(xs, ys, estimator)?;
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let d = xs[0].len();
    let (wxx, wyy) = match estimator {
        Estimator::Biased => (2.0 / (m * m), 2.0 / (n * n)),
        Estimator::Unbiased => (2.0 / (m * (m - 1.0)), 2.0 / (n * (n - 1.0))),
    };
    let wxy = 2.0 / (m * n);

    let dx = exec::map_indexed(xs.len(), |i| {
        let mut g = vec![0.0; d];
        for (j, b) in xs.iter().enumerate() {
            if j != i {
                // Self-pairs have zero gradient anyway, so skipping them is
                // also correct for the biased estimator.
                add_kernel_grad(bank, &xs[i], b, wxx, &mut g);
            }
        }
        for b in ys {
            add_kernel_grad(bank, &xs[i], b, -wxy, &mut g);
        }
        g
    });
    let dy = exec::map_indexed(ys.len(), |i| {
        let mut g = vec![0.0; d];
        for (j, b) in ys.iter().enumerate() {
            if j != i {
                add_kernel_grad(bank, &ys[i], b, wyy, &mut g);
            }
        }
        for b in xs {
            add_kernel_grad(bank, &ys[i], b, -wxy, &mut g);
        }
        g
    });
    Ok((dx, dy))
}

/// Unbiased statistic plus its permutation null: kernel matrix over the
/// pooled sample computed once (bandwidths are permutation-invariant), each
/// permutation re-splits the indices and re-sums.
pub struct TwoSampleTest {
    pub statistic: f64,
    pub null: Vec<f64>,
}

pub fn permutation_test(
    bank: &KernelBank,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    n_perms: usize,
    seed: u64,
) -> Result<TwoSampleTest, AdaptError> {
    check_sizes(xs, ys, Estimator::Unbiased)?;
    let m = xs.len();
    let pooled: Vec<&Vec<f64>> = xs.iter().chain(ys.iter()).collect();
    let total = pooled.len();
    let mut gram = vec![0.0; total * total];
    for i in 0..total {
        for j in 0..total {
            gram[i * total + j] = bank.eval_d2(dist2(pooled[i], pooled[j]));
        }
    }

    let stat_for = |idx: &[usize]| -> f64 {
        let (mf, nf) = (m as f64, (total - m) as f64);
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for (ai, &a) in idx.iter().enumerate() {
            for (bi, &b) in idx.iter().enumerate() {
                let v = gram[a * total + b];
                match (ai < m, bi < m) {
                    (true, true) => {
                        if ai != bi {
                            kxx += v;
                        }
                    }
                    (false, false) => {
                        if ai != bi {
                            kyy += v;
                        }
                    }
                    (true, false) => kxy += v,
                    (false, true) => {}
                }
            }
        }
        kxx / (mf * (mf - 1.0)) + kyy / (nf * (nf - 1.0)) - 2.0 * kxy / (mf * nf)
    };

    let identity: Vec<usize> = (0..total).collect();
    let statistic = stat_for(&identity);
    let key = StreamKey::new(seed, "two-sample-perm");
    let null = exec::map_indexed(n_perms, |p| {
        let mut idx: Vec<usize> = (0..total).collect();
        let mut stream = Stream::new(key.derive(p as u64).u64_at(0), "shuffle");
        stream.shuffle(&mut idx);
        stat_for(&idx)
    });
    Ok(TwoSampleTest { statistic, null })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(vals: &[f64]) -> Vec<Vec<f64>> {
        vals.iter().map(|v| vec![*v]).collect()
    }

    #[test]
    fn bank_validation() {
        assert!(KernelBank::new(vec![1.0], vec![1.0]).is_ok());
        assert!(KernelBank::new(vec![], vec![]).is_err());
        assert!(KernelBank::new(vec![1.0, -2.0], vec![0.5, 0.5]).is_err());
        assert!(KernelBank::new(vec![1.0, 2.0], vec![0.7, 0.7]).is_err());
        let b = KernelBank::around(2.0, 5, 2.0).unwrap();
        assert_eq!(b.bandwidths, vec![0.5, 1.0, 2.0, 4.0, 8.0]);
        assert!(b.weights.iter().all(|w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn median_bandwidth_examples() {
        // Single pair: the lone distance is the median.
        assert_eq!(median_bandwidth(&rows(&[0.0]), &rows(&[2.0])).unwrap(), 2.0);
        // Pooled {0,1,3}: distances {1,2,3}, median 2.
        assert_eq!(median_bandwidth(&rows(&[0.0, 1.0]), &rows(&[3.0])).unwrap(), 2.0);
        // Homogeneity: scaling inputs scales the median.
        let a = median_bandwidth(&rows(&[0.0, 0.7]), &rows(&[2.1, 5.0])).unwrap();
        let b = median_bandwidth(&rows(&[0.0, 2.1]), &rows(&[6.3, 15.0])).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12);
        // All identical points: degenerate.
        assert!(matches!(
            median_bandwidth(&rows(&[1.0, 1.0]), &rows(&[1.0])),
            Err(AdaptError::DegenerateInput)
        ));
    }

    #[test]
    fn biased_mmd_identical_samples_is_zero() {
        let bank = KernelBank::around(1.0, 3, 2.0).unwrap();
        let x = vec![vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]];
        let v = mmd2(&bank, &x, &x.clone(), Estimator::Biased).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn two_point_hand_example() {
        let sigma = 1.3;
        let bank = KernelBank::new(vec![sigma], vec![1.0]).unwrap();
        let x = rows(&[0.0, 0.0]);
        let c = sigma * (2.0 * 2f64.ln()).sqrt();
        let y = rows(&[c, c]);
        let v = mmd2(&bank, &x, &y, Estimator::Biased).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
        // General form 2 - 2 exp(-c²/2σ²).
        let c2 = 0.9;
        let y2 = rows(&[c2, c2]);
        let v2 = mmd2(&bank, &x, &y2, Estimator::Biased).unwrap();
        let expect = 2.0 - 2.0 * (-c2 * c2 / (2.0 * sigma * sigma)).exp();
        assert!((v2 - expect).abs() < 1e-12);
    }

    #[test]
    fn unbiased_needs_two_per_side() {
        let bank = KernelBank::around(1.0, 1, 2.0).unwrap();
        assert!(mmd2(&bank, &rows(&[0.0]), &rows(&[1.0, 2.0]), Estimator::Unbiased).is_err());
        assert!(mmd2(&bank, &rows(&[0.0]), &rows(&[1.0]), Estimator::Biased).is_ok());
    }

    #[test]
    fn translation_invariance() {
        let bank = KernelBank::around(1.5, 5, 2.0).unwrap();
        let mut rng = Stream::new(3, "shift");
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.next_normal()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.next_normal() + 1.0).collect()).collect();
        let shift = [13.5, -2.25, 0.5];
        let xs2: Vec<Vec<f64>> =
            xs.iter().map(|r| r.iter().zip(shift).map(|(v, s)| v + s).collect()).collect();
        let ys2: Vec<Vec<f64>> =
            ys.iter().map(|r| r.iter().zip(shift).map(|(v, s)| v + s).collect()).collect();
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let a = mmd2(&bank, &xs, &ys, est).unwrap();
            let b = mmd2(&bank, &xs2, &ys2, est).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_zero_at_identical_samples_and_swap_symmetry() {
        let bank = KernelBank::around(1.0, 5, 2.0).unwrap();
        let x = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        let (dx, dy) = mmd2_grad(&bank, &x, &x.clone(), Estimator::Biased).unwrap();
        for g in dx.iter().chain(dy.iter()).flatten() {
            assert!(g.abs() < 1e-15);
        }

        let mut rng = Stream::new(9, "swap");
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.next_normal()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.next_normal() + 0.5).collect()).collect();
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let (dx, dy) = mmd2_grad(&bank, &xs, &ys, est).unwrap();
            let (dy2, dx2) = mmd2_grad(&bank, &ys, &xs, est).unwrap();
            for (a, b) in dx.iter().flatten().zip(dx2.iter().flatten()) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in dy.iter().flatten().zip(dy2.iter().flatten()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let bank = KernelBank::around(0.8, 5, 2.0).unwrap();
        let mut rng = Stream::new(21, "fd");
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.next_normal()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.next_normal() + 0.7).collect()).collect();
        let delta = 1e-4;
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let (dx, dy) = mmd2_grad(&bank, &xs, &ys, est).unwrap();
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 1e-12;
            for (rows, grads, is_x) in [(&xs, &dx, true), (&ys, &dy, false)] {
                for i in 0..rows.len() {
                    for k in 0..3 {
                        let mut up = (xs.clone(), ys.clone());
                        let mut dn = (xs.clone(), ys.clone());
                        if is_x {
                            up.0[i][k] += delta;
                            dn.0[i][k] -= delta;
                        } else {
                            up.1[i][k] += delta;
                            dn.1[i][k] -= delta;
                        }
                        let fu = mmd2(&bank, &up.0, &up.1, est).unwrap();
                        let fd_ = mmd2(&bank, &dn.0, &dn.1, est).unwrap();
                        let num = (fu - fd_) / (2.0 * delta);
                        worst = worst.max((num - grads[i][k]).abs());
                        scale = scale.max(num.abs()).max(grads[i][k].abs());
                    }
                }
            }
            assert!(worst / scale < 1e-4, "{est:?} rel err {}", worst / scale);
        }
    }

    #[test]
    fn unbiased_mean_near_zero_under_null() {
        let bank = KernelBank::around(1.0, 5, 2.0).unwrap();
        let mut rng = Stream::new(5, "null");
        let mut sum = 0.0;
        let trials = 300;
        for _ in 0..trials {
            let xs: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.next_normal()]).collect();
            let ys: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.next_normal()]).collect();
            sum += mmd2(&bank, &xs, &ys, Estimator::Unbiased).unwrap();
        }
        let mean = sum / trials as f64;
        assert!(mean.abs() < 0.01, "unbiased mean {mean}");
    }

    #[test]
    fn permutation_statistic_matches_direct_call() {
        let bank = KernelBank::around(1.0, 5, 2.0).unwrap();
        let mut rng = Stream::new(6, "perm");
        let xs: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.next_normal()]).collect();
        let ys: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.next_normal() + 2.0]).collect();
        let test = permutation_test(&bank, &xs, &ys, 50, 7).unwrap();
        let direct = mmd2(&bank, &xs, &ys, Estimator::Unbiased).unwrap();
        assert!((test.statistic - direct).abs() < 1e-12);
        assert_eq!(test.null.len(), 50);
        // Well-separated samples: the observed statistic dominates the null.
        let above = test.null.iter().filter(|v| **v >= test.statistic).count();
        assert_eq!(above, 0);
        // Determinism.
        let again = permutation_test(&bank, &xs, &ys, 50, 7).unwrap();
        assert_eq!(test.null, again.null);
    }
}
