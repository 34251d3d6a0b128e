//! Two-component PCA for scatter plots.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    /// `n × 2` projected coordinates.
    pub coords: Tensor,
    /// Unit loading vectors of the two components.
    pub components: [Vec<f64>; 2],
    /// Variance (n − 1 denominator) captured by each component.
    pub explained_variance: [f64; 2],
    /// The second component was zero-filled for lack of rank.
    pub rank_deficient: bool,
}

const TOL: f64 = 1e-10;
const MAX_ITER: usize = 100_000;

fn orthonormalize(q: &mut [Vec<f64>; 2]) -> [f64; 2] {
    let n0 = q[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    if n0 > 0.0 {
        q[0].iter_mut().for_each(|v| *v /= n0);
    }
    let proj: f64 = q[0].iter().zip(&q[1]).map(|(a, b)| a * b).sum();
    let (first, second) = q.split_at_mut(1);
    for (b, a) in second[0].iter_mut().zip(&first[0]) {
        *b -= proj * a;
    }
    let n1 = q[1].iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 > 0.0 {
        q[1].iter_mut().for_each(|v| *v /= n1);
    }
    [n0, n1]
}

fn apply(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| c[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn sign_fix(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projection of mean-centred rows onto the top two principal axes, found
/// by orthogonal iteration on the covariance plus a 2 × 2 Rayleigh-Ritz
/// solve. Each axis has its largest-magnitude loading positive.
pub fn pca2d(features: &Tensor) -> Result<Pca2d> {
    let (n, d) = (features.rows(), features.cols());
    if n < 3 {
        return Err(Error::usage(format!("PCA needs at least 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::usage("PCA to two dimensions needs at least 2 features"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| features.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b] / (n - 1) as f64;
            }
        }
    }
    let scale = (0..d).map(|i| cov[i * d + i]).fold(0.0, f64::max);

    let mut rng = rng_for(0, stream::PROBE, u64::MAX);
    let mut q: [Vec<f64>; 2] = [
        (0..d).map(|_| rng.random::<f64>() - 0.5).collect(),
        (0..d).map(|_| rng.random::<f64>() - 0.5).collect(),
    ];
    orthonormalize(&mut q);
    if scale > 0.0 {
        for _ in 0..MAX_ITER {
            let mut next = [apply(&cov, d, &q[0]), apply(&cov, d, &q[1])];
            let norms = orthonormalize(&mut next);
            if norms[1] < 1e-12 * scale {
                // No second direction: keep the first converging, then stop.
                q = next;
                break;
            }
            // Change of the spanned subspace: residual of projecting the
            // new basis onto the old one.
            let mut change: f64 = 0.0;
            for v in &next {
                let p0: f64 = v.iter().zip(&q[0]).map(|(a, b)| a * b).sum();
                let p1: f64 = v.iter().zip(&q[1]).map(|(a, b)| a * b).sum();
                let res = (1.0 - p0 * p0 - p1 * p1).max(0.0).sqrt();
                change = change.max(res);
            }
            q = next;
            if change < TOL {
                break;
            }
        }
    }
    // Rayleigh-Ritz in span(q).
    let cq = [apply(&cov, d, &q[0]), apply(&cov, d, &q[1])];
    let h = |i: usize, j: usize| q[i].iter().zip(&cq[j]).map(|(a, b)| a * b).sum::<f64>();
    let (a, b, c) = (h(0, 0), 0.5 * (h(0, 1) + h(1, 0)), h(1, 1));
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    // Eigenvector of [[a, b], [b, c]] for l1.
    let (mut u0, mut u1) = if b.abs() > 0.0 {
        (b, l1 - a)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let un = (u0 * u0 + u1 * u1).sqrt();
    u0 /= un;
    u1 /= un;
    let mut v1: Vec<f64> = q[0].iter().zip(&q[1]).map(|(x, y)| u0 * x + u1 * y).collect();
    let mut v2: Vec<f64> = q[0].iter().zip(&q[1]).map(|(x, y)| -u1 * x + u0 * y).collect();
    let rank_deficient = !(l2 > 1e-12 * scale.max(f64::MIN_POSITIVE));
    sign_fix(&mut v1);
    if rank_deficient {
        v2.iter_mut().for_each(|x| *x = 0.0);
    } else {
        sign_fix(&mut v2);
    }
    let mut coords = Vec::with_capacity(2 * n);
    for row in &centered {
        coords.push(row.iter().zip(&v1).map(|(a, b)| a * b).sum());
        coords.push(row.iter().zip(&v2).map(|(a, b)| a * b).sum());
    }
    Ok(Pca2d {
        coords: Tensor::from_vec(&[n, 2], coords)?,
        components: [v1, v2],
        explained_variance: [l1.max(0.0), if rank_deficient { 0.0 } else { l2 }],
        rank_deficient,
    })
}
