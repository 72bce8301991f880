//! Independent reference implementations used by the acceptance suite.
//!
//! Nothing here calls into the library's numerical code; every quantity is
//! recomputed from its definition, usually the slow way.

#![allow(dead_code)]

use metrack_core::{Matrix, Vector};
use rand::Rng;

pub fn random_vector(rng: &mut impl Rng, d: usize, scale: f64) -> Vector {
    Vector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

/// Uniform direction scaled to unit Euclidean norm.
pub fn unit_vector(rng: &mut impl Rng, d: usize) -> Vector {
    random_vector(rng, d, 1.0).normalize()
}

/// `AᵀA/d + I`.
pub fn random_spd(rng: &mut impl Rng, d: usize) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let m = a.transpose() * &a / d as f64 + Matrix::identity(d, d);
    (&m + m.transpose()) * 0.5
}

pub fn rel_frobenius(a: &Matrix, reference: &Matrix) -> f64 {
    let diff: f64 = a.iter().zip(reference.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = reference.iter().map(|y| y * y).sum();
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

/// `PᵀMP` entry by entry.
pub fn gram(columns: &[Vector], m: &Matrix) -> Matrix {
    let n = columns.len();
    let d = m.nrows();
    let weighted: Vec<Vec<f64>> = columns
        .iter()
        .map(|col| (0..d).map(|r| (0..d).map(|c| m[(r, c)] * col[c]).sum()).collect())
        .collect();
    Matrix::from_fn(n, n, |i, j| (0..d).map(|r| columns[i][r] * weighted[j][r]).sum())
}

/// Gauss-Jordan elimination with partial pivoting. `None` when a pivot
/// falls below `1e-13` relative to the largest entry.
pub fn gauss_jordan_inverse(a: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let mut w = a.clone();
    let mut inv = Matrix::identity(n, n);
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&i, &j| w[(i, col)].abs().total_cmp(&w[(j, col)].abs()))?;
        if w[(pivot_row, col)].abs() <= 1e-13 * scale {
            return None;
        }
        w.swap_rows(col, pivot_row);
        inv.swap_rows(col, pivot_row);
        let p = w[(col, col)];
        for k in 0..n {
            w[(col, k)] /= p;
            inv[(col, k)] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = w[(row, col)];
                if f != 0.0 {
                    for k in 0..n {
                        w[(row, k)] -= f * w[(col, k)];
                        inv[(row, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: eigenvalues and
/// eigenvectors as columns.
pub fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    let mut w = a.clone();
    let mut v = Matrix::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| w[(i, j)].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| w[(i, i)].powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if w[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (w[(q, q)] - w[(p, p)]) / (2.0 * w[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (wkp, wkq) = (w[(k, p)], w[(k, q)]);
                    w[(k, p)] = c * wkp - s * wkq;
                    w[(k, q)] = s * wkp + c * wkq;
                }
                for k in 0..n {
                    let (wpk, wqk) = (w[(p, k)], w[(q, k)]);
                    w[(p, k)] = c * wpk - s * wqk;
                    w[(q, k)] = s * wpk + c * wqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| w[(i, i)]).collect(), v)
}

/// Moore-Penrose inverse from an eigendecomposition, dropping eigenvalues
/// below `rel_cutoff · max|λ|`. Also returns the numerical rank.
fn pseudo_inverse_from_eigen(values: &[f64], vectors: &Matrix, rel_cutoff: f64) -> (Matrix, usize) {
    let n = values.len();
    let top = values.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let mut out = Matrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lambda) in values.iter().enumerate() {
        if lambda.abs() > rel_cutoff * top {
            let v = vectors.column(k);
            out += (v * v.transpose()) / lambda;
            rank += 1;
        }
    }
    (out, rank)
}

pub fn symmetric_pseudo_inverse(a: &Matrix, rel_cutoff: f64) -> Matrix {
    let (values, vectors) = jacobi_eigen(a);
    pseudo_inverse_from_eigen(&values, &vectors, rel_cutoff).0
}

/// Numerical rank of a symmetric matrix (same cutoff convention).
pub fn symmetric_rank(a: &Matrix, rel_cutoff: f64) -> usize {
    let (values, _) = jacobi_eigen(a);
    let top = values.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    values.iter().filter(|l| l.abs() > rel_cutoff * top).count()
}

/// `(PᵀMP)⁻¹`, or its pseudoinverse when singular.
pub fn dense_regression_inverse(columns: &[Vector], m: &Matrix) -> Matrix {
    let g = gram(columns, m);
    let (values, vectors) = jacobi_eigen(&g);
    let top = values.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    if values.iter().all(|l| l.abs() > 1e-10 * top) {
        if let Some(inv) = gauss_jordan_inverse(&g) {
            return inv;
        }
    }
    pseudo_inverse_from_eigen(&values, &vectors, 1e-10).0
}

/// Metric-weighted least squares by whitening: with `M = LLᵀ` the problem
/// becomes ordinary least squares on `A = LᵀP`, `b = Lᵀy`. Solved by
/// Householder QR, either of `A` (full column rank, `N ≤ d`) or of `Aᵀ`
/// (full row rank, `N > d`, minimum-norm solution). Returns coefficients
/// and residual `‖b − Ax‖²`.
pub fn whitened_ols(columns: &[Vector], m: &Matrix, y: &Vector) -> (Vector, f64) {
    let l = m.clone().cholesky().expect("metric must be positive definite").l();
    let a = l.transpose() * Matrix::from_columns(columns);
    let b = l.transpose() * y;
    let (d, n) = a.shape();
    let x = if n <= d {
        let qr = a.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let rhs = q.transpose() * &b;
        // back substitution R x = Qᵀb
        let mut x = Vector::zeros(n);
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| r[(i, k)] * x[k]).sum();
            x[i] = (rhs[i] - s) / r[(i, i)];
        }
        x
    } else {
        let qr = a.transpose().qr();
        let (q, r) = (qr.q(), qr.r());
        // forward substitution Rᵀ z = b, then x = Q z
        let mut z = Vector::zeros(d);
        for i in 0..d {
            let s: f64 = (0..i).map(|k| r[(k, i)] * z[k]).sum();
            z[i] = (b[i] - s) / r[(i, i)];
        }
        q * z
    };
    let r = b - a * &x;
    (x, r.norm_squared())
}

pub fn quad(m: &Matrix, v: &Vector) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// `max{0, 1 + D(p, p⁺) − D(p, p⁻)}`.
pub fn triplet_loss(m: &Matrix, p: &Vector, pos: &Vector, neg: &Vector) -> f64 {
    (1.0 + quad(m, &(p - pos)) - quad(m, &(p - neg))).max(0.0)
}

/// Coefficients `(λ₂, λ₁)` of `L(η) = λ₂η² + λ₁η`, from the materialised
/// `U = a₋a₋ᵀ − a₊a₊ᵀ`.
pub fn pa_quadratic(m: &Matrix, a_plus: &Vector, a_minus: &Vector) -> (f64, f64) {
    let u = a_minus * a_minus.transpose() - a_plus * a_plus.transpose();
    let u_frob_sq: f64 = u.iter().map(|x| x * x).sum();
    let lambda2 = 0.5 * u_frob_sq + quad(&u, a_plus) - quad(&u, a_minus);
    let lambda1 = 1.0 + quad(m, a_plus) - quad(m, a_minus);
    (lambda2, lambda1)
}

/// Maximiser of a concave scalar function on `[lo, hi]` by repeated grid
/// refinement around the best grid point.
pub fn grid_argmax(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut best = lo;
    while b - a > 1e-9 * (hi - lo).max(1.0) {
        let n = 200;
        let step = (b - a) / n as f64;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..=n {
            let x = a + k as f64 * step;
            let v = f(x);
            if v > best_val {
                best_val = v;
                best = x;
            }
        }
        a = (best - 2.0 * step).max(lo);
        b = (best + 2.0 * step).min(hi);
    }
    best
}

/// Intersection over union of `(x, y, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Exhaustive `argmax_{i≠j} Δ_ij + D(p, pⁱ) − D(p, pʲ)` with the first
/// maximum in row-major order.
pub fn most_violated(
    m: &Matrix,
    anchor_box: [f64; 4],
    anchor: &Vector,
    boxes: &[[f64; 4]],
    features: &[Vector],
) -> (usize, usize, f64) {
    let overlap: Vec<f64> = boxes.iter().map(|&b| iou(anchor_box, b)).collect();
    let dist: Vec<f64> = features.iter().map(|f| quad(m, &(anchor - f))).collect();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            if i == j {
                continue;
            }
            let v = overlap[i] - overlap[j] + dist[i] - dist[j];
            if v > best.2 {
                best = (i, j, v);
            }
        }
    }
    best
}

/// `B` and `f` of the structured step-length problem, from the
/// stationarity conditions of the Lagrangian with every `U_ℓ`
/// materialised: `b_ℓm = −⟨U_ℓ, U_m⟩_F`,
/// `f_ℓ = −(Δ_ℓ + a_μᵀMa_μ − a_νᵀMa_ν)`.
pub fn structured_system(m: &Matrix, a_mu: &[Vector], a_nu: &[Vector], delta: &[f64]) -> (Matrix, Vector) {
    let k = delta.len();
    let u: Vec<Matrix> = (0..k)
        .map(|l| &a_nu[l] * a_nu[l].transpose() - &a_mu[l] * a_mu[l].transpose())
        .collect();
    let b = Matrix::from_fn(k, k, |l, n| -u[l].component_mul(&u[n]).sum());
    let f = Vector::from_fn(k, |l, _| -(delta[l] + quad(m, &a_mu[l]) - quad(m, &a_nu[l])));
    (b, f)
}

pub fn l1_objective(b: &Matrix, f: &Vector, eta: &[f64]) -> f64 {
    (0..f.len())
        .map(|i| ((0..eta.len()).map(|j| b[(i, j)] * eta[j]).sum::<f64>() - f[i]).abs())
        .sum()
}

/// Adaptive grid minimisation of `obj` over `[0, c]^k`, where `obj` returns
/// `None` outside the feasible set. A full grid seeds a window search that
/// doubles the window while the best point sits on its edge and halves it
/// once the best point is inside.
fn adaptive_grid(k: usize, c: f64, obj: &dyn Fn(&[f64]) -> Option<f64>) -> f64 {
    if k == 0 {
        return obj(&[]).unwrap_or(f64::INFINITY);
    }
    let lattice = |lo: &[f64], hi: &[f64], n: usize| -> Vec<(f64, Vec<f64>)> {
        let mut out = Vec::new();
        let total = (n + 1).pow(k as u32);
        for idx in 0..total {
            let mut rest = idx;
            let u: Vec<f64> = (0..k)
                .map(|d| {
                    let s = rest % (n + 1);
                    rest /= n + 1;
                    lo[d] + (hi[d] - lo[d]) * s as f64 / n as f64
                })
                .collect();
            if let Some(v) = obj(&u) {
                out.push((v, u));
            }
        }
        out
    };
    const SEEDS: usize = 3;
    // the few lowest entries, in order
    fn lowest<T>(mut v: Vec<(f64, T)>) -> Vec<(f64, T)> {
        if v.len() > SEEDS {
            v.select_nth_unstable_by(SEEDS - 1, |a, b| a.0.total_cmp(&b.0));
            v.truncate(SEEDS);
        }
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
    let n0 = [0, 1000, 100, 30][k];
    let scored = lowest(lattice(&vec![0.0; k], &vec![c; k], n0));
    if scored.is_empty() {
        return f64::INFINITY;
    }
    let mut best = scored[0].0;
    let mut seeds: Vec<Vec<f64>> = scored.into_iter().map(|s| s.1).collect();
    let mut half = 2.0 * c / n0 as f64;
    let n = if k == 3 { 8 } else { 16 };
    for _ in 0..20000 {
        if half <= 1e-10 * c {
            break;
        }
        let mut next = Vec::new();
        for (w, seed) in seeds.iter().enumerate() {
            let lo: Vec<f64> = seed.iter().map(|x| (x - half).max(0.0)).collect();
            let hi: Vec<f64> = seed.iter().map(|x| (x + half).min(c)).collect();
            for (v, u) in lattice(&lo, &hi, n) {
                let edge = u.iter().enumerate().any(|(d, &x)| (x == lo[d] && lo[d] > 0.0) || (x == hi[d] && hi[d] < c));
                next.push((v, u, w == 0 && edge));
            }
        }
        let next = lowest(next.into_iter().map(|(v, u, edge)| (v, (u, edge))).collect());
        best = best.min(next[0].0);
        half = if next[0].1 .1 { (2.0 * half).min(c) } else { 0.5 * half };
        seeds = next.into_iter().map(|s| s.1 .0).collect();
    }
    best
}

/// Minimum of `‖Bη − f‖₁` over `{η ⪰ 0, Σ η ≤ C}` for up to three
/// variables. Every face of the feasible polytope (a set of coordinates
/// pinned at zero, with or without the budget active) is searched in its
/// own coordinates with [`adaptive_grid`]; the minimum over faces is the
/// answer.
pub fn l1_grid_min(b: &Matrix, f: &Vector, c: f64) -> f64 {
    let m = f.len();
    assert!((1..=3).contains(&m), "grid oracle handles m <= 3");
    let mut best = f64::INFINITY;
    for zero_mask in 0..(1usize << m) {
        for budget in [false, true] {
            let free: Vec<usize> = (0..m).filter(|j| zero_mask >> j & 1 == 0).collect();
            if budget && free.is_empty() {
                continue;
            }
            let k = free.len() - usize::from(budget);
            let lift = |u: &[f64]| -> Option<f64> {
                let mut eta = vec![0.0; m];
                for (d, &j) in free[..k].iter().enumerate() {
                    eta[j] = u[d];
                }
                if budget {
                    eta[free[k]] = c - u.iter().sum::<f64>();
                }
                let ok = eta.iter().all(|&x| x >= 0.0) && eta.iter().sum::<f64>() <= c * (1.0 + 1e-12);
                ok.then(|| l1_objective(b, f, &eta))
            };
            best = best.min(adaptive_grid(k, c, &lift));
        }
    }
    best
}

/// Naive HOG over a 32×32 patch given row-major: gradients recomputed per
/// cell pixel from the clamped neighbours, every bin accumulated in its
/// own pass over the cell.
pub fn naive_hog405(pixels: &[f64]) -> Vec<f64> {
    const N: usize = 32;
    let px = |r: isize, c: isize| pixels[(r.clamp(0, 31) as usize) * N + c.clamp(0, 31) as usize];
    // vote of pixel (r, c) into bin `bin`
    let vote = |r: usize, c: usize, bin: usize| -> f64 {
        let (ri, ci) = (r as isize, c as isize);
        let gx = px(ri, ci + 1) - px(ri, ci - 1);
        let gy = px(ri + 1, ci) - px(ri - 1, ci);
        let mag = (gx * gx + gy * gy).sqrt();
        if mag == 0.0 {
            return 0.0;
        }
        let mut theta = gy.atan2(gx);
        if theta < 0.0 {
            theta += std::f64::consts::PI;
        }
        if theta >= std::f64::consts::PI {
            theta -= std::f64::consts::PI;
        }
        // bin centres sit at (k + ½)·20°
        let pos = theta * 9.0 / std::f64::consts::PI - 0.5;
        let base = pos.floor();
        let frac = pos - base;
        let lo = ((base as isize % 9 + 9) % 9) as usize;
        let hi = (lo + 1) % 9;
        if bin == lo {
            mag * (1.0 - frac)
        } else if bin == hi {
            mag * frac
        } else {
            0.0
        }
    };
    let two_thirds = 2 * N / 3;
    let regions = [
        (0, N, 0, N),
        (0, two_thirds, 0, N),
        (N - two_thirds, N, 0, N),
        (0, N, 0, two_thirds),
        (0, N, N - two_thirds, N),
    ];
    let mut out = Vec::new();
    for (r0, r1, c0, c1) in regions {
        let edge = |start: usize, end: usize, k: usize| start + (k * (end - start)) / 3;
        for cr in 0..3 {
            for cc in 0..3 {
                let mut hist = [0.0; 9];
                for (bin, h) in hist.iter_mut().enumerate() {
                    for r in edge(r0, r1, cr)..edge(r0, r1, cr + 1) {
                        for c in edge(c0, c1, cc)..edge(c0, c1, cc + 1) {
                            let v = vote(r, c, bin);
                            if v != 0.0 {
                                *h += v;
                            }
                        }
                    }
                }
                let mut ss = 0.0;
                for h in hist {
                    ss += h * h;
                }
                let norm = ss.sqrt();
                for h in hist {
                    out.push(if norm > 0.0 { h / norm } else { h });
                }
            }
        }
    }
    out
}
