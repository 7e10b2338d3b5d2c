//! Reference solver for the ranking objective, test-only.
//!
//! minimize  0.5 |d|^2 + delta * sum_{i>j} max(0, 1 - d.(V_i - V_j))
//!
//! The optimum satisfies d = sum_p lambda_p u_p with lambda_p in
//! [0, delta], where lambda_p = 0 when the margin exceeds 1, delta
//! when below 1, and interior when exactly 1. This solver enumerates
//! every zero / bound / equality partition of the pairs, solves the
//! equality block by Gaussian elimination, and keeps the best
//! candidate that satisfies all the sign conditions. Exponential in
//! the pair count; intended for K <= 5.

#![allow(dead_code)]

pub struct OracleSolution {
    pub d: Vec<f64>,
    pub objective: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `a x = b` in place; returns None when a pivot collapses.
fn gaussian_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty range");
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let (top, bottom) = a.split_at_mut(row);
            let pivot = &top[col];
            let target = &mut bottom[0];
            let factor = target[col] / pivot[col];
            if factor == 0.0 {
                continue;
            }
            for (t, p) in target[col..].iter_mut().zip(&pivot[col..]) {
                *t -= factor * p;
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

fn objective(d: &[f64], pairs: &[Vec<f64>], delta: f64) -> f64 {
    let quad = 0.5 * dot(d, d);
    let hinge: f64 = pairs.iter().map(|u| (1.0 - dot(d, u)).max(0.0)).sum();
    quad + delta * hinge
}

/// Exact minimizer from the time-ordered prefix-mean vectors.
pub fn solve(means: &[Vec<f64>]) -> OracleSolution {
    let k = means.len();
    assert!(k >= 2, "need at least two prefix means");
    let dim = means[0].len();
    let delta = 2.0 / (k as f64 * (k as f64 - 1.0));

    let mut pairs: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        for j in 0..i {
            pairs.push(means[i].iter().zip(&means[j]).map(|(a, b)| a - b).collect());
        }
    }
    let p = pairs.len();
    let gram: Vec<Vec<f64>> =
        (0..p).map(|a| (0..p).map(|b| dot(&pairs[a], &pairs[b])).collect()).collect();

    let mut best: Option<OracleSolution> = None;
    let total = 3usize.pow(p as u32);
    for code in 0..total {
        // Digit 0: inactive (margin >= 1), 1: saturated (margin <= 1),
        // 2: on the margin (== 1).
        let mut digits = vec![0u8; p];
        let mut c = code;
        for d in digits.iter_mut() {
            *d = (c % 3) as u8;
            c /= 3;
        }
        let bound: Vec<usize> = (0..p).filter(|&i| digits[i] == 1).collect();
        let equal: Vec<usize> = (0..p).filter(|&i| digits[i] == 2).collect();

        let lambda_eq = if equal.is_empty() {
            Vec::new()
        } else {
            let a: Vec<Vec<f64>> =
                equal.iter().map(|&q| equal.iter().map(|&e| gram[e][q]).collect()).collect();
            let b: Vec<f64> = equal
                .iter()
                .map(|&q| 1.0 - delta * bound.iter().map(|&bb| gram[bb][q]).sum::<f64>())
                .collect();
            match gaussian_solve(a, b) {
                Some(x) => x,
                None => continue,
            }
        };
        if lambda_eq.iter().any(|&l| !(-1e-10..=delta + 1e-10).contains(&l)) {
            continue;
        }

        let mut d = vec![0.0; dim];
        for &bb in &bound {
            for (dv, uv) in d.iter_mut().zip(&pairs[bb]) {
                *dv += delta * uv;
            }
        }
        for (&e, &l) in equal.iter().zip(&lambda_eq) {
            for (dv, uv) in d.iter_mut().zip(&pairs[e]) {
                *dv += l * uv;
            }
        }

        let feasible = (0..p).all(|q| {
            let m = dot(&d, &pairs[q]);
            match digits[q] {
                0 => m >= 1.0 - 1e-9,
                1 => m <= 1.0 + 1e-9,
                _ => true,
            }
        });
        if !feasible {
            continue;
        }

        let f = objective(&d, &pairs, delta);
        if best.as_ref().is_none_or(|b| f < b.objective) {
            best = Some(OracleSolution { d, objective: f });
        }
    }
    best.expect("the optimal partition is always enumerated")
}
