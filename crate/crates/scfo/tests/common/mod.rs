//! Shared test oracles, independent of the library's solver paths.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scfo::qp::LinearSystem;

/// Exact brute-force oracle for `min ||x - x0||^2 s.t. A x <= b`: enumerate
/// candidate active sets of size <= n, solve the equality-constrained
/// problem for each, and keep the best KKT-consistent candidate.
pub fn enumeration_projection(x0: &[f64], sys: &LinearSystem) -> Option<(Vec<f64>, f64)> {
    let n = sys.n_vars();
    let m = sys.n_rows();
    assert!(m <= 20, "enumeration oracle limited to small systems");
    let mut best: Option<(Vec<f64>, f64)> = None;

    let feasible = |x: &[f64]| -> bool {
        (0..m).all(|i| dot(sys.row(i), x) - sys.rhs(i) <= 1e-8)
    };

    for mask in 0u32..(1 << m) {
        let size = mask.count_ones() as usize;
        if size > n {
            continue;
        }
        let subset: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let x = if subset.is_empty() {
            x0.to_vec()
        } else {
            // lambda solves (A_S A_S') lambda = A_S x0 - b_S, x = x0 - A_S' lambda
            let k = subset.len();
            let mut gram = vec![0.0; k * k];
            let mut rhs = vec![0.0; k];
            for (p, &i) in subset.iter().enumerate() {
                for (q, &j) in subset.iter().enumerate() {
                    gram[p * k + q] = dot(sys.row(i), sys.row(j));
                }
                rhs[p] = dot(sys.row(i), x0) - sys.rhs(i);
            }
            let Some(lambda) = solve_dense(&mut gram, &mut rhs, k) else {
                continue;
            };
            if lambda.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let mut x = x0.to_vec();
            for (p, &i) in subset.iter().enumerate() {
                for c in 0..n {
                    x[c] -= lambda[p] * sys.row(i)[c];
                }
            }
            x
        };
        if !feasible(&x) {
            continue;
        }
        let obj: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |(_, b)| obj < *b - 0.0) {
            best = Some((x, obj));
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-11 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[r * n + c] * x[c];
        }
        x[r] = s / a[r * n + r];
    }
    Some(x)
}

/// Random strictly feasible inequality system (anchored at a hidden interior
/// point) together with a projection target.
pub fn random_feasible_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
) -> (Vec<f64>, LinearSystem) {
    let anchor: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sys = LinearSystem::new(n);
    for _ in 0..m {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let margin: f64 = rng.random_range(0.05..1.0);
        let rhs = dot(&row, &anchor) + margin;
        sys.push_row(&row, rhs);
    }
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    (x0, sys)
}

/// A random gradient box instance for semi-infinite feasibility tests.
pub struct RandomCone {
    pub u_k: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// (box_lo, box_hi, delta) per descent row.
    pub rows: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

pub fn random_cone(rng: &mut ChaCha8Rng, n_u: usize, n_rows: usize) -> RandomCone {
    let u_k: Vec<f64> = (0..n_u).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lo: Vec<f64> = u_k.iter().map(|u| u - rng.random_range(0.2..1.0)).collect();
    let hi: Vec<f64> = u_k.iter().map(|u| u + rng.random_range(0.2..1.0)).collect();
    let mut rows = Vec::new();
    for _ in 0..n_rows {
        let est: Vec<f64> = (0..n_u).map(|_| rng.random_range(-1.0..1.0)).collect();
        let width: Vec<f64> = (0..n_u).map(|_| rng.random_range(0.0..0.8)).collect();
        let blo: Vec<f64> = est.iter().zip(&width).map(|(e, w)| e - w).collect();
        let bhi: Vec<f64> = est.iter().zip(&width).map(|(e, w)| e + w).collect();
        let delta = rng.random_range(1e-3..0.4);
        rows.push((blo, bhi, delta));
    }
    RandomCone { u_k, lo, hi, rows }
}

/// Vertex-enumerated finite system equivalent to the semi-infinite cone:
/// one halfspace per sign pattern of every row's gradient box.
pub fn vertex_system(cone: &RandomCone) -> LinearSystem {
    let n = cone.u_k.len();
    let mut sys = LinearSystem::new(n);
    for (blo, bhi, delta) in &cone.rows {
        for bits in 0..(1u32 << n) {
            let g: Vec<f64> = (0..n)
                .map(|i| if bits & (1 << i) != 0 { bhi[i] } else { blo[i] })
                .collect();
            let rhs = dot(&g, &cone.u_k) - delta;
            sys.push_row(&g, rhs);
        }
    }
    sys.push_box(&cone.lo, &cone.hi);
    sys
}
