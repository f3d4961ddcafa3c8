//! Small dense vector helpers shared across the crate.

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

/// x + t * d
pub fn add_scaled(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), d.len());
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

pub fn clamp_to_box(u: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..u.len() {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }
}

pub fn in_box(u: &[f64], lo: &[f64], hi: &[f64], tol: f64) -> bool {
    u.iter()
        .zip(lo.iter().zip(hi))
        .all(|(&ui, (&l, &h))| ui >= l - tol && ui <= h + tol)
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Deterministic pattern search over a box: full +-1/0 stencil, per-coordinate
/// steps proportional to the box span, halving on stagnation. Points failing
/// `accept` are skipped. Runs until the relative step drops below `h_min`.
pub fn compass_minimize<F, A>(
    f: F,
    accept: A,
    lo: &[f64],
    hi: &[f64],
    start: &[f64],
    h0: f64,
    h_min: f64,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
    A: Fn(&[f64]) -> bool,
{
    let n = start.len();
    let span: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let mut x = start.to_vec();
    clamp_to_box(&mut x, lo, hi);
    let mut fx = f(&x);
    let mut h = h0;
    let stencil = 3usize.pow(n as u32);
    let mut trial = vec![0.0; n];
    while h >= h_min {
        let mut best: Option<(Vec<f64>, f64)> = None;
        for code in 1..stencil {
            let mut c = code;
            let mut nonzero = false;
            for i in 0..n {
                let digit = (c % 3) as i64 - 1;
                c /= 3;
                trial[i] = x[i] + digit as f64 * h * span[i];
                nonzero |= digit != 0;
            }
            if !nonzero {
                continue;
            }
            clamp_to_box(&mut trial, lo, hi);
            if !accept(&trial) {
                continue;
            }
            let ft = f(&trial);
            if ft < best.as_ref().map_or(fx, |(_, b)| *b) {
                best = Some((trial.clone(), ft));
            }
        }
        match best {
            Some((bx, bf)) => {
                x = bx;
                fx = bf;
            }
            None => h *= 0.5,
        }
    }
    (x, fx)
}
