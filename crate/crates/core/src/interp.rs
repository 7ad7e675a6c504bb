//! Local cubic Hermite interpolation on an ascending, possibly non-uniform grid.

use num_complex::Complex64;

/// Index `k` with `xs[k] <= x <= xs[k + 1]`, or `None` outside the grid.
pub(crate) fn bracket(xs: &[f64], x: f64) -> Option<usize> {
    if xs.len() < 2 || x < xs[0] || x > xs[xs.len() - 1] {
        return None;
    }
    let k = xs.partition_point(|&v| v <= x);
    Some(k.saturating_sub(1).min(xs.len() - 2))
}

fn slope(xs: &[f64], ys: &[Complex64], k: usize) -> Complex64 {
    let n = xs.len();
    if n == 1 {
        return Complex64::new(0.0, 0.0);
    }
    if n == 2 {
        return (ys[1] - ys[0]) / (xs[1] - xs[0]);
    }
    if k == 0 {
        return end_slope(xs[0], xs[1], xs[2], ys[0], ys[1], ys[2]);
    }
    if k == n - 1 {
        return end_slope(
            xs[n - 1],
            xs[n - 2],
            xs[n - 3],
            ys[n - 1],
            ys[n - 2],
            ys[n - 3],
        );
    }
    // three-point derivative, second order on non-uniform grids
    let h0 = xs[k] - xs[k - 1];
    let h1 = xs[k + 1] - xs[k];
    let d0 = (ys[k] - ys[k - 1]) / h0;
    let d1 = (ys[k + 1] - ys[k]) / h1;
    (d0 * h1 + d1 * h0) / (h0 + h1)
}

/// Derivative at `x0` of the parabola through three points.
fn end_slope(x0: f64, x1: f64, x2: f64, y0: Complex64, y1: Complex64, y2: Complex64) -> Complex64 {
    let h1 = x1 - x0;
    let h2 = x2 - x0;
    let d1 = (y1 - y0) / h1;
    let d2 = (y2 - y0) / h2;
    (d1 * h2 - d2 * h1) / (h2 - h1)
}

/// Cubic Hermite value at `x`; the stencil spans `xs[k-1..=k+2]`.
/// Returns the stencil's first index alongside so callers can check validity.
pub(crate) fn cubic(xs: &[f64], ys: &[Complex64], x: f64) -> Option<(Complex64, usize, usize)> {
    let k = bracket(xs, x)?;
    let h = xs[k + 1] - xs[k];
    let s = (x - xs[k]) / h;
    let m0 = slope(xs, ys, k) * h;
    let m1 = slope(xs, ys, k + 1) * h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let value = ys[k] * h00 + m0 * h10 + ys[k + 1] * h01 + m1 * h11;
    Some((value, k.saturating_sub(1), (k + 2).min(xs.len() - 1)))
}
