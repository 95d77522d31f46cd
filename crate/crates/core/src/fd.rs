//! Central finite differences over price vectors, used as the independent
//! oracle for the analytic gradient and Hessian.

use crate::demand::Prices;

/// Central difference gradient of `f` at `p` with step `h` per coordinate.
pub fn gradient<F>(f: F, p: &Prices, h: f64) -> Vec<f64>
where
    F: Fn(&Prices) -> f64,
{
    (0..p.len())
        .map(|j| {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.0[j] += h;
            lo.0[j] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

/// Central difference Jacobian of a vector field `g` at `p`; for
/// g = grad phi this is the Hessian of phi, column l = d(g)/d(p_l).
pub fn jacobian<G>(g: G, p: &Prices, h: f64) -> Vec<Vec<f64>>
where
    G: Fn(&Prices) -> Vec<f64>,
{
    let m = p.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for l in 0..m {
        let mut hi = p.clone();
        let mut lo = p.clone();
        hi.0[l] += h;
        lo.0[l] -= h;
        let ghi = g(&hi);
        let glo = g(&lo);
        cols.push((0..m).map(|j| (ghi[j] - glo[j]) / (2.0 * h)).collect());
    }
    // transpose columns into rows
    (0..m).map(|j| (0..m).map(|l| cols[l][j]).collect()).collect()
}
