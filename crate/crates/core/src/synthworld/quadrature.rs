//! Adaptive Simpson quadrature on bounded intervals, nested for two dimensions.

const MAX_DEPTH: u32 = 40;

fn simpson_step<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Integral of `f` over `[a, b]` to absolute tolerance `tol`, starting from
/// `panels` equal sub-intervals.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let panel_tol = tol / panels as f64;
    let mut total = 0.0;
    let mut x0 = a;
    let mut f0 = f(x0);
    for i in 0..panels {
        let x1 = if i + 1 == panels { b } else { a + h * (i + 1) as f64 };
        let xm = 0.5 * (x0 + x1);
        let (fm, f1) = (f(xm), f(x1));
        let whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
        total += simpson_step(&mut f, x0, x1, f0, fm, f1, whole, panel_tol, MAX_DEPTH);
        x0 = x1;
        f0 = f1;
    }
    total
}

/// Integral of `f(u, v)` over the square `[a, b]^2`.
pub fn integrate_2d<F: FnMut(f64, f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, panels: usize) -> f64 {
    let inner_tol = tol / (10.0 * (b - a));
    integrate(
        |u| integrate(|v| f(u, v), a, b, inner_tol, panels),
        a,
        b,
        tol,
        panels,
    )
}
