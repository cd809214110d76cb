//! Adaptive Simpson quadrature.

/// `∫_a^b f` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 50)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let v = integrate(|x| x * x * x - 2.0 * x, 0.0, 3.0, 1e-12);
        assert!((v - (81.0 / 4.0 - 9.0)).abs() < 1e-12);
    }

    #[test]
    fn smooth_integrands() {
        assert!((integrate(f64::exp, 0.0, 1.0, 1e-11) - (std::f64::consts::E - 1.0)).abs() < 1e-10);
        let cauchy = |x: f64| 1.0 / (std::f64::consts::PI * (1.0 + x * x));
        assert!((integrate(cauchy, 0.0, 1.0, 1e-12) - 0.25).abs() < 1e-11);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let a = integrate(|x| x.sin(), 0.0, 2.0, 1e-10);
        let b = integrate(|x| x.sin(), 2.0, 0.0, 1e-10);
        assert!((a + b).abs() < 1e-12);
    }
}
