//! Central finite differences used when a model does not supply analytic
//! derivatives.

use nalgebra::{DMatrix, DVector};

use super::Derivs;

fn first_step(x: f64) -> f64 {
    f64::max(1e-6, 1e-6 * x.abs())
}

fn second_step(x: f64) -> f64 {
    f64::max(1e-4, 1e-4 * x.abs())
}

pub fn gradient<F: Fn(&[f64]) -> f64>(f: F, z: &[f64]) -> DVector<f64> {
    let mut work = z.to_vec();
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|i| {
            let h = first_step(z[i]);
            work[i] = z[i] + h;
            let fp = f(&work);
            work[i] = z[i] - h;
            let fm = f(&work);
            work[i] = z[i];
            (fp - fm) / (2.0 * h)
        }),
    )
}

pub fn hessian<F: Fn(&[f64]) -> f64>(f: F, z: &[f64]) -> DMatrix<f64> {
    let n = z.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut work = z.to_vec();
    let f0 = f(z);
    for i in 0..n {
        let hi = second_step(z[i]);
        work[i] = z[i] + hi;
        let fp = f(&work);
        work[i] = z[i] - hi;
        let fm = f(&work);
        work[i] = z[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..n {
            let hj = second_step(z[j]);
            let mut corner = |si: f64, sj: f64| {
                work[i] = z[i] + si * hi;
                work[j] = z[j] + sj * hj;
                let v = f(&work);
                work[i] = z[i];
                work[j] = z[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

pub fn derivs<F: Fn(&[f64]) -> f64>(f: F, z: &[f64]) -> Derivs {
    Derivs {
        value: f(z),
        grad: gradient(&f, z),
        hess: hessian(&f, z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_polynomial() {
        let f = |z: &[f64]| z[0].powi(3) + 2.0 * z[0] * z[1] - z[1] * z[1];
        let d = derivs(f, &[1.5, -0.5]);
        assert!((d.grad[0] - (3.0 * 2.25 - 1.0)).abs() < 1e-8);
        assert!((d.grad[1] - (3.0 + 1.0)).abs() < 1e-8);
        assert!((d.hess[(0, 0)] - 9.0).abs() < 1e-5);
        assert!((d.hess[(0, 1)] - 2.0).abs() < 1e-6);
        assert!((d.hess[(1, 1)] + 2.0).abs() < 1e-6);
    }
}
