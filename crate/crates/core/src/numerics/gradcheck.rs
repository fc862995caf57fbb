use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which errors are measured absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares autodiff gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh graph from the input leaf and returns the
/// scalar output.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, true);
        let o = f(&mut g, v)?;
        let val = g.value(o);
        if val.len() != 1 {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < tol && max_rel_error.is_finite(),
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_matmul_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let r = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let rep = grad_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let rv = g.constant(r.clone());
                let y = g.matmul(x, wv)?;
                let p = g.softmax(y, 1)?;
                let z = g.mul(p, rv)?;
                Ok(g.sum(z))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_error);
    }

    #[test]
    fn wrong_gradient_rule_is_caught() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let rep = grad_check(
            |g, x| {
                let v: f64 = g.value(x).data().iter().map(|a| a * a).sum();
                // deliberately report d/dx = x instead of 2x
                let wrong = g.value(x).clone();
                g.scalar_with_grad(x, v, wrong)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn layer_norm_at_constant_input_passes() {
        let x = Tensor::full(&[2, 5], 0.7);
        let r = Tensor::vector(vec![0.3, -0.2, 0.9, 1.1, -0.4]);
        let rw = Tensor::new(vec![2, 5], [r.data(), r.data()].concat()).unwrap();
        let rep = grad_check(
            |g, x| {
                let gamma = g.constant(Tensor::vector(vec![1.0, 0.5, 2.0, -1.0, 0.3]));
                let beta = g.constant(Tensor::zeros(&[5]));
                let y = g.layer_norm(x, gamma, beta)?;
                let rv = g.constant(rw.clone());
                let z = g.mul(y, rv)?;
                Ok(g.sum(z))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_error);
    }
}
