use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, Tensor, Var};

/// Target value marking a padded position.
pub const IGNORE_ID: i64 = -1;

/// Label-smoothed cross entropy, averaged over non-ignored rows.
///
/// The target distribution puts `1 - smoothing` on the true class and spreads
/// `smoothing` uniformly over all `C` classes.
pub fn cross_entropy(
    g: &mut Graph,
    logits: Var,
    targets: &[i64],
    smoothing: f64,
    ignore_id: i64,
) -> Result<Var> {
    let lv = g.value(logits);
    let (n, c) = lv.dims2("cross_entropy")?;
    if targets.len() != n {
        return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::invalid("cross_entropy", format!("smoothing {smoothing} outside [0,1]")));
    }
    let valid = targets.iter().filter(|&&t| t != ignore_id).count();
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    let off = smoothing / c as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt == ignore_id {
            continue;
        }
        if tgt < 0 || tgt as usize >= c {
            return Err(Error::LabelOutOfRange {
                label: tgt.max(0) as usize,
                alphabet: c,
            });
        }
        let row = lv.row(r);
        let z = log_sum_exp(row);
        for (j, &x) in row.iter().enumerate() {
            let q = off + if j == tgt as usize { 1.0 - smoothing } else { 0.0 };
            let lp = x - z;
            if q > 0.0 {
                loss -= q * lp;
            }
            grad[r * c + j] = (lp.exp() - q) / valid as f64;
        }
    }
    let grad = Tensor::new(vec![n, c], grad)?;
    g.scalar_with_grad(logits, loss / valid as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Vec<Vec<f64>>, targets: &[i64], eps: f64) -> Result<f64> {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_rows(&logits).unwrap(), true);
        let out = cross_entropy(&mut g, l, targets, eps, IGNORE_ID)?;
        Ok(g.value(out).item())
    }

    #[test]
    fn uniform_two_class() {
        let v = ce(vec![vec![0.0, 0.0]], &[1], 0.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_is_near_zero() {
        let v = ce(vec![vec![60.0, 0.0]], &[0], 0.0).unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn smoothed_three_class_matches_formula() {
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let lp = [1.0 - lse, 2.0 - lse, 3.0 - lse];
        let want = -(0.9 + 0.1 / 3.0) * lp[2] - (0.1 / 3.0) * (lp[0] + lp[1]);
        let got = ce(vec![vec![1.0, 2.0, 3.0]], &[2], 0.1).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn ignored_rows_do_not_count() {
        let a = ce(vec![vec![0.0, 1.0], vec![5.0, -5.0]], &[1, IGNORE_ID], 0.0).unwrap();
        let b = ce(vec![vec![0.0, 1.0]], &[1], 0.0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(ce(vec![vec![0.0, 1.0]], &[IGNORE_ID], 0.0), Err(Error::AllIgnored)));
        assert!(ce(vec![vec![0.0, 1.0]], &[2], 0.0).is_err());
    }
}
