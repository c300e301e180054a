use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'a> Fn(Var<'a>) -> Result<Var<'a>>,
{
    let tape = Tape::new();
    let out = f(tape.leaf(x.clone()))?;
    if out.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Checks every coordinate of `x`. Error per coordinate is
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradReport>
where
    F: for<'a> Fn(Var<'a>) -> Result<Var<'a>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, tol, &coords)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f64, tol: f64, coords: &[usize]) -> Result<GradReport>
where
    F: for<'a> Fn(Var<'a>) -> Result<Var<'a>>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Usage(format!(
            "finite-difference step {h} outside [1e-6, 1e-2]"
        )));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(xv);

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tol,
        checked: coords.len(),
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ad = analytic[i];
        let err = (ad - num).abs() / 1f64.max(ad.abs()).max(num.abs());
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
            report.analytic = ad;
            report.numeric = num;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_is_tight() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let rep = grad_check(|v| Ok(v.square().sum()), &x, 1e-4, 1e-8).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn softmax_matmul_chain() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.3, 0.2, -0.7]).unwrap();
        let rep = grad_check(
            |v| {
                let w = v.tape().constant(
                    Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.2, 0.8]).unwrap(),
                );
                let s = v.matmul(w)?.softmax(1)?;
                let t = s.matmul(v.slice(0, 0, 2)?)?;
                Ok(t.square().sum())
            },
            &x,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, 1.5, -2.0]).unwrap();
        let rep = grad_check(
            |v| {
                let val = v.value();
                let y = Tensor::new(vec![3], val.data().iter().map(|a| a * a).collect())?;
                let xs = val.data().to_vec();
                // deliberately off by a factor of two: d(x²)/dx reported as x
                let sq = v.tape().custom(&[v], y, move |g| {
                    vec![g.iter().zip(&xs).map(|(g, a)| g * a).collect()]
                });
                Ok(sq.sum())
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed());
        assert!(rep.max_rel_err > 1e-4);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|v| Ok(v.sum()), &x, 0.1, 1e-4).is_err());
    }
}
