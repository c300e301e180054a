use super::schedule::loss_coefficients;
use crate::error::{shape_err, Result};
use crate::model::net::Outputs;
use crate::tensor::Var;

pub const DICE_EPS: f64 = 1.0;

/// `MSE(σ(pred), label) + soft Dice loss`, Dice averaged over classes.
/// `pred` and `label` are `[K×H×W]`.
pub fn branch_loss<'t>(pred: Var<'t>, label: Var<'t>) -> Result<Var<'t>> {
    let s = pred.shape();
    if s != label.shape() || s.len() != 3 {
        return shape_err("branch_loss", &s, &label.shape());
    }
    let (k, n) = (s[0], s[1] * s[2]);
    let p = pred.sigmoid();
    let mse = p.sub(label)?.square().mean();
    let p = p.reshape(&[k, n])?;
    let g = label.reshape(&[k, n])?;
    let nf = n as f64;
    let inter = p.mul(g)?.mean_last().scale(2.0 * nf).add_scalar(DICE_EPS);
    let denom = p
        .mean_last()
        .add(g.mean_last())?
        .scale(nf)
        .add_scalar(DICE_EPS);
    let dice = inter.div(denom)?.neg().add_scalar(1.0).mean();
    mse.add(dice)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub tec: Var<'t>,
    pub cnn: Var<'t>,
    pub trans: Var<'t>,
}

impl LossParts<'_> {
    /// `[total, tec, cnn, trans]`.
    pub fn values(&self) -> [f64; 4] {
        [
            self.total.item(),
            self.tec.item(),
            self.cnn.item(),
            self.trans.item(),
        ]
    }
}

/// `λ·L_tec + (1−λ)/2·(L_cnn + L_trans)`.
pub fn total_loss<'t>(out: &Outputs<'t>, label: Var<'t>, lambda: f64) -> Result<LossParts<'t>> {
    let tec = branch_loss(out.y_tec, label)?;
    let cnn = branch_loss(out.y_cnn, label)?;
    let trans = branch_loss(out.y_trans, label)?;
    let [a, b, c] = loss_coefficients(lambda);
    let total = tec.scale(a).add(cnn.scale(b))?.add(trans.scale(c))?;
    Ok(LossParts {
        total,
        tec,
        cnn,
        trans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let tape = Tape::new();
        let label = t(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let pred = t(&[1, 4, 4], |i| if i % 3 == 0 { 20.0 } else { -20.0 });
        let l = branch_loss(tape.leaf(pred), tape.constant(label)).unwrap();
        assert!(l.item() < 1e-3, "{}", l.item());
    }

    #[test]
    fn half_probability_closed_form() {
        let tape = Tape::new();
        let n = 64;
        let label = t(&[1, 8, 8], |i| (i < n / 2) as u8 as f64);
        let l = branch_loss(tape.leaf(Tensor::zeros(&[1, 8, 8])), tape.constant(label)).unwrap();
        // Σpg = 16, Σp = 32, Σg = 32
        let dice = 1.0 - (2.0 * 16.0 + 1.0) / (32.0 + 32.0 + 1.0);
        assert!((l.item() - (0.25 + dice)).abs() < 1e-12);
    }

    #[test]
    fn empty_label_and_prediction() {
        let tape = Tape::new();
        let pred = t(&[1, 4, 4], |_| -40.0);
        let l = branch_loss(tape.leaf(pred), tape.constant(Tensor::zeros(&[1, 4, 4]))).unwrap();
        assert!(l.item() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 3]));
        assert!(branch_loss(a, b).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let label = t(&[2, 3, 3], |i| (i % 4 < 2) as u8 as f64);
        let pred = t(&[2, 3, 3], |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
        let r = crate::tensor::grad_check(
            |v| {
                let g = v.tape().constant(label.clone());
                branch_loss(v, g)
            },
            &pred,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn total_is_convex_combination() {
        let tape = Tape::new();
        let label = tape.constant(t(&[1, 4, 4], |i| (i < 5) as u8 as f64));
        let y = tape.leaf(t(&[1, 4, 4], |i| i as f64 / 8.0 - 1.0));
        let out = Outputs {
            y_cnn: y,
            y_trans: y,
            y_tec: y,
            cnn_stages: vec![],
            trans_stages: vec![],
        };
        let v = branch_loss(y, label).unwrap().item();
        for lambda in [0.0, 0.3, 1.0] {
            let p = total_loss(&out, label, lambda).unwrap();
            assert!((p.total.item() - v).abs() < 1e-12);
        }
        let y2 = tape.leaf(t(&[1, 4, 4], |i| 1.0 - i as f64 / 8.0));
        let out2 = Outputs { y_cnn: y2, ..out };
        let p = total_loss(&out2, label, 1.0).unwrap();
        assert_eq!(p.total.item(), p.tec.item());
        assert!(p.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
