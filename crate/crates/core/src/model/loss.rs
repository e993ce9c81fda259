use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub lambda_recall: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_focal: 1.0,
            lambda_dice: 1.0,
            lambda_recall: 1.0,
            alpha: 0.75,
            gamma: 2.0,
            eps: 1e-6,
        }
    }
}

/// Handles to the total loss and its three terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub focal: Var,
    pub dice: Var,
    pub recall: Var,
}

/// Focal + soft Dice + recall loss on node logits `[N, 1]` (or `[N]`).
pub fn compound_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let n = tape.value(logits).numel();
    if n == 0 || labels.len() != n {
        return Err(Error::shape(format!(
            "loss over {n} logits and {} labels",
            labels.len()
        )));
    }
    let shape = tape.shape(logits).to_vec();
    let c = |t: &mut Tape<T>, f: &dyn Fn(u8) -> f64| {
        t.constant(Tensor::from_fn(&shape, |i| T::from_f64(f(labels[i]))))
    };
    let sign = c(tape, &|y| if y == 1 { 1.0 } else { -1.0 });
    let alpha_t = c(tape, &|y| if y == 1 { cfg.alpha } else { 1.0 - cfg.alpha });
    let y = c(tape, &|y| y as f64);

    let sx = tape.mul(logits, sign)?;
    let log_pt = tape.log_sigmoid(sx);
    let neg = tape.affine(sx, T::from_f64(-1.0), T::zero());
    let one_minus_pt = tape.sigmoid(neg);
    let weighted = if cfg.gamma == 0.0 {
        tape.mul(log_pt, alpha_t)?
    } else {
        let modulating = tape.powf(one_minus_pt, T::from_f64(cfg.gamma));
        let m = tape.mul(modulating, alpha_t)?;
        tape.mul(m, log_pt)?
    };
    let mean = tape.mean(weighted);
    let focal = tape.affine(mean, T::from_f64(-1.0), T::zero());

    let eps = T::from_f64(cfg.eps);
    let p = tape.sigmoid(logits);
    let py = tape.mul(p, y)?;
    let inter = tape.sum(py);
    let sum_p = tape.sum(p);
    let sum_y = T::from_f64(labels.iter().map(|&l| l as f64).sum());

    let num = tape.affine(inter, T::from_f64(2.0), eps);
    let den = tape.affine(sum_p, T::one(), sum_y + eps);
    let inv = tape.powf(den, T::from_f64(-1.0));
    let ratio = tape.mul(num, inv)?;
    let dice = tape.affine(ratio, T::from_f64(-1.0), T::one());

    let rnum = tape.affine(inter, T::one(), eps);
    let rratio = tape.affine(rnum, T::one() / (sum_y + eps), T::zero());
    let recall = tape.affine(rratio, T::from_f64(-1.0), T::one());

    let f = tape.affine(focal, T::from_f64(cfg.lambda_focal), T::zero());
    let d = tape.affine(dice, T::from_f64(cfg.lambda_dice), T::zero());
    let r = tape.affine(recall, T::from_f64(cfg.lambda_recall), T::zero());
    let fd = tape.add(f, d)?;
    let total = tape.add(fd, r)?;
    Ok(LossParts {
        total,
        focal,
        dice,
        recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(logits: &[f64], labels: &[u8], cfg: &LossConfig) -> [f64; 4] {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![logits.len(), 1], logits.to_vec()).unwrap());
        let l = compound_loss(&mut t, x, labels, cfg).unwrap();
        [l.total, l.focal, l.dice, l.recall].map(|v| t.value(v).item())
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let r = eval(&[40.0, -40.0, 40.0, -40.0], &[1, 0, 1, 0], &LossConfig::default());
        assert!(r.iter().all(|v| v.abs() < 1e-6), "{r:?}");
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let cfg = LossConfig {
            alpha: 0.5,
            gamma: 0.0,
            ..LossConfig::default()
        };
        let logits = [0.3, -1.2, 2.0, 0.0, -0.4];
        let labels = [1, 0, 0, 1, 1];
        let bce: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x as f64).exp());
                if y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 5.0;
        let r = eval(&logits, &labels, &cfg);
        assert!((r[1] - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn no_positives_means_zero_recall_term() {
        let r = eval(&[0.5, -0.3, 1.0], &[0, 0, 0], &LossConfig::default());
        assert!(r[3].abs() < 1e-12);
    }

    #[test]
    fn terms_match_direct_formulas() {
        let cfg = LossConfig::default();
        let logits = [0.7, -0.2, 1.5, -2.0];
        let labels = [1u8, 1, 0, 0];
        let p: Vec<f64> = logits.iter().map(|&x: &f64| 1.0 / (1.0 + (-x).exp())).collect();
        let inter: f64 = p.iter().zip(&labels).map(|(p, &y)| p * y as f64).sum();
        let sp: f64 = p.iter().sum();
        let dice = 1.0 - (2.0 * inter + 1e-6) / (sp + 2.0 + 1e-6);
        let recall = 1.0 - (inter + 1e-6) / (2.0 + 1e-6);
        let focal: f64 = p
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let (pt, at) = if y == 1 { (p, 0.75) } else { (1.0 - p, 0.25) };
                -at * (1.0 - pt).powi(2) * pt.ln()
            })
            .sum::<f64>()
            / 4.0;
        let r = eval(&logits, &labels, &cfg);
        assert!((r[1] - focal).abs() < 1e-12);
        assert!((r[2] - dice).abs() < 1e-12);
        assert!((r[3] - recall).abs() < 1e-12);
        assert!((r[0] - focal - dice - recall).abs() < 1e-12);
    }

    #[test]
    fn mismatched_or_empty_input_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[3, 1]));
        assert!(compound_loss(&mut t, x, &[1, 0], &LossConfig::default()).is_err());
        let e = t.constant(Tensor::zeros(&[0, 1]));
        assert!(compound_loss(&mut t, e, &[], &LossConfig::default()).is_err());
    }
}
