//! Training objectives, as plain functions over slices and as graph
//! builders for training.

use cardio_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Focusing exponents and probability margin of the asymmetric loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsymmetricLossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub tau: f64,
}

impl Default for AsymmetricLossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            tau: 0.05,
        }
    }
}

impl AsymmetricLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= self.gamma_pos && (0.0..1.0).contains(&self.tau)) {
            return Err(CoreError::Config(format!(
                "asymmetric loss needs 0 <= gamma_pos <= gamma_neg and tau in [0, 1), got {self:?}"
            )));
        }
        Ok(())
    }

    /// Plain binary cross-entropy.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            tau: 0.0,
        }
    }
}

fn same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(CoreError::Contract(format!("{what}: lengths {a} and {b} differ")))
    }
}

fn weighted_sq_error(x: &[f64], x_hat: &[f64], sigma: &[f64]) -> Result<f64> {
    same_len("restoration", x.len(), x_hat.len())?;
    same_len("restoration", x.len(), sigma.len())?;
    let mut acc = 0.0;
    for ((a, b), s) in x.iter().zip(x_hat).zip(sigma) {
        if !(*s > 0.0) {
            return Err(CoreError::Contract(format!("uncertainty must be positive, got {s}")));
        }
        acc += (a - b) * (a - b) / s + s.ln();
    }
    Ok(acc)
}

/// Uncertainty-weighted restoration loss summed over the global strip and
/// the local beat. Pass empty local slices for global-only samples.
pub fn loss_res(
    x_g: &[f64],
    x_hat_g: &[f64],
    sigma_g: &[f64],
    x_l: &[f64],
    x_hat_l: &[f64],
    sigma_l: &[f64],
) -> Result<f64> {
    Ok(weighted_sq_error(x_g, x_hat_g, sigma_g)? + weighted_sq_error(x_l, x_hat_l, sigma_l)?)
}

/// Squared Euclidean distance between the strip and its trend-branch
/// reconstruction.
pub fn loss_trend(x_g: &[f64], x_hat_t: &[f64]) -> Result<f64> {
    same_len("trend", x_g.len(), x_hat_t.len())?;
    Ok(x_g.iter().zip(x_hat_t).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean squared attribute error.
pub fn loss_pred(t: &[f64], t_hat: &[f64]) -> Result<f64> {
    same_len("attributes", t.len(), t_hat.len())?;
    if t.is_empty() {
        return Err(CoreError::Contract("attribute vector is empty".into()));
    }
    Ok(t.iter().zip(t_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64)
}

pub fn loss_ad(res: f64, trend: f64, pred: f64, alpha: f64, beta: f64) -> f64 {
    res + alpha * trend + beta * pred
}

/// Asymmetric multi-label loss. Negatives are scored on the shifted
/// probability `max(p - tau, 0)` in both the focusing weight and the log, so
/// negatives below the margin contribute nothing.
pub fn loss_cls(y: &[f64], y_hat: &[f64], cfg: &AsymmetricLossConfig) -> Result<f64> {
    same_len("classification", y.len(), y_hat.len())?;
    let mut acc = 0.0;
    for (&t, &p) in y.iter().zip(y_hat) {
        if !(p > 0.0 && p < 1.0) {
            return Err(CoreError::Contract(format!("probability {p} outside (0, 1)")));
        }
        if t != 0.0 && t != 1.0 {
            return Err(CoreError::Contract(format!("label {t} is not 0 or 1")));
        }
        if t == 1.0 {
            acc -= (1.0 - p).powf(cfg.gamma_pos) * p.ln();
        } else {
            let pm = (p - cfg.tau).max(0.0);
            if pm > 0.0 {
                acc -= pm.powf(cfg.gamma_neg) * (1.0 - pm).ln();
            }
        }
    }
    Ok(acc)
}

/// Graph versions of the objectives. Targets enter as constants.
pub mod graph {
    use super::*;

    fn target(g: &mut Graph, values: &[f64], like: Var) -> Result<Var> {
        let shape = g.shape(like).to_vec();
        Ok(g.constant(Tensor::new(shape, values.to_vec())?))
    }

    /// `sum((x - x_hat)^2 / sigma + ln sigma)` for one scale; `sigma = None`
    /// means unit uncertainty.
    pub fn restoration(g: &mut Graph, x: &[f64], x_hat: Var, sigma: Option<Var>) -> Result<Var> {
        let t = target(g, x, x_hat)?;
        let diff = g.sub(t, x_hat)?;
        let sq = g.square(diff);
        match sigma {
            Some(s) => {
                let w = g.div(sq, s)?;
                let ls = g.log(s);
                let terms = g.add(w, ls)?;
                Ok(g.sum(terms))
            }
            None => Ok(g.sum(sq)),
        }
    }

    pub fn trend(g: &mut Graph, x: &[f64], x_hat_t: Var) -> Result<Var> {
        restoration(g, x, x_hat_t, None)
    }

    pub fn pred(g: &mut Graph, t: &[f64], t_hat: Var) -> Result<Var> {
        if t.is_empty() {
            return Err(CoreError::Contract("attribute vector is empty".into()));
        }
        let tv = target(g, t, t_hat)?;
        let diff = g.sub(tv, t_hat)?;
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    pub fn ad(g: &mut Graph, res: Var, trend: Var, pred: Var, alpha: f64, beta: f64) -> Result<Var> {
        let t = g.scale(trend, alpha);
        let p = g.scale(pred, beta);
        let s = g.add(res, t)?;
        Ok(g.add(s, p)?)
    }

    /// Asymmetric loss on class probabilities `probs` (any shape with
    /// `y.len()` elements).
    pub fn cls(g: &mut Graph, y: &[f64], probs: Var, cfg: &AsymmetricLossConfig) -> Result<Var> {
        let pos = target(g, y, probs)?;
        let neg_w: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let neg = target(g, &neg_w, probs)?;

        let one_minus = g.neg(probs);
        let one_minus = g.add_scalar(one_minus, 1.0);
        let focus = g.powf(one_minus, cfg.gamma_pos);
        let logp = g.log(probs);
        let pos_term = g.mul(focus, logp)?;
        let pos_term = g.mul(pos_term, pos)?;

        let shifted = g.add_scalar(probs, -cfg.tau);
        let shifted = g.relu(shifted);
        let focus_n = g.powf(shifted, cfg.gamma_neg);
        let rest = g.neg(shifted);
        let rest = g.add_scalar(rest, 1.0);
        let log_rest = g.log(rest);
        let neg_term = g.mul(focus_n, log_rest)?;
        let neg_term = g.mul(neg_term, neg)?;

        let both = g.add(pos_term, neg_term)?;
        let total = g.sum(both);
        Ok(g.neg(total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let v = loss_res(&[1.0], &[0.0], &[2.0], &[], &[], &[]).unwrap();
        assert!((v - (0.5 + 2f64.ln())).abs() < 1e-15);
        assert_eq!(loss_res(&[0.3, -1.0], &[0.3, -1.0], &[1.0, 1.0], &[2.0], &[2.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(loss_trend(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(loss_pred(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        let cfg = AsymmetricLossConfig {
            gamma_pos: 1.0,
            ..Default::default()
        };
        assert!((loss_cls(&[1.0], &[0.5], &cfg).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss_cls(&[0.0], &[0.03], &AsymmetricLossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn optimal_sigma() {
        let e: f64 = 0.7;
        let v = loss_res(&[e], &[0.0], &[e * e], &[], &[], &[]).unwrap();
        assert!((v - (1.0 + (e * e).ln())).abs() < 1e-14);
    }

    #[test]
    fn contract_errors() {
        assert!(loss_res(&[1.0], &[1.0], &[0.0], &[], &[], &[]).is_err());
        assert!(loss_trend(&[1.0], &[]).is_err());
        assert!(loss_pred(&[], &[]).is_err());
        assert!(loss_cls(&[1.0], &[1.0], &AsymmetricLossConfig::default()).is_err());
        assert!(AsymmetricLossConfig {
            gamma_pos: 2.0,
            gamma_neg: 1.0,
            tau: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn graph_matches_plain() {
        let y = [1.0, 0.0, 0.0, 1.0];
        let p = [0.7, 0.2, 0.04, 0.3];
        let cfg = AsymmetricLossConfig::default();
        let mut g = Graph::new();
        let pv = g.input(Tensor::vector(p.to_vec()));
        let l = graph::cls(&mut g, &y, pv, &cfg).unwrap();
        assert!((g.item(l).unwrap() - loss_cls(&y, &p, &cfg).unwrap()).abs() < 1e-14);

        let x = [0.5, -0.2, 1.0];
        let xh = [0.1, 0.0, 0.9];
        let s = [0.3, 1.2, 2.0];
        let mut g = Graph::new();
        let xv = g.input(Tensor::vector(xh.to_vec()));
        let sv = g.input(Tensor::vector(s.to_vec()));
        let l = graph::restoration(&mut g, &x, xv, Some(sv)).unwrap();
        assert!((g.item(l).unwrap() - loss_res(&x, &xh, &s, &[], &[], &[]).unwrap()).abs() < 1e-14);
    }
}
