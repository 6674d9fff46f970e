//! Pixel-wise regression losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::SaliencyMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/N) Σ exp(-ŷ) (y - ŷ)²`
    EwMse,
    Mse,
}

impl LossKind {
    /// Loss and `dloss/dpred` over equally shaped tensors, averaged over
    /// every element.
    pub fn evaluate(self, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        target.expect_shape(pred.shape())?;
        let (loss, grad) = loss_and_grad(self, pred.data(), target.data())?;
        Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::EwMse => "ew-mse",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ew-mse" | "ew_mse" => Ok(LossKind::EwMse),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected ew-mse or mse)"))),
        }
    }
}

fn loss_and_grad(kind: LossKind, pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(Error::Shape("loss over an empty map".into()));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss input".into()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let d = y - p;
        match kind {
            LossKind::EwMse => {
                let w = (-p).exp();
                loss += w * d * d;
                grad.push(w * (-d * d - 2.0 * d) / n);
            }
            LossKind::Mse => {
                loss += d * d;
                grad.push(-2.0 * d / n);
            }
        }
    }
    Ok((loss / n, grad))
}

fn on_maps(kind: LossKind, pred: &SaliencyMap, target: &SaliencyMap) -> Result<(f64, SaliencyMap)> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    let (loss, grad) = loss_and_grad(kind, pred.data(), target.data())?;
    Ok((loss, SaliencyMap::new(pred.height(), pred.width(), grad)?))
}

/// Exponentially weighted MSE: errors where the prediction is high weigh less.
pub fn ew_mse(pred: &SaliencyMap, target: &SaliencyMap) -> Result<(f64, SaliencyMap)> {
    on_maps(LossKind::EwMse, pred, target)
}

pub fn mse(pred: &SaliencyMap, target: &SaliencyMap) -> Result<(f64, SaliencyMap)> {
    on_maps(LossKind::Mse, pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> SaliencyMap {
        SaliencyMap::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn closed_forms() {
        assert!((ew_mse(&one(0.0), &one(1.0)).unwrap().0 - 1.0).abs() < 1e-12);
        assert!((ew_mse(&one(1.0), &one(0.0)).unwrap().0 - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(mse(&one(0.0), &one(1.0)).unwrap().0, 1.0);
        assert_eq!(mse(&one(1.0), &one(0.0)).unwrap().0, 1.0);
    }

    #[test]
    fn exact_fit_is_zero_with_zero_gradient() {
        let m = SaliencyMap::from_fn(3, 4, |r, c| (r * 4 + c) as f64 / 12.0);
        for f in [ew_mse, mse] {
            let (loss, grad) = f(&m, &m).unwrap();
            assert_eq!(loss, 0.0);
            assert!(grad.data().iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn weights_vanish_at_zero_prediction() {
        let pred = SaliencyMap::zeros(2, 2);
        let target = SaliencyMap::new(2, 2, vec![0.1, 0.5, 0.9, 0.0]).unwrap();
        assert_eq!(ew_mse(&pred, &target).unwrap().0, mse(&pred, &target).unwrap().0);
    }

    #[test]
    fn errors() {
        assert!(matches!(ew_mse(&SaliencyMap::zeros(2, 2), &SaliencyMap::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(matches!(mse(&one(f64::NAN), &one(0.0)), Err(Error::NonFinite(_))));
        assert!("huber".parse::<LossKind>().is_err());
        assert_eq!("ew-mse".parse::<LossKind>().unwrap(), LossKind::EwMse);
    }
}
