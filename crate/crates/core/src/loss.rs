//! Training objective: BCE + soft dice on the mask, plus weighted BCE on the
//! grayscale reconstruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::model::ForwardOutput;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub reconstruction_weight: f64,
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_smooth: 1.0,
            reconstruction_weight: 1.0,
            bce_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dice_smooth > 0.0, "dice smoothing must be positive");
        ensure!(
            self.reconstruction_weight >= 0.0,
            "reconstruction weight must be non-negative"
        );
        ensure!(
            self.bce_clamp > 0.0 && self.bce_clamp < 0.5,
            "bce clamp must lie in (0, 0.5)"
        );
        Ok(())
    }
}

/// The scalar loss plus its three components as plain numbers.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Scalar> {
    pub total: Tensor<T>,
    pub bce_mask: f64,
    pub dice: f64,
    pub bce_gray: f64,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn total_value(&self) -> f64 {
        self.total.data()[0].as_f64()
    }
}

/// Mean binary cross-entropy with predictions clamped to `[δ, 1−δ]`.
pub fn bce<T: Scalar>(graph: &mut Graph<T>, pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    graph.bce(pred, target, cfg.bce_clamp)
}

/// `1 − (2Σpt + ε)/(Σp + Σt + ε)` per image, averaged over the batch.
pub fn dice_loss<T: Scalar>(
    graph: &mut Graph<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    graph.dice_loss(pred, target, cfg.dice_smooth)
}

/// `bce(mask) + dice(mask) + λ·bce(gray)`.
pub fn total_loss<T: Scalar>(
    graph: &mut Graph<T>,
    out: &ForwardOutput<T>,
    mask_gt: &Tensor<T>,
    gray_gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    let bce_mask = bce(graph, &out.mask, mask_gt, cfg)?;
    let dice = dice_loss(graph, &out.mask, mask_gt, cfg)?;
    let bce_gray = bce(graph, &out.gray, gray_gt, cfg)?;
    let seg = graph.add(&bce_mask, &dice)?;
    let total = if cfg.reconstruction_weight == 0.0 {
        seg
    } else {
        let rec = graph.scale(&bce_gray, cfg.reconstruction_weight)?;
        graph.add(&seg, &rec)?
    };
    let value = |t: &Tensor<T>| t.data()[0].as_f64();
    Ok(LossBreakdown {
        bce_mask: value(&bce_mask),
        dice: value(&dice),
        bce_gray: value(&bce_gray),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { dice_smooth: 0.0, ..Default::default() },
            LossConfig { reconstruction_weight: -1.0, ..Default::default() },
            LossConfig { bce_clamp: 0.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_weight_drops_reconstruction() {
        let mut g = Graph::<f64>::inference();
        let out = ForwardOutput {
            mask: Tensor::full(vec![1, 1, 2, 2], 0.3),
            gray: Tensor::full(vec![1, 1, 2, 2], 0.9),
            attention_maps: vec![],
            skips: vec![],
        };
        let m = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gray = Tensor::full(vec![1, 1, 2, 2], 0.1);
        let cfg = LossConfig { reconstruction_weight: 0.0, ..Default::default() };
        let l = total_loss(&mut g, &out, &m, &gray, &cfg).unwrap();
        assert_eq!(l.total_value(), l.bce_mask + l.dice);
        assert!(l.bce_gray > 1.0);
    }
}
