//! Class scores and training losses.

use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Margin loss constants and the weight of the reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub recon_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            recon_scale: 0.3,
        }
    }
}

/// Scores `(B, N)` from output capsules `(B, .., D, N)`: each capsule's
/// length divided by `sqrt(D)`, so a tanh-bounded capsule scores in `[0, 1]`.
pub fn normalized_length<T: Real>(g: &mut Graph<T>, capsules: NodeId) -> Result<NodeId> {
    g.capsule_length(capsules)
}

/// Mean over the batch of the per-class squared hinge loss.
pub fn margin_loss<T: Real>(g: &mut Graph<T>, scores: NodeId, labels: &[usize], cfg: &LossConfig) -> Result<NodeId> {
    g.margin_loss(scores, labels, T::of(cfg.m_plus), T::of(cfg.m_minus), T::of(cfg.lambda))
}

/// Mean squared error over every pixel of the batch. `images` may have any
/// shape with the same element count as the reconstruction.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, reconstruction: NodeId, images: &Tensor<T>) -> Result<NodeId> {
    g.mse(reconstruction, images)
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub margin: NodeId,
    pub reconstruction: NodeId,
}

/// `margin + recon_scale * reconstruction`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    reconstruction: NodeId,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let margin = margin_loss(g, scores, labels, cfg)?;
    let recon = reconstruction_loss(g, reconstruction, images)?;
    let scaled = g.scale(recon, T::of(cfg.recon_scale))?;
    let total = g.add(margin, scaled)?;
    Ok(LossNodes {
        total,
        margin,
        reconstruction: recon,
    })
}

/// Index of the largest score in every row of a `(B, N)` tensor.
pub fn predictions<T: Real>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.rank() != 2 {
        return Err(Error::Input(alloc::format!("scores must be (B, N), got {s}")));
    }
    Ok(scores
        .data()
        .chunks_exact(s.dim(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}
