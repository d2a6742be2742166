use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw discriminator outputs for source and target ROIs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscriminatorScores {
    pub source_scores: Vec<f64>,
    pub target_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_loss: f64,
    pub dis_loss: f64,
    pub total: f64,
}

/// Hinge domain loss: source scores are pushed above +1, target scores
/// below -1; each expectation is the batch mean.
pub fn hinge_discriminator_loss(scores: &DiscriminatorScores) -> Result<f64> {
    Ok(hinge_with_grads(scores)?.0)
}

/// Loss together with `dL/ds` for every source and target score.
pub fn hinge_with_grads(scores: &DiscriminatorScores) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (src, tgt) = (&scores.source_scores, &scores.target_scores);
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Empty(
            "hinge loss needs at least one source and one target score",
        ));
    }
    let (ns, nt) = (src.len() as f64, tgt.len() as f64);
    let src_loss = src.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / ns;
    let tgt_loss = tgt.iter().map(|t| (1.0 + t).max(0.0)).sum::<f64>() / nt;
    let d_src = src
        .iter()
        .map(|s| if 1.0 - s > 0.0 { -1.0 / ns } else { 0.0 })
        .collect();
    let d_tgt = tgt
        .iter()
        .map(|t| if 1.0 + t > 0.0 { 1.0 / nt } else { 0.0 })
        .collect();
    Ok((src_loss + tgt_loss, d_src, d_tgt))
}

/// Unweighted sum of detection and discriminator losses.
pub fn total_loss(det: f64, dis: f64) -> Result<LossBreakdown> {
    if !(det >= 0.0 && dis >= 0.0) {
        return Err(Error::invalid(format!(
            "losses must be non-negative, got det={det} dis={dis}"
        )));
    }
    Ok(LossBreakdown {
        det_loss: det,
        dis_loss: dis,
        total: det + dis,
    })
}
