use super::RlError;

/// One step-level term of the surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub advantage: f64,
    pub old_logprob: Option<f64>,
}

fn check(terms: &[LossTerm], new_logp: &[f64], clip_eps: f64) -> Result<(), RlError> {
    if !(clip_eps > 0.0 && clip_eps < 1.0) {
        return Err(RlError::BadClip(clip_eps));
    }
    if terms.len() != new_logp.len() {
        return Err(RlError::LengthMismatch { expected: terms.len(), got: new_logp.len() });
    }
    if let Some(i) = terms.iter().position(|t| t.old_logprob.is_none()) {
        return Err(RlError::MissingLogProb(i));
    }
    Ok(())
}

/// `-mean_k min(rho_k * A_k, clip(rho_k, 1 - eps, 1 + eps) * A_k)` with
/// `rho_k = exp(new_logp_k - old_logp_k)`. Ratios are per step, not per
/// token. An empty batch has zero loss.
pub fn clipped_surrogate_loss(
    terms: &[LossTerm],
    new_logp: &[f64],
    clip_eps: f64,
) -> Result<f64, RlError> {
    check(terms, new_logp, clip_eps)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = terms
        .iter()
        .zip(new_logp)
        .map(|(t, &lp)| {
            let rho = (lp - t.old_logprob.unwrap_or_default()).exp();
            let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            (rho * t.advantage).min(clipped * t.advantage)
        })
        .sum();
    Ok(-total / terms.len() as f64)
}

/// Derivative of [`clipped_surrogate_loss`] with respect to each new
/// log-probability. Terms on the clipped branch contribute zero.
pub fn surrogate_logp_gradient(
    terms: &[LossTerm],
    new_logp: &[f64],
    clip_eps: f64,
) -> Result<Vec<f64>, RlError> {
    check(terms, new_logp, clip_eps)?;
    let n = terms.len() as f64;
    Ok(terms
        .iter()
        .zip(new_logp)
        .map(|(t, &lp)| {
            let rho = (lp - t.old_logprob.unwrap_or_default()).exp();
            let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            let unclipped = rho * t.advantage;
            let inside = rho == clipped;
            if inside || unclipped < clipped * t.advantage {
                -unclipped / n
            } else {
                0.0
            }
        })
        .collect())
}
