//! Condition-number denoising of joint prediction/label distributions.
//!
//! A joint distribution `U = P · Y` is well conditioned exactly when the
//! predictions carry the label information without mixing; the loss is
//! `log(σ_1/σ_r)`, which is zero at any scaled identity. It is applied within
//! each video (snippet predictions against pseudo-labels from bottom-up
//! attention) and across the batch (video predictions against video labels).

use log::warn;

use super::{DenoisingScope, DenoisingVariant, LossConfig, VideoLossState};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Snippet-level joint: `P1` is `2 × z`, `Y1` is a `z × 2` constant.
#[derive(Clone, Debug)]
pub struct SnippetJoint {
    pub predictions: Var,
    pub labels: Var,
    /// Pseudo-foreground snippets (`λ′ > 0.5`).
    pub foreground: Vec<usize>,
    /// Pseudo-background snippets (`λ′ < 0.5`).
    pub background: Vec<usize>,
}

/// Builds `P1 = [[λ_f, λ_b], [1−λ_f, 1−λ_b]]` and
/// `Y1 = (1/z) [[1_{n_f}, 0], [0, 1_{n_b}]]`.
///
/// Returns `None` when either pseudo-set is empty. Snippets with
/// `λ′ = 0.5` exactly belong to neither set.
pub fn snippet_joint(
    tape: &mut Tape,
    lambda: Var,
    lambda_prime: &[f64],
) -> Result<Option<SnippetJoint>> {
    if tape.value(lambda).len() != lambda_prime.len() {
        return Err(Error::shape(
            "snippet_joint",
            format!(
                "{} top-down vs {} bottom-up values",
                tape.value(lambda).len(),
                lambda_prime.len()
            ),
        ));
    }
    let foreground: Vec<usize> = (0..lambda_prime.len()).filter(|&t| lambda_prime[t] > 0.5).collect();
    let background: Vec<usize> = (0..lambda_prime.len()).filter(|&t| lambda_prime[t] < 0.5).collect();
    if foreground.is_empty() || background.is_empty() {
        return Ok(None);
    }
    let (nf, z) = (foreground.len(), foreground.len() + background.len());
    let indices: Vec<usize> = foreground.iter().chain(&background).copied().collect();
    let predictions = tape.binary_joint(lambda, indices)?;
    let mut y = Matrix::zeros(z, 2);
    for r in 0..z {
        y[(r, usize::from(r >= nf))] = 1.0 / z as f64;
    }
    let labels = tape.constant(y);
    Ok(Some(SnippetJoint {
        predictions,
        labels,
        foreground,
        background,
    }))
}

/// `P2 = [p_1 … p_n]` (`C × n`) and `Y2 = (1/n) [y_1 … y_n]ᵀ` (`n × C`, constant).
pub fn video_joint(tape: &mut Tape, predictions: &[Var], labels: &[Vec<bool>]) -> Result<(Var, Var)> {
    let n = predictions.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Usage(format!(
            "video joint over {n} predictions and {} label vectors",
            labels.len()
        )));
    }
    let p = tape.stack_columns(predictions)?;
    let c = tape.value(p).rows();
    let mut y = Matrix::zeros(n, c);
    for (i, yi) in labels.iter().enumerate() {
        if yi.len() != c {
            return Err(Error::shape(
                "video_joint",
                format!("label {i} has {} classes, expected {c}", yi.len()),
            ));
        }
        for (k, &on) in yi.iter().enumerate() {
            if on {
                y[(i, k)] = 1.0 / n as f64;
            }
        }
    }
    let y = tape.constant(y);
    Ok((p, y))
}

/// `log η(P·Y)`; gradient flows through `P` only when `Y` is a constant.
pub fn pdmi(tape: &mut Tape, predictions: Var, labels: Var, rank_tol: f64) -> Result<Var> {
    let u = tape.matmul(predictions, labels)?;
    tape.log_condition_number(u, rank_tol)
}

/// Snippet and video terms of the denoising loss, either possibly absent.
#[derive(Clone, Debug, Default)]
pub struct DenoisingTerms {
    pub snippet: Option<Var>,
    pub video: Option<Var>,
    /// Gradient-free label matrices placed on the tape (for auditing).
    pub label_vars: Vec<Var>,
    /// Videos whose snippet joint was degenerate and skipped.
    pub skipped_snippet: usize,
    /// The video term was skipped because `Y2` (hence `U2`) was zero.
    pub skipped_video: bool,
}

impl DenoisingTerms {
    /// `L_DS + L_DV` over the present terms, or `None` if neither exists.
    pub fn combined(&self, tape: &mut Tape) -> Result<Option<Var>> {
        match (self.snippet, self.video) {
            (Some(a), Some(b)) => Ok(Some(tape.add(a, b)?)),
            (a, b) => Ok(a.or(b)),
        }
    }
}

pub fn denoising_loss(
    tape: &mut Tape,
    batch: &[VideoLossState],
    cfg: &LossConfig,
) -> Result<DenoisingTerms> {
    if batch.is_empty() {
        return Err(Error::Usage("denoising loss on an empty batch".into()));
    }
    let mut out = DenoisingTerms::default();
    if cfg.denoising == DenoisingVariant::None {
        return Ok(out);
    }
    if cfg.denoising_scope != DenoisingScope::VideoOnly {
        let mut terms = Vec::new();
        for v in batch {
            let Some(joint) = snippet_joint(tape, v.lambda, &v.lambda_prime)? else {
                out.skipped_snippet += 1;
                continue;
            };
            out.label_vars.push(joint.labels);
            let term = match cfg.denoising {
                DenoisingVariant::Pdmi => pdmi(tape, joint.predictions, joint.labels, cfg.rank_tol)?,
                DenoisingVariant::L1 => {
                    let target = tape.value(joint.labels).transpose().scale(
                        (joint.foreground.len() + joint.background.len()) as f64,
                    );
                    let target = tape.constant(target);
                    out.label_vars.push(target);
                    let diff = tape.sub(joint.predictions, target)?;
                    let abs = tape.abs(diff);
                    tape.mean(abs)?
                }
                DenoisingVariant::Bce => {
                    let indices: Vec<usize> =
                        joint.foreground.iter().chain(&joint.background).copied().collect();
                    let targets: Vec<f64> = joint
                        .foreground
                        .iter()
                        .map(|_| 1.0)
                        .chain(joint.background.iter().map(|_| 0.0))
                        .collect();
                    let gathered = tape.gather(v.lambda, indices)?;
                    tape.binary_cross_entropy(gathered, &targets)?
                }
                DenoisingVariant::None => unreachable!("handled above"),
            };
            terms.push(term);
        }
        if !terms.is_empty() {
            let sum = tape.add_all(&terms)?;
            out.snippet = Some(tape.scale(sum, 1.0 / terms.len() as f64));
        }
    }
    if cfg.denoising_scope != DenoisingScope::SnippetOnly {
        let preds: Vec<Var> = batch.iter().map(|v| v.prediction).collect();
        let labels: Vec<Vec<bool>> = batch.iter().map(|v| v.labels.clone()).collect();
        let (p2, y2) = video_joint(tape, &preds, &labels)?;
        out.label_vars.push(y2);
        if tape.value(y2).as_slice().iter().all(|&v| v == 0.0) {
            warn!("video-level joint distribution is zero (no positive labels); skipping its term");
            out.skipped_video = true;
        } else {
            out.video = Some(pdmi(tape, p2, y2, cfg.rank_tol)?);
        }
    }
    Ok(out)
}
