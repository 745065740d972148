//! Classification loss with foreground/background separation penalties.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ClassificationVariant, LossConfig, VideoLossState};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Cosine-similarity weights coupling one video to its partner.
#[derive(Clone, Copy, Debug)]
pub struct PairWeights {
    /// `max(0, cos(x_fg, x̃_bg))`
    pub fb: Var,
    /// `γ (1 − cos(x_fg, x̃_fg))`
    pub fg: Var,
    /// `γ (1 − cos(x_bg, x̃_bg))`
    pub bg: Var,
}

pub fn pair_weights(
    tape: &mut Tape,
    own: &VideoLossState,
    other: &VideoLossState,
    gamma: f64,
) -> Result<PairWeights> {
    let cos_fb = tape.cosine(own.pooled.x_fg, other.pooled.x_bg)?;
    let fb = tape.relu(cos_fb);
    let cos_fg = tape.cosine(own.pooled.x_fg, other.pooled.x_fg)?;
    let fg = tape.affine(cos_fg, -gamma, gamma);
    let cos_bg = tape.cosine(own.pooled.x_bg, other.pooled.x_bg)?;
    let bg = tape.affine(cos_bg, -gamma, gamma);
    Ok(PairWeights { fb, fg, bg })
}

/// Partner assignment without fixed points: shuffle, then pair each video
/// with its successor on the ring.
pub fn ring_pairing<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairing = vec![0; n];
    for i in 0..n {
        pairing[order[i]] = order[(i + 1) % n];
    }
    pairing
}

/// Batch mean of the per-video penalized classification loss.
///
/// Positives contribute `−(1 − p + w_fg + w_fb)^β log p`, negatives
/// `−(p + w_bg + w_fb)^β log(1 − p)`. The focal variant drops the `w` terms
/// and cross-entropy further sets `β = 0`.
pub fn discriminative_loss(
    tape: &mut Tape,
    batch: &[VideoLossState],
    pairing: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("discriminative loss on an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(n);
    match cfg.classification {
        ClassificationVariant::CrossEntropy | ClassificationVariant::Focal => {
            let beta = if cfg.classification == ClassificationVariant::CrossEntropy {
                0.0
            } else {
                cfg.beta
            };
            for v in batch {
                terms.push(tape.focal_penalty(v.prediction, &v.labels, None, None, beta)?);
            }
        }
        ClassificationVariant::Discriminative => {
            if n < 2 {
                return Err(Error::Usage(
                    "discriminative loss needs at least two videos to pair".into(),
                ));
            }
            if pairing.len() != n {
                return Err(Error::Usage(format!(
                    "pairing has {} entries for {n} videos",
                    pairing.len()
                )));
            }
            for (i, v) in batch.iter().enumerate() {
                let j = pairing[i];
                if j >= n || j == i {
                    return Err(Error::Usage(format!("invalid partner {j} for video {i}")));
                }
                let w = pair_weights(tape, v, &batch[j], cfg.gamma)?;
                let pos = tape.add(w.fg, w.fb)?;
                let neg = tape.add(w.bg, w.fb)?;
                terms.push(tape.focal_penalty(
                    v.prediction,
                    &v.labels,
                    Some(pos),
                    Some(neg),
                    cfg.beta,
                )?);
            }
        }
    }
    let sum = tape.add_all(&terms)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}
