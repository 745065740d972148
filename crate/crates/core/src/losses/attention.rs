//! Top-down and bottom-up attention, attention-pooled embeddings, video-level
//! predictions and the running reference background embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `λ(t) = max_c T[t, c]` as an `s × 1` array.
pub fn topdown_attention(tape: &mut Tape, tcam: Var) -> Result<Var> {
    if tape.value(tcam).is_empty() {
        return Err(Error::shape("topdown_attention", "empty TCAM"));
    }
    tape.row_max(tcam)
}

/// Top-k size for temporal pooling: `⌈s/8⌉`.
pub fn topk_size(num_snippets: usize) -> usize {
    num_snippets.div_ceil(8).max(1)
}

/// Per-class mean of the `⌈s/8⌉` highest activations, giving `1 × C`.
pub fn video_prediction(tape: &mut Tape, tcam: Var) -> Result<Var> {
    let s = tape.value(tcam).rows();
    if s == 0 {
        return Err(Error::shape("video_prediction", "no snippets"));
    }
    tape.topk_pool_columns(tcam, topk_size(s))
}

#[derive(Clone, Copy, Debug)]
pub struct PooledEmbeddings {
    pub x_fg: Var,
    pub x_bg: Var,
    /// No snippet had `λ > τ`; `x_fg` fell back to the most confident snippet.
    pub fg_empty: bool,
    /// No snippet had `1 − λ > τ`; `x_bg` fell back likewise.
    pub bg_empty: bool,
}

/// Attention-weighted foreground and background embeddings.
///
/// `x_fg = Σ_{λ(t)>τ} λ(t) x(t)` and `x_bg = Σ_{1−λ(t)>τ} (1−λ(t)) x(t)`.
/// Set membership is decided on values and carries no gradient; the weights
/// and embeddings do.
pub fn fg_bg_embeddings(
    tape: &mut Tape,
    embeddings: Var,
    lambda: Var,
    tau: f64,
) -> Result<PooledEmbeddings> {
    let s = tape.value(embeddings).rows();
    if tape.value(lambda).len() != s {
        return Err(Error::shape(
            "fg_bg_embeddings",
            format!("{} attention values for {s} snippets", tape.value(lambda).len()),
        ));
    }
    let lam = tape.value(lambda).as_slice().to_vec();
    let bg_weights = tape.affine(lambda, -1.0, 1.0);
    let lam_bg: Vec<f64> = lam.iter().map(|l| 1.0 - l).collect();

    let (fg_rows, fg_empty) = rows_above(&lam, tau);
    let (bg_rows, bg_empty) = rows_above(&lam_bg, tau);
    let x_fg = tape.weighted_row_sum(embeddings, lambda, fg_rows)?;
    let x_bg = tape.weighted_row_sum(embeddings, bg_weights, bg_rows)?;
    Ok(PooledEmbeddings {
        x_fg,
        x_bg,
        fg_empty,
        bg_empty,
    })
}

/// Indices with `w > tau`, or the single argmax (lowest index on ties) when
/// there are none.
fn rows_above(weights: &[f64], tau: f64) -> (Vec<usize>, bool) {
    let rows: Vec<usize> = (0..weights.len()).filter(|&t| weights[t] > tau).collect();
    if !rows.is_empty() {
        return (rows, false);
    }
    let mut best = 0;
    for (t, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = t;
        }
    }
    (vec![best], true)
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `λ′(t) = 0.5 (1 − cos(x(t), x_ref))` on detached values.
pub fn bottomup_attention(embeddings: &Matrix, x_ref: &[f64]) -> Vec<f64> {
    (0..embeddings.rows())
        .map(|t| 0.5 * (1.0 - plain_cosine(embeddings.row(t), x_ref)))
        .collect()
}

/// Gradient-free running mean of batch background embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaRef {
    pub x_ref: Vec<f64>,
    /// Number of updates applied.
    pub iteration: u64,
}

pub const EMA_MOMENTUM: f64 = 0.9;

impl EmaRef {
    pub fn new(dim: usize) -> Self {
        Self {
            x_ref: vec![0.0; dim],
            iteration: 0,
        }
    }

    /// `x_ref ← 0.9 x_ref + 0.1 mean(batch)`.
    pub fn update(&mut self, batch_bg: &[Vec<f64>]) -> Result<()> {
        let n = batch_bg.len();
        if n == 0 {
            return Err(Error::Usage("EMA update with an empty batch".into()));
        }
        let dim = self.x_ref.len();
        if let Some(bad) = batch_bg.iter().find(|v| v.len() != dim) {
            return Err(Error::shape(
                "update_ema_ref",
                format!("embedding of width {}, expected {dim}", bad.len()),
            ));
        }
        for (i, r) in self.x_ref.iter_mut().enumerate() {
            let mean = batch_bg.iter().map(|v| v[i]).sum::<f64>() / n as f64;
            *r = EMA_MOMENTUM * *r + (1.0 - EMA_MOMENTUM) * mean;
        }
        self.iteration += 1;
        Ok(())
    }
}
