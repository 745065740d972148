//! Training objective: `L = L_Dis + α · (L_DS + L_DV)` plus ablation variants.

pub mod attention;
pub mod denoising;
pub mod discriminative;

use serde::{Deserialize, Serialize};

pub use attention::{
    bottomup_attention, fg_bg_embeddings, topdown_attention, topk_size, video_prediction, EmaRef,
    PooledEmbeddings,
};
pub use denoising::{denoising_loss, pdmi, snippet_joint, video_joint, DenoisingTerms, SnippetJoint};
pub use discriminative::{discriminative_loss, pair_weights, ring_pairing, PairWeights};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::model::ForwardOutput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationVariant {
    CrossEntropy,
    Focal,
    Discriminative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoisingVariant {
    None,
    Pdmi,
    L1,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoisingScope {
    SnippetOnly,
    VideoOnly,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the denoising term.
    pub alpha: f64,
    /// Compactness weight for same-kind embedding grouping.
    pub gamma: f64,
    /// Focusing exponent.
    pub beta: f64,
    /// Attention threshold for foreground/background pooling.
    pub tau: f64,
    pub rank_tol: f64,
    pub classification: ClassificationVariant,
    pub denoising: DenoisingVariant,
    pub denoising_scope: DenoisingScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 0.01,
            beta: 2.0,
            tau: 0.5,
            rank_tol: DEFAULT_RANK_TOL,
            classification: ClassificationVariant::Discriminative,
            denoising: DenoisingVariant::Pdmi,
            denoising_scope: DenoisingScope::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.gamma >= 0.0
            && self.beta >= 0.0
            && self.tau > 0.0
            && self.tau < 1.0
            && self.rank_tol > 0.0
            && self.rank_tol < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "loss needs alpha, gamma, beta >= 0, 0 < tau < 1, 0 < rank_tol < 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Cross-entropy classification, no denoising.
    pub fn cross_entropy() -> Self {
        Self {
            classification: ClassificationVariant::CrossEntropy,
            denoising: DenoisingVariant::None,
            ..Self::default()
        }
    }

    /// Focal classification, no denoising.
    pub fn focal() -> Self {
        Self {
            classification: ClassificationVariant::Focal,
            denoising: DenoisingVariant::None,
            ..Self::default()
        }
    }

    /// Discriminative classification alone.
    pub fn discriminative_only() -> Self {
        Self {
            denoising: DenoisingVariant::None,
            ..Self::default()
        }
    }

    /// Discriminative plus condition-number denoising at both levels.
    pub fn full() -> Self {
        Self::default()
    }

    pub fn needs_pairs(&self) -> bool {
        self.classification == ClassificationVariant::Discriminative
    }
}

/// Everything the losses need about one video of a batch.
#[derive(Clone, Debug)]
pub struct VideoLossState {
    pub embeddings: Var,
    pub tcam: Var,
    pub pooled: PooledEmbeddings,
    /// Top-down attention, `s × 1`.
    pub lambda: Var,
    /// Bottom-up attention (detached).
    pub lambda_prime: Vec<f64>,
    /// Video-level prediction, `1 × C`.
    pub prediction: Var,
    pub labels: Vec<bool>,
}

impl VideoLossState {
    pub fn new(
        tape: &mut Tape,
        forward: ForwardOutput,
        labels: Vec<bool>,
        reference: &EmaRef,
        cfg: &LossConfig,
    ) -> Result<Self> {
        let c = tape.value(forward.tcam).cols();
        if labels.len() != c {
            return Err(Error::shape(
                "VideoLossState",
                format!("{} labels for {c} classes", labels.len()),
            ));
        }
        let lambda = topdown_attention(tape, forward.tcam)?;
        let pooled = fg_bg_embeddings(tape, forward.embeddings, lambda, cfg.tau)?;
        let lambda_prime = bottomup_attention(tape.value(forward.embeddings), &reference.x_ref);
        let prediction = video_prediction(tape, forward.tcam)?;
        Ok(Self {
            embeddings: forward.embeddings,
            tcam: forward.tcam,
            pooled,
            lambda,
            lambda_prime,
            prediction,
            labels,
        })
    }
}

/// The objective and its parts, all on the tape.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub discriminative: Var,
    pub denoising: DenoisingTerms,
}

/// Scalar values of a [`LossBreakdown`]; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub discriminative: f64,
    pub snippet: f64,
    pub video: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            discriminative: tape.scalar(self.discriminative),
            snippet: self.denoising.snippet.map_or(0.0, |v| tape.scalar(v)),
            video: self.denoising.video.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(self.total),
        }
    }
}

pub fn total_loss(
    tape: &mut Tape,
    batch: &[VideoLossState],
    pairing: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let discriminative = discriminative_loss(tape, batch, pairing, cfg)?;
    let denoising = denoising_loss(tape, batch, cfg)?;
    let total = match denoising.combined(tape)? {
        Some(d) if cfg.alpha != 0.0 => {
            let weighted = tape.scale(d, cfg.alpha);
            tape.add(discriminative, weighted)?
        }
        _ => discriminative,
    };
    Ok(LossBreakdown {
        total,
        discriminative,
        denoising,
    })
}
