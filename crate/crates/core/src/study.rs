//! Sampling study of the log condition number against `log |det|` for
//! random snippet-level joint distributions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg::{abs_det, Matrix};
use crate::losses::{pdmi, snippet_joint};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyConfig {
    pub num_samples: usize,
    pub seed: u64,
    /// Snippets per sampled video, inclusive.
    pub snippets_range: [usize; 2],
    /// Replace the first sample with the optimum `U = I`.
    pub plant_identity: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            num_samples: 10_000,
            seed: 0,
            snippets_range: [2, 32],
            plant_identity: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StudySample {
    pub log_eta: f64,
    pub log_abs_det: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyResult {
    pub samples: Vec<StudySample>,
    pub pearson: f64,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn log_eta_and_det(tape: &mut Tape, u: &Matrix) -> Result<StudySample> {
    let uv = tape.constant(u.clone());
    let eye = tape.constant(Matrix::identity(u.cols()));
    let eta = pdmi(tape, uv, eye, crate::linalg::DEFAULT_RANK_TOL)?;
    Ok(StudySample {
        log_eta: tape.scalar(eta),
        log_abs_det: abs_det(u)?.ln(),
    })
}

/// One random video: top-down attention drawn around a per-set centre,
/// bottom-up attention splitting the snippets into two nonempty sets.
fn sample_joint(rng: &mut ChaCha8Rng, cfg: &StudyConfig) -> Result<Option<Matrix>> {
    let z = rng.random_range(cfg.snippets_range[0]..=cfg.snippets_range[1]);
    let nf = rng.random_range(1..z);
    let (cf, cb): (f64, f64) = (rng.random(), rng.random());
    let spread: f64 = rng.random_range(0.0..0.5);
    let mut lambda = Vec::with_capacity(z);
    let mut lambda_prime = Vec::with_capacity(z);
    for t in 0..z {
        let centre = if t < nf { cf } else { cb };
        let lo = (centre - spread).max(0.0);
        let hi = (centre + spread).min(1.0);
        lambda.push(if hi > lo { rng.random_range(lo..hi) } else { centre });
        lambda_prime.push(if t < nf { 0.75 } else { 0.25 });
    }
    let mut tape = Tape::new();
    let l = tape.constant(Matrix::column_vector(&lambda));
    let Some(joint) = snippet_joint(&mut tape, l, &lambda_prime)? else {
        return Ok(None);
    };
    Ok(Some(tape.value(joint.predictions).matmul(tape.value(joint.labels))?))
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let [lo, hi] = cfg.snippets_range;
    if cfg.num_samples == 0 || lo < 2 || lo > hi {
        return Err(Error::Config(format!(
            "study needs samples >= 1 and 2 <= snippets_range[0] <= snippets_range[1], got {cfg:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut tape = Tape::new();
    if cfg.plant_identity {
        samples.push(log_eta_and_det(&mut tape, &Matrix::identity(2))?);
    }
    while samples.len() < cfg.num_samples {
        let Some(u) = sample_joint(&mut rng, cfg)? else {
            continue;
        };
        if abs_det(&u)? == 0.0 {
            continue;
        }
        samples.push(log_eta_and_det(&mut tape, &u)?);
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.log_eta).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.log_abs_det).collect();
    let pearson = pearson(&xs, &ys).unwrap_or(f64::NAN);
    Ok(StudyResult { samples, pearson })
}

impl StudyResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("log_eta,log_abs_det\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{}", s.log_eta, s.log_abs_det);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
