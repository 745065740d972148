//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    discriminative_loss, pdmi, snippet_joint, total_loss, video_joint, EmaRef, LossConfig,
    VideoLossState,
};
use crate::model::{BoundModel, ForwardOutput, ModelConfig, ModelParams};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// `(input, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences at up to
/// `coords` randomly chosen entries across all `inputs`.
///
/// `f` must rebuild the whole computation from the given leaves each time it
/// is called. `fault` is forwarded to [`Tape::with_fault`].
#[allow(clippy::too_many_arguments)]
pub fn check_gradient<F, R>(
    name: &str,
    inputs: &[Matrix],
    coords: usize,
    step: f64,
    tolerance: f64,
    fault: Option<OpKind>,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::with_fault(fault);
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.scalar(root))
    };

    let mut tape = Tape::with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.scalar(root).is_finite() {
        return Err(Error::Numeric(format!("{name}: non-finite value")));
    }
    tape.backward(root)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| tape.grad(v).clone()).collect();

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, m| {
            let start = *acc;
            *acc += m.len();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Matrix::len).sum();
    if total == 0 {
        return Err(Error::Usage(format!("{name}: no inputs to check")));
    }
    let picked = sample(rng, total, coords.min(total));

    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut max_rel_err = 0.0;
    let mut perturbed = inputs.to_vec();
    for flat in picked.iter() {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[which];
        let orig = inputs[which].as_slice()[idx];
        perturbed[which].as_mut_slice()[idx] = orig + step;
        let plus = eval(&perturbed)?;
        perturbed[which].as_mut_slice()[idx] = orig - step;
        let minus = eval(&perturbed)?;
        perturbed[which].as_mut_slice()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[which].as_slice()[idx];
        let err = relative_error(a, numeric);
        if err > max_rel_err || worst.is_none() {
            max_rel_err = err;
            worst = Some((which, idx, a, numeric));
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        coordinates: picked.len(),
        max_rel_err,
        tolerance,
        worst,
    })
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub coords: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Deliberately wrong backward rule, for negative controls.
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            coords: 20,
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

/// Worst case of one named check across all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentResult {
    pub name: String,
    pub seeds: usize,
    /// Coordinates checked per seed.
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Shapes of the end-to-end check.
pub const E2E_SNIPPETS: usize = 12;
pub const E2E_FEATURE_DIM: usize = 8;
pub const E2E_CLASSES: usize = 4;
pub const E2E_BATCH: usize = 3;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).expect("shape matches data")
}

/// Entries with `|x| ≥ 0.2`, keeping kinks out of finite-difference reach.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::new(rows, cols, data).expect("shape matches data")
}

fn random_labels(rng: &mut ChaCha8Rng, c: usize) -> Vec<bool> {
    let mut y: Vec<bool> = (0..c).map(|_| rng.random_bool(0.4)).collect();
    if !y.iter().any(|&b| b) {
        y[rng.random_range(0..c)] = true;
    }
    y
}

/// Reduces any array to a scalar through a fixed random bilinear readout
/// `a · X · b`.
fn readout(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (m, n) = tape.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let a = tape.constant(uniform(&mut rng, 1, m, -1.0, 1.0));
    let b = tape.constant(uniform(&mut rng, n, 1, -1.0, 1.0));
    let ax = tape.matmul(a, x)?;
    tape.matmul(ax, b)
}

type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Matrix>,
    f: CheckFn,
}

fn case(name: &str, inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        f: Box::new(f),
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    out.push(case(
        "op/matmul",
        vec![uniform(r, 3, 4, -1.0, 1.0), uniform(r, 4, 2, -1.0, 1.0)],
        move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            readout(t, y, seed)
        },
    ));
    out.push(case(
        "op/conv1d_temporal",
        vec![
            uniform(r, 9, 3, -1.0, 1.0),
            uniform(r, 9, 2, -1.0, 1.0),
            uniform(r, 1, 2, -1.0, 1.0),
        ],
        move |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 3, 2)?;
            readout(t, y, seed)
        },
    ));
    out.push(case("op/sigmoid", vec![uniform(r, 3, 3, -3.0, 3.0)], move |t, v| {
        let y = t.sigmoid(v[0]);
        readout(t, y, seed)
    }));
    out.push(case("op/leaky_relu", vec![away_from_zero(r, 3, 3)], move |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        readout(t, y, seed)
    }));
    out.push(case("op/relu", vec![away_from_zero(r, 3, 3)], move |t, v| {
        let y = t.relu(v[0]);
        readout(t, y, seed)
    }));
    out.push(case("op/abs", vec![away_from_zero(r, 3, 3)], move |t, v| {
        let y = t.abs(v[0]);
        readout(t, y, seed)
    }));
    out.push(case(
        "op/add_sub_affine",
        vec![uniform(r, 2, 3, -1.0, 1.0), uniform(r, 2, 3, -1.0, 1.0)],
        move |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.affine(v[1], -0.7, 0.3);
            let c = t.sub(a, b)?;
            let d = t.scale(c, 1.9);
            readout(t, d, seed)
        },
    ));
    out.push(case("op/sum_mean", vec![uniform(r, 3, 2, -1.0, 1.0)], |t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0])?;
        let m = t.scale(m, 3.0);
        let sq = t.matmul(s, m)?;
        t.add(sq, s)
    }));
    out.push(case(
        "op/cosine",
        vec![uniform(r, 1, 5, -1.0, 1.0), uniform(r, 1, 5, -1.0, 1.0)],
        |t, v| t.cosine(v[0], v[1]),
    ));
    out.push(case("op/topk_mean", vec![uniform(r, 1, 8, -1.0, 1.0)], |t, v| {
        t.topk_mean(v[0], 3)
    }));
    out.push(case("op/topk_pool_columns", vec![uniform(r, 10, 3, 0.0, 1.0)], move |t, v| {
        let y = t.topk_pool_columns(v[0], 2)?;
        readout(t, y, seed)
    }));
    out.push(case("op/row_max", vec![uniform(r, 5, 4, 0.0, 1.0)], move |t, v| {
        let y = t.row_max(v[0])?;
        readout(t, y, seed)
    }));
    out.push(case(
        "op/weighted_row_sum",
        vec![uniform(r, 6, 3, -1.0, 1.0), uniform(r, 6, 1, 0.0, 1.0)],
        move |t, v| {
            let y = t.weighted_row_sum(v[0], v[1], vec![0, 2, 3, 5])?;
            readout(t, y, seed)
        },
    ));
    out.push(case("op/binary_joint", vec![uniform(r, 6, 1, 0.0, 1.0)], move |t, v| {
        let y = t.binary_joint(v[0], vec![4, 1, 0, 5])?;
        readout(t, y, seed)
    }));
    out.push(case("op/gather", vec![uniform(r, 6, 1, -1.0, 1.0)], move |t, v| {
        let y = t.gather(v[0], vec![5, 0, 0, 2])?;
        readout(t, y, seed)
    }));
    out.push(case(
        "op/stack_columns",
        vec![
            uniform(r, 1, 4, -1.0, 1.0),
            uniform(r, 4, 1, -1.0, 1.0),
            uniform(r, 1, 4, -1.0, 1.0),
        ],
        move |t, v| {
            let y = t.stack_columns(v)?;
            readout(t, y, seed)
        },
    ));
    out.push(case(
        "op/log_condition_number",
        vec![uniform(r, 3, 3, -1.0, 1.0)],
        |t, v| t.log_condition_number(v[0], crate::linalg::DEFAULT_RANK_TOL),
    ));
    let labels = random_labels(r, 6);
    out.push(case(
        "op/focal_penalty",
        vec![
            uniform(r, 1, 6, 0.05, 0.95),
            uniform(r, 1, 1, 0.05, 0.3),
            uniform(r, 1, 1, 0.05, 0.3),
        ],
        move |t, v| t.focal_penalty(v[0], &labels, Some(v[1]), Some(v[2]), 2.0),
    ));
    let targets: Vec<f64> = (0..5).map(|_| r.random_range(0.0..1.0)).collect();
    out.push(case(
        "op/binary_cross_entropy",
        vec![uniform(r, 5, 1, 0.05, 0.95)],
        move |t, v| t.binary_cross_entropy(v[0], &targets),
    ));
    out
}

fn loss_states(
    tape: &mut Tape,
    vars: &[Var],
    labels: &[Vec<bool>],
    reference: &EmaRef,
    cfg: &LossConfig,
) -> Result<Vec<VideoLossState>> {
    vars.chunks(2)
        .zip(labels)
        .map(|(pair, y)| {
            let forward = ForwardOutput {
                embeddings: pair[0],
                tcam: pair[1],
            };
            VideoLossState::new(tape, forward, y.clone(), reference, cfg)
        })
        .collect()
}

fn component_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let r = &mut rng;
    let (s, h, c, n) = (E2E_SNIPPETS, E2E_FEATURE_DIM / 2, E2E_CLASSES, E2E_BATCH);
    let mut out = Vec::new();

    // Discriminative loss with a larger γ so the compactness terms matter.
    let cfg = LossConfig {
        gamma: 0.5,
        ..LossConfig::default()
    };
    let labels: Vec<Vec<bool>> = (0..n).map(|_| random_labels(r, c)).collect();
    let reference = EmaRef {
        x_ref: (0..h).map(|_| r.random_range(-1.0..1.0)).collect(),
        iteration: 1,
    };
    let mut inputs = Vec::new();
    for _ in 0..n {
        inputs.push(uniform(r, s, h, -1.0, 1.0));
        inputs.push(uniform(r, s, c, 0.05, 0.95));
    }
    {
        let (labels, reference, cfg) = (labels.clone(), reference.clone(), cfg.clone());
        out.push(case("loss/discriminative", inputs, move |t, v| {
            let batch = loss_states(t, v, &labels, &reference, &cfg)?;
            discriminative_loss(t, &batch, &[1, 2, 0], &cfg)
        }));
    }

    // Foreground snippets get the larger top-down values so the 2×2 joint is
    // well away from singular; near-singular joints make the finite
    // difference itself inaccurate.
    let lambda_prime: Vec<f64> = (0..2 * s).map(|t| if t % 3 == 0 { 0.8 } else { 0.2 }).collect();
    let lambda = Matrix::column_vector(
        &lambda_prime
            .iter()
            .map(|&lp| if lp > 0.5 { r.random_range(0.55..0.95) } else { r.random_range(0.05..0.45) })
            .collect::<Vec<_>>(),
    );
    out.push(case(
        "loss/pdmi_snippet",
        vec![lambda],
        move |t, v| {
            let joint = snippet_joint(t, v[0], &lambda_prime)?
                .ok_or_else(|| Error::Numeric("degenerate snippet joint".into()))?;
            pdmi(t, joint.predictions, joint.labels, crate::linalg::DEFAULT_RANK_TOL)
        },
    ));

    let videos = 6;
    let video_labels: Vec<Vec<bool>> = (0..videos)
        .map(|i| (0..c).map(|k| k == i % c || r.random_bool(0.15)).collect())
        .collect();
    // Predictions lean towards the labelled classes, for the same reason.
    let video_preds: Vec<Matrix> = video_labels
        .iter()
        .map(|y| {
            let row: Vec<f64> = y
                .iter()
                .map(|&on| r.random_range(0.0..0.3) + if on { 0.6 } else { 0.05 })
                .collect();
            Matrix::row_vector(&row)
        })
        .collect();
    out.push(case(
        "loss/pdmi_video",
        video_preds,
        move |t, v| {
            let (p, y) = video_joint(t, v, &video_labels)?;
            pdmi(t, p, y, crate::linalg::DEFAULT_RANK_TOL)
        },
    ));

    let model = ModelConfig {
        feature_dim: E2E_FEATURE_DIM,
        num_classes: c,
        seed,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&model)?;
    for (i, m) in params.arrays_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            *m = uniform(r, m.rows(), m.cols(), -0.1, 0.1);
        }
    }
    let streams: Vec<(Matrix, Matrix)> = (0..n)
        .map(|_| {
            (
                uniform(r, s, E2E_FEATURE_DIM, -1.0, 1.0),
                uniform(r, s, E2E_FEATURE_DIM, -1.0, 1.0),
            )
        })
        .collect();
    let full = LossConfig::default();
    out.push(case(
        "loss/total_end_to_end",
        params.arrays().into_iter().cloned().collect(),
        move |t, v| {
            let bound = BoundModel::from_vars(&model, v)?;
            let mut batch = Vec::with_capacity(streams.len());
            for ((rgb, flow), y) in streams.iter().zip(&labels) {
                let forward = bound.forward(t, rgb, flow)?;
                batch.push(VideoLossState::new(t, forward, y.clone(), &reference, &full)?);
            }
            Ok(total_loss(t, &batch, &[1, 2, 0], &full)?.total)
        },
    ));
    Ok(out)
}

/// Runs every op-level and loss-level check for each seed and folds the
/// results per check name.
pub fn run_suites(cfg: &SuiteConfig) -> Result<Vec<ComponentResult>> {
    if cfg.seeds.is_empty() || cfg.coords == 0 {
        return Err(Error::Usage("gradcheck needs at least one seed and one coordinate".into()));
    }
    let mut results: Vec<ComponentResult> = Vec::new();
    for &seed in &cfg.seeds {
        let mut cases = op_cases(seed);
        cases.extend(component_cases(seed)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
        for c in cases {
            let report = check_gradient(
                &c.name,
                &c.inputs,
                cfg.coords,
                cfg.step,
                cfg.tolerance,
                cfg.fault,
                &mut rng,
                &c.f,
            )?;
            match results.iter_mut().find(|r| r.name == c.name) {
                Some(r) => {
                    r.seeds += 1;
                    r.coordinates = r.coordinates.min(report.coordinates);
                    r.max_rel_err = r.max_rel_err.max(report.max_rel_err);
                    r.passed &= report.passed();
                }
                None => results.push(ComponentResult {
                    name: c.name,
                    seeds: 1,
                    coordinates: report.coordinates,
                    max_rel_err: report.max_rel_err,
                    tolerance: cfg.tolerance,
                    passed: report.passed(),
                }),
            }
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn default_suites_pass() {
        let results = run_suites(&SuiteConfig::default()).unwrap();
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
        assert!(results.iter().any(|r| r.name == "loss/total_end_to_end"));
    }

    #[test]
    fn injected_fault_names_the_op() {
        let cfg = SuiteConfig {
            seeds: vec![0],
            fault: Some(OpKind::Cosine),
            ..SuiteConfig::default()
        };
        let results = run_suites(&cfg).unwrap();
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"op/cosine"), "{failed:?}");
        assert!(!failed.contains(&"op/matmul"));
    }

    #[test]
    fn detects_correct_and_faulty_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::row_vector(&[0.3, -0.7, 1.1]);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.sigmoid(v[0]);
            Ok(t.sum(s))
        };
        let ok = check_gradient("sigmoid", std::slice::from_ref(&x), 3, DEFAULT_STEP, 1e-6, None, &mut rng, f)
            .unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = check_gradient(
            "sigmoid",
            &[x],
            3,
            DEFAULT_STEP,
            1e-6,
            Some(OpKind::Sigmoid),
            &mut rng,
            f,
        )
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
