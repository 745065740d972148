//! Two-stream temporal-convolution network.
//!
//! Each stream (appearance, motion) stacks three temporal convolutions with
//! widths `d → d/2 → d/2 → C`. The first two are followed by a leaky ReLU and
//! their second-layer outputs, averaged over streams, are the latent snippet
//! embeddings `x`. The third is squashed by a sigmoid per stream and the two
//! results are averaged into the TCAM `T ∈ (0,1)^{s×C}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature width `d`; embeddings are `d/2` wide.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_classes: 5,
            kernel_size: 3,
            dilation: 1,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "feature_dim must be even and >= 2, got {}",
                self.feature_dim
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.feature_dim / 2
    }

    /// Half-width of the receptive field of the three stacked layers.
    pub fn receptive_radius(&self) -> usize {
        3 * self.dilation * (self.kernel_size - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `(kernel_size · c_in) × c_out`, tap-major rows.
    pub kernel: Matrix,
    /// `1 × c_out`.
    pub bias: Matrix,
}

impl ConvLayer {
    fn zeros(kernel_size: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel: Matrix::zeros(kernel_size * c_in, c_out),
            bias: Matrix::zeros(1, c_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams {
    pub tc1: ConvLayer,
    pub tc2: ConvLayer,
    pub tc3: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub appearance: StreamParams,
    pub motion: StreamParams,
}

pub const NUM_PARAM_ARRAYS: usize = 12;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, h, c, k) = (
            config.feature_dim,
            config.embedding_dim(),
            config.num_classes,
            config.kernel_size,
        );
        let stream = || StreamParams {
            tc1: ConvLayer::zeros(k, d, h),
            tc2: ConvLayer::zeros(k, h, h),
            tc3: ConvLayer::zeros(k, h, c),
        };
        Self {
            appearance: stream(),
            motion: stream(),
        }
    }

    /// Symmetric uniform kernels with variance `2 / (fan_in + fan_out)`
    /// (fans counted over taps), zero biases. Fully determined by the seed.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Self::zeros(config);
        let k = config.kernel_size;
        for stream in [&mut params.appearance, &mut params.motion] {
            for layer in [&mut stream.tc1, &mut stream.tc2, &mut stream.tc3] {
                let c_in = layer.kernel.rows() / k;
                let c_out = layer.kernel.cols();
                let limit = (6.0 / (k * (c_in + c_out)) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                for w in layer.kernel.as_mut_slice() {
                    *w = dist.sample(&mut rng);
                }
            }
        }
        Ok(params)
    }

    /// Parameter arrays in a fixed order (see [`ModelParams::names`]).
    pub fn arrays(&self) -> [&Matrix; NUM_PARAM_ARRAYS] {
        let (a, m) = (&self.appearance, &self.motion);
        [
            &a.tc1.kernel,
            &a.tc1.bias,
            &a.tc2.kernel,
            &a.tc2.bias,
            &a.tc3.kernel,
            &a.tc3.bias,
            &m.tc1.kernel,
            &m.tc1.bias,
            &m.tc2.kernel,
            &m.tc2.bias,
            &m.tc3.kernel,
            &m.tc3.bias,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Matrix; NUM_PARAM_ARRAYS] {
        let (a, m) = (&mut self.appearance, &mut self.motion);
        [
            &mut a.tc1.kernel,
            &mut a.tc1.bias,
            &mut a.tc2.kernel,
            &mut a.tc2.bias,
            &mut a.tc3.kernel,
            &mut a.tc3.bias,
            &mut m.tc1.kernel,
            &mut m.tc1.bias,
            &mut m.tc2.kernel,
            &mut m.tc2.bias,
            &mut m.tc3.kernel,
            &mut m.tc3.bias,
        ]
    }

    pub fn names() -> [&'static str; NUM_PARAM_ARRAYS] {
        [
            "appearance.tc1.kernel",
            "appearance.tc1.bias",
            "appearance.tc2.kernel",
            "appearance.tc2.bias",
            "appearance.tc3.kernel",
            "appearance.tc3.bias",
            "motion.tc1.kernel",
            "motion.tc1.bias",
            "motion.tc2.kernel",
            "motion.tc2.bias",
            "motion.tc3.kernel",
            "motion.tc3.bias",
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().iter().all(|m| m.all_finite())
    }
}

/// A model whose parameters have been placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub params: [Var; NUM_PARAM_ARRAYS],
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Latent embeddings, `s × d/2`.
    pub embeddings: Var,
    /// Temporal class activation map, `s × C`.
    pub tcam: Var,
}

impl BoundModel {
    /// Records `params` on `tape`, as leaves if `trainable` else as constants.
    pub fn bind(tape: &mut Tape, config: &ModelConfig, params: &ModelParams, trainable: bool) -> Self {
        let arrays = params.arrays();
        let params = std::array::from_fn(|i| {
            let m = arrays[i].clone();
            if trainable {
                tape.leaf(m)
            } else {
                tape.constant(m)
            }
        });
        Self {
            config: config.clone(),
            params,
        }
    }

    /// Builds a model from leaves already on the tape, in [`ModelParams::arrays`] order.
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let params: [Var; NUM_PARAM_ARRAYS] = vars
            .try_into()
            .map_err(|_| Error::Usage(format!("expected {NUM_PARAM_ARRAYS} parameter arrays")))?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Gradients of the bound parameters, in [`ModelParams`] layout.
    pub fn gradients(&self, tape: &Tape) -> ModelParams {
        let mut out = ModelParams::zeros(&self.config);
        for (dst, &v) in out.arrays_mut().into_iter().zip(&self.params) {
            *dst = tape.grad(v).clone();
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, rgb: &Matrix, flow: &Matrix) -> Result<ForwardOutput> {
        let cfg = &self.config;
        for (name, m) in [("rgb", rgb), ("flow", flow)] {
            if m.cols() != cfg.feature_dim || m.rows() == 0 {
                return Err(Error::shape(
                    "forward",
                    format!("{name} features {:?}, expected s x {}", m.shape(), cfg.feature_dim),
                ));
            }
        }
        if rgb.rows() != flow.rows() {
            return Err(Error::shape(
                "forward",
                format!("rgb has {} snippets, flow has {}", rgb.rows(), flow.rows()),
            ));
        }
        let rgb = tape.constant(rgb.clone());
        let flow = tape.constant(flow.clone());
        let (h_rgb, a_rgb) = self.stream(tape, &self.params[..6], rgb)?;
        let (h_flow, a_flow) = self.stream(tape, &self.params[6..], flow)?;
        let h_sum = tape.add(h_rgb, h_flow)?;
        let embeddings = tape.scale(h_sum, 0.5);
        let a_sum = tape.add(a_rgb, a_flow)?;
        let tcam = tape.scale(a_sum, 0.5);
        Ok(ForwardOutput { embeddings, tcam })
    }

    /// Returns the stream's second-layer activations and its sigmoid output.
    fn stream(&self, tape: &mut Tape, p: &[Var], input: Var) -> Result<(Var, Var)> {
        let (k, dil, slope) = (
            self.config.kernel_size,
            self.config.dilation,
            self.config.leaky_slope,
        );
        let z1 = tape.conv1d(input, p[0], p[1], k, dil)?;
        let h1 = tape.leaky_relu(z1, slope);
        let z2 = tape.conv1d(h1, p[2], p[3], k, dil)?;
        let h2 = tape.leaky_relu(z2, slope);
        let z3 = tape.conv1d(h2, p[4], p[5], k, dil)?;
        let a = tape.sigmoid(z3);
        Ok((h2, a))
    }
}

/// Forward pass on a fresh tape with frozen parameters; returns plain values
/// `(embeddings, tcam)`.
pub fn predict(
    config: &ModelConfig,
    params: &ModelParams,
    rgb: &Matrix,
    flow: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, config, params, false);
    let out = model.forward(&mut tape, rgb, flow)?;
    Ok((
        tape.value(out.embeddings).clone(),
        tape.value(out.tcam).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        for bad in [
            ModelConfig { feature_dim: 7, ..cfg() },
            ModelConfig { kernel_size: 4, ..cfg() },
            ModelConfig { num_classes: 1, ..cfg() },
            ModelConfig { dilation: 0, ..cfg() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_bias() {
        let a = ModelParams::init(&cfg()).unwrap();
        let b = ModelParams::init(&cfg()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 1, ..cfg() }).unwrap();
        assert_ne!(a, c);
        for (i, m) in a.arrays().iter().enumerate() {
            if i % 2 == 1 {
                assert!(m.as_slice().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_params_give_half_tcam() {
        let config = cfg();
        let params = ModelParams::zeros(&config);
        let x = Matrix::filled(5, 8, 0.3);
        let (emb, tcam) = predict(&config, &params, &x, &x).unwrap();
        assert_eq!(emb.shape(), (5, 4));
        assert_eq!(tcam, Matrix::filled(5, 3, 0.5));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let config = cfg();
        let params = ModelParams::zeros(&config);
        let bad = Matrix::zeros(5, 6);
        let ok = Matrix::zeros(5, 8);
        assert!(matches!(predict(&config, &params, &bad, &ok), Err(Error::Shape { .. })));
        let short = Matrix::zeros(4, 8);
        assert!(matches!(predict(&config, &params, &ok, &short), Err(Error::Shape { .. })));
    }
}
