use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Scalar, Tensor, Var};

/// Seed of the default frozen extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_0019;

/// Frozen convolution pyramid used for perceptual and style features.
///
/// Each stage is `conv3x3 -> relu -> avg_pool(2)`; the output of every stage
/// is a tap. Weights never change after construction and enter graphs as
/// constants, so gradients reach the input but not the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T: Scalar = f32> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Default pyramid: 3 input channels, stages of 16/32/64 channels.
    pub fn seeded(seed: u64) -> Self {
        Self::random(3, &[16, 32, 64], 3, seed)
    }

    /// He-uniform random stages with zero biases.
    pub fn random(in_channels: usize, widths: &[usize], kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(widths.len());
        for &cout in widths {
            let fan_in = (cin * kernel * kernel) as f64;
            let a = (6.0 / fan_in).sqrt();
            let w = Tensor::from_fn([cout, cin, kernel, kernel], |_| {
                T::from_f64(rng.gen_range(-a..a))
            });
            stages.push((w, Tensor::zeros([cout])));
            cin = cout;
        }
        FeatureExtractor { stages }
    }

    /// Builds an extractor from externally supplied `(weight, bias)` stages.
    pub fn from_stages(stages: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        let mut prev: Option<usize> = None;
        for (i, (w, b)) in stages.iter().enumerate() {
            let (cout, cin, kh, kw) = w.dims4()?;
            if kh != kw || kh % 2 == 0 {
                return Err(Error::dim(format!(
                    "stage {i}: kernel must be odd and square"
                )));
            }
            if b.len() != cout {
                return Err(Error::dim(format!(
                    "stage {i}: bias length {} != {cout}",
                    b.len()
                )));
            }
            if let Some(p) = prev {
                if p != cin {
                    return Err(Error::dim(format!(
                        "stage {i}: expects {cin} channels, previous stage gives {p}"
                    )));
                }
            }
            prev = Some(cout);
        }
        if stages.is_empty() {
            return Err(Error::Contract("extractor needs at least one stage".into()));
        }
        Ok(FeatureExtractor { stages })
    }

    pub fn stages(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.stages
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].0.shape()[1]
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            stages: self
                .stages
                .iter()
                .map(|(w, b)| (w.cast(), b.cast()))
                .collect(),
        }
    }

    /// Tap outputs for an NCHW input already in the graph.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_channels() {
            return Err(Error::dim(format!(
                "extractor expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (w, b) in &self.stages {
            let pad = w.shape()[2] / 2;
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(cur, wv, Some(bv), ConvSpec::new(1, pad))?;
            let y = g.relu(y)?;
            let y = g.avg_pool(y, 2)?;
            taps.push(y);
            cur = y;
        }
        Ok(taps)
    }
}

impl<T: Scalar> Default for FeatureExtractor<T> {
    fn default() -> Self {
        Self::seeded(DEFAULT_EXTRACTOR_SEED)
    }
}
