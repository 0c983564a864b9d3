use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Knobs for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates probed per input tensor; `None` probes every coordinate.
    pub coords_per_input: Option<usize>,
    pub seed: u64,
    /// Lower bound on the error denominator. Coordinates whose analytic and
    /// numeric gradients are both below it are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            coords_per_input: Some(24),
            seed: 0,
            abs_floor: 1e-12,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.scalar(root)?;
    if !v.is_finite() {
        return Err(Error::Numeric(
            "non-finite objective in gradient check".into(),
        ));
    }
    Ok(v)
}

/// Largest relative disagreement between reverse-mode gradients of `f` and
/// central finite differences, over the probed coordinates.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if opts.epsilon <= 0.0 {
        return Err(Error::Contract("epsilon must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, (var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.wrt(*var, input);
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(n) if n < input.len() => sample(&mut rng, input.len(), n).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            probe[k].data_mut()[c] = orig + opts.epsilon;
            let up = evaluate(&f, &probe)?;
            probe[k].data_mut()[c] = orig - opts.epsilon;
            let down = evaluate(&f, &probe)?;
            probe[k].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
