use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NeuralError, Scalar, Tape, Tensor, Var};

/// Above this many input coordinates only a seeded random subset is probed.
const FULL_CHECK_LIMIT: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
}

fn eval<S: Scalar, F>(graph: &F, inputs: &[Tensor<S>]) -> Result<f64, NeuralError>
where
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, NeuralError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = graph(&mut tape, &vars)?;
    Ok(tape.value(out).item().to_f64c())
}

/// Compares reverse-mode gradients of the scalar `graph(inputs)` with central
/// finite differences of step `epsilon`.
pub fn grad_check<S: Scalar, F>(graph: F, inputs: &[Tensor<S>], epsilon: f64) -> Result<GradCheckReport, NeuralError>
where
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, NeuralError>,
{
    if !(epsilon > 1e-8 && epsilon < 1e-2) {
        return Err(NeuralError::InvalidArgument(format!("epsilon {epsilon} outside (1e-8, 1e-2)")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = graph(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64c()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    if coords.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picked = sample(&mut rng, coords.len(), FULL_CHECK_LIMIT);
        coords = picked.into_iter().map(|k| coords[k]).collect();
    }

    let mut report = GradCheckReport { max_relative_error: 0.0, coordinates_checked: coords.len(), worst: (0, 0) };
    let mut probe = inputs.to_vec();
    for &(i, j) in &coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = S::from_f64c(orig.to_f64c() + epsilon);
        let plus = eval(&graph, &probe)?;
        probe[i].data_mut()[j] = S::from_f64c(orig.to_f64c() - epsilon);
        let minus = eval(&graph, &probe)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i][j];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (i, j);
        }
    }
    Ok(report)
}
