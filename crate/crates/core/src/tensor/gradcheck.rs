use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every checked element.
    pub max_rel_error: f64,
    /// Largest relative error per input.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares tape gradients with central differences for every element of
/// every input. The op output is reduced against a fixed random cotangent
/// drawn from `seed`.
pub fn grad_check<F>(op: F, inputs: &[Tensor], eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(op, inputs, eps, seed, usize::MAX)
}

/// As [`grad_check`] but checks at most `max_per_input` randomly chosen
/// elements of each input.
pub fn grad_check_sampled<F>(
    op: F,
    inputs: &[Tensor],
    eps: f64,
    seed: u64,
    max_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_picks(op, inputs, eps, seed, |rng| {
        let mut picks = Vec::new();
        for (k, t) in inputs.iter().enumerate() {
            let n = t.len();
            if n <= max_per_input {
                picks.extend((0..n).map(|i| (k, i)));
            } else {
                picks.extend(sample(rng, n, max_per_input).into_iter().map(|i| (k, i)));
            }
        }
        picks
    })
}

/// As [`grad_check`] but checks `total` elements drawn uniformly, without
/// replacement, from all inputs together.
pub fn grad_check_total<F>(op: F, inputs: &[Tensor], eps: f64, seed: u64, total: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let all: usize = sizes.iter().sum();
    check_picks(op, inputs, eps, seed, |rng| {
        let mut flat = sample(rng, all, total.min(all)).into_vec();
        flat.sort_unstable();
        let mut picks = Vec::with_capacity(flat.len());
        let (mut k, mut base) = (0, 0);
        for f in flat {
            while f >= base + sizes[k] {
                base += sizes[k];
                k += 1;
            }
            picks.push((k, f - base));
        }
        picks
    })
}

fn check_picks<F, P>(op: F, inputs: &[Tensor], eps: f64, seed: u64, pick: P) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: FnOnce(&mut ChaCha8Rng) -> Vec<(usize, usize)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let cot = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let grads = tape.backward_with(out, cot.clone())?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = op(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(cot.data()).map(|(a, b)| a * b).sum())
    };

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, i) in pick(&mut rng) {
        let g = grads.get(vars[k]).expect("leaf gradient");
        let orig = inputs[k].data()[i];
        work[k].data_mut()[i] = orig + eps;
        let fp = eval(&work)?;
        work[k].data_mut()[i] = orig - eps;
        let fm = eval(&work)?;
        work[k].data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        per_input[k] = per_input[k].max(relative_error(g.data()[i], fd));
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        checked,
    })
}
