//! Finite-difference checks for every differentiable kernel, with fixed
//! inputs drawn from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{loss_multiscale, PerceptualExtractor, ScalePrediction};
use crate::tensor::{convlstm_cell, grad_check, Tape, Tensor, Var};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`run_op`], in suite order.
pub const OPS: &[&str] = &[
    "conv2d",
    "deform_conv2d",
    "convlstm",
    "grid_sample",
    "upsample2",
    "avgpool2",
    "normalize",
    "l1",
    "multiscale_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    /// Largest relative error per input, in argument order.
    pub per_input: Vec<f64>,
    pub checked: usize,
    pub passed: bool,
}

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn new(seed: u64, op: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(op as u64 + 1);
        Self { rng }
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::uniform(shape, lo, hi, &mut self.rng)
    }

    /// Values whose fractional parts keep at least `2 * eps` from integers,
    /// so bilinear sampling stays away from its kinks.
    fn off_lattice(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let margin = 2.0 * SUITE_EPS + 1e-6;
        let mut t = self.uniform(shape, lo, hi);
        for v in t.data_mut() {
            let f = *v - v.floor();
            if f < margin {
                *v += margin;
            } else if f > 1.0 - margin {
                *v -= margin;
            }
        }
        t
    }
}

fn check<F>(name: &str, op: F, inputs: &[Tensor]) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = grad_check(op, inputs, SUITE_EPS, 0)?;
    Ok(OpCheck {
        op: name.to_string(),
        passed: r.passes(SUITE_TOLERANCE),
        max_rel_error: r.max_rel_error,
        per_input: r.per_input,
        checked: r.checked,
    })
}

/// Checks one named operation.
pub fn run_op(name: &str, seed: u64) -> Result<OpCheck> {
    let idx = OPS
        .iter()
        .position(|o| *o == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown op {name:?}; known: {}", OPS.join(", "))))?;
    let mut g = Inputs::new(seed, idx);
    match name {
        "conv2d" => {
            let inputs = [
                g.uniform(&[2, 2, 6, 5], -1.0, 1.0),
                g.uniform(&[3, 2, 3, 3], -1.0, 1.0),
                g.uniform(&[3], -1.0, 1.0),
            ];
            let a = check(name, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), &inputs)?;
            let b = check(name, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), &inputs)?;
            Ok(worse(a, b))
        }
        "deform_conv2d" => {
            let inputs = [
                g.uniform(&[1, 2, 5, 5], -1.0, 1.0),
                g.off_lattice(&[1, 18, 5, 5], -1.5, 1.5),
                g.uniform(&[1, 9, 5, 5], 0.0, 1.0),
                g.uniform(&[2, 2, 3, 3], -1.0, 1.0),
            ];
            check(
                name,
                |t, v| t.deform_conv2d(v[0], v[1], v[2], v[3], None, 1, 1),
                &inputs,
            )
        }
        "convlstm" => {
            let (cx, hid) = (2, 2);
            let inputs = [
                g.uniform(&[1, cx, 4, 4], -1.0, 1.0),
                g.uniform(&[1, hid, 4, 4], -1.0, 1.0),
                g.uniform(&[1, hid, 4, 4], -1.0, 1.0),
                g.uniform(&[4 * hid, cx + hid, 3, 3], -0.3, 0.3),
                g.uniform(&[4 * hid], -1.0, 1.0),
            ];
            check(
                name,
                |t, v| {
                    let (h, c) = convlstm_cell(t, v[0], v[1], v[2], v[3], v[4])?;
                    t.concat_channels(&[h, c])
                },
                &inputs,
            )
        }
        "grid_sample" => {
            let x = g.uniform(&[1, 2, 4, 5], -1.0, 1.0);
            let coords = g.off_lattice(&[1, 2, 3, 3], 0.5, 3.5);
            check(name, |t, v| t.grid_sample(v[0], v[1]), &[x, coords])
        }
        "upsample2" => {
            let x = g.uniform(&[1, 2, 3, 4], -1.0, 1.0);
            check(name, |t, v| t.upsample2(v[0]), &[x])
        }
        "avgpool2" => {
            let x = g.uniform(&[1, 2, 4, 6], -1.0, 1.0);
            check(name, |t, v| t.avgpool2(v[0]), &[x])
        }
        "normalize" => {
            let x = g.uniform(&[1, 3, 3, 3], -1.0, 1.0);
            check(name, |t, v| t.normalize_channels(v[0], 1e-10), &[x])
        }
        "l1" => {
            // Keeps every difference well clear of the kink at zero.
            let a = g.uniform(&[1, 2, 4, 4], -1.0, 1.0);
            let b = a.map(|v| if v > 0.0 { v - 0.25 } else { v + 0.25 });
            check(name, |t, v| t.l1_mean(v[0], v[1]), &[a, b])
        }
        "multiscale_loss" => {
            let e0 = g.uniform(&[1, 1, 8, 8], 0.0, 1.0);
            let e1 = g.uniform(&[1, 1, 4, 4], 0.0, 1.0);
            let gt = g.uniform(&[1, 1, 8, 8], 0.0, 1.0);
            let extractor = PerceptualExtractor::new(1);
            check(
                name,
                |t, v| {
                    let preds = [
                        ScalePrediction {
                            residual: v[0],
                            estimate: v[0],
                        },
                        ScalePrediction {
                            residual: v[1],
                            estimate: v[1],
                        },
                    ];
                    Ok(loss_multiscale(t, &preds, v[2], 0.1, &extractor)?.total)
                },
                &[e0, e1, gt],
            )
        }
        _ => unreachable!("name validated above"),
    }
}

fn worse(a: OpCheck, b: OpCheck) -> OpCheck {
    let per_input = a.per_input.iter().zip(&b.per_input).map(|(x, y)| x.max(*y)).collect();
    OpCheck {
        op: a.op,
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        per_input,
        checked: a.checked + b.checked,
        passed: a.passed && b.passed,
    }
}

/// Runs every op in [`OPS`].
pub fn run_all(seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| run_op(op, seed)).collect()
}
