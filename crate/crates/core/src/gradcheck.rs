//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it stays
//! independent of the reverse-mode path it is used to verify. Large leaves
//! are checked on a random sample of coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{NodeId, Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the denominator clamped away from zero.
#[inline]
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Uniform in [lo, hi).
pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences. Returns the worst relative error over all sampled
/// coordinates of all leaves.
pub fn finite_diff_max_err<F>(
    leaves: &[Tensor],
    build: F,
    h: f64,
    max_per_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient populated").to_vec())
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x, false)).collect();
        let out = build(&mut t, &ids)?;
        Ok(t.scalar_value(out))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= max_per_leaf {
            (0..n).collect()
        } else {
            sample(rng, n, max_per_leaf).into_vec()
        };
        for ci in coords {
            let orig = work[li].data[ci];
            work[li].data[ci] = orig + h;
            let f_plus = eval(&work)?;
            work[li].data[ci] = orig - h;
            let f_minus = eval(&work)?;
            work[li].data[ci] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[li][ci], numeric));
        }
    }
    Ok(worst)
}

/// One entry of the gradient-check suite.
pub struct CheckCase {
    pub module: &'static str,
    pub name: &'static str,
    pub tolerance: f64,
    pub run: Box<dyn Fn(u64) -> Result<f64>>,
}

/// Outcome of one executed check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn case<F>(module: &'static str, name: &'static str, tolerance: f64, f: F) -> CheckCase
where
    F: Fn(u64) -> Result<f64> + 'static,
{
    CheckCase { module, name, tolerance, run: Box::new(f) }
}

/// Gradient checks for the primitive tensor operations.
pub fn tensor_suite() -> Vec<CheckCase> {
    use crate::tensor::PadMode::*;
    let mut cases = Vec::new();

    cases.push(case("tensor", "matmul", 1e-6, |seed| {
        let mut r = rng(seed);
        let a = randn(&[3, 4], 1.0, &mut r);
        let b = randn(&[4, 2], 1.0, &mut r);
        finite_diff_max_err(
            &[a, b],
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                Ok(t.sum_all(c))
            },
            DEFAULT_STEP,
            64,
            &mut r,
        )
    }));

    cases.push(case("tensor", "add_mul_scale_neg", 1e-6, |seed| {
        let mut r = rng(seed);
        let a = randn(&[2, 5], 1.0, &mut r);
        let b = randn(&[2, 5], 1.0, &mut r);
        finite_diff_max_err(
            &[a, b],
            |t, ids| {
                let s = t.add(ids[0], ids[1])?;
                let m = t.mul(s, ids[1])?;
                let sc = t.scale(m, 0.7);
                let n = t.neg(sc);
                Ok(t.sum_all(n))
            },
            DEFAULT_STEP,
            64,
            &mut r,
        )
    }));

    cases.push(case("tensor", "conv2d_reflect", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[2, 5, 6], 1.0, &mut r);
        let w = randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = randn(&[3], 0.5, &mut r);
        finite_diff_max_err(
            &[x, w, b],
            |t, ids| {
                let y = t.conv2d_padded(ids[0], ids[1], ids[2], 1, 1, Reflect)?;
                Ok(t.sum_all(y))
            },
            DEFAULT_STEP,
            24,
            &mut r,
        )
    }));

    cases.push(case("tensor", "conv2d_zero_stride2", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[2, 6, 6], 1.0, &mut r);
        let w = randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = randn(&[3], 0.5, &mut r);
        finite_diff_max_err(
            &[x, w, b],
            |t, ids| {
                let y = t.conv2d_padded(ids[0], ids[1], ids[2], 2, 1, Zero)?;
                Ok(t.sum_all(y))
            },
            DEFAULT_STEP,
            24,
            &mut r,
        )
    }));

    cases.push(case("tensor", "conv2d_replicate_even_kernel", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[1, 7, 7], 1.0, &mut r);
        let w = randn(&[2, 1, 4, 4], 0.5, &mut r);
        let b = randn(&[2], 0.5, &mut r);
        finite_diff_max_err(
            &[x, w, b],
            |t, ids| {
                let y = t.conv2d_padded(ids[0], ids[1], ids[2], 2, 1, Replicate)?;
                Ok(t.sum_all(y))
            },
            DEFAULT_STEP,
            24,
            &mut r,
        )
    }));

    cases.push(case("tensor", "depthwise_conv2d", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[3, 5, 5], 1.0, &mut r);
        let w = randn(&[3, 3, 3], 0.5, &mut r);
        let b = randn(&[3], 0.5, &mut r);
        finite_diff_max_err(
            &[x, w, b],
            |t, ids| {
                let y = t.depthwise_padded(ids[0], ids[1], ids[2], 1, 1, Reflect)?;
                Ok(t.sum_all(y))
            },
            DEFAULT_STEP,
            24,
            &mut r,
        )
    }));

    cases.push(case("tensor", "instance_norm", 1e-5, |seed| {
        let mut r = rng(seed);
        let x = randn(&[2, 4, 4], 1.0, &mut r);
        let probe = randn(&[2, 4, 4], 1.0, &mut r);
        finite_diff_max_err(
            &[x, probe],
            |t, ids| {
                let y = t.instance_norm(ids[0], 1e-5)?;
                // weight the output so the gradient is not trivially zero
                let m = t.mul(y, ids[1])?;
                Ok(t.sum_all(m))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "instance_norm_affine", 1e-5, |seed| {
        let mut r = rng(seed);
        let x = randn(&[2, 3, 3], 1.0, &mut r);
        let gamma = randn(&[2], 1.0, &mut r);
        let beta = randn(&[2], 1.0, &mut r);
        let probe = randn(&[2, 3, 3], 1.0, &mut r);
        finite_diff_max_err(
            &[x, gamma, beta, probe],
            |t, ids| {
                let y = t.instance_norm(ids[0], 1e-5)?;
                let y = t.mul_channel(y, ids[1])?;
                let y = t.add_channel(y, ids[2])?;
                let m = t.mul(y, ids[3])?;
                Ok(t.sum_all(m))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "gelu", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[3, 7], 2.0, &mut r);
        finite_diff_max_err(
            &[x],
            |t, ids| {
                let y = t.gelu(ids[0]);
                Ok(t.sum_all(y))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "tanh_logsigmoid_relu", 1e-6, |seed| {
        let mut r = rng(seed);
        // keep values away from the relu kink
        let mut x = randn(&[4, 4], 2.0, &mut r);
        for v in &mut x.data {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        finite_diff_max_err(
            &[x],
            |t, ids| {
                let a = t.tanh(ids[0]);
                let b = t.log_sigmoid(a);
                let c = t.relu(b);
                let d = t.leaky_relu(c, 0.2);
                Ok(t.sum_all(d))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "softmax_rows", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[3, 5], 1.0, &mut r);
        let probe = randn(&[3, 5], 1.0, &mut r);
        finite_diff_max_err(
            &[x, probe],
            |t, ids| {
                let y = t.softmax_rows(ids[0])?;
                let m = t.mul(y, ids[1])?;
                Ok(t.sum_all(m))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "l2_normalize_rows", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[4, 6], 1.0, &mut r);
        let probe = randn(&[4, 6], 1.0, &mut r);
        finite_diff_max_err(
            &[x, probe],
            |t, ids| {
                let y = t.l2_normalize_rows(ids[0])?;
                let m = t.mul(y, ids[1])?;
                Ok(t.sum_all(m))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "cross_entropy_diag", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[5, 5], 2.0, &mut r);
        finite_diff_max_err(&[x], |t, ids| t.cross_entropy_diag(ids[0]), DEFAULT_STEP, 25, &mut r)
    }));

    cases.push(case("tensor", "reshape_transpose_concat_gather", 1e-6, |seed| {
        let mut r = rng(seed);
        let a = randn(&[3, 4], 1.0, &mut r);
        let b = randn(&[3, 2], 1.0, &mut r);
        finite_diff_max_err(
            &[a, b],
            |t, ids| {
                let cat = t.concat_cols(&[ids[0], ids[1]])?;
                let tr = t.transpose(cat)?;
                let rs = t.reshape(tr, vec![9, 2])?;
                let g = t.gather_rows(rs, &[0, 4, 4, 7])?;
                Ok(t.sum_all(g))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "concat_channels_upsample", 1e-6, |seed| {
        let mut r = rng(seed);
        let a = randn(&[2, 3, 3], 1.0, &mut r);
        let b = randn(&[1, 3, 3], 1.0, &mut r);
        finite_diff_max_err(
            &[a, b],
            |t, ids| {
                let cat = t.concat_channels(&[ids[0], ids[1]])?;
                let up = t.upsample_nearest(cat, 2)?;
                Ok(t.mean_all(up))
            },
            DEFAULT_STEP,
            32,
            &mut r,
        )
    }));

    cases.push(case("tensor", "pad2d_modes", 1e-6, |seed| {
        let mut r = rng(seed);
        let x = randn(&[1, 4, 4], 1.0, &mut r);
        finite_diff_max_err(
            &[x],
            |t, ids| {
                let a = t.pad2d(ids[0], 2, crate::tensor::PadMode::Reflect)?;
                let b = t.pad2d(ids[0], 2, crate::tensor::PadMode::Replicate)?;
                let c = t.pad2d(ids[0], 2, crate::tensor::PadMode::Zero)?;
                let ab = t.add(a, b)?;
                let abc = t.add(ab, c)?;
                Ok(t.sum_all(abc))
            },
            DEFAULT_STEP,
            16,
            &mut r,
        )
    }));

    cases.push(case("tensor", "add_row_broadcast", 1e-6, |seed| {
        let mut r = rng(seed);
        let a = randn(&[4, 3], 1.0, &mut r);
        let bias = randn(&[3], 1.0, &mut r);
        finite_diff_max_err(
            &[a, bias],
            |t, ids| {
                let y = t.add_row_broadcast(ids[0], ids[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            DEFAULT_STEP,
            16,
            &mut r,
        )
    }));

    cases
}

/// Runs every case in `cases`, optionally overriding the per-case tolerance.
pub fn run_cases(cases: Vec<CheckCase>, seed: u64, tol: Option<f64>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let err = (c.run)(seed)?;
        let tolerance = tol.unwrap_or(c.tolerance);
        out.push(CheckOutcome {
            module: c.module,
            name: c.name,
            max_rel_err: err,
            tolerance,
            passed: err < tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_ops_match_finite_differences() {
        let outcomes = run_cases(tensor_suite(), 7, None).unwrap();
        for o in &outcomes {
            assert!(
                o.passed,
                "{}::{} rel err {} over tolerance {}",
                o.module, o.name, o.max_rel_err, o.tolerance
            );
        }
    }

    #[test]
    fn rel_err_clamps_denominator() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
    }

    #[test]
    fn determinism_same_seed_same_errors() {
        let a = run_cases(tensor_suite(), 11, None).unwrap();
        let b = run_cases(tensor_suite(), 11, None).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
