//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Everything here runs in `f64`. The checker only ever evaluates the forward
//! pass to build its numeric estimate, so it stays independent of the
//! backward rules it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Step for compositions containing ReLU, small enough that the stencil
/// rarely straddles a kink.
pub const COMPOSED_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Maximum deviation between analytic and numeric gradients over all
/// trainable inputs, relative to the largest gradient magnitude.
///
/// `build` must construct a scalar loss from the given leaf variables; it is
/// called once for the analytic pass and twice per input element.
pub fn relative_error<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst_diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
    }
    Ok(worst_diff / scale.max(1e-8))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so that kinks (relu, |x|) are not straddled
/// by the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any tensor to a scalar through a fixed random projection, so
/// that every output element carries a distinct weight.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = uniform(&mut rng, tape.shape(x), -1.0, 1.0);
    let r = tape.constant(r);
    let y = tape.mul(x, r)?;
    Ok(tape.sum(y))
}

type Case = (&'static str, fn(u64) -> Result<f64>);

fn case_binary(seed: u64, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    relative_error(&[a, b], DEFAULT_EPS, |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, seed)
    })
}

/// Every differentiable tape operation, each with its own random inputs.
pub fn op_cases() -> Vec<Case> {
    vec![
        ("add", |s| case_binary(s, |t, a, b| t.add(a, b))),
        ("sub", |s| case_binary(s, |t, a, b| t.sub(a, b))),
        ("mul", |s| case_binary(s, |t, a, b| t.mul(a, b))),
        ("scale", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = uniform(&mut rng, &[5], -1.0, 1.0);
            relative_error(&[a], DEFAULT_EPS, |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y, s)
            })
        }),
        ("add_channel_bias", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[3, 2, 2], -1.0, 1.0);
            let b = uniform(&mut rng, &[3], -1.0, 1.0);
            relative_error(&[x, b], DEFAULT_EPS, |t, v| {
                let y = t.add_channel_bias(v[0], v[1])?;
                project(t, y, s)
            })
        }),
        ("relu", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = away_from_zero(&mut rng, &[4, 3]);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let y = t.relu(v[0]);
                project(t, y, s)
            })
        }),
        ("exp", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[6], -2.0, 2.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let y = t.exp(v[0]);
                project(t, y, s)
            })
        }),
        ("log", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[6], 0.2, 3.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let y = t.log(v[0]);
                project(t, y, s)
            })
        }),
        ("sum", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            })
        }),
        ("mean", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            })
        }),
        ("sum_axis0", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[3, 2, 2], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let y = t.sum_axis0(v[0])?;
                project(t, y, s)
            })
        }),
        ("matmul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
            relative_error(&[a, b], DEFAULT_EPS, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, s)
            })
        }),
        ("transpose_reshape", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            relative_error(&[a], DEFAULT_EPS, |t, v| {
                let y = t.transpose(v[0])?;
                let y = t.reshape(y, &[2, 6])?;
                project(t, y, s)
            })
        }),
        ("conv2d_strided", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
            let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            relative_error(&[x, k], DEFAULT_EPS, |t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1, 1)?;
                project(t, y, s)
            })
        }),
        ("conv2d_dilated", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 5, 5], -1.0, 1.0);
            let k = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            relative_error(&[x, k], DEFAULT_EPS, |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 2, 2)?;
                project(t, y, s)
            })
        }),
        ("avg_pool2d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 5, 7], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let y = t.avg_pool2d(v[0], 2)?;
                project(t, y, s)
            })
        }),
        ("bilinear_resize", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let up = t.bilinear_resize(v[0], 7, 5)?;
                let down = t.bilinear_resize(up, 2, 3)?;
                let a = project(t, up, s)?;
                let b = project(t, down, s + 1)?;
                t.add(a, b)
            })
        }),
        ("softmax", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[4, 3], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let a = t.softmax(v[0], 0, 0.5)?;
                let b = t.softmax(v[0], 1, 2.0)?;
                let pa = project(t, a, s)?;
                let pb = project(t, b, s + 1)?;
                t.add(pa, pb)
            })
        }),
        ("softmax_masked", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[4, 3], -1.0, 1.0);
            let keep: Vec<bool> = (0..12).map(|i| i / 3 != 1 || i % 3 == 0).collect();
            relative_error(&[x], DEFAULT_EPS, move |t, v| {
                let a = t.softmax_masked(v[0], 0, 0.3, Some(&keep))?;
                project(t, a, s)
            })
        }),
        ("center", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[4, 2, 3], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let y = t.center(v[0])?;
                project(t, y, s)
            })
        }),
        ("weighted_mean", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[3, 2, 2], -1.0, 1.0);
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            relative_error(&[x], DEFAULT_EPS, move |t, v| {
                let y = t.weighted_mean(v[0], &w)?;
                project(t, y, s)
            })
        }),
        ("gather_concat_stack_select", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[3, 2, 3], -1.0, 1.0);
            relative_error(&[x], DEFAULT_EPS, |t, v| {
                let a = t.gather_columns(v[0], &[4, 0, 4])?;
                let b = t.gather_columns(v[0], &[1])?;
                let c = t.concat_columns(&[a, b])?;
                let st = t.stack(&[c, c])?;
                let sel = t.select(st, 1)?;
                project(t, sel, s)
            })
        }),
        ("cosine_matrix", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let q = uniform(&mut rng, &[5, 6], -1.0, 1.0);
            let p = uniform(&mut rng, &[5, 3], -1.0, 1.0);
            relative_error(&[q, p], DEFAULT_EPS, |t, v| {
                let c = t.cosine_matrix(v[0], v[1])?;
                project(t, c, s)
            })
        }),
        ("cosine_columns", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = uniform(&mut rng, &[5, 2, 2], -1.0, 1.0);
            let b = uniform(&mut rng, &[5, 2, 2], -1.0, 1.0);
            relative_error(&[a, b], DEFAULT_EPS, |t, v| {
                let c = t.cosine_columns(v[0], v[1])?;
                project(t, c, s)
            })
        }),
        ("weighted_cross_entropy", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let logits = uniform(&mut rng, &[2, 3, 3], -2.0, 2.0);
            let target: Vec<bool> = (0..9).map(|_| rng.gen_bool(0.5)).collect();
            relative_error(&[logits], DEFAULT_EPS, move |t, v| {
                let p = t.softmax(v[0], 0, 1.0)?;
                t.weighted_cross_entropy(p, &target, [0.05, 1.0])
            })
        }),
    ]
}

/// Runs every op case for `seeds` consecutive seeds starting at `first_seed`.
pub fn run_op_suite(first_seed: u64, seeds: u64, tolerance: f64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        for seed in first_seed..first_seed + seeds {
            let err = case(seed)?;
            out.push(GradCheck {
                name: name.to_string(),
                seed,
                max_rel_error: err,
                passed: err < tolerance,
            });
        }
    }
    Ok(out)
}
