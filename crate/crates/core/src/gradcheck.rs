//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable operation is checked by rebuilding its forward pass
//! with each input element nudged by ±epsilon and comparing the resulting
//! slope against the gradient from one backward pass. The relative error is
//! measured against the largest gradient magnitude of that input, so
//! near-zero components of an otherwise healthy gradient do not produce
//! spurious failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Phase, TensorId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Max relative error per input tensor, in input order.
    pub per_input: Vec<f64>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

/// Checks the gradient of a scalar-valued computation. `build` receives the
/// inputs as requires_grad leaves and must return a scalar output id.
pub fn grad_check<F>(build: F, inputs: &[Tensor], epsilon: f64, tolerance: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &ids)?;
        g.value(out).item()
    };

    // Analytic gradients from one backward pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = build(&mut g, &ids)?;
    if g.value(out).numel() != 1 {
        return Err(Error::dim(
            "grad_check",
            format!("reduction must be scalar, got {:?}", g.shape(out)),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient populated").to_vec())
        .collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let f_plus = eval(&work).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    context: format!("perturbation +eps of input {i}, element {j}"),
                },
                other => other,
            })?;
            work[i].data_mut()[j] = orig - epsilon;
            let f_minus = eval(&work).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    context: format!("perturbation -eps of input {i}, element {j}"),
                },
                other => other,
            })?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (f_plus - f_minus) / (2.0 * epsilon);
        }
        let scale = analytic[i]
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let max_err = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0f64, f64::max);
        per_input.push(max_err);
    }
    Ok(CheckReport { per_input, tolerance })
}

// ── layer suite ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at the origin
/// where a central difference is not meaningful.
fn random_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn one_hot_target(leading: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let sites: usize = leading.iter().product();
    let mut data = vec![0.0; sites * k];
    for s in 0..sites {
        let hot = rng.gen_range(0..k);
        data[s * k + hot] = 1.0;
    }
    let mut shape = leading.to_vec();
    shape.push(k);
    Tensor::new(shape, data).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so the
/// check exercises a generic cotangent rather than the all-ones one.
fn weighted_sum(g: &mut Graph, out: TensorId, weights: &Tensor) -> Result<TensorId> {
    let w = g.leaf(weights.clone(), false)?;
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Runs the finite-difference suite over every differentiable layer, with
/// `seeds` random instances per layer. Tolerance 1e-6 at 64-bit, epsilon 1e-5.
pub fn run_layer_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    const TOL: f64 = 1e-6;
    const EPS: f64 = 1e-5;
    let mut entries = Vec::new();

    let mut check = |name: &'static str,
                     run: &mut dyn FnMut(u64) -> Result<CheckReport>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            let report = run(s)?;
            worst = worst.max(report.max_error());
        }
        entries.push(SuiteEntry {
            name,
            max_error: worst,
            tolerance: TOL,
            passed: worst <= TOL,
        });
        Ok(())
    };

    check("matmul", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 1);
        let a = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[4, 2], &mut r);
        let w = random_tensor(&[3, 2], &mut r);
        grad_check(
            |g, ids| {
                let out = g.matmul(ids[0], ids[1])?;
                weighted_sum(g, out, &w)
            },
            &[a, b],
            EPS,
            TOL,
        )
    })?;

    check("conv2d_valid", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 2);
        let x = random_tensor(&[5, 6, 2], &mut r);
        let k = random_tensor(&[3, 3, 2, 3], &mut r);
        let b = random_tensor(&[3], &mut r);
        let w = random_tensor(&[3, 4, 3], &mut r);
        grad_check(
            |g, ids| {
                let out = g.conv2d(ids[0], ids[1], ids[2], Padding::Valid)?;
                weighted_sum(g, out, &w)
            },
            &[x, k, b],
            EPS,
            TOL,
        )
    })?;

    check("conv2d_same", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 3);
        let x = random_tensor(&[5, 6, 2], &mut r);
        let k = random_tensor(&[3, 3, 2, 3], &mut r);
        let b = random_tensor(&[3], &mut r);
        let w = random_tensor(&[5, 6, 3], &mut r);
        grad_check(
            |g, ids| {
                let out = g.conv2d(ids[0], ids[1], ids[2], Padding::Same)?;
                weighted_sum(g, out, &w)
            },
            &[x, k, b],
            EPS,
            TOL,
        )
    })?;

    check("deconv2d_2x2_stride2", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 4);
        let x = random_tensor(&[3, 4, 3], &mut r);
        let k = random_tensor(&[2, 2, 2, 3], &mut r);
        let b = random_tensor(&[2], &mut r);
        let w = random_tensor(&[6, 8, 2], &mut r);
        grad_check(
            |g, ids| {
                let out = g.deconv2d(ids[0], ids[1], ids[2], 2)?;
                weighted_sum(g, out, &w)
            },
            &[x, k, b],
            EPS,
            TOL,
        )
    })?;

    check("deconv2d_boundary_stride1", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 5);
        let x = random_tensor(&[4, 3, 2], &mut r);
        let k = random_tensor(&[4, 1, 2, 2], &mut r);
        let b = random_tensor(&[2], &mut r);
        let w = random_tensor(&[7, 3, 2], &mut r);
        grad_check(
            |g, ids| {
                let out = g.deconv2d(ids[0], ids[1], ids[2], 1)?;
                weighted_sum(g, out, &w)
            },
            &[x, k, b],
            EPS,
            TOL,
        )
    })?;

    check("maxpool2", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 6);
        let x = random_tensor(&[4, 6, 3], &mut r);
        let w = random_tensor(&[2, 3, 3], &mut r);
        grad_check(
            |g, ids| {
                let out = g.maxpool2(ids[0])?;
                weighted_sum(g, out, &w)
            },
            &[x],
            EPS,
            TOL,
        )
    })?;

    check("batchnorm_train", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
        let x = random_tensor(&[2, 3, 2, 3], &mut r);
        let gamma = random_tensor(&[3], &mut r);
        let beta = random_tensor(&[3], &mut r);
        let w = random_tensor(&[2, 3, 2, 3], &mut r);
        grad_check(
            |g, ids| {
                let mut rm = vec![0.0; 3];
                let mut rv = vec![1.0; 3];
                let out = g.batchnorm(ids[0], ids[1], ids[2], &mut rm, &mut rv, Phase::Train, 0.9)?;
                weighted_sum(g, out, &w)
            },
            &[x, gamma, beta],
            EPS,
            TOL,
        )
    })?;

    check("dense", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 8);
        let x = random_tensor(&[3, 4], &mut r);
        let w = random_tensor(&[4, 5], &mut r);
        let b = random_tensor(&[5], &mut r);
        let wt = random_tensor(&[3, 5], &mut r);
        grad_check(
            |g, ids| {
                let out = g.dense(ids[0], ids[1], ids[2])?;
                weighted_sum(g, out, &wt)
            },
            &[x, w, b],
            EPS,
            TOL,
        )
    })?;

    check("relu", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 9);
        let x = random_tensor_off_kink(&[7, 5], &mut r);
        let w = random_tensor(&[7, 5], &mut r);
        grad_check(
            |g, ids| {
                let out = g.relu(ids[0])?;
                weighted_sum(g, out, &w)
            },
            &[x],
            EPS,
            TOL,
        )
    })?;

    check("softmax", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 10);
        let x = random_tensor(&[4, 3], &mut r);
        let w = random_tensor(&[4, 3], &mut r);
        grad_check(
            |g, ids| {
                let out = g.softmax(ids[0], 1)?;
                weighted_sum(g, out, &w)
            },
            &[x],
            EPS,
            TOL,
        )
    })?;

    check("cross_entropy_image_level", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 11);
        let z = random_tensor(&[3, 2], &mut r);
        let t = one_hot_target(&[3], 2, &mut r);
        grad_check(|g, ids| g.cross_entropy(ids[0], &t), &[z], EPS, TOL)
    })?;

    check("cross_entropy_per_pixel", &mut |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + 12);
        let z = random_tensor(&[2, 4, 4, 2], &mut r);
        let t = one_hot_target(&[2, 4, 4], 2, &mut r);
        grad_check(|g, ids| g.cross_entropy(ids[0], &t), &[z], EPS, TOL)
    })?;

    Ok(entries)
}
