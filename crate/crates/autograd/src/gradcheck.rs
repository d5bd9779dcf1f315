//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{BatchNormMode, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step for the central difference `(f(x+h) − f(x−h)) / 2h`.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Tensors with at most this many elements are checked exhaustively;
    /// larger ones get exactly this many sampled coordinates.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
    /// Coordinates passed over because the loss has a hinge within one
    /// step of them (see [`is_hinge`]).
    pub hinges_skipped: usize,
    pub passed: bool,
}

/// Relative error with a small absolute floor so that gradients that are
/// zero on both sides compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Relative disagreement of the one-sided differences above which a
/// coordinate is treated as sitting on a hinge.
pub const HINGE_RATIO: f64 = 1e-3;

/// True when the forward and backward one-sided differences disagree,
/// meaning a non-differentiable point (a ReLU or `|x|` hinge) lies within
/// one step. A wrong analytic gradient cannot cause this, since both
/// differences come from the forward pass alone.
pub fn is_hinge(minus: f64, base: f64, plus: f64, step: f64) -> bool {
    let fwd = (plus - base) / step;
    let bwd = (base - minus) / step;
    (fwd - bwd).abs() > HINGE_RATIO * fwd.abs().max(bwd.abs()).max(1e-6)
}

/// Compares analytic and numeric gradients of the scalar produced by
/// `build` with respect to every tensor in `params`.
///
/// `build` receives a fresh graph and the parameter handles (in the order
/// of `params`) and must return a scalar node. It is called once for the
/// analytic pass and twice per checked coordinate.
pub fn grad_check<F>(
    mut build: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(invalid(
            "grad_check",
            format!("step must be positive, got {}", opts.step),
        ));
    }
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        g.backward(root)?;
        ids.iter()
            .zip(params)
            .map(|(id, p)| {
                g.grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    };

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let base = eval(&work)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        hinges_skipped: 0,
        passed: true,
    };
    for t in 0..params.len() {
        let n = params[t].numel();
        // Candidates in random order; hinge coordinates are replaced by
        // the next candidate so sampled tensors still get the full quota.
        let candidates: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, n).into_vec()
        };
        let mut checked = 0;
        for i in candidates {
            if checked == opts.samples_per_tensor {
                break;
            }
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            if is_hinge(minus, base, plus, opts.step) {
                report.hinges_skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[t].data()[i], numeric);
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, i));
            }
        }
    }
    report.passed = report.coordinates_checked > 0 && report.max_rel_error < opts.tolerance;
    Ok(report)
}

/// Outcome of one named entry of [`operator_suite`].
#[derive(Clone, Debug)]
pub struct OperatorCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // magnitudes in [margin, 1] keep inputs clear of kinks at zero
            let m = rng.gen_range(margin..=1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Reduces `x` to a scalar through a fixed random linear functional so
/// that every coordinate gets a distinct, nonzero upstream gradient.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(x).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&mut rng, &[n, 1], 0.1));
    let flat = g.reshape(x, &[1, n])?;
    let y = g.matmul(flat, w)?;
    Ok(g.sum(y))
}

/// Runs a finite-difference check on every operator of the engine at
/// randomly drawn inputs.
pub fn operator_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<OperatorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = seed ^ 0x5151;
    let mut cases: Vec<(&'static str, Vec<Tensor>, Builder)> = Vec::new();
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, 0.0);

    cases.push((
        "matmul",
        vec![r(&[3, 4]), r(&[4, 5])],
        Box::new(move |g, p| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "matmul_rank3",
        vec![r(&[2, 3, 4]), r(&[4, 2])],
        Box::new(move |g, p| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "batch_matmul",
        vec![r(&[2, 3, 4]), r(&[2, 4, 2])],
        Box::new(move |g, p| {
            let y = g.batch_matmul(p[0], p[1])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "add",
        vec![r(&[3, 4]), r(&[3, 4])],
        Box::new(move |g, p| {
            let y = g.add(p[0], p[1])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "add_broadcast",
        vec![r(&[2, 3, 4]), r(&[4])],
        Box::new(move |g, p| {
            let y = g.add(p[0], p[1])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "scale",
        vec![r(&[3, 4])],
        Box::new(move |g, p| {
            let y = g.scale(p[0], -0.37);
            project(g, y, ps)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![r(&[3, 4])],
        Box::new(move |g, p| {
            let y = g.sigmoid(p[0]);
            project(g, y, ps)
        }),
    ));
    cases.push((
        "softmax",
        vec![r(&[3, 5])],
        Box::new(move |g, p| {
            let y = g.softmax(p[0]);
            project(g, y, ps)
        }),
    ));
    cases.push((
        "masked_softmax",
        vec![r(&[2, 4])],
        Box::new(move |g, p| {
            let keep = vec![true, true, false, true, false, true, true, false];
            let y = g.masked_softmax(p[0], keep)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "concat_tokens",
        vec![r(&[2, 3, 4]), r(&[2, 1, 4])],
        Box::new(move |g, p| {
            let y = g.concat(&[p[0], p[1]], 1)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "concat_features",
        vec![r(&[3, 2]), r(&[3, 4])],
        Box::new(move |g, p| {
            let y = g.concat(&[p[0], p[1]], 1)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "slice",
        vec![r(&[2, 6, 3])],
        Box::new(move |g, p| {
            let y = g.slice(p[0], 1, 2, 3)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "transpose",
        vec![r(&[2, 3, 4])],
        Box::new(move |g, p| {
            let y = g.transpose(p[0])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "reshape",
        vec![r(&[2, 6])],
        Box::new(move |g, p| {
            let y = g.reshape(p[0], &[3, 4])?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "mean",
        vec![r(&[2, 5, 3])],
        Box::new(move |g, p| {
            let y = g.mean(p[0], 1)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "sum",
        vec![r(&[3, 4])],
        Box::new(move |g, p| Ok(g.sum(p[0]))),
    ));
    cases.push((
        "batch_norm_training",
        vec![r(&[6, 4]), r(&[4]), r(&[4])],
        Box::new(move |g, p| {
            let (y, _) = g.batch_norm(p[0], p[1], p[2], 1e-5, BatchNormMode::Training)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "batch_norm_inference",
        vec![r(&[5, 3]), r(&[3]), r(&[3])],
        Box::new(move |g, p| {
            let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
            let mode = BatchNormMode::Inference {
                mean: &mean,
                var: &var,
            };
            let (y, _) = g.batch_norm(p[0], p[1], p[2], 1e-5, mode)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![r(&[2, 3, 5]), r(&[5]), r(&[5])],
        Box::new(move |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "dropout",
        vec![r(&[4, 5])],
        Box::new(move |g, p| {
            let y = g.dropout(p[0], 0.3, 99)?;
            project(g, y, ps)
        }),
    ));
    cases.push((
        "bce_with_logits",
        vec![r(&[6])],
        Box::new(move |g, p| g.bce_with_logits(p[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])),
    ));
    cases.push((
        "gather_rows",
        vec![r(&[5, 3])],
        Box::new(move |g, p| {
            let y = g.gather_rows(p[0], &[4, 0, 4, 2], &[2, 2])?;
            project(g, y, ps)
        }),
    ));
    // Kinked operators get inputs bounded away from the kink.
    cases.push((
        "relu",
        vec![random_tensor(&mut rng, &[3, 4], 0.05)],
        Box::new(move |g, p| {
            let y = g.relu(p[0]);
            project(g, y, ps)
        }),
    ));
    let a = random_tensor(&mut rng, &[3, 4], 0.0);
    let offset = random_tensor(&mut rng, &[3, 4], 0.05);
    let b = Tensor::new(
        &[3, 4],
        a.data()
            .iter()
            .zip(offset.data())
            .map(|(x, o)| x + o)
            .collect(),
    )?;
    cases.push((
        "abs_diff",
        vec![a, b],
        Box::new(move |g, p| {
            let y = g.abs_diff(p[0], p[1])?;
            project(g, y, ps)
        }),
    ));

    cases
        .into_iter()
        .map(|(name, params, build)| {
            let report = grad_check(|g, p| build(g, p), &params, opts)?;
            Ok(OperatorCheck { name, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_matches_tightly() {
        let w = Tensor::new(&[3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let x = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let report = grad_check(
            |g, p| {
                let y = g.matmul(p[1], p[0])?;
                Ok(g.sum(y))
            },
            &[w, x],
            &GradCheckOptions {
                tolerance: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates_checked, 18);
    }

    #[test]
    fn detects_wrong_gradient() {
        // The constant copy hides the dependence from the tape, so the
        // analytic gradient is zero while the loss clearly varies.
        let x = Tensor::from_vec(vec![0.7, -0.2]);
        let report = grad_check(
            |g, p| {
                let c = g.constant(g.value(p[0]).clone());
                let y = g.sigmoid(c);
                Ok(g.sum(y))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.hinges_skipped, 0);
    }

    #[test]
    fn hinges_are_skipped_not_passed() {
        let x = Tensor::from_vec(vec![0.0, 0.5]);
        let report = grad_check(
            |g, p| {
                let y = g.relu(p[0]);
                Ok(g.sum(y))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.hinges_skipped, 1);
        assert_eq!(report.coordinates_checked, 1);
        assert!(report.passed);
        assert!(is_hinge(0.0, 0.0, 1e-5, 1e-5));
        assert!(!is_hinge(0.25 - 1e-5, 0.25, 0.25 + 1e-5, 1e-5));
    }

    #[test]
    fn large_tensors_are_sampled() {
        let x = Tensor::full(&[10, 20], 0.3);
        let report = grad_check(
            |g, p| {
                let y = g.sigmoid(p[0]);
                Ok(g.sum(y))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 64);
        assert!(report.passed);
    }

    #[test]
    fn every_operator_passes() {
        let checks = operator_suite(3, &GradCheckOptions::default()).unwrap();
        assert!(checks.len() >= 20);
        for c in &checks {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|g, p| Ok(g.sum(p[0])), &[Tensor::scalar(1.0)], &opts).is_err());
    }
}
