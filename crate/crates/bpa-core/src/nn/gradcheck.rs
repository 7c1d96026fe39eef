//! Central finite-difference gradient verification.
//!
//! Works on anything `Parameterized`: pick random scalar entries, nudge them
//! by ±h, and compare the numeric slope against the analytic gradient the
//! model's backward pass produced.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Param, Parameterized};

/// |numeric - analytic| / max(|numeric|, |analytic|, 1e-8).
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

/// A single scalar coordinate inside a named parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPick {
    pub name: String,
    pub index: usize,
}

/// Uniformly sample `k` scalar coordinates across all parameters.
pub fn pick_params<M: Parameterized>(model: &mut M, k: usize, rng: &mut ChaCha8Rng) -> Vec<ParamPick> {
    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        layout.push((name.to_string(), p.numel()));
    });
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    assert!(total > 0, "model has no parameters");
    (0..k)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            for (name, n) in &layout {
                if flat < *n {
                    return ParamPick {
                        name: name.clone(),
                        index: flat,
                    };
                }
                flat -= n;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

fn with_param<M: Parameterized, R>(
    model: &mut M,
    name: &str,
    f: impl FnOnce(&mut Param) -> R,
) -> R {
    let mut f = Some(f);
    let mut out = None;
    model.visit_params("", &mut |n, p| {
        if n == name {
            if let Some(f) = f.take() {
                out = Some(f(p));
            }
        }
    });
    out.unwrap_or_else(|| panic!("parameter not found: {name}"))
}

/// Outcome of one coordinate's check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub pick: ParamPick,
    pub numeric: f64,
    pub analytic: f64,
    pub rel_error: f64,
}

/// Run central differences at step `h` over `picks`.
///
/// `compute_grads` must zero the model's gradients, run a full forward and
/// backward, and leave the analytic gradient in `Param::grad`. `forward_loss`
/// must recompute the same scalar loss without side effects on parameters.
pub fn central_difference_check<M: Parameterized>(
    model: &mut M,
    picks: &[ParamPick],
    h: f64,
    mut forward_loss: impl FnMut(&mut M) -> f64,
    mut compute_grads: impl FnMut(&mut M),
) -> Vec<GradCheck> {
    compute_grads(model);
    let analytic: Vec<f64> = picks
        .iter()
        .map(|pick| with_param(model, &pick.name, |p| p.grad.as_slice().unwrap()[pick.index]))
        .collect();
    picks
        .iter()
        .zip(analytic)
        .map(|(pick, analytic)| {
            let nudge = |model: &mut M, delta: f64| {
                with_param(model, &pick.name, |p| {
                    p.value.as_slice_mut().unwrap()[pick.index] += delta;
                });
            };
            nudge(model, h);
            let lp = forward_loss(model);
            nudge(model, -2.0 * h);
            let lm = forward_loss(model);
            nudge(model, h);
            let numeric = (lp - lm) / (2.0 * h);
            GradCheck {
                pick: pick.clone(),
                numeric,
                analytic,
                rel_error: relative_error(numeric, analytic),
            }
        })
        .collect()
}
