//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared against finite differences.
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool branch.
    pub skipped_kinks: usize,
    /// `(input index, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Above this many coordinates a seeded random subsample of this size is checked.
    pub max_coords: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 10_000,
            floor: 1e-6,
            seed: 0,
        }
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &mut F) -> Result<(Tape<f64>, Var, Vec<Var>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out).numel() != 1 {
        return Err(Error::Dimension(
            "gradcheck: function must return a scalar".into(),
        ));
    }
    Ok((tape, out, vars))
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences for every input whose `requires_grad()` flag is set.
///
/// `f` must be deterministic. Coordinates whose perturbation changes a
/// piecewise-linear branch (see [`Tape::activation_signature`]) are excluded.
pub fn gradcheck<F>(
    inputs: &[Tensor<f64>],
    mut f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, out, vars) = evaluate(inputs, &mut f)?;
    let base_sig = tape.activation_signature();
    tape.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| {
            t.requires_grad().then(|| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
        })
        .collect();
    drop(tape);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let selected: Vec<(usize, usize)> = if coords.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picks = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| coords[k]).collect()
    } else {
        coords
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for (i, j) in selected {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.h;
        let (tp, op, _) = evaluate(&work, &mut f)?;
        let (fp, sp) = (tp.value(op).item(), tp.activation_signature());
        drop(tp);
        work[i].data_mut()[j] = orig - opts.h;
        let (tm, om, _) = evaluate(&work, &mut f)?;
        let (fm, sm) = (tm.value(om).item(), tm.activation_signature());
        drop(tm);
        work[i].data_mut()[j] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.h);
        let a = analytic[i]
            .as_ref()
            .expect("selected inputs track gradients")[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
