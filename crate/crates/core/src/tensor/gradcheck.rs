//! Central-difference gradient verification.

use super::{Mat, Tape, TensorId};

/// Worst relative error over all checked parameter entries.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences.
///
/// `build` reconstructs the graph on a fresh tape from leaf parameter values
/// and returns the scalar loss; it runs once per perturbed entry, so keep the
/// parameter matrices small. The relative error denominator is floored so
/// near-zero gradient pairs compare absolutely.
pub fn grad_check<F>(params: &[Mat], build: F, eps: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let run = |values: &[Mat]| -> (f64, Vec<Mat>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss);
        let grads = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(tape.value(id).dim()))
            })
            .collect();
        (tape.scalar_value(loss), grads)
    };

    let eval = |values: &[Mat]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar_value(loss)
    };

    let (_, analytic) = run(params);

    let mut max_rel_error: f64 = 0.0;
    let mut entries_checked = 0;
    let mut work: Vec<Mat> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        let (rows, cols) = params[p].dim();
        for (r, c) in (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))) {
            let orig = work[p][(r, c)];
            work[p][(r, c)] = orig + eps;
            let plus = eval(&work);
            work[p][(r, c)] = orig - eps;
            let minus = eval(&work);
            work[p][(r, c)] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = grad[(r, c)];
            let denom = fd.abs().max(ad.abs()).max(1e-4);
            max_rel_error = max_rel_error.max((fd - ad).abs() / denom);
            entries_checked += 1;
        }
    }

    GradCheckReport {
        max_rel_error,
        entries_checked,
    }
}
