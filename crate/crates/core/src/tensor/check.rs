//! Finite-difference verification of tape gradients.

use super::{NodeId, Tape, Tensor, TensorError, TensorResult};

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Gradient from the reverse pass.
    pub analytic: Tensor,
    /// Central finite differences of an f64 replay of the same graph.
    pub finite_diff: Tensor,
    /// max over elements of |a - f| / max(|a|, |f|, 1e-8)
    pub max_rel_err: f64,
    /// Element index attaining `max_rel_err`.
    pub worst_index: usize,
    pub pass: bool,
}

/// Records `f` once on a fresh tape, computes the analytic gradient of its
/// scalar output with respect to `input`, and compares per element against
/// central finite differences with step `fd_step` evaluated by replaying the
/// recorded graph in f64.
pub fn grad_check<F>(f: F, input: &Tensor, fd_step: f64, tolerance: f64) -> TensorResult<GradReport>
where
    F: Fn(&mut Tape, NodeId) -> TensorResult<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let root = f(&mut tape, x)?;
    let analytic = tape.backward(root, &[x])?.into_iter().next().unwrap();

    let base: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let mut probe = base.clone();
    let mut fd = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        probe[i] = base[i] + fd_step;
        let hi = tape.replay_root_f64(root, &[(x, &probe)])?;
        probe[i] = base[i] - fd_step;
        let lo = tape.replay_root_f64(root, &[(x, &probe)])?;
        probe[i] = base[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(TensorError::Invalid {
                op: "grad_check",
                detail: format!("non-finite probe value at element {i}"),
            });
        }
        fd[i] = (hi - lo) / (2.0 * fd_step);
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (&a, &fdi)) in analytic.data().iter().zip(fd.iter()).enumerate() {
        let err = rel_err(a as f64, fdi);
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    let finite_diff = Tensor::from_parts(
        input.shape().to_vec(),
        fd.iter().map(|&v| v as f32).collect(),
    );
    Ok(GradReport {
        analytic,
        finite_diff,
        max_rel_err,
        worst_index,
        pass: max_rel_err <= tolerance,
    })
}

pub(crate) fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}
