//! Central finite-difference checks in 64-bit arithmetic.

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖, 1e-12)` over all inputs.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `build` records the function on a fresh tape given the input leaves and
/// returns the scalar output.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let auto: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut numeric = Vec::with_capacity(auto.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..work.len() {
        for j in 0..work[k].numel() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
    }

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in auto.iter().zip(&numeric) {
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
    Ok(GradCheck {
        rel_error: diff2.sqrt() / denom,
        max_abs_error: max_abs,
    })
}
