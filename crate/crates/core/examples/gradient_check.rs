//! Finite-difference check of a small conv -> GELU -> linear -> gaze loss
//! graph in 64-bit arithmetic.

use gaze_distill::losses::{gaze_loss, GazeLossConfig, LossError};
use gaze_distill::tensorcore::gradcheck::check;
use gaze_distill::tensorcore::{RngStream, Tensor, TensorError};

fn main() -> anyhow::Result<()> {
    let mut r = RngStream::new(0, 0);
    let mut rand = |shape: &[usize], s: f64| Tensor::from_fn(shape, |_| r.uniform_in(-s, s));
    let x = rand(&[2, 1, 8, 8], 1.0);
    let k = rand(&[4, 1, 3, 3], 0.5);
    let w = rand(&[4 * 16, 4], 0.2);
    let y = rand(&[2, 4], 0.3);
    let cfg = GazeLossConfig::default();
    let report = check(&[k, w], 1e-6, |t, v| {
        let xv = t.constant(x.clone());
        let h = t.conv2d(xv, v[0], None, 2, 1)?;
        let h = t.gelu(h);
        let h = t.reshape(h, &[2, 4 * 16])?;
        let p = t.matmul(h, v[1])?;
        let yv = t.constant(y.clone());
        gaze_loss(t, yv, p, &cfg).map_err(|e| match e {
            LossError::Tensor(e) => e,
            other => TensorError::InvalidAttr { op: "gaze_loss", detail: other.to_string() },
        })
    })?;
    println!("relative error {:.3e}, max abs error {:.3e}", report.rel_error, report.max_abs_error);
    anyhow::ensure!(report.rel_error < 1e-4, "gradient mismatch");
    Ok(())
}
