use nalgebra::{DMatrix, DVector};

use super::*;

/// Ridge strength of the frozen-feature regressor.
pub const PROBE_RIDGE: f64 = 1e-4;

/// Linear map from features to the four normalized angles. The bias is not
/// regularized.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    /// `[dim][4]`
    pub weights: Vec<[f64; 4]>,
    pub bias: [f64; 4],
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> [f64; 4] {
        let mut y = self.bias;
        for (xi, w) in x.iter().zip(&self.weights) {
            for k in 0..4 {
                y[k] += xi * w[k];
            }
        }
        y
    }
}

/// Closed-form ridge regression: minimizes `‖X̃w − Ỹ‖² + λ‖w‖²` on centered
/// features and targets, then restores the intercept.
pub fn ridge_fit(x: &[Vec<f64>], y: &[[f64; 4]], lambda: f64) -> Result<RidgeModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(PipelineError::Config(format!("{} feature rows vs {} targets", x.len(), y.len())));
    }
    if !(lambda > 0.0) {
        return Err(PipelineError::Config(format!("ridge strength must be positive, got {lambda}")));
    }
    let (n, d) = (x.len(), x[0].len());
    let mx: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let my: [f64; 4] = std::array::from_fn(|k| y.iter().map(|r| r[k]).sum::<f64>() / n as f64);
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - mx[j]);
    let yc = DMatrix::from_fn(n, 4, |i, k| y[i][k] - my[k]);
    let a = xc.tr_mul(&xc) + DMatrix::identity(d, d) * lambda;
    let b = xc.tr_mul(&yc);
    let w = match a.clone().cholesky() {
        Some(c) => c.solve(&b),
        None => a.lu().solve(&b).ok_or_else(|| PipelineError::Config("singular ridge system".into()))?,
    };
    let weights: Vec<[f64; 4]> = (0..d).map(|j| std::array::from_fn(|k| w[(j, k)])).collect();
    let mw = DVector::from_column_slice(&mx);
    let bias = std::array::from_fn(|k| my[k] - w.column(k).dot(&mw));
    Ok(RidgeModel { weights, bias })
}

/// Frozen backbone plus a ridge readout of its binocular embedding.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub backbone: ModelBundle,
    pub ridge: RidgeModel,
}

fn features(bundle: &ModelBundle, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    Ok(bundle.embed_pairs(samples)?.into_iter().map(|e| e.into_iter().map(f64::from).collect()).collect())
}

/// Fit the readout on labeled synthetic samples, without augmentation.
pub fn linear_probe(foundation: &ModelBundle, syn: &[Sample], lambda: f64) -> Result<LinearProbe> {
    let syn = nonempty("syn", syn)?;
    let refs: Vec<&Sample> = syn.iter().collect();
    let x = features(foundation, &refs)?;
    let y: Vec<[f64; 4]> = label_tensor(&refs)?.data().chunks_exact(4).map(|c| std::array::from_fn(|k| c[k] as f64)).collect();
    Ok(LinearProbe {
        backbone: foundation.clone(),
        ridge: ridge_fit(&x, &y, lambda)?,
    })
}

impl GazeModel for LinearProbe {
    fn predict_normalized(&self, samples: &[&Sample]) -> Result<Vec<[f32; 4]>> {
        Ok(features(&self.backbone, samples)?.iter().map(|f| self.ridge.predict(f).map(|v| v as f32)).collect())
    }

    /// Backbone parameters plus the readout; the unused gaze head is not
    /// counted.
    fn inference_params(&self) -> usize {
        let backbone: usize = self.backbone.params.iter().filter(|(n, _)| n.starts_with("backbone/")).map(|(_, t)| t.numel()).sum();
        backbone + 4 * (self.ridge.weights.len() + 1)
    }
}
