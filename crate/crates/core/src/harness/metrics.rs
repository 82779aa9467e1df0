use crate::dgp::{predict_density, DgpModel};
use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::data::Dataset;

/// `RMSE(predictions, targets) / train_std`.
pub fn standardized_rmse(predictions: &[f64], targets: &[f64], train_std: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("standardized_rmse", format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    if targets.is_empty() {
        return Err(Error::Empty("standardized_rmse"));
    }
    if !(train_std > 0.0) {
        return Err(Error::Invalid("train target std must be positive".into()));
    }
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64;
    Ok(mse.sqrt() / train_std)
}

/// Mean log density of standardized targets mapped to data units: a target
/// scale `s` contributes `−log s` per point.
pub fn unstandardized_log_lik(log_densities: &[f64], target_scale: f64) -> f64 {
    let n = log_densities.len() as f64;
    log_densities.iter().sum::<f64>() / n - target_scale.ln()
}

/// Held-out metrics of a model trained on standardized targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub srmse: f64,
    pub test_log_lik: f64,
}

/// `test` must be normalized with the train statistics.
pub fn evaluate(model: &mut DgpModel, test: &Dataset, samples: usize, rng: &mut Rng) -> Result<Evaluation> {
    let norm = test.normalization.as_ref().ok_or_else(|| Error::Data("test split is not normalized".into()))?;
    let pred = predict_density(model, &test.x, Some(&test.y), samples, rng)?;
    // Targets are standardized by the train std, so the RMSE is already in units of it.
    let srmse = standardized_rmse(&pred.mean, &test.y, 1.0)?;
    let ld = pred.log_density.expect("targets were supplied");
    Ok(Evaluation { srmse, test_log_lik: unstandardized_log_lik(&ld, norm.y_std) })
}

/// Mean test log-likelihood in data units.
pub fn test_log_likelihood(model: &mut DgpModel, test: &Dataset, samples: usize, rng: &mut Rng) -> Result<f64> {
    Ok(evaluate(model, test, samples, rng)?.test_log_lik)
}
