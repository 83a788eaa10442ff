use rand::RngCore;

use crate::error::Result;

/// A normalized density that can be evaluated and sampled. Implemented by
/// the naturalistic mixture model and by the normalizing flow.
pub trait DensityModel: Send + Sync {
    fn dim(&self) -> usize;

    fn log_pdf(&self, x: &[f64]) -> Result<f64>;

    fn sample(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
}
