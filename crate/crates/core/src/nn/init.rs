use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// He/Kaiming normal initialization: `N(0, 2 / fan_in)`.
pub fn kaiming_init<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config("kaiming_init requires fan_in > 0".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::stream(seed, &[]);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(&mut r))).collect();
    Tensor::from_vec(shape, data)
}
