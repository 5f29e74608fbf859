use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `size×size` Gaussian kernel normalized to sum 1.
///
/// Entries are proportional to `exp(-(dx² + dy²) / (2σ²))` with offsets
/// measured from the center cell. `sigma = f64::INFINITY` gives a box filter.
pub fn gaussian_kernel2d(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd and positive, got {size}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let half = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            data.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(vec![size, size], data)
}
