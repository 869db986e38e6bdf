use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/dim))`.
pub fn sinusoidal_pe<T: Real>(count: usize, dim: usize) -> Result<Tensor<T>> {
    if count == 0 {
        return Err(Error::Config(
            "positional table needs at least one row".into(),
        ));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dimension must be even and >= 2, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(count * dim);
    for pos in 0..count {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::new([count, dim], data)
}
