//! Savitzky-Golay smoothing.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Precomputed smoothing kernel for one `(window, order)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SavitzkyGolay {
    window: usize,
    order: usize,
    coeffs: Vec<f64>,
}

impl SavitzkyGolay {
    pub fn new(window: usize, order: usize) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::invalid(
                "mppi.sg_window",
                format!("must be a positive odd integer, got {window}"),
            ));
        }
        if order >= window {
            return Err(Error::invalid(
                "mppi.sg_order",
                format!("must be smaller than the window ({window}), got {order}"),
            ));
        }
        Ok(Self {
            window,
            order,
            coeffs: coefficients(window, order),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Convolution weights, centre at index `window / 2`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// Smooths `series`, padding both ends by point reflection
    /// (`x[-j] = 2 x[0] - x[j]`), which keeps straight lines intact up to the
    /// edges.
    pub fn smooth(&self, series: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; series.len()];
        self.smooth_into(series, &mut out)?;
        Ok(out)
    }

    pub fn smooth_into(&self, series: &[f64], out: &mut [f64]) -> Result<()> {
        let n = series.len();
        if self.window > n {
            return Err(Error::invalid(
                "mppi.sg_window",
                format!("window {} exceeds the series length {n}", self.window),
            ));
        }
        if out.len() != n {
            return Err(Error::Dimension(format!(
                "output length {} does not match series length {n}",
                out.len()
            )));
        }
        let half = (self.window / 2) as isize;
        let last = n as isize - 1;
        let at = |i: isize| -> f64 {
            if i < 0 {
                2.0 * series[0] - series[(-i) as usize]
            } else if i > last {
                2.0 * series[last as usize] - series[(2 * last - i) as usize]
            } else {
                series[i as usize]
            }
        };
        for (i, o) in out.iter_mut().enumerate() {
            let centre = i as isize;
            let mut acc = 0.0;
            for (j, c) in self.coeffs.iter().enumerate() {
                acc += c * at(centre + j as isize - half);
            }
            *o = acc;
        }
        Ok(())
    }
}

/// Least-squares polynomial fit evaluated at the window centre, written as a
/// convolution: row 0 of `(A^T A)^-1 A^T` with `A[j][p] = (j - half)^p`.
fn coefficients(window: usize, order: usize) -> Vec<f64> {
    let half = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |j, p| (j as f64 - half).powi(p as i32));
    let ata = a.transpose() * &a;
    let inv = ata
        .try_inverse()
        .expect("Vandermonde normal matrix with distinct nodes is invertible");
    let proj = inv * a.transpose();
    proj.row(0).iter().copied().collect()
}

/// One-shot helper around [`SavitzkyGolay`].
pub fn sg_smooth(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    SavitzkyGolay::new(window, order)?.smooth(series)
}
