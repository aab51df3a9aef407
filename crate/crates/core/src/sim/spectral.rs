// SPDX-License-Identifier: Apache-2.0

//! Low-frequency enhancement of spatial token grids.
//!
//! The spectrum is never shifted, so DC and the lowest frequencies sit at the
//! corners of the `h x w` array while the geometric centre holds the highest
//! frequencies. The coefficient map is zero at that centre and rises as a
//! Gaussian towards the corners, attenuating high frequencies.

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyKernel {
    coeffs: Array2<f64>,
    sigma: Option<f64>,
}

impl FrequencyKernel {
    /// Custom coefficient map; values must lie in `[0, 1]`.
    pub fn from_coeffs(coeffs: Array2<f64>) -> Result<Self> {
        if coeffs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(
                "kernel coefficients must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            coeffs,
            sigma: None,
        })
    }

    pub fn coeffs(&self) -> &Array2<f64> {
        &self.coeffs
    }

    /// Cutoff in frequency-bin units; `None` for custom maps.
    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn center(&self) -> (usize, usize) {
        let (h, w) = self.coeffs.dim();
        (h / 2, w / 2)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.coeffs.dim()
    }
}

/// `g[u, v] = 1 - exp(-d^2 / (2 sigma^2))`, `d` measured from `(h/2, w/2)`.
pub fn make_frequency_kernel(h: usize, w: usize, sigma: f64) -> Result<FrequencyKernel> {
    if h == 0 || w == 0 {
        return Err(Error::Domain(format!(
            "kernel size {h}x{w} must be positive"
        )));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let denom = 2.0 * sigma * sigma;
    let coeffs = Array2::from_shape_fn((h, w), |(u, v)| {
        let d2 = (u as f64 - cy).powi(2) + (v as f64 - cx).powi(2);
        1.0 - (-d2 / denom).exp()
    });
    Ok(FrequencyKernel {
        coeffs,
        sigma: Some(sigma),
    })
}

/// The 1x1 map applied to the stacked (real, imaginary) spectrum channels:
/// `[re', im'] = relu(weights * [re, im])`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectralConv {
    pub weights: [[f64; 2]; 2],
}

impl SpectralConv {
    pub const IDENTITY: SpectralConv = SpectralConv {
        weights: [[1.0, 0.0], [0.0, 1.0]],
    };

    pub fn is_zero(&self) -> bool {
        self.weights.iter().flatten().all(|w| *w == 0.0)
    }

    #[inline]
    pub fn apply(&self, z: Complex<f64>) -> Complex<f64> {
        let [[a, b], [c, d]] = self.weights;
        Complex::new(
            (a * z.re + b * z.im).max(0.0),
            (c * z.re + d * z.im).max(0.0),
        )
    }
}

/// What happens to the filtered spectrum before the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralPath {
    Conv(SpectralConv),
    /// Pass the filtered spectrum through untouched (no map, no ReLU).
    Bypass,
}

struct Plans {
    row_fwd: std::sync::Arc<dyn Fft<f64>>,
    row_inv: std::sync::Arc<dyn Fft<f64>>,
    col_fwd: std::sync::Arc<dyn Fft<f64>>,
    col_inv: std::sync::Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        Self {
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }
}

/// Unnormalised 2-D DFT of a row-major `h x w` buffer, in place.
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, plans: &Plans, inverse: bool) {
    let (row, col) = if inverse {
        (&plans.row_inv, &plans.col_inv)
    } else {
        (&plans.row_fwd, &plans.col_fwd)
    };
    row.process(buf);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Per channel: `Re(IDFT(path(DFT(x) * g))) + x`.
pub fn low_frequency_enhance(
    spatial: &Array3<f64>,
    kernel: &FrequencyKernel,
    path: SpectralPath,
) -> Result<Array3<f64>> {
    let (h, w, channels) = spatial.dim();
    if kernel.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "kernel {:?} does not match spatial grid {h}x{w}",
            kernel.dim()
        )));
    }
    let mut out = spatial.clone();
    if let SpectralPath::Conv(conv) = path {
        if conv.is_zero() {
            // relu(0) = 0 and IDFT(0) = 0: only the residual remains
            return Ok(out);
        }
    }
    let plans = Plans::new(h, w);
    let g = kernel.coeffs();
    let norm = 1.0 / (h * w) as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = Complex::new(spatial[[y, x, c]], 0.0);
            }
        }
        fft2(&mut buf, h, w, &plans, false);
        for (i, z) in buf.iter_mut().enumerate() {
            let filtered = *z * g[[i / w, i % w]];
            *z = match path {
                SpectralPath::Conv(conv) => conv.apply(filtered),
                SpectralPath::Bypass => filtered,
            };
        }
        fft2(&mut buf, h, w, &plans, true);
        for y in 0..h {
            for x in 0..w {
                out[[y, x, c]] += buf[y * w + x].re * norm;
            }
        }
    }
    Ok(out)
}
