use super::{CamError, Result};
use crate::tensor::bilinear_resize_plane;

/// Row-major `height × width` map of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(CamError::SizeMismatch(format!(
                "{height}x{width} heatmap with {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CamError::SizeMismatch(format!("non-finite heatmap value at {i}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub(crate) fn from_f64(height: usize, width: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let values: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
        debug_assert_eq!(values.len(), height * width);
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Bilinear resize; same-size requests are an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: bilinear_resize_plane(&self.values, self.height, self.width, height, width),
        }
    }

    /// `(v - min) / (max - min)`, or `None` for a constant map.
    pub fn min_max_normalized(&self) -> Option<Self> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        if hi <= lo {
            return None;
        }
        let span = hi - lo;
        Some(Self::from_f64(
            self.height,
            self.width,
            self.values.iter().map(|&v| (v as f64 - lo) / span),
        ))
    }

    /// Separable Gaussian blur with edge replication; `sigma <= 0` copies.
    pub fn blurred(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let taps: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = taps.iter().sum();
        let (h, w) = (self.height as isize, self.width as isize);
        let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let d = k as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += t * src[(sy * w + sx) as usize];
                    }
                    out[(y * w + x) as usize] = acc / norm;
                }
            }
            out
        };
        let src: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        let once = pass(&src, true);
        Self::from_f64(self.height, self.width, pass(&once, false))
    }
}
