//! Dense channel-major image tensors and the resampling kernels used to move
//! between stage resolutions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `channels x height x width` array of `f64`, stored channel-major.
///
/// Decoded images nominally live in `[-1, 1]`; noisy diffusion states are
/// unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl StateTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidRange(format!(
                "tensor dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "tensor dims must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    /// Standard normal noise drawn from `rng` in storage order.
    pub fn randn<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Self {
        let data = (0..height * width * channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.with_data(self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(x, y)| x + y).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(x, y)| x - y).collect()))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += s * y;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels + other.channels,
            data,
        })
    }

    /// Per-pixel mean over channels, as a one-channel tensor.
    pub fn channel_mean(&self) -> Self {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: out,
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }
}

impl StateTensor {
    /// Area-average downsampling to `height x width`; both must divide the
    /// current dims.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0
            || width == 0
            || self.height % height != 0
            || self.width % width != 0
        {
            return Err(Error::shape(
                format!("a divisor of {}x{}", self.height, self.width),
                format!("{height}x{width}"),
            ));
        }
        let (fy, fx) = (self.height / height, self.width / width);
        let inv = 1.0 / (fy * fx) as f64;
        let mut out = Self::zeros(height, width, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let mut acc = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            acc += self.get(c, y * fy + dy, x * fx + dx);
                        }
                    }
                    out.set(c, y, x, acc * inv);
                }
            }
        }
        Ok(out)
    }

    pub fn upsample_nearest(&self, factor: usize) -> Self {
        assert!(factor > 0);
        let mut out = Self::zeros(self.height * factor, self.width * factor, self.channels);
        for c in 0..self.channels {
            for y in 0..out.height {
                for x in 0..out.width {
                    out.set(c, y, x, self.get(c, y / factor, x / factor));
                }
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
            let scale = in_len as f64 / out_len as f64;
            (0..out_len)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(in_len - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ys = taps(height, self.height);
        let xs = taps(width, self.width);
        let mut out = Self::zeros(height, width, self.channels);
        for c in 0..self.channels {
            for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, y, x, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                format!("window inside {}x{}", self.height, self.width),
                format!("{height}x{width} at ({y0},{x0})"),
            ));
        }
        let mut out = Self::zeros(height, width, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> StateTensor {
        let data = (0..h * w * c).map(|i| (i as f64 * 0.37).sin()).collect();
        StateTensor::new(h, w, c, data).unwrap()
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(StateTensor::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(StateTensor::new(0, 2, 3, vec![]).is_err());
    }

    #[test]
    fn area_of_nearest_is_identity() {
        let x = ramp(5, 7, 3);
        for f in [1, 2, 3, 4] {
            let back = x.upsample_nearest(f).resize_area(5, 7).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-15);
        }
    }

    #[test]
    fn area_checkerboard_averages_to_zero() {
        let mut x = StateTensor::zeros(4, 4, 1);
        for y in 0..4 {
            for xx in 0..4 {
                x.set(0, y, xx, if (y + xx) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let d = x.resize_area(2, 2).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = StateTensor::filled(4, 4, 2, 0.3);
        let up = x.resize_bilinear(8, 8);
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn bilinear_interpolates_midpoints() {
        let x = StateTensor::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = x.resize_bilinear(1, 4);
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn concat_and_crop() {
        let a = ramp(3, 3, 1);
        let b = ramp(3, 3, 2);
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.channels(), 3);
        assert_eq!(ab.plane(0), a.plane(0));
        let c = ab.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.get(2, 0, 0), b.get(1, 1, 1));
        assert!(ab.crop(2, 2, 2, 2).is_err());
    }
}
