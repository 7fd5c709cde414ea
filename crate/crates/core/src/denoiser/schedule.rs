//! Latent grids and the deterministic DDIM schedule.
//!
//! Timesteps run `0..=T`. Index 0 is the clean point (`ᾱ = 1`); indices
//! `1..=T` carry the noisy schedule, so a `T`-step sampler walks from `T`
//! down to the clean latent.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Latent `z_t` on a `height × width` grid with `channels` features per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: DenseTensor,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        let values = DenseTensor::new(&[height, width, channels], values)?;
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// I.i.d. standard normal entries, shaped like `like`.
    pub fn standard_normal_like<R: Rng + ?Sized>(like: &LatentGrid, rng: &mut R) -> Result<Self> {
        let n = like.pixels() * like.channels();
        Self::new(
            like.height,
            like.width,
            like.channels,
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        )
    }

    /// Build from a `(height*width) × channels` pixel matrix.
    pub fn from_rows(height: usize, width: usize, rows: &Array2<f64>) -> Result<Self> {
        if rows.nrows() != height * width {
            return Err(Error::Shape(format!(
                "{} pixel rows do not fit a {height}x{width} grid",
                rows.nrows()
            )));
        }
        Self::new(height, width, rows.ncols(), rows.iter().copied().collect())
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

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.values()
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.values
    }

    /// Pixel-major matrix, one row per cell.
    pub fn rows(&self) -> Array2<f64> {
        self.values.to_rows()
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "latent shapes differ: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Elementwise `a·self + b·other`.
    pub(crate) fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.check_same_shape(other)?;
        let vals = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(x, y)| a * x + b * y)
            .collect();
        LatentGrid::new(self.height, self.width, self.channels, vals)
            .map_err(|e| Error::Divergence(format!("latent update produced {e}")))
    }
}

/// Cumulative signal fractions `ᾱ_t` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// `alphas_cumprod[0]` must be the clean point; the sequence must be
    /// strictly decreasing inside `(0, 1]`.
    pub fn new(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::Config("schedule needs at least one noisy step".into()));
        }
        if alphas_cumprod.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alphas_cumprod must lie in (0, 1]".into()));
        }
        if alphas_cumprod.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alphas_cumprod must be strictly decreasing".into()));
        }
        Ok(Self { alphas_cumprod })
    }

    /// Clean point followed by `steps` values linear from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let mut a = Vec::with_capacity(steps + 1);
        a.push(1.0);
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            a.push(start + (end - start) * frac);
        }
        Self::new(a)
    }

    /// Number of noisy steps `T`.
    pub fn total_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidValue(format!("timestep {t} outside 0..={}", self.total_steps())))
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
    pub fn ddim_add_noise(&self, z0: &LatentGrid, eps: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let ab = self.alpha_bar(t)?;
        z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
    pub fn ddim_step(&self, z_t: &LatentGrid, eps_hat: &LatentGrid, t: usize, t_prev: usize) -> Result<LatentGrid> {
        if t_prev >= t {
            return Err(Error::InvalidValue(format!("t_prev {t_prev} must be below t {t}")));
        }
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let z0_hat = z_t.axpby(1.0 / ab.sqrt(), eps_hat, -(1.0 - ab).sqrt() / ab.sqrt())?;
        z0_hat.axpby(ab_prev.sqrt(), eps_hat, (1.0 - ab_prev).sqrt())
    }
}

impl Default for NoiseSchedule {
    /// 50 steps, `ᾱ` linear from 0.9999 to 0.02.
    fn default() -> Self {
        Self::linear(50, 0.9999, 0.02).expect("valid default schedule")
    }
}
