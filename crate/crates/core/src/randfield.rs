//! Gaussian random fields on the periodic unit square.
//!
//! Samples are drawn by spectrally filtering white noise. The noise generator
//! is ChaCha8 seeded from a 64-bit integer, with standard normals from the
//! ziggurat sampler in `rand_distr`, so a `(spec, seed)` pair pins the field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

/// Name of the white-noise generator, recorded in run manifests.
pub const PRNG_NAME: &str = "chacha8+ziggurat-normal";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfSpec {
    pub amplitude: f64,
    pub shift: f64,
    pub exponent: f64,
    pub n: usize,
    pub seed: u64,
}

impl GrfSpec {
    /// Forcing-term distribution `7^{3/2} (-Δ + 49)^{-2.5}`.
    pub fn poisson_forcing(n: usize, seed: u64) -> Self {
        GrfSpec {
            amplitude: 7f64.powf(1.5),
            shift: 49.0,
            exponent: 2.5,
            n,
            seed,
        }
    }

    /// Initial-vorticity distribution `8³ (-Δ + 64)^{-4}`.
    pub fn initial_vorticity(n: usize, seed: u64) -> Self {
        GrfSpec {
            amplitude: 512.0,
            shift: 64.0,
            exponent: 4.0,
            n,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        GrfSpec { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift > 0.0) || !(self.exponent > 0.0) || !(self.amplitude > 0.0) {
            return Err(Error::config(
                "grf",
                "amplitude, shift and exponent must all be positive",
            ));
        }
        check_pow2(self.n)
    }

    /// Covariance eigenvalue for integer frequency `(m1, m2)`.
    pub fn eigenvalue(&self, m1: i64, m2: i64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        let k2 = (tau * m1 as f64).powi(2) + (tau * m2 as f64).powi(2);
        self.amplitude * (k2 + self.shift).powf(-self.exponent)
    }

    /// Point-wise variance of a sample, `Σ_k λ_k` over the resolved modes.
    pub fn point_variance(&self) -> f64 {
        let n = self.n as i64;
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                s += self.eigenvalue(signed_freq(a, n), signed_freq(b, n));
            }
        }
        s
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::size(
            "fft2",
            format!("grid side must be a power of two, got {n}"),
        ));
    }
    Ok(())
}

/// Index `a ∈ [0, n)` to its signed frequency in `[-n/2, n/2)`.
fn signed_freq(a: i64, n: i64) -> i64 {
    if a < n / 2 || (a == n / 2 && n == 1) {
        a
    } else {
        a - n
    }
}

fn transform(x: &[Complex64], n: usize, inverse: bool) -> Result<Vec<Complex64>> {
    check_pow2(n)?;
    if x.len() != n * n {
        return Err(Error::shape(
            "fft2",
            format!("{} values for a {n}×{n} grid", x.len()),
        ));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut data = x.to_vec();
    fft.process(&mut data);
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
    let s = 1.0 / n as f64;
    for v in &mut data {
        *v *= s;
    }
    Ok(data)
}

/// Unitary 2D DFT of a row-major `n × n` complex grid.
pub fn fft2(x: &[Complex64], n: usize) -> Result<Vec<Complex64>> {
    transform(x, n, false)
}

/// Inverse of [`fft2`].
pub fn ifft2(x: &[Complex64], n: usize) -> Result<Vec<Complex64>> {
    transform(x, n, true)
}

/// Draws one `[n, n]` sample.
///
/// The filtered noise is scaled by `n` so that the point variance equals
/// [`GrfSpec::point_variance`] independent of resolution; with unitary
/// transforms the unscaled filter would shrink the field as `1/n`.
pub fn sample_grf(spec: &GrfSpec) -> Result<Field> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise: Vec<Complex64> = (0..n * n)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut spec_hat = fft2(&noise, n)?;
    let ni = n as i64;
    for a in 0..n {
        for b in 0..n {
            let lam = spec.eigenvalue(signed_freq(a as i64, ni), signed_freq(b as i64, ni));
            spec_hat[a * n + b] *= lam.sqrt();
        }
    }
    let out = ifft2(&spec_hat, n)?;
    let scale = n as f64;
    Field::new(vec![n, n], out.iter().map(|c| scale * c.re).collect())
}

/// Subtracts the arithmetic mean.
pub fn mean_project(f: &Field) -> Field {
    let m = f.mean();
    f.map(|v| v - m)
}
