//! AWGN and Rayleigh slow-fading channels with PSNR bookkeeping.
//!
//! PSNR is `10·log10(P/σ²)` with `P` the per-symbol peak power. Under slow
//! fading a single complex coefficient `h ~ CN(0, 1)` is drawn per
//! transmitted representation and perfect equalization is assumed, so the
//! receiver sees `ẑ = z + n/|h|`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// `|h|` is floored here before dividing the noise by it.
pub const FADE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelFamily {
    Awgn,
    Rayleigh,
}

impl ChannelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelFamily::Awgn => "awgn",
            ChannelFamily::Rayleigh => "rayleigh",
        }
    }
}

impl std::fmt::Display for ChannelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn psnr_to_sigma2(psnr_db: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) {
        return Err(Error::invalid(format!("power must be positive, got {power}")));
    }
    Ok(power * 10f64.powf(-psnr_db / 10.0))
}

pub fn sigma2_to_psnr(sigma2: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "power and noise variance must be positive, got P={power}, σ²={sigma2}"
        )));
    }
    Ok(10.0 * (power / sigma2).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub family: ChannelFamily,
    pub power: f64,
    pub psnr_db: f64,
    pub sigma2: f64,
}

impl ChannelSpec {
    pub fn from_psnr(family: ChannelFamily, power: f64, psnr_db: f64) -> Result<Self> {
        Ok(ChannelSpec {
            family,
            power,
            psnr_db,
            sigma2: psnr_to_sigma2(psnr_db, power)?,
        })
    }

    /// A spec given directly by its noise variance (σ² = 0 allowed).
    pub fn from_sigma2(family: ChannelFamily, power: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {sigma2}")));
        }
        let psnr_db = if sigma2 > 0.0 {
            sigma2_to_psnr(sigma2, power)?
        } else {
            f64::INFINITY
        };
        Ok(ChannelSpec {
            family,
            power,
            psnr_db,
            sigma2,
        })
    }

    /// Draws a received batch through this channel.
    pub fn transmit(&self, z: &Tensor, rng: &mut Stream) -> Result<ChannelDraw> {
        match self.family {
            ChannelFamily::Awgn => transmit_awgn(z, self.sigma2, rng),
            ChannelFamily::Rayleigh => transmit_rayleigh(z, self.sigma2, rng),
        }
    }
}

/// One use of the channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub received: Tensor,
    /// The unscaled Gaussian noise `n`.
    pub noise: Tensor,
    pub fading: Option<Complex64>,
    /// True when `|h|` was below [`FADE_FLOOR`] and got floored.
    pub floored: bool,
}

impl ChannelDraw {
    /// `|h|` actually used for equalization (1 for AWGN).
    pub fn effective_gain(&self) -> f64 {
        self.fading.map_or(1.0, |h| h.norm().max(FADE_FLOOR))
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("noise variance must be >= 0, got {sigma2}")));
    }
    Ok(())
}

pub fn transmit_awgn(z: &Tensor, sigma2: f64, rng: &mut Stream) -> Result<ChannelDraw> {
    transmit_faded(z, sigma2, Complex64::new(1.0, 0.0), rng).map(|mut d| {
        d.fading = None;
        d
    })
}

/// Draws `h ~ CN(0, 1)` once, then transmits the whole tensor through it.
pub fn transmit_rayleigh(z: &Tensor, sigma2: f64, rng: &mut Stream) -> Result<ChannelDraw> {
    check_sigma2(sigma2)?;
    let h = draw_fading(rng);
    transmit_faded(z, sigma2, h, rng)
}

/// Circularly symmetric complex Gaussian with `E|h|² = 1`.
pub fn draw_fading(rng: &mut Stream) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(s * rng.normal(), s * rng.normal())
}

/// `ẑ = z + n/|h|` for a given fading coefficient.
pub fn transmit_faded(z: &Tensor, sigma2: f64, h: Complex64, rng: &mut Stream) -> Result<ChannelDraw> {
    check_sigma2(sigma2)?;
    let mut noise = Tensor::zeros(z.shape());
    if sigma2 > 0.0 {
        rng.fill_normal(noise.data_mut(), sigma2.sqrt());
    }
    let gain = h.norm();
    let floored = gain < FADE_FLOOR;
    let gain = gain.max(FADE_FLOOR);
    let received = if gain == 1.0 {
        z.zip_map(&noise, |a, n| a + n)
    } else {
        z.zip_map(&noise, |a, n| a + n / gain)
    };
    Ok(ChannelDraw {
        received,
        noise,
        fading: Some(h),
        floored,
    })
}

/// `Σ_n` for one representation of dimension `k`.
pub fn noise_covariance(spec: &ChannelSpec, k: usize, fading: Option<Complex64>) -> Result<Tensor> {
    let variance = match spec.family {
        ChannelFamily::Awgn => spec.sigma2,
        ChannelFamily::Rayleigh => {
            let h = fading.ok_or(Error::MissingFading)?;
            spec.sigma2 / h.norm_sqr().max(FADE_FLOOR * FADE_FLOOR)
        }
    };
    let mut cov = Tensor::zeros(&[k, k]);
    for i in 0..k {
        cov.data_mut()[i * k + i] = variance;
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z_batch() -> Tensor {
        Tensor::from_rows(&[vec![0.5, -0.25, 0.1], vec![0.9, 0.0, -0.7]]).unwrap()
    }

    #[test]
    fn psnr_conversions() {
        assert!((psnr_to_sigma2(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(psnr_to_sigma2(0.0, 1.0).unwrap(), 1.0);
        assert!((psnr_to_sigma2(20.0, 4.0).unwrap() - 0.04).abs() < 1e-15);
        assert!(psnr_to_sigma2(10.0, 0.0).is_err());
        assert!(psnr_to_sigma2(10.0, -1.0).is_err());
    }

    #[test]
    fn spec_sigma2_matches_psnr() {
        let s = ChannelSpec::from_psnr(ChannelFamily::Awgn, 2.0, 13.0).unwrap();
        assert!((s.sigma2 - 2.0 / 10f64.powf(1.3)).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_passes_through() {
        let z = z_batch();
        let mut rng = Stream::new(1);
        assert_eq!(transmit_awgn(&z, 0.0, &mut rng).unwrap().received, z);
        for _ in 0..10 {
            assert_eq!(transmit_rayleigh(&z, 0.0, &mut rng).unwrap().received, z);
        }
    }

    #[test]
    fn negative_variance_rejected() {
        let mut rng = Stream::new(1);
        assert!(transmit_awgn(&z_batch(), -0.1, &mut rng).is_err());
        assert!(transmit_rayleigh(&z_batch(), -0.1, &mut rng).is_err());
        assert!(ChannelSpec::from_sigma2(ChannelFamily::Awgn, 1.0, -1.0).is_err());
    }

    #[test]
    fn same_seed_same_noise() {
        let z = z_batch();
        let a = transmit_awgn(&z, 0.3, &mut Stream::new(5)).unwrap();
        let b = transmit_awgn(&z, 0.3, &mut Stream::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_fading_reduces_to_awgn() {
        let z = z_batch();
        let a = transmit_awgn(&z, 0.2, &mut Stream::new(9)).unwrap();
        let r = transmit_faded(&z, 0.2, Complex64::new(1.0, 0.0), &mut Stream::new(9)).unwrap();
        assert_eq!(a.received, r.received);
        assert_eq!(a.noise, r.noise);
    }

    #[test]
    fn perturbation_matches_stored_noise() {
        let z = z_batch();
        let mut rng = Stream::new(4);
        let tol = |a: f64| 4.0 * f64::EPSILON * a.abs().max(1.0);
        let d = transmit_awgn(&z, 0.5, &mut rng).unwrap();
        for ((r, zi), n) in d.received.data().iter().zip(z.data()).zip(d.noise.data()) {
            assert!(((r - zi) - n).abs() <= tol(*r));
        }
        let d = transmit_rayleigh(&z, 0.5, &mut rng).unwrap();
        let g = d.effective_gain();
        for ((r, zi), n) in d.received.data().iter().zip(z.data()).zip(d.noise.data()) {
            assert!(((r - zi) - n / g).abs() <= tol(*r));
        }
    }

    #[test]
    fn tiny_fade_is_floored() {
        let z = z_batch();
        let d = transmit_faded(&z, 0.1, Complex64::new(1e-9, 0.0), &mut Stream::new(2)).unwrap();
        assert!(d.floored);
        assert!(d.received.is_finite());
        assert_eq!(d.effective_gain(), FADE_FLOOR);
    }

    #[test]
    fn covariance_shapes() {
        let awgn = ChannelSpec::from_sigma2(ChannelFamily::Awgn, 1.0, 0.2).unwrap();
        assert_eq!(noise_covariance(&awgn, 2, None).unwrap().data(), &[0.2, 0.0, 0.0, 0.2]);
        let ray = ChannelSpec::from_sigma2(ChannelFamily::Rayleigh, 1.0, 0.2).unwrap();
        let cov = noise_covariance(&ray, 2, Some(Complex64::new(2.0, 0.0))).unwrap();
        assert_eq!(cov.data(), &[0.05, 0.0, 0.0, 0.05]);
        assert!(matches!(noise_covariance(&ray, 2, None), Err(Error::MissingFading)));
        let silent = ChannelSpec::from_sigma2(ChannelFamily::Awgn, 1.0, 0.0).unwrap();
        assert!(noise_covariance(&silent, 3, None).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
