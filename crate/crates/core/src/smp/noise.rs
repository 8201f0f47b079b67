use std::fmt;
use std::str::FromStr;

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Noise added to the projection input during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Gaussian,
    /// Unif(-1, 1) per component.
    Uniform,
    StudentT {
        df: f64,
    },
    Exponential {
        rate: f64,
    },
    ChiSquared {
        k: f64,
    },
    /// `u * g` with one `u ~ Unif(0, 1)` per vector and `g ~ N(0, I)`.
    ScaledGaussian,
}

impl NoiseKind {
    pub const STUDENT_T: NoiseKind = NoiseKind::StudentT { df: 5.0 };
    pub const EXPONENTIAL: NoiseKind = NoiseKind::Exponential { rate: 1.0 };
    pub const CHI_SQUARED: NoiseKind = NoiseKind::ChiSquared { k: 1.0 };

    /// The noise ablation rows in table order.
    pub fn ablation_rows() -> [NoiseKind; 7] {
        [
            NoiseKind::None,
            Self::STUDENT_T,
            Self::EXPONENTIAL,
            Self::CHI_SQUARED,
            NoiseKind::Gaussian,
            NoiseKind::Uniform,
            NoiseKind::ScaledGaussian,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            NoiseKind::None => "No noise",
            NoiseKind::StudentT { .. } => "Student-t",
            NoiseKind::Exponential { .. } => "Exponential",
            NoiseKind::ChiSquared { .. } => "χ²",
            NoiseKind::Gaussian => "N(0, 1)",
            NoiseKind::Uniform => "Unif(-1, 1)",
            NoiseKind::ScaledGaussian => "N(0, 1) × Unif(0, 1)",
        }
    }

    pub fn validate(self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match self {
            NoiseKind::StudentT { df } if !ok(df) => {
                Err(Error::InvalidNoise(format!("student-t df must be > 0, got {df}")))
            }
            NoiseKind::Exponential { rate } if !ok(rate) => {
                Err(Error::InvalidNoise(format!("exponential rate must be > 0, got {rate}")))
            }
            NoiseKind::ChiSquared { k } if !ok(k) => {
                Err(Error::InvalidNoise(format!("chi-squared k must be > 0, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseKind::None => f.write_str("none"),
            NoiseKind::Gaussian => f.write_str("gaussian"),
            NoiseKind::Uniform => f.write_str("uniform"),
            NoiseKind::StudentT { df } => write!(f, "student-t:{df}"),
            NoiseKind::Exponential { rate } => write!(f, "exponential:{rate}"),
            NoiseKind::ChiSquared { k } => write!(f, "chi2:{k}"),
            NoiseKind::ScaledGaussian => f.write_str("scaled-gaussian"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    /// Accepts `none`, `gaussian`, `uniform`, `scaled-gaussian` and
    /// `student-t`, `exponential`, `chi2` with an optional `:value`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let value = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::InvalidNoise(format!("bad parameter in {s:?}")))
            })
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "none" => NoiseKind::None,
            "gaussian" => NoiseKind::Gaussian,
            "uniform" => NoiseKind::Uniform,
            "scaled-gaussian" => NoiseKind::ScaledGaussian,
            "student-t" => NoiseKind::StudentT { df: value(5.0)? },
            "exponential" => NoiseKind::Exponential { rate: value(1.0)? },
            "chi2" => NoiseKind::ChiSquared { k: value(1.0)? },
            _ => return Err(Error::InvalidNoise(format!("unknown noise kind {s:?}"))),
        };
        if arg.is_some()
            && !matches!(
                kind,
                NoiseKind::StudentT { .. } | NoiseKind::Exponential { .. } | NoiseKind::ChiSquared { .. }
            )
        {
            return Err(Error::InvalidNoise(format!("{name} takes no parameter")));
        }
        kind.validate()?;
        Ok(kind)
    }
}

/// One noise vector of width `d`.
pub fn sample_noise(kind: NoiseKind, d: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    kind.validate()?;
    let bad = |e: &dyn fmt::Display| Error::InvalidNoise(e.to_string());
    Ok(match kind {
        NoiseKind::None => vec![0.0; d],
        NoiseKind::Gaussian => iid(d, StandardNormal, rng),
        NoiseKind::Uniform => iid(d, Uniform::new_inclusive(-1.0, 1.0).map_err(|e| bad(&e))?, rng),
        NoiseKind::StudentT { df } => iid(d, StudentT::new(df).map_err(|e| bad(&e))?, rng),
        NoiseKind::Exponential { rate } => iid(d, Exp::new(rate).map_err(|e| bad(&e))?, rng),
        NoiseKind::ChiSquared { k } => iid(d, ChiSquared::new(k).map_err(|e| bad(&e))?, rng),
        NoiseKind::ScaledGaussian => {
            let u: f64 = rng.random();
            let mut g = iid(d, StandardNormal, rng);
            g.iter_mut().for_each(|v| *v *= u);
            g
        }
    })
}

fn iid(d: usize, dist: impl Distribution<f64>, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

const NORM_CHUNK: usize = 4096;

/// `‖n‖` for `samples` independent draws.
///
/// Each fixed-size chunk draws from its own seeded stream, so the result does
/// not depend on the worker count.
pub fn norm_samples(kind: NoiseKind, d: usize, samples: usize, seed: u64) -> Result<Vec<f64>> {
    kind.validate()?;
    let chunks = par::chunks(samples, NORM_CHUNK);
    let parts = par::try_map(&chunks, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r.start as u64 / NORM_CHUNK as u64);
        r.clone()
            .map(|_| sample_noise(kind, d, &mut rng).map(|n| n.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Monte-Carlo mean and sample standard deviation of `‖n‖`.
pub fn norm_stats(kind: NoiseKind, d: usize, samples: usize, seed: u64) -> Result<NormStats> {
    let norms = norm_samples(kind, d, samples, seed)?;
    let n = norms.len().max(1) as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(NormStats { mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_noise(NoiseKind::None, 5, &mut rng).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn parse_and_display() {
        for k in NoiseKind::ablation_rows() {
            assert_eq!(k.to_string().parse::<NoiseKind>().unwrap(), k);
        }
        assert_eq!(
            "student-t:3".parse::<NoiseKind>().unwrap(),
            NoiseKind::StudentT { df: 3.0 }
        );
        assert!("student-t:0".parse::<NoiseKind>().is_err());
        assert!("gaussian:2".parse::<NoiseKind>().is_err());
        assert!("pink".parse::<NoiseKind>().is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_noise(NoiseKind::ChiSquared { k: -1.0 }, 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InvalidNoise(_)));
    }

    #[test]
    fn scaled_gaussian_shares_one_scalar() {
        // every component is u·g, so the ratio to a fresh unscaled draw from
        // the same stream recovers u
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = a.clone();
        let n = sample_noise(NoiseKind::ScaledGaussian, 8, &mut a).unwrap();
        let u: f64 = b.random();
        let g = sample_noise(NoiseKind::Gaussian, 8, &mut b).unwrap();
        for (x, y) in n.iter().zip(&g) {
            assert!((x - u * y).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = sample_noise(NoiseKind::Uniform, 1000, &mut rng).unwrap();
        assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
