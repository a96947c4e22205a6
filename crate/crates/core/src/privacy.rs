//! Client-side gradient obfuscation: clamp, bucket quantization, and
//! randomized response over the bucket indices.

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;

use crate::error::{Error, Result};

/// How much of the obfuscation pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Clamp, quantize, and randomize.
    Randomized,
    /// Clamp and quantize; the Bernoulli gate is forced to 0.
    NoNoise,
    /// Clamp only; real values are uploaded and decoded as-is.
    Identity,
    /// Raw gradients, no clamping.
    Off,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "on" | "randomized" => Ok(NoiseMode::Randomized),
            "no-noise" => Ok(NoiseMode::NoNoise),
            "identity" => Ok(NoiseMode::Identity),
            "off" => Ok(NoiseMode::Off),
            _ => Err(Error::config(format!(
                "unknown encryption mode {s:?} (expected on, no-noise, identity, off)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::Randomized => "on",
            NoiseMode::NoNoise => "no-noise",
            NoiseMode::Identity => "identity",
            NoiseMode::Off => "off",
        }
    }

    /// Whether uploads carry bucket indices rather than real values.
    pub fn quantizes(&self) -> bool {
        matches!(self, NoiseMode::Randomized | NoiseMode::NoNoise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncryptionConfig {
    pub tau: f64,
    pub k_bits: u32,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: NoiseMode,
}

impl Default for EncryptionConfig {
    fn default() -> Self {
        EncryptionConfig {
            tau: 0.01,
            k_bits: 8,
            epsilon: 0.5,
            seed: 0,
            mode: NoiseMode::Randomized,
        }
    }
}

/// Probability that an element receives noise, `(e^eps + 1) / (e^eps + 2)`.
pub fn noise_probability(epsilon: f64) -> f64 {
    let e = epsilon.exp();
    (e + 1.0) / (e + 2.0)
}

/// Complementary probability `1 / (e^eps + 2)`.
pub fn keep_probability(epsilon: f64) -> f64 {
    1.0 / (epsilon.exp() + 2.0)
}

impl EncryptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(1..=16).contains(&self.k_bits) {
            return Err(Error::config(format!(
                "quantization bits must be in 1..=16, got {}",
                self.k_bits
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Bucket count `b = 2^k`.
    pub fn buckets(&self) -> u32 {
        1 << self.k_bits
    }

    /// Bucket width `s = 2 tau / b`.
    pub fn step(&self) -> f64 {
        2.0 * self.tau / self.buckets() as f64
    }

    pub fn p(&self) -> f64 {
        noise_probability(self.epsilon)
    }

    pub fn q(&self) -> f64 {
        keep_probability(self.epsilon)
    }
}

/// Upload body: bucket indices, or real values in the unquantized modes.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Buckets(Vec<u16>),
    Real(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Buckets(v) => v.len(),
            Payload::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An obfuscated gradient tensor plus what the server needs to decode it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedGradient {
    pub payload: Payload,
    pub shape: Vec<usize>,
    pub sample_count: u64,
    pub tau: f64,
    pub buckets: u32,
    pub epsilon: f64,
    pub mode: NoiseMode,
}

impl EncryptedGradient {
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.payload.len() {
            return Err(Error::Protocol(format!(
                "payload has {} values, shape {:?} needs {n}",
                self.payload.len(),
                self.shape
            )));
        }
        if let Payload::Buckets(v) = &self.payload {
            if let Some(&bad) = v.iter().find(|&&x| x as u32 >= self.buckets) {
                return Err(Error::Protocol(format!(
                    "bucket value {bad} outside [0, {})",
                    self.buckets
                )));
            }
        }
        Ok(())
    }
}

pub fn clamp_grad(g: &[f64], tau: f64) -> Result<Vec<f64>> {
    g.iter()
        .enumerate()
        .map(|(i, &x)| {
            if x.is_nan() {
                Err(Error::NonFinite(format!("gradient element {i} is NaN")))
            } else {
                Ok(x.clamp(-tau, tau))
            }
        })
        .collect()
}

/// `round((g + tau) / s)`, halves away from zero, with the `+tau` overflow
/// bucket `b` folded into `b - 1`.
pub fn quantize(clamped: &[f64], cfg: &EncryptionConfig) -> Result<Vec<u16>> {
    let s = cfg.step();
    let top = cfg.buckets() - 1;
    clamped
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            if !(g.abs() <= cfg.tau) {
                return Err(Error::NonFinite(format!(
                    "element {i} = {g} outside [-{0}, {0}]",
                    cfg.tau
                )));
            }
            let q = ((g + cfg.tau) / s).round() as u32;
            Ok(q.min(top) as u16)
        })
        .collect()
}

/// Randomized response: each value gains `c * U{0..b-1}` mod `b` with
/// `c ~ Bernoulli(p)`. Returns the values and how many were gated on.
pub fn randomize(q: &[u16], cfg: &EncryptionConfig, rng: &mut impl Rng) -> (Vec<u16>, usize) {
    let b = cfg.buckets();
    if cfg.mode == NoiseMode::NoNoise {
        return (q.to_vec(), 0);
    }
    let gate = Bernoulli::new(cfg.p()).expect("p lies in (0, 1)");
    let mut noised = 0;
    let out = q
        .iter()
        .map(|&v| {
            let c = gate.sample(rng);
            let noise = rng.random_range(0..b);
            if c {
                noised += 1;
                ((v as u32 + noise) % b) as u16
            } else {
                v
            }
        })
        .collect();
    (out, noised)
}

/// Full client pipeline for one flattened gradient tensor.
pub fn encrypt(
    g: &[f64],
    shape: &[usize],
    sample_count: u64,
    cfg: &EncryptionConfig,
    rng: &mut impl Rng,
) -> Result<EncryptedGradient> {
    cfg.validate()?;
    if shape.iter().product::<usize>() != g.len() {
        return Err(Error::shape(format!(
            "gradient of {} values does not match shape {shape:?}",
            g.len()
        )));
    }
    let payload = match cfg.mode {
        NoiseMode::Off => {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient element {i} is not finite")));
            }
            Payload::Real(g.to_vec())
        }
        NoiseMode::Identity => Payload::Real(clamp_grad(g, cfg.tau)?),
        NoiseMode::NoNoise | NoiseMode::Randomized => {
            let q = quantize(&clamp_grad(g, cfg.tau)?, cfg)?;
            Payload::Buckets(randomize(&q, cfg, rng).0)
        }
    };
    Ok(EncryptedGradient {
        payload,
        shape: shape.to_vec(),
        sample_count,
        tau: cfg.tau,
        buckets: cfg.buckets(),
        epsilon: cfg.epsilon,
        mode: cfg.mode,
    })
}
