use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Sum-of-sinusoids generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub variates: usize,
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Two-period signal with periods 8 and 64.
    pub fn two_period(length: usize, variates: usize, noise: f64, seed: u64) -> Self {
        SynthSpec {
            length,
            variates,
            periods: vec![8.0, 64.0],
            amplitudes: vec![1.0, 1.0],
            noise,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.length == 0 || self.variates == 0 {
            return Err(Error::Config("synthetic length and variates must be at least 1".into()));
        }
        if self.periods.is_empty() || self.periods.len() != self.amplitudes.len() {
            return Err(Error::Config(format!(
                "{} periods and {} amplitudes given",
                self.periods.len(),
                self.amplitudes.len()
            )));
        }
        if self.periods.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Config("periods must be positive and finite".into()));
        }
        for (i, p) in self.periods.iter().enumerate() {
            if self.periods[..i].contains(p) {
                return Err(Error::Config(format!("period {p} listed twice")));
            }
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) || !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("amplitudes and noise must be finite, noise non-negative".into()));
        }
        Ok(())
    }
}

/// `x[t, d] = Σₖ aₖ·sin(2πt/pₖ + φ[d, k]) + ε`, phases uniform in `[0, 2π)`
/// and `ε ~ N(0, σ²)`, both drawn from streams keyed by the seed.
pub fn synth_multiscale(spec: &SynthSpec) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let mut phase_rng = rng_for(spec.seed, "synth-phase");
    let phases: Vec<f64> = (0..spec.variates * spec.periods.len())
        .map(|_| phase_rng.gen_range(0.0..TAU))
        .collect();
    let mut noise_rng = rng_for(spec.seed, "synth-noise");
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let k = spec.periods.len();
    let mut values = Vec::with_capacity(spec.length * spec.variates);
    for t in 0..spec.length {
        for d in 0..spec.variates {
            let mut v = 0.0;
            for (j, (p, a)) in spec.periods.iter().zip(&spec.amplitudes).enumerate() {
                v += a * (TAU * t as f64 / p + phases[d * k + j]).sin();
            }
            if spec.noise > 0.0 {
                v += normal.sample(&mut noise_rng);
            }
            values.push(v);
        }
    }
    let names = (1..=spec.variates).map(|j| format!("v{j}")).collect();
    TimeSeriesDataset::new(values, names, "synthetic")
}
