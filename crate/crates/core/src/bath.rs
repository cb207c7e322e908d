//! Wilson logarithmic discretization of power-law spectral densities.
//!
//! A continuous density `J(w) = 2 a w_c^(1-s) w^s` on `[0, w_c]` is coarse-grained
//! into `N` modes, one per interval `[L^-(k+1), L^-k] w_c`. Each mode carries the
//! zeroth moment of `J` over its interval as squared amplitude and the first-moment
//! average as frequency. Both moments are evaluated from the closed-form power-law
//! antiderivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a power-law bath.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    /// Spectral exponent `s`.
    pub exponent: f64,
    /// Dimensionless coupling strength (`alpha` or `beta`).
    pub coupling: f64,
    /// High-frequency cutoff `w_c`.
    pub cutoff: f64,
    /// Number of discrete modes.
    pub num_modes: usize,
    /// Logarithmic discretization factor `L > 1`. `f64::INFINITY` collapses the
    /// first interval onto `[0, w_c]`.
    pub log_factor: f64,
}

impl BathSpec {
    pub fn new(exponent: f64, coupling: f64, num_modes: usize, log_factor: f64) -> Self {
        BathSpec {
            exponent,
            coupling,
            cutoff: 1.0,
            num_modes,
            log_factor,
        }
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn with_coupling(mut self, coupling: f64) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.exponent;
        if !s.is_finite() || s <= -1.0 {
            return Err(Error::InvalidBath(format!(
                "exponent {s} must be finite and > -1"
            )));
        }
        if !(self.coupling >= 0.0) || !self.coupling.is_finite() {
            return Err(Error::InvalidBath(format!(
                "coupling {} must be finite and >= 0",
                self.coupling
            )));
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(Error::InvalidBath(format!(
                "cutoff {} must be > 0",
                self.cutoff
            )));
        }
        if self.num_modes == 0 {
            return Err(Error::InvalidBath("num_modes must be >= 1".into()));
        }
        if !(self.log_factor > 1.0) {
            return Err(Error::InvalidBath(format!(
                "log_factor {} must be > 1",
                self.log_factor
            )));
        }
        if !(s > 0.0 && s < 1.0) {
            log::warn!("spectral exponent {s} is outside the sub-Ohmic range (0, 1)");
        }
        Ok(())
    }

    /// `J(w)` of the continuous bath.
    pub fn spectral_density(&self, w: f64) -> f64 {
        2.0 * self.coupling * self.cutoff.powf(1.0 - self.exponent) * w.powf(self.exponent)
    }

    /// Exact integral of `J` over the frequency range covered by the discrete modes,
    /// `[L^-N w_c, w_c]`.
    pub fn covered_weight(&self) -> f64 {
        let p = self.exponent + 1.0;
        let lowest = self.cutoff * self.log_factor.powi(-(self.num_modes as i32));
        2.0 * self.coupling * self.cutoff.powf(1.0 - self.exponent) / p
            * (self.cutoff.powf(p) - lowest.powf(p))
    }

    /// `int_0^w_c J(w) dw = 2 a w_c^2 / (s + 1)`.
    pub fn total_weight(&self) -> f64 {
        2.0 * self.coupling * self.cutoff * self.cutoff / (self.exponent + 1.0)
    }
}

/// Discrete mode set generated from a [`BathSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedBath {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl DiscretizedBath {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Sum of squared amplitudes (zeroth moment).
    pub fn weight(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum()
    }
}

/// `(1 - L^-p)` evaluated without cancellation for `L` close to one.
fn one_minus_pow(log_factor: f64, p: f64) -> f64 {
    if log_factor.is_infinite() {
        1.0
    } else {
        -(-p * log_factor.ln()).exp_m1()
    }
}

/// Interval upper edge `L^-k w_c`.
fn upper_edge(spec: &BathSpec, k: usize) -> f64 {
    if k == 0 {
        spec.cutoff
    } else {
        spec.cutoff * (-(k as f64) * spec.log_factor.ln()).exp()
    }
}

pub fn discretize(spec: &BathSpec) -> Result<DiscretizedBath> {
    spec.validate()?;
    let s = spec.exponent;
    let p1 = s + 1.0;
    let p2 = s + 2.0;
    let prefactor = 2.0 * spec.coupling * spec.cutoff.powf(1.0 - s) / p1;
    let zeroth_ratio = one_minus_pow(spec.log_factor, p1);
    // first-moment average relative to the upper edge; identical for every interval
    let mean_ratio = (p1 / p2) * one_minus_pow(spec.log_factor, p2) / zeroth_ratio;

    let mut frequencies = Vec::with_capacity(spec.num_modes);
    let mut amplitudes = Vec::with_capacity(spec.num_modes);
    for k in 0..spec.num_modes {
        let hi = upper_edge(spec, k);
        let weight = prefactor * hi.powf(p1) * zeroth_ratio;
        let w = hi * mean_ratio;
        if !w.is_finite() || !weight.is_finite() || w <= 0.0 {
            return Err(Error::InvalidBath(format!(
                "non-finite mode {k}: frequency {w}, weight {weight}"
            )));
        }
        frequencies.push(w);
        amplitudes.push(weight.sqrt());
    }
    Ok(DiscretizedBath {
        frequencies,
        amplitudes,
    })
}
