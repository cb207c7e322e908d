//! Exact diagonalization in a truncated Fock basis.
//!
//! Basis ordering: spin (`|+>` first) outermost, then the occupation numbers
//! `n_1 .. n_N` in mixed radix with mode 1 most significant. The Hamiltonian
//! is never stored for large spaces; its action is generated row by row.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::VariationalState;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MAX_MODES: usize = 3;
pub const MAX_DIMENSION: usize = 1_000_000;
/// Spaces below this size are diagonalized densely.
pub const DENSE_LIMIT: usize = 512;
/// Largest allowed coherent-state weight outside the truncation.
pub const TAIL_TOLERANCE: f64 = 1e-10;

const LANCZOS_SUBSPACE: usize = 60;
const LANCZOS_RESTARTS: usize = 500;
const LANCZOS_RESIDUAL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockTruncation {
    n_max: usize,
    num_modes: usize,
}

impl FockTruncation {
    pub fn new(n_max: usize, num_modes: usize) -> Result<Self> {
        if num_modes == 0 || num_modes > MAX_MODES {
            return Err(Error::TooManyModes(num_modes));
        }
        let t = FockTruncation { n_max, num_modes };
        let dim = t
            .dimension_checked()
            .ok_or(Error::DimensionOverflow(usize::MAX))?;
        if dim > MAX_DIMENSION {
            return Err(Error::DimensionOverflow(dim));
        }
        Ok(t)
    }

    pub fn for_model(params: &ModelParams, n_max: usize) -> Result<Self> {
        Self::new(n_max, params.num_modes())
    }

    fn dimension_checked(&self) -> Option<usize> {
        let mut b: usize = 1;
        for _ in 0..self.num_modes {
            b = b.checked_mul(self.n_max.checked_add(1)?)?;
        }
        b.checked_mul(2)
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    /// Size of the boson space of one spin component.
    pub fn boson_dimension(&self) -> usize {
        (self.n_max + 1).pow(self.num_modes as u32)
    }

    pub fn dimension(&self) -> usize {
        2 * self.boson_dimension()
    }

    fn strides(&self) -> Vec<usize> {
        let base = self.n_max + 1;
        (0..self.num_modes)
            .map(|k| base.pow((self.num_modes - 1 - k) as u32))
            .collect()
    }

    fn check_model(&self, params: &ModelParams) -> Result<()> {
        params.validate()?;
        if params.num_modes() != self.num_modes {
            return Err(Error::InvalidModel(format!(
                "model has {} modes, truncation {}",
                params.num_modes(),
                self.num_modes
            )));
        }
        Ok(())
    }
}

/// The Hamiltonian as an implicit symmetric operator.
pub struct FockHamiltonian<'a> {
    params: &'a ModelParams,
    trunc: FockTruncation,
    strides: Vec<usize>,
}

impl<'a> FockHamiltonian<'a> {
    pub fn new(params: &'a ModelParams, trunc: FockTruncation) -> Result<Self> {
        trunc.check_model(params)?;
        Ok(FockHamiltonian {
            params,
            trunc,
            strides: trunc.strides(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.trunc.dimension()
    }

    /// Calls `emit(j, H_ij)` for every structurally nonzero entry of row `i`.
    fn row(&self, i: usize, mut emit: impl FnMut(usize, f64)) {
        let p = self.params;
        let nb = self.trunc.boson_dimension();
        let n_max = self.trunc.n_max;
        let (spin_up, b) = (i < nb, i % nb);
        let sz = if spin_up { 1.0 } else { -1.0 };
        let flip = if spin_up { i + nb } else { i - nb };

        let mut diag = 0.5 * sz * p.bias;
        let mut rest = b;
        for (k, &stride) in self.strides.iter().enumerate() {
            let n = rest / stride;
            rest %= stride;
            diag += p.frequencies[k] * n as f64;
            let lam = 0.5 * sz * p.diag_amplitudes[k];
            let eta = 0.5 * p.offdiag_amplitudes[k];
            if n > 0 {
                let c = (n as f64).sqrt();
                if lam != 0.0 {
                    emit(i - stride, lam * c);
                }
                if eta != 0.0 {
                    emit(flip - stride, eta * c);
                }
            }
            if n < n_max {
                let c = ((n + 1) as f64).sqrt();
                if lam != 0.0 {
                    emit(i + stride, lam * c);
                }
                if eta != 0.0 {
                    emit(flip + stride, eta * c);
                }
            }
        }
        emit(i, diag);
        if p.tunneling != 0.0 {
            emit(flip, -0.5 * p.tunneling);
        }
    }

    /// `y = H x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut()
            .enumerate()
            .with_min_len(1024)
            .for_each(|(i, yi)| {
                let mut acc = 0.0;
                self.row(i, |j, v| acc += v * x[j]);
                *yi = acc;
            });
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dimension();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            self.row(i, |j, v| m[(i, j)] += v);
        }
        m
    }

    pub fn expectation(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        dot(x, &y)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Exact ground state and its spin observables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdResult {
    pub energy: f64,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub entropy: f64,
    pub n_max: usize,
    pub dimension: usize,
}

impl EdResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Lowest eigenpair of a symmetric operator by explicitly restarted Lanczos
/// with full reorthogonalization.
fn lanczos_lowest(dim: usize, apply: impl Fn(&[f64], &mut [f64])) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let m = LANCZOS_SUBSPACE.min(dim);
    let mut w = vec![0.0; dim];
    let mut last = (f64::NAN, f64::INFINITY);
    for _ in 0..LANCZOS_RESTARTS {
        let mut basis: Vec<Vec<f64>> = vec![v.clone()];
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        loop {
            let q = basis.last().expect("non-empty basis");
            apply(q, &mut w);
            alpha.push(dot(q, &w));
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(b, &w);
                    w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
                }
            }
            let nrm = dot(&w, &w).sqrt();
            let scale = alpha.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            if basis.len() == m || nrm < 1e-13 * scale {
                beta.push(nrm);
                break;
            }
            beta.push(nrm);
            basis.push(w.iter().map(|x| x / nrm).collect());
        }
        let k = alpha.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let lo = eig.eigenvalues.imin();
        let theta = eig.eigenvalues[lo];
        let s = eig.eigenvectors.column(lo);
        let residual = (beta[k - 1] * s[k - 1]).abs();
        v.iter_mut().for_each(|x| *x = 0.0);
        for (b, c) in basis.iter().zip(s.iter()) {
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi += c * bi);
        }
        normalize(&mut v);
        last = (theta, residual);
        if residual < LANCZOS_RESIDUAL * theta.abs().max(1.0) {
            return Ok((theta, v));
        }
    }
    Err(Error::EigenNotConverged(format!(
        "Lanczos residual {:e} at eigenvalue {} after {} restarts",
        last.1, last.0, LANCZOS_RESTARTS
    )))
}

fn spin_observables(v: &[f64], nb: usize) -> (f64, f64, f64, f64) {
    let (up, dn) = v.split_at(nb);
    let norm = dot(v, v);
    let puu = dot(up, up) / norm;
    let pdd = dot(dn, dn) / norm;
    let pud = dot(up, dn) / norm;
    // real eigenvectors give a real reduced density matrix: Im rho_ud = 0
    let sigma_y = 0.0;
    let sigma_z = puu - pdd;
    let sigma_x = 2.0 * pud;
    let r = (sigma_z * sigma_z + sigma_x * sigma_x + sigma_y * sigma_y).sqrt();
    (sigma_z, sigma_x, sigma_y, crate::ansatz::spin_entropy(r))
}

/// Ground state of the truncated Hamiltonian.
pub fn ed_ground_state(params: &ModelParams, trunc: FockTruncation) -> Result<EdResult> {
    let h = FockHamiltonian::new(params, trunc)?;
    let dim = h.dimension();
    let (energy, vec) = if dim < DENSE_LIMIT {
        let eig = SymmetricEigen::new(h.dense());
        let lo = eig.eigenvalues.imin();
        (
            eig.eigenvalues[lo],
            eig.eigenvectors.column(lo).iter().copied().collect(),
        )
    } else {
        lanczos_lowest(dim, |x, y| h.apply(x, y))?
    };
    let (sigma_z, sigma_x, sigma_y, entropy) = spin_observables(&vec, trunc.boson_dimension());
    Ok(EdResult {
        energy,
        sigma_z,
        sigma_x,
        sigma_y,
        entropy,
        n_max: trunc.n_max,
        dimension: dim,
    })
}

/// Doubles `n_max` from `n_start` until the ground energy moves by less than
/// `tol`. Fails if the dimension cap is hit first.
pub fn ed_ground_state_adaptive(
    params: &ModelParams,
    n_start: usize,
    tol: f64,
) -> Result<EdResult> {
    let modes = params.num_modes();
    let mut n = n_start.max(1);
    let mut prev = ed_ground_state(params, FockTruncation::new(n, modes)?)?;
    loop {
        n *= 2;
        let trunc = FockTruncation::new(n, modes).map_err(|_| {
            Error::TruncationNotConverged(format!(
                "energy still moving at n_max = {} and the next step exceeds the dimension cap",
                n / 2
            ))
        })?;
        let next = ed_ground_state(params, trunc)?;
        if (next.energy - prev.energy).abs() < tol {
            return Ok(next);
        }
        prev = next;
    }
}

/// Fock amplitudes `e^{-f^2/2} f^n / sqrt(n!)` of a single-mode coherent
/// state, `n = 0 ..= n_max`, together with the weight lost above `n_max`.
pub fn coherent_amplitudes(f: f64, n_max: usize) -> (Vec<f64>, f64) {
    let mut amps = Vec::with_capacity(n_max + 1);
    let mut c = (-0.5 * f * f).exp();
    let mut kept = 0.0;
    for n in 0..=n_max {
        if n > 0 {
            c *= f / (n as f64).sqrt();
        }
        amps.push(c);
        kept += c * c;
    }
    (amps, (1.0 - kept).max(0.0))
}

/// Expands a multi-D2 state in the truncated Fock basis.
pub fn expand_coherent_state(state: &VariationalState, trunc: FockTruncation) -> Result<Vec<f64>> {
    if state.num_modes() != trunc.num_modes {
        return Err(Error::DimensionMismatch {
            state: (state.multiplicity(), state.num_modes()),
            modes: trunc.num_modes,
        });
    }
    let nb = trunc.boson_dimension();
    let strides = trunc.strides();
    let mut out = vec![0.0; trunc.dimension()];
    for m in 0..state.multiplicity() {
        let mut per_mode = Vec::with_capacity(trunc.num_modes);
        for &f in state.row(m) {
            let (amps, tail) = coherent_amplitudes(f, trunc.n_max);
            if tail > TAIL_TOLERANCE {
                return Err(Error::TruncationTail(tail));
            }
            per_mode.push(amps);
        }
        let (a, b) = (state.up_amps()[m], state.down_amps()[m]);
        for idx in 0..nb {
            let mut rest = idx;
            let mut prod = 1.0;
            for (k, &stride) in strides.iter().enumerate() {
                prod *= per_mode[k][rest / stride];
                rest %= stride;
            }
            out[idx] += a * prod;
            out[nb + idx] += b * prod;
        }
    }
    Ok(out)
}

/// `(<psi|H|psi>, <psi|psi>)` of a multi-D2 state computed in the Fock basis.
pub fn fock_expectation(
    state: &VariationalState,
    params: &ModelParams,
    trunc: FockTruncation,
) -> Result<(f64, f64)> {
    let h = FockHamiltonian::new(params, trunc)?;
    let psi = expand_coherent_state(state, trunc)?;
    Ok((h.expectation(&psi), dot(&psi, &psi)))
}
