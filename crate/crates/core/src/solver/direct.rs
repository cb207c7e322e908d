//! Direct minimization of `E = H / N` over all parameters.
//!
//! For fixed displacements `E` is a generalized Rayleigh quotient in the
//! amplitudes, so starting amplitudes are taken from the lowest generalized
//! eigenvector of the `2M x 2M` pencil. All parameters are then relaxed
//! together by preconditioned L-BFGS.

use nalgebra::{DMatrix, SymmetricEigen};

use super::lbfgs::{minimize, LbfgsOptions, LbfgsOutcome};
use super::targets::{displacement_curvature_of, energy_gradient};
use crate::ansatz::{Evaluation, VariationalState};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Overlap eigenvalues below this fraction of the largest are discarded.
const OVERLAP_CUTOFF: f64 = 1e-10;

/// Terms lighter than this fraction of the heaviest are preconditioned as if
/// they had this weight.
const WEIGHT_FLOOR: f64 = 1e-2;

/// Replace the amplitudes of `state` by the lowest generalized eigenvector of
/// the amplitude pencil (normalized to `N = 1`); returns the energy.
pub fn optimal_amplitudes(state: &mut VariationalState, params: &ModelParams) -> Result<f64> {
    let eval = Evaluation::new(state, params)?;
    let mm = state.multiplicity();
    let overlap = DMatrix::from_row_slice(mm, mm, &eval.overlap);
    let eig = SymmetricEigen::new(overlap);
    let smax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..mm)
        .filter(|&i| eig.eigenvalues[i] > OVERLAP_CUTOFF * smax)
        .collect();
    let r = keep.len();
    if r == 0 {
        return Err(Error::CollapsedState(smax));
    }
    // X = U_keep s^-1/2, acting on each spin block
    let mut x = DMatrix::zeros(mm, r);
    for (j, &i) in keep.iter().enumerate() {
        let inv = 1.0 / eig.eigenvalues[i].sqrt();
        for m in 0..mm {
            x[(m, j)] = eig.eigenvectors[(m, i)] * inv;
        }
    }
    let block = |mat: &[f64]| {
        let mut out = DMatrix::zeros(mm, mm);
        for m in 0..mm {
            for n in 0..mm {
                let i = eval.idx(m, n);
                out[(m, n)] = eval.overlap[i] * mat[i];
            }
        }
        out
    };
    let xt = x.transpose();
    let haa = &xt * block(&eval.a) * &x;
    let hbb = &xt * block(&eval.b) * &x;
    let hab = &xt * block(&eval.d) * &x;
    let mut h = DMatrix::zeros(2 * r, 2 * r);
    h.view_mut((0, 0), (r, r)).copy_from(&haa);
    h.view_mut((r, r), (r, r)).copy_from(&hbb);
    h.view_mut((0, r), (r, r)).copy_from(&hab);
    h.view_mut((r, 0), (r, r)).copy_from(&hab.transpose());
    let heig = SymmetricEigen::new(h);
    let (imin, emin) =
        heig.eigenvalues
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &e)| if e < acc.1 { (i, e) } else { acc },
            );
    if !emin.is_finite() {
        return Err(Error::InvalidState(
            "non-finite amplitude eigenvalue".into(),
        ));
    }
    let v = heig.eigenvectors.column(imin);
    let up = &x * v.rows(0, r);
    let dn = &x * v.rows(r, r);
    // fix the overall sign so that the largest amplitude is positive
    let (mut big, mut sign) = (0.0, 1.0);
    for m in 0..mm {
        for val in [up[m], dn[m]] {
            if val.abs() > big {
                big = val.abs();
                sign = val.signum();
            }
        }
    }
    for m in 0..mm {
        state.up_amps_mut()[m] = sign * up[m];
        state.down_amps_mut()[m] = sign * dn[m];
    }
    Ok(emin)
}

/// Diagonal curvature estimate for the displacements.
fn displacement_preconditioner(state: &VariationalState, params: &ModelParams) -> Vec<f64> {
    let eval = match Evaluation::new(state, params) {
        Ok(e) => e,
        Err(_) => return vec![1.0; state.displacements().len()],
    };
    let curv = displacement_curvature_of(state, params, &eval);
    let nk = state.num_modes();
    let weights: Vec<f64> = (0..state.multiplicity())
        .map(|m| state.up_amps()[m].powi(2) + state.down_amps()[m].powi(2))
        .collect();
    let wfloor = WEIGHT_FLOOR * weights.iter().cloned().fold(0.0, f64::max);
    curv.iter()
        .enumerate()
        .map(|(i, c)| {
            let nu = weights[i / nk].max(wfloor);
            c.abs().max(2.0 * params.frequencies[i % nk] * nu) / eval.norm
        })
        .collect()
}

/// Per-displacement step limit: half the polaron displacement `g_k / w_k` of
/// the mode, at least 0.5.
fn step_caps(state: &VariationalState, params: &ModelParams) -> Vec<f64> {
    let nk = state.num_modes();
    (0..state.displacements().len())
        .map(|i| {
            let k = i % nk;
            let g = params.diag_amplitudes[k]
                .abs()
                .max(params.offdiag_amplitudes[k].abs());
            (0.5 * g / params.frequencies[k]).max(0.5)
        })
        .collect()
}

/// Diagonal preconditioner for the full parameter vector `[A, B, f]`.
fn joint_preconditioner(state: &VariationalState, params: &ModelParams) -> Vec<f64> {
    let eval = match Evaluation::new(state, params) {
        Ok(e) => e,
        Err(_) => return vec![1.0; state.num_params()],
    };
    let energy = eval.hamiltonian / eval.norm;
    let mm = state.multiplicity();
    let mut out = Vec::with_capacity(state.num_params());
    let scale = (params.bias.abs() + params.tunneling.abs()).max(1e-3);
    for mat in [&eval.a, &eval.b] {
        for m in 0..mm {
            let i = eval.idx(m, m);
            out.push(2.0 * (mat[i] - energy).abs().max(0.1 * scale) / eval.norm);
        }
    }
    out.extend(displacement_preconditioner(state, params));
    out
}

/// L-BFGS over all parameters of `E = H / N`.
pub fn minimize_joint<C>(
    start: &VariationalState,
    params: &ModelParams,
    opts: &LbfgsOptions,
    observe: C,
) -> Result<(VariationalState, LbfgsOutcome)>
where
    C: FnMut(usize, f64, f64),
{
    let mut work = start.clone();
    // an ill-conditioned overlap matrix can make the pencil solution worse
    let e0 = crate::ansatz::energy(start, params).ok();
    optimal_amplitudes(&mut work, params)?;
    if let Some(e0) = e0 {
        if !(crate::ansatz::energy(&work, params)? <= e0) {
            work = start.clone();
        }
    }
    let mut caps = vec![f64::INFINITY; 2 * start.multiplicity()];
    caps.extend(step_caps(start, params));
    let mut scratch = work.clone();
    let mut pre = work.clone();
    let outcome = minimize(
        |x| {
            scratch.set_from_slice(x);
            let eval = Evaluation::new(&scratch, params).ok()?;
            if !(eval.norm > 1e-10) {
                return None;
            }
            let e = eval.hamiltonian / eval.norm;
            let g = energy_gradient(&scratch, params, &eval);
            (e.is_finite() && g.iter().all(|v| v.is_finite())).then_some((e, g))
        },
        |x| {
            pre.set_from_slice(x);
            joint_preconditioner(&pre, params)
        },
        work.to_vec(),
        &caps,
        opts,
        observe,
    )
    .ok_or_else(|| Error::InvalidState("energy undefined at the start".into()))?;
    work.set_from_slice(&outcome.x);
    // final amplitudes from the pencil, unless truncation made them worse
    let mut polished = work.clone();
    if optimal_amplitudes(&mut polished, params).is_ok() {
        if let Ok(e) = crate::ansatz::energy(&polished, params) {
            if e <= outcome.value {
                work = polished;
            }
        }
    }
    Ok((work, outcome))
}

/// Outcome of [`newton_polish`].
#[derive(Debug, Clone, Copy)]
pub struct PolishOutcome {
    pub energy: f64,
    pub grad_max: f64,
    pub steps: usize,
}

fn energy_and_gradient(state: &VariationalState, params: &ModelParams) -> Option<(f64, Vec<f64>)> {
    let eval = Evaluation::new(state, params).ok()?;
    if !(eval.norm > 1e-10) {
        return None;
    }
    let e = eval.hamiltonian / eval.norm;
    let g = energy_gradient(state, params, &eval);
    (e.is_finite() && g.iter().all(|v| v.is_finite())).then_some((e, g))
}

/// Newton iterations with a finite-difference Hessian of the analytic
/// gradient, in variables scaled by the diagonal preconditioner. Steps use
/// `|lambda| + mu` on the Hessian spectrum, with Levenberg-Marquardt control of
/// `mu` from the ratio of actual to predicted decrease.
pub fn newton_polish(
    state: &mut VariationalState,
    params: &ModelParams,
    grad_tol: f64,
    max_steps: usize,
) -> Result<PolishOutcome> {
    let (mut energy, mut grad) = energy_and_gradient(state, params)
        .ok_or_else(|| Error::InvalidState("energy undefined at the start".into()))?;
    let n = grad.len();
    let mut steps = 0;
    let mut damping = 0.0;
    while steps < max_steps && grad.iter().fold(0.0, |m: f64, g| m.max(g.abs())) >= grad_tol {
        steps += 1;
        let x = state.to_vec();
        let scale: Vec<f64> = joint_preconditioner(state, params)
            .iter()
            .map(|d| 1.0 / d.sqrt())
            .collect();
        let mut hess = DMatrix::zeros(n, n);
        let mut probe = state.clone();
        for j in 0..n {
            let h = 1e-5 * scale[j];
            let mut xp = x.clone();
            xp[j] += h;
            probe.set_from_slice(&xp);
            let Some((_, gp)) = energy_and_gradient(&probe, params) else {
                return Err(Error::InvalidState(
                    "energy undefined near the state".into(),
                ));
            };
            for i in 0..n {
                hess[(i, j)] = (gp[i] - grad[i]) / 1e-5 * scale[i];
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let eig = SymmetricEigen::new(hess);
        let lmax = eig.eigenvalues.iter().fold(0.0, |m: f64, l| m.max(l.abs()));
        if damping == 0.0 {
            damping = 1e-6 * lmax;
        }
        let sg: Vec<f64> = grad.iter().zip(&scale).map(|(g, s)| g * s).collect();
        let proj: Vec<f64> = (0..n)
            .map(|k| {
                eig.eigenvectors
                    .column(k)
                    .iter()
                    .zip(&sg)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let mut accepted = false;
        for _ in 0..40 {
            // damped step in scaled variables: -sum_k p_k v_k / (|l_k| + mu)
            let mut dir = vec![0.0; n];
            let mut predicted = 0.0;
            for k in 0..n {
                let l = eig.eigenvalues[k].abs() + damping;
                let c = proj[k] / l;
                predicted += -c * proj[k] + 0.5 * c * c * eig.eigenvalues[k].abs();
                let v = eig.eigenvectors.column(k);
                for i in 0..n {
                    dir[i] -= c * v[i];
                }
            }
            let xt: Vec<f64> = (0..n).map(|i| x[i] + dir[i] * scale[i]).collect();
            probe.set_from_slice(&xt);
            if let Some((et, gt)) = energy_and_gradient(&probe, params) {
                let actual = et - energy;
                if actual < 0.0 && actual <= 1e-4 * predicted {
                    *state = probe.clone();
                    energy = et;
                    grad = gt;
                    accepted = true;
                    damping = (damping / 3.0).max(1e-12 * lmax);
                    break;
                }
            }
            damping *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    let grad_max = grad.iter().fold(0.0, |m: f64, g| m.max(g.abs()));
    Ok(PolishOutcome {
        energy,
        grad_max,
        steps,
    })
}
