//! Fixed-point targets of the stationarity conditions `dH/dx - E dN/dx = 0`
//! and the analytic energy gradient.

use crate::ansatz::{Evaluation, VariationalState};
use crate::model::ModelParams;

/// Denominators smaller than this (relative to the energy scale) are singular.
const SINGULAR_EPS: f64 = 1e-13;

/// Which algebraic form of the `f` stationarity condition to iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetForm {
    /// The rearranged form in which the `f_mk` term of the term's own `d_mm`
    /// is kept in the numerator and the off-diagonal Lagrange sums are
    /// eliminated with the amplitude equations.
    Printed,
    /// Solve the stationarity condition for `f_mk` with every other quantity
    /// frozen (Jacobi step). Same fixed points as `Printed`, but the
    /// coefficient of `f_mk` keeps the curvature `2 w_k (A^2 + B^2)`, so
    /// isolated terms converge in one step.
    #[default]
    Lagrange,
}

/// Update targets `(A*, B*, f*)`.
#[derive(Debug, Clone)]
pub struct Targets {
    pub up_amps: Vec<f64>,
    pub down_amps: Vec<f64>,
    pub displacements: Vec<f64>,
    /// A denominator vanished or a target is not finite.
    pub singular: bool,
}

impl Targets {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.up_amps.clone();
        v.extend_from_slice(&self.down_amps);
        v.extend_from_slice(&self.displacements);
        v
    }
}

/// Pairwise weights shared by the target and gradient formulas.
struct Pairs {
    mm: usize,
    /// `F (h - E nu)` with `h_mn` the pair contribution to `H` and
    /// `nu_mn = A_m A_n + B_m B_n`.
    fr: Vec<f64>,
    /// `F nu`
    fnu: Vec<f64>,
    /// `F (A_m B_n + B_m A_n)`
    fc: Vec<f64>,
    /// `F (A_m A_n - B_m B_n)`
    fp: Vec<f64>,
}

impl Pairs {
    fn new(state: &VariationalState, eval: &Evaluation, energy: f64) -> Self {
        let mm = state.multiplicity();
        let up = state.up_amps();
        let dn = state.down_amps();
        let mut fr = vec![0.0; mm * mm];
        let mut fnu = vec![0.0; mm * mm];
        let mut fc = vec![0.0; mm * mm];
        let mut fp = vec![0.0; mm * mm];
        for m in 0..mm {
            for n in 0..mm {
                let i = eval.idx(m, n);
                let f = eval.overlap[i];
                let nu = up[m] * up[n] + dn[m] * dn[n];
                let c = up[m] * dn[n] + dn[m] * up[n];
                let h = c * eval.d[i] + up[m] * up[n] * eval.a[i] + dn[m] * dn[n] * eval.b[i];
                fr[i] = f * (h - energy * nu);
                fnu[i] = f * nu;
                fc[i] = f * c;
                fp[i] = f * (up[m] * up[n] - dn[m] * dn[n]);
            }
        }
        Pairs {
            mm,
            fr,
            fnu,
            fc,
            fp,
        }
    }

    fn row_sum(v: &[f64], mm: usize, m: usize) -> f64 {
        v[m * mm..(m + 1) * mm].iter().sum()
    }
}

/// Half-gradients of `H - E N` with respect to the amplitudes.
fn amplitude_residuals(
    state: &VariationalState,
    eval: &Evaluation,
    energy: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mm = state.multiplicity();
    let up = state.up_amps();
    let dn = state.down_amps();
    let mut ga = vec![0.0; mm];
    let mut gb = vec![0.0; mm];
    for n in 0..mm {
        for m in 0..mm {
            let i = eval.idx(n, m);
            let f = eval.overlap[i];
            ga[n] += f * (dn[m] * eval.d[i] + up[m] * (eval.a[i] - energy));
            gb[n] += f * (up[m] * eval.d[i] + dn[m] * (eval.b[i] - energy));
        }
    }
    (ga, gb)
}

/// Gradient of `H - E N` with respect to `f_mk`.
fn displacement_gradient(
    state: &VariationalState,
    params: &ModelParams,
    pairs: &Pairs,
) -> Vec<f64> {
    let mm = pairs.mm;
    let nk = state.num_modes();
    let mut g = vec![0.0; mm * nk];
    for m in 0..mm {
        let sr = Pairs::row_sum(&pairs.fr, mm, m);
        let sc = Pairs::row_sum(&pairs.fc, mm, m);
        let sp = Pairs::row_sum(&pairs.fp, mm, m);
        let gm = &mut g[m * nk..(m + 1) * nk];
        let fm = state.row(m);
        for k in 0..nk {
            gm[k] = 0.5 * params.offdiag_amplitudes[k] * sc + 0.5 * params.diag_amplitudes[k] * sp
                - fm[k] * sr;
        }
        for n in 0..mm {
            let i = m * mm + n;
            let (r, nu) = (pairs.fr[i], pairs.fnu[i]);
            let fnn = state.row(n);
            for k in 0..nk {
                gm[k] += fnn[k] * (r + params.frequencies[k] * nu);
            }
        }
        gm.iter_mut().for_each(|x| *x *= 2.0);
    }
    g
}

/// Diagonal second derivative of `H - E N` with respect to `f_mk` at fixed `E`:
/// `2 [w nu_mm + sum_{n != m} F (d^2 R - R + 2 d q)]`, `d = f_nk - f_mk`.
fn displacement_curvature(
    state: &VariationalState,
    params: &ModelParams,
    overlap: &[f64],
    pairs: &Pairs,
) -> Vec<f64> {
    let mm = pairs.mm;
    let nk = state.num_modes();
    let up = state.up_amps();
    let dn = state.down_amps();
    let mut c = vec![0.0; mm * nk];
    for m in 0..mm {
        let nu_mm = up[m] * up[m] + dn[m] * dn[m];
        let fm = state.row(m);
        let cm = &mut c[m * nk..(m + 1) * nk];
        for k in 0..nk {
            cm[k] = params.frequencies[k] * nu_mm;
        }
        for n in 0..mm {
            if n == m {
                continue;
            }
            let i = m * mm + n;
            let f = overlap[i];
            let fr = pairs.fr[i];
            let (aa, bb) = (up[m] * up[n], dn[m] * dn[n]);
            let cc = up[m] * dn[n] + dn[m] * up[n];
            let fnn = state.row(n);
            for k in 0..nk {
                let d = fnn[k] - fm[k];
                let w = params.frequencies[k];
                let q = 0.5 * cc * params.offdiag_amplitudes[k]
                    + aa * (w * fnn[k] + 0.5 * params.diag_amplitudes[k])
                    + bb * (w * fnn[k] - 0.5 * params.diag_amplitudes[k]);
                cm[k] += fr * (d * d - 1.0) + 2.0 * f * d * q;
            }
        }
        cm.iter_mut().for_each(|x| *x *= 2.0);
    }
    c
}

/// Analytic gradient of `E = H / N`, flattened like [`VariationalState::to_vec`].
pub fn energy_gradient(
    state: &VariationalState,
    params: &ModelParams,
    eval: &Evaluation,
) -> Vec<f64> {
    let energy = eval.hamiltonian / eval.norm;
    let (ga, gb) = amplitude_residuals(state, eval, energy);
    let pairs = Pairs::new(state, eval, energy);
    let gf = displacement_gradient(state, params, &pairs);
    let inv = 1.0 / eval.norm;
    ga.iter()
        .chain(&gb)
        .map(|g| 2.0 * g * inv)
        .chain(gf.iter().map(|g| g * inv))
        .collect()
}

fn is_singular(den: f64, scale: f64) -> bool {
    !(den.abs() > SINGULAR_EPS * scale) || !den.is_finite()
}

/// Fixed-point targets at the current state. `energy` must be `H / N` of the
/// same state.
pub fn update_targets(
    state: &VariationalState,
    params: &ModelParams,
    eval: &Evaluation,
    energy: f64,
    form: TargetForm,
) -> Targets {
    let mm = state.multiplicity();
    let nk = state.num_modes();
    let up = state.up_amps();
    let dn = state.down_amps();
    let scale = energy.abs().max(params.tunneling.abs()).max(1e-300);
    let mut singular = false;

    // amplitudes: A_n* = [sum_m B_m F d_nm + sum_{m != n} A_m F (a_nm - E)] / (E - a_nn)
    let mut up_t = vec![0.0; mm];
    let mut dn_t = vec![0.0; mm];
    for n in 0..mm {
        let mut na = 0.0;
        let mut nb = 0.0;
        for m in 0..mm {
            let i = eval.idx(n, m);
            let f = eval.overlap[i];
            na += dn[m] * f * eval.d[i];
            nb += up[m] * f * eval.d[i];
            if m != n {
                na += up[m] * f * (eval.a[i] - energy);
                nb += dn[m] * f * (eval.b[i] - energy);
            }
        }
        let da = energy - eval.a[eval.idx(n, n)];
        let db = energy - eval.b[eval.idx(n, n)];
        singular |= is_singular(da, scale) || is_singular(db, scale);
        up_t[n] = na / da;
        dn_t[n] = nb / db;
    }

    let pairs = Pairs::new(state, eval, energy);
    let mut f_t = vec![0.0; mm * nk];
    match form {
        TargetForm::Printed => {
            for m in 0..mm {
                let nu_mm = up[m] * up[m] + dn[m] * dn[m];
                let diag =
                    up[m] * up[m] * eval.a[eval.idx(m, m)] + dn[m] * dn[m] * eval.b[eval.idx(m, m)];
                let sc = Pairs::row_sum(&pairs.fc, mm, m);
                let sp = Pairs::row_sum(&pairs.fp, mm, m);
                // numerator weights on f_nk: 2 F [c d + (n != m)(AA (a - E) + BB (b - E))]
                // and 2 w_k F nu (n != m)
                let mut w_lin = vec![0.0; mm];
                let mut w_freq = vec![0.0; mm];
                for n in 0..mm {
                    let i = eval.idx(m, n);
                    let f = eval.overlap[i];
                    let mut w = f * (up[n] * dn[m] + dn[n] * up[m]) * eval.d[i];
                    if n != m {
                        w += f
                            * (up[n] * up[m] * (eval.a[i] - energy)
                                + dn[n] * dn[m] * (eval.b[i] - energy));
                        w_freq[n] = 2.0 * pairs.fnu[i];
                    }
                    w_lin[n] = 2.0 * w;
                }
                for k in 0..nk {
                    let wk = params.frequencies[k];
                    let mut num =
                        params.offdiag_amplitudes[k] * sc + params.diag_amplitudes[k] * sp;
                    for n in 0..mm {
                        num += (w_lin[n] + wk * w_freq[n]) * state.displacement(n, k);
                    }
                    let den = 2.0 * nu_mm * (energy - wk) - 2.0 * diag;
                    singular |= is_singular(den, scale * nu_mm.max(1e-300));
                    f_t[m * nk + k] = num / den;
                }
            }
        }
        TargetForm::Lagrange => {
            let grad = displacement_gradient(state, params, &pairs);
            let curv = displacement_curvature(state, params, &eval.overlap, &pairs);
            for m in 0..mm {
                let nu_mm = up[m] * up[m] + dn[m] * dn[m];
                for k in 0..nk {
                    let i = m * nk + k;
                    let bare = 2.0 * params.frequencies[k] * nu_mm;
                    let coef = curv[i].abs().max(bare);
                    singular |= is_singular(coef, params.frequencies[k] * 1e-300);
                    f_t[i] = state.displacements()[i] - grad[i] / coef;
                }
            }
        }
    }
    singular |= !up_t.iter().chain(&dn_t).chain(&f_t).all(|x| x.is_finite());
    Targets {
        up_amps: up_t,
        down_amps: dn_t,
        displacements: f_t,
        singular,
    }
}

/// Diagonal curvature of `H - E N` in every displacement at the state's own energy.
pub(crate) fn displacement_curvature_of(
    state: &VariationalState,
    params: &ModelParams,
    eval: &Evaluation,
) -> Vec<f64> {
    let energy = eval.hamiltonian / eval.norm;
    let pairs = Pairs::new(state, eval, energy);
    displacement_curvature(state, params, &eval.overlap, &pairs)
}
