//! The multiple Davydov D2 state
//!
//! `|psi> = |+> sum_m A_m |f_m> + |-> sum_m B_m |f_m>`,
//!
//! where `|f_m>` is the multimode coherent state with real displacements
//! `f_{m,k}` shared by both spin components. All parameters are real, so
//! `<sigma_y> = 0` for every state handled here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Norm below which a state is considered collapsed.
pub const COLLAPSE_NORM: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    multiplicity: usize,
    num_modes: usize,
    up_amps: Vec<f64>,
    down_amps: Vec<f64>,
    /// Row-major `multiplicity x num_modes`.
    displacements: Vec<f64>,
}

impl VariationalState {
    /// All amplitudes and displacements zero.
    pub fn zeros(multiplicity: usize, num_modes: usize) -> Self {
        VariationalState {
            multiplicity,
            num_modes,
            up_amps: vec![0.0; multiplicity],
            down_amps: vec![0.0; multiplicity],
            displacements: vec![0.0; multiplicity * num_modes],
        }
    }

    pub fn from_parts(
        up_amps: Vec<f64>,
        down_amps: Vec<f64>,
        displacements: Vec<f64>,
        num_modes: usize,
    ) -> Result<Self> {
        let multiplicity = up_amps.len();
        if multiplicity == 0 {
            return Err(Error::InvalidState("multiplicity must be >= 1".into()));
        }
        if down_amps.len() != multiplicity || displacements.len() != multiplicity * num_modes {
            return Err(Error::InvalidState(format!(
                "inconsistent sizes: {} up, {} down, {} displacements for {} modes",
                multiplicity,
                down_amps.len(),
                displacements.len(),
                num_modes
            )));
        }
        let state = VariationalState {
            multiplicity,
            num_modes,
            up_amps,
            down_amps,
            displacements,
        };
        if !state.is_finite() {
            return Err(Error::InvalidState("non-finite parameter".into()));
        }
        Ok(state)
    }

    pub fn multiplicity(&self) -> usize {
        self.multiplicity
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn up_amps(&self) -> &[f64] {
        &self.up_amps
    }

    pub fn down_amps(&self) -> &[f64] {
        &self.down_amps
    }

    pub fn up_amps_mut(&mut self) -> &mut [f64] {
        &mut self.up_amps
    }

    pub fn down_amps_mut(&mut self) -> &mut [f64] {
        &mut self.down_amps
    }

    pub fn displacements(&self) -> &[f64] {
        &self.displacements
    }

    pub fn displacements_mut(&mut self) -> &mut [f64] {
        &mut self.displacements
    }

    /// Displacements of coherent term `m`.
    pub fn row(&self, m: usize) -> &[f64] {
        &self.displacements[m * self.num_modes..(m + 1) * self.num_modes]
    }

    pub fn row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.displacements[m * self.num_modes..(m + 1) * self.num_modes]
    }

    pub fn displacement(&self, m: usize, k: usize) -> f64 {
        self.displacements[m * self.num_modes + k]
    }

    /// Number of real variational parameters, `M (N + 2)`.
    pub fn num_params(&self) -> usize {
        self.multiplicity * (self.num_modes + 2)
    }

    /// Parameters flattened as `[A_1..A_M, B_1..B_M, f_11..f_MN]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.up_amps);
        v.extend_from_slice(&self.down_amps);
        v.extend_from_slice(&self.displacements);
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec).
    pub fn set_from_slice(&mut self, x: &[f64]) {
        let m = self.multiplicity;
        assert_eq!(x.len(), self.num_params(), "parameter vector length");
        self.up_amps.copy_from_slice(&x[..m]);
        self.down_amps.copy_from_slice(&x[m..2 * m]);
        self.displacements.copy_from_slice(&x[2 * m..]);
    }

    pub fn is_finite(&self) -> bool {
        self.up_amps
            .iter()
            .chain(&self.down_amps)
            .chain(&self.displacements)
            .all(|x| x.is_finite())
    }

    /// Multiply every spin amplitude by `factor`.
    pub fn scale_amplitudes(&mut self, factor: f64) {
        self.up_amps.iter_mut().for_each(|a| *a *= factor);
        self.down_amps.iter_mut().for_each(|b| *b *= factor);
    }

    /// Image under the spin flip combined with boson parity, `(A, B, f) -> (B, A, -f)`.
    pub fn parity_partner(&self) -> Self {
        VariationalState {
            multiplicity: self.multiplicity,
            num_modes: self.num_modes,
            up_amps: self.down_amps.clone(),
            down_amps: self.up_amps.clone(),
            displacements: self.displacements.iter().map(|f| -f).collect(),
        }
    }

    pub fn check_model(&self, params: &ModelParams) -> Result<()> {
        if self.num_modes != params.num_modes() || self.multiplicity == 0 {
            return Err(Error::DimensionMismatch {
                state: (self.multiplicity, self.num_modes),
                modes: params.num_modes(),
            });
        }
        Ok(())
    }
}

/// Debye-Waller factor `F_mn = exp(-1/2 sum_k (f_mk - f_nk)^2)`.
pub fn debye_waller(state: &VariationalState, m: usize, n: usize) -> f64 {
    let sq: f64 = state
        .row(m)
        .iter()
        .zip(state.row(n))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (-0.5 * sq).exp()
}

/// Cached pairwise quantities of one state: Debye-Waller factors and the
/// `a`, `b`, `d` matrix elements between coherent terms, plus `H` and `N`.
///
/// `a_mn = e/2 + sum_k [w f_m f_n + l/2 (f_m + f_n)]`,
/// `b_mn = -e/2 + sum_k [w f_m f_n - l/2 (f_m + f_n)]`,
/// `d_mn = -D/2 + sum_k h/2 (f_m + f_n)`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    multiplicity: usize,
    pub overlap: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub hamiltonian: f64,
    pub norm: f64,
}

impl Evaluation {
    pub fn new(state: &VariationalState, params: &ModelParams) -> Result<Self> {
        state.check_model(params)?;
        let mm = state.multiplicity;
        let nk = state.num_modes;
        let w = &params.frequencies;
        let lam = &params.diag_amplitudes;
        let eta = &params.offdiag_amplitudes;

        let diag_load: Vec<f64> = (0..mm)
            .map(|m| state.row(m).iter().zip(lam).map(|(f, l)| f * l).sum())
            .collect();
        let off_load: Vec<f64> = (0..mm)
            .map(|m| state.row(m).iter().zip(eta).map(|(f, h)| f * h).sum())
            .collect();

        let mut overlap = vec![0.0; mm * mm];
        let mut a = vec![0.0; mm * mm];
        let mut b = vec![0.0; mm * mm];
        let mut d = vec![0.0; mm * mm];
        for m in 0..mm {
            let fm = state.row(m);
            for n in m..mm {
                let fnn = state.row(n);
                let mut sq = 0.0;
                let mut kin = 0.0;
                for k in 0..nk {
                    let diff = fm[k] - fnn[k];
                    sq += diff * diff;
                    kin += w[k] * fm[k] * fnn[k];
                }
                let f = (-0.5 * sq).exp();
                let half_l = 0.5 * (diag_load[m] + diag_load[n]);
                let amn = 0.5 * params.bias + kin + half_l;
                let bmn = -0.5 * params.bias + kin - half_l;
                let dmn = -0.5 * params.tunneling + 0.5 * (off_load[m] + off_load[n]);
                for (mat, val) in [
                    (&mut overlap, f),
                    (&mut a, amn),
                    (&mut b, bmn),
                    (&mut d, dmn),
                ] {
                    mat[m * mm + n] = val;
                    mat[n * mm + m] = val;
                }
            }
        }

        let up = state.up_amps();
        let dn = state.down_amps();
        let mut hamiltonian = 0.0;
        let mut norm = 0.0;
        for m in 0..mm {
            for n in 0..mm {
                let i = m * mm + n;
                let f = overlap[i];
                hamiltonian += f
                    * ((up[m] * dn[n] + dn[m] * up[n]) * d[i]
                        + up[m] * up[n] * a[i]
                        + dn[m] * dn[n] * b[i]);
                norm += f * (up[m] * up[n] + dn[m] * dn[n]);
            }
        }
        Ok(Evaluation {
            multiplicity: mm,
            overlap,
            a,
            b,
            d,
            hamiltonian,
            norm,
        })
    }

    #[inline]
    pub fn idx(&self, m: usize, n: usize) -> usize {
        m * self.multiplicity + n
    }

    pub fn energy(&self) -> Result<f64> {
        if !(self.norm > COLLAPSE_NORM) {
            return Err(Error::CollapsedState(self.norm));
        }
        Ok(self.hamiltonian / self.norm)
    }
}

pub fn hamiltonian_expectation(state: &VariationalState, params: &ModelParams) -> Result<f64> {
    Ok(Evaluation::new(state, params)?.hamiltonian)
}

/// `N = sum_mn (A_m A_n + B_m B_n) F_mn`.
pub fn norm(state: &VariationalState) -> f64 {
    let mm = state.multiplicity();
    let up = state.up_amps();
    let dn = state.down_amps();
    let mut total = 0.0;
    for m in 0..mm {
        for n in 0..mm {
            total += debye_waller(state, m, n) * (up[m] * up[n] + dn[m] * dn[n]);
        }
    }
    total
}

pub fn energy(state: &VariationalState, params: &ModelParams) -> Result<f64> {
    Evaluation::new(state, params)?.energy()
}

/// Ground-state observables of a variational state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub energy: f64,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub entropy: f64,
}

/// Von Neumann entropy (natural log) of a spin with Bloch-vector length `r`.
pub fn spin_entropy(r: f64) -> f64 {
    let r = r.clamp(0.0, 1.0);
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(0.5 * (1.0 + r)) + term(0.5 * (1.0 - r))
}

pub fn observables(state: &VariationalState, params: &ModelParams) -> Result<Observables> {
    let eval = Evaluation::new(state, params)?;
    observables_from(state, &eval)
}

pub fn observables_from(state: &VariationalState, eval: &Evaluation) -> Result<Observables> {
    let energy = eval.energy()?;
    let mm = state.multiplicity();
    let up = state.up_amps();
    let dn = state.down_amps();
    let mut z = 0.0;
    let mut x = 0.0;
    for m in 0..mm {
        for n in 0..mm {
            let f = eval.overlap[eval.idx(m, n)];
            z += f * (up[m] * up[n] - dn[m] * dn[n]);
            x += f * (up[m] * dn[n] + dn[m] * up[n]);
        }
    }
    let sigma_z = z / eval.norm;
    let sigma_x = x / eval.norm;
    let r = sigma_z.hypot(sigma_x);
    if r > 1.0 + 1e-10 {
        return Err(Error::BlochLength(r));
    }
    Ok(Observables {
        energy,
        sigma_z,
        sigma_x,
        entropy: spin_entropy(r),
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized form of a state together with the fingerprint of the model it
/// was optimized for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_fingerprint: String,
    pub state: VariationalState,
}

impl Checkpoint {
    pub fn new(state: &VariationalState, params: &ModelParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_fingerprint: params.fingerprint(),
            state: state.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        // re-validate through the checked constructor
        let s = &cp.state;
        VariationalState::from_parts(
            s.up_amps.clone(),
            s.down_amps.clone(),
            s.displacements.clone(),
            s.num_modes,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cp)
    }

    /// State, after checking that it belongs to `params`.
    pub fn state_for(&self, params: &ModelParams) -> Result<VariationalState> {
        if self.model_fingerprint != params.fingerprint() {
            return Err(Error::Checkpoint(
                "model fingerprint does not match the checkpoint".into(),
            ));
        }
        self.state.check_model(params)?;
        Ok(self.state.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{discretize, BathSpec};
    use crate::model::Layout;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn free_spin(bias: f64, tunneling: f64, modes: usize) -> ModelParams {
        ModelParams::new(
            bias,
            tunneling,
            Layout::DiagonalOnly,
            vec![1.0; modes],
            vec![0.0; modes],
            vec![0.0; modes],
        )
        .unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, m: usize, n: usize, spread: f64) -> VariationalState {
        let up = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dn = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = (0..m * n)
            .map(|_| rng.random_range(-spread..spread))
            .collect();
        VariationalState::from_parts(up, dn, f, n).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize) -> ModelParams {
        ModelParams::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            Layout::SingleBathBoth,
            (0..n).map(|_| rng.random_range(0.1..2.0)).collect(),
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn debye_waller_values() {
        let s = VariationalState::from_parts(vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], 1)
            .unwrap();
        assert_relative_eq!(
            debye_waller(&s, 0, 1),
            (-0.5f64).exp(),
            max_relative = 1e-15
        );
        assert_eq!(debye_waller(&s, 0, 0), 1.0);
        assert_relative_eq!(debye_waller(&s, 0, 1), 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn debye_waller_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_state(&mut rng, 4, 10, 0.5);
        let p = random_model(&mut rng, 10);
        let eval = Evaluation::new(&s, &p).unwrap();
        for m in 0..4 {
            assert_eq!(eval.overlap[eval.idx(m, m)], 1.0);
            for n in 0..4 {
                let f = eval.overlap[eval.idx(m, n)];
                assert!(f > 0.0 && f <= 1.0);
                assert_eq!(f, eval.overlap[eval.idx(n, m)]);
                // independent loop order: sum of squares expanded
                let mut sq = 0.0;
                for k in (0..10).rev() {
                    sq += s.displacement(m, k).powi(2) + s.displacement(n, k).powi(2)
                        - 2.0 * s.displacement(m, k) * s.displacement(n, k);
                }
                assert_relative_eq!(f, (-0.5 * sq).exp(), max_relative = 1e-13);
                assert_relative_eq!(f, debye_waller(&s, m, n), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn vacuum_expectations() {
        let p = free_spin(0.3, 0.1, 2);
        let up = VariationalState::from_parts(vec![1.0], vec![0.0], vec![0.0; 2], 2).unwrap();
        assert_relative_eq!(
            hamiltonian_expectation(&up, &p).unwrap(),
            0.15,
            max_relative = 1e-15
        );
        let p = free_spin(0.0, 0.1, 2);
        let h = 0.5f64.sqrt();
        let sym = VariationalState::from_parts(vec![h], vec![h], vec![0.0; 2], 2).unwrap();
        assert_relative_eq!(energy(&sym, &p).unwrap(), -0.05, max_relative = 1e-14);
    }

    #[test]
    fn norm_values() {
        let s = VariationalState::from_parts(vec![0.6], vec![0.8], vec![0.3, -0.2], 2).unwrap();
        assert_relative_eq!(norm(&s), 1.0, max_relative = 1e-15);
        let s = VariationalState::from_parts(vec![0.5, 0.5], vec![0.0, 0.0], vec![0.4, 0.4], 1)
            .unwrap();
        assert_relative_eq!(norm(&s), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn collapsed_state_is_flagged() {
        let p = free_spin(0.0, 0.1, 1);
        let s = VariationalState::zeros(2, 1);
        assert!(matches!(energy(&s, &p), Err(Error::CollapsedState(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let p = free_spin(0.0, 0.1, 3);
        let s = VariationalState::zeros(2, 2);
        assert!(matches!(
            energy(&s, &p),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(VariationalState::from_parts(vec![1.0], vec![], vec![], 0).is_err());
        assert!(VariationalState::from_parts(vec![f64::NAN], vec![0.0], vec![], 0).is_err());
    }

    #[test]
    fn single_term_diagonal_energy_matches_grid_scan() {
        // M = 1, diagonal coupling: the optimal displacement is
        // f_k = -(A^2 - B^2) l_k / (2 (A^2 + B^2) w_k); scanning a common scale
        // factor must find its minimum at 1.
        let bath = discretize(&BathSpec::new(0.5, 0.2, 6, 2.0)).unwrap();
        let p = ModelParams::diagonal_only(&bath, 0.0, 0.1).unwrap();
        let (a, b) = (0.9f64, 0.3f64);
        let pol = (a * a - b * b) / (a * a + b * b);
        let optimal: Vec<f64> = (0..6)
            .map(|k| -pol * p.diag_amplitudes[k] / (2.0 * p.frequencies[k]))
            .collect();
        let energy_at = |c: f64| {
            let f = optimal.iter().map(|x| c * x).collect();
            energy(
                &VariationalState::from_parts(vec![a], vec![b], f, 6).unwrap(),
                &p,
            )
            .unwrap()
        };
        let (best_c, _) = (0..=2000)
            .map(|i| i as f64 * 1e-3)
            .map(|c| (c, energy_at(c)))
            .fold(
                (0.0, f64::INFINITY),
                |acc, v| if v.1 < acc.1 { v } else { acc },
            );
        assert!((best_c - 1.0).abs() <= 1e-3, "{best_c}");
        assert!(energy_at(1.0) <= energy_at(1.0 + 1e-4));
        assert!(energy_at(1.0) <= energy_at(1.0 - 1e-4));
    }

    #[test]
    fn spin_up_vacuum_observables() {
        let p = free_spin(0.0, 0.1, 2);
        let s = VariationalState::from_parts(vec![1.0], vec![0.0], vec![0.0; 2], 2).unwrap();
        let o = observables(&s, &p).unwrap();
        assert_eq!((o.sigma_z, o.sigma_x), (1.0, 0.0));
        assert_eq!(o.entropy, 0.0);
        assert_relative_eq!(
            spin_entropy(0.0),
            std::f64::consts::LN_2,
            max_relative = 1e-15
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_model(&mut rng, 5);
        let mut s = random_state(&mut rng, 3, 5, 2.0);
        s.row_mut(1)[2] = -0.0;
        s.row_mut(2)[0] = 1e-300;
        let cp = Checkpoint::new(&s, &p);
        let back = Checkpoint::from_json(&cp.to_json()).unwrap();
        let restored = back.state_for(&p).unwrap();
        let bits =
            |v: &VariationalState| v.to_vec().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&restored), bits(&s));
        let other = random_model(&mut rng, 5);
        assert!(back.state_for(&other).is_err());
        let mut wrong = cp.clone();
        wrong.version = 99;
        assert!(Checkpoint::from_json(&wrong.to_json()).is_err());
    }

    proptest! {
        #[test]
        fn energy_is_scale_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_model(&mut rng, 4);
            let s = random_state(&mut rng, 3, 4, 1.0);
            let mut t = s.clone();
            t.scale_amplitudes(scale);
            let e = energy(&s, &p).unwrap();
            prop_assert!((energy(&t, &p).unwrap() - e).abs() < 1e-12 * e.abs().max(1.0));
        }

        #[test]
        fn parity_symmetry_of_unbiased_diagonal_model(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = random_model(&mut rng, 5);
            p.bias = 0.0;
            p.offdiag_amplitudes = vec![0.0; 5];
            p.layout = Layout::DiagonalOnly;
            let s = random_state(&mut rng, 4, 5, 1.0);
            let t = s.parity_partner();
            let (e1, e2) = (Evaluation::new(&s, &p).unwrap(), Evaluation::new(&t, &p).unwrap());
            let scale = e1.hamiltonian.abs().max(1.0);
            prop_assert!((e1.hamiltonian - e2.hamiltonian).abs() <= 4.0 * f64::EPSILON * scale * 16.0);
            prop_assert!((e1.norm - e2.norm).abs() <= 64.0 * f64::EPSILON * e1.norm);
            let (o1, o2) = (observables(&s, &p).unwrap(), observables(&t, &p).unwrap());
            prop_assert!((o1.sigma_z + o2.sigma_z).abs() < 1e-13);
            prop_assert!((o1.sigma_x - o2.sigma_x).abs() < 1e-13);
        }

        #[test]
        fn permutation_and_entropy_bounds(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_model(&mut rng, 3);
            let s = random_state(&mut rng, 4, 3, 1.5);
            let order = [2usize, 0, 3, 1];
            let mut f = Vec::new();
            for &m in &order { f.extend_from_slice(s.row(m)); }
            let t = VariationalState::from_parts(
                order.iter().map(|&m| s.up_amps()[m]).collect(),
                order.iter().map(|&m| s.down_amps()[m]).collect(),
                f,
                3,
            ).unwrap();
            let (o1, o2) = (observables(&s, &p).unwrap(), observables(&t, &p).unwrap());
            prop_assert!((o1.energy - o2.energy).abs() < 1e-12);
            prop_assert!((o1.sigma_z - o2.sigma_z).abs() < 1e-12);
            prop_assert!((o1.sigma_x - o2.sigma_x).abs() < 1e-12);
            prop_assert!(o1.entropy >= 0.0 && o1.entropy <= std::f64::consts::LN_2);
            prop_assert!(o1.sigma_z.powi(2) + o1.sigma_x.powi(2) <= 1.0 + 1e-10);
        }
    }
}
