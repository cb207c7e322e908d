//! Model parameter sets in the merged single-chain form, the spin rotation that
//! maps mixed-coupling models onto purely diagonal ones, and the analytic
//! single-polaron critical coupling.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bath::DiscretizedBath;
use crate::error::{Error, Result};

/// How the spin couples to the boson modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Only `sigma_z` coupling.
    DiagonalOnly,
    /// Two independent baths merged into one chain of `2N` modes; the first half
    /// couples through `sigma_z`, the second through `sigma_x`.
    TwoBath,
    /// One bath whose modes couple through both `sigma_z` and `sigma_x`.
    SingleBathBoth,
}

/// Spin-boson Hamiltonian
/// `e/2 sz - D/2 sx + sum w_k b+b + sz/2 sum l_k (b+ + b) + sx/2 sum h_k (b+ + b)`
/// with all modes on a single index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub bias: f64,
    pub tunneling: f64,
    pub layout: Layout,
    pub frequencies: Vec<f64>,
    pub diag_amplitudes: Vec<f64>,
    pub offdiag_amplitudes: Vec<f64>,
}

impl ModelParams {
    pub fn new(
        bias: f64,
        tunneling: f64,
        layout: Layout,
        frequencies: Vec<f64>,
        diag_amplitudes: Vec<f64>,
        offdiag_amplitudes: Vec<f64>,
    ) -> Result<Self> {
        let p = ModelParams {
            bias,
            tunneling,
            layout,
            frequencies,
            diag_amplitudes,
            offdiag_amplitudes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn diagonal_only(bath: &DiscretizedBath, bias: f64, tunneling: f64) -> Result<Self> {
        Self::new(
            bias,
            tunneling,
            Layout::DiagonalOnly,
            bath.frequencies.clone(),
            bath.amplitudes.clone(),
            vec![0.0; bath.len()],
        )
    }

    /// Concatenate a `sigma_z` bath and a `sigma_x` bath into one chain with
    /// disjoint coupling support.
    pub fn two_bath(
        bath_z: &DiscretizedBath,
        bath_x: &DiscretizedBath,
        bias: f64,
        tunneling: f64,
    ) -> Result<Self> {
        let nz = bath_z.len();
        let nx = bath_x.len();
        let mut frequencies = bath_z.frequencies.clone();
        frequencies.extend_from_slice(&bath_x.frequencies);
        let mut diag = bath_z.amplitudes.clone();
        diag.extend(std::iter::repeat_n(0.0, nx));
        let mut offdiag = vec![0.0; nz];
        offdiag.extend_from_slice(&bath_x.amplitudes);
        Self::new(bias, tunneling, Layout::TwoBath, frequencies, diag, offdiag)
    }

    /// One bath coupled both ways. Both discretizations must share a mesh.
    pub fn single_bath_both(
        bath_z: &DiscretizedBath,
        bath_x: &DiscretizedBath,
        bias: f64,
        tunneling: f64,
    ) -> Result<Self> {
        if bath_z.len() != bath_x.len() {
            return Err(Error::InvalidModel(format!(
                "mode counts differ: {} vs {}",
                bath_z.len(),
                bath_x.len()
            )));
        }
        for (k, (a, b)) in bath_z
            .frequencies
            .iter()
            .zip(&bath_x.frequencies)
            .enumerate()
        {
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return Err(Error::InvalidModel(format!(
                    "mode {k} frequencies differ ({a} vs {b}); use equal spectral exponents"
                )));
            }
        }
        Self::new(
            bias,
            tunneling,
            Layout::SingleBathBoth,
            bath_z.frequencies.clone(),
            bath_z.amplitudes.clone(),
            bath_x.amplitudes.clone(),
        )
    }

    pub fn num_modes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frequencies.len();
        if self.diag_amplitudes.len() != n || self.offdiag_amplitudes.len() != n {
            return Err(Error::InvalidModel(format!(
                "array lengths differ: {} frequencies, {} diagonal, {} off-diagonal",
                n,
                self.diag_amplitudes.len(),
                self.offdiag_amplitudes.len()
            )));
        }
        if !self.bias.is_finite() || !self.tunneling.is_finite() {
            return Err(Error::InvalidModel(
                "bias and tunneling must be finite".into(),
            ));
        }
        for k in 0..n {
            let w = self.frequencies[k];
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "frequency {k} = {w} must be > 0"
                )));
            }
            if !self.diag_amplitudes[k].is_finite() || !self.offdiag_amplitudes[k].is_finite() {
                return Err(Error::InvalidModel(format!("amplitude {k} not finite")));
            }
        }
        match self.layout {
            Layout::DiagonalOnly => {
                if self.offdiag_amplitudes.iter().any(|&h| h != 0.0) {
                    return Err(Error::InvalidModel(
                        "diagonal-only layout carries off-diagonal amplitudes".into(),
                    ));
                }
            }
            Layout::TwoBath => {
                if n % 2 != 0 {
                    return Err(Error::InvalidModel(format!(
                        "two-bath layout needs an even mode count, got {n}"
                    )));
                }
                let half = n / 2;
                if self.diag_amplitudes[half..].iter().any(|&l| l != 0.0)
                    || self.offdiag_amplitudes[..half].iter().any(|&h| h != 0.0)
                {
                    return Err(Error::InvalidModel(
                        "two-bath layout requires disjoint coupling support".into(),
                    ));
                }
            }
            Layout::SingleBathBoth => {}
        }
        Ok(())
    }

    /// Stable hex digest of every parameter bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"sbm-model-v1");
        hasher.update(self.bias.to_bits().to_le_bytes());
        hasher.update(self.tunneling.to_bits().to_le_bytes());
        hasher.update([self.layout as u8]);
        hasher.update((self.frequencies.len() as u64).to_le_bytes());
        for arr in [
            &self.frequencies,
            &self.diag_amplitudes,
            &self.offdiag_amplitudes,
        ] {
            for x in arr.iter() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Spin rotation `exp(-i theta sigma_y / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMap {
    angle: f64,
}

impl RotationMap {
    pub fn new(angle: f64) -> Result<Self> {
        if !(angle > -FRAC_PI_2 && angle < FRAC_PI_2) {
            return Err(Error::InvalidModel(format!(
                "rotation angle {angle} outside (-pi/2, pi/2)"
            )));
        }
        Ok(RotationMap { angle })
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn inverse(&self) -> Self {
        RotationMap { angle: -self.angle }
    }
}

/// Frequency convention applied by [`rotate_params`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyConvention {
    /// A spin rotation leaves boson frequencies untouched.
    #[default]
    Invariant,
    /// Reporting convention `w~ = w (a~/l~) / (a/l + b/h)` with the global couplings
    /// of the two baths; `a~ = (sqrt(a) cos + sqrt(b) sin)^2`.
    CouplingWeighted { alpha: f64, beta: f64 },
}

pub fn rotate_params(
    p: &ModelParams,
    map: RotationMap,
    convention: FrequencyConvention,
) -> Result<ModelParams> {
    if p.layout != Layout::SingleBathBoth {
        return Err(Error::WrongLayout(p.layout));
    }
    let (sin, cos) = map.angle.sin_cos();
    let bias = p.bias * cos - p.tunneling * sin;
    let tunneling = p.bias * sin + p.tunneling * cos;
    let (diag, offdiag): (Vec<f64>, Vec<f64>) = p
        .diag_amplitudes
        .iter()
        .zip(&p.offdiag_amplitudes)
        .map(|(&l, &h)| (l * cos + h * sin, -l * sin + h * cos))
        .unzip();
    let frequencies = match convention {
        FrequencyConvention::Invariant => p.frequencies.clone(),
        FrequencyConvention::CouplingWeighted { alpha, beta } => {
            let alpha_rot = (alpha.sqrt() * cos + beta.sqrt() * sin).powi(2);
            let ratio = |c: f64, amp: f64| if c == 0.0 { 0.0 } else { c / amp };
            p.frequencies
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    let pre =
                        ratio(alpha, p.diag_amplitudes[k]) + ratio(beta, p.offdiag_amplitudes[k]);
                    w * ratio(alpha_rot, diag[k]) / pre
                })
                .collect()
        }
    };
    ModelParams::new(
        bias,
        tunneling,
        Layout::SingleBathBoth,
        frequencies,
        diag,
        offdiag,
    )
}

const RATIO_TOLERANCE: f64 = 1e-8;

fn ratios_agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= RATIO_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Angle that zeroes both the rotated bias and every rotated off-diagonal
/// amplitude, `tan(theta) = e/D = h_k/l_k`.
pub fn rotation_angle_for_elimination(p: &ModelParams) -> Result<RotationMap> {
    let mut reference: Option<(f64, String)> = None;
    let mut check = |num: f64, den: f64, what: String| -> Result<()> {
        if num == 0.0 && den == 0.0 {
            return Ok(());
        }
        if den == 0.0 {
            return Err(Error::InconsistentRatios(format!(
                "{what}: denominator vanishes, required angle is +-pi/2"
            )));
        }
        let r = num / den;
        match &reference {
            None => reference = Some((r, what)),
            Some((r0, what0)) => {
                if !ratios_agree(r, *r0) {
                    return Err(Error::InconsistentRatios(format!(
                        "{what} = {r} differs from {what0} = {r0}"
                    )));
                }
            }
        }
        Ok(())
    };
    check(p.bias, p.tunneling, "bias/tunneling".to_string())?;
    for k in 0..p.num_modes() {
        check(
            p.offdiag_amplitudes[k],
            p.diag_amplitudes[k],
            format!("offdiag/diag amplitude ratio of mode {k}"),
        )?;
    }
    let angle = reference.map_or(0.0, |(r, _)| r.atan());
    RotationMap::new(angle)
}

/// Rotate onto the equivalent purely diagonal model. Residual off-diagonal
/// amplitudes at rounding level are cleared.
pub fn rotate_to_diagonal(p: &ModelParams) -> Result<(ModelParams, RotationMap)> {
    let map = rotation_angle_for_elimination(p)?;
    let mut rotated = rotate_params(p, map, FrequencyConvention::Invariant)?;
    let scale = p.bias.hypot(p.tunneling).max(f64::MIN_POSITIVE);
    if rotated.bias.abs() > 1e-12 * scale {
        return Err(Error::InconsistentRatios(format!(
            "rotated bias {} does not vanish",
            rotated.bias
        )));
    }
    rotated.bias = 0.0;
    for (l, h) in rotated
        .diag_amplitudes
        .iter()
        .zip(rotated.offdiag_amplitudes.iter_mut())
    {
        if h.abs() > 1e-7 * l.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::InconsistentRatios(format!(
                "rotated off-diagonal amplitude {h} does not vanish"
            )));
        }
        *h = 0.0;
    }
    rotated.layout = Layout::DiagonalOnly;
    rotated.validate()?;
    Ok((rotated, map))
}

/// Rotate a spin expectation pair, `s~z = sz cos - sx sin`, `s~x = sz sin + sx cos`.
/// With the angle of a [`RotationMap`] this maps rotated-frame values back to the
/// original frame; `-theta` maps original-frame values into the rotated frame.
pub fn rotate_observables(sigma_z: f64, sigma_x: f64, angle: f64) -> (f64, f64) {
    let (sin, cos) = angle.sin_cos();
    (sigma_z * cos - sigma_x * sin, sigma_z * sin + sigma_x * cos)
}

/// Critical coupling of the variational single-polaron state,
/// `sin(pi s) e^(-s/2) / (2 pi (1 - s)) (D / w_c)^(1 - s)`.
pub fn single_polaron_alpha_c(s: f64, tunneling: f64, cutoff: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::ExponentOutOfRange(s));
    }
    Ok((PI * s).sin() * (-s / 2.0).exp() / (2.0 * PI * (1.0 - s))
        * (tunneling / cutoff).powf(1.0 - s))
}
