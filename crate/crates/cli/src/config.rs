//! Run configuration: TOML schema, flag overrides and model construction.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use sbm_core::bath::BathSpec;
use sbm_core::model::{rotation_angle_for_elimination, FrequencyConvention, RotationMap};
use sbm_core::transition::{
    Detector, ModelTemplate, SweepPlan, SweptParameter, DEFAULT_RESOLUTION, ORDER_THRESHOLD,
};
use sbm_core::{Layout, ModelParams, SolverConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub bath: BathSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bath_x: Option<BathXSection>,
    /// Explicit mode list; replaces the bath sections when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<ExplicitModes>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub critical: CriticalSection,
    #[serde(default)]
    pub rotate: RotateSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layout: Layout,
    /// `epsilon`.
    pub bias: f64,
    /// `Delta`.
    pub tunneling: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layout: Layout::DiagonalOnly,
            bias: 0.0,
            tunneling: 0.1,
        }
    }
}

/// The `sigma_z` bath.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BathSection {
    pub s: f64,
    pub alpha: f64,
    pub cutoff: f64,
    pub modes: usize,
    pub lambda: f64,
}

impl Default for BathSection {
    fn default() -> Self {
        BathSection {
            s: 0.5,
            alpha: 0.0,
            cutoff: 1.0,
            modes: 50,
            lambda: 1.5,
        }
    }
}

/// The `sigma_x` bath. Unset fields are copied from `[bath]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BathXSection {
    pub s: Option<f64>,
    pub beta: f64,
    pub cutoff: Option<f64>,
    pub modes: Option<usize>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitModes {
    pub frequencies: Vec<f64>,
    pub diag: Vec<f64>,
    #[serde(default)]
    pub offdiag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linspace {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweptParameter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linspace: Option<Linspace>,
    #[serde(default = "yes")]
    pub warm_start: bool,
    #[serde(default)]
    pub track_branches: bool,
    /// Hold `beta = beta_ratio * alpha` while sweeping `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_ratio: Option<f64>,
    #[serde(default)]
    pub frame_angle: f64,
}

fn yes() -> bool {
    true
}

impl SweepSection {
    pub fn values(&self) -> Result<Vec<f64>> {
        match (&self.grid, &self.linspace) {
            (Some(g), None) => Ok(g.clone()),
            (None, Some(l)) => {
                if l.points < 2 {
                    bail!("sweep.linspace.points must be >= 2");
                }
                let h = (l.stop - l.start) / (l.points - 1) as f64;
                Ok((0..l.points).map(|i| l.start + h * i as f64).collect())
            }
            _ => bail!("sweep needs exactly one of `grid` or `linspace`"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    OrderParameter,
    BranchCrossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticalSection {
    pub detector: DetectorKind,
    pub threshold: f64,
    pub resolution: f64,
}

impl Default for CriticalSection {
    fn default() -> Self {
        CriticalSection {
            detector: DetectorKind::OrderParameter,
            threshold: ORDER_THRESHOLD,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl CriticalSection {
    pub fn detector(&self) -> Detector {
        match self.detector {
            DetectorKind::OrderParameter => Detector::OrderParameter {
                threshold: self.threshold,
            },
            DetectorKind::BranchCrossing => Detector::BranchCrossing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotateSection {
    /// Rotation angle; when unset, the angle that removes the bias and the
    /// `sigma_x` coupling is used.
    pub theta: Option<f64>,
    pub frequency_convention: FrequencyConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Fixed cutoff; when unset, the cutoff is doubled from `n_start` until the
    /// energy settles to `tol`.
    pub n_max: Option<usize>,
    pub n_start: usize,
    pub tol: f64,
    /// Variational state to compare against the exact energy.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            n_max: None,
            n_start: 4,
            tol: 1e-10,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Main output file; stdout when unset.
    pub path: Option<PathBuf>,
    /// Checkpoint written by `solve`, read by `oracle`.
    pub checkpoint: Option<PathBuf>,
    /// Convergence trace CSV written by `solve`.
    pub trace: Option<PathBuf>,
    /// Resolved configuration echo; stderr when unset.
    pub resolved_config: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a config file, apply `path=value` overrides and validate.
    pub fn load(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        // parse once on the raw text so errors carry line numbers
        let parsed: RunConfig = toml::from_str(text).context("invalid config")?;
        let mut cfg = if overrides.is_empty() {
            parsed
        } else {
            let mut table: toml::Table = toml::from_str(text).context("invalid config")?;
            for (path, value) in overrides {
                set_path(&mut table, path, value.clone())?;
            }
            toml::Value::Table(table)
                .try_into()
                .context("invalid value after command-line overrides")?
        };
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        if let Some(x) = self.bath_x.as_mut() {
            x.s.get_or_insert(self.bath.s);
            x.cutoff.get_or_insert(self.bath.cutoff);
            x.modes.get_or_insert(self.bath.modes);
            x.lambda.get_or_insert(self.bath.lambda);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.solver.validate().context("[solver]")?;
        if self.model.layout != Layout::DiagonalOnly
            && self.bath_x.is_none()
            && self.explicit.is_none()
        {
            bail!(
                "[model] layout {:?} needs a [bath_x] section",
                self.model.layout
            );
        }
        if let Some(s) = &self.sweep {
            s.values().context("[sweep]")?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn diag_spec(&self) -> BathSpec {
        let b = &self.bath;
        BathSpec::new(b.s, b.alpha, b.modes, b.lambda).with_cutoff(b.cutoff)
    }

    pub fn offdiag_spec(&self) -> Option<BathSpec> {
        self.bath_x.as_ref().map(|x| {
            let b = &self.bath;
            BathSpec::new(
                x.s.unwrap_or(b.s),
                x.beta,
                x.modes.unwrap_or(b.modes),
                x.lambda.unwrap_or(b.lambda),
            )
            .with_cutoff(x.cutoff.unwrap_or(b.cutoff))
        })
    }

    pub fn template(&self) -> ModelTemplate {
        let mut t =
            ModelTemplate::diagonal_only(self.diag_spec(), self.model.bias, self.model.tunneling);
        t.layout = self.model.layout;
        t.offdiag_bath = self.offdiag_spec();
        t.beta_ratio = self.sweep.as_ref().and_then(|s| s.beta_ratio);
        t
    }

    pub fn model(&self) -> Result<ModelParams> {
        if let Some(e) = &self.explicit {
            let n = e.frequencies.len();
            let off = if e.offdiag.is_empty() {
                vec![0.0; n]
            } else {
                e.offdiag.clone()
            };
            return Ok(ModelParams::new(
                self.model.bias,
                self.model.tunneling,
                self.model.layout,
                e.frequencies.clone(),
                e.diag.clone(),
                off,
            )?);
        }
        let t = self.template();
        Ok(t.build(SweptParameter::Alpha, self.bath.alpha)?)
    }

    pub fn sweep_plan(&self) -> Result<SweepPlan> {
        let Some(s) = &self.sweep else {
            bail!("this command needs a [sweep] section");
        };
        if self.explicit.is_some() {
            bail!("[explicit] modes cannot be swept; use [bath] sections");
        }
        let mut plan = SweepPlan::new(
            s.parameter,
            s.values()?,
            self.template(),
            self.solver.clone(),
        );
        plan.warm_start = s.warm_start;
        plan.track_branches = s.track_branches;
        plan.frame_angle = s.frame_angle;
        plan.branch_threshold = self.critical.threshold;
        plan.validate()?;
        Ok(plan)
    }
}

/// Couplings `(sqrt(a~), sqrt(b~))` of a bath pair coupled through `sigma_z` and
/// `sigma_x` after a spin rotation by `angle`.
fn rotated_couplings(alpha: f64, beta: f64, angle: f64) -> Result<(f64, f64)> {
    let (sin, cos) = angle.sin_cos();
    let cz = alpha.sqrt() * cos + beta.sqrt() * sin;
    let cx = -alpha.sqrt() * sin + beta.sqrt() * cos;
    let tiny = 1e-7 * cz.abs().max(cx.abs());
    if cx.abs() <= tiny {
        return Ok((cz.abs(), 0.0));
    }
    if cz * cx < 0.0 && cz.abs() > tiny {
        bail!("rotation by {angle} gives couplings of opposite sign, which a pair of (alpha, beta) cannot represent");
    }
    Ok((cz.abs(), cx.abs()))
}

impl RunConfig {
    /// Config of the spin-rotated model; the angle defaults to `[rotate] theta`,
    /// then to the angle that removes the bias and the `sigma_x` coupling.
    pub fn rotated(&self, theta: Option<f64>) -> Result<(RunConfig, f64)> {
        if self.explicit.is_some() {
            bail!("rotate needs a [bath] description, not [explicit] modes");
        }
        let beta = match self.model.layout {
            Layout::DiagonalOnly => 0.0,
            Layout::SingleBathBoth => {
                let x = self
                    .bath_x
                    .as_ref()
                    .context("single_bath_both needs [bath_x]")?;
                let b = &self.bath;
                if x.s != Some(b.s)
                    || x.cutoff != Some(b.cutoff)
                    || x.modes != Some(b.modes)
                    || x.lambda != Some(b.lambda)
                {
                    bail!("rotate needs [bath_x] to share s, cutoff, modes and lambda with [bath]");
                }
                x.beta
            }
            Layout::TwoBath => bail!("two independent baths do not map onto a single rotated bath"),
        };
        let angle = match theta.or(self.rotate.theta) {
            Some(t) => RotationMap::new(t)?.angle(),
            None => rotation_angle_for_elimination(&self.model()?)?.angle(),
        };
        let (sin, cos) = angle.sin_cos();
        let mut out = self.clone();
        out.rotate.theta = None;
        let (e, d) = (self.model.bias, self.model.tunneling);
        let scale = e.hypot(d);
        out.model.bias = e * cos - d * sin;
        out.model.tunneling = e * sin + d * cos;
        if out.model.bias.abs() <= 1e-12 * scale {
            out.model.bias = 0.0;
        }
        if out.model.tunneling.abs() <= 1e-12 * scale {
            out.model.tunneling = 0.0;
        }
        let (cz, cx) = rotated_couplings(self.bath.alpha, beta, angle)?;
        out.bath.alpha = cz * cz;
        if cx == 0.0 {
            out.model.layout = Layout::DiagonalOnly;
            out.bath_x = None;
        } else {
            out.model.layout = Layout::SingleBathBoth;
            let mut x = self.bath_x.clone().unwrap_or_default();
            x.s = Some(self.bath.s);
            x.cutoff = Some(self.bath.cutoff);
            x.modes = Some(self.bath.modes);
            x.lambda = Some(self.bath.lambda);
            x.beta = cx * cx;
            out.bath_x = Some(x);
        }
        if let Some(sw) = out.sweep.as_mut() {
            if sw.parameter == SweptParameter::Beta {
                bail!("a beta sweep does not map onto a single rotated coupling; sweep alpha with beta_ratio");
            }
            let ratio = match (self.model.layout, sw.beta_ratio) {
                (Layout::DiagonalOnly, _) => 0.0,
                (_, Some(r)) => r,
                (_, None) => bail!("an alpha sweep at fixed beta is not linear after rotation; set sweep.beta_ratio"),
            };
            let (fz, fx) = rotated_couplings(1.0, ratio, angle)?;
            let factor = fz * fz;
            if let Some(g) = sw.grid.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
            if let Some(l) = sw.linspace.as_mut() {
                l.start *= factor;
                l.stop *= factor;
            }
            sw.beta_ratio = (fx != 0.0).then(|| (fx / fz).powi(2));
        }
        out.validate()?;
        Ok((out, angle))
    }
}

/// Set `a.b.c = value`, creating intermediate tables.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .with_context(|| format!("empty key in `{path}`"))?;
    let mut t = table;
    for p in parts {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{path}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parse `key=value`; the value is read as TOML and falls back to a string.
pub fn parse_override(s: &str) -> std::result::Result<(String, toml::Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
