//! Run configuration: strict TOML schema with scenario presets, merged with
//! explicit overrides and resolved into model/grid/initial-state builders.

use crate::filter::FilterError;
use crate::linalg::{kron, C64, Operator};
use crate::model::{build_spin_model, ControlLaw, ModelError, SpinAxis, SystemModel};
use crate::sde::{make_grid, SdeError, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown preset {0:?} (expected fig3, fig5, or hzero)")]
    UnknownPreset(String),
    #[error("invalid value for {key}: {detail}")]
    Invalid { key: String, detail: String },
    #[error("grid.fine_steps = {fine_steps} is not divisible by grid.aggregation = {aggregation}")]
    Grid {
        fine_steps: usize,
        aggregation: usize,
    },
    #[error(
        "checkpoint_stride = {stride} does not divide the coarse step count {coarse_steps} \
         (grid.fine_steps / grid.aggregation)"
    )]
    Stride { stride: usize, coarse_steps: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

fn invalid(key: impl Into<String>, detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        detail: detail.into(),
    }
}

/// Where the observation increments come from: the truth filter's photocurrent
/// `dY = Tr(ρ(L+L†))dt + dW`, or the raw Wiener increments (reference-measure
/// convention used by the statistical suites).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    Truth,
    Wiener,
}

/// Integration scheme for the unnormalized filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnnormalizedScheme {
    Euler,
    Heun,
}

/// Projection-filter update rule. `Auto` picks the cheapest valid form:
/// closed-form coordinates when the Hamiltonian commutes with the coupling,
/// otherwise the reduced per-coordinate update for Hermitian couplings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Auto,
    General,
    Reduced,
    Commuting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Zero,
    Constant,
    ExpDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlConfig {
    pub kind: ControlKind,
    /// Spin axis of the control Hamiltonian: "x", "y", or "z".
    pub axis: String,
    pub amplitude: f64,
    /// Decay rate for the exponentially decaying law.
    pub rate: f64,
    /// Multiply the amplitude by a per-trajectory standard-normal draw.
    pub random_scale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub n_atoms: usize,
    pub mu: f64,
    pub control: ControlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub fine_steps: usize,
    pub aggregation: usize,
}

/// Initial state: either per-atom diagonal mixtures (`atoms[i] = [p0, p1]`
/// are the |0⟩/|1⟩ weights of atom i, tensored left to right) or an explicit
/// matrix given by its real and imaginary parts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitialStateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub re: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub im: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterSelection {
    pub unnormalized: UnnormalizedScheme,
    pub projection: ProjectionKind,
    /// |θ_i| beyond this flags (but does not abort) the trajectory.
    pub theta_guard: f64,
}

/// Fully resolved run configuration. Defaults reproduce the two-qubit
/// scenario: T = 1, N₀ = 4096 fine steps aggregated in pairs (Δt = 2⁻¹¹),
/// μ = 1, u(t) = 5e^{−5t}·a with a ~ N(0,1) per trajectory, and the product
/// state diag(0.75, 0.25) ⊗ diag(0.5, 0.5).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed_base: u64,
    pub n_trajectories: usize,
    pub checkpoint_stride: usize,
    pub out_dir: String,
    pub observation: ObservationSource,
    /// Debug switch: replace every Wiener increment with 0.
    pub zero_noise: bool,
    /// Basis index of the pointer state tracked by the `trPR` column.
    pub pointer_index: usize,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub initial_state: InitialStateConfig,
    pub filters: FilterSelection,
}

impl RunConfig {
    /// Baseline configuration (identical to the "fig3" preset, unnamed).
    pub fn defaults() -> Self {
        Self {
            preset: None,
            seed_base: 1,
            n_trajectories: 1,
            checkpoint_stride: 8,
            out_dir: "out".to_string(),
            observation: ObservationSource::Truth,
            zero_noise: false,
            pointer_index: 0,
            model: ModelConfig {
                n_atoms: 2,
                mu: 1.0,
                control: ControlConfig {
                    kind: ControlKind::ExpDecay,
                    axis: "y".to_string(),
                    amplitude: 5.0,
                    rate: 5.0,
                    random_scale: true,
                },
            },
            grid: GridConfig {
                horizon: 1.0,
                fine_steps: 4096,
                aggregation: 2,
            },
            initial_state: InitialStateConfig {
                atoms: Some(vec![vec![0.75, 0.25], vec![0.5, 0.5]]),
                re: None,
                im: None,
            },
            filters: FilterSelection {
                unnormalized: UnnormalizedScheme::Euler,
                projection: ProjectionKind::Auto,
                theta_guard: 50.0,
            },
        }
    }

    /// Named scenario presets: "fig3" (y-axis random control), "fig5"
    /// (z-axis random control, commutes with the coupling), "hzero" (no
    /// control).
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::defaults();
        cfg.preset = Some(name.to_string());
        match name {
            "fig3" => {}
            "fig5" => cfg.model.control.axis = "z".to_string(),
            "hzero" => {
                cfg.model.control.kind = ControlKind::Zero;
                cfg.model.control.random_scale = false;
            }
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        }
        Ok(cfg)
    }

    /// System dimension `2^n_atoms`.
    pub fn dim(&self) -> usize {
        1usize << self.model.n_atoms
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.n_atoms == 0 || self.model.n_atoms > 8 {
            return Err(invalid(
                "model.n_atoms",
                format!("{} is outside 1..=8", self.model.n_atoms),
            ));
        }
        if !(self.model.mu > 0.0 && self.model.mu.is_finite()) {
            return Err(invalid("model.mu", format!("{} must be positive", self.model.mu)));
        }
        self.control_axis()?;
        let c = &self.model.control;
        if !c.amplitude.is_finite() {
            return Err(invalid("model.control.amplitude", "must be finite"));
        }
        if c.kind == ControlKind::ExpDecay && !(c.rate.is_finite() && c.rate >= 0.0) {
            return Err(invalid(
                "model.control.rate",
                format!("{} must be a finite nonnegative rate", c.rate),
            ));
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(invalid(
                "grid.horizon",
                format!("{} must be a positive duration", self.grid.horizon),
            ));
        }
        if self.grid.fine_steps == 0 || self.grid.aggregation == 0 {
            return Err(invalid(
                "grid",
                "fine_steps and aggregation must be at least 1",
            ));
        }
        if self.grid.fine_steps % self.grid.aggregation != 0 {
            return Err(ConfigError::Grid {
                fine_steps: self.grid.fine_steps,
                aggregation: self.grid.aggregation,
            });
        }
        let coarse_steps = self.grid.fine_steps / self.grid.aggregation;
        if self.checkpoint_stride == 0 || coarse_steps % self.checkpoint_stride != 0 {
            return Err(ConfigError::Stride {
                stride: self.checkpoint_stride,
                coarse_steps,
            });
        }
        if self.n_trajectories == 0 {
            return Err(invalid("n_trajectories", "must be at least 1"));
        }
        if self.pointer_index >= self.dim() {
            return Err(invalid(
                "pointer_index",
                format!("{} is outside 0..{}", self.pointer_index, self.dim()),
            ));
        }
        if !(self.filters.theta_guard > 0.0 && self.filters.theta_guard.is_finite()) {
            return Err(invalid("filters.theta_guard", "must be positive"));
        }
        self.validate_initial_state()?;
        Ok(())
    }

    fn validate_initial_state(&self) -> Result<(), ConfigError> {
        let s = &self.initial_state;
        match (&s.atoms, &s.re) {
            (Some(_), Some(_)) => Err(invalid(
                "initial_state",
                "give either atoms or an explicit matrix, not both",
            )),
            (None, None) => Err(invalid(
                "initial_state",
                "needs atoms = [[p0, p1], ...] or an explicit matrix (re, im)",
            )),
            (Some(atoms), None) => {
                if s.im.is_some() {
                    return Err(invalid("initial_state.im", "only valid with re"));
                }
                if atoms.len() != self.model.n_atoms {
                    return Err(invalid(
                        "initial_state.atoms",
                        format!("{} rows for {} atoms", atoms.len(), self.model.n_atoms),
                    ));
                }
                for (i, probs) in atoms.iter().enumerate() {
                    if probs.len() != 2 {
                        return Err(invalid(
                            format!("initial_state.atoms[{i}]"),
                            "expected two weights [p0, p1]",
                        ));
                    }
                    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                        return Err(invalid(
                            format!("initial_state.atoms[{i}]"),
                            "weights must be nonnegative",
                        ));
                    }
                    if (probs[0] + probs[1] - 1.0).abs() > 1e-12 {
                        return Err(invalid(
                            format!("initial_state.atoms[{i}]"),
                            format!("weights sum to {}, not 1", probs[0] + probs[1]),
                        ));
                    }
                }
                Ok(())
            }
            (None, Some(re)) => {
                let n = self.dim();
                if re.len() != n || re.iter().any(|row| row.len() != n) {
                    return Err(invalid(
                        "initial_state.re",
                        format!("expected a {n}×{n} matrix"),
                    ));
                }
                if let Some(im) = &s.im {
                    if im.len() != n || im.iter().any(|row| row.len() != n) {
                        return Err(invalid(
                            "initial_state.im",
                            format!("expected a {n}×{n} matrix"),
                        ));
                    }
                }
                // Hermiticity and unit trace now; positivity is enforced when
                // the state is adopted as the submanifold anchor.
                let rho = self.initial_state_operator()?;
                let dev = rho.hermiticity_deviation();
                if dev > 1e-10 {
                    return Err(invalid(
                        "initial_state",
                        format!("matrix is not Hermitian (deviation {dev:.3e})"),
                    ));
                }
                if (rho.trace_re() - 1.0).abs() > 1e-10 {
                    return Err(invalid(
                        "initial_state",
                        format!("trace is {}, not 1", rho.trace_re()),
                    ));
                }
                Ok(())
            }
        }
    }

    fn control_axis(&self) -> Result<SpinAxis, ConfigError> {
        self.model
            .control
            .axis
            .parse()
            .map_err(|e: String| invalid("model.control.axis", e))
    }

    /// Control law with the amplitude multiplied by a per-trajectory scale
    /// (1 when `random_scale` is off).
    pub fn control_law(&self, scale: f64) -> ControlLaw {
        let c = &self.model.control;
        match c.kind {
            ControlKind::Zero => ControlLaw::Zero,
            ControlKind::Constant => ControlLaw::Constant {
                amplitude: c.amplitude * scale,
            },
            ControlKind::ExpDecay => ControlLaw::ExpDecay {
                amplitude: c.amplitude * scale,
                rate: c.rate,
            },
        }
    }

    pub fn build_model(&self, scale: f64) -> Result<SystemModel, ConfigError> {
        let axis = self.control_axis()?;
        Ok(build_spin_model(
            self.model.n_atoms,
            self.model.mu,
            self.control_law(scale),
            axis,
        )?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        Ok(make_grid(
            self.grid.horizon,
            self.grid.fine_steps,
            self.grid.aggregation,
        )?)
    }

    pub fn initial_state_operator(&self) -> Result<Operator, ConfigError> {
        if let Some(atoms) = &self.initial_state.atoms {
            let mut rho = Operator::diag_real(&atoms[0]);
            for probs in &atoms[1..] {
                rho = kron(&rho, &Operator::diag_real(probs));
            }
            return Ok(rho);
        }
        let re = self
            .initial_state
            .re
            .as_ref()
            .ok_or_else(|| invalid("initial_state", "no state source configured"))?;
        let n = re.len();
        let zeros = vec![vec![0.0; n]; n];
        let im = self.initial_state.im.as_ref().unwrap_or(&zeros);
        Ok(Operator::from_fn(n, |r, c| C64::new(re[r][c], im[r][c])))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    seed_base: Option<u64>,
    n_trajectories: Option<usize>,
    checkpoint_stride: Option<usize>,
    out_dir: Option<String>,
    observation: Option<ObservationSource>,
    zero_noise: Option<bool>,
    pointer_index: Option<usize>,
    model: Option<RawModel>,
    grid: Option<RawGrid>,
    initial_state: Option<RawInitialState>,
    filters: Option<RawFilters>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n_atoms: Option<usize>,
    mu: Option<f64>,
    control: Option<RawControl>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    kind: Option<ControlKind>,
    axis: Option<String>,
    amplitude: Option<f64>,
    rate: Option<f64>,
    random_scale: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    horizon: Option<f64>,
    fine_steps: Option<usize>,
    aggregation: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitialState {
    atoms: Option<Vec<Vec<f64>>>,
    re: Option<Vec<Vec<f64>>>,
    im: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilters {
    unnormalized: Option<UnnormalizedScheme>,
    projection: Option<ProjectionKind>,
    theta_guard: Option<f64>,
}

fn merge(cfg: &mut RunConfig, raw: RawConfig) {
    if let Some(v) = raw.seed_base {
        cfg.seed_base = v;
    }
    if let Some(v) = raw.n_trajectories {
        cfg.n_trajectories = v;
    }
    if let Some(v) = raw.checkpoint_stride {
        cfg.checkpoint_stride = v;
    }
    if let Some(v) = raw.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = raw.observation {
        cfg.observation = v;
    }
    if let Some(v) = raw.zero_noise {
        cfg.zero_noise = v;
    }
    if let Some(v) = raw.pointer_index {
        cfg.pointer_index = v;
    }
    if let Some(m) = raw.model {
        if let Some(v) = m.n_atoms {
            cfg.model.n_atoms = v;
        }
        if let Some(v) = m.mu {
            cfg.model.mu = v;
        }
        if let Some(c) = m.control {
            if let Some(v) = c.kind {
                cfg.model.control.kind = v;
            }
            if let Some(v) = c.axis {
                cfg.model.control.axis = v;
            }
            if let Some(v) = c.amplitude {
                cfg.model.control.amplitude = v;
            }
            if let Some(v) = c.rate {
                cfg.model.control.rate = v;
            }
            if let Some(v) = c.random_scale {
                cfg.model.control.random_scale = v;
            }
        }
    }
    if let Some(g) = raw.grid {
        if let Some(v) = g.horizon {
            cfg.grid.horizon = v;
        }
        if let Some(v) = g.fine_steps {
            cfg.grid.fine_steps = v;
        }
        if let Some(v) = g.aggregation {
            cfg.grid.aggregation = v;
        }
    }
    if let Some(s) = raw.initial_state {
        // The state source is replaced wholesale: mixing a preset's atoms
        // with an override's matrix would be incoherent.
        cfg.initial_state = InitialStateConfig {
            atoms: s.atoms,
            re: s.re,
            im: s.im,
        };
    }
    if let Some(f) = raw.filters {
        if let Some(v) = f.unnormalized {
            cfg.filters.unnormalized = v;
        }
        if let Some(v) = f.projection {
            cfg.filters.projection = v;
        }
        if let Some(v) = f.theta_guard {
            cfg.filters.theta_guard = v;
        }
    }
}

/// Parses and validates a configuration document; the document's own
/// `preset` key (if any) supplies defaults for omitted keys.
pub fn load_config(text: &str) -> Result<RunConfig, ConfigError> {
    load_config_with_preset(text, None)
}

/// Like [`load_config`] with an external preset choice (e.g. a command-line
/// flag) that wins over the document's `preset` key.
pub fn load_config_with_preset(
    text: &str,
    preset: Option<&str>,
) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text)?;
    let chosen = preset
        .map(str::to_string)
        .or_else(|| raw.preset.clone());
    let mut cfg = match &chosen {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::defaults(),
    };
    merge(&mut cfg, raw);
    cfg.preset = chosen;
    cfg.validate()?;
    Ok(cfg)
}
