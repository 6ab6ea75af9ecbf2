//! Run configuration: a single TOML file read by every subcommand, with
//! unknown keys rejected and units baked into the key names.

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use qrn_core::elementary::HardwareParams;
use qrn_core::engine::{FilterSchedule, Protocol, ProtocolConfig};
use qrn_core::optimize::{Objective, OptimizeSpec, SweepSpec, TauSearch};

/// Configuration problem: malformed file, unknown key, or a combination
/// of values no command accepts. Mapped to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Option<ProtocolSection>,
    pub hardware: Option<HardwareSection>,
    pub squeezing: Option<SqueezingSection>,
    pub filter: Option<FilterSection>,
    pub mc: Option<McSection>,
    pub optimize: Option<OptimizeSection>,
    pub sweep: Option<SweepSection>,
    pub pdf: Option<PdfSection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// "chain" (two segments per level) or "triangle" (three).
    pub kind: String,
    /// Nesting levels above the elementary segments.
    pub levels: Option<u32>,
    /// Fock-space truncation per mode.
    pub n_max: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    pub l0_km: Option<f64>,
    pub t_coh_s: f64,
    pub l_att_km: Option<f64>,
    pub f: Option<f64>,
    pub d: Option<f64>,
    pub v: Option<f64>,
    pub eta: Option<f64>,
    pub t_swap_s: Option<f64>,
    pub v_c_s_per_km: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqueezingSection {
    pub eps: f64,
    pub eps_b: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub tau_s: Option<f64>,
    /// One simulate record per cutoff; other commands reject this.
    pub tau_list_s: Option<Vec<f64>>,
    pub tau1_s: Option<f64>,
    pub tau2_s: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub n_traj: Option<usize>,
    pub seed: Option<u64>,
    pub max_events: Option<u64>,
    /// Also run the semi-analytic engine and report z-scores.
    pub compare_engine: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    /// "fidelity" | "rate" | "key_rate".
    pub objective: String,
    /// End-to-end distance (the segment length follows the level).
    pub l_km: Option<f64>,
    pub levels_min: Option<u32>,
    pub levels_max: Option<u32>,
    pub eps_lo: Option<f64>,
    pub eps_hi: Option<f64>,
    pub nu_tau_lo: Option<f64>,
    pub nu_tau_hi: Option<f64>,
    pub split_eps: Option<bool>,
    pub split_tau: Option<bool>,
    pub multistart: Option<usize>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub l_km: Vec<f64>,
    pub t_coh_s: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdfSection {
    pub p_merge: f64,
    pub nu_per_s: f64,
    pub t_max_s: f64,
    pub points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    fn protocol(&self) -> Result<&ProtocolSection, ConfigError> {
        self.protocol.as_ref().ok_or_else(|| bad("missing [protocol] section"))
    }

    fn hardware(&self) -> Result<&HardwareSection, ConfigError> {
        self.hardware.as_ref().ok_or_else(|| bad("missing [hardware] section"))
    }

    pub fn protocol_kind(&self) -> Result<Protocol, ConfigError> {
        match self.protocol()?.kind.as_str() {
            "chain" => Ok(Protocol::OneD),
            "triangle" => Ok(Protocol::TwoD),
            other => Err(bad(format!(
                "protocol.kind must be \"chain\" or \"triangle\", got \"{other}\""
            ))),
        }
    }

    pub fn n_max(&self) -> Result<usize, ConfigError> {
        Ok(self.protocol()?.n_max.unwrap_or(2))
    }

    /// Hardware with baseline defaults for everything the file omits.
    /// `need_l0` commands (simulate, mc) require an explicit segment
    /// length; the optimizing commands derive it from the level.
    pub fn hardware_params(&self, need_l0: bool) -> Result<HardwareParams, ConfigError> {
        let h = self.hardware()?;
        if need_l0 && h.l0_km.is_none() {
            return Err(bad("hardware.l0_km is required for this command"));
        }
        let mut hw = HardwareParams::baseline(h.l0_km.unwrap_or(1.0), h.t_coh_s);
        if let Some(x) = h.l_att_km {
            hw.l_att = x;
        }
        if let Some(x) = h.f {
            hw.f = x;
        }
        if let Some(x) = h.d {
            hw.d = x;
        }
        if let Some(x) = h.v {
            hw.v = x;
        }
        if let Some(x) = h.eta {
            hw.eta = x;
        }
        if let Some(x) = h.t_swap_s {
            hw.t_s = x;
        }
        if let Some(x) = h.v_c_s_per_km {
            hw.v_c = x;
        }
        Ok(hw)
    }

    /// The filter schedules to simulate: one entry per record. Multiple
    /// entries only come from `tau_list_s`, which only `allow_list`
    /// callers accept.
    pub fn filter_schedules(
        &self,
        protocol: Protocol,
        allow_list: bool,
    ) -> Result<Vec<FilterSchedule>, ConfigError> {
        let Some(f) = &self.filter else {
            return Ok(vec![FilterSchedule::Off]);
        };
        let chosen = [
            f.tau_s.is_some(),
            f.tau_list_s.is_some(),
            f.tau1_s.is_some() || f.tau2_s.is_some(),
        ]
        .iter()
        .filter(|&&x| x)
        .count();
        if chosen != 1 {
            return Err(bad(
                "filter: set exactly one of tau_s, tau_list_s, or tau1_s + tau2_s",
            ));
        }
        if let Some(tau) = f.tau_s {
            return Ok(vec![FilterSchedule::Uniform { tau }]);
        }
        if let Some(list) = &f.tau_list_s {
            if !allow_list {
                return Err(bad("filter.tau_list_s is only accepted by `simulate`"));
            }
            if list.is_empty() {
                return Err(bad("filter.tau_list_s must not be empty"));
            }
            return Ok(list.iter().map(|&tau| FilterSchedule::Uniform { tau }).collect());
        }
        match (f.tau1_s, f.tau2_s) {
            (Some(tau1), Some(tau2)) => {
                if protocol != Protocol::TwoD {
                    return Err(bad("filter.tau1_s/tau2_s apply to the triangle protocol"));
                }
                Ok(vec![FilterSchedule::UniformTwoStage { tau1, tau2 }])
            }
            _ => Err(bad("filter: tau1_s and tau2_s must be set together")),
        }
    }

    /// Protocol configuration for simulate/mc, one per filter schedule.
    pub fn protocol_configs(
        &self,
        allow_tau_list: bool,
    ) -> Result<Vec<ProtocolConfig>, ConfigError> {
        let protocol = self.protocol_kind()?;
        let levels = self
            .protocol()?
            .levels
            .ok_or_else(|| bad("protocol.levels is required for this command"))?;
        let sq = self
            .squeezing
            .as_ref()
            .ok_or_else(|| bad("missing [squeezing] section"))?;
        if sq.eps_b.is_some() && protocol != Protocol::TwoD {
            return Err(bad("squeezing.eps_b applies to the triangle protocol"));
        }
        let hw = self.hardware_params(true)?;
        Ok(self
            .filter_schedules(protocol, allow_tau_list)?
            .into_iter()
            .map(|filter| ProtocolConfig {
                protocol,
                levels,
                hw: hw.clone(),
                eps: sq.eps,
                eps_b: sq.eps_b,
                n_max: self.n_max().expect("checked"),
                filter,
            })
            .collect())
    }

    pub fn mc_settings(&self) -> (usize, u64, u64, bool) {
        let m = self.mc.as_ref();
        (
            m.and_then(|m| m.n_traj).unwrap_or(4151),
            m.and_then(|m| m.seed).unwrap_or(0),
            m.and_then(|m| m.max_events).unwrap_or(10_000_000),
            m.and_then(|m| m.compare_engine).unwrap_or(false),
        )
    }

    pub fn objective(&self) -> Result<Objective, ConfigError> {
        let o = self
            .optimize
            .as_ref()
            .ok_or_else(|| bad("missing [optimize] section"))?;
        match o.objective.as_str() {
            "fidelity" => Ok(Objective::Fidelity),
            "rate" => Ok(Objective::Rate),
            "key_rate" => Ok(Objective::KeyRate),
            other => Err(bad(format!(
                "optimize.objective must be \"fidelity\", \"rate\", or \"key_rate\", got \"{other}\""
            ))),
        }
    }

    /// Template for optimize/sweep. `need_l` demands an explicit distance
    /// (the sweep command takes it from the grid instead).
    pub fn optimize_spec(&self, need_l: bool) -> Result<OptimizeSpec, ConfigError> {
        let o = self
            .optimize
            .as_ref()
            .ok_or_else(|| bad("missing [optimize] section"))?;
        let objective = self.objective()?;
        let protocol = self.protocol_kind()?;
        let hw = self.hardware_params(false)?;
        if need_l && o.l_km.is_none() {
            return Err(bad("optimize.l_km is required for this command"));
        }
        let mut spec = OptimizeSpec::new(protocol, hw, o.l_km.unwrap_or(1.0), objective);
        spec.n_max = self.n_max()?;
        spec.n_range = (o.levels_min.unwrap_or(0), o.levels_max.unwrap_or(6));
        spec.eps_bounds = (o.eps_lo.unwrap_or(0.01), o.eps_hi.unwrap_or(0.5));
        spec.tau = match (o.nu_tau_lo, o.nu_tau_hi) {
            (None, None) => TauSearch::Off,
            (Some(lo), Some(hi)) => TauSearch::Free { nu_tau_bounds: (lo, hi) },
            _ => return Err(bad("optimize: nu_tau_lo and nu_tau_hi must be set together")),
        };
        spec.split_eps = o.split_eps.unwrap_or(false);
        spec.split_tau = o.split_tau.unwrap_or(false);
        if let Some(m) = o.multistart {
            spec.multistart = m;
        }
        if let Some(m) = o.max_iter {
            spec.max_iter = m;
        }
        Ok(spec)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, ConfigError> {
        let s = self.sweep.as_ref().ok_or_else(|| bad("missing [sweep] section"))?;
        if s.l_km.is_empty() || s.t_coh_s.is_empty() {
            return Err(bad("sweep: both l_km and t_coh_s grids must be non-empty"));
        }
        Ok(SweepSpec {
            base: self.optimize_spec(false)?,
            l_km: s.l_km.clone(),
            t_coh_s: s.t_coh_s.clone(),
        })
    }

    pub fn pdf_section(&self) -> Result<&PdfSection, ConfigError> {
        let p = self.pdf.as_ref().ok_or_else(|| bad("missing [pdf] section"))?;
        if p.points < 2 {
            return Err(bad("pdf.points must be ≥ 2"));
        }
        Ok(p)
    }

    pub fn output_path(&self) -> Option<&str> {
        self.output.as_ref().and_then(|o| o.path.as_deref())
    }
}
