//! Level recursion engine.
//!
//! One nesting level consumes the average output states of the previous
//! level as its segment inputs and produces the next average state together
//! with the mean completion time. The completion-time-resolved
//! (unnormalized) state is assembled in the Laplace domain: per-segment
//! waiting enters through decay resolvents `(s + ν − 𝓛)⁻¹`, retries after
//! failed merges through a geometric series, classical signalling through
//! exponential prefactors, and age filtering through a truncation of the
//! waiting integrals. The average output state is the image at `s = 0` and
//! the mean completion time is the negative trace derivative there,
//! evaluated in closed form for two-segment levels and by forward-mode
//! differentiation for three-segment levels.

mod dual;
pub(crate) mod two_d;

pub use two_d::{level_2d_basic, level_2d_full, trace_image_2d};

use crate::elementary::{
    build_segment_1d, build_segment_2d, merge_superop_1d, merge_superops_2d, HardwareParams,
};
use crate::liouville::decay::{Decay, DecayModel};
use crate::liouville::{apply_on, tensor_states, DensityState, ModeLabel, ModeSpace, SuperOp};
use crate::{Error, Result};

/// Memory-age cutoff applied while a level waits for its slower segments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Filter {
    /// Keep every pairing regardless of the completion-time gap.
    Off,
    /// Two-segment levels: discard the stored state once the completion
    /// gap exceeds `tau`, then restart both segments.
    Single { tau: f64 },
    /// Three-segment levels: `tau1` bounds the completion gap of the first
    /// two segments, `tau2` bounds how long the merged block may wait for
    /// the third.
    TwoStage { tau1: f64, tau2: f64 },
}

/// Merge wiring of one level.
#[derive(Clone, Debug)]
pub enum LevelMerge {
    /// Two segments joined by one probabilistic map. `targets[k]` is the
    /// joint-state mode position consumed by input mode `k` of `op`, with
    /// segment 0's modes first; empty when the segments are zero-mode
    /// scalars and `op` is scalar.
    Pair { op: SuperOp, targets: Vec<usize> },
    /// Three segments on a triangle: `pair` joins the two segments that
    /// finish first at their shared corner, `double` joins the merged
    /// block with the remaining segment at the two remaining corners.
    /// Segment wiring follows [`crate::elementary::WIRE_EDGES`].
    Triple { pair: SuperOp, double: SuperOp },
}

/// Inputs of one nesting level.
#[derive(Clone, Debug)]
pub struct LevelSpec {
    /// Average output state of the previous level, one copy per segment.
    pub segments: Vec<DensityState>,
    /// Memory decay acting on each segment while it waits.
    pub seg_decay: Vec<Decay>,
    /// Completion rate of one segment, successes per second.
    pub nu: f64,
    /// Merge wiring.
    pub merge: LevelMerge,
    /// Classical signalling time across this level's span.
    pub t_c: f64,
    /// Duration of the merge operation itself.
    pub t_swap: f64,
    /// Age filtering policy.
    pub filter: Filter,
}

impl LevelSpec {
    /// Total merge latency: classical signalling plus the operation itself.
    pub fn t_m(&self) -> f64 {
        self.t_c + self.t_swap
    }

    pub fn validate(&self) -> Result<()> {
        if !self.nu.is_finite() || !(self.nu > 0.0) {
            return Err(Error::invalid("LevelSpec: nu must be finite and > 0"));
        }
        for (name, v) in [("t_c", self.t_c), ("t_swap", self.t_swap)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "LevelSpec: {name} must be finite and ≥ 0"
                )));
            }
        }
        let want = match self.merge {
            LevelMerge::Pair { .. } => 2,
            LevelMerge::Triple { .. } => 3,
        };
        if self.segments.len() != want {
            return Err(Error::invalid(format!(
                "LevelSpec: merge arity needs {want} segments, got {}",
                self.segments.len()
            )));
        }
        if self.seg_decay.len() != self.segments.len() {
            return Err(Error::invalid("LevelSpec: one Decay per segment"));
        }
        let n_max = self.segments[0].space().n_max();
        for (seg, dec) in self.segments.iter().zip(&self.seg_decay) {
            if seg.space().mode_count() > 0 && seg.space().n_max() != n_max {
                return Err(Error::invalid("LevelSpec: segments disagree on n_max"));
            }
            if dec.rates().len() != seg.space().mode_count() {
                return Err(Error::invalid("LevelSpec: decay arity mismatch"));
            }
            if dec.model() != self.seg_decay[0].model() {
                return Err(Error::invalid("LevelSpec: segments disagree on decay model"));
            }
        }
        match (&self.merge, self.filter) {
            (LevelMerge::Pair { .. }, Filter::TwoStage { .. }) => {
                return Err(Error::invalid(
                    "LevelSpec: a two-stage filter needs three segments",
                ));
            }
            (LevelMerge::Triple { .. }, Filter::Single { .. }) => {
                return Err(Error::invalid(
                    "LevelSpec: a single-gap filter needs two segments",
                ));
            }
            _ => {}
        }
        match self.filter {
            Filter::Off => {}
            Filter::Single { tau } => {
                if !(tau > 0.0) {
                    return Err(Error::invalid("LevelSpec: filter cutoff must be > 0"));
                }
            }
            Filter::TwoStage { tau1, tau2 } => {
                if !(tau1 > 0.0) || !(tau2 > 0.0) {
                    return Err(Error::invalid("LevelSpec: filter cutoffs must be > 0"));
                }
            }
        }
        match &self.merge {
            LevelMerge::Pair { op, targets } => {
                if op.input().mode_count() != targets.len() {
                    return Err(Error::invalid("LevelSpec: merge arity vs targets mismatch"));
                }
                let joint = self.segments[0].space().mode_count()
                    + self.segments[1].space().mode_count();
                if targets.iter().any(|&t| t >= joint) {
                    return Err(Error::invalid("LevelSpec: merge target out of range"));
                }
            }
            LevelMerge::Triple { pair, double } => {
                let m = self.segments[0].space().mode_count();
                if self.segments.iter().any(|s| s.space().mode_count() != m) {
                    return Err(Error::invalid("LevelSpec: segments disagree on arity"));
                }
                if m == 0 {
                    if pair.input().mode_count() != 0 || double.input().mode_count() != 0 {
                        return Err(Error::invalid(
                            "LevelSpec: scalar segments need scalar merges",
                        ));
                    }
                } else {
                    if m != 3 {
                        return Err(Error::invalid(
                            "LevelSpec: triangle segments carry exactly 3 modes",
                        ));
                    }
                    if pair.input().mode_count() != 2 || double.input().mode_count() != 4 {
                        return Err(Error::invalid(
                            "LevelSpec: triangle merges consume 2 and 4 modes",
                        ));
                    }
                    if pair.output().mode_count() != 0 || double.output().mode_count() != 0 {
                        return Err(Error::invalid(
                            "LevelSpec: triangle merges must consume their inputs",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Output of one nesting level.
#[derive(Clone, Debug)]
pub struct LevelResult {
    /// Average state handed to the next level, trace 1 up to rounding.
    pub rho: DensityState,
    /// Mean completion time of the level in seconds.
    pub t_avg: f64,
    /// Merge success probability (product of both stages for triangles).
    pub p_merge: f64,
    /// Probability that a prepared pairing survives the age filter.
    pub p_nofilter: f64,
    /// Triangles only: first-merge success probability.
    pub p1: Option<f64>,
    /// Triangles only: second-merge success probability.
    pub p2: Option<f64>,
}

/// Network topology of the recursion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Bipartite chain: two segments per level joined by swapping.
    OneD,
    /// Tripartite triangle: three segments per level merged toward a
    /// shared GHZ state.
    TwoD,
}

/// Filtering policy applied uniformly at every level above the elementary
/// one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterSchedule {
    Off,
    /// Same age cutoff everywhere; triangles apply it to both stages.
    Uniform { tau: f64 },
    /// Distinct cutoffs for the two stages of triangle levels.
    UniformTwoStage { tau1: f64, tau2: f64 },
}

/// Full protocol description: hardware, nesting depth, and policies.
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Number of nesting levels above the elementary segments.
    pub levels: u32,
    pub hw: HardwareParams,
    /// Source squeezing amplitude of the elementary segments.
    pub eps: f64,
    /// Second-arm squeezing for triangle segments; defaults to `eps`.
    pub eps_b: Option<f64>,
    /// Fock truncation per mode.
    pub n_max: usize,
    pub filter: FilterSchedule,
}

/// Unnormalized Laplace image of the first prepared pair of a two-segment
/// level, before any merge or age filter:
/// `Σ_i ν² / (s + 2ν) · (s + ν − 𝓛_i)⁻¹ ρ_i ⊗ ρ_j`,
/// where the resolvent acts on the segment that finished first while the
/// other completes. Requires `s + ν > 0`. Output modes are segment 0's
/// then segment 1's, names prefixed `0.` and `1.`.
pub fn prep_image_1d(spec: &LevelSpec, s: f64) -> Result<DensityState> {
    spec.validate()?;
    if !matches!(spec.merge, LevelMerge::Pair { .. }) {
        return Err(Error::invalid("prep_image_1d: needs a two-segment level"));
    }
    prep_nofilter_1d(spec, s, f64::INFINITY)
}

/// Shared body of the prepared-pair image with the waiting integral cut
/// off at age `tau` (`tau = ∞` disables the cutoff): each first-finisher
/// term carries `(s + ν − 𝓛)⁻¹ (1 − e^{-(s+ν)τ} e^{𝓛τ}) ρ`.
fn prep_nofilter_1d(spec: &LevelSpec, s: f64, tau: f64) -> Result<DensityState> {
    let nu = spec.nu;
    if s + nu <= 0.0 {
        return Err(Error::invalid("prep image: requires s + nu > 0"));
    }
    let factors = [spec.segments[0].prefixed("0."), spec.segments[1].prefixed("1.")];
    let coeff = nu * nu / (s + 2.0 * nu);
    let mut acc: Option<DensityState> = None;
    for early in 0..2 {
        let late = 1 - early;
        let mut b = factors[early].clone();
        if tau.is_finite() {
            let aged = spec.seg_decay[early].propagate(&factors[early], tau)?;
            b.add_scaled(&aged, -(-(s + nu) * tau).exp())?;
        }
        let waited = spec.seg_decay[early].resolvent(s + nu, &b)?;
        let term = if early == 0 {
            tensor_states(&waited, &factors[late])?
        } else {
            tensor_states(&factors[late], &waited)?
        };
        match &mut acc {
            None => acc = Some(term),
            Some(a) => a.add_scaled(&term, 1.0)?,
        }
    }
    Ok(acc.expect("two terms").scaled(coeff))
}

/// Laplace transform of a filter rejection: the prepared pair ages past
/// `tau`, the discard is signalled, and both segments restart:
/// `2ν e^{-ντ} e^{-s(τ + t_c)} / (s + 2ν)`. Identically zero for `tau = ∞`.
fn p_filter_1d(nu: f64, t_c: f64, s: f64, tau: f64) -> f64 {
    if !tau.is_finite() {
        return 0.0;
    }
    2.0 * nu * (-nu * tau).exp() * (-s * (tau + t_c)).exp() / (s + 2.0 * nu)
}

/// Assembled two-segment chain at one `s`: merged numerator plus the
/// geometric-retry denominator `e^{s t_m} − Tr{(𝓘 − 𝓜) ϱ̃_prep(s)}`.
struct Chain1d {
    merged: DensityState,
    merged_trace: f64,
    denom: f64,
}

fn chain_1d(spec: &LevelSpec, s: f64) -> Result<Chain1d> {
    let LevelMerge::Pair { op, targets } = &spec.merge else {
        return Err(Error::invalid("chain_1d: needs a two-segment merge"));
    };
    let tau = match spec.filter {
        Filter::Off => f64::INFINITY,
        Filter::Single { tau } => tau,
        Filter::TwoStage { .. } => {
            return Err(Error::invalid("chain_1d: two-stage filter not applicable"));
        }
    };
    let nf = prep_nofilter_1d(spec, s, tau)?;
    let pf = p_filter_1d(spec.nu, spec.t_c, s, tau);
    if pf >= 1.0 {
        return Err(Error::DegenerateProtocol(
            "age filter discards every prepared pair".into(),
        ));
    }
    let prep = nf.scaled(1.0 / (1.0 - pf));
    let merged = apply_on(op, &prep, targets)?;
    let merged_trace = merged.trace();
    let denom = (s * spec.t_m()).exp() - (prep.trace() - merged_trace);
    if denom <= 0.0 {
        return Err(Error::DegenerateProtocol(
            "retry series diverges: merge never succeeds".into(),
        ));
    }
    Ok(Chain1d { merged, merged_trace, denom })
}

/// Decay on the joint modes that survive the merge. Consuming merges leave
/// the spectators in order; arity-preserving merges leave every mode in
/// place with its original rate. Other arities leave the emitted modes'
/// rates undefined.
fn surviving_decay(decays: &[Decay], op: &SuperOp, targets: &[usize]) -> Result<Decay> {
    let mut rates: Vec<f64> = Vec::new();
    for d in decays {
        rates.extend_from_slice(d.rates());
    }
    let kept: Vec<f64> = if op.output().mode_count() == targets.len() {
        rates
    } else if op.output().mode_count() == 0 {
        rates
            .iter()
            .enumerate()
            .filter(|(i, _)| !targets.contains(i))
            .map(|(_, r)| *r)
            .collect()
    } else {
        return Err(Error::invalid(
            "post-merge decay: merge must consume its inputs or keep arity",
        ));
    };
    Decay::new(decays[0].model(), kept)
}

/// Shared tail of the two-segment level evaluations: image at `s = 0`,
/// post-merge decay over `t_m`, and the closed-form mean completion time
/// `T = (t_m + 3/(2ν) + extra_wait) / P`.
fn finish_1d(spec: &LevelSpec, p_nofilter: f64, extra_wait: f64) -> Result<LevelResult> {
    let LevelMerge::Pair { op, targets } = &spec.merge else {
        return Err(Error::invalid("finish_1d: needs a two-segment merge"));
    };
    let ch = chain_1d(spec, 0.0)?;
    let p = ch.merged_trace;
    if !(p > 0.0) {
        return Err(Error::DegenerateProtocol("merge never succeeds".into()));
    }
    let out_decay = surviving_decay(&spec.seg_decay, op, targets)?;
    let mut rho = out_decay.propagate(&ch.merged.scaled(1.0 / ch.denom), spec.t_m())?;
    rho.hermitize();
    rho.validate_physical()?;
    let t_avg = (spec.t_m() + 1.5 / spec.nu + extra_wait) / p;
    Ok(LevelResult {
        rho,
        t_avg,
        p_merge: p,
        p_nofilter,
        p1: None,
        p2: None,
    })
}

/// Two-segment level with instantaneous, free signalling: `t_c = t_swap = 0`
/// so the merged state is handed on the moment the slower segment finishes.
pub fn level_1d_basic(spec: &LevelSpec) -> Result<LevelResult> {
    spec.validate()?;
    if spec.t_c != 0.0 || spec.t_swap != 0.0 {
        return Err(Error::invalid("level_1d_basic: requires t_c = t_swap = 0"));
    }
    if spec.filter != Filter::Off {
        return Err(Error::invalid("level_1d_basic: requires Filter::Off"));
    }
    finish_1d(spec, 1.0, 0.0)
}

/// Two-segment level with signalling latency: memories keep decaying for
/// `t_m = t_c + t_swap` after the merge, and failures are only discovered
/// after the same delay.
pub fn level_1d_comm(spec: &LevelSpec) -> Result<LevelResult> {
    spec.validate()?;
    if spec.filter != Filter::Off {
        return Err(Error::invalid(
            "level_1d_comm: requires Filter::Off; use level_1d_filter",
        ));
    }
    finish_1d(spec, 1.0, 0.0)
}

/// Two-segment level with an age filter: pairings whose completion gap
/// exceeds `tau` are discarded and both segments restart after the
/// signalling delay, trading rate for fidelity. The mean waiting overhead
/// per rejection is `(t_c + 1/(2ν)) / (e^{ντ} − 1)`.
pub fn level_1d_filter(spec: &LevelSpec) -> Result<LevelResult> {
    spec.validate()?;
    let Filter::Single { tau } = spec.filter else {
        return Err(Error::invalid("level_1d_filter: requires Filter::Single"));
    };
    let nu = spec.nu;
    let p_nofilter = -(-nu * tau).exp_m1();
    let extra = (spec.t_c + 0.5 / nu) / (nu * tau).exp_m1();
    finish_1d(spec, p_nofilter, extra)
}

/// Trace of the full two-segment level image at `s`: the Laplace transform
/// of the level's completion-time density. Requires `s + ν > 0`.
pub fn trace_image_1d(spec: &LevelSpec, s: f64) -> Result<f64> {
    spec.validate()?;
    let ch = chain_1d(spec, s)?;
    Ok(ch.merged_trace / ch.denom)
}

/// Classical signalling time across the span covered at nesting level `n`.
pub(crate) fn comm_delay(hw: &HardwareParams, n: u32) -> f64 {
    2f64.powi(n as i32) * hw.l0 * hw.v_c
}

/// Same state with fresh mode names in place of the prefixed joint names.
pub(crate) fn with_mode_names(rho: &DensityState, names: &[&str]) -> Result<DensityState> {
    let space = rho.space();
    if space.mode_count() != names.len() {
        return Err(Error::invalid("with_mode_names: arity mismatch"));
    }
    let labels = space
        .labels()
        .iter()
        .zip(names)
        .map(|(l, n)| ModeLabel { name: (*n).to_string(), kind: l.kind })
        .collect();
    DensityState::new(ModeSpace::new(space.n_max(), labels)?, rho.mat().clone())
}

/// Run the full recursion: elementary segments at level 0, then `levels`
/// nested merge levels. Entry `n` of the result describes the protocol
/// after `n` levels; level 0 reports the heralded segment state, its mean
/// generation time `Δt/q`, and `p_merge = q`.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<Vec<LevelResult>> {
    cfg.hw.validate()?;
    if cfg.n_max == 0 {
        return Err(Error::invalid("ProtocolConfig: n_max must be ≥ 1"));
    }
    match cfg.protocol {
        Protocol::OneD => run_1d(cfg),
        Protocol::TwoD => run_2d(cfg),
    }
}

fn run_1d(cfg: &ProtocolConfig) -> Result<Vec<LevelResult>> {
    let seg = build_segment_1d(&cfg.hw, cfg.eps, cfg.n_max)?;
    let merge = merge_superop_1d(&cfg.hw, cfg.n_max)?;
    let rate = 1.0 / cfg.hw.t_coh;
    let mut out = Vec::with_capacity(cfg.levels as usize + 1);
    out.push(LevelResult {
        rho: seg.rho_e.clone(),
        t_avg: seg.dt / seg.q,
        p_merge: seg.q,
        p_nofilter: 1.0,
        p1: None,
        p2: None,
    });
    for n in 1..=cfg.levels {
        let prev = out.last().expect("level 0 present");
        let filter = match cfg.filter {
            FilterSchedule::Off => Filter::Off,
            FilterSchedule::Uniform { tau } => Filter::Single { tau },
            FilterSchedule::UniformTwoStage { .. } => {
                return Err(Error::invalid(
                    "two-stage filtering applies to triangle protocols",
                ));
            }
        };
        // Segments are unit-trace states by definition; renormalizing here
        // stops per-level rounding from compounding down the recursion.
        let seg_state = prev.rho.scaled(1.0 / prev.rho.trace());
        let spec = LevelSpec {
            segments: vec![seg_state.clone(), seg_state],
            seg_decay: vec![Decay::uniform(DecayModel::AmplitudeDamping, rate, 2)?; 2],
            nu: 1.0 / prev.t_avg,
            merge: LevelMerge::Pair { op: merge.clone(), targets: vec![1, 2] },
            t_c: comm_delay(&cfg.hw, n),
            t_swap: cfg.hw.t_s,
            filter,
        };
        let mut res = match filter {
            Filter::Off => level_1d_comm(&spec)?,
            _ => level_1d_filter(&spec)?,
        };
        res.rho = with_mode_names(&res.rho, &["A", "B"])?;
        out.push(res);
    }
    Ok(out)
}

fn run_2d(cfg: &ProtocolConfig) -> Result<Vec<LevelResult>> {
    let eps_b = cfg.eps_b.unwrap_or(cfg.eps);
    let seg = build_segment_2d(&cfg.hw, cfg.eps, eps_b, cfg.n_max)?;
    let merges = merge_superops_2d(&cfg.hw, cfg.n_max)?;
    let rate = 1.0 / cfg.hw.t_coh;
    let mut out = Vec::with_capacity(cfg.levels as usize + 1);
    out.push(LevelResult {
        rho: seg.rho_e.clone(),
        t_avg: seg.dt / seg.q,
        p_merge: seg.q,
        p_nofilter: 1.0,
        p1: None,
        p2: None,
    });
    for n in 1..=cfg.levels {
        let prev = out.last().expect("level 0 present");
        let filter = match cfg.filter {
            FilterSchedule::Off => Filter::Off,
            FilterSchedule::Uniform { tau } => Filter::TwoStage { tau1: tau, tau2: tau },
            FilterSchedule::UniformTwoStage { tau1, tau2 } => Filter::TwoStage { tau1, tau2 },
        };
        // Same renormalization as the chain recursion: unit-trace inputs
        // keep rounding from compounding with depth.
        let seg_state = prev.rho.scaled(1.0 / prev.rho.trace());
        let spec = LevelSpec {
            segments: vec![seg_state; 3],
            seg_decay: vec![Decay::uniform(DecayModel::AmplitudeDamping, rate, 3)?; 3],
            nu: 1.0 / prev.t_avg,
            merge: LevelMerge::Triple {
                pair: merges.pair.clone(),
                double: merges.double.clone(),
            },
            t_c: comm_delay(&cfg.hw, n),
            t_swap: cfg.hw.t_s,
            filter,
        };
        let mut res = level_2d_full(&spec)?;
        res.rho = with_mode_names(&res.rho, &["A", "C", "B"])?;
        out.push(res);
    }
    Ok(out)
}

/// Completion-time density of a two-segment level with `t_m = 0`, sampled
/// on a time grid, next to the exponential density of the same mean.
#[derive(Clone, Debug)]
pub struct Pdf1d {
    /// The two real poles of the density; both negative, `roots.0 > roots.1`.
    pub roots: (f64, f64),
    /// Mean completion time `3 / (2 P ν)`.
    pub mean: f64,
    /// Density values on the grid.
    pub density: Vec<f64>,
    /// Exponential density with the same mean on the same grid.
    pub poisson: Vec<f64>,
}

/// Poles and normalization of the density
/// `r(t) = 2Pν² (e^{at} − e^{bt}) / (a − b)` with
/// `a, b = ν(−3 ± √(9 − 8P)) / 2`.
fn pdf_poles(p: f64, nu: f64) -> Result<(f64, f64, f64)> {
    if !(p > 0.0 && p <= 1.0) || !nu.is_finite() || !(nu > 0.0) {
        return Err(Error::invalid(
            "generation pdf: needs 0 < p_merge ≤ 1 and finite nu > 0",
        ));
    }
    let rt = (9.0 - 8.0 * p).sqrt();
    let a = 0.5 * nu * (rt - 3.0);
    let b = -0.5 * nu * (rt + 3.0);
    Ok((a, b, 2.0 * p * nu * nu / (a - b)))
}

/// Completion-time density of a two-segment level with `t_m = 0` on the
/// given grid.
pub fn generation_pdf_1d(p_merge: f64, nu: f64, times: &[f64]) -> Result<Pdf1d> {
    let (a, b, norm) = pdf_poles(p_merge, nu)?;
    let mean = 1.5 / (p_merge * nu);
    let lam = 1.0 / mean;
    let density = times
        .iter()
        .map(|&t| if t < 0.0 { 0.0 } else { norm * ((a * t).exp() - (b * t).exp()) })
        .collect();
    let poisson = times
        .iter()
        .map(|&t| if t < 0.0 { 0.0 } else { lam * (-lam * t).exp() })
        .collect();
    Ok(Pdf1d { roots: (a, b), mean, density, poisson })
}

/// Cumulative distribution matching [`generation_pdf_1d`].
pub fn generation_cdf_1d(p_merge: f64, nu: f64, t: f64) -> Result<f64> {
    let (a, b, norm) = pdf_poles(p_merge, nu)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    Ok(norm * ((a * t).exp_m1() / a - (b * t).exp_m1() / b))
}

/// The ideal entangled state each protocol distills toward, used as the
/// fidelity reference: a one-excitation Bell pair on `(A, B)` for chains,
/// the self-similar GHZ state `(|110⟩ + |001⟩)/√2` on `(A, C, B)` for
/// triangles.
pub fn target_state(protocol: Protocol, n_max: usize) -> Result<DensityState> {
    use crate::liouville::C64;
    let inv = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    match protocol {
        Protocol::OneD => {
            let space = ModeSpace::memories(n_max, &["A", "B"])?;
            let ket = (space.fock_ket(&[1, 0]) + space.fock_ket(&[0, 1])) * inv;
            DensityState::from_pure(space, &ket)
        }
        Protocol::TwoD => {
            let space = ModeSpace::memories(n_max, &["A", "C", "B"])?;
            let ket = (space.fock_ket(&[1, 1, 0]) + space.fock_ket(&[0, 0, 1])) * inv;
            DensityState::from_pure(space, &ket)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{partial_trace_at, C64, TraceFlag};
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn scalar_merge(p: f64) -> SuperOp {
        SuperOp::new(
            ModeSpace::scalar(0),
            ModeSpace::scalar(0),
            Array2::from_elem((1, 1), C64::new(p, 0.0)),
            TraceFlag::NonIncreasing,
        )
        .unwrap()
    }

    fn scalar_spec(p: f64, nu: f64, t_c: f64, t_swap: f64, filter: Filter) -> LevelSpec {
        LevelSpec {
            segments: vec![DensityState::scalar(1.0, 0), DensityState::scalar(1.0, 0)],
            seg_decay: vec![Decay::none(0), Decay::none(0)],
            nu,
            merge: LevelMerge::Pair { op: scalar_merge(p), targets: vec![] },
            t_c,
            t_swap,
            filter,
        }
    }

    /// A one-memory segment holding an excitation with weight `w`, useful
    /// as a small nontrivial input.
    fn one_mode_segment(w: f64) -> DensityState {
        let space = ModeSpace::memories(1, &["M"]).unwrap();
        let mat = array![
            [C64::new(1.0 - w, 0.0), C64::new(0.0, 0.0)],
            [C64::new(0.0, 0.0), C64::new(w, 0.0)]
        ];
        DensityState::new(space, mat).unwrap()
    }

    /// Merge that keeps both memories and succeeds with the weight of the
    /// two-excitation component plus a floor, as a nontrivial test map.
    fn partial_projector(n_max: usize) -> SuperOp {
        let space = ModeSpace::memories(n_max, &["X", "Y"]).unwrap();
        let d = space.dim();
        let mut mat = Array2::zeros((d * d, d * d));
        for r in 0..d {
            for c in 0..d {
                let keep = 0.4 + 0.3 * ((r == c) as usize as f64);
                mat[[c * d + r, c * d + r]] = C64::new(keep, 0.0);
            }
        }
        SuperOp::new(space.clone(), space, mat, TraceFlag::NonIncreasing).unwrap()
    }

    #[test]
    fn basic_scalar_mean_time() {
        for &(p, nu) in &[(1.0, 4.0), (0.5, 2.0), (0.05, 123.0)] {
            let spec = scalar_spec(p, nu, 0.0, 0.0, Filter::Off);
            let res = level_1d_basic(&spec).unwrap();
            assert_relative_eq!(res.t_avg, 1.5 / (p * nu), max_relative = 1e-12);
            assert_relative_eq!(res.p_merge, p, max_relative = 1e-12);
            assert_relative_eq!(res.rho.trace(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn comm_scalar_mean_time() {
        let (p, nu, t_c, t_s) = (0.3, 7.0, 0.05, 0.01);
        let spec = scalar_spec(p, nu, t_c, t_s, Filter::Off);
        let res = level_1d_comm(&spec).unwrap();
        assert_relative_eq!(
            res.t_avg,
            (t_c + t_s + 1.5 / nu) / p,
            max_relative = 1e-12
        );
    }

    #[test]
    fn filter_scalar_mean_time_and_survival() {
        let (p, nu, t_c, t_s, tau) = (0.3, 7.0, 0.05, 0.01, 0.4);
        let spec = scalar_spec(p, nu, t_c, t_s, Filter::Single { tau });
        let res = level_1d_filter(&spec).unwrap();
        let expect =
            (t_c + t_s + 1.5 / nu + (t_c + 0.5 / nu) / (nu * tau).exp_m1()) / p;
        assert_relative_eq!(res.t_avg, expect, max_relative = 1e-12);
        assert_relative_eq!(res.p_nofilter, 1.0 - (-nu * tau).exp(), max_relative = 1e-12);
        assert_relative_eq!(res.p_merge, p, max_relative = 1e-12);
    }

    #[test]
    fn infinite_cutoff_matches_comm_exactly() {
        let seg = one_mode_segment(0.7);
        let decay = Decay::uniform(DecayModel::AmplitudeDamping, 0.8, 1).unwrap();
        let build = |filter| LevelSpec {
            segments: vec![seg.clone(), seg.clone()],
            seg_decay: vec![decay.clone(), decay.clone()],
            nu: 3.0,
            merge: LevelMerge::Pair { op: partial_projector(1), targets: vec![0, 1] },
            t_c: 0.02,
            t_swap: 0.005,
            filter,
        };
        let comm = level_1d_comm(&build(Filter::Off)).unwrap();
        let filt =
            level_1d_filter(&build(Filter::Single { tau: f64::INFINITY })).unwrap();
        assert_eq!(comm.rho.mat(), filt.rho.mat());
        assert_eq!(comm.t_avg, filt.t_avg);
        assert_relative_eq!(filt.p_nofilter, 1.0);
    }

    #[test]
    fn prep_trace_without_decay() {
        let seg = one_mode_segment(0.4);
        let spec = LevelSpec {
            segments: vec![seg.clone(), seg],
            seg_decay: vec![Decay::none(1), Decay::none(1)],
            nu: 2.0,
            merge: LevelMerge::Pair { op: partial_projector(1), targets: vec![0, 1] },
            t_c: 0.0,
            t_swap: 0.0,
            filter: Filter::Off,
        };
        for &s in &[0.0, 0.3, 1.7, 10.0] {
            let tr = prep_image_1d(&spec, s).unwrap().trace();
            let nu = spec.nu;
            assert_relative_eq!(
                tr,
                2.0 * nu * nu / ((s + 2.0 * nu) * (s + nu)),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn prep_trace_is_one_at_zero_with_decay() {
        let seg = one_mode_segment(0.6);
        let decay = Decay::uniform(DecayModel::AmplitudeDamping, 1.3, 1).unwrap();
        let spec = LevelSpec {
            segments: vec![seg.clone(), seg],
            seg_decay: vec![decay.clone(), decay],
            nu: 2.0,
            merge: LevelMerge::Pair { op: partial_projector(1), targets: vec![0, 1] },
            t_c: 0.0,
            t_swap: 0.0,
            filter: Filter::Off,
        };
        assert_relative_eq!(prep_image_1d(&spec, 0.0).unwrap().trace(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn full_image_trace_is_one_at_zero() {
        let seg = one_mode_segment(0.6);
        let decay = Decay::uniform(DecayModel::AmplitudeDamping, 0.9, 1).unwrap();
        for filter in [Filter::Off, Filter::Single { tau: 0.7 }] {
            let spec = LevelSpec {
                segments: vec![seg.clone(), one_mode_segment(0.3)],
                seg_decay: vec![decay.clone(), decay.clone()],
                nu: 2.5,
                merge: LevelMerge::Pair { op: partial_projector(1), targets: vec![0, 1] },
                t_c: 0.03,
                t_swap: 0.01,
                filter,
            };
            assert_relative_eq!(trace_image_1d(&spec, 0.0).unwrap(), 1.0, max_relative = 1e-10);
        }
    }

    /// The closed-form mean time must equal the negative derivative of the
    /// image trace at s = 0 for decaying inputs and a trace-reducing merge.
    #[test]
    fn closed_form_time_matches_trace_derivative() {
        let decay = Decay::uniform(DecayModel::AmplitudeDamping, 1.1, 1).unwrap();
        for (filter, tc) in [
            (Filter::Off, 0.0),
            (Filter::Off, 0.04),
            (Filter::Single { tau: 0.5 }, 0.04),
        ] {
            let spec = LevelSpec {
                segments: vec![one_mode_segment(0.7), one_mode_segment(0.2)],
                seg_decay: vec![decay.clone(), decay.clone()],
                nu: 3.0,
                merge: LevelMerge::Pair { op: partial_projector(1), targets: vec![0, 1] },
                t_c: tc,
                t_swap: 0.01 * tc,
                filter,
            };
            let res = match filter {
                Filter::Off if tc == 0.0 => level_1d_basic(&spec).unwrap(),
                Filter::Off => level_1d_comm(&spec).unwrap(),
                _ => level_1d_filter(&spec).unwrap(),
            };
            let h = 1e-6;
            let fd = -(trace_image_1d(&spec, h).unwrap()
                - trace_image_1d(&spec, -h).unwrap())
                / (2.0 * h);
            assert_relative_eq!(res.t_avg, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn pdf_normalizes_and_matches_cdf() {
        let (p, nu) = (0.37, 5.0);
        let mean = 1.5 / (p * nu);
        let n = 20_001;
        let t_max = 40.0 * mean;
        let times: Vec<f64> = (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect();
        let pdf = generation_pdf_1d(p, nu, &times).unwrap();
        // Simpson integration of the density over the grid.
        let h = times[1] - times[0];
        let mut integral = 0.0;
        for i in (0..n - 2).step_by(2) {
            integral += h / 3.0 * (pdf.density[i] + 4.0 * pdf.density[i + 1] + pdf.density[i + 2]);
        }
        assert_relative_eq!(integral, 1.0, epsilon = 1e-9);
        let cdf = generation_cdf_1d(p, nu, t_max).unwrap();
        assert_relative_eq!(cdf, 1.0, epsilon = 1e-12);
        let mid = generation_cdf_1d(p, nu, mean).unwrap();
        let mut part = 0.0;
        let k = times.iter().position(|&t| t >= mean).unwrap() & !1usize;
        for i in (0..k).step_by(2) {
            part += h / 3.0 * (pdf.density[i] + 4.0 * pdf.density[i + 1] + pdf.density[i + 2]);
        }
        assert_relative_eq!(part, generation_cdf_1d(p, nu, times[k]).unwrap(), epsilon = 1e-9);
        assert!(mid > 0.4 && mid < 0.9, "cdf at the mean: {mid}");
        // Vieta: the poles multiply to 2Pν² and sum to −3ν.
        let (a, b) = pdf.roots;
        assert_relative_eq!(a * b, 2.0 * p * nu * nu, max_relative = 1e-12);
        assert_relative_eq!(a + b, -3.0 * nu, max_relative = 1e-12);
    }

    #[test]
    fn pdf_mean_matches_quadrature() {
        let (p, nu) = (0.8, 2.0);
        let mean = 1.5 / (p * nu);
        let n = 40_001;
        let t_max = 60.0 * mean;
        let times: Vec<f64> = (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect();
        let pdf = generation_pdf_1d(p, nu, &times).unwrap();
        let h = times[1] - times[0];
        let mut m1 = 0.0;
        for i in (0..n - 2).step_by(2) {
            m1 += h / 3.0
                * (times[i] * pdf.density[i]
                    + 4.0 * times[i + 1] * pdf.density[i + 1]
                    + times[i + 2] * pdf.density[i + 2]);
        }
        assert_relative_eq!(m1, pdf.mean, max_relative = 1e-8);
        assert_relative_eq!(pdf.mean, mean, max_relative = 1e-12);
    }

    #[test]
    fn run_protocol_1d_shrinks_fidelity_and_slows() {
        let hw = HardwareParams::baseline(20.0, 1.5);
        let cfg = ProtocolConfig {
            protocol: Protocol::OneD,
            levels: 2,
            hw,
            eps: 0.1,
            eps_b: None,
            n_max: 2,
            filter: FilterSchedule::Off,
        };
        let res = run_protocol(&cfg).unwrap();
        assert_eq!(res.len(), 3);
        let target = target_state(Protocol::OneD, 2).unwrap();
        let names: Vec<&str> =
            res[2].rho.space().labels().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["A", "B"]);
        let mut last_f = f64::INFINITY;
        let mut last_t = 0.0;
        for r in &res {
            assert_relative_eq!(r.rho.trace(), 1.0, epsilon = 1e-9);
            let f = fidelity_vs(&r.rho, &target);
            assert!(f < last_f, "fidelity should fall per level");
            assert!(r.t_avg > last_t, "time should grow per level");
            last_f = f;
            last_t = r.t_avg;
        }
        assert!(last_f > 0.6, "moderate depth keeps most of the correlation");
    }

    #[test]
    fn run_protocol_1d_filter_raises_fidelity_and_cost() {
        let hw = HardwareParams::baseline(40.0, 0.1);
        let base = ProtocolConfig {
            protocol: Protocol::OneD,
            levels: 2,
            hw,
            eps: 0.12,
            eps_b: None,
            n_max: 2,
            filter: FilterSchedule::Off,
        };
        let open = run_protocol(&base).unwrap();
        let tau = 0.3 * open[1].t_avg;
        let filtered = run_protocol(&ProtocolConfig {
            filter: FilterSchedule::Uniform { tau },
            ..base
        })
        .unwrap();
        let target = target_state(Protocol::OneD, 2).unwrap();
        let f_open = fidelity_vs(&open[2].rho, &target);
        let f_filt = fidelity_vs(&filtered[2].rho, &target);
        assert!(f_filt > f_open, "filtering must raise fidelity: {f_filt} vs {f_open}");
        assert!(filtered[2].t_avg > open[2].t_avg, "filtering must cost time");
        assert!(filtered[2].p_nofilter < 1.0);
    }

    /// Fidelity of a possibly larger-space state against the two- or
    /// three-memory reference with identical names.
    fn fidelity_vs(rho: &DensityState, target: &DensityState) -> f64 {
        assert!(rho.space().compatible(target.space()));
        target.overlap(rho)
    }

    #[test]
    fn validation_rejects_mismatched_specs() {
        let mut spec = scalar_spec(0.5, 1.0, 0.0, 0.0, Filter::Off);
        spec.nu = -1.0;
        assert!(spec.validate().is_err());

        let mut spec = scalar_spec(0.5, 1.0, 0.0, 0.0, Filter::TwoStage { tau1: 1.0, tau2: 1.0 });
        assert!(spec.validate().is_err());
        spec.filter = Filter::Single { tau: 0.0 };
        assert!(spec.validate().is_err());

        let spec = LevelSpec {
            seg_decay: vec![Decay::none(0)],
            ..scalar_spec(0.5, 1.0, 0.0, 0.0, Filter::Off)
        };
        assert!(spec.validate().is_err());

        let mut spec = scalar_spec(0.5, 1.0, 0.1, 0.0, Filter::Off);
        spec.t_c = -0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn basic_requires_zero_latency() {
        let spec = scalar_spec(0.5, 1.0, 0.1, 0.0, Filter::Off);
        assert!(level_1d_basic(&spec).is_err());
        assert!(level_1d_comm(&spec).is_ok());
    }

    #[test]
    fn degenerate_merge_is_reported() {
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.0, Filter::Off);
        match level_1d_basic(&spec) {
            Err(Error::DegenerateProtocol(_)) => {}
            other => panic!("expected DegenerateProtocol, got {other:?}"),
        }
    }

    #[test]
    fn merged_output_traces_out_consumed_modes() {
        let seg = one_mode_segment(0.5);
        let decay = Decay::uniform(DecayModel::AmplitudeDamping, 0.4, 1).unwrap();
        let spec = LevelSpec {
            segments: vec![seg.clone(), seg],
            seg_decay: vec![decay.clone(), decay],
            nu: 2.0,
            // Trace-preserving identity merge on both modes keeps arity.
            merge: LevelMerge::Pair {
                op: SuperOp::identity(&ModeSpace::memories(1, &["X", "Y"]).unwrap()),
                targets: vec![0, 1],
            },
            t_c: 0.0,
            t_swap: 0.0,
            filter: Filter::Off,
        };
        let res = level_1d_basic(&spec).unwrap();
        assert_eq!(res.rho.space().mode_count(), 2);
        assert_relative_eq!(res.p_merge, 1.0, max_relative = 1e-12);
        // Reduced single-mode marginals stay valid states.
        let marg = partial_trace_at(&res.rho, &[1]).unwrap();
        assert_relative_eq!(marg.trace(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn target_states_are_pure_and_normalized() {
        for (proto, dim_modes) in [(Protocol::OneD, 2), (Protocol::TwoD, 3)] {
            let t = target_state(proto, 2).unwrap();
            assert_eq!(t.space().mode_count(), dim_modes);
            assert_relative_eq!(t.trace(), 1.0, max_relative = 1e-14);
            let sq = t.mat().dot(t.mat());
            let purity: f64 = (0..t.space().dim()).map(|i| sq[[i, i]].re).sum();
            assert_relative_eq!(purity, 1.0, max_relative = 1e-14);
        }
    }
}
