//! Derivative-free optimization of protocol parameters and grid sweeps.
//!
//! For a fixed end-to-end distance, [`optimize_point`] enumerates the
//! nesting level over a small integer range (segment length `L/2^n`
//! follows the level) and, per level, maximizes the objective over the
//! continuous parameters with a bounded Nelder-Mead simplex started from a
//! deterministic low-discrepancy set. The filter cutoff is searched as the
//! dimensionless `ν·τ` (mean elementary attempts per cutoff window) on a
//! log scale, and the unfiltered protocol is always kept as a candidate,
//! so enabling the cutoff search can never lose to leaving it off.
//! [`sweep`] evaluates a grid of (distance, coherence-time) points in
//! parallel; failed points are reported, not fatal.

use rayon::prelude::*;

use crate::elementary::{build_segment_1d, build_segment_2d, HardwareParams};
use crate::engine::{
    run_protocol, target_state, FilterSchedule, LevelResult, Protocol, ProtocolConfig,
};
use crate::keyrate::{key_rate, parallel_link_state, LogicalEncoding};
use crate::{Error, Result};

/// Quantity maximized by the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Fidelity of the final state to the ideal target.
    Fidelity,
    /// Completed states per second, `1/T`.
    Rate,
    /// Secret bits per second from the key-rate pipeline.
    KeyRate,
}

/// Whether and where to search the filter cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauSearch {
    /// No filtering; age gaps are never discarded.
    Off,
    /// Search `ν·τ` within the given bounds (log-scaled), keeping the
    /// unfiltered protocol as a separate candidate.
    Free { nu_tau_bounds: (f64, f64) },
}

/// One optimization problem: hardware template, objective, and the search
/// space. `hw.l0` is ignored; each candidate level `n` uses segment length
/// `total_l_km / 2^n`.
#[derive(Clone, Debug)]
pub struct OptimizeSpec {
    pub protocol: Protocol,
    pub hw: HardwareParams,
    /// End-to-end distance in km.
    pub total_l_km: f64,
    pub n_max: usize,
    pub objective: Objective,
    /// Inclusive nesting-level range to enumerate.
    pub n_range: (u32, u32),
    pub eps_bounds: (f64, f64),
    /// Search separate squeezing per triangle edge family.
    pub split_eps: bool,
    pub tau: TauSearch,
    /// Search separate cutoffs for the two triangle stages.
    pub split_tau: bool,
    /// Simplex starts per continuous dimension.
    pub multistart: usize,
    /// Iteration budget per simplex start.
    pub max_iter: usize,
    /// Value-spread stopping tolerance.
    pub tol: f64,
}

impl OptimizeSpec {
    pub fn new(
        protocol: Protocol,
        hw: HardwareParams,
        total_l_km: f64,
        objective: Objective,
    ) -> Self {
        OptimizeSpec {
            protocol,
            hw,
            total_l_km,
            n_max: 2,
            objective,
            n_range: (0, 6),
            eps_bounds: (0.01, 0.5),
            split_eps: false,
            tau: TauSearch::Free { nu_tau_bounds: (0.1, 50.0) },
            split_tau: false,
            multistart: 5,
            max_iter: 120,
            tol: 1e-10,
        }
    }

    /// Copy with the sweep axes applied.
    pub fn at(&self, l_km: f64, t_coh_s: f64) -> Self {
        let mut spec = self.clone();
        spec.total_l_km = l_km;
        spec.hw.t_coh = t_coh_s;
        spec
    }

    fn validate(&self) -> Result<()> {
        if !(self.total_l_km.is_finite() && self.total_l_km > 0.0) {
            return Err(Error::invalid("OptimizeSpec: distance must be finite and > 0"));
        }
        if self.n_max == 0 {
            return Err(Error::invalid("OptimizeSpec: n_max must be ≥ 1"));
        }
        if self.n_range.0 > self.n_range.1 || self.n_range.1 > 20 {
            return Err(Error::invalid("OptimizeSpec: level range must be ordered and ≤ 20"));
        }
        let (lo, hi) = self.eps_bounds;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::invalid("OptimizeSpec: eps bounds must satisfy 0 < lo < hi < 1"));
        }
        if let TauSearch::Free { nu_tau_bounds: (tlo, thi) } = self.tau {
            if !(tlo.is_finite() && thi.is_finite() && 0.0 < tlo && tlo < thi) {
                return Err(Error::invalid(
                    "OptimizeSpec: ν·τ bounds must satisfy 0 < lo < hi",
                ));
            }
        }
        if (self.split_eps || self.split_tau) && self.protocol == Protocol::OneD {
            return Err(Error::invalid(
                "OptimizeSpec: split parameters apply to the triangle protocol",
            ));
        }
        if self.multistart == 0 || self.max_iter == 0 {
            return Err(Error::invalid("OptimizeSpec: multistart and max_iter must be ≥ 1"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid("OptimizeSpec: tol must be finite and > 0"));
        }
        Ok(())
    }
}

/// Concrete parameter assignment reported by the search. `nu_tau` values
/// are dimensionless; the cutoff in seconds is `nu_tau / ν₀` with
/// `ν₀ = q(ε)/Δt` the elementary attempt rate at the reported squeezing.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalParams {
    pub eps: f64,
    /// Second squeezing parameter when searched separately.
    pub eps_b: Option<f64>,
    /// First-stage cutoff as `ν·τ`; `None` means unfiltered.
    pub nu_tau: Option<f64>,
    /// Second-stage cutoff when searched separately.
    pub nu_tau2: Option<f64>,
}

/// Best candidate found for one problem.
#[derive(Clone, Debug)]
pub struct Optimum {
    pub n: u32,
    pub params: OptimalParams,
    pub value: f64,
    /// Level chain re-evaluated at the reported parameters.
    pub levels: Vec<LevelResult>,
    /// Objective evaluations spent over the whole enumeration.
    pub evaluations: usize,
}

/// Grid of problems over distance and coherence time.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub base: OptimizeSpec,
    pub l_km: Vec<f64>,
    pub t_coh_s: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub l_km: f64,
    pub t_coh_s: f64,
    pub best: Optimum,
}

/// A grid point whose optimization failed outright.
#[derive(Clone, Debug)]
pub struct SweepSkip {
    pub l_km: f64,
    pub t_coh_s: f64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
    pub skipped: Vec<SweepSkip>,
}

/// Elementary attempt rate `ν₀ = q/Δt` at the given parameters.
fn segment_rate(spec: &OptimizeSpec, hw: &HardwareParams, p: &OptimalParams) -> Result<f64> {
    let (q, dt) = match spec.protocol {
        Protocol::OneD => {
            let seg = build_segment_1d(hw, p.eps, spec.n_max)?;
            (seg.q, seg.dt)
        }
        Protocol::TwoD => {
            let seg = build_segment_2d(hw, p.eps, p.eps_b.unwrap_or(p.eps), spec.n_max)?;
            (seg.q, seg.dt)
        }
    };
    Ok(q / dt)
}

/// Evaluate the objective at explicit parameters. Returns the value and
/// the full level chain it was computed from.
pub fn evaluate_params(
    spec: &OptimizeSpec,
    n: u32,
    p: &OptimalParams,
) -> Result<(f64, Vec<LevelResult>)> {
    let mut hw = spec.hw.clone();
    hw.l0 = spec.total_l_km / f64::from(1u32 << n.min(20));
    let filter = match (p.nu_tau, n) {
        (None, _) | (_, 0) => FilterSchedule::Off,
        (Some(x1), _) => {
            let nu0 = segment_rate(spec, &hw, p)?;
            let tau1 = x1 / nu0;
            match p.nu_tau2 {
                Some(x2) if spec.protocol == Protocol::TwoD => {
                    FilterSchedule::UniformTwoStage { tau1, tau2: x2 / nu0 }
                }
                _ => FilterSchedule::Uniform { tau: tau1 },
            }
        }
    };
    let cfg = ProtocolConfig {
        protocol: spec.protocol,
        levels: n,
        hw,
        eps: p.eps,
        eps_b: p.eps_b,
        n_max: spec.n_max,
        filter,
    };
    let levels = run_protocol(&cfg)?;
    let last = levels.last().expect("run_protocol returns at least level 0");
    let value = match spec.objective {
        Objective::Fidelity => {
            let target = target_state(spec.protocol, spec.n_max)?;
            target.overlap(&last.rho)
        }
        Objective::Rate => 1.0 / last.t_avg,
        Objective::KeyRate => match spec.protocol {
            Protocol::OneD => {
                let joint = parallel_link_state(&last.rho)?;
                key_rate(&joint, last.t_avg, &LogicalEncoding::chain_pair_parallel(), cfg.hw.v)?
                    .k
            }
            Protocol::TwoD => {
                key_rate(&last.rho, last.t_avg, &LogicalEncoding::triangle_ghz(), cfg.hw.v)?.k
            }
        },
    };
    if !value.is_finite() {
        return Err(Error::Numeric {
            what: "objective evaluated to a non-finite value".into(),
            residual: value,
        });
    }
    Ok((value, levels))
}

/// Maps the normalized simplex coordinates to parameters.
struct ParamMap {
    eps_bounds: (f64, f64),
    split_eps: bool,
    nu_bounds: Option<(f64, f64)>,
    split_tau: bool,
}

impl ParamMap {
    fn new(spec: &OptimizeSpec, filtered: bool) -> ParamMap {
        let nu_bounds = match (filtered, spec.tau) {
            (true, TauSearch::Free { nu_tau_bounds }) => Some(nu_tau_bounds),
            _ => None,
        };
        ParamMap {
            eps_bounds: spec.eps_bounds,
            split_eps: spec.split_eps,
            nu_bounds,
            split_tau: spec.split_tau,
        }
    }

    fn dim(&self) -> usize {
        let mut d = 1 + usize::from(self.split_eps);
        if self.nu_bounds.is_some() {
            d += 1 + usize::from(self.split_tau);
        }
        d
    }

    fn decode(&self, x: &[f64]) -> OptimalParams {
        let lerp = |(lo, hi): (f64, f64), t: f64| lo + t * (hi - lo);
        // Cutoffs vary over orders of magnitude; interpolate their logs.
        let logerp = |(lo, hi): (f64, f64), t: f64| lo * (hi / lo).powf(t);
        let mut i = 0;
        let mut next = || {
            let v = x[i];
            i += 1;
            v
        };
        let eps = lerp(self.eps_bounds, next());
        let eps_b = self.split_eps.then(|| lerp(self.eps_bounds, next()));
        let nu_tau = self.nu_bounds.map(|b| logerp(b, next()));
        let nu_tau2 = match (self.nu_bounds, self.split_tau) {
            (Some(b), true) => Some(logerp(b, next())),
            _ => None,
        };
        OptimalParams { eps, eps_b, nu_tau, nu_tau2 }
    }
}

/// Deterministic low-discrepancy start points (Weyl sequence per axis).
fn weyl_start(k: usize, dim: usize) -> Vec<f64> {
    const ALPHA: [f64; 4] = [0.41421356237, 0.73205080757, 0.23606797750, 0.64575131106];
    (0..dim)
        .map(|i| (0.5 + (k as f64 + 1.0) * ALPHA[i]).fract())
        .collect()
}

/// Bounded Nelder-Mead ascent on `[0, 1]^d`. Infeasible evaluations count
/// as `-∞`; returns `None` when every vertex stays infeasible.
fn nelder_mead<F: FnMut(&[f64]) -> Option<f64>>(
    f: &mut F,
    start: &[f64],
    step: f64,
    max_iter: usize,
    tol: f64,
) -> Option<(Vec<f64>, f64)> {
    let d = start.len();
    let clamped = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
    };
    let mut verts: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    verts.push(start.to_vec());
    for i in 0..d {
        let mut v = start.to_vec();
        v[i] = if v[i] + step <= 1.0 { v[i] + step } else { v[i] - step };
        verts.push(clamped(v));
    }
    let mut vals: Vec<f64> = verts
        .iter()
        .map(|v| f(v).unwrap_or(f64::NEG_INFINITY))
        .collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        verts = order.iter().map(|&i| verts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if vals[0] == f64::NEG_INFINITY {
            return None;
        }
        let spread = vals[0] - vals[d];
        let diam = verts[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&verts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if (spread.is_finite() && spread <= tol) || diam <= 1e-9 {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|i| verts[..d].iter().map(|v| v[i]).sum::<f64>() / d as f64)
            .collect();
        let reflect: Vec<f64> = clamped(
            centroid.iter().zip(&verts[d]).map(|(c, w)| 2.0 * c - w).collect(),
        );
        let fr = f(&reflect).unwrap_or(f64::NEG_INFINITY);
        if fr > vals[0] {
            let expand: Vec<f64> = clamped(
                centroid.iter().zip(&verts[d]).map(|(c, w)| 3.0 * c - 2.0 * w).collect(),
            );
            let fe = f(&expand).unwrap_or(f64::NEG_INFINITY);
            if fe > fr {
                verts[d] = expand;
                vals[d] = fe;
            } else {
                verts[d] = reflect;
                vals[d] = fr;
            }
        } else if fr > vals[d - 1] {
            verts[d] = reflect;
            vals[d] = fr;
        } else {
            let toward = if fr > vals[d] { &reflect } else { &verts[d] };
            let contract: Vec<f64> = clamped(
                centroid.iter().zip(toward).map(|(c, t)| 0.5 * (c + t)).collect(),
            );
            let fc = f(&contract).unwrap_or(f64::NEG_INFINITY);
            if fc > vals[d] {
                verts[d] = contract;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    let shrunk: Vec<f64> = verts[i]
                        .iter()
                        .zip(&verts[0])
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    verts[i] = clamped(shrunk);
                    vals[i] = f(&verts[i]).unwrap_or(f64::NEG_INFINITY);
                }
            }
        }
    }
    let best = (0..=d).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    if vals[best] == f64::NEG_INFINITY {
        None
    } else {
        Some((verts[best].clone(), vals[best]))
    }
}

/// Enumerate nesting levels and maximize the objective per level.
/// Evaluation failures inside the search are skipped; the call fails only
/// when no candidate anywhere evaluates.
pub fn optimize_point(spec: &OptimizeSpec) -> Result<Optimum> {
    spec.validate()?;
    let mut evaluations = 0usize;
    let mut best: Option<(f64, u32, OptimalParams)> = None;
    for n in spec.n_range.0..=spec.n_range.1 {
        let filter_candidates: &[bool] = match (spec.tau, n) {
            (TauSearch::Off, _) | (_, 0) => &[false],
            (TauSearch::Free { .. }, _) => &[false, true],
        };
        for &filtered in filter_candidates {
            let map = ParamMap::new(spec, filtered);
            let dim = map.dim();
            for k in 0..spec.multistart * dim {
                let start = weyl_start(k, dim);
                let mut eval = |x: &[f64]| {
                    evaluations += 1;
                    let p = map.decode(x);
                    evaluate_params(spec, n, &p).ok().map(|(v, _)| v)
                };
                if let Some((x, v)) =
                    nelder_mead(&mut eval, &start, 0.15, spec.max_iter, spec.tol)
                {
                    if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                        best = Some((v, n, map.decode(&x)));
                    }
                }
            }
        }
    }
    let (_, n, params) = best.ok_or_else(|| {
        Error::DegenerateProtocol("optimize_point: no candidate evaluated successfully".into())
    })?;
    let (value, levels) = evaluate_params(spec, n, &params)?;
    Ok(Optimum { n, params, value, levels, evaluations })
}

/// Optimize every grid point in parallel. Points whose search fails land
/// in `skipped` with the failure text; the call errors only on an invalid
/// grid.
pub fn sweep(spec: &SweepSpec) -> Result<SweepTable> {
    if spec.l_km.is_empty() || spec.t_coh_s.is_empty() {
        return Err(Error::invalid("sweep: both grid axes must be non-empty"));
    }
    if spec.l_km.iter().chain(&spec.t_coh_s).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::invalid("sweep: grid values must be finite and > 0"));
    }
    spec.base.validate()?;
    let points: Vec<(f64, f64)> = spec
        .l_km
        .iter()
        .flat_map(|&l| spec.t_coh_s.iter().map(move |&t| (l, t)))
        .collect();
    let results: Vec<std::result::Result<SweepPoint, SweepSkip>> = points
        .par_iter()
        .map(|&(l_km, t_coh_s)| {
            optimize_point(&spec.base.at(l_km, t_coh_s))
                .map(|best| SweepPoint { l_km, t_coh_s, best })
                .map_err(|e| SweepSkip { l_km, t_coh_s, reason: e.to_string() })
        })
        .collect();
    let mut table = SweepTable { points: Vec::new(), skipped: Vec::new() };
    for r in results {
        match r {
            Ok(p) => table.points.push(p),
            Err(s) => table.skipped.push(s),
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec(objective: Objective) -> OptimizeSpec {
        let mut spec = OptimizeSpec::new(
            Protocol::OneD,
            HardwareParams::baseline(10.0, 0.1),
            40.0,
            objective,
        );
        spec.n_max = 1;
        spec.n_range = (1, 1);
        spec.eps_bounds = (0.02, 0.3);
        spec.tau = TauSearch::Off;
        spec.multistart = 2;
        spec.max_iter = 40;
        spec
    }

    #[test]
    fn simplex_maximizes_quadratics() {
        let mut f1 = |x: &[f64]| Some(-(x[0] - 0.3).powi(2));
        let (x, v) = nelder_mead(&mut f1, &[0.9], 0.15, 300, 1e-15).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-6, "x = {}", x[0]);
        assert!(v > -1e-12);

        let mut f2 =
            |x: &[f64]| Some(-(x[0] - 0.62).powi(2) - 2.0 * (x[1] - 0.41).powi(2));
        let (x, _) = nelder_mead(&mut f2, &[0.1, 0.9], 0.15, 500, 1e-16).unwrap();
        assert!((x[0] - 0.62).abs() < 1e-5 && (x[1] - 0.41).abs() < 1e-5);
    }

    #[test]
    fn simplex_handles_boundary_optimum_and_infeasibility() {
        // Maximum at the clamped edge.
        let mut edge = |x: &[f64]| Some(-x[0]);
        let (x, _) = nelder_mead(&mut edge, &[0.7], 0.15, 200, 1e-15).unwrap();
        assert!(x[0] < 1e-7);
        // Everything infeasible.
        let mut dead = |_: &[f64]| None::<f64>;
        assert!(nelder_mead(&mut dead, &[0.5], 0.15, 50, 1e-12).is_none());
        // Half-infeasible domain still converges inside the feasible part.
        let mut half = |x: &[f64]| (x[0] < 0.5).then(|| -(x[0] - 0.2).powi(2));
        let (x, _) = nelder_mead(&mut half, &[0.45], 0.15, 300, 1e-15).unwrap();
        assert!((x[0] - 0.2).abs() < 1e-5);
    }

    #[test]
    fn decay_free_fidelity_prefers_minimal_squeezing() {
        // Without memory decay or dark counts, larger squeezing only adds
        // multi-photon error, so the optimum sits on the lower bound.
        let mut spec = quick_spec(Objective::Fidelity);
        spec.hw.t_coh = 1e12;
        spec.hw.d = 0.0;
        spec.n_max = 2;
        let best = optimize_point(&spec).unwrap();
        assert!(
            best.params.eps < spec.eps_bounds.0 + 2e-3,
            "eps = {}",
            best.params.eps
        );
        assert!(best.value > 0.8);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let spec = quick_spec(Objective::Rate);
        let a = optimize_point(&spec).unwrap();
        let b = optimize_point(&spec).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.params, b.params);
        assert_eq!(a.n, b.n);
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn reported_value_matches_reevaluation() {
        let spec = quick_spec(Objective::KeyRate);
        let best = optimize_point(&spec).unwrap();
        let (again, _) = evaluate_params(&spec, best.n, &best.params).unwrap();
        assert!((best.value - again).abs() <= 1e-9 * best.value.abs().max(1.0));
    }

    #[test]
    fn cutoff_search_never_loses_to_unfiltered() {
        let mut with = quick_spec(Objective::KeyRate);
        with.hw.t_coh = 0.05;
        with.tau = TauSearch::Free { nu_tau_bounds: (0.2, 30.0) };
        let mut without = with.clone();
        without.tau = TauSearch::Off;
        let filtered = optimize_point(&with).unwrap();
        let plain = optimize_point(&without).unwrap();
        assert!(
            filtered.value >= plain.value - 1e-12,
            "filtered {} vs plain {}",
            filtered.value,
            plain.value
        );
        assert!(plain.value > 0.0);
    }

    #[test]
    fn longer_lines_prefer_deeper_nesting() {
        let mut spec = quick_spec(Objective::Rate);
        spec.hw.t_coh = 100.0;
        spec.n_range = (0, 3);
        let short = optimize_point(&spec.at(30.0, 100.0)).unwrap();
        let long = optimize_point(&spec.at(400.0, 100.0)).unwrap();
        assert!(short.n <= long.n, "short {} vs long {}", short.n, long.n);
        assert!(long.n >= 2);
        assert!(short.n <= 1);
    }

    #[test]
    fn key_rate_grows_with_coherence_time() {
        let mut base = quick_spec(Objective::KeyRate);
        base.multistart = 3;
        base.max_iter = 60;
        let table = sweep(&SweepSpec {
            base,
            l_km: vec![40.0],
            t_coh_s: vec![0.02, 0.1, 1.0],
        })
        .unwrap();
        assert!(table.skipped.is_empty());
        assert_eq!(table.points.len(), 3);
        let ks: Vec<f64> = table.points.iter().map(|p| p.best.value).collect();
        assert!(ks[1] >= ks[0] - 1e-9 && ks[2] >= ks[1] - 1e-9, "{ks:?}");
    }

    #[test]
    fn single_cell_sweep_matches_point() {
        let base = quick_spec(Objective::Rate);
        let table = sweep(&SweepSpec {
            base: base.clone(),
            l_km: vec![40.0],
            t_coh_s: vec![0.1],
        })
        .unwrap();
        let point = optimize_point(&base.at(40.0, 0.1)).unwrap();
        assert_eq!(table.points.len(), 1);
        assert_eq!(table.points[0].best.value, point.value);
        assert_eq!(table.points[0].best.params, point.params);
    }

    #[test]
    fn specs_are_validated() {
        let mut spec = quick_spec(Objective::Rate);
        spec.eps_bounds = (0.3, 0.02);
        assert!(optimize_point(&spec).is_err());
        let mut spec = quick_spec(Objective::Rate);
        spec.split_eps = true;
        assert!(optimize_point(&spec).is_err());
        let table = sweep(&SweepSpec {
            base: quick_spec(Objective::Rate),
            l_km: vec![],
            t_coh_s: vec![0.1],
        });
        assert!(table.is_err());
    }
}
