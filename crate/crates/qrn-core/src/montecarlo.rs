//! Discrete-event Monte Carlo of the repeater recursion.
//!
//! Each trajectory replays the physical process the Laplace-domain engine
//! averages over: elementary segments succeed on a slotted attempt grid
//! (geometric waiting times), higher levels race their children, the
//! earlier side decays through the completion gap, merges succeed with the
//! trace of the merged state, failures and filter rejections restart after
//! the signalling delay. Timing and merge outcomes are sampled; the
//! conditional quantum state is propagated deterministically, so the
//! trajectory average converges to the engine's image at `s = 0` and the
//! sampled completion times to its mean time.
//!
//! Trajectory `i` of seed `s` draws from an independent counter-based RNG
//! stream `(s, i)`, so results are byte-identical for a given seed
//! regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::elementary::{build_segment_1d, build_segment_2d, merge_superop_1d, merge_superops_2d};
use crate::engine::two_d::{branch_layout, Branch};
use crate::engine::{
    comm_delay, target_state, with_mode_names, FilterSchedule, Protocol, ProtocolConfig,
};
use crate::liouville::decay::{Decay, DecayModel};
use crate::liouville::{apply_on, tensor_states, DensityState, SuperOp};
use crate::{Error, Result};

/// Self-contained protocol description the sampler runs on. Derive one
/// from hardware with [`mc_protocol`], or assemble it directly (for
/// instance with zero-mode scalar states) to test timing statistics alone.
#[derive(Clone, Debug)]
pub struct McProtocol {
    pub protocol: Protocol,
    /// Nesting levels above the elementary segments.
    pub levels: u32,
    /// Heralded elementary state (fresh at each success).
    pub seg_rho: DensityState,
    /// Per-attempt success probability of a segment.
    pub q: f64,
    /// Attempt slot duration in seconds.
    pub dt: f64,
    /// Amplitude-damping rate of every memory, 1/seconds.
    pub decay_rate: f64,
    /// Two-segment merge (also the first triangle stage).
    pub merge_pair: SuperOp,
    /// Second triangle stage; `None` for two-segment protocols.
    pub merge_double: Option<SuperOp>,
    /// Classical signalling time per level, entry `n - 1` for level `n`.
    pub t_c: Vec<f64>,
    /// Merge duration.
    pub t_swap: f64,
    pub filter: FilterSchedule,
    /// Fidelity reference; `None` skips fidelity accumulation.
    pub target: Option<DensityState>,
}

/// Sampler limits and reproducibility controls.
#[derive(Clone, Copy, Debug)]
pub struct McConfig {
    pub n_traj: usize,
    pub seed: u64,
    /// Per-trajectory budget of simulated events (child completions and
    /// merge attempts); exceeding it reports `Error::Timeout`.
    pub max_events: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { n_traj: 4151, seed: 0, max_events: 10_000_000 }
    }
}

/// One sampled protocol completion.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Completion time in seconds, measured from the protocol start.
    pub t_complete: f64,
    /// Conditional end-to-end state of this trajectory, trace 1.
    pub rho: DensityState,
}

/// Trajectory-averaged results with sample-variance standard errors.
#[derive(Clone, Debug)]
pub struct McEstimate {
    /// Mean of the per-trajectory conditional states.
    pub mean_state: DensityState,
    /// Mean fidelity against the target, when one is set.
    pub mean_fid: Option<f64>,
    pub stderr_fid: Option<f64>,
    /// Mean completion time in seconds.
    pub mean_time: f64,
    pub stderr_time: f64,
    pub n: usize,
}

/// Derive the sampler description from a hardware-level configuration,
/// with the recursion's target state as the fidelity reference.
pub fn mc_protocol(cfg: &ProtocolConfig) -> Result<McProtocol> {
    cfg.hw.validate()?;
    if cfg.n_max == 0 {
        return Err(Error::invalid("mc_protocol: n_max must be ≥ 1"));
    }
    let (seg, merge_pair, merge_double) = match cfg.protocol {
        Protocol::OneD => {
            let seg = build_segment_1d(&cfg.hw, cfg.eps, cfg.n_max)?;
            (seg, merge_superop_1d(&cfg.hw, cfg.n_max)?, None)
        }
        Protocol::TwoD => {
            let eps_b = cfg.eps_b.unwrap_or(cfg.eps);
            let seg = build_segment_2d(&cfg.hw, cfg.eps, eps_b, cfg.n_max)?;
            let m = merge_superops_2d(&cfg.hw, cfg.n_max)?;
            (seg, m.pair, Some(m.double))
        }
    };
    Ok(McProtocol {
        protocol: cfg.protocol,
        levels: cfg.levels,
        seg_rho: seg.rho_e,
        q: seg.q,
        dt: seg.dt,
        decay_rate: 1.0 / cfg.hw.t_coh,
        merge_pair,
        merge_double,
        t_c: (1..=cfg.levels).map(|n| comm_delay(&cfg.hw, n)).collect(),
        t_swap: cfg.hw.t_s,
        filter: cfg.filter,
        target: Some(target_state(cfg.protocol, cfg.n_max)?),
    })
}

impl McProtocol {
    fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid("McProtocol: q must be in (0, 1]"));
        }
        if !self.dt.is_finite() || !(self.dt > 0.0) {
            return Err(Error::invalid("McProtocol: dt must be finite and > 0"));
        }
        if !self.decay_rate.is_finite() || self.decay_rate < 0.0 {
            return Err(Error::invalid("McProtocol: decay_rate must be finite and ≥ 0"));
        }
        if !self.t_swap.is_finite() || self.t_swap < 0.0 {
            return Err(Error::invalid("McProtocol: t_swap must be finite and ≥ 0"));
        }
        if self.t_c.len() != self.levels as usize
            || self.t_c.iter().any(|t| !t.is_finite() || *t < 0.0)
        {
            return Err(Error::invalid("McProtocol: one finite t_c ≥ 0 per level"));
        }
        let m = self.seg_rho.space().mode_count();
        match self.protocol {
            Protocol::OneD => {
                if m != 0 && m != 2 {
                    return Err(Error::invalid("McProtocol: chain segments carry 0 or 2 modes"));
                }
                if matches!(self.filter, FilterSchedule::UniformTwoStage { .. }) {
                    return Err(Error::invalid(
                        "McProtocol: two-stage filtering applies to triangles",
                    ));
                }
            }
            Protocol::TwoD => {
                if m != 0 && m != 3 {
                    return Err(Error::invalid(
                        "McProtocol: triangle segments carry 0 or 3 modes",
                    ));
                }
                if self.merge_double.is_none() {
                    return Err(Error::invalid("McProtocol: triangles need the double merge"));
                }
            }
        }
        match self.filter {
            FilterSchedule::Off => {}
            FilterSchedule::Uniform { tau } => {
                if !(tau > 0.0) {
                    return Err(Error::invalid("McProtocol: filter cutoff must be > 0"));
                }
            }
            FilterSchedule::UniformTwoStage { tau1, tau2 } => {
                if !(tau1 > 0.0) || !(tau2 > 0.0) {
                    return Err(Error::invalid("McProtocol: filter cutoffs must be > 0"));
                }
            }
        }
        Ok(())
    }

    fn taus(&self) -> (f64, f64) {
        match self.filter {
            FilterSchedule::Off => (f64::INFINITY, f64::INFINITY),
            FilterSchedule::Uniform { tau } => (tau, tau),
            FilterSchedule::UniformTwoStage { tau1, tau2 } => (tau1, tau2),
        }
    }
}

/// Prebuilt per-run materials shared by every trajectory.
struct Runner {
    proto: McProtocol,
    seg_decay: Decay,
    block_decay: Decay,
    out_names: Vec<&'static str>,
    branches: [Branch; 3],
    pair_targets_1d: Vec<usize>,
    scalar: bool,
}

impl Runner {
    fn new(proto: McProtocol) -> Result<Self> {
        proto.validate()?;
        let m = proto.seg_rho.space().mode_count();
        let scalar = m == 0;
        let seg_decay = Decay::uniform(DecayModel::AmplitudeDamping, proto.decay_rate, m)?;
        let block_decay =
            Decay::uniform(DecayModel::AmplitudeDamping, proto.decay_rate, if scalar { 0 } else { 4 })?;
        let out_names: Vec<&'static str> = match proto.protocol {
            Protocol::OneD => vec!["A", "B"],
            Protocol::TwoD => vec!["A", "C", "B"],
        };
        let branches = [
            branch_layout(0, scalar),
            branch_layout(1, scalar),
            branch_layout(2, scalar),
        ];
        let pair_targets_1d = if scalar { vec![] } else { vec![1, 2] };
        Ok(Runner { proto, seg_decay, block_decay, out_names, branches, pair_targets_1d, scalar })
    }

    fn run(&self, rng: &mut ChaCha12Rng, max_events: u64) -> Result<Trajectory> {
        let mut sim = Sim { r: self, rng, events_left: max_events };
        let (t_complete, rho) = sim.child(self.proto.levels, 0.0)?;
        let rho = if self.scalar {
            rho
        } else if self.proto.levels == 0 {
            // Level-0 names are already canonical.
            rho
        } else {
            with_mode_names(&rho, &self.out_names)?
        };
        Ok(Trajectory { t_complete, rho })
    }
}

struct Sim<'a> {
    r: &'a Runner,
    rng: &'a mut ChaCha12Rng,
    events_left: u64,
}

impl Sim<'_> {
    fn tick(&mut self) -> Result<()> {
        if self.events_left == 0 {
            return Err(Error::Timeout(
                "trajectory exceeded its event budget; raise max_events or fix a degenerate protocol"
                    .into(),
            ));
        }
        self.events_left -= 1;
        Ok(())
    }

    /// Attempts until the first success on the slotted grid, ≥ 1.
    fn geometric(&mut self) -> u64 {
        let q = self.r.proto.q;
        if q >= 1.0 {
            return 1;
        }
        let x = 1.0 - self.rng.random::<f64>();
        let k = (x.ln() / (1.0 - q).ln()).ceil();
        if k >= 1.0 { k as u64 } else { 1 }
    }

    fn child(&mut self, level: u32, t0: f64) -> Result<(f64, DensityState)> {
        if level == 0 {
            self.tick()?;
            let k = self.geometric();
            return Ok((t0 + k as f64 * self.r.proto.dt, self.r.proto.seg_rho.clone()));
        }
        match self.r.proto.protocol {
            Protocol::OneD => self.level_1d(level, t0),
            Protocol::TwoD => self.level_2d(level, t0),
        }
    }

    fn level_1d(&mut self, n: u32, t0: f64) -> Result<(f64, DensityState)> {
        let p = &self.r.proto;
        let (tau, _) = p.taus();
        let t_c = p.t_c[n as usize - 1];
        let t_m = t_c + p.t_swap;
        let mut start = t0;
        loop {
            // Prepare a pair within the age cutoff.
            let (ra, sa, rb, sb) = loop {
                let (r0, s0) = self.child(n - 1, start)?;
                let (r1, s1) = self.child(n - 1, start)?;
                if (r0 - r1).abs() <= tau {
                    break (r0, s0, r1, s1);
                }
                start = r0.min(r1) + tau + t_c;
            };
            // The earlier side decays through the completion gap.
            let gap = (ra - rb).abs();
            let (s0, s1) = if ra <= rb {
                (self.r.seg_decay.propagate(&sa, gap)?, sb)
            } else {
                (sa, self.r.seg_decay.propagate(&sb, gap)?)
            };
            let joint = tensor_states(&s0.prefixed("0."), &s1.prefixed("1."))?;
            let merged = apply_on(&p.merge_pair, &joint, &self.r.pair_targets_1d)?;
            let succ = merged.trace();
            self.tick()?;
            let attempt = ra.max(rb);
            if self.rng.random::<f64>() < succ {
                let mut rho = merged.scaled(1.0 / succ);
                let out_decay = Decay::uniform(
                    DecayModel::AmplitudeDamping,
                    p.decay_rate,
                    rho.space().mode_count(),
                )?;
                rho = out_decay.propagate(&rho, t_m)?;
                rho.hermitize();
                return Ok((attempt + t_m, rho));
            }
            start = attempt + t_m;
        }
    }

    fn level_2d(&mut self, n: u32, t0: f64) -> Result<(f64, DensityState)> {
        let p = &self.r.proto;
        let double = p.merge_double.as_ref().expect("validated");
        let (tau1, tau2) = p.taus();
        let t_c = p.t_c[n as usize - 1];
        let t_m = t_c + p.t_swap;
        let mut start = t0;
        loop {
            // Stage 1: all three race; the first two must land within τ₁.
            let (times, states, order) = loop {
                let mut sims = Vec::with_capacity(3);
                for _ in 0..3 {
                    sims.push(self.child(n - 1, start)?);
                }
                let mut order = [0usize, 1, 2];
                order.sort_by(|&a, &b| sims[a].0.total_cmp(&sims[b].0));
                if sims[order[1]].0 - sims[order[0]].0 <= tau1 {
                    let times: Vec<f64> = sims.iter().map(|s| s.0).collect();
                    let states: Vec<DensityState> =
                        sims.into_iter().map(|s| s.1).collect();
                    break (times, states, order);
                }
                start = sims[order[0]].0 + tau1 + t_c;
            };
            let k = order[2];
            let br = &self.r.branches[k];
            let (i, j) = br.early;
            // Pair merge of the two finished segments; the earlier decays
            // through the gap, the joint keeps ascending segment order.
            let gap = times[order[1]] - times[order[0]];
            let early = order[0];
            let mut si = states[i].prefixed(&format!("{i}."));
            let mut sj = states[j].prefixed(&format!("{j}."));
            if early == i {
                si = self.r.seg_decay.propagate(&si, gap)?;
            } else {
                sj = self.r.seg_decay.propagate(&sj, gap)?;
            }
            let joint = tensor_states(&si, &sj)?;
            let merged = apply_on(&p.merge_pair, &joint, &br.pair_targets)?;
            let p1 = merged.trace();
            self.tick()?;
            let r2 = times[order[1]];
            if self.rng.random::<f64>() >= p1 {
                start = r2 + t_m;
                continue;
            }
            // Block survives; it decays through the signalling window and
            // then waits for the remaining segment under the τ₂ cutoff.
            let block = self.r.block_decay.propagate(&merged.scaled(1.0 / p1), t_m)?;
            let t_block = r2 + t_m;
            let r3 = times[k];
            let (attempt, block, third) = if r3 <= t_block {
                let third = self.r.seg_decay.propagate(&states[k], t_block - r3)?;
                (t_block, block, third)
            } else {
                let wait = r3 - t_block;
                if wait > tau2 {
                    start = t_block + tau2 + t_c;
                    continue;
                }
                (r3, self.r.block_decay.propagate(&block, wait)?, states[k].clone())
            };
            let joint2 = tensor_states(&block, &third.prefixed(&format!("{k}.")))?;
            let fin = apply_on(double, &joint2, &br.double_targets)?;
            let p2 = fin.trace();
            self.tick()?;
            if self.rng.random::<f64>() >= p2 {
                start = attempt + t_m;
                continue;
            }
            let mut rho = fin.scaled(1.0 / p2).reorder_modes(&br.out_perm)?;
            let out_decay = Decay::uniform(
                DecayModel::AmplitudeDamping,
                p.decay_rate,
                rho.space().mode_count(),
            )?;
            rho = out_decay.propagate(&rho, t_m)?;
            rho.hermitize();
            return Ok((attempt + t_m, rho));
        }
    }
}

/// Simulate the single trajectory `index` of the stream family `seed`.
pub fn simulate_trajectory(proto: &McProtocol, seed: u64, index: u64) -> Result<Trajectory> {
    let runner = Runner::new(proto.clone())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    runner.run(&mut rng, McConfig::default().max_events)
}

/// Run `mc.n_traj` trajectories and average them.
pub fn estimate(proto: &McProtocol, mc: &McConfig) -> Result<McEstimate> {
    if mc.n_traj == 0 {
        return Err(Error::invalid("estimate: n_traj must be ≥ 1"));
    }
    let runner = Runner::new(proto.clone())?;
    let trajs: Vec<Trajectory> = (0..mc.n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(mc.seed);
            rng.set_stream(i);
            runner.run(&mut rng, mc.max_events)
        })
        .collect::<Result<_>>()?;
    let n = trajs.len();
    let nf = n as f64;
    let mut mean_state = trajs[0].rho.scaled(0.0);
    for t in &trajs {
        mean_state.add_scaled(&t.rho, 1.0 / nf)?;
    }
    mean_state.hermitize();
    let times: Vec<f64> = trajs.iter().map(|t| t.t_complete).collect();
    let (mean_time, stderr_time) = mean_stderr(&times);
    let (mean_fid, stderr_fid) = match &runner.proto.target {
        Some(target) => {
            let fids: Vec<f64> = trajs.iter().map(|t| target.overlap(&t.rho)).collect();
            let (m, s) = mean_stderr(&fids);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(McEstimate { mean_state, mean_fid, stderr_fid, mean_time, stderr_time, n })
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elementary::HardwareParams;
    use crate::engine::{generation_cdf_1d, run_protocol};
    use crate::liouville::{C64, ModeSpace, TraceFlag};
    use approx::assert_relative_eq;
    use ndarray::Array2;

    fn scalar_op(p: f64) -> SuperOp {
        SuperOp::new(
            ModeSpace::scalar(0),
            ModeSpace::scalar(0),
            Array2::from_elem((1, 1), C64::new(p, 0.0)),
            TraceFlag::NonIncreasing,
        )
        .unwrap()
    }

    fn scalar_proto_1d(levels: u32, q: f64, dt: f64, p: f64) -> McProtocol {
        McProtocol {
            protocol: Protocol::OneD,
            levels,
            seg_rho: DensityState::scalar(1.0, 0),
            q,
            dt,
            decay_rate: 0.0,
            merge_pair: scalar_op(p),
            merge_double: None,
            t_c: vec![0.0; levels as usize],
            t_swap: 0.0,
            filter: FilterSchedule::Off,
            target: None,
        }
    }

    #[test]
    fn level0_times_are_geometric() {
        let proto = scalar_proto_1d(0, 0.25, 2.0, 0.5);
        let mc = McConfig { n_traj: 20_000, seed: 7, ..Default::default() };
        let est = estimate(&proto, &mc).unwrap();
        // Mean of K·dt with K geometric(q) is dt/q.
        let expect = proto.dt / proto.q;
        assert!(
            (est.mean_time - expect).abs() < 4.0 * est.stderr_time,
            "mean {} vs {} ± {}",
            est.mean_time,
            expect,
            est.stderr_time
        );
        assert_relative_eq!(est.mean_state.trace(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn scalar_chain_matches_two_pole_law() {
        // Small q so the slotted grid is close to the exponential model.
        let (q, dt, p) = (2e-3, 1e-3, 0.5);
        let proto = scalar_proto_1d(1, q, dt, p);
        let mc = McConfig { n_traj: 30_000, seed: 11, ..Default::default() };
        let est = estimate(&proto, &mc).unwrap();
        let nu = q / dt;
        let expect = 1.5 / (p * nu);
        assert!(
            (est.mean_time - expect).abs() < 4.0 * est.stderr_time,
            "mean {} vs {} ± {}",
            est.mean_time,
            expect,
            est.stderr_time
        );
        // Empirical CDF against the closed form at a few quantiles.
        let mut times: Vec<f64> = (0..4000)
            .map(|i| simulate_trajectory(&proto, 11, i).unwrap().t_complete)
            .collect();
        times.sort_by(f64::total_cmp);
        let n = times.len() as f64;
        for frac in [0.25, 0.5, 0.75, 0.9] {
            let idx = (frac * n) as usize;
            let emp = (idx + 1) as f64 / n;
            let model = generation_cdf_1d(p, nu, times[idx]).unwrap();
            assert!(
                (emp - model).abs() < 0.03,
                "cdf mismatch at q{frac}: {emp} vs {model}"
            );
        }
    }

    #[test]
    fn scalar_triangle_matches_exact_mean() {
        let (q, dt, m1, m2) = (5e-3, 1e-3, 0.6, 0.5);
        let proto = McProtocol {
            protocol: Protocol::TwoD,
            levels: 1,
            seg_rho: DensityState::scalar(1.0, 0),
            q,
            dt,
            decay_rate: 0.0,
            merge_pair: scalar_op(m1),
            merge_double: Some(scalar_op(m2)),
            t_c: vec![0.0],
            t_swap: 0.0,
            filter: FilterSchedule::Off,
            target: None,
        };
        let mc = McConfig { n_traj: 30_000, seed: 3, ..Default::default() };
        let est = estimate(&proto, &mc).unwrap();
        let nu = q / dt;
        let expect = (5.0 + 6.0 * m1) / (6.0 * m1 * m2 * nu);
        assert!(
            (est.mean_time - expect).abs() < 4.0 * est.stderr_time,
            "mean {} vs {} ± {}",
            est.mean_time,
            expect,
            est.stderr_time
        );
    }

    #[test]
    fn hardware_chain_agrees_with_engine() {
        let cfg = ProtocolConfig {
            protocol: Protocol::OneD,
            levels: 1,
            hw: HardwareParams::baseline(20.0, 0.5),
            eps: 0.1,
            eps_b: None,
            n_max: 2,
            filter: FilterSchedule::Off,
        };
        let engine = run_protocol(&cfg).unwrap();
        let proto = mc_protocol(&cfg).unwrap();
        let mc = McConfig { n_traj: 1500, seed: 42, ..Default::default() };
        let est = estimate(&proto, &mc).unwrap();
        let target = target_state(Protocol::OneD, 2).unwrap();
        let f_engine = target.overlap(&engine[1].rho);
        let f_mc = est.mean_fid.unwrap();
        assert!(
            (f_mc - f_engine).abs() < 4.0 * est.stderr_fid.unwrap(),
            "fidelity {} vs engine {} ± {}",
            f_mc,
            f_engine,
            est.stderr_fid.unwrap()
        );
        assert!(
            (est.mean_time - engine[1].t_avg).abs() < 4.0 * est.stderr_time,
            "time {} vs engine {} ± {}",
            est.mean_time,
            engine[1].t_avg,
            est.stderr_time
        );
        assert_relative_eq!(est.mean_state.trace(), 1.0, epsilon = 1e-9);
    }

    /// The sampled restart bookkeeping must agree with the level operation
    /// it mirrors, including the filter: compare a filtered chain against
    /// the engine on both outputs.
    #[test]
    fn filtered_chain_agrees_with_engine() {
        let hw = HardwareParams::baseline(30.0, 0.08);
        let cfg = ProtocolConfig {
            protocol: Protocol::OneD,
            levels: 1,
            hw,
            eps: 0.12,
            eps_b: None,
            n_max: 2,
            filter: FilterSchedule::Uniform { tau: 0.015 },
        };
        let engine = run_protocol(&cfg).unwrap();
        let proto = mc_protocol(&cfg).unwrap();
        let mc = McConfig { n_traj: 1500, seed: 5, ..Default::default() };
        let est = estimate(&proto, &mc).unwrap();
        let target = target_state(Protocol::OneD, 2).unwrap();
        let f_engine = target.overlap(&engine[1].rho);
        assert!(
            (est.mean_fid.unwrap() - f_engine).abs() < 4.0 * est.stderr_fid.unwrap(),
            "fidelity {} vs engine {} ± {}",
            est.mean_fid.unwrap(),
            f_engine,
            est.stderr_fid.unwrap()
        );
        assert!(
            (est.mean_time - engine[1].t_avg).abs() < 4.0 * est.stderr_time,
            "time {} vs engine {} ± {}",
            est.mean_time,
            engine[1].t_avg,
            est.stderr_time
        );
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let proto = scalar_proto_1d(1, 0.01, 1e-3, 0.4);
        let mc = McConfig { n_traj: 500, seed: 9, ..Default::default() };
        let a = estimate(&proto, &mc).unwrap();
        let b = estimate(&proto, &mc).unwrap();
        assert_eq!(a.mean_time, b.mean_time);
        assert_eq!(a.stderr_time, b.stderr_time);
        assert_eq!(a.mean_state.mat(), b.mean_state.mat());
        // A different seed draws a different sample.
        let c = estimate(&proto, &McConfig { seed: 10, ..mc }).unwrap();
        assert_ne!(a.mean_time, c.mean_time);
    }

    #[test]
    fn trajectory_stream_is_stable() {
        let proto = scalar_proto_1d(1, 0.01, 1e-3, 0.4);
        let t1 = simulate_trajectory(&proto, 9, 123).unwrap();
        let t2 = simulate_trajectory(&proto, 9, 123).unwrap();
        assert_eq!(t1.t_complete, t2.t_complete);
        let t3 = simulate_trajectory(&proto, 9, 124).unwrap();
        assert_ne!(t1.t_complete, t3.t_complete);
    }

    #[test]
    fn event_budget_reports_timeout() {
        let proto = scalar_proto_1d(1, 0.5, 1.0, 1e-12);
        let mc = McConfig { n_traj: 1, seed: 0, max_events: 1000 };
        match estimate(&proto, &mc) {
            Err(Error::Timeout(_)) => {}
            other => panic!("expected Timeout, got {other:?}"),
        }
    }

    /// With zero decay and lossless merges the trajectory state is the
    /// ideal fixed point regardless of the sampled timings.
    #[test]
    fn lossless_chain_keeps_states_pure() {
        let mut hw = HardwareParams::baseline(10.0, 1.0);
        hw.f = 0.0;
        hw.d = 0.0;
        hw.v = 0.0;
        hw.eta = 1.0;
        hw.t_coh = 1e15;
        let bell = target_state(Protocol::OneD, 1).unwrap();
        let proto = McProtocol {
            protocol: Protocol::OneD,
            levels: 2,
            seg_rho: bell.clone(),
            q: 0.3,
            dt: 1e-3,
            decay_rate: 0.0,
            merge_pair: crate::elementary::merge_superop_1d(&hw, 1).unwrap(),
            merge_double: None,
            t_c: vec![0.0, 0.0],
            t_swap: 0.0,
            filter: FilterSchedule::Off,
            target: Some(bell),
        };
        let mc = McConfig { n_traj: 64, seed: 1, ..Default::default() };
        let est = estimate(&proto, &mc).unwrap();
        assert_relative_eq!(est.mean_fid.unwrap(), 1.0, epsilon = 1e-9);
        assert!(est.stderr_fid.unwrap() < 1e-12);
    }

    #[test]
    fn filter_rejects_wide_gaps_in_samples() {
        // With a cutoff of one slot, prepared pairs always land within dt.
        let proto = McProtocol {
            filter: FilterSchedule::Uniform { tau: 1.0 },
            ..scalar_proto_1d(1, 0.05, 1.0, 1.0)
        };
        for i in 0..200 {
            let t = simulate_trajectory(&proto, 2, i).unwrap().t_complete;
            assert!(t >= 0.0);
        }
        // Statistical sanity: the filtered mean exceeds the unfiltered one.
        let open = scalar_proto_1d(1, 0.05, 1.0, 1.0);
        let mc = McConfig { n_traj: 4000, seed: 21, ..Default::default() };
        let filtered = estimate(&proto, &mc).unwrap();
        let unfiltered = estimate(&open, &mc).unwrap();
        assert!(filtered.mean_time > unfiltered.mean_time);
    }
}
