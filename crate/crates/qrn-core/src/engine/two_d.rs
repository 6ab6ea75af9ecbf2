//! Triangle (three-segment) level evaluation.
//!
//! Three segments race; the two that finish first merge at their shared
//! corner, the merged block then waits for the third and merges with it at
//! the two remaining corners. Both stages retry on failure, optionally
//! bounded by age cutoffs. The whole object is evaluated in the Laplace
//! domain with forward-mode duals so the mean completion time comes out as
//! the exact negative trace derivative at `s = 0`, with no finite
//! differencing.

use super::dual::Dual;
use super::{Filter, LevelMerge, LevelResult, LevelSpec};
use crate::elementary::{wire_joining_edge, WIRE_EDGES};
use crate::liouville::decay::Decay;
use crate::liouville::{apply_on, tensor_states, DensityState, SuperOp};
use crate::{Error, Result};

/// State-valued dual: the image and its d/ds at the same argument.
#[derive(Clone)]
struct DState {
    v: DensityState,
    d: DensityState,
}

impl DState {
    fn constant(v: DensityState) -> Self {
        let d = v.scaled(0.0);
        DState { v, d }
    }

    fn trace(&self) -> Dual {
        Dual::new(self.v.trace(), self.d.trace())
    }

    fn scale(&self, f: Dual) -> Result<Self> {
        let mut d = self.d.scaled(f.v);
        d.add_scaled(&self.v, f.d)?;
        Ok(DState { v: self.v.scaled(f.v), d })
    }

    fn add(&mut self, o: &DState) -> Result<()> {
        self.v.add_scaled(&o.v, 1.0)?;
        self.d.add_scaled(&o.d, 1.0)
    }

    fn apply_on(&self, op: &SuperOp, targets: &[usize]) -> Result<Self> {
        Ok(DState {
            v: apply_on(op, &self.v, targets)?,
            d: apply_on(op, &self.d, targets)?,
        })
    }

    fn reorder(&self, perm: &[usize]) -> Result<Self> {
        Ok(DState { v: self.v.reorder_modes(perm)?, d: self.d.reorder_modes(perm)? })
    }

    fn tensor_right(&self, rho: &DensityState) -> Result<Self> {
        Ok(DState {
            v: tensor_states(&self.v, rho)?,
            d: tensor_states(&self.d, rho)?,
        })
    }

    fn tensor_left(rho: &DensityState, x: &DState) -> Result<Self> {
        Ok(DState {
            v: tensor_states(rho, &x.v)?,
            d: tensor_states(rho, &x.d)?,
        })
    }

    fn propagate(&self, decay: &Decay, dt: f64) -> Result<Self> {
        Ok(DState {
            v: decay.propagate(&self.v, dt)?,
            d: decay.propagate(&self.d, dt)?,
        })
    }
}

/// Dual resolvent: `x = (s′ − 𝓛)⁻¹ b` and `x′ = (s′ − 𝓛)⁻¹ (b′ − x)`.
fn dual_resolvent(decay: &Decay, s_plus: f64, b: &DState) -> Result<DState> {
    let v = decay.resolvent(s_plus, &b.v)?;
    let mut rhs = b.d.clone();
    rhs.add_scaled(&v, -1.0)?;
    let d = decay.resolvent(s_plus, &rhs)?;
    Ok(DState { v, d })
}

/// Static wiring bookkeeping for the branch in which segment `k` finishes
/// last, derived from [`WIRE_EDGES`].
pub(crate) struct Branch {
    /// The two segments that merge first, ascending.
    pub(crate) early: (usize, usize),
    /// Pair-merge targets in the 6-mode stage-1 joint (segment `early.0`'s
    /// modes first).
    pub(crate) pair_targets: Vec<usize>,
    /// Surviving block modes after the pair merge, as (segment, mode).
    pub(crate) block_modes: Vec<(usize, usize)>,
    /// Double-merge targets in the stage-2 joint (block modes, then
    /// segment `k`'s), ordered as the double map's inputs.
    pub(crate) double_targets: Vec<usize>,
    /// Permutation taking the surviving exteriors to the canonical
    /// next-level order.
    pub(crate) out_perm: Vec<usize>,
}

/// Exterior memories in the role order (A, C, B) of the next level.
const CANONICAL_EXTERIOR: [(usize, usize); 3] = [(1, 2), (2, 1), (0, 2)];

pub(crate) fn branch_layout(k: usize, scalar: bool) -> Branch {
    let others: Vec<usize> = (0..3).filter(|&s| s != k).collect();
    let early = (others[0], others[1]);
    if scalar {
        return Branch {
            early,
            pair_targets: vec![],
            block_modes: vec![],
            double_targets: vec![],
            out_perm: vec![],
        };
    }
    let joint: Vec<(usize, usize)> = others
        .iter()
        .flat_map(|&sg| (0..3).map(move |m| (sg, m)))
        .collect();
    let pos = |list: &[(usize, usize)], sm: (usize, usize)| {
        list.iter().position(|&x| x == sm).expect("wired mode present")
    };
    let join_edge = WIRE_EDGES[wire_joining_edge(k)];
    let pair_targets = vec![pos(&joint, join_edge.0), pos(&joint, join_edge.1)];
    let block_modes: Vec<(usize, usize)> = joint
        .iter()
        .enumerate()
        .filter(|(p, _)| !pair_targets.contains(p))
        .map(|(_, &sm)| sm)
        .collect();
    let joint2: Vec<(usize, usize)> = block_modes
        .iter()
        .copied()
        .chain((0..3).map(|m| (k, m)))
        .collect();
    let mut double_targets = Vec::with_capacity(4);
    for e in 0..3 {
        if e == wire_joining_edge(k) {
            continue;
        }
        double_targets.push(pos(&joint2, WIRE_EDGES[e].0));
        double_targets.push(pos(&joint2, WIRE_EDGES[e].1));
    }
    let exterior: Vec<(usize, usize)> = joint2
        .iter()
        .enumerate()
        .filter(|(p, _)| !double_targets.contains(p))
        .map(|(_, &sm)| sm)
        .collect();
    let out_perm = CANONICAL_EXTERIOR.iter().map(|sm| pos(&exterior, *sm)).collect();
    Branch { early, pair_targets, block_modes, double_targets, out_perm }
}

/// Decay on a list of (segment, mode) positions.
fn decay_on(spec: &LevelSpec, modes: &[(usize, usize)]) -> Result<Decay> {
    let rates = modes
        .iter()
        .map(|&(sg, m)| spec.seg_decay[sg].rates()[m])
        .collect();
    Decay::new(spec.seg_decay[0].model(), rates)
}

/// Fully assembled triangle image at one `s`.
pub(super) struct Chain2d {
    pub value: DensityState,
    pub deriv: DensityState,
    pub p1: f64,
    pub p2: f64,
    pub p_nofilter: f64,
}

pub(super) fn chain_2d(spec: &LevelSpec, s: f64) -> Result<Chain2d> {
    let LevelMerge::Triple { pair, double } = &spec.merge else {
        return Err(Error::invalid("chain_2d: needs a three-segment merge"));
    };
    let (tau1, tau2) = match spec.filter {
        Filter::Off => (f64::INFINITY, f64::INFINITY),
        Filter::TwoStage { tau1, tau2 } => (tau1, tau2),
        Filter::Single { .. } => {
            return Err(Error::invalid("chain_2d: single-gap filter not applicable"));
        }
    };
    let nu = spec.nu;
    if s + nu <= 0.0 {
        return Err(Error::invalid("chain_2d: requires s + nu > 0"));
    }
    let t_m = spec.t_m();
    let scalar = spec.segments[0].space().mode_count() == 0;
    let f: Vec<DensityState> = spec
        .segments
        .iter()
        .enumerate()
        .map(|(i, r)| r.prefixed(&format!("{i}.")))
        .collect();
    let sv = Dual::var(s);
    let est = (sv * t_m).exp();

    // Stage 1 of branch k: the two other segments race while the whole
    // triple keeps attempting, so the first finisher waits at shift s + 2ν
    // and the pairing carries weight ν²/(s + 3ν).
    let coeff1 = Dual::constant(nu * nu) / Dual::new(s + 3.0 * nu, 1.0);
    let pf1 = if tau1.is_finite() {
        (sv * (-(tau1 + spec.t_c))).exp()
            * Dual::constant(3.0 * nu * (-2.0 * nu * tau1).exp())
            / Dual::new(s + 3.0 * nu, 1.0)
    } else {
        Dual::constant(0.0)
    };
    let keep1 = Dual::constant(1.0) - pf1;
    if keep1.v <= 0.0 {
        return Err(Error::DegenerateProtocol(
            "first-stage filter discards every pairing".into(),
        ));
    }

    let branches: Vec<Branch> = (0..3).map(|k| branch_layout(k, scalar)).collect();
    let mut merged1: Vec<DState> = Vec::with_capacity(3);
    let mut block_decays: Vec<Decay> = Vec::with_capacity(3);
    let mut d1 = est;
    let mut p1 = 0.0;
    for br in &branches {
        let (i, j) = br.early;
        let mut acc: Option<DState> = None;
        for (early, late) in [(i, j), (j, i)] {
            let mut b = DState::constant(f[early].clone());
            if tau1.is_finite() {
                let aged = spec.seg_decay[early].propagate(&f[early], tau1)?;
                let w = (-(s + 2.0 * nu) * tau1).exp();
                b.v.add_scaled(&aged, -w)?;
                b.d.add_scaled(&aged, tau1 * w)?;
            }
            let x = dual_resolvent(&spec.seg_decay[early], s + 2.0 * nu, &b)?;
            let term = if early == i {
                x.tensor_right(&f[late])?
            } else {
                DState::tensor_left(&f[late], &x)?
            };
            match &mut acc {
                None => acc = Some(term),
                Some(a) => a.add(&term)?,
            }
        }
        let prep1 = acc.expect("two orders").scale(coeff1 / keep1)?;
        let m = prep1.apply_on(pair, &br.pair_targets)?;
        d1 = d1 - (prep1.trace() - m.trace());
        p1 += m.trace().v;
        block_decays.push(decay_on(spec, &br.block_modes)?);
        merged1.push(m);
    }
    if d1.v <= 0.0 {
        return Err(Error::DegenerateProtocol(
            "retry series diverges: first merge never succeeds".into(),
        ));
    }

    // Surviving blocks decay through the signalling window, then wait for
    // the remaining segment at shift s + ν.
    let inv_d1 = d1.recip();
    let mut blocks: Vec<DState> = Vec::with_capacity(3);
    let mut block_trace_sum = Dual::constant(0.0);
    for (m, dec) in merged1.iter().zip(&block_decays) {
        let b = m.propagate(dec, t_m)?.scale(inv_d1)?;
        block_trace_sum = block_trace_sum + b.trace();
        blocks.push(b);
    }
    let pf2 = if tau2.is_finite() {
        (sv * (-(tau2 + spec.t_c))).exp()
            * Dual::constant((-nu * tau2).exp())
            * block_trace_sum
    } else {
        Dual::constant(0.0)
    };
    let keep2 = Dual::constant(1.0) - pf2;
    if keep2.v <= 0.0 {
        return Err(Error::DegenerateProtocol(
            "second-stage filter discards every pairing".into(),
        ));
    }

    let mut sum_final: Option<DState> = None;
    let mut d2 = est;
    let mut p2 = 0.0;
    for (k, (block, dec)) in blocks.iter().zip(&block_decays).enumerate() {
        let mut b2 = block.clone();
        if tau2.is_finite() {
            let aged_v = dec.propagate(&block.v, tau2)?;
            let aged_d = dec.propagate(&block.d, tau2)?;
            let w = (-(s + nu) * tau2).exp();
            b2.v.add_scaled(&aged_v, -w)?;
            b2.d.add_scaled(&aged_d, -w)?;
            b2.d.add_scaled(&aged_v, tau2 * w)?;
        }
        let prep2 = dual_resolvent(dec, s + nu, &b2)?
            .scale(Dual::constant(nu) / keep2)?;
        let joint2 = prep2.tensor_right(&f[k])?;
        let br = &branches[k];
        let fin = joint2
            .apply_on(double, &br.double_targets)?
            .reorder(&br.out_perm)?;
        d2 = d2 - (prep2.trace() - fin.trace());
        p2 += fin.trace().v;
        match &mut sum_final {
            None => sum_final = Some(fin),
            Some(a) => a.add(&fin)?,
        }
    }
    if d2.v <= 0.0 {
        return Err(Error::DegenerateProtocol(
            "retry series diverges: second merge never succeeds".into(),
        ));
    }

    let ext_decay = if scalar {
        Decay::none(0)
    } else {
        decay_on(spec, &CANONICAL_EXTERIOR)?
    };
    let out = sum_final
        .expect("three branches")
        .scale(d2.recip())?
        .propagate(&ext_decay, t_m)?;
    let p_nofilter = -(-2.0 * nu * tau1).exp_m1() * -(-nu * tau2).exp_m1();
    Ok(Chain2d { value: out.v, deriv: out.d, p1, p2, p_nofilter })
}

/// Shared tail of the triangle level evaluations.
fn finish_2d(ch: Chain2d, t_avg: f64) -> Result<LevelResult> {
    let mut rho = ch.value;
    rho.hermitize();
    rho.validate_physical()?;
    Ok(LevelResult {
        rho,
        t_avg,
        p_merge: ch.p1 * ch.p2,
        p_nofilter: ch.p_nofilter,
        p1: Some(ch.p1),
        p2: Some(ch.p2),
    })
}

/// Triangle level, compact closed form: no signalling latency, no filter,
/// and the mean completion time `T = 5 / (6 P₁ P₂ ν)`, which is the
/// retry-dominated limit of the exact derivative and overlaps it as the
/// merge probabilities become small.
pub fn level_2d_basic(spec: &LevelSpec) -> Result<LevelResult> {
    spec.validate()?;
    if spec.t_c != 0.0 || spec.t_swap != 0.0 {
        return Err(Error::invalid("level_2d_basic: requires t_c = t_swap = 0"));
    }
    if spec.filter != Filter::Off {
        return Err(Error::invalid("level_2d_basic: requires Filter::Off"));
    }
    let ch = chain_2d(spec, 0.0)?;
    if !(ch.p1 > 0.0 && ch.p2 > 0.0) {
        return Err(Error::DegenerateProtocol("merge never succeeds".into()));
    }
    let t_avg = 5.0 / (6.0 * ch.p1 * ch.p2 * spec.nu);
    finish_2d(ch, t_avg)
}

/// Triangle level, full evaluation: signalling latency, optional two-stage
/// age filter, and the mean completion time taken as the exact negative
/// trace derivative of the image at `s = 0`.
pub fn level_2d_full(spec: &LevelSpec) -> Result<LevelResult> {
    spec.validate()?;
    let ch = chain_2d(spec, 0.0)?;
    if !(ch.p1 > 0.0 && ch.p2 > 0.0) {
        return Err(Error::DegenerateProtocol("merge never succeeds".into()));
    }
    let t_avg = -ch.deriv.trace();
    finish_2d(ch, t_avg)
}

/// Trace of the full triangle image at `s`: the Laplace transform of the
/// level's completion-time density. Requires `s + ν > 0`.
pub fn trace_image_2d(spec: &LevelSpec, s: f64) -> Result<f64> {
    spec.validate()?;
    Ok(chain_2d(spec, s)?.value.trace())
}

#[cfg(test)]
mod tests {
    use super::super::{target_state, Protocol};
    use super::*;
    use crate::elementary::{merge_superops_2d, HardwareParams};
    use crate::liouville::decay::DecayModel;
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

    fn scalar_spec(m1: f64, m2: f64, nu: f64, t_c: f64, t_swap: f64, filter: Filter) -> LevelSpec {
        LevelSpec {
            segments: vec![DensityState::scalar(1.0, 0); 3],
            seg_decay: vec![Decay::none(0); 3],
            nu,
            merge: LevelMerge::Triple { pair: scalar_op(m1), double: scalar_op(m2) },
            t_c,
            t_swap,
            filter,
        }
    }

    /// A small nontrivial 3-memory segment at n_max = 1: a mix of the GHZ
    /// component with an uncorrelated excitation.
    fn mixed_segment(w: f64) -> DensityState {
        let space = ModeSpace::memories(1, &["A", "C", "B"]).unwrap();
        let inv = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let ket = (space.fock_ket(&[1, 1, 0]) + space.fock_ket(&[0, 0, 1])) * inv;
        let mut rho = DensityState::from_pure(space.clone(), &ket).unwrap().scaled(w);
        let stray = DensityState::from_pure(space, &rho.space().fock_ket(&[0, 1, 0])).unwrap();
        rho.add_scaled(&stray, 1.0 - w).unwrap();
        rho
    }

    /// Hardware-derived triangle merges at n_max = 1.
    fn small_merges() -> (SuperOp, SuperOp) {
        let hw = HardwareParams::baseline(10.0, 0.5);
        let m = merge_superops_2d(&hw, 1).unwrap();
        (m.pair, m.double)
    }

    fn mixed_spec(filter: Filter, t_c: f64, t_swap: f64, rate: f64) -> LevelSpec {
        let (pair, double) = small_merges();
        LevelSpec {
            segments: vec![mixed_segment(0.9), mixed_segment(0.8), mixed_segment(0.7)],
            seg_decay: vec![
                Decay::uniform(DecayModel::AmplitudeDamping, rate, 3).unwrap();
                3
            ],
            nu: 4.0,
            merge: LevelMerge::Triple { pair, double },
            t_c,
            t_swap,
            filter,
        }
    }

    #[test]
    fn scalar_printed_mean_time() {
        for &(m1, m2, nu) in &[(1.0, 1.0, 2.0), (0.3, 0.6, 5.0), (0.05, 0.9, 40.0)] {
            let res = level_2d_basic(&scalar_spec(m1, m2, nu, 0.0, 0.0, Filter::Off)).unwrap();
            assert_relative_eq!(res.t_avg, 5.0 / (6.0 * m1 * m2 * nu), max_relative = 1e-12);
            assert_relative_eq!(res.p1.unwrap(), m1, max_relative = 1e-12);
            assert_relative_eq!(res.p2.unwrap(), m2, max_relative = 1e-12);
            assert_relative_eq!(res.rho.trace(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn scalar_exact_mean_time_from_derivative() {
        for &(m1, m2, nu) in &[(1.0, 1.0, 2.0), (0.3, 0.6, 5.0), (0.04, 0.5, 11.0)] {
            let res = level_2d_full(&scalar_spec(m1, m2, nu, 0.0, 0.0, Filter::Off)).unwrap();
            assert_relative_eq!(
                res.t_avg,
                (5.0 + 6.0 * m1) / (6.0 * m1 * m2 * nu),
                max_relative = 1e-12
            );
        }
    }

    /// Whole-s pin of the scalar chain: the image trace must be the cubic
    /// rational with poles fixed by the two success probabilities.
    #[test]
    fn scalar_trace_matches_cubic() {
        let (m1, m2, nu) = (0.35, 0.7, 3.0);
        let spec = scalar_spec(m1, m2, nu, 0.0, 0.0, Filter::Off);
        for &s in &[0.0, 0.1 * nu, nu, 4.2 * nu] {
            let tr = trace_image_2d(&spec, s).unwrap();
            let denom = s.powi(3)
                + 6.0 * s.powi(2) * nu
                + (5.0 + 6.0 * m1) * s * nu * nu
                + 6.0 * m1 * m2 * nu.powi(3);
            assert_relative_eq!(tr, 6.0 * m1 * m2 * nu.powi(3) / denom, max_relative = 1e-12);
        }
    }

    #[test]
    fn scalar_filter_survival_probability() {
        let (nu, tau1, tau2) = (3.0, 0.4, 0.9);
        let spec = scalar_spec(0.5, 0.5, nu, 0.01, 0.0, Filter::TwoStage { tau1, tau2 });
        let res = level_2d_full(&spec).unwrap();
        let expect = (1.0 - (-2.0 * nu * tau1).exp()) * (1.0 - (-nu * tau2).exp());
        assert_relative_eq!(res.p_nofilter, expect, max_relative = 1e-12);
        assert_relative_eq!(res.rho.trace(), 1.0, max_relative = 1e-9);
    }

    #[test]
    fn full_image_trace_is_one_at_zero() {
        for (filter, t_c) in [
            (Filter::Off, 0.0),
            (Filter::Off, 0.02),
            (Filter::TwoStage { tau1: 0.5, tau2: 0.8 }, 0.02),
        ] {
            let spec = mixed_spec(filter, t_c, 0.3 * t_c, 0.7);
            assert_relative_eq!(trace_image_2d(&spec, 0.0).unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    /// The dual-number mean time must match a central finite difference of
    /// the image trace on a dissipative, filtered, latency-bearing spec.
    #[test]
    fn dual_time_matches_finite_difference() {
        for (filter, t_c) in [
            (Filter::Off, 0.03),
            (Filter::TwoStage { tau1: 0.6, tau2: 1.1 }, 0.03),
        ] {
            let spec = mixed_spec(filter, t_c, 0.01, 0.9);
            let res = level_2d_full(&spec).unwrap();
            let h = 1e-6;
            let fd = -(trace_image_2d(&spec, h).unwrap() - trace_image_2d(&spec, -h).unwrap())
                / (2.0 * h);
            assert_relative_eq!(res.t_avg, fd, max_relative = 1e-6);
        }
    }

    /// With zero latency and no filter the full evaluation reduces to the
    /// compact chain: identical state, while the mean times differ by the
    /// documented retry-limit factor.
    #[test]
    fn full_reduces_to_basic_without_latency() {
        let spec = mixed_spec(Filter::Off, 0.0, 0.0, 0.5);
        let basic = level_2d_basic(&spec).unwrap();
        let full = level_2d_full(&spec).unwrap();
        assert_eq!(basic.rho.mat(), full.rho.mat());
        assert_relative_eq!(basic.p1.unwrap(), full.p1.unwrap(), max_relative = 1e-14);
        let p1 = full.p1.unwrap();
        assert_relative_eq!(
            full.t_avg / basic.t_avg,
            (5.0 + 6.0 * p1) / 5.0,
            max_relative = 1e-9
        );
    }

    /// Ideal hardware maps three shared-corner GHZ states to the same GHZ
    /// state one scale up: the recursion's fixed point.
    #[test]
    fn ideal_triangle_preserves_ghz() {
        let mut hw = HardwareParams::baseline(10.0, 1.0);
        hw.f = 0.0;
        hw.d = 0.0;
        hw.v = 0.0;
        hw.eta = 1.0;
        let merges = merge_superops_2d(&hw, 1).unwrap();
        let ghz = target_state(Protocol::TwoD, 1).unwrap();
        let spec = LevelSpec {
            segments: vec![ghz; 3],
            seg_decay: vec![Decay::none(3); 3],
            nu: 1.0,
            merge: LevelMerge::Triple { pair: merges.pair, double: merges.double },
            t_c: 0.0,
            t_swap: 0.0,
            filter: Filter::Off,
        };
        let res = level_2d_full(&spec).unwrap();
        let space = res.rho.space().clone();
        let inv = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let ket = (space.fock_ket(&[1, 1, 0]) + space.fock_ket(&[0, 0, 1])) * inv;
        let fid = res.rho.fidelity_to_pure(&ket);
        assert_relative_eq!(fid, 1.0, epsilon = 1e-9);
        assert!(res.p1.unwrap() > 0.0 && res.p1.unwrap() <= 1.0);
        assert!(res.p2.unwrap() > 0.0 && res.p2.unwrap() <= 1.0);
    }

    /// Tightening the first-stage cutoff must raise output fidelity and
    /// lengthen the mean completion time.
    #[test]
    fn tighter_first_cutoff_trades_time_for_fidelity() {
        let space = ModeSpace::memories(1, &["A", "C", "B"]).unwrap();
        let inv = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let ket = (space.fock_ket(&[1, 1, 0]) + space.fock_ket(&[0, 0, 1])) * inv;
        let loose = mixed_spec(Filter::TwoStage { tau1: 2.0, tau2: 2.0 }, 0.01, 0.001, 1.5);
        let tight = mixed_spec(Filter::TwoStage { tau1: 0.2, tau2: 2.0 }, 0.01, 0.001, 1.5);
        let rl = level_2d_full(&loose).unwrap();
        let rt = level_2d_full(&tight).unwrap();
        let fl = rl.rho.fidelity_to_pure(&ket);
        let ft = rt.rho.fidelity_to_pure(&ket);
        assert!(ft > fl, "tight {ft} vs loose {fl}");
        assert!(rt.t_avg > rl.t_avg);
        assert!(rt.p_nofilter < rl.p_nofilter);
    }

    #[test]
    fn wiring_layout_is_consistent() {
        for k in 0..3 {
            let br = branch_layout(k, false);
            // Each branch consumes six distinct positions across both
            // merges and leaves the three exteriors in canonical order.
            assert_eq!(br.pair_targets.len(), 2);
            assert_eq!(br.double_targets.len(), 4);
            assert_eq!(br.block_modes.len(), 4);
            let mut perm = br.out_perm.clone();
            perm.sort_unstable();
            assert_eq!(perm, [0, 1, 2]);
            assert!(!br.block_modes.iter().any(|&(sg, _)| sg == k));
        }
        // Spot-check the derived positions for the first branch.
        let br = branch_layout(0, false);
        assert_eq!(br.early, (1, 2));
        assert_eq!(br.pair_targets, [1, 3]);
        assert_eq!(br.double_targets, [5, 0, 3, 4]);
        assert_eq!(br.out_perm, [0, 1, 2]);
    }
}
