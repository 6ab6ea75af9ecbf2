//! Elementary-segment preparation and merging operators for the two
//! repeater families.
//!
//! A segment builder runs the physical pipeline of one generation attempt
//! (squeezed-light sources, fiber loss, detection station, memory decay
//! during the classical round trip) and returns the heralded segment state,
//! its per-attempt success probability `q`, and the attempt duration.
//! Merging operators model the read-out-and-swap station that joins two
//! prepared segments; they consume the interior memory modes and weight the
//! result by the swap success probability.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::liouville::{
    annihilation, append_vacuum_superop, apply_on, beamsplitter, channel_exp, compose, cr,
    dissipator, embed_operator, linalg, partial_trace_superop, tensor_states, tensor_superops,
    unitary_conj, DensityState, ModeKind, ModeLabel, ModeSpace, SuperOp, TraceFlag,
};

/// Hardware parameter set shared by both protocol families.
///
/// Lengths are in km, times in seconds, `v_c` in s/km; the remaining
/// fields are dimensionless probabilities or gains.
#[derive(Clone, Debug, PartialEq)]
pub struct HardwareParams {
    /// Elementary segment length (km).
    pub l0: f64,
    /// Fiber attenuation length (km).
    pub l_att: f64,
    /// Detector photon-loss probability.
    pub f: f64,
    /// Dark-count gain per detection window.
    pub d: f64,
    /// Memory read-out inefficiency.
    pub v: f64,
    /// Nonlinear-gate efficiency.
    pub eta: f64,
    /// Memory coherence time (s).
    pub t_coh: f64,
    /// Signal-pulse/detection duration (s).
    pub t_s: f64,
    /// Fiber signal delay per length (s/km).
    pub v_c: f64,
}

impl HardwareParams {
    /// Literature-default hardware with the two swept quantities explicit:
    /// `L_att` = 22 km, `v_c` = 5 μs/km, `f` = 0.05, `d` = 1e-4 per window,
    /// `v` = 0.05, `η` = 0.9, `t_s` = 1e-4 s.
    pub fn baseline(l0: f64, t_coh: f64) -> Self {
        HardwareParams {
            l0,
            l_att: 22.0,
            f: 0.05,
            d: 1e-4,
            v: 0.05,
            eta: 0.9,
            t_coh,
            t_s: 1e-4,
            v_c: 5e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.l0 >= 0.0, "L0 must be ≥ 0"),
            (self.l_att > 0.0, "L_att must be > 0"),
            ((0.0..1.0).contains(&self.f), "f must be in [0,1)"),
            (self.d >= 0.0, "d must be ≥ 0"),
            ((0.0..1.0).contains(&self.v), "v must be in [0,1)"),
            (self.eta > 0.0 && self.eta <= 1.0, "η must be in (0,1]"),
            (self.t_coh > 0.0, "T_coh must be > 0"),
            (self.t_s >= 0.0, "t_s must be ≥ 0"),
            (self.v_c >= 0.0, "v_c must be ≥ 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(format!("HardwareParams: {msg}")));
            }
        }
        for (name, x) in [
            ("L0", self.l0),
            ("L_att", self.l_att),
            ("f", self.f),
            ("d", self.d),
            ("v", self.v),
            ("eta", self.eta),
            ("T_coh", self.t_coh),
            ("t_s", self.t_s),
            ("v_c", self.v_c),
        ] {
            if !x.is_finite() {
                return Err(Error::invalid(format!("HardwareParams: {name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Output of a segment builder.
#[derive(Clone, Debug)]
pub struct SegmentResult {
    /// Heralded segment state, normalized, memory modes only.
    pub rho_e: DensityState,
    /// Per-attempt success probability (trace before normalization).
    pub q: f64,
    /// Duration of one generation attempt (s).
    pub dt: f64,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) || !eps.is_finite() {
        return Err(Error::invalid("squeezing amplitude must be in [0,1)"));
    }
    Ok(())
}

/// Two-mode squeezed vacuum, truncated and renormalized:
/// |Ψ(ε)⟩ ∝ Σ_{n≤n_max} εⁿ |n⟩_mem |n⟩_ph.
pub fn two_mode_squeezed(
    eps: f64,
    n_max: usize,
    mem_name: &str,
    ph_name: &str,
) -> Result<DensityState> {
    check_eps(eps)?;
    let space = ModeSpace::new(
        n_max,
        vec![ModeLabel::memory(mem_name), ModeLabel::photonic(ph_name)],
    )?;
    let mut ket = ndarray::Array1::zeros(space.dim());
    let mut norm2 = 0.0;
    for n in 0..=n_max {
        let amp = eps.powi(n as i32);
        ket[space.basis_index(&[n, n])] = cr(amp);
        norm2 += amp * amp;
    }
    let ket = ket.mapv(|z| z / cr(norm2.sqrt()));
    DensityState::from_pure(space, &ket)
}

/// Single-mode photon-loss channel `exp{g 𝓓[a]}` with the given mode kind.
pub fn loss_channel(n_max: usize, g: f64, kind: ModeKind) -> Result<SuperOp> {
    if g < 0.0 || !g.is_finite() {
        return Err(Error::invalid("loss_channel: gain must be finite and ≥ 0"));
    }
    let space = ModeSpace::new(n_max, vec![ModeLabel { name: "m".into(), kind }])?;
    let gen = dissipator(&space, &annihilation(n_max)?)?;
    channel_exp(&gen, g)
}

/// Single-mode dark-count channel `exp{d(𝓓[a] + 𝓓[a†])}`.
///
/// `a†` is the plain truncated matrix, so the topmost Fock level absorbs
/// upward jumps; this is the documented truncation convention.
pub fn dark_count_channel(n_max: usize, d: f64) -> Result<SuperOp> {
    if d < 0.0 || !d.is_finite() {
        return Err(Error::invalid("dark_count_channel: gain must be finite and ≥ 0"));
    }
    let space = ModeSpace::new(n_max, vec![ModeLabel::photonic("m")])?;
    let a = annihilation(n_max)?;
    let down = dissipator(&space, &a)?;
    let up = dissipator(&space, &linalg::dagger(&a))?;
    let sum = SuperOp::new(
        space.clone(),
        space,
        down.mat() + up.mat(),
        TraceFlag::General,
    )?;
    channel_exp(&sum, d)
}

/// Apply a single-mode loss channel to one mode of a state.
fn lose(rho: &DensityState, position: usize, g: f64) -> Result<DensityState> {
    if g == 0.0 {
        return Ok(rho.clone());
    }
    let kind = rho.space().labels()[position].kind;
    let ch = loss_channel(rho.space().n_max(), g, kind)?;
    apply_on(&ch, rho, &[position])
}

/// Heralded single-photon swap station on two photonic modes.
///
/// Composition: balanced beamsplitter, per-mode imperfect detection
/// (loss `f`, dark counts `d`), then projection onto the single-click
/// pattern. The factor 2 counts both detector outcomes; the compensating
/// phase flip that equalizes their states is part of this convention. The
/// output is a zero-mode weight: the trace of the image is the success
/// probability.
pub fn swap_station(f: f64, d: f64, n_max: usize) -> Result<SuperOp> {
    if !(0.0..1.0).contains(&f) || f.is_nan() {
        return Err(Error::invalid("swap_station: f must be in [0,1)"));
    }
    let space = ModeSpace::new(
        n_max,
        vec![ModeLabel::photonic("i"), ModeLabel::photonic("j")],
    )?;
    let bs = beamsplitter(&space, 0, 1)?;
    let det_single = compose(&dark_count_channel(n_max, d)?, &loss_channel(n_max, -(1.0 - f).ln(), ModeKind::Photonic)?)?;
    let dets = tensor_superops(&det_single, &det_single)?;
    let full = compose(&dets, &bs)?;
    // 2·⟨1_i 0_j| X |1_i 0_j⟩: one row of the two-mode map, doubled.
    let d_dim = space.dim();
    let idx = space.basis_index(&[1, 0]);
    let row_idx = idx * d_dim + idx;
    let mut mat = Array2::zeros((1, d_dim * d_dim));
    for col in 0..d_dim * d_dim {
        mat[[0, col]] = full.mat()[[row_idx, col]] * cr(2.0);
    }
    SuperOp::new(space, ModeSpace::scalar(n_max), mat, TraceFlag::NonIncreasing)
}

/// One generation attempt of the two-node segment: squeezed sources at
/// both nodes, fiber loss over each half-span, the swap station, and
/// memory decay over the classical round trip.
///
/// Returns the normalized two-memory state (A, B), the per-attempt
/// success probability, and the attempt duration `v_c·L0 + t_s`.
pub fn build_segment_1d(p: &HardwareParams, eps: f64, n_max: usize) -> Result<SegmentResult> {
    p.validate()?;
    check_eps(eps)?;
    let dt = p.v_c * p.l0 + p.t_s;
    let g_mem = dt / p.t_coh;
    let g_fiber = p.l0 / (2.0 * p.l_att);

    let mut arm_a = two_mode_squeezed(eps, n_max, "A", "a")?;
    arm_a = lose(&arm_a, 0, g_mem)?;
    arm_a = lose(&arm_a, 1, g_fiber)?;
    let mut arm_b = two_mode_squeezed(eps, n_max, "B", "b")?;
    arm_b = lose(&arm_b, 0, g_mem)?;
    arm_b = lose(&arm_b, 1, g_fiber)?;

    let joint = tensor_states(&arm_a, &arm_b)?; // (A, a, B, b)
    let ms = swap_station(p.f, p.d, n_max)?;
    let heralded = apply_on(&ms, &joint, &[1, 3])?; // (A, B)

    let q = heralded.trace();
    if q <= 0.0 || q >= 1.0 {
        return Err(Error::DegenerateProtocol(format!(
            "segment herald probability q = {q:.3e} outside (0,1)"
        )));
    }
    Ok(SegmentResult { rho_e: heralded.normalized()?, q, dt })
}

/// Merging operator for two prepared segments: memory read-out with
/// inefficiency `v` into photonic modes, then the swap station. Consumes
/// two memory modes; the image weight is the merge success probability.
pub fn merge_superop_1d(p: &HardwareParams, n_max: usize) -> Result<SuperOp> {
    p.validate()?;
    let readout = loss_channel(n_max, -(1.0 - p.v).ln(), ModeKind::Photonic)?;
    let readouts = tensor_superops(&readout, &readout)?;
    let ms = swap_station(p.f, p.d, n_max)?;
    let on_photons = compose(&ms, &readouts)?;
    // The station physically acts on read-out photons; as a protocol step
    // it consumes the two interior memory modes directly.
    let mem_in = ModeSpace::new(
        n_max,
        vec![ModeLabel::memory("i"), ModeLabel::memory("j")],
    )?;
    on_photons.with_spaces(mem_in, ModeSpace::scalar(n_max))
}

/// Photon-to-memory transfer gate of the three-node segment: consumes a
/// photonic in-mode, emits (memory C, photonic c).
///
/// The ideal action is |1_a 0_C 0_c⟩ → |0_a 1_C 1_c⟩ via
/// U = exp[(π/2)(aC†c† − h.c.)]; inefficiency is photon loss with survival
/// probability `η` before the unitary; the in-mode is traced out.
pub fn nonlinear_gate(eta: f64, n_max: usize) -> Result<SuperOp> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid("nonlinear_gate: η must be in (0,1]"));
    }
    let in_space = ModeSpace::new(n_max, vec![ModeLabel::photonic("a")])?;
    let added = ModeSpace::new(
        n_max,
        vec![ModeLabel::memory("C"), ModeLabel::photonic("c")],
    )?;
    let joint = in_space.concat(&added)?;

    let append = append_vacuum_superop(&in_space, &added)?;
    let loss_a = crate::liouville::embed_superop(
        &loss_channel(n_max, -eta.ln(), ModeKind::Photonic)?,
        &joint,
        &[0],
    )?;
    // generator (π/2)(a C† c† − h.c.) on (a, C, c)
    let a_op = annihilation(n_max)?;
    let a_full = embed_operator(&joint, &a_op, 0)?;
    let cd_full = linalg::dagger(&embed_operator(&joint, &a_op, 1)?);
    let cd_ph = linalg::dagger(&embed_operator(&joint, &a_op, 2)?);
    let raise = a_full.dot(&cd_full).dot(&cd_ph);
    let k = (&raise - &linalg::dagger(&raise)).mapv(|z| z * cr(std::f64::consts::FRAC_PI_2));
    let u = linalg::expm(&k);
    let gate = unitary_conj(&joint, &u)?;
    let drop_a = partial_trace_superop(&joint, &[0])?;

    compose(&drop_a, &compose(&gate, &compose(&loss_a, &append)?)?)
}

/// One generation attempt of the three-node segment: squeezed sources at
/// the two far nodes, fiber loss, the transfer gate at the corner node,
/// the swap station on the gate output and the second arm, and memory
/// decay over the respective waiting times.
///
/// Returns the normalized three-memory state in order (A, C, B), the
/// per-attempt success probability, and the duration `2·v_c·L0 + t_s`.
pub fn build_segment_2d(
    p: &HardwareParams,
    eps_a: f64,
    eps_b: f64,
    n_max: usize,
) -> Result<SegmentResult> {
    p.validate()?;
    check_eps(eps_a)?;
    check_eps(eps_b)?;
    let dt = 2.0 * p.v_c * p.l0 + p.t_s;
    let t_c_wait = p.v_c * p.l0 + p.t_s;
    let g_mem = dt / p.t_coh;
    let g_fiber = p.l0 / (2.0 * p.l_att);

    let mut arm_a = two_mode_squeezed(eps_a, n_max, "A", "a")?;
    arm_a = lose(&arm_a, 0, g_mem)?;
    arm_a = lose(&arm_a, 1, g_fiber)?;
    let mut arm_b = two_mode_squeezed(eps_b, n_max, "B", "b")?;
    arm_b = lose(&arm_b, 0, g_mem)?;
    arm_b = lose(&arm_b, 1, g_fiber)?;

    let joint = tensor_states(&arm_a, &arm_b)?; // (A, a, B, b)
    let gate = nonlinear_gate(p.eta, n_max)?;
    let after_gate = apply_on(&gate, &joint, &[1])?; // (A, B, b, C, c)
    let after_decay_c = lose(&after_gate, 3, t_c_wait / p.t_coh)?;
    let ms = swap_station(p.f, p.d, n_max)?;
    let heralded = apply_on(&ms, &after_decay_c, &[4, 2])?; // modes (c, b) → (A, B, C)

    let q = heralded.trace();
    if q <= 0.0 || q >= 1.0 {
        return Err(Error::DegenerateProtocol(format!(
            "segment herald probability q = {q:.3e} outside (0,1)"
        )));
    }
    let ordered = heralded.reorder_modes(&[0, 2, 1])?; // (A, C, B)
    Ok(SegmentResult { rho_e: ordered.normalized()?, q, dt })
}

/// Merge operators for joining three prepared triangle segments.
///
/// `pair` joins two segments at their shared corner (identical to the
/// two-node merge). `double` attaches the remaining segment through its
/// two corners: the tensor product of two disjoint pair merges, consuming
/// four memory modes.
#[derive(Clone, Debug)]
pub struct Merge2d {
    pub pair: SuperOp,
    pub double: SuperOp,
}

pub fn merge_superops_2d(p: &HardwareParams, n_max: usize) -> Result<Merge2d> {
    let pair = merge_superop_1d(p, n_max)?;
    let double = tensor_superops(&pair.with_spaces(
        ModeSpace::memories(n_max, &["i1", "j1"])?,
        ModeSpace::scalar(n_max),
    )?, &pair.with_spaces(
        ModeSpace::memories(n_max, &["i2", "j2"])?,
        ModeSpace::scalar(n_max),
    )?)?;
    Ok(Merge2d { pair, double })
}

/// Triangle-network wiring: which memory of which segment joins which.
///
/// Segment memories are ordered (A, C, B) = positions (0, 1, 2). Edge `e`
/// joins `WIRE_EDGES[e].0 = (segment, mode)` with `WIRE_EDGES[e].1`.
/// For a chosen "attached-last" segment k, the edge joining the other two
/// segments is `WIRE_EDGES[(k+1) % 3]` and the remaining two edges attach
/// segment k. The exterior (output) memories, in the mode order produced
/// by the join, take the roles (A, C, B) of the next-level segment; this
/// wiring reproduces the same target state at every level.
pub const WIRE_EDGES: [((usize, usize), (usize, usize)); 3] = [
    ((0, 1), (1, 0)), // segment 0 corner C ↔ segment 1 corner A
    ((1, 1), (2, 0)), // segment 1 corner C ↔ segment 2 corner A
    ((2, 2), (0, 0)), // segment 2 corner B ↔ segment 0 corner A
];

/// Edge index handled by the pairwise merge when segment k is attached last.
pub fn wire_joining_edge(k: usize) -> usize {
    (k + 1) % 3
}
