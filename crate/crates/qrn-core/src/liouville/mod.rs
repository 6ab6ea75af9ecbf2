//! Truncated-Fock operator and superoperator algebra.
//!
//! States are density matrices over an ordered tensor product of bosonic
//! modes, each truncated at occupation `n_max`. Superoperators are linear
//! maps between vectorized density matrices; input and output mode sets may
//! differ (detection and merging consume modes, gates may emit new ones).
//!
//! Conventions shared by every module in this crate:
//!
//! - **Vectorization** is column-stacking: `vec(ρ)[c·d + r] = ρ[r, c]`, so
//!   the matrix of `ρ ↦ AρB†` is `conj(B) ⊗ A` and the matrix of
//!   `ρ ↦ AρB` is `Bᵀ ⊗ A`.
//! - **Mode order**: mode 0 is the most significant digit of a basis index.
//!   A basis ket of a 3-mode space with occupations (n₀,n₁,n₂) has index
//!   `(n₀·B + n₁)·B + n₂` with `B = n_max+1`.
//! - **Zero-mode ("scalar") spaces** are legal; their states are 1×1
//!   matrices. They model protocol branches whose completion statistics
//!   matter but whose quantum state does not.
//! - After every superoperator application the result is re-symmetrized,
//!   `ρ ← (ρ+ρ†)/2`, to suppress accumulated floating-point asymmetry.

pub mod decay;
pub(crate) mod linalg;

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

pub(crate) fn cr(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Physical role of a mode. Memories persist between protocol steps;
/// photonic modes exist only inside a detection pipeline.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ModeKind {
    Memory,
    Photonic,
}

/// A single bosonic mode: unique name plus physical role.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ModeLabel {
    pub name: String,
    pub kind: ModeKind,
}

impl ModeLabel {
    pub fn memory(name: impl Into<String>) -> Self {
        ModeLabel { name: name.into(), kind: ModeKind::Memory }
    }

    pub fn photonic(name: impl Into<String>) -> Self {
        ModeLabel { name: name.into(), kind: ModeKind::Photonic }
    }
}

/// Ordered list of modes with a common Fock truncation.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ModeSpace {
    n_max: usize,
    labels: Vec<ModeLabel>,
}

impl ModeSpace {
    /// A space over the given modes. Mode names must be unique.
    pub fn new(n_max: usize, labels: Vec<ModeLabel>) -> Result<Self> {
        if n_max < 1 {
            return Err(Error::invalid("ModeSpace: n_max must be ≥ 1"));
        }
        for (i, a) in labels.iter().enumerate() {
            for b in labels.iter().skip(i + 1) {
                if a.name == b.name {
                    return Err(Error::invalid(format!(
                        "ModeSpace: duplicate mode name '{}'",
                        a.name
                    )));
                }
            }
        }
        Ok(ModeSpace { n_max, labels })
    }

    /// Zero-mode space (Hilbert dimension 1).
    pub fn scalar(n_max: usize) -> Self {
        ModeSpace { n_max: n_max.max(1), labels: vec![] }
    }

    /// All-memory space with the given mode names.
    pub fn memories(n_max: usize, names: &[&str]) -> Result<Self> {
        ModeSpace::new(n_max, names.iter().map(|n| ModeLabel::memory(*n)).collect())
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Per-mode Fock dimension `n_max + 1`.
    pub fn fock_dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn mode_count(&self) -> usize {
        self.labels.len()
    }

    /// Total Hilbert dimension `(n_max+1)^mode_count`.
    pub fn dim(&self) -> usize {
        self.fock_dim().pow(self.mode_count() as u32)
    }

    pub fn labels(&self) -> &[ModeLabel] {
        &self.labels
    }

    /// Position of the mode with the given name.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    /// Basis index of a Fock occupation pattern (mode 0 most significant).
    pub fn basis_index(&self, occupations: &[usize]) -> usize {
        assert_eq!(occupations.len(), self.mode_count(), "occupation count");
        let b = self.fock_dim();
        occupations.iter().fold(0usize, |acc, &n| {
            assert!(n <= self.n_max, "occupation exceeds n_max");
            acc * b + n
        })
    }

    /// Unit ket with the given occupations.
    pub fn fock_ket(&self, occupations: &[usize]) -> Array1<C64> {
        let mut v = Array1::zeros(self.dim());
        v[self.basis_index(occupations)] = ONE;
        v
    }

    /// Occupation pattern of a basis index.
    pub fn occupations(&self, index: usize) -> Vec<usize> {
        let b = self.fock_dim();
        let m = self.mode_count();
        let mut out = vec![0usize; m];
        let mut rest = index;
        for k in (0..m).rev() {
            out[k] = rest % b;
            rest /= b;
        }
        out
    }

    /// Sub-space made of the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> ModeSpace {
        ModeSpace {
            n_max: self.n_max,
            labels: positions.iter().map(|&p| self.labels[p].clone()).collect(),
        }
    }

    /// Space with the given positions removed.
    pub fn without(&self, positions: &[usize]) -> ModeSpace {
        ModeSpace {
            n_max: self.n_max,
            labels: self
                .labels
                .iter()
                .enumerate()
                .filter(|(i, _)| !positions.contains(i))
                .map(|(_, l)| l.clone())
                .collect(),
        }
    }

    /// Concatenation `self ++ other`; mode names must stay unique.
    pub fn concat(&self, other: &ModeSpace) -> Result<ModeSpace> {
        if self.n_max != other.n_max {
            return Err(Error::invalid("concat: truncation mismatch"));
        }
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        ModeSpace::new(self.n_max, labels)
    }

    /// Same space with every mode name prefixed (for joining copies).
    pub fn prefixed(&self, prefix: &str) -> ModeSpace {
        ModeSpace {
            n_max: self.n_max,
            labels: self
                .labels
                .iter()
                .map(|l| ModeLabel { name: format!("{prefix}{}", l.name), kind: l.kind })
                .collect(),
        }
    }

    /// True when two spaces agree in truncation, arity and mode kinds
    /// (names may differ).
    pub fn compatible(&self, other: &ModeSpace) -> bool {
        self.n_max == other.n_max
            && self.mode_count() == other.mode_count()
            && self
                .labels
                .iter()
                .zip(other.labels.iter())
                .all(|(a, b)| a.kind == b.kind)
    }
}

/// Density matrix (possibly unnormalized) over a [`ModeSpace`].
#[derive(Clone, Debug)]
pub struct DensityState {
    space: ModeSpace,
    mat: Array2<C64>,
}

impl DensityState {
    /// Wrap a matrix; only the dimension is checked. Use
    /// [`DensityState::validate_physical`] for the Hermiticity/positivity
    /// invariants where they are expected to hold.
    pub fn new(space: ModeSpace, mat: Array2<C64>) -> Result<Self> {
        let d = space.dim();
        if mat.dim() != (d, d) {
            return Err(Error::invalid(format!(
                "DensityState: matrix is {:?}, space needs ({d},{d})",
                mat.dim()
            )));
        }
        Ok(DensityState { space, mat })
    }

    /// Pure state |ψ⟩⟨ψ| from a ket (not normalized here).
    pub fn from_pure(space: ModeSpace, ket: &Array1<C64>) -> Result<Self> {
        let d = space.dim();
        if ket.len() != d {
            return Err(Error::invalid("from_pure: ket length mismatch"));
        }
        let mut mat = Array2::zeros((d, d));
        for r in 0..d {
            for c in 0..d {
                mat[[r, c]] = ket[r] * ket[c].conj();
            }
        }
        Ok(DensityState { space, mat })
    }

    /// Vacuum state |0…0⟩⟨0…0|.
    pub fn vacuum(space: ModeSpace) -> Self {
        let d = space.dim();
        let mut mat = Array2::zeros((d, d));
        mat[[0, 0]] = ONE;
        DensityState { space, mat }
    }

    /// Zero-mode state carrying a bare weight.
    pub fn scalar(weight: f64, n_max: usize) -> Self {
        let mut mat = Array2::zeros((1, 1));
        mat[[0, 0]] = cr(weight);
        DensityState { space: ModeSpace::scalar(n_max), mat }
    }

    pub fn space(&self) -> &ModeSpace {
        &self.space
    }

    pub fn mat(&self) -> &Array2<C64> {
        &self.mat
    }

    pub fn trace(&self) -> f64 {
        (0..self.space.dim()).map(|i| self.mat[[i, i]].re).sum()
    }

    pub fn scaled(&self, f: f64) -> Self {
        DensityState { space: self.space.clone(), mat: self.mat.mapv(|z| z * cr(f)) }
    }

    /// `self + f·other` (same space required).
    pub fn add_scaled(&mut self, other: &DensityState, f: f64) -> Result<()> {
        if !self.space.compatible(&other.space) {
            return Err(Error::invalid("add_scaled: space mismatch"));
        }
        self.mat = &self.mat + &other.mat.mapv(|z| z * cr(f));
        Ok(())
    }

    /// Normalized copy; fails on (near-)zero trace.
    pub fn normalized(&self) -> Result<Self> {
        let t = self.trace();
        if t.abs() < 1e-300 {
            return Err(Error::DegenerateProtocol("normalizing a zero-trace state".into()));
        }
        Ok(self.scaled(1.0 / t))
    }

    /// Re-symmetrize `ρ ← (ρ+ρ†)/2`.
    pub fn hermitize(&mut self) {
        let dag = linalg::dagger(&self.mat);
        self.mat = (&self.mat + &dag).mapv(|z| z * cr(0.5));
    }

    /// Check the physical-state invariants: Hermitian within 1e-10,
    /// eigenvalues ≥ −1e-9, and 0 ≤ trace ≤ 1 + 1e-10.
    pub fn validate_physical(&self) -> Result<()> {
        let herm = linalg::max_abs(&(&self.mat - &linalg::dagger(&self.mat)));
        if herm > 1e-10 {
            return Err(Error::Numeric { what: "state is not Hermitian".into(), residual: herm });
        }
        let t = self.trace();
        if !(-1e-10..=1.0 + 1e-10).contains(&t) {
            return Err(Error::Numeric { what: "state trace out of range".into(), residual: t });
        }
        let min = linalg::eigh_values(&self.mat).first().copied().unwrap_or(0.0);
        if min < -1e-9 {
            return Err(Error::Numeric { what: "state is not PSD".into(), residual: min });
        }
        Ok(())
    }

    /// ⟨ψ|ρ|ψ⟩ for a pure target (real part; imaginary part is rounding).
    pub fn fidelity_to_pure(&self, ket: &Array1<C64>) -> f64 {
        let d = self.space.dim();
        assert_eq!(ket.len(), d, "fidelity_to_pure: ket length");
        let mut acc = ZERO;
        for r in 0..d {
            for c in 0..d {
                acc += ket[r].conj() * self.mat[[r, c]] * ket[c];
            }
        }
        acc.re
    }

    /// Re Tr(σρ). For a pure reference σ = |ψ⟩⟨ψ| this is the fidelity
    /// ⟨ψ|ρ|ψ⟩ without extracting the ket.
    pub fn overlap(&self, rho: &DensityState) -> f64 {
        let d = self.space.dim();
        assert_eq!(rho.space.dim(), d, "overlap: dimension mismatch");
        let mut f = 0.0;
        for r in 0..d {
            for c in 0..d {
                f += (self.mat[[c, r]] * rho.mat[[r, c]]).re;
            }
        }
        f
    }

    /// Reorder modes: new mode `k` is old mode `perm[k]`.
    pub fn reorder_modes(&self, perm: &[usize]) -> Result<Self> {
        let m = self.space.mode_count();
        if perm.len() != m || {
            let mut seen = vec![false; m];
            perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::invalid("reorder_modes: not a permutation"));
        }
        let d = self.space.dim();
        let b = self.space.fock_dim();
        // nidx[old index] = new index
        let mut nidx = vec![0usize; d];
        for idx in 0..d {
            let occ = self.space.occupations(idx);
            let mut acc = 0usize;
            for &p in perm {
                acc = acc * b + occ[p];
            }
            nidx[idx] = acc;
        }
        let mut mat = Array2::zeros((d, d));
        for r in 0..d {
            for c in 0..d {
                mat[[nidx[r], nidx[c]]] = self.mat[[r, c]];
            }
        }
        let labels = perm.iter().map(|&p| self.space.labels[p].clone()).collect();
        Ok(DensityState { space: ModeSpace { n_max: self.space.n_max, labels }, mat })
    }

    /// Copy with prefixed mode names.
    pub fn prefixed(&self, prefix: &str) -> Self {
        DensityState { space: self.space.prefixed(prefix), mat: self.mat.clone() }
    }

    /// Column-stacked vector `vec(ρ)[c·d+r] = ρ[r,c]`.
    pub fn to_vec(&self) -> Array1<C64> {
        let d = self.space.dim();
        let mut v = Array1::zeros(d * d);
        for c in 0..d {
            for r in 0..d {
                v[c * d + r] = self.mat[[r, c]];
            }
        }
        v
    }

    /// Inverse of [`DensityState::to_vec`].
    pub fn from_vec(space: ModeSpace, v: &Array1<C64>) -> Result<Self> {
        let d = space.dim();
        if v.len() != d * d {
            return Err(Error::invalid("from_vec: length mismatch"));
        }
        let mut mat = Array2::zeros((d, d));
        for c in 0..d {
            for r in 0..d {
                mat[[r, c]] = v[c * d + r];
            }
        }
        Ok(DensityState { space, mat })
    }
}

/// Trace behavior of a superoperator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TraceFlag {
    /// Tr(Sρ) = Tr(ρ) for every ρ.
    Preserving,
    /// Tr(Sρ) ≤ Tr(ρ) for every PSD ρ.
    NonIncreasing,
    /// No trace guarantee (e.g. Lindblad generators, which annihilate trace).
    General,
}

/// Linear map between vectorized density matrices.
///
/// The matrix has shape `(dim_out², dim_in²)` in the column-stacking
/// convention; `input` and `output` describe the consumed and produced
/// mode sets.
#[derive(Clone, Debug)]
pub struct SuperOp {
    input: ModeSpace,
    output: ModeSpace,
    mat: Array2<C64>,
    trace_flag: TraceFlag,
}

impl SuperOp {
    pub fn new(
        input: ModeSpace,
        output: ModeSpace,
        mat: Array2<C64>,
        trace_flag: TraceFlag,
    ) -> Result<Self> {
        let di = input.dim();
        let dout = output.dim();
        if mat.dim() != (dout * dout, di * di) {
            return Err(Error::invalid(format!(
                "SuperOp: matrix is {:?}, spaces need ({},{})",
                mat.dim(),
                dout * dout,
                di * di
            )));
        }
        if input.n_max() != output.n_max() {
            return Err(Error::invalid("SuperOp: truncation mismatch"));
        }
        Ok(SuperOp { input, output, mat, trace_flag })
    }

    /// Identity map on a space.
    pub fn identity(space: &ModeSpace) -> Self {
        let d2 = space.dim() * space.dim();
        SuperOp {
            input: space.clone(),
            output: space.clone(),
            mat: linalg::identity(d2),
            trace_flag: TraceFlag::Preserving,
        }
    }

    pub fn input(&self) -> &ModeSpace {
        &self.input
    }

    pub fn output(&self) -> &ModeSpace {
        &self.output
    }

    pub fn mat(&self) -> &Array2<C64> {
        &self.mat
    }

    pub fn trace_flag(&self) -> TraceFlag {
        self.trace_flag
    }

    pub fn scaled(&self, f: f64) -> Self {
        SuperOp {
            input: self.input.clone(),
            output: self.output.clone(),
            mat: self.mat.mapv(|z| z * cr(f)),
            trace_flag: if f == 1.0 { self.trace_flag } else { TraceFlag::General },
        }
    }

    /// Rebind the input/output spaces (dimensions must match). Used when a
    /// map built on photonic scratch modes acts on memory modes: the matrix
    /// is unchanged, only the labeling differs.
    pub fn with_spaces(&self, input: ModeSpace, output: ModeSpace) -> Result<Self> {
        if input.dim() != self.input.dim() || output.dim() != self.output.dim() {
            return Err(Error::invalid("with_spaces: dimension mismatch"));
        }
        SuperOp::new(input, output, self.mat.clone(), self.trace_flag)
    }

    /// Row functional `x ↦ Tr(S·x)` over input pair indices.
    pub fn trace_row(&self) -> Array1<C64> {
        let dout = self.output.dim();
        let din2 = self.mat.ncols();
        let mut row = Array1::zeros(din2);
        for j in 0..din2 {
            let mut acc = ZERO;
            for c in 0..dout {
                acc += self.mat[[c * dout + c, j]];
            }
            row[j] = acc;
        }
        row
    }

    /// Numerical check of trace preservation: ‖1ᵀS − 1ᵀ‖∞ with 1ᵀ the
    /// trace functional (requires input and output arity to match it).
    pub fn trace_defect(&self) -> f64 {
        let din = self.input.dim();
        let row = self.trace_row();
        let mut worst = 0.0f64;
        for c in 0..din {
            for r in 0..din {
                let want = if r == c { ONE } else { ZERO };
                worst = worst.max((row[c * din + r] - want).norm());
            }
        }
        worst
    }
}

/// Internal index bookkeeping for splitting a space into target and
/// spectator modes. `t_of/u_of` decompose a basis index; `full_of`
/// recomposes `(t, u)` into a full index.
struct SplitIndex {
    dt: usize,
    du: usize,
    t_of: Vec<usize>,
    u_of: Vec<usize>,
    full_of: Vec<usize>,
}

impl SplitIndex {
    fn new(space: &ModeSpace, targets: &[usize]) -> SplitIndex {
        let m = space.mode_count();
        let b = space.fock_dim();
        let d = space.dim();
        let others: Vec<usize> = (0..m).filter(|k| !targets.contains(k)).collect();
        let dt = b.pow(targets.len() as u32);
        let du = b.pow(others.len() as u32);
        let mut t_of = vec![0usize; d];
        let mut u_of = vec![0usize; d];
        let mut full_of = vec![0usize; dt * du];
        for idx in 0..d {
            let occ = space.occupations(idx);
            let mut t = 0usize;
            for &k in targets {
                t = t * b + occ[k];
            }
            let mut u = 0usize;
            for &k in &others {
                u = u * b + occ[k];
            }
            t_of[idx] = t;
            u_of[idx] = u;
            full_of[t * du + u] = idx;
        }
        SplitIndex { dt, du, t_of, u_of, full_of }
    }
}

fn check_targets(space: &ModeSpace, targets: &[usize], expect_kinds: Option<&ModeSpace>) -> Result<()> {
    let m = space.mode_count();
    let mut seen = vec![false; m];
    for &t in targets {
        if t >= m {
            return Err(Error::invalid(format!("target mode {t} out of range (0..{m})")));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::invalid(format!("target mode {t} repeated")));
        }
    }
    if let Some(inp) = expect_kinds {
        if inp.mode_count() != targets.len() {
            return Err(Error::invalid(format!(
                "superoperator consumes {} modes, {} targets given",
                inp.mode_count(),
                targets.len()
            )));
        }
        if inp.n_max() != space.n_max() {
            return Err(Error::invalid("truncation mismatch between map and state"));
        }
        for (k, &t) in targets.iter().enumerate() {
            if inp.labels()[k].kind != space.labels()[t].kind {
                return Err(Error::invalid(format!(
                    "mode kind mismatch at target {t} (map input {k})"
                )));
            }
        }
    }
    Ok(())
}

/// Apply a superoperator to the `targets` modes of a state.
///
/// `targets[k]` is the state position consumed by input mode `k` of the
/// map, so the order of `targets` matters. Output-mode placement:
/// if the map emits as many modes as it consumes they replace the targets
/// in place; otherwise the surviving spectator modes keep their original
/// order and the emitted modes are appended at the end.
pub fn apply_on(s: &SuperOp, rho: &DensityState, targets: &[usize]) -> Result<DensityState> {
    check_targets(&rho.space, targets, Some(&s.input))?;
    let split = SplitIndex::new(&rho.space, targets);
    let (dt, du) = (split.dt, split.du);
    let d = rho.space.dim();
    let dout = s.output.dim();

    // Gather ρ into V[(c_t,r_t),(c_u,r_u)] = ρ[r,c].
    let mut v = Array2::zeros((dt * dt, du * du));
    for c in 0..d {
        let (tc, uc) = (split.t_of[c], split.u_of[c]);
        for r in 0..d {
            v[[tc * dt + split.t_of[r], uc * du + split.u_of[r]]] = rho.mat[[r, c]];
        }
    }
    let w = s.mat.dot(&v); // (dout², du²)

    let in_place = s.output.mode_count() == targets.len();
    let mut out = if in_place {
        // Emitted modes replace the targets; same total space.
        let mut mat = Array2::zeros((d, d));
        for co in 0..dout {
            for cu in 0..du {
                let cf = split.full_of[co * du + cu];
                for ro in 0..dout {
                    for ru in 0..du {
                        let rf = split.full_of[ro * du + ru];
                        mat[[rf, cf]] = w[[co * dout + ro, cu * du + ru]];
                    }
                }
            }
        }
        DensityState { space: rho.space.clone(), mat }
    } else {
        // Spectators first (original order), then emitted modes.
        let out_space = concat_renaming(&rho.space.without(targets), &s.output)?;
        let dfull = out_space.dim();
        debug_assert_eq!(dfull, du * dout);
        let mut mat = Array2::zeros((dfull, dfull));
        for cu in 0..du {
            for co in 0..dout {
                let cf = cu * dout + co;
                for ru in 0..du {
                    for ro in 0..dout {
                        mat[[ru * dout + ro, cf]] = w[[co * dout + ro, cu * du + ru]];
                    }
                }
            }
        }
        DensityState { space: out_space, mat }
    };
    out.hermitize();
    Ok(out)
}

/// Apply a superoperator to the whole state.
pub fn apply(s: &SuperOp, rho: &DensityState) -> Result<DensityState> {
    let targets: Vec<usize> = (0..rho.space.mode_count()).collect();
    apply_on(s, rho, &targets)
}

/// Materialize `apply_on(s, ·, targets)` as a superoperator on `space`.
pub fn embed_superop(s: &SuperOp, space: &ModeSpace, targets: &[usize]) -> Result<SuperOp> {
    check_targets(space, targets, Some(&s.input))?;
    let split = SplitIndex::new(space, targets);
    let (dt, du) = (split.dt, split.du);
    let d = space.dim();
    let dout = s.output.dim();
    let in_place = s.output.mode_count() == targets.len();

    let out_space = if in_place {
        space.clone()
    } else {
        concat_renaming(&space.without(targets), &s.output)?
    };
    let dfull = out_space.dim();
    let mut mat = Array2::zeros((dfull * dfull, d * d));
    for c in 0..d {
        let (tc, uc) = (split.t_of[c], split.u_of[c]);
        for r in 0..d {
            let (tr, ur) = (split.t_of[r], split.u_of[r]);
            let col = c * d + r;
            for co in 0..dout {
                for ro in 0..dout {
                    let val = s.mat[[co * dout + ro, tc * dt + tr]];
                    if val == ZERO {
                        continue;
                    }
                    let (cf, rf) = if in_place {
                        (split.full_of[co * du + uc], split.full_of[ro * du + ur])
                    } else {
                        (uc * dout + co, ur * dout + ro)
                    };
                    mat[[cf * dfull + rf, col]] = val;
                }
            }
        }
    }
    SuperOp::new(space.clone(), out_space, mat, s.trace_flag)
}

/// Compose `s2 ∘ s1` (the output space of `s1` feeds `s2`).
pub fn compose(s2: &SuperOp, s1: &SuperOp) -> Result<SuperOp> {
    if !s1.output.compatible(&s2.input) {
        return Err(Error::invalid("compose: intermediate space mismatch"));
    }
    use TraceFlag::*;
    let flag = match (s2.trace_flag, s1.trace_flag) {
        (Preserving, Preserving) => Preserving,
        (Preserving | NonIncreasing, Preserving | NonIncreasing) => NonIncreasing,
        _ => General,
    };
    SuperOp::new(s1.input.clone(), s2.output.clone(), s2.mat.dot(&s1.mat), flag)
}

/// Truncated annihilation operator: `a|n⟩ = √n |n−1⟩`, `(n_max+1)²` matrix.
pub fn annihilation(n_max: usize) -> Result<Array2<C64>> {
    if n_max < 1 {
        return Err(Error::invalid("annihilation: n_max must be ≥ 1"));
    }
    let b = n_max + 1;
    let mut a = Array2::zeros((b, b));
    for n in 1..b {
        a[[n - 1, n]] = cr((n as f64).sqrt());
    }
    Ok(a)
}

/// Number operator `a†a` on the truncated space.
pub fn number_operator(n_max: usize) -> Result<Array2<C64>> {
    let a = annihilation(n_max)?;
    Ok(linalg::dagger(&a).dot(&a))
}

/// Embed a single-mode operator at `position` of a multi-mode space.
pub fn embed_operator(space: &ModeSpace, op: &Array2<C64>, position: usize) -> Result<Array2<C64>> {
    let b = space.fock_dim();
    if op.dim() != (b, b) {
        return Err(Error::invalid("embed_operator: operator must be single-mode"));
    }
    if position >= space.mode_count() {
        return Err(Error::invalid("embed_operator: position out of range"));
    }
    let left = linalg::identity(b.pow(position as u32));
    let right = linalg::identity(b.pow((space.mode_count() - 1 - position) as u32));
    Ok(linalg::kron(&linalg::kron(&left, op), &right))
}

/// Lindblad dissipator `𝓓[c]• = c•c† − ½{c†c, •}` as a superoperator.
///
/// The result is a generator (it annihilates trace), not a channel, so its
/// flag is [`TraceFlag::General`].
pub fn dissipator(space: &ModeSpace, jump: &Array2<C64>) -> Result<SuperOp> {
    let d = space.dim();
    if jump.dim() != (d, d) {
        return Err(Error::invalid("dissipator: jump operator dimension mismatch"));
    }
    let ctc = linalg::dagger(jump).dot(jump);
    let id = linalg::identity(d);
    let mat = linalg::kron(&linalg::conj(jump), jump)
        - linalg::kron(&id, &ctc).mapv(|z| z * cr(0.5))
        - linalg::kron(&ctc.t().to_owned(), &id).mapv(|z| z * cr(0.5));
    SuperOp::new(space.clone(), space.clone(), mat, TraceFlag::General)
}

/// Channel exponential `exp(g·G)`.
///
/// The flag is computed from the generator: if `G` annihilates trace the
/// exponential is trace-preserving.
pub fn channel_exp(generator: &SuperOp, g: f64) -> Result<SuperOp> {
    if !g.is_finite() {
        return Err(Error::invalid("channel_exp: non-finite gain"));
    }
    if !generator.input.compatible(&generator.output) {
        return Err(Error::invalid("channel_exp: generator must be endomorphic"));
    }
    let mat = linalg::expm(&generator.mat.mapv(|z| z * cr(g)));
    // Trace row of the generator: zero ⇒ exp is trace preserving.
    let row = generator.trace_row();
    let defect = row.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let scale = linalg::max_abs(&generator.mat).max(1.0);
    let flag = if defect <= 1e-12 * scale { TraceFlag::Preserving } else { TraceFlag::General };
    SuperOp::new(generator.input.clone(), generator.output.clone(), mat, flag)
}

/// Unitary conjugation superoperator `ρ ↦ UρU†`.
pub fn unitary_conj(space: &ModeSpace, u: &Array2<C64>) -> Result<SuperOp> {
    let d = space.dim();
    if u.dim() != (d, d) {
        return Err(Error::invalid("unitary_conj: dimension mismatch"));
    }
    let defect = linalg::max_abs(&(&linalg::dagger(u).dot(u) - &linalg::identity(d)));
    if defect > 1e-8 {
        return Err(Error::Numeric { what: "unitary_conj: matrix is not unitary".into(), residual: defect });
    }
    SuperOp::new(space.clone(), space.clone(), linalg::kron(&linalg::conj(u), u), TraceFlag::Preserving)
}

/// Balanced beamsplitter on modes `i`, `j`: conjugation by
/// `U = exp[(π/4)(a_i†a_j − a_i a_j†)]`.
pub fn beamsplitter(space: &ModeSpace, i: usize, j: usize) -> Result<SuperOp> {
    if i == j {
        return Err(Error::invalid("beamsplitter: modes must be distinct"));
    }
    check_targets(space, &[i, j], None)?;
    let a = annihilation(space.n_max())?;
    let ai = embed_operator(space, &a, i)?;
    let aj = embed_operator(space, &a, j)?;
    let k = linalg::dagger(&ai).dot(&aj) - linalg::dagger(&aj).dot(&ai);
    let u = linalg::expm(&k.mapv(|z| z * cr(std::f64::consts::FRAC_PI_4)));
    unitary_conj(space, &u)
}

/// Tensor product of two states (mode order: `a` then `b`).
pub fn tensor_states(a: &DensityState, b: &DensityState) -> Result<DensityState> {
    let space = a.space.concat(&b.space)?;
    Ok(DensityState { space, mat: linalg::kron(&a.mat, &b.mat) })
}

/// Concatenate spaces for a superoperator, renaming collisions. Map spaces
/// are positional (application matches kinds and arity, never names), so a
/// clashing name from `b` gets a numeric suffix instead of failing.
fn concat_renaming(a: &ModeSpace, b: &ModeSpace) -> Result<ModeSpace> {
    if a.n_max != b.n_max {
        return Err(Error::invalid("concat: truncation mismatch"));
    }
    let mut labels = a.labels.clone();
    for l in &b.labels {
        let mut name = l.name.clone();
        let mut n = 1usize;
        while labels.iter().any(|x| x.name == name) {
            n += 1;
            name = format!("{}#{n}", l.name);
        }
        labels.push(ModeLabel { name, kind: l.kind });
    }
    ModeSpace::new(a.n_max, labels)
}

/// Tensor product of two superoperators (input and output mode orders:
/// `a` then `b`). Mode names colliding between the factors are
/// disambiguated with a numeric suffix.
pub fn tensor_superops(a: &SuperOp, b: &SuperOp) -> Result<SuperOp> {
    let input = concat_renaming(&a.input, &b.input)?;
    let output = concat_renaming(&a.output, &b.output)?;
    let (dia, doa) = (a.input.dim(), a.output.dim());
    let (dib, dob) = (b.input.dim(), b.output.dim());
    let (d_in, d_out) = (dia * dib, doa * dob);
    let mut mat = Array2::zeros((d_out * d_out, d_in * d_in));
    for ca in 0..doa {
        for ra in 0..doa {
            for cb in 0..dob {
                for rb in 0..dob {
                    let row = (ca * dob + cb) * d_out + (ra * dob + rb);
                    for cia in 0..dia {
                        for ria in 0..dia {
                            let va = a.mat[[ca * doa + ra, cia * dia + ria]];
                            if va == ZERO {
                                continue;
                            }
                            for cib in 0..dib {
                                for rib in 0..dib {
                                    let vb = b.mat[[cb * dob + rb, cib * dib + rib]];
                                    if vb == ZERO {
                                        continue;
                                    }
                                    let col = (cia * dib + cib) * d_in + (ria * dib + rib);
                                    mat[[row, col]] = va * vb;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    use TraceFlag::*;
    let flag = match (a.trace_flag, b.trace_flag) {
        (Preserving, Preserving) => Preserving,
        (Preserving | NonIncreasing, Preserving | NonIncreasing) => NonIncreasing,
        _ => General,
    };
    SuperOp::new(input, output, mat, flag)
}

/// Superoperator that appends `added` modes in the vacuum state after the
/// modes of `space`: `ρ ↦ ρ ⊗ |0…0⟩⟨0…0|`.
pub fn append_vacuum_superop(space: &ModeSpace, added: &ModeSpace) -> Result<SuperOp> {
    let out_space = space.concat(added)?;
    let di = space.dim();
    let da = added.dim();
    let dout = out_space.dim();
    let mut mat = Array2::zeros((dout * dout, di * di));
    for c in 0..di {
        for r in 0..di {
            // appended modes are least significant: full index = i·da + 0
            mat[[(c * da) * dout + r * da, c * di + r]] = ONE;
        }
    }
    SuperOp::new(space.clone(), out_space, mat, TraceFlag::Preserving)
}

/// Partial trace over `positions` as a superoperator.
pub fn partial_trace_superop(space: &ModeSpace, positions: &[usize]) -> Result<SuperOp> {
    check_targets(space, positions, None)?;
    let split = SplitIndex::new(space, positions);
    let (dt, du) = (split.dt, split.du);
    let out_space = space.without(positions);
    let d = space.dim();
    let mut mat = Array2::zeros((du * du, d * d));
    for cu in 0..du {
        for ru in 0..du {
            let row = cu * du + ru;
            for t in 0..dt {
                let cf = split.full_of[t * du + cu];
                let rf = split.full_of[t * du + ru];
                mat[[row, cf * d + rf]] = ONE;
            }
        }
    }
    SuperOp::new(space.clone(), out_space, mat, TraceFlag::Preserving)
}

/// Trace out the modes at the given positions.
pub fn partial_trace_at(rho: &DensityState, positions: &[usize]) -> Result<DensityState> {
    check_targets(&rho.space, positions, None)?;
    let split = SplitIndex::new(&rho.space, positions);
    let (dt, du) = (split.dt, split.du);
    let mut mat = Array2::zeros((du, du));
    for cu in 0..du {
        for ru in 0..du {
            let mut acc = ZERO;
            for t in 0..dt {
                acc += rho.mat[[split.full_of[t * du + ru], split.full_of[t * du + cu]]];
            }
            mat[[ru, cu]] = acc;
        }
    }
    Ok(DensityState { space: rho.space.without(positions), mat })
}

/// Trace out modes by name.
pub fn partial_trace(rho: &DensityState, names: &[&str]) -> Result<DensityState> {
    let mut positions = Vec::with_capacity(names.len());
    for n in names {
        positions.push(
            rho.space
                .position(n)
                .ok_or_else(|| Error::invalid(format!("partial_trace: unknown mode '{n}'")))?,
        );
    }
    partial_trace_at(rho, &positions)
}

/// Solve `(s − L)x = ρ` in vectorized form; returns the raw resolvent image.
pub fn resolvent_apply(l: &SuperOp, s: f64, rho: &DensityState) -> Result<DensityState> {
    if !l.input.compatible(&l.output) || !l.input.compatible(&rho.space) {
        return Err(Error::invalid("resolvent_apply: space mismatch"));
    }
    let d2 = l.mat.nrows();
    let mut m = l.mat.mapv(|z| -z);
    for i in 0..d2 {
        m[[i, i]] += cr(s);
    }
    let b = rho.to_vec();
    let x = linalg::solve_vec(&m, &b)?;
    // Verify the solve; the contract reports the residual on failure.
    let r = m.dot(&x) - &b;
    let rn = r.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let bn = b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if rn > 1e-8 * (1.0 + bn) {
        return Err(Error::Numeric { what: "resolvent residual too large".into(), residual: rn });
    }
    let mut out = DensityState::from_vec(rho.space.clone(), &x)?;
    out.hermitize();
    Ok(out)
}

/// Project modes `i`, `j` onto the single-click pattern |1_i 0_j⟩ and drop
/// them: returns `2·⟨1_i 0_j|ρ|1_i 0_j⟩` and its trace. The factor 2 counts
/// the two interchangeable detector outcomes, whose states are equalized by
/// a compensating phase flip elsewhere in the detection pipeline.
pub fn detect_project(rho: &DensityState, i: usize, j: usize) -> Result<(DensityState, f64)> {
    if i == j {
        return Err(Error::invalid("detect_project: modes must be distinct"));
    }
    check_targets(&rho.space, &[i, j], None)?;
    for &p in &[i, j] {
        if rho.space.labels()[p].kind != ModeKind::Photonic {
            return Err(Error::invalid("detect_project: modes must be photonic"));
        }
    }
    let split = SplitIndex::new(&rho.space, &[i, j]);
    let t_val = rho.space.fock_dim(); // target occupations (1, 0): index 1·B + 0
    let du = split.du;
    let mut mat = Array2::zeros((du, du));
    for cu in 0..du {
        for ru in 0..du {
            mat[[ru, cu]] =
                rho.mat[[split.full_of[t_val * du + ru], split.full_of[t_val * du + cu]]] * cr(2.0);
        }
    }
    let out = DensityState { space: rho.space.without(&[i, j]), mat };
    let w = out.trace();
    Ok((out, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_mode(n_max: usize) -> ModeSpace {
        ModeSpace::new(n_max, vec![ModeLabel::photonic("p")]).unwrap()
    }

    fn rand_density(space: &ModeSpace, seed: u64) -> DensityState {
        // Deterministic PSD matrix with unit trace: G·G† normalized.
        let d = space.dim();
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64) - 0.5
        };
        let mut g = Array2::<C64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                g[[i, j]] = C64::new(rnd(), rnd());
            }
        }
        let m = g.dot(&linalg::dagger(&g));
        let tr: f64 = (0..d).map(|i| m[[i, i]].re).sum();
        DensityState::new(space.clone(), m.mapv(|z| z / cr(tr))).unwrap()
    }

    #[test]
    fn annihilation_matrix_elements() {
        let a = annihilation(2).unwrap();
        assert_relative_eq!(a[[0, 1]].re, 1.0);
        assert_relative_eq!(a[[1, 2]].re, 2.0f64.sqrt());
        assert_eq!(a[[1, 0]], ZERO);
        // a|0⟩ = 0
        let ket0 = Array1::from_vec(vec![ONE, ZERO, ZERO]);
        let out = a.dot(&ket0);
        assert!(out.iter().all(|z| z.norm() < 1e-15));
        // a†a|2⟩ = 2|2⟩
        let n = number_operator(2).unwrap();
        let ket2 = Array1::from_vec(vec![ZERO, ZERO, ONE]);
        let out = n.dot(&ket2);
        assert_relative_eq!(out[2].re, 2.0);
    }

    #[test]
    fn annihilation_rejects_zero_truncation() {
        assert!(annihilation(0).is_err());
    }

    #[test]
    fn dissipator_annihilates_trace_and_darkens_vacuum() {
        let sp = single_mode(2);
        let a = annihilation(2).unwrap();
        let dis = dissipator(&sp, &a).unwrap();
        // vacuum is a dark state
        let vac = DensityState::vacuum(sp.clone());
        let out = apply(&dis, &vac).unwrap();
        assert!(linalg::max_abs(out.mat()) < 1e-14);
        // Tr(𝓓ρ) = 0 for random ρ
        for seed in 0..5 {
            let rho = rand_density(&sp, 100 + seed);
            let out = apply(&dis, &rho).unwrap();
            assert!(out.trace().abs() < 1e-12, "trace {}", out.trace());
        }
        // 𝓓[a](|1⟩⟨1|) = |0⟩⟨0| − |1⟩⟨1|
        let one = DensityState::from_pure(sp.clone(), &sp.fock_ket(&[1])).unwrap();
        let out = apply(&dis, &one).unwrap();
        assert_relative_eq!(out.mat()[[0, 0]].re, 1.0, epsilon = 1e-14);
        assert_relative_eq!(out.mat()[[1, 1]].re, -1.0, epsilon = 1e-14);
    }

    #[test]
    fn channel_exp_amplitude_damping() {
        let sp = single_mode(2);
        let a = annihilation(2).unwrap();
        let dis = dissipator(&sp, &a).unwrap();
        // g = 0 → identity
        let id = channel_exp(&dis, 0.0).unwrap();
        assert!(linalg::max_abs(&(id.mat() - &linalg::identity(9))) < 1e-14);
        // S_loss(g)|1⟩⟨1| = e^{−g}|1⟩⟨1| + (1−e^{−g})|0⟩⟨0|
        let g = 0.37;
        let ch = channel_exp(&dis, g).unwrap();
        assert_eq!(ch.trace_flag(), TraceFlag::Preserving);
        let one = DensityState::from_pure(sp.clone(), &sp.fock_ket(&[1])).unwrap();
        let out = apply(&ch, &one).unwrap();
        assert_relative_eq!(out.mat()[[1, 1]].re, (-g).exp(), epsilon = 1e-12);
        assert_relative_eq!(out.mat()[[0, 0]].re, 1.0 - (-g).exp(), epsilon = 1e-12);
        // trace preserved on a random state
        let rho = rand_density(&sp, 7);
        let out = apply(&ch, &rho).unwrap();
        assert_relative_eq!(out.trace(), rho.trace(), epsilon = 1e-10);
    }

    #[test]
    fn channel_exp_semigroup() {
        let sp = single_mode(2);
        let a = annihilation(2).unwrap();
        let dis = dissipator(&sp, &a).unwrap();
        let c1 = channel_exp(&dis, 0.4).unwrap();
        let c2 = channel_exp(&dis, 0.9).unwrap();
        let c12 = channel_exp(&dis, 1.3).unwrap();
        let prod = compose(&c2, &c1).unwrap();
        assert!(linalg::max_abs(&(prod.mat() - c12.mat())) < 1e-9);
    }

    #[test]
    fn beamsplitter_examples() {
        let sp = ModeSpace::new(
            2,
            vec![ModeLabel::photonic("i"), ModeLabel::photonic("j")],
        )
        .unwrap();
        let bs = beamsplitter(&sp, 0, 1).unwrap();
        assert_eq!(bs.trace_flag(), TraceFlag::Preserving);
        // vacuum invariant
        let vac = DensityState::vacuum(sp.clone());
        let out = apply(&bs, &vac).unwrap();
        assert!(linalg::max_abs(&(out.mat() - vac.mat())) < 1e-12);
        // |1,0⟩ → (|10⟩−|01⟩)/√2
        let in10 = DensityState::from_pure(sp.clone(), &sp.fock_ket(&[1, 0])).unwrap();
        let out = apply(&bs, &in10).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let want = sp.fock_ket(&[1, 0]).mapv(|z| z * cr(s))
            - sp.fock_ket(&[0, 1]).mapv(|z| z * cr(s));
        assert_relative_eq!(out.fidelity_to_pure(&want), 1.0, epsilon = 1e-12);
        // conjugation by a unitary has a unitary superoperator matrix
        let gram = linalg::dagger(bs.mat()).dot(bs.mat());
        assert!(linalg::max_abs(&(&gram - &linalg::identity(81))) < 1e-10);
    }

    #[test]
    fn tensor_and_partial_trace_roundtrip() {
        let sp_a = ModeSpace::memories(2, &["A"]).unwrap();
        let sp_b = ModeSpace::memories(2, &["B"]).unwrap();
        let rho_a = rand_density(&sp_a, 1);
        let rho_b = rand_density(&sp_b, 2);
        let joint = tensor_states(&rho_a, &rho_b).unwrap();
        assert_relative_eq!(joint.trace(), rho_a.trace() * rho_b.trace(), epsilon = 1e-12);
        // tracing out B recovers Tr(ρ_B)·ρ_A
        let red = partial_trace(&joint, &["B"]).unwrap();
        assert!(linalg::max_abs(&(red.mat() - rho_a.mat())) < 1e-12);
        // trace conserved
        assert_relative_eq!(red.trace(), joint.trace(), epsilon = 1e-12);
        // label collision rejected
        assert!(tensor_states(&rho_a, &rho_a).is_err());
    }

    #[test]
    fn partial_trace_of_bell_like_state() {
        let sp = ModeSpace::memories(2, &["x", "y"]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ket = sp.fock_ket(&[1, 0]).mapv(|z| z * cr(s)) + sp.fock_ket(&[0, 1]).mapv(|z| z * cr(s));
        let rho = DensityState::from_pure(sp, &ket).unwrap();
        let red = partial_trace(&rho, &["y"]).unwrap();
        assert_relative_eq!(red.mat()[[0, 0]].re, 0.5, epsilon = 1e-12);
        assert_relative_eq!(red.mat()[[1, 1]].re, 0.5, epsilon = 1e-12);
        assert!(red.mat()[[0, 1]].norm() < 1e-12);
    }

    #[test]
    fn tensor_superops_acts_factorwise() {
        let sp_a = ModeSpace::memories(2, &["A"]).unwrap();
        let sp_b = ModeSpace::memories(2, &["B"]).unwrap();
        let a_op = annihilation(2).unwrap();
        let d_a = dissipator(&sp_a, &a_op).unwrap();
        let ch_a = channel_exp(&d_a, 0.3).unwrap();
        let d_b = dissipator(&sp_b, &a_op).unwrap();
        let ch_b = channel_exp(&d_b, 0.8).unwrap();
        let joint_op = tensor_superops(&ch_a, &ch_b).unwrap();
        let rho_a = rand_density(&sp_a, 5);
        let rho_b = rand_density(&sp_b, 6);
        let lhs = apply(&joint_op, &tensor_states(&rho_a, &rho_b).unwrap()).unwrap();
        let rhs = tensor_states(&apply(&ch_a, &rho_a).unwrap(), &apply(&ch_b, &rho_b).unwrap())
            .unwrap();
        assert!(linalg::max_abs(&(lhs.mat() - rhs.mat())) < 1e-12);
    }

    #[test]
    fn identity_tensor_identity_is_identity() {
        let sp_a = ModeSpace::memories(2, &["A"]).unwrap();
        let sp_b = ModeSpace::memories(2, &["B"]).unwrap();
        let t = tensor_superops(&SuperOp::identity(&sp_a), &SuperOp::identity(&sp_b)).unwrap();
        assert!(linalg::max_abs(&(t.mat() - &linalg::identity(81))) < 1e-14);
    }

    #[test]
    fn resolvent_scalar_limit() {
        // L = 0: (s−0)⁻¹ρ = ρ/s
        let sp = ModeSpace::memories(2, &["A"]).unwrap();
        let rho = rand_density(&sp, 3);
        let zero = SuperOp::new(sp.clone(), sp.clone(), Array2::zeros((9, 9)), TraceFlag::General)
            .unwrap();
        let nu = 0.7;
        let out = resolvent_apply(&zero, nu, &rho).unwrap();
        assert!(linalg::max_abs(&(out.mat() - &rho.mat().mapv(|z| z / cr(nu)))) < 1e-12);
    }

    #[test]
    fn resolvent_is_cptp_average() {
        // Tr{ν(ν−L)⁻¹ρ} = Tr ρ for trace-annihilating L.
        let sp = single_mode(2);
        let a = annihilation(2).unwrap();
        let l = dissipator(&sp, &a).unwrap().scaled(1.0 / 0.013);
        let rho = rand_density(&sp, 11);
        let nu = 2.3;
        let out = resolvent_apply(&l, nu, &rho).unwrap();
        assert_relative_eq!(nu * out.trace(), rho.trace(), epsilon = 1e-10);
    }

    #[test]
    fn resolvent_matches_time_quadrature() {
        // (s−L)⁻¹ρ = ∫₀^∞ e^{−st} e^{Lt} ρ dt, stepped quadrature oracle.
        let sp = single_mode(2);
        let a = annihilation(2).unwrap();
        let t_coh = 1.3;
        let l = dissipator(&sp, &a).unwrap().scaled(1.0 / t_coh);
        let rho = rand_density(&sp, 23);
        let s = 0.9;
        let direct = resolvent_apply(&l, s, &rho).unwrap();

        let h = 1e-4 * t_coh.min(1.0 / s);
        let step = channel_exp(&l, h).unwrap();
        let mut cur = rho.clone();
        let mut acc = Array2::<C64>::zeros((3, 3));
        let mut t = 0.0;
        while t < 40.0 / s {
            // trapezoid on e^{−st}ρ(t)
            let next = apply(&step, &cur).unwrap();
            let w0 = (-s * t).exp();
            let w1 = (-s * (t + h)).exp();
            acc = acc
                + cur.mat().mapv(|z| z * cr(0.5 * h * w0))
                + next.mat().mapv(|z| z * cr(0.5 * h * w1));
            cur = next;
            t += h;
        }
        assert!(
            linalg::max_abs(&(direct.mat() - &acc)) < 1e-8,
            "quadrature mismatch {}",
            linalg::max_abs(&(direct.mat() - &acc))
        );
    }

    #[test]
    fn detect_project_examples() {
        let sp = ModeSpace::new(
            2,
            vec![
                ModeLabel::photonic("i"),
                ModeLabel::photonic("j"),
                ModeLabel::memory("M"),
            ],
        )
        .unwrap();
        // ρ = |1_i 0_j⟩⟨1_i 0_j| ⊗ σ → 2σ
        let sigma = rand_density(&ModeSpace::memories(2, &["M"]).unwrap(), 9);
        let photon = DensityState::from_pure(
            ModeSpace::new(2, vec![ModeLabel::photonic("i"), ModeLabel::photonic("j")]).unwrap(),
            &ModeSpace::new(2, vec![ModeLabel::photonic("i"), ModeLabel::photonic("j")])
                .unwrap()
                .fock_ket(&[1, 0]),
        )
        .unwrap();
        let joint = tensor_states(&photon, &sigma).unwrap();
        let (out, w) = detect_project(&joint, 0, 1).unwrap();
        assert!(linalg::max_abs(&(out.mat() - &sigma.mat().mapv(|z| z * cr(2.0)))) < 1e-12);
        assert_relative_eq!(w, 2.0 * sigma.trace(), epsilon = 1e-12);
        // vacuum → zero
        let vac = DensityState::vacuum(sp.clone());
        let (out, w) = detect_project(&vac, 0, 1).unwrap();
        assert!(linalg::max_abs(out.mat()) < 1e-14);
        assert!(w.abs() < 1e-14);
        // memory modes rejected
        assert!(detect_project(&joint, 0, 2).is_err());
    }

    #[test]
    fn apply_on_embeds_like_explicit_matrix() {
        // Applying on a subset must agree with the embedded superoperator.
        let sp = ModeSpace::memories(2, &["A", "B", "C"]).unwrap();
        let rho = rand_density(&sp, 31);
        let a = annihilation(2).unwrap();
        let one = ModeSpace::memories(2, &["x"]).unwrap();
        let ch = channel_exp(&dissipator(&one, &a).unwrap(), 0.45).unwrap();
        let direct = apply_on(&ch, &rho, &[1]).unwrap();
        let embedded = embed_superop(&ch, &sp, &[1]).unwrap();
        let via_embed = apply(&embedded, &rho).unwrap();
        assert!(linalg::max_abs(&(direct.mat() - via_embed.mat())) < 1e-12);
        // trace preserved (single-mode loss channel)
        assert_relative_eq!(direct.trace(), rho.trace(), epsilon = 1e-10);
    }

    #[test]
    fn apply_on_respects_target_order() {
        // A map sensitive to mode order: |10⟩⟨10| projector (as a 2→0 map).
        let two = ModeSpace::new(
            2,
            vec![ModeLabel::memory("u"), ModeLabel::memory("v")],
        )
        .unwrap();
        // build ⟨10|•|10⟩ as a 1×81 superop row
        let mut row = Array2::zeros((1, 81));
        let d = 9;
        let idx = two.basis_index(&[1, 0]);
        row[[0, idx * d + idx]] = ONE;
        let m = SuperOp::new(two.clone(), ModeSpace::scalar(2), row, TraceFlag::NonIncreasing)
            .unwrap();

        let sp = ModeSpace::memories(2, &["A", "B"]).unwrap();
        let rho10 = DensityState::from_pure(sp.clone(), &sp.fock_ket(&[1, 0])).unwrap();
        // targets (0,1): reads |A B⟩ = |1 0⟩ → weight 1
        let w01 = apply_on(&m, &rho10, &[0, 1]).unwrap().trace();
        // targets (1,0): reads |B A⟩ = |0 1⟩ → weight 0
        let w10 = apply_on(&m, &rho10, &[1, 0]).unwrap().trace();
        assert_relative_eq!(w01, 1.0, epsilon = 1e-12);
        assert!(w10.abs() < 1e-14);
    }

    #[test]
    fn reorder_modes_permutes_occupations() {
        let sp = ModeSpace::memories(2, &["A", "B", "C"]).unwrap();
        let rho = DensityState::from_pure(sp.clone(), &sp.fock_ket(&[2, 1, 0])).unwrap();
        let out = rho.reorder_modes(&[2, 0, 1]).unwrap();
        // new order (C, A, B): occupations (0, 2, 1)
        let want = out.space().fock_ket(&[0, 2, 1]);
        assert_relative_eq!(out.fidelity_to_pure(&want), 1.0, epsilon = 1e-12);
        assert_eq!(out.space().labels()[0].name, "C");
    }

    #[test]
    fn scalar_spaces_work_through_the_pipeline() {
        let rho = DensityState::scalar(0.8, 2);
        assert_relative_eq!(rho.trace(), 0.8);
        // scalar merge map: weight P
        let m = SuperOp::new(
            ModeSpace::scalar(2),
            ModeSpace::scalar(2),
            Array2::from_elem((1, 1), cr(0.5)),
            TraceFlag::NonIncreasing,
        )
        .unwrap();
        let out = apply(&m, &rho).unwrap();
        assert_relative_eq!(out.trace(), 0.4, epsilon = 1e-15);
        let joint = tensor_states(&rho, &DensityState::scalar(0.5, 2)).unwrap();
        assert_relative_eq!(joint.trace(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn append_vacuum_then_trace_is_identity() {
        let sp = ModeSpace::memories(2, &["A"]).unwrap();
        let added = ModeSpace::new(
            2,
            vec![ModeLabel::memory("C"), ModeLabel::photonic("c")],
        )
        .unwrap();
        let rho = rand_density(&sp, 42);
        let app = append_vacuum_superop(&sp, &added).unwrap();
        let je = apply(&app, &rho).unwrap();
        assert_eq!(je.space().mode_count(), 3);
        assert_relative_eq!(je.trace(), rho.trace(), epsilon = 1e-12);
        // vacuum occupancy of the appended modes
        let tr_sup = partial_trace_superop(je.space(), &[1, 2]).unwrap();
        let back = apply(&tr_sup, &je).unwrap();
        assert!(linalg::max_abs(&(back.mat() - rho.mat())) < 1e-12);
        // superop route agrees with the state-level partial trace
        let direct = partial_trace_at(&je, &[1, 2]).unwrap();
        assert!(linalg::max_abs(&(back.mat() - direct.mat())) < 1e-14);
    }

    #[test]
    fn pipeline_outputs_stay_physical() {
        // A chain of module operations keeps states Hermitian/PSD in tolerance.
        let sp = ModeSpace::new(
            2,
            vec![ModeLabel::memory("A"), ModeLabel::photonic("p"), ModeLabel::photonic("q")],
        )
        .unwrap();
        let rho = rand_density(&sp, 77);
        let bs = beamsplitter(&sp.select(&[1, 2]), 0, 1).unwrap();
        let stepped = apply_on(&bs, &rho, &[1, 2]).unwrap();
        stepped.validate_physical().unwrap();
        let a = annihilation(2).unwrap();
        let one = ModeSpace::new(2, vec![ModeLabel::memory("m")]).unwrap();
        let loss = channel_exp(&dissipator(&one, &a).unwrap(), 0.2).unwrap();
        let stepped = apply_on(&loss, &stepped, &[0]).unwrap();
        stepped.validate_physical().unwrap();
        let (after, w) = detect_project(&stepped, 1, 2).unwrap();
        assert!(w >= -1e-12 && w <= 2.0 * stepped.trace() + 1e-9);
        let mut after = after;
        after.hermitize();
        after.validate_physical().unwrap_or_else(|e| panic!("not physical: {e}"));
    }
}
