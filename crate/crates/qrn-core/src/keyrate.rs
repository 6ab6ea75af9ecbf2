//! Asymptotic secret-key rate of the distributed state.
//!
//! One hub party `A` and one or more leaf parties `B_i` each hold a block
//! of memory modes. A [`LogicalEncoding`] names, per party, the two
//! occupation patterns read as logical `|0⟩` and `|1⟩`; every other
//! outcome is discarded. The pipeline is: apply readout loss, project onto
//! the logical subspace ([`project_logical`]), extract the coefficients of
//! the state in the GHZ basis `|ψ_j^±⟩ = (|0,j⟩ ± |1,j̄⟩)/√2`
//! ([`ghz_coeffs`]), turn them into measurement error rates
//! ([`error_rates`]), and evaluate the secret fraction
//! ([`secret_fraction`]). [`key_rate`] composes the steps and scales by
//! the generation rate: `K = r_∞ · P_Π / T`.
//!
//! Bit conventions: logical basis index `b = a·2^(n−1) + j` with `a` the
//! hub bit; within `j`, party `B_i` owns bit `n−1−i`, so the bitstring
//! reads `a b₁ b₂ …` left to right and `j̄` is the bitwise complement on
//! `n−1` bits.

use ndarray::{Array1, Array2};

use crate::liouville::decay::{Decay, DecayModel};
use crate::liouville::{tensor_states, C64, DensityState, ModeSpace};
use crate::{Error, Result};

/// One party's share of the physical state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartyEncoding {
    /// Mode positions this party holds.
    pub modes: Vec<usize>,
    /// Occupation pattern read as logical `|0⟩`, one entry per mode.
    pub zero: Vec<usize>,
    /// Occupation pattern read as logical `|1⟩`.
    pub one: Vec<usize>,
}

/// Assignment of every physical mode to a party, with the per-party
/// logical basis patterns. Party 0 is the hub `A`; the rest are `B_i` in
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogicalEncoding {
    pub parties: Vec<PartyEncoding>,
}

impl LogicalEncoding {
    /// Two parties on one distributed pair: hub on mode 0 with
    /// `{|0⟩, |1⟩}`, leaf on mode 1 with the flipped reading `{|1⟩, |0⟩}`,
    /// so the ideal pair `(|10⟩ + |01⟩)/√2` reads as `(|00⟩ + |11⟩)/√2`.
    pub fn chain_pair() -> Self {
        LogicalEncoding {
            parties: vec![
                PartyEncoding { modes: vec![0], zero: vec![0], one: vec![1] },
                PartyEncoding { modes: vec![1], zero: vec![1], one: vec![0] },
            ],
        }
    }

    /// Two parties on two pairs generated in parallel, modes ordered
    /// `(1.A, 1.B, 2.A, 2.B)` as produced by [`parallel_link_state`]. Each
    /// party keeps exactly the single-excitation patterns on its two
    /// modes; double or zero excitations are discarded.
    pub fn chain_pair_parallel() -> Self {
        LogicalEncoding {
            parties: vec![
                PartyEncoding { modes: vec![0, 2], zero: vec![1, 0], one: vec![0, 1] },
                PartyEncoding { modes: vec![1, 3], zero: vec![0, 1], one: vec![1, 0] },
            ],
        }
    }

    /// Three parties on a triangle output with modes `(A, C, B)`: hub and
    /// first leaf read `{|0⟩, |1⟩}`, the second leaf reads flipped, so the
    /// ideal output `(|110⟩ + |001⟩)/√2` reads as `(|111⟩ + |000⟩)/√2`.
    pub fn triangle_ghz() -> Self {
        LogicalEncoding {
            parties: vec![
                PartyEncoding { modes: vec![0], zero: vec![0], one: vec![1] },
                PartyEncoding { modes: vec![1], zero: vec![0], one: vec![1] },
                PartyEncoding { modes: vec![2], zero: vec![1], one: vec![0] },
            ],
        }
    }

    pub fn party_count(&self) -> usize {
        self.parties.len()
    }

    /// Check shape and that the parties tile `space` exactly.
    fn validate_for(&self, space: &ModeSpace) -> Result<()> {
        if self.parties.len() < 2 {
            return Err(Error::invalid("LogicalEncoding: need at least two parties"));
        }
        let m = space.mode_count();
        let mut seen = vec![false; m];
        for p in &self.parties {
            if p.modes.is_empty()
                || p.zero.len() != p.modes.len()
                || p.one.len() != p.modes.len()
            {
                return Err(Error::invalid(
                    "LogicalEncoding: patterns must match the party's mode count",
                ));
            }
            if p.zero == p.one {
                return Err(Error::invalid(
                    "LogicalEncoding: logical patterns must differ",
                ));
            }
            for &mode in &p.modes {
                if mode >= m {
                    return Err(Error::invalid(format!(
                        "LogicalEncoding: mode {mode} outside a {m}-mode state"
                    )));
                }
                if seen[mode] {
                    return Err(Error::invalid(format!(
                        "LogicalEncoding: mode {mode} assigned twice"
                    )));
                }
                seen[mode] = true;
            }
            if p.zero.iter().chain(&p.one).any(|&occ| occ > space.n_max()) {
                return Err(Error::invalid(
                    "LogicalEncoding: pattern occupation exceeds the truncation",
                ));
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::invalid(
                "LogicalEncoding: every mode must belong to a party",
            ));
        }
        Ok(())
    }

    /// Flat physical index of the logical basis state `b` (bit per party,
    /// hub at the highest bit).
    fn physical_index(&self, space: &ModeSpace, b: usize) -> usize {
        let n = self.parties.len();
        let mut occ = vec![0usize; space.mode_count()];
        for (p, party) in self.parties.iter().enumerate() {
            let bit = (b >> (n - 1 - p)) & 1;
            let pattern = if bit == 0 { &party.zero } else { &party.one };
            for (&mode, &o) in party.modes.iter().zip(pattern) {
                occ[mode] = o;
            }
        }
        let ket = space.fock_ket(&occ);
        ket.iter()
            .position(|a| a.norm_sqr() > 0.5)
            .expect("fock_ket yields a basis vector")
    }

    /// Physical indices of all `2^n` logical basis states, in index order.
    fn logical_indices(&self, space: &ModeSpace) -> Vec<usize> {
        (0..1usize << self.parties.len())
            .map(|b| self.physical_index(space, b))
            .collect()
    }
}

/// Coefficients of the projected state in the GHZ basis, `plus[j]` and
/// `minus[j]` for `j` over `n − 1` leaf bits.
#[derive(Clone, Debug)]
pub struct GhzCoeffs {
    pub parties: usize,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl GhzCoeffs {
    /// `λ_j = (λ_j⁺ + λ_j⁻)/2`.
    pub fn lambda(&self, j: usize) -> f64 {
        0.5 * (self.plus[j] + self.minus[j])
    }

    pub fn lambda0_plus(&self) -> f64 {
        self.plus[0]
    }

    pub fn lambda0_minus(&self) -> f64 {
        self.minus[0]
    }

    /// Sum over the whole basis; 1 for a normalized in-subspace state.
    pub fn total(&self) -> f64 {
        self.plus.iter().sum::<f64>() + self.minus.iter().sum::<f64>()
    }
}

/// Measurement error rates derived from the GHZ coefficients.
#[derive(Clone, Debug)]
pub struct ErrorRates {
    /// Probability that some leaf's key bit disagrees with the hub's.
    pub q_z: f64,
    /// Phase error rate of the conjugate-basis test.
    pub q_x: f64,
    /// Pairwise disagreement rate between the hub and leaf `B_i`,
    /// `q_ab[i − 1]`.
    pub q_ab: Vec<f64>,
}

/// Full key-rate evaluation for one distributed state.
#[derive(Clone, Debug)]
pub struct KeyRateReport {
    /// Probability that readout lands in the logical subspace.
    pub p_pass: f64,
    pub coeffs: GhzCoeffs,
    pub rates: ErrorRates,
    /// Secret fraction, clamped to `[0, 1]`.
    pub r_inf: f64,
    /// Secret bits per second, `r_∞ · P_Π / T`.
    pub k: f64,
}

/// Readout loss `v` as an amplitude-damping pulse: a unit-rate channel for
/// a duration `−ln(1 − v)` loses each excitation with probability `v`.
fn readout_loss(rho: &DensityState, v: f64) -> Result<DensityState> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::invalid("readout loss v must be in [0, 1)"));
    }
    if v == 0.0 {
        return Ok(rho.clone());
    }
    let decay = Decay::uniform(DecayModel::AmplitudeDamping, 1.0, rho.space().mode_count())?;
    decay.propagate(rho, -(-v).ln_1p())
}

/// Apply per-memory readout loss `v`, then keep only the logical
/// subspace. Returns the normalized projected state (still on the
/// physical space, zero outside the subspace) and the pass probability
/// `P_Π = Tr{Π ρ′ Π}`.
pub fn project_logical(
    rho: &DensityState,
    enc: &LogicalEncoding,
    v: f64,
) -> Result<(DensityState, f64)> {
    enc.validate_for(rho.space())?;
    let lossy = readout_loss(rho, v)?;
    let idx = enc.logical_indices(rho.space());
    let d = rho.space().dim();
    let mut p_pass = 0.0;
    for &i in &idx {
        p_pass += lossy.mat()[[i, i]].re;
    }
    if p_pass < 1e-12 {
        return Err(Error::DegenerateEncoding(format!(
            "state has weight {p_pass:.3e} in the logical subspace"
        )));
    }
    let mut mat = Array2::zeros((d, d));
    for &r in &idx {
        for &c in &idx {
            mat[[r, c]] = lossy.mat()[[r, c]] / p_pass;
        }
    }
    let mut projected = DensityState::new(rho.space().clone(), mat)?;
    projected.hermitize();
    Ok((projected, p_pass))
}

/// GHZ-basis vector `|ψ_j^±⟩` as a physical ket.
fn ghz_vector(
    enc: &LogicalEncoding,
    space: &ModeSpace,
    j: usize,
    sign: f64,
) -> Array1<C64> {
    let n = enc.party_count();
    let half = 1usize << (n - 1);
    let jbar = (half - 1) ^ j;
    let i0 = enc.physical_index(space, j);
    let i1 = enc.physical_index(space, half + jbar);
    let mut v = Array1::zeros(space.dim());
    let amp = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    v[i0] = amp;
    v[i1] = amp * sign;
    v
}

/// Diagonal of the projected state in the GHZ basis,
/// `λ_j^± = ⟨ψ_j^±| ρ_Π |ψ_j^±⟩`.
pub fn ghz_coeffs(rho_pi: &DensityState, enc: &LogicalEncoding) -> Result<GhzCoeffs> {
    enc.validate_for(rho_pi.space())?;
    let n = enc.party_count();
    let half = 1usize << (n - 1);
    let space = rho_pi.space();
    let mut plus = Vec::with_capacity(half);
    let mut minus = Vec::with_capacity(half);
    for j in 0..half {
        let jbar = (half - 1) ^ j;
        let i0 = enc.physical_index(space, j);
        let i1 = enc.physical_index(space, half + jbar);
        let pop = 0.5 * (rho_pi.mat()[[i0, i0]].re + rho_pi.mat()[[i1, i1]].re);
        let coh = rho_pi.mat()[[i0, i1]].re;
        plus.push(pop + coh);
        minus.push(pop - coh);
    }
    Ok(GhzCoeffs { parties: n, plus, minus })
}

/// Rebuild the GHZ-diagonal (dephased) state from its coefficients.
/// Extracting coefficients from the result returns the input exactly.
pub fn depolarized_state(
    coeffs: &GhzCoeffs,
    enc: &LogicalEncoding,
    space: &ModeSpace,
) -> Result<DensityState> {
    enc.validate_for(space)?;
    if enc.party_count() != coeffs.parties {
        return Err(Error::invalid("depolarized_state: party count mismatch"));
    }
    let d = space.dim();
    let mut mat = Array2::zeros((d, d));
    for j in 0..coeffs.plus.len() {
        for (lambda, sign) in [(coeffs.plus[j], 1.0), (coeffs.minus[j], -1.0)] {
            let psi = ghz_vector(enc, space, j, sign);
            for r in 0..d {
                if psi[r].norm_sqr() == 0.0 {
                    continue;
                }
                for c in 0..d {
                    mat[[r, c]] += psi[r] * psi[c].conj() * lambda;
                }
            }
        }
    }
    let mut rho = DensityState::new(space.clone(), mat)?;
    rho.hermitize();
    Ok(rho)
}

/// Error rates from the GHZ coefficients:
/// `Q_Z = 1 − λ₀⁺ − λ₀⁻`, `Q_X = (1 − λ₀⁺ + λ₀⁻)/2`, and per leaf
/// `Q_AB_i = 2 Σ_{j: bit_i(j)=1} λ_j`.
pub fn error_rates(coeffs: &GhzCoeffs) -> ErrorRates {
    let n = coeffs.parties;
    let q_z = 1.0 - coeffs.plus[0] - coeffs.minus[0];
    let q_x = 0.5 * (1.0 - coeffs.plus[0] + coeffs.minus[0]);
    let q_ab = (1..n)
        .map(|i| {
            let bit = n - 1 - i;
            2.0 * (0..coeffs.plus.len())
                .filter(|j| (j >> bit) & 1 == 1)
                .map(|j| coeffs.lambda(j))
                .sum::<f64>()
        })
        .collect();
    ErrorRates { q_z, q_x, q_ab }
}

/// `x log₂ x`, continuously extended by 0 at `x ≤ 0`.
fn plogp(x: f64) -> f64 {
    if x > 0.0 {
        x * x.log2()
    } else {
        0.0
    }
}

/// Binary Shannon entropy with the same extension at the endpoints.
fn binary_entropy(q: f64) -> f64 {
    -plogp(q) - plogp(1.0 - q)
}

/// Asymptotic secret fraction. The two log terms reduce to
/// `λ₀⁺ log₂ λ₀⁺ + λ₀⁻ log₂ λ₀⁻`; `0·log₂ 0 := 0` throughout, and the
/// result is clamped to `[0, 1]`.
pub fn secret_fraction(q_z: f64, q_x: f64, q_ab: &[f64]) -> f64 {
    let a = 1.0 - 0.5 * q_z - q_x;
    let b = q_x - 0.5 * q_z;
    let keep = 1.0 - q_z;
    let z_term = if keep > 0.0 { keep * (1.0 - keep.log2()) } else { 0.0 };
    let q_max = q_ab.iter().fold(0.0f64, |m, &q| m.max(q));
    let r = plogp(a) + plogp(b) + z_term - binary_entropy(q_max);
    r.clamp(0.0, 1.0)
}

/// Full pipeline: readout loss, logical projection, GHZ coefficients,
/// error rates, secret fraction, and the rate `K = r_∞ · P_Π / T` for a
/// state generated every `T` seconds.
pub fn key_rate(
    rho: &DensityState,
    t_avg: f64,
    enc: &LogicalEncoding,
    v: f64,
) -> Result<KeyRateReport> {
    if !(t_avg.is_finite() && t_avg > 0.0) {
        return Err(Error::invalid("key_rate: generation time must be finite and > 0"));
    }
    let (rho_pi, p_pass) = project_logical(rho, enc, v)?;
    let coeffs = ghz_coeffs(&rho_pi, enc)?;
    let rates = error_rates(&coeffs);
    let r_inf = secret_fraction(rates.q_z, rates.q_x, &rates.q_ab);
    let k = r_inf * p_pass / t_avg;
    Ok(KeyRateReport { p_pass, coeffs, rates, r_inf, k })
}

/// Joint state of two identical pairs generated in parallel, modes
/// `(1.A, 1.B, 2.A, 2.B)`, for [`LogicalEncoding::chain_pair_parallel`].
pub fn parallel_link_state(rho: &DensityState) -> Result<DensityState> {
    tensor_states(&rho.prefixed("1."), &rho.prefixed("2."))
}
