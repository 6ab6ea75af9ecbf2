//! Memory decay: Lindblad generators, exact propagators and exact
//! resolvents for per-mode amplitude damping or dephasing.
//!
//! Both models decompose over modes, which this module exploits twice:
//!
//! - `exp(𝓛t)` factorizes into single-mode channels, applied mode by mode
//!   without materializing a joint superoperator;
//! - `(s−𝓛)⁻¹` is computed matrix-free. For dephasing 𝓛 is diagonal in the
//!   Fock basis. For amplitude damping, splitting 𝓛 into its diagonal part
//!   `D` and the quantum-jump part `N` (which strictly lowers the total
//!   occupation of row and column index by one each) gives the finite
//!   Neumann series `(s−𝓛)⁻¹ = Σ_j [(s−D)⁻¹N]^j (s−D)⁻¹`, exact after at
//!   most `n_max · modes` jump applications.
//!
//! The dense-LU route ([`crate::liouville::resolvent_apply`] on a generator
//! from [`Decay::generator`]) stays available as an independent
//! cross-check; the two are compared in this module's tests and must agree
//! to solver precision.

use ndarray::Array2;

use super::linalg;
use super::{
    annihilation, cr, dissipator, embed_operator, number_operator, C64, DensityState, ModeSpace,
    SuperOp, TraceFlag, ZERO,
};
use crate::error::{Error, Result};

/// Which single-mode Lindblad dissipator each memory experiences.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecayModel {
    /// `𝓓[a]`: photon loss at rate γ (coherence time 1/γ).
    AmplitudeDamping,
    /// `𝓓[a†a]`: phase diffusion at rate γ.
    Dephasing,
}

/// Per-mode decay rates on a fixed-arity space (`rates[k]` acts on mode
/// `k`; zero disables decay for that mode).
#[derive(Clone, Debug)]
pub struct Decay {
    model: DecayModel,
    rates: Vec<f64>,
}

impl Decay {
    pub fn new(model: DecayModel, rates: Vec<f64>) -> Result<Self> {
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid("Decay: rates must be finite and ≥ 0"));
        }
        Ok(Decay { model, rates })
    }

    /// Same rate on every mode.
    pub fn uniform(model: DecayModel, rate: f64, mode_count: usize) -> Result<Self> {
        Decay::new(model, vec![rate; mode_count])
    }

    /// No decay on any mode.
    pub fn none(mode_count: usize) -> Self {
        Decay { model: DecayModel::AmplitudeDamping, rates: vec![0.0; mode_count] }
    }

    pub fn model(&self) -> DecayModel {
        self.model
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Decay restricted to a mode subset, in subset order.
    pub fn select(&self, positions: &[usize]) -> Decay {
        Decay {
            model: self.model,
            rates: positions.iter().map(|&p| self.rates[p]).collect(),
        }
    }

    fn check_space(&self, space: &ModeSpace) -> Result<()> {
        if self.rates.len() != space.mode_count() {
            return Err(Error::invalid(format!(
                "Decay: {} rates for a {}-mode space",
                self.rates.len(),
                space.mode_count()
            )));
        }
        Ok(())
    }

    fn jump_single(&self, n_max: usize) -> Result<Array2<C64>> {
        match self.model {
            DecayModel::AmplitudeDamping => annihilation(n_max),
            DecayModel::Dephasing => number_operator(n_max),
        }
    }

    /// Dense Lindblad generator `𝓛 = Σ_k γ_k 𝓓[c_k]` as a superoperator.
    ///
    /// Materializes a `(d², d²)` matrix; intended for small spaces (≤ 3
    /// modes at `n_max = 2`). The hot paths use [`Decay::propagate`] and
    /// [`Decay::resolvent`], which never form this matrix.
    pub fn generator(&self, space: &ModeSpace) -> Result<SuperOp> {
        self.check_space(space)?;
        let d = space.dim();
        let mut mat = Array2::<C64>::zeros((d * d, d * d));
        let jump = self.jump_single(space.n_max())?;
        for (k, &g) in self.rates.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let embedded = embed_operator(space, &jump, k)?;
            let dis = dissipator(space, &embedded)?;
            mat = mat + dis.mat().mapv(|z| z * cr(g));
        }
        SuperOp::new(space.clone(), space.clone(), mat, TraceFlag::General)
    }

    /// Exact propagation `ρ ↦ e^{𝓛 dt} ρ`, mode by mode.
    pub fn propagate(&self, rho: &DensityState, dt: f64) -> Result<DensityState> {
        self.check_space(rho.space())?;
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::invalid("Decay::propagate: dt must be finite and ≥ 0"));
        }
        if dt == 0.0 {
            return Ok(rho.clone());
        }
        match self.model {
            DecayModel::Dephasing => {
                // Diagonal in the Fock basis: scale each matrix element.
                let space = rho.space().clone();
                let d = space.dim();
                let occ: Vec<Vec<usize>> = (0..d).map(|i| space.occupations(i)).collect();
                let mut mat = rho.mat().clone();
                for r in 0..d {
                    for c in 0..d {
                        let mut rate = 0.0;
                        for (k, &g) in self.rates.iter().enumerate() {
                            let diff = occ[r][k] as f64 - occ[c][k] as f64;
                            rate += g * diff * diff * 0.5;
                        }
                        mat[[r, c]] *= cr((-rate * dt).exp());
                    }
                }
                DensityState::new(space, mat)
            }
            DecayModel::AmplitudeDamping => {
                // Exact closed form: |r⟩⟨c| of mode k draws from |r+j⟩⟨c+j|
                // with weight √(C(r+j,j)C(c+j,j)) η^{(r+c)/2} (1−η)^j,
                // η = e^{−γ dt}. Number subspaces are invariant, so the
                // truncated channel coincides with this restriction.
                let space = rho.space().clone();
                let d = space.dim();
                let m = space.mode_count();
                let n_max = space.n_max();
                let occ: Vec<Vec<usize>> = (0..d).map(|i| space.occupations(i)).collect();
                let b = space.fock_dim();
                let mut stride = vec![0usize; m];
                for k in 0..m {
                    stride[k] = b.pow((m - 1 - k) as u32);
                }
                let mut binom = vec![vec![0.0f64; n_max + 1]; n_max + 1];
                for n in 0..=n_max {
                    binom[n][0] = 1.0;
                    for j in 1..=n {
                        binom[n][j] = binom[n - 1][j - 1]
                            + if j <= n - 1 { binom[n - 1][j] } else { 0.0 };
                    }
                }
                let mut cur = rho.mat().clone();
                for (k, &g) in self.rates.iter().enumerate() {
                    if g * dt == 0.0 {
                        continue;
                    }
                    let eta = (-g * dt).exp();
                    let ehalf = (-g * dt * 0.5).exp();
                    let s_k = stride[k];
                    let mut next = Array2::<C64>::zeros((d, d));
                    for r in 0..d {
                        for c in 0..d {
                            let rk = occ[r][k];
                            let ck = occ[c][k];
                            let mut acc =
                                cur[[r, c]] * cr(ehalf.powi((rk + ck) as i32));
                            let jmax = n_max - rk.max(ck);
                            for j in 1..=jmax {
                                let w = (binom[rk + j][j] * binom[ck + j][j]).sqrt()
                                    * ehalf.powi((rk + ck) as i32)
                                    * (1.0 - eta).powi(j as i32);
                                acc += cur[[r + j * s_k, c + j * s_k]] * cr(w);
                            }
                            next[[r, c]] = acc;
                        }
                    }
                    cur = next;
                }
                DensityState::new(space, cur)
            }
        }
    }

    /// Exact resolvent image `(s − 𝓛)⁻¹ ρ` for `s > 0`, matrix-free.
    pub fn resolvent(&self, s: f64, rho: &DensityState) -> Result<DensityState> {
        self.check_space(rho.space())?;
        if !(s > 0.0) {
            return Err(Error::invalid("Decay::resolvent: requires s > 0"));
        }
        let space = rho.space().clone();
        let d = space.dim();
        let m = space.mode_count();
        let occ: Vec<Vec<usize>> = (0..d).map(|i| space.occupations(i)).collect();

        match self.model {
            DecayModel::Dephasing => {
                let mut mat = rho.mat().clone();
                for r in 0..d {
                    for c in 0..d {
                        let mut rate = s;
                        for (k, &g) in self.rates.iter().enumerate() {
                            let diff = occ[r][k] as f64 - occ[c][k] as f64;
                            rate += g * diff * diff * 0.5;
                        }
                        mat[[r, c]] /= cr(rate);
                    }
                }
                let mut out = DensityState::new(space, mat)?;
                out.hermitize();
                Ok(out)
            }
            DecayModel::AmplitudeDamping => {
                // diag(r,c) = s + Σ_k γ_k (r_k + c_k)/2
                let diag = |r: usize, c: usize| -> f64 {
                    let mut acc = s;
                    for (k, &g) in self.rates.iter().enumerate() {
                        acc += g * (occ[r][k] + occ[c][k]) as f64 * 0.5;
                    }
                    acc
                };
                // Per-mode index stride in the Fock basis.
                let b = space.fock_dim();
                let mut stride = vec![0usize; m];
                for k in 0..m {
                    stride[k] = b.pow((m - 1 - k) as u32);
                }
                let mut x = Array2::<C64>::zeros((d, d));
                for r in 0..d {
                    for c in 0..d {
                        x[[r, c]] = rho.mat()[[r, c]] / cr(diag(r, c));
                    }
                }
                let mut acc = x.clone();
                let max_sweeps = space.n_max() * m + 1;
                for _ in 0..max_sweeps {
                    let mut y = Array2::<C64>::zeros((d, d));
                    let mut any = false;
                    for r in 0..d {
                        for c in 0..d {
                            let v = x[[r, c]];
                            if v == ZERO {
                                continue;
                            }
                            for (k, &g) in self.rates.iter().enumerate() {
                                if g == 0.0 || occ[r][k] == 0 || occ[c][k] == 0 {
                                    continue;
                                }
                                let coeff = g * ((occ[r][k] * occ[c][k]) as f64).sqrt();
                                y[[r - stride[k], c - stride[k]]] += v * cr(coeff);
                                any = true;
                            }
                        }
                    }
                    if !any {
                        break;
                    }
                    for r in 0..d {
                        for c in 0..d {
                            y[[r, c]] /= cr(diag(r, c));
                        }
                    }
                    acc = acc + &y;
                    x = y;
                }
                let mut out = DensityState::new(space, acc)?;
                out.hermitize();
                Ok(out)
            }
        }
    }
}

/// Single-mode decay channel `e^{γ t 𝓓[c]}` as a `(B², B²)` matrix.
pub fn single_mode_channel(
    model: DecayModel,
    rate: f64,
    n_max: usize,
    dt: f64,
) -> Result<Array2<C64>> {
    if !(rate >= 0.0 && dt >= 0.0) || !(rate * dt).is_finite() {
        return Err(Error::invalid("single_mode_channel: need finite rate·dt ≥ 0"));
    }
    let b = n_max + 1;
    match model {
        DecayModel::AmplitudeDamping => {
            let space = ModeSpace::new(n_max, vec![super::ModeLabel::memory("m")])?;
            let dis = dissipator(&space, &annihilation(n_max)?)?;
            Ok(linalg::expm(&dis.mat().mapv(|z| z * cr(rate * dt))))
        }
        DecayModel::Dephasing => {
            let mut mat = Array2::zeros((b * b, b * b));
            for c in 0..b {
                for r in 0..b {
                    let diff = r as f64 - c as f64;
                    let idx = c * b + r;
                    mat[[idx, idx]] = cr((-rate * dt * diff * diff * 0.5).exp());
                }
            }
            Ok(mat)
        }
    }
}
