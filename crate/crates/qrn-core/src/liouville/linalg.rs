//! Dense complex linear-algebra kernels: Kronecker products, matrix
//! exponentials, LU solves, and a Jacobi eigensolver for Hermitian matrices.
//!
//! Every matrix handled here is small (dimension ≤ a few thousand, and the
//! exponentials stay ≤ 81×81), so the implementations favor robustness and
//! exactness over asymptotic cleverness.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Complex identity matrix.
pub(crate) fn identity(n: usize) -> Array2<C64> {
    Array2::from_diag_elem(n, C64::new(1.0, 0.0))
}

/// Kronecker product `a ⊗ b`.
pub(crate) fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            if aij == C64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

/// Conjugate transpose.
pub(crate) fn dagger(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|z| z.conj())
}

/// Element-wise complex conjugate.
pub(crate) fn conj(a: &Array2<C64>) -> Array2<C64> {
    a.mapv(|z| z.conj())
}

/// Matrix 1-norm (maximum absolute column sum).
pub(crate) fn one_norm(a: &Array2<C64>) -> f64 {
    let (r, c) = a.dim();
    let mut best = 0.0f64;
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..r {
            s += a[[i, j]].norm();
        }
        best = best.max(s);
    }
    best
}

/// Maximum absolute entry.
pub(crate) fn max_abs(a: &Array2<C64>) -> f64 {
    a.iter().fold(0.0f64, |m, z| m.max(z.norm()))
}

/// LU factorization with partial pivoting.
pub(crate) struct Lu {
    lu: Array2<C64>,
    /// Row swapped with row `k` at elimination step `k`.
    piv: Vec<usize>,
}

/// Factor a square matrix; fails on pivots below `1e-13 × scale`.
pub(crate) fn lu_factor(a: &Array2<C64>) -> Result<Lu> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::invalid("lu_factor: matrix must be square"));
    }
    let scale = one_norm(a).max(1.0);
    let mut lu = a.clone();
    let mut piv = vec![0usize; n];
    for k in 0..n {
        let mut p = k;
        let mut best = lu[[k, k]].norm();
        for i in (k + 1)..n {
            let v = lu[[i, k]].norm();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < 1e-13 * scale {
            return Err(Error::Numeric {
                what: "singular system in LU factorization".into(),
                residual: best,
            });
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                let tmp = lu[[k, j]];
                lu[[k, j]] = lu[[p, j]];
                lu[[p, j]] = tmp;
            }
        }
        let inv_pivot = C64::new(1.0, 0.0) / lu[[k, k]];
        for i in (k + 1)..n {
            let f = lu[[i, k]] * inv_pivot;
            lu[[i, k]] = f;
            if f != C64::new(0.0, 0.0) {
                for j in (k + 1)..n {
                    let lkj = lu[[k, j]];
                    lu[[i, j]] -= f * lkj;
                }
            }
        }
    }
    Ok(Lu { lu, piv })
}

impl Lu {
    /// Solve `A x = b` in place.
    pub(crate) fn solve_vec(&self, b: &mut Array1<C64>) {
        let n = self.lu.nrows();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
        }
        for k in 0..n {
            let bk = b[k];
            if bk != C64::new(0.0, 0.0) {
                for i in (k + 1)..n {
                    let l = self.lu[[i, k]];
                    b[i] -= l * bk;
                }
            }
        }
        for k in (0..n).rev() {
            b[k] /= self.lu[[k, k]];
            let bk = b[k];
            if bk != C64::new(0.0, 0.0) {
                for i in 0..k {
                    let u = self.lu[[i, k]];
                    b[i] -= u * bk;
                }
            }
        }
    }

    /// Solve `A X = B` column by column.
    pub(crate) fn solve_mat(&self, b: &Array2<C64>) -> Array2<C64> {
        let mut out = b.clone();
        let ncols = b.ncols();
        for j in 0..ncols {
            let mut col = out.column(j).to_owned();
            self.solve_vec(&mut col);
            out.column_mut(j).assign(&col);
        }
        out
    }
}

/// Solve `A x = b` for a single right-hand side.
pub(crate) fn solve_vec(a: &Array2<C64>, b: &Array1<C64>) -> Result<Array1<C64>> {
    let lu = lu_factor(a)?;
    let mut x = b.clone();
    lu.solve_vec(&mut x);
    Ok(x)
}

/// Matrix exponential by Padé-13 with scaling and squaring.
///
/// Accurate to near machine precision for the matrix sizes used here; the
/// denominator solve uses the partial-pivot LU above.
pub(crate) fn expm(a: &Array2<C64>) -> Array2<C64> {
    // Padé-13 coefficients.
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 5.371920351148152;

    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm: matrix must be square");
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scale = C64::new(0.5f64.powi(s), 0.0);
    let m = a.mapv(|z| z * scale);

    let m2 = m.dot(&m);
    let m4 = m2.dot(&m2);
    let m6 = m4.dot(&m2);

    let id = identity(n);
    let cb = |k: usize| C64::new(B[k], 0.0);

    let inner_u = m6.mapv(|z| z * cb(13)) + m4.mapv(|z| z * cb(11)) + m2.mapv(|z| z * cb(9));
    let u_poly = m6.dot(&inner_u)
        + m6.mapv(|z| z * cb(7))
        + m4.mapv(|z| z * cb(5))
        + m2.mapv(|z| z * cb(3))
        + id.mapv(|z| z * cb(1));
    let u = m.dot(&u_poly);

    let inner_v = m6.mapv(|z| z * cb(12)) + m4.mapv(|z| z * cb(10)) + m2.mapv(|z| z * cb(8));
    let v = m6.dot(&inner_v)
        + m6.mapv(|z| z * cb(6))
        + m4.mapv(|z| z * cb(4))
        + m2.mapv(|z| z * cb(2))
        + id.mapv(|z| z * cb(0));

    let denom = &v - &u;
    let numer = &v + &u;
    let lu = lu_factor(&denom).expect("expm: Padé denominator is singular");
    let mut f = lu.solve_mat(&numer);
    for _ in 0..s {
        f = f.dot(&f);
    }
    f
}

/// Eigenvalues of a Hermitian matrix by cyclic complex Jacobi rotations.
///
/// Returns the eigenvalues sorted in ascending order. Used for positivity
/// checks and diagnostics; eigenvectors are never needed in this crate.
pub(crate) fn eigh_values(a: &Array2<C64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh_values: matrix must be square");
    if n == 0 {
        return vec![];
    }
    if n == 1 {
        return vec![a[[0, 0]].re];
    }
    // Work on the Hermitian part; inputs are Hermitian to rounding already.
    let mut m = a.mapv(|z| z * C64::new(0.5, 0.0)) + dagger(a).mapv(|z| z * C64::new(0.5, 0.0));
    let scale = max_abs(&m).max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].norm());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                let b = apq.norm();
                if b <= tol * 1e-2 {
                    continue;
                }
                let phase = apq / b; // e^{iφ} with a_pq = b·e^{iφ}
                let app = m[[p, p]].re;
                let aqq = m[[q, q]].re;
                let theta = (aqq - app) / (2.0 * b);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // G is identity except G[p,p]=c, G[p,q]=s,
                // G[q,p]=−s·e^{−iφ}, G[q,q]=c·e^{−iφ}; apply M ← G† M G.
                let gqp = -C64::new(s, 0.0) * phase.conj();
                let gqq = C64::new(c, 0.0) * phase.conj();
                let gpp = C64::new(c, 0.0);
                let gpq = C64::new(s, 0.0);
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = mip * gpp + miq * gqp;
                    m[[i, q]] = mip * gpq + miq * gqq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = gpp.conj() * mpj + gqp.conj() * mqj;
                    m[[q, j]] = gpq.conj() * mpj + gqq.conj() * mqj;
                }
                m[[p, q]] = C64::new(0.0, 0.0);
                m[[q, p]] = C64::new(0.0, 0.0);
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| m[[i, i]].re).collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vals
}
