//! Dense complex linear algebra for the 2- and 4-dimensional Hilbert spaces
//! used by the spin models: Hermitian eigendecomposition, unitary matrix
//! exponentials, and first/second Fréchet derivatives of the exponential map.

use num_complex::Complex64 as C64;

use crate::Error;

/// Eigenvalue gap below which divided differences switch to the limit formula.
const DEGENERACY_TOL: f64 = 1e-9;

/// Small dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        CMatrix {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for a in 0..dim {
            m[(a, a)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[C64]]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (a, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "ragged rows");
            for (b, &v) in row.iter().enumerate() {
                m[(a, b)] = v;
            }
        }
        m
    }

    /// Real matrix promoted to complex.
    pub fn from_real(rows: &[&[f64]]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (a, row) in rows.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                m[(a, b)] = C64::new(v, 0.0);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> CMatrix {
        let mut out = Self::zeros(self.dim);
        for a in 0..self.dim {
            for b in 0..self.dim {
                out[(a, b)] = self[(b, a)].conj();
            }
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|a| self[(a, a)]).sum()
    }

    pub fn scale(&self, c: C64) -> CMatrix {
        CMatrix {
            dim: self.dim,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    pub fn add(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.dim, other.dim);
        CMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.dim, other.dim);
        CMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &CMatrix, c: f64) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * c;
        }
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.dim, other.dim);
        let n = self.dim;
        let mut out = Self::zeros(n);
        for a in 0..n {
            for c in 0..n {
                let lhs = self[(a, c)];
                if lhs == C64::new(0.0, 0.0) {
                    continue;
                }
                for b in 0..n {
                    out[(a, b)] += lhs * other[(c, b)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        let n = self.dim;
        let mut out = vec![C64::new(0.0, 0.0); n];
        for a in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for b in 0..n {
                acc += self[(a, b)] * v[b];
            }
            out[a] = acc;
        }
        out
    }

    /// Tr[self · other], cheaper than a full product.
    pub fn trace_mul(&self, other: &CMatrix) -> C64 {
        let n = self.dim;
        let mut acc = C64::new(0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                acc += self[(a, b)] * other[(b, a)];
            }
        }
        acc
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn kron(&self, other: &CMatrix) -> CMatrix {
        let (n, m) = (self.dim, other.dim);
        let mut out = Self::zeros(n * m);
        for a in 0..n {
            for b in 0..n {
                for c in 0..m {
                    for d in 0..m {
                        out[(a * m + c, b * m + d)] = self[(a, b)] * other[(c, d)];
                    }
                }
            }
        }
        out
    }

    /// (H + H†)/2.
    pub fn hermitian_part(&self) -> CMatrix {
        self.add(&self.adjoint()).scale(C64::new(0.5, 0.0))
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (a, b): (usize, usize)) -> &C64 {
        &self.data[a * self.dim + b]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (a, b): (usize, usize)) -> &mut C64 {
        &mut self.data[a * self.dim + b]
    }
}

/// Eigendecomposition of a Hermitian matrix: H = V diag(λ) V†.
#[derive(Debug, Clone)]
pub struct HermitianEig {
    /// Ascending eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// Unitary matrix whose columns are the eigenvectors.
    pub eigenvectors: CMatrix,
}

pub fn eig_hermitian(h: &CMatrix) -> Result<HermitianEig, Error> {
    if !h.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    let h = h.hermitian_part();
    let mut eig = if h.dim() == 2 {
        eig_hermitian_2x2(&h)
    } else {
        eig_hermitian_jacobi(&h)
    };
    sort_ascending(&mut eig);
    Ok(eig)
}

fn sort_ascending(eig: &mut HermitianEig) {
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMatrix::zeros(n);
    for (new, &old) in order.iter().enumerate() {
        for row in 0..n {
            vecs[(row, new)] = eig.eigenvectors[(row, old)];
        }
    }
    eig.eigenvalues = vals;
    eig.eigenvectors = vecs;
}

/// Closed-form 2x2 Hermitian eigendecomposition.
fn eig_hermitian_2x2(h: &CMatrix) -> HermitianEig {
    let a = h[(0, 0)].re;
    let d = h[(1, 1)].re;
    let b = h[(0, 1)];
    let bn = b.norm();
    if bn < 1e-300 {
        let mut eig = HermitianEig {
            eigenvalues: vec![a, d],
            eigenvectors: CMatrix::identity(2),
        };
        sort_ascending(&mut eig);
        return eig;
    }
    let mid = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + bn * bn).sqrt();
    let (lo, hi) = (mid - r, mid + r);
    // Pick the better-conditioned eigenvector formula for the top eigenvalue.
    let (v_hi, v_lo) = if (hi - a).abs() >= (hi - d).abs() {
        (
            [b, C64::new(hi - a, 0.0)],
            [C64::new(-(hi - a), 0.0), b.conj()],
        )
    } else {
        (
            [C64::new(hi - d, 0.0), b.conj()],
            [-b, C64::new(hi - d, 0.0)],
        )
    };
    let mut vecs = CMatrix::zeros(2);
    for (col, v) in [(0usize, v_lo), (1usize, v_hi)] {
        let norm = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
        vecs[(0, col)] = v[0] / norm;
        vecs[(1, col)] = v[1] / norm;
    }
    HermitianEig {
        eigenvalues: vec![lo, hi],
        eigenvectors: vecs,
    }
}

/// Cyclic Jacobi for complex Hermitian matrices of any small dimension.
fn eig_hermitian_jacobi(h: &CMatrix) -> HermitianEig {
    let n = h.dim();
    let mut a = h.clone();
    let mut v = CMatrix::identity(n);
    let scale = a.frobenius_norm().max(1e-300);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let abs_apq = apq.norm();
                if abs_apq < 1e-18 * scale {
                    continue;
                }
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let w = apq / abs_apq;
                let theta = (aqq - app) / (2.0 * abs_apq);
                let t = if theta >= 0.0 {
                    -1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Column update A <- A R with R = [[c, -s w], [s w~, c]] on (p, q).
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * c + akq * (w.conj() * s);
                    a[(k, q)] = akq * c - akp * (w * s);
                }
                // Row update A <- R† A.
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = apk * c + aqk * (w * s);
                    a[(q, k)] = aqk * c - apk * (w.conj() * s);
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * c + vkq * (w.conj() * s);
                    v[(k, q)] = vkq * c - vkp * (w * s);
                }
            }
        }
    }
    HermitianEig {
        eigenvalues: (0..n).map(|i| a[(i, i)].re).collect(),
        eigenvectors: v,
    }
}

fn step_phase(lambda: f64, dt: f64) -> C64 {
    C64::new(0.0, -lambda * dt).exp()
}

/// First divided difference of f(λ) = e^{-iλdt}.
fn dd1(x: f64, y: f64, dt: f64) -> C64 {
    if (x - y).abs() < DEGENERACY_TOL {
        C64::new(0.0, -dt) * step_phase(x, dt)
    } else {
        (step_phase(x, dt) - step_phase(y, dt)) / (x - y)
    }
}

/// Second divided difference of f(λ) = e^{-iλdt}, symmetric in its arguments.
fn dd2(x: f64, y: f64, z: f64, dt: f64) -> C64 {
    if (x - z).abs() >= DEGENERACY_TOL {
        (dd1(x, y, dt) - dd1(y, z, dt)) / (x - z)
    } else if (x - y).abs() >= DEGENERACY_TOL {
        // x ~ z, y distinct: f[x,x,y] = (f[x,y] - f'(x)) / (y - x)
        (dd1(x, y, dt) - C64::new(0.0, -dt) * step_phase(x, dt)) / (y - x)
    } else {
        // all coincident: f''(x)/2
        C64::new(-0.5 * dt * dt, 0.0) * step_phase(x, dt)
    }
}

/// e^{-iH dt} through the eigendecomposition; exactly unitary up to roundoff.
pub fn expm_unitary(h: &CMatrix, dt: f64) -> Result<CMatrix, Error> {
    if !dt.is_finite() {
        return Err(Error::InvalidMatrix("non-finite time step".into()));
    }
    let eig = eig_hermitian(h)?;
    Ok(rebuild(&eig, |a, _| {
        if a.0 == a.1 {
            step_phase(eig.eigenvalues[a.0], dt)
        } else {
            C64::new(0.0, 0.0)
        }
    }))
}

/// Directional derivative ∂/∂α e^{-i(H + αD)dt} at α = 0.
pub fn expm_frechet(h: &CMatrix, direction: &CMatrix, dt: f64) -> Result<CMatrix, Error> {
    let eig = eig_hermitian(h)?;
    let d_eig = to_eigenbasis(&eig, direction);
    Ok(rebuild(&eig, |(a, b), _| {
        d_eig[(a, b)] * dd1(eig.eigenvalues[a], eig.eigenvalues[b], dt)
    }))
}

/// Second directional derivative ∂²/∂α² e^{-i(H + αD)dt} at α = 0.
pub fn expm_frechet2(h: &CMatrix, direction: &CMatrix, dt: f64) -> Result<CMatrix, Error> {
    let eig = eig_hermitian(h)?;
    let d_eig = to_eigenbasis(&eig, direction);
    let n = h.dim();
    Ok(rebuild(&eig, |(a, b), _| {
        let mut acc = C64::new(0.0, 0.0);
        for c in 0..n {
            acc += d_eig[(a, c)]
                * d_eig[(c, b)]
                * dd2(eig.eigenvalues[a], eig.eigenvalues[c], eig.eigenvalues[b], dt);
        }
        acc * 2.0
    }))
}

fn to_eigenbasis(eig: &HermitianEig, m: &CMatrix) -> CMatrix {
    eig.eigenvectors.adjoint().matmul(&m.matmul(&eig.eigenvectors))
}

fn rebuild(eig: &HermitianEig, entry: impl Fn((usize, usize), ()) -> C64) -> CMatrix {
    let n = eig.eigenvalues.len();
    let mut core = CMatrix::zeros(n);
    for a in 0..n {
        for b in 0..n {
            core[(a, b)] = entry((a, b), ());
        }
    }
    eig.eigenvectors
        .matmul(&core.matmul(&eig.eigenvectors.adjoint()))
}

/// Variants of expm_* that reuse a cached eigendecomposition.
pub fn expm_unitary_from_eig(eig: &HermitianEig, dt: f64) -> CMatrix {
    rebuild(eig, |(a, b), _| {
        if a == b {
            step_phase(eig.eigenvalues[a], dt)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

pub fn expm_frechet_from_eig(eig: &HermitianEig, direction: &CMatrix, dt: f64) -> CMatrix {
    let d_eig = to_eigenbasis(eig, direction);
    rebuild(eig, |(a, b), _| {
        d_eig[(a, b)] * dd1(eig.eigenvalues[a], eig.eigenvalues[b], dt)
    })
}

pub fn expm_frechet2_from_eig(eig: &HermitianEig, direction: &CMatrix, dt: f64) -> CMatrix {
    let d_eig = to_eigenbasis(eig, direction);
    let n = eig.eigenvalues.len();
    rebuild(eig, |(a, b), _| {
        let mut acc = C64::new(0.0, 0.0);
        for c in 0..n {
            acc += d_eig[(a, c)]
                * d_eig[(c, b)]
                * dd2(eig.eigenvalues[a], eig.eigenvalues[c], eig.eigenvalues[b], dt);
        }
        acc * 2.0
    })
}

pub mod pauli {
    use super::CMatrix;
    use num_complex::Complex64 as C64;

    pub fn sigma_x() -> CMatrix {
        CMatrix::from_real(&[&[0.0, 1.0], &[1.0, 0.0]])
    }

    pub fn sigma_y() -> CMatrix {
        let i = C64::new(0.0, 1.0);
        let z = C64::new(0.0, 0.0);
        CMatrix::from_rows(&[&[z, -i], &[i, z]])
    }

    pub fn sigma_z() -> CMatrix {
        CMatrix::from_real(&[&[1.0, 0.0], &[0.0, -1.0]])
    }
}
