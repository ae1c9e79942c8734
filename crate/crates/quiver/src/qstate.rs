//! Plan amplitudes and their joint couplings.
//!
//! A plan state is a real vector on the unit L2 sphere; squared entries are
//! plan probabilities. A joint state over communication plans x mobility plans
//! is a real matrix with unit Frobenius norm; squared entries form the joint
//! probability table whose marginals and mutual information drive the
//! cross-layer coupling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;
/// Probability mass below this is dropped from entropy-like sums (0*log 0 = 0).
pub const MASS_FLOOR: f64 = 1e-12;

/// Real amplitude vector with unit L2 norm and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Amplitudes(DVector<f64>);

impl Amplitudes {
    /// Wraps a vector already known to be unit-norm (debug-checked).
    fn from_unit(v: DVector<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "norm {}", v.norm());
        Amplitudes(v)
    }

    /// Uniform superposition: every plan gets amplitude 1/sqrt(k).
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroVector { norm: 0.0 });
        }
        let a = 1.0 / (k as f64).sqrt();
        Ok(Amplitudes(DVector::from_element(k, a)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Joint amplitude matrix (communication plans x mobility plans) with unit
/// Frobenius norm. Stored as a free matrix: it is initialized as an outer
/// product but gradient updates may break separability, which is exactly what
/// makes its mutual information meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAmplitude(DMatrix<f64>);

impl JointAmplitude {
    /// Wraps a matrix, renormalizing to unit Frobenius norm.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "joint amplitude",
            });
        }
        let n = m.norm();
        if n <= NORM_FLOOR {
            return Err(Error::ZeroVector { norm: n });
        }
        Ok(JointAmplitude(m / n))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Probability vector over plans (nonnegative, sums to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanDistribution(DVector<f64>);

impl PlanDistribution {
    /// Crate-internal constructor for vectors already validated as
    /// probability distributions.
    pub(crate) fn new_unchecked(v: DVector<f64>) -> Self {
        PlanDistribution(v)
    }

    /// Validating constructor: entries must be finite and nonnegative and
    /// sum to 1 within 1e-9.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyCandidates {
                context: "plan distribution",
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite {
                context: "plan distribution",
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMarginals(format!(
                "plan probabilities sum to {sum}, need 1"
            )));
        }
        Ok(PlanDistribution(DVector::from_row_slice(probs)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Index of the largest probability; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.0.as_slice())
    }
}

/// First index of the maximum value (ties -> lowest index).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// First index of the minimum value (ties -> lowest index).
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Scales a vector onto the unit sphere.
///
/// Errors: `ZeroVector` when the norm is at or below `NORM_FLOOR`;
/// `NonFinite` when any entry is NaN or infinite.
pub fn normalize(v: &DVector<f64>) -> Result<Amplitudes> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "normalize",
        });
    }
    let n = v.norm();
    if n <= NORM_FLOOR {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(Amplitudes::from_unit(v / n))
}

/// Bounded nonlinearities available to superposition initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Hyperbolic tangent, range (-1, 1).
    Tanh,
    /// Logistic sigmoid, range (0, 1).
    Sigmoid,
}

impl Activation {
    /// Applies the nonlinearity elementwise.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Builds the initial superposition `sigma(W z + b)` scaled to unit L2 norm.
///
/// Errors: `DimMismatch` when the shapes of `weight`, `features`, and `bias`
/// disagree; `ZeroVector` when the activation output has norm at or below
/// `NORM_FLOOR`.
pub fn init_superposition(
    features: &DVector<f64>,
    weight: &DMatrix<f64>,
    bias: &DVector<f64>,
    activation: Activation,
) -> Result<Amplitudes> {
    if weight.ncols() != features.len() || weight.nrows() != bias.len() {
        return Err(Error::DimMismatch {
            context: "superposition init",
            detail: format!(
                "weight {}x{}, features {}, bias {}",
                weight.nrows(),
                weight.ncols(),
                features.len(),
                bias.len()
            ),
        });
    }
    let pre = weight * features + bias;
    let out = pre.map(|x| activation.apply(x));
    normalize(&out)
}

/// Squared amplitudes as a probability distribution over plans.
pub fn probabilities(psi: &Amplitudes) -> PlanDistribution {
    PlanDistribution(psi.0.map(|x| x * x))
}

/// Outer-product joint encoding of a communication state and a mobility state.
pub fn joint_encode(comm: &Amplitudes, mobility: &Amplitudes) -> JointAmplitude {
    JointAmplitude(&comm.0 * mobility.0.transpose())
}

/// Row and column marginals of the squared joint table.
pub fn marginals(joint: &JointAmplitude) -> (PlanDistribution, PlanDistribution) {
    let m = &joint.0;
    let mut row = DVector::zeros(m.nrows());
    let mut col = DVector::zeros(m.ncols());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let p = m[(i, j)] * m[(i, j)];
            row[i] += p;
            col[j] += p;
        }
    }
    (PlanDistribution(row), PlanDistribution(col))
}

/// Mutual information of the squared joint table, in nats.
///
/// Terms with joint mass below `MASS_FLOOR` are dropped (the 0*log 0 = 0
/// convention). `NonFinite` is returned if a retained term degenerates, which
/// cannot happen for a normalized table but guards corrupted input.
pub fn mutual_information(joint: &JointAmplitude) -> Result<f64> {
    let (row, col) = marginals(joint);
    let m = &joint.0;
    let mut info = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let p = m[(i, j)] * m[(i, j)];
            if p < MASS_FLOOR {
                continue;
            }
            let denom = row.get(i) * col.get(j);
            let term = p * (p / denom).ln();
            if !term.is_finite() {
                return Err(Error::NonFinite {
                    context: "mutual information",
                });
            }
            info += term;
        }
    }
    // Clamp tiny negative values caused by rounding; I >= 0 analytically.
    Ok(if info < 0.0 && info > -1e-12 { 0.0 } else { info })
}

/// Gradients of mutual information with respect to the factor amplitudes.
///
/// The joint is parameterized as `Y = psi_c * psi_m^T + R` where the canonical
/// factors are the square roots of the marginals and `R` is the residual that
/// makes the identity exact. The returned vectors are dI/d(psi_c) and
/// dI/d(psi_m), where I is the mutual information of the renormalized squared
/// table, differentiated through the renormalization.
pub fn mi_gradients(joint: &JointAmplitude) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = &joint.0;
    let (nr, nc) = (m.nrows(), m.ncols());
    let s: f64 = m.iter().map(|x| x * x).sum();
    if s <= NORM_FLOOR {
        return Err(Error::ZeroVector { norm: s.sqrt() });
    }
    let (row, col) = marginals(joint);
    let info = mutual_information(joint)?;
    let psi_c: Vec<f64> = row.as_slice().iter().map(|&p| p.sqrt()).collect();
    let psi_m: Vec<f64> = col.as_slice().iter().map(|&p| p.sqrt()).collect();

    // dI/dY_ij = (2 Y_ij / S) * (ln(p_ij / (r_i c_j)) - I); terms with
    // negligible mass contribute 0 in the limit Y -> 0.
    let mut g_c = DVector::zeros(nr);
    let mut g_m = DVector::zeros(nc);
    for j in 0..nc {
        for i in 0..nr {
            let y = m[(i, j)];
            let p = y * y / s;
            if p < MASS_FLOOR {
                continue;
            }
            let l = (p / (row.get(i) * col.get(j))).ln();
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: "mutual information gradient",
                });
            }
            let didy = 2.0 * y / s * (l - info);
            g_c[i] += didy * psi_m[j];
            g_m[j] += didy * psi_c[i];
        }
    }
    Ok((g_c, g_m))
}

/// Entangles a state with its neighbors: `psi <- psi .* prod_j (1 + E_j psi_j)`
/// followed by renormalization. Couplings are expected in [-1, 1]; the guard
/// against a fully annihilated state is the `ZeroVector` error.
pub fn entangle_neighbors(
    psi: &Amplitudes,
    neighbors: &[&Amplitudes],
    couplings: &[f64],
) -> Result<Amplitudes> {
    if neighbors.len() != couplings.len() {
        return Err(Error::LengthMismatch {
            context: "entangle couplings",
            expected: neighbors.len(),
            got: couplings.len(),
        });
    }
    let k = psi.len();
    let mut v = psi.0.clone();
    for (nb, &e) in neighbors.iter().zip(couplings) {
        if nb.len() != k {
            return Err(Error::LengthMismatch {
                context: "entangle neighbor",
                expected: k,
                got: nb.len(),
            });
        }
        if !e.is_finite() {
            return Err(Error::NonFinite {
                context: "entangle coupling",
            });
        }
        for i in 0..k {
            v[i] *= 1.0 + e * nb.0[i];
        }
    }
    normalize(&v)
}

/// Collapses to the basis state `e_k` of dimension `len`.
pub fn collapse_plan(k: usize, len: usize) -> Result<Amplitudes> {
    if k >= len {
        return Err(Error::DimMismatch {
            context: "collapse",
            detail: format!("plan index {k} out of range for {len} plans"),
        });
    }
    let mut v = DVector::zeros(len);
    v[k] = 1.0;
    Ok(Amplitudes::from_unit(v))
}
