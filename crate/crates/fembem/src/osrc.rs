//! On-surface radiation condition (OSRC) operators.
//!
//! The exterior Dirichlet-to-Neumann map is localised as
//! `ik (I + Delta_Gamma / k_eps^2)^{1/2}` with a damped wavenumber
//! `k_eps = k (1 + i eps)`, and the square root is replaced by a
//! rotated-branch Pade approximant. Each Pade term turns into one sparse
//! surface system `(M + B_j X) w_j = X u` with `X = -K_LB / k_eps^2`, which
//! is factorised once and reused, so applying the operator costs a handful
//! of sparse triangular solves. The NtD map uses the same rotated family
//! applied to the reciprocal square root: `R(z)/(1+z)` expanded in partial
//! fractions, whose poles are the `-1/B_j` plus one closure pole at `z = -1`
//! (hence one extra factorisation).

use num_complex::Complex64;

use crate::fem::{assemble_surface_laplacian, assemble_surface_mass};
use crate::mesh::Surface;
use crate::sparse::{ilu_factorize, CsrMatrix, IluFactorization};
use crate::{Error, Result};

/// Damping rule from the benchmark setup: `eps = 0.4 (kL)^{-2/3}`.
pub fn default_damping(k: f64, characteristic_length: f64) -> Result<f64> {
    if !(k > 0.0) || !(characteristic_length > 0.0) {
        return Err(Error::Osrc(format!(
            "damping needs positive wavenumber and length (k={k}, L={characteristic_length})"
        )));
    }
    Ok(0.4 * (k * characteristic_length).powf(-2.0 / 3.0))
}

/// Default characteristic length of a scatterer: the radius of the sphere
/// circumscribing its bounding box.
pub fn characteristic_length(surface: &Surface) -> f64 {
    let mut lo = surface.points[0];
    let mut hi = surface.points[0];
    for p in &surface.points {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(p[axis]);
            hi[axis] = hi[axis].max(p[axis]);
        }
    }
    0.5 * (hi - lo).norm()
}

/// Rotated-branch Pade coefficients for `sqrt(1+z)`.
///
/// Starting from the real `[N/N]` family `a_j = 2/(2N+1) sin^2(j pi/(2N+1))`,
/// `b_j = cos^2(j pi/(2N+1))`, the branch cut is rotated by `theta` through
/// `z0 = e^{-i theta} - 1`, giving `R(z) = C0 + sum_j A_j z / (1 + B_j z)`.
pub fn pade_sqrt_coefficients(
    pade_order: usize,
    theta: f64,
) -> (Complex64, Vec<(Complex64, Complex64)>) {
    assert!(pade_order >= 1, "pade order must be at least one");
    let n = pade_order as f64;
    let z0 = Complex64::new(0.0, -theta).exp() - 1.0;
    let half_turn = Complex64::new(0.0, 0.5 * theta).exp();
    let mut c0 = Complex64::new(1.0, 0.0);
    let mut terms = Vec::with_capacity(pade_order);
    for j in 1..=pade_order {
        let angle = j as f64 * std::f64::consts::PI / (2.0 * n + 1.0);
        let a = 2.0 / (2.0 * n + 1.0) * angle.sin().powi(2);
        let b = angle.cos().powi(2);
        let denom = 1.0 + b * z0;
        c0 += a * z0 / denom;
        let big_a = a / (half_turn * denom * denom);
        let big_b = Complex64::new(0.0, -theta).exp() * b / denom;
        terms.push((big_a, big_b));
    }
    (half_turn * c0, terms)
}

/// Partial fractions of `R(z)/(1+z)`: the reciprocal-square-root family
/// used for the NtD map. Returns the closure weight (pole at `z = -1`) and
/// per-term weights sharing the DtN poles `-1/B_j`.
fn ntd_partial_fractions(
    c0: Complex64,
    terms: &[(Complex64, Complex64)],
) -> (Complex64, Vec<(Complex64, Complex64)>) {
    let mut closure = c0;
    let mut out = Vec::with_capacity(terms.len());
    for &(a, b) in terms {
        closure += a / (b - 1.0);
        out.push((a / (Complex64::new(1.0, 0.0) - b), b));
    }
    (closure, out)
}

/// Parameters of the OSRC localisation.
#[derive(Clone, Debug)]
pub struct OsrcConfig {
    /// Number of Pade terms `N_p`.
    pub pade_order: usize,
    /// Branch rotation angle in radians.
    pub branch_angle: f64,
    /// Damping `eps` of the complexified wavenumber.
    pub damping: f64,
    /// `k (1 + i eps)`.
    pub k_eps: Complex64,
    /// Characteristic length `L` of the scatterer.
    pub characteristic_length: f64,
    /// The physical exterior wavenumber.
    pub wavenumber: f64,
}

impl OsrcConfig {
    /// Builds a validated configuration; `damping = None` applies the
    /// `0.4 (kL)^{-2/3}` benchmark rule.
    pub fn new(
        wavenumber: f64,
        pade_order: usize,
        branch_angle: f64,
        characteristic_length: f64,
        damping: Option<f64>,
    ) -> Result<Self> {
        if !(wavenumber > 0.0) {
            return Err(Error::Osrc(format!("wavenumber must be positive, got {wavenumber}")));
        }
        if !(characteristic_length > 0.0) {
            return Err(Error::Osrc(format!(
                "characteristic length must be positive, got {characteristic_length}"
            )));
        }
        if pade_order < 1 {
            return Err(Error::Osrc("pade order must be at least one".into()));
        }
        if !(branch_angle > 0.0 && branch_angle < std::f64::consts::PI) {
            return Err(Error::Osrc(format!(
                "branch angle must lie in (0, pi), got {branch_angle}"
            )));
        }
        let damping = match damping {
            Some(eps) => {
                if !(eps > 0.0) {
                    return Err(Error::Osrc(format!("damping must be positive, got {eps}")));
                }
                eps
            }
            None => default_damping(wavenumber, characteristic_length)?,
        };
        Ok(Self {
            pade_order,
            branch_angle,
            damping,
            k_eps: wavenumber * Complex64::new(1.0, damping),
            characteristic_length,
            wavenumber,
        })
    }

    /// Benchmark defaults: two Pade terms, branch cut `pi/3`, damped
    /// wavenumber from the `0.4 (kL)^{-2/3}` rule.
    pub fn benchmark(wavenumber: f64, characteristic_length: f64) -> Result<Self> {
        Self::new(
            wavenumber,
            2,
            std::f64::consts::FRAC_PI_3,
            characteristic_length,
            None,
        )
    }
}

/// Which boundary map the operator localises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OsrcKind {
    /// `ik (I + Delta_Gamma/k_eps^2)^{1/2}`.
    DtN,
    /// `(1/ik) (I + Delta_Gamma/k_eps^2)^{-1/2}`.
    NtD,
}

/// A factorised OSRC operator acting on surface P1 coefficient vectors.
///
/// Immutable after assembly; `apply` only performs read-only triangular
/// solves and can be called concurrently.
pub struct OsrcOperator {
    kind: OsrcKind,
    sign: f64,
    config: OsrcConfig,
    mass: CsrMatrix,
    /// `X = -K_LB / k_eps^2`.
    x: CsrMatrix,
    /// Per-Pade-term `(weight, LU of M + B_j X)`.
    terms: Vec<(Complex64, IluFactorization)>,
    /// NtD closure pole `(weight, LU of M + X)`.
    closure: Option<(Complex64, IluFactorization)>,
    /// Direct multiple of the input (DtN only: `C0`).
    constant: Complex64,
    /// `ik` (DtN) or `1/(ik)` (NtD), including the sign field.
    scale: Complex64,
    mass_lu: IluFactorization,
}

impl OsrcOperator {
    /// Assembles and factorises the operator on `surface`. `sign` is +1 for
    /// the map itself or -1 for its negative (the regulariser convention).
    pub fn assemble(
        kind: OsrcKind,
        sign: f64,
        surface: &Surface,
        config: &OsrcConfig,
    ) -> Result<Self> {
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::Osrc(format!("sign must be +1 or -1, got {sign}")));
        }
        let mass = assemble_surface_mass(surface);
        let stiffness = assemble_surface_laplacian(surface);
        let mut x = stiffness;
        x.scale(-Complex64::new(1.0, 0.0) / (config.k_eps * config.k_eps));

        let (c0, dtn_terms) = pade_sqrt_coefficients(config.pade_order, config.branch_angle);
        let factorize = |b: Complex64| -> Result<IluFactorization> {
            ilu_factorize(&mass.add_scaled(&x, b), 0.0).map_err(|e| {
                Error::Osrc(format!("singular Pade-term factorisation (B={b}): {e}"))
            })
        };
        let ik = Complex64::new(0.0, config.wavenumber);
        let (terms, closure, constant, scale) = match kind {
            OsrcKind::DtN => {
                let terms = dtn_terms
                    .iter()
                    .map(|&(a, b)| Ok((a, factorize(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                (terms, None, c0, ik * sign)
            }
            OsrcKind::NtD => {
                let (closure_weight, ntd_terms) = ntd_partial_fractions(c0, &dtn_terms);
                let terms = ntd_terms
                    .iter()
                    .map(|&(w, b)| Ok((w, factorize(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                let closure = Some((closure_weight, factorize(Complex64::new(1.0, 0.0))?));
                (terms, closure, Complex64::new(0.0, 0.0), sign / ik)
            }
        };
        let mass_lu = ilu_factorize(&mass, 0.0)
            .map_err(|e| Error::Osrc(format!("singular surface mass: {e}")))?;
        Ok(Self {
            kind,
            sign,
            config: config.clone(),
            mass,
            x,
            terms,
            closure,
            constant,
            scale,
            mass_lu,
        })
    }

    pub fn kind(&self) -> OsrcKind {
        self.kind
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }

    pub fn config(&self) -> &OsrcConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    /// Number of cached sparse factorisations (`N_p`, plus the closure term
    /// for the NtD map).
    pub fn factorization_count(&self) -> usize {
        self.terms.len() + usize::from(self.closure.is_some())
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Applies the operator to a coefficient vector.
    pub fn apply(&self, u: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.dim();
        if u.len() != n {
            return Err(Error::Osrc(format!(
                "coefficient vector has length {}, surface has {} P1 dofs",
                u.len(),
                n
            )));
        }
        // DtN terms are driven by X u, NtD terms by M u.
        let rhs = match self.kind {
            OsrcKind::DtN => self.x.matvec(u),
            OsrcKind::NtD => self.mass.matvec(u),
        };
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        if self.constant.norm_sqr() > 0.0 {
            for (a, &v) in acc.iter_mut().zip(u) {
                *a += self.constant * v;
            }
        }
        for (weight, factor) in self
            .terms
            .iter()
            .chain(self.closure.as_ref().map(|c| c as &(Complex64, IluFactorization)))
        {
            let w = factor.solve(&rhs);
            for (a, v) in acc.iter_mut().zip(w) {
                *a += *weight * v;
            }
        }
        for a in acc.iter_mut() {
            *a *= self.scale;
        }
        Ok(acc)
    }

    /// Applies the operator after a surface mass inversion, mapping an
    /// integral-functional vector to a coefficient vector (the composition
    /// used by the operator preconditioners).
    pub fn apply_to_functional(&self, r: &[Complex64]) -> Result<Vec<Complex64>> {
        if r.len() != self.dim() {
            return Err(Error::Osrc(format!(
                "functional vector has length {}, surface has {} P1 dofs",
                r.len(),
                self.dim()
            )));
        }
        self.apply(&self.mass_lu.solve(r))
    }
}
