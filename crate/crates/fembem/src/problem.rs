//! Physical description of the transmission problem.
//!
//! A time-harmonic incident field (convention `e^{-i omega t}`) hits one or
//! more penetrable bodies embedded in a homogeneous exterior fluid. Each body
//! carries a position-dependent density `rho_int(x)` and refractivity `n(x)`,
//! so the interior wavenumber is `k_int(x) = k_ext n(x)`. Across each body
//! surface the pressure and the normal velocity are continuous:
//!
//! ```text
//!   p_int = p_ext + p_inc,
//!   (1/rho_int) d_n p_int = (1/rho_ext) d_n (p_ext + p_inc),
//! ```
//!
//! so the exterior Neumann trace seen by the boundary operators equals
//! `(rho_ext / rho_int) d_n p_int`, i.e. the coupling coefficient multiplying
//! the interior Neumann data is `rho_int(x) / rho_ext`.

use nalgebra::{Point3, Vector3};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::mesh::Surface;
use crate::quadrature::TriangleRule;
use crate::{Error, Result};

/// Homogeneous exterior fluid.
#[derive(Debug, Clone, Copy)]
pub struct Exterior {
    /// Exterior wavenumber `k_ext`.
    pub wavenumber: f64,
    /// Exterior mass density `rho_ext`.
    pub density: f64,
}

impl Exterior {
    pub fn new(wavenumber: f64, density: f64) -> Result<Self> {
        if !(wavenumber > 0.0) || !wavenumber.is_finite() {
            return Err(Error::Problem(format!("invalid wavenumber {wavenumber}")));
        }
        if !(density > 0.0) || !density.is_finite() {
            return Err(Error::Problem(format!("invalid exterior density {density}")));
        }
        Ok(Exterior { wavenumber, density })
    }
}

/// Smooth scalar coefficient field given by value and gradient callables.
#[derive(Clone)]
pub struct ScalarField {
    value: Arc<dyn Fn(&Point3<f64>) -> f64 + Send + Sync>,
    gradient: Arc<dyn Fn(&Point3<f64>) -> Vector3<f64> + Send + Sync>,
    constant: Option<f64>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.constant {
            Some(c) => write!(f, "ScalarField::constant({c})"),
            None => write!(f, "ScalarField(<callable>)"),
        }
    }
}

impl ScalarField {
    pub fn new(
        value: impl Fn(&Point3<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&Point3<f64>) -> Vector3<f64> + Send + Sync + 'static,
    ) -> Self {
        ScalarField {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            constant: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        ScalarField {
            value: Arc::new(move |_| c),
            gradient: Arc::new(|_| Vector3::zeros()),
            constant: Some(c),
        }
    }

    pub fn value(&self, x: &Point3<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &Point3<f64>) -> Vector3<f64> {
        (self.gradient)(x)
    }

    /// The constant if the field was built as one.
    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }
}

/// Interior material of one body.
#[derive(Debug, Clone)]
pub struct Material {
    /// Interior mass density `rho_int(x)`.
    pub density: ScalarField,
    /// Refractivity `n(x)`; interior wavenumber is `k_ext n(x)`.
    pub refractivity: ScalarField,
}

impl Material {
    pub fn homogeneous(refractivity: f64, density: f64) -> Self {
        Material {
            density: ScalarField::constant(density),
            refractivity: ScalarField::constant(refractivity),
        }
    }

    /// The benchmark material: unit density and the smooth heterogeneous
    /// refractivity of [`benchmark_refractivity`].
    pub fn benchmark() -> Self {
        Material {
            density: ScalarField::constant(1.0),
            refractivity: benchmark_refractivity(),
        }
    }
}

/// Benchmark refractivity on the unit cube,
///
/// ```text
///   n(x) = (1 - exp(-||x - c||_inf^2) / 2) / (1 - exp(-1/4) / 2),
/// ```
///
/// with `c = (1/2, 1/2, 1/2)`. The max-norm makes `n = 1` exactly on the
/// cube surface (where `||x - c||_inf = 1/2`), so the coefficient is
/// continuous across the interface, and `n(c) ~ 0.8189` at the centre.
pub fn benchmark_refractivity() -> ScalarField {
    let norm = 1.0 - 0.5 * (-0.25f64).exp();
    let value = move |x: &Point3<f64>| {
        let m = (0..3).map(|i| (x[i] - 0.5).abs()).fold(0.0f64, f64::max);
        (1.0 - 0.5 * (-m * m).exp()) / norm
    };
    let gradient = move |x: &Point3<f64>| {
        let d = [x[0] - 0.5, x[1] - 0.5, x[2] - 0.5];
        let mut arg = 0;
        for i in 1..3 {
            if d[i].abs() > d[arg].abs() {
                arg = i;
            }
        }
        let m = d[arg].abs();
        let mut g = Vector3::zeros();
        g[arg] = d[arg].signum() * m * (-m * m).exp() / norm;
        g
    };
    ScalarField::new(value, gradient)
}

/// Incident field.
#[derive(Debug, Clone)]
pub enum Incident {
    /// `A e^{i k d . x}` with unit direction `d`.
    PlaneWave {
        direction: Vector3<f64>,
        amplitude: Complex64,
    },
    /// `A e^{i k r} / (4 pi r)` with `r = |x - location|`.
    PointSource {
        location: Point3<f64>,
        amplitude: Complex64,
    },
}

impl Incident {
    pub fn plane_wave(direction: Vector3<f64>, amplitude: Complex64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Problem("plane-wave direction must be nonzero".into()));
        }
        Ok(Incident::PlaneWave {
            direction: direction / norm,
            amplitude,
        })
    }

    pub fn point_source(location: Point3<f64>, amplitude: Complex64) -> Self {
        Incident::PointSource { location, amplitude }
    }

    /// Field value at `x` for exterior wavenumber `k`.
    pub fn field(&self, k: f64, x: &Point3<f64>) -> Complex64 {
        match self {
            Incident::PlaneWave { direction, amplitude } => {
                amplitude * (Complex64::i() * k * direction.dot(&x.coords)).exp()
            }
            Incident::PointSource { location, amplitude } => {
                let r = (x - location).norm();
                amplitude * (Complex64::i() * k * r).exp() / (4.0 * PI * r)
            }
        }
    }

    /// Field gradient at `x`.
    pub fn gradient(&self, k: f64, x: &Point3<f64>) -> Vector3<Complex64> {
        match self {
            Incident::PlaneWave { direction, amplitude } => {
                let p = amplitude * (Complex64::i() * k * direction.dot(&x.coords)).exp();
                direction.map(|d| Complex64::i() * k * d * p)
            }
            Incident::PointSource { location, amplitude } => {
                let d = x - location;
                let r = d.norm();
                let g = amplitude * (Complex64::i() * k * r).exp() / (4.0 * PI * r);
                let radial = (Complex64::i() * k - 1.0 / r) * g / r;
                d.map(|c| radial * c)
            }
        }
    }

    /// Dirichlet and Neumann traces at a point with unit normal `n`.
    pub fn traces(&self, k: f64, x: &Point3<f64>, n: &Vector3<f64>) -> (Complex64, Complex64) {
        let p = self.field(k, x);
        let g = self.gradient(k, x);
        let dn = g.x * n.x + g.y * n.y + g.z * n.z;
        (p, dn)
    }

    /// P1 interpolation coefficients of the Dirichlet trace on `surface`.
    pub fn dirichlet_coefficients(&self, k: f64, surface: &Surface) -> Vec<Complex64> {
        surface.points.iter().map(|p| self.field(k, p)).collect()
    }

    /// Mass-weighted Dirichlet data: `b_j = int_Gamma p_inc phi_j dGamma`
    /// by per-triangle quadrature.
    pub fn dirichlet_functional(&self, k: f64, surface: &Surface, rule: &TriangleRule) -> Vec<Complex64> {
        self.surface_functional(surface, rule, |x, _| self.field(k, x))
    }

    /// Mass-weighted Neumann data: `b_j = int_Gamma (grad p_inc . n) phi_j`.
    /// The per-triangle flat normal is used, which sidesteps the ambiguity
    /// of vertex normals on edges and corners.
    pub fn neumann_functional(&self, k: f64, surface: &Surface, rule: &TriangleRule) -> Vec<Complex64> {
        self.surface_functional(surface, rule, |x, n| {
            let g = self.gradient(k, x);
            g.x * n.x + g.y * n.y + g.z * n.z
        })
    }

    /// `(a) -> integral of w(x) * (grad p_inc . n) * phi_a` over the surface:
    /// the normal-derivative functional with a pointwise weight, as needed
    /// when the incident Neumann trace enters a form scaled by a material
    /// coefficient.
    pub fn weighted_neumann_functional(
        &self,
        k: f64,
        surface: &Surface,
        rule: &TriangleRule,
        weight: impl Fn(&Point3<f64>) -> Complex64,
    ) -> Vec<Complex64> {
        self.surface_functional(surface, rule, |x, n| {
            let g = self.gradient(k, x);
            (g.x * n.x + g.y * n.y + g.z * n.z) * weight(x)
        })
    }

    fn surface_functional(
        &self,
        surface: &Surface,
        rule: &TriangleRule,
        f: impl Fn(&Point3<f64>, &Vector3<f64>) -> Complex64,
    ) -> Vec<Complex64> {
        let mut out = vec![Complex64::ZERO; surface.n_vertices()];
        for t in 0..surface.n_triangles() {
            let tri = surface.tris[t];
            let v = surface.tri_vertices(t);
            let n = surface.normals[t];
            let scale = 2.0 * surface.areas[t];
            for (q, &w) in rule.points.iter().zip(&rule.weights) {
                let b = TriangleRule::barycentric(*q);
                let x = Point3::from(v[0].coords * b[0] + v[1].coords * b[1] + v[2].coords * b[2]);
                let val = f(&x, &n) * (w * scale);
                for a in 0..3 {
                    out[tri[a]] += val * b[a];
                }
            }
        }
        out
    }
}

/// Full problem description: exterior fluid, per-body materials, incident
/// field.
#[derive(Debug, Clone)]
pub struct TransmissionProblem {
    pub exterior: Exterior,
    pub materials: BTreeMap<u32, Material>,
    pub incident: Incident,
}

impl TransmissionProblem {
    pub fn material(&self, domain: u32) -> Result<&Material> {
        self.materials
            .get(&domain)
            .ok_or_else(|| Error::Problem(format!("no material assigned to domain {domain}")))
    }

    /// Interior wavenumber `k_ext n(x)` of a body.
    pub fn interior_wavenumber(&self, domain: u32, x: &Point3<f64>) -> Result<f64> {
        Ok(self.exterior.wavenumber * self.material(domain)?.refractivity.value(x))
    }

    /// Density coupling coefficient `rho_int(x) / rho_ext` relating interior
    /// Neumann data to the exterior Neumann trace (continuity of normal
    /// velocity).
    pub fn density_coefficient(&self, domain: u32, x: &Point3<f64>) -> Result<f64> {
        Ok(self.material(domain)?.density.value(x) / self.exterior.density)
    }
}

/// Interior Laplace resonances of the unit cube below `k_max`.
///
/// The Dirichlet eigenvalues are `k = pi sqrt(m1^2 + m2^2 + m3^2)` with
/// integers `m_i >= 1`; at these wavenumbers single-trace boundary
/// formulations of the exterior problem become singular. Returned sorted
/// ascending without duplicates, with one representative mode triple each.
pub fn cube_resonances(k_max: f64) -> Vec<(f64, [usize; 3])> {
    let mut out: Vec<(f64, [usize; 3])> = Vec::new();
    let m_max = (k_max / PI).ceil() as usize + 1;
    let mut seen = std::collections::BTreeSet::new();
    for m1 in 1..=m_max {
        for m2 in m1..=m_max {
            for m3 in m2..=m_max {
                let s = m1 * m1 + m2 * m2 + m3 * m3;
                let k = PI * (s as f64).sqrt();
                if k < k_max && seen.insert(s) {
                    out.push((k, [m1, m2, m3]));
                }
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Distance from `k` to the nearest cube resonance below `k_max`.
pub fn nearest_cube_resonance(k: f64, k_max: f64) -> Option<(f64, [usize; 3])> {
    cube_resonances(k_max)
        .into_iter()
        .min_by(|a, b| (a.0 - k).abs().total_cmp(&(b.0 - k).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_cube_mesh;
    use approx::assert_relative_eq;
    use num_complex::Complex64 as C;

    #[test]
    fn plane_wave_traces_match_hand_values() {
        let inc = Incident::plane_wave(Vector3::new(1.0, 0.0, 0.0), C::ONE).unwrap();
        let x = Point3::new(0.5, 0.0, 0.0);
        let n = Vector3::new(1.0, 0.0, 0.0);
        let (d, nm) = inc.traces(2.0, &x, &n);
        assert_relative_eq!(d.re, 1.0f64.cos(), epsilon = 1e-15);
        assert_relative_eq!(d.im, 1.0f64.sin(), epsilon = 1e-15);
        assert_relative_eq!(nm.re, -2.0 * 1.0f64.sin(), epsilon = 1e-15);
        assert_relative_eq!(nm.im, 2.0 * 1.0f64.cos(), epsilon = 1e-15);
    }

    #[test]
    fn point_source_amplitude_and_gradient() {
        let src = Incident::point_source(Point3::origin(), C::ONE);
        let x = Point3::new(1.0, 0.0, 0.0);
        let p = src.field(0.0_f64.max(1e-300), &x);
        assert_relative_eq!(p.re, 0.07957747154594767, epsilon = 1e-15);

        // Gradient against central differences.
        let k = 1.7;
        let x = Point3::new(0.4, -0.8, 0.3);
        let g = src.gradient(k, &x);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (src.field(k, &xp) - src.field(k, &xm)) / (2.0 * h);
            assert!((g[i] - fd).norm() < 1e-7 * g[i].norm().max(1.0));
        }
    }

    #[test]
    fn plane_wave_gradient_matches_finite_differences() {
        let inc = Incident::plane_wave(Vector3::new(1.0, 2.0, -2.0), C::new(0.3, 0.7)).unwrap();
        let k = 2.3;
        let x = Point3::new(0.1, 0.2, 0.3);
        let g = inc.gradient(k, &x);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (inc.field(k, &xp) - inc.field(k, &xm)) / (2.0 * h);
            assert!((g[i] - fd).norm() < 1e-8);
        }
    }

    #[test]
    fn benchmark_refractivity_frozen_values() {
        let n = benchmark_refractivity();
        // 0.5 / (1 - 0.5 e^{-1/4}), computed independently.
        assert_relative_eq!(
            n.value(&Point3::new(0.5, 0.5, 0.5)),
            0.8188672135862262,
            epsilon = 1e-15
        );
        // Exactly one on the surface of the cube, all faces.
        for p in [
            Point3::new(0.0, 0.2, 0.9),
            Point3::new(1.0, 0.5, 0.5),
            Point3::new(0.3, 0.0, 0.4),
            Point3::new(0.25, 0.75, 1.0),
        ] {
            assert_relative_eq!(n.value(&p), 1.0, epsilon = 1e-15);
        }
        assert!(n.value(&Point3::new(0.4, 0.6, 0.5)) < 1.0);
    }

    #[test]
    fn benchmark_refractivity_gradient_matches_finite_differences() {
        let n = benchmark_refractivity();
        let h = 1e-7;
        for x in [
            Point3::new(0.31, 0.62, 0.55),
            Point3::new(0.9, 0.48, 0.52),
            Point3::new(0.5, 0.5, 0.08),
        ] {
            let g = n.gradient(&x);
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (n.value(&xp) - n.value(&xm)) / (2.0 * h);
                assert_relative_eq!(g[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn cube_resonances_are_the_lattice_values() {
        let res = cube_resonances(12.0);
        let sums: Vec<f64> = res.iter().map(|r| (r.0 / PI).powi(2)).collect();
        for expect in [3.0, 6.0, 9.0, 11.0] {
            assert!(
                sums.iter().any(|s| (s - expect).abs() < 1e-9),
                "missing resonance at pi sqrt({expect})"
            );
        }
        let res14 = cube_resonances(12.0)
            .into_iter()
            .find(|r| r.1 == [1, 2, 3])
            .unwrap();
        assert_relative_eq!(res14.0, 11.754763358538996, epsilon = 1e-12);
        assert!(res.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn neumann_functional_satisfies_the_divergence_identity() {
        // For a Helmholtz solution, int_Gamma d_n p = -k^2 int_Omega p.
        // With p = e^{ikx} on the unit cube the right side is ik(e^{ik}-1).
        let mesh = build_cube_mesh(4).unwrap();
        let surface = mesh.surface(1);
        let rule = TriangleRule::collapsed(6);
        let k = 1.5;
        let inc = Incident::plane_wave(Vector3::new(1.0, 0.0, 0.0), C::ONE).unwrap();
        let b = inc.neumann_functional(k, &surface, &rule);
        let total: C = b.iter().sum();
        let expect = C::i() * k * ((C::i() * k).exp() - 1.0);
        assert!((total - expect).norm() < 1e-9, "{total} vs {expect}");
    }

    #[test]
    fn density_coefficient_is_interior_over_exterior() {
        let problem = TransmissionProblem {
            exterior: Exterior::new(2.0, 1.2).unwrap(),
            materials: [(1u32, Material::homogeneous(1.5, 1.8))].into(),
            incident: Incident::plane_wave(Vector3::x(), C::ONE).unwrap(),
        };
        let x = Point3::new(0.5, 0.5, 0.5);
        assert_relative_eq!(problem.density_coefficient(1, &x).unwrap(), 1.5, epsilon = 1e-15);
        assert_relative_eq!(problem.interior_wavenumber(1, &x).unwrap(), 3.0, epsilon = 1e-15);
        assert!(problem.material(7).is_err());
    }
}
