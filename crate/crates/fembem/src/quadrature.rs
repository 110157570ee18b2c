//! Quadrature rules for the FEM and BEM assembly loops.
//!
//! Triangles are parameterised over the reference domain
//! `T = {(a, b) : 0 <= b <= a <= 1}` by the affine chart
//! `chi(a, b) = v0 + a (v1 - v0) + b (v2 - v1)`, so the barycentric
//! coordinates at `(a, b)` are `(1 - a, a - b, b)`. All rules store weights
//! in reference measure: triangle weights sum to `1/2` (scale physical
//! integrals by twice the area), tetrahedron weights sum to `1/6` (scale by
//! six times the volume), and the four-dimensional pair rules sum to `1/4`
//! (scale by `2 A_x * 2 A_y`).
//!
//! Galerkin double integrals over touching triangle pairs use the
//! Sauter-Schwab coordinate transforms, which split the pair domain into
//! subregions and pull the kernel singularity into a single coordinate so
//! that tensor Gauss quadrature converges rapidly. The transforms are pure
//! polynomial maps; their region decomposition is verified exactly by
//! polynomial integration in the tests below.

/// Gauss-Legendre nodes and weights on `[0, 1]`.
///
/// Nodes are computed by Newton iteration on the Legendre polynomial with
/// the classical Chebyshev initial guess; deterministic for a given `n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && n <= 64, "gauss order out of range: {n}");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Root of P_n on [-1, 1], counted from the positive end.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (x + 1.0);
        weights[i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Value and derivative of the Legendre polynomial `P_n` at `x`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Quadrature orders used by the boundary-element assembly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    /// Gauss points per dimension for well-separated triangle pairs.
    pub regular_order: usize,
    /// Gauss points per dimension inside the Sauter-Schwab transforms.
    pub singular_order: usize,
    /// Volume rule selector: 1 = centroid, 2 = four-point degree-2 rule,
    /// larger values use a collapsed tensor rule with that many points per
    /// dimension.
    pub volume_order: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            regular_order: 3,
            singular_order: 4,
            volume_order: 2,
        }
    }
}

impl QuadratureConfig {
    /// Rejects degenerate or absurdly expensive orders.
    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [
            ("regular_order", self.regular_order),
            ("singular_order", self.singular_order),
            ("volume_order", self.volume_order),
        ] {
            if v < 1 || v > 20 {
                return Err(crate::Error::Config(format!(
                    "quadrature {name} must be in 1..=20, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Rule on the reference triangle `T`; weights sum to `1/2`.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    /// Points `(a, b)` with `0 <= b <= a <= 1`.
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl TriangleRule {
    /// Collapsed tensor Gauss rule with `q` points per dimension.
    ///
    /// The square `[0,1]^2` is mapped onto `T` by `(u, v) -> (u, u v)` with
    /// Jacobian `u`; exact for polynomials of modest degree (roughly `2q - 2`
    /// in each variable).
    pub fn collapsed(q: usize) -> Self {
        let (g, w) = gauss_legendre(q);
        let mut points = Vec::with_capacity(q * q);
        let mut weights = Vec::with_capacity(q * q);
        for i in 0..q {
            for j in 0..q {
                let u = g[i];
                let v = g[j];
                points.push((u, u * v));
                weights.push(w[i] * w[j] * u);
            }
        }
        Self { points, weights }
    }

    /// Barycentric coordinates `(l0, l1, l2)` of a reference point.
    #[inline]
    pub fn barycentric(p: (f64, f64)) -> [f64; 3] {
        [1.0 - p.0, p.0 - p.1, p.1]
    }
}

/// Rule on the reference tetrahedron; barycentric points, weights sum to `1/6`.
#[derive(Debug, Clone)]
pub struct TetRule {
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

impl TetRule {
    /// Rule selected by `volume_order` (see [`QuadratureConfig`]).
    pub fn new(volume_order: usize) -> Self {
        match volume_order {
            0 | 1 => Self {
                points: vec![[0.25; 4]],
                weights: vec![1.0 / 6.0],
            },
            2 => {
                // Classical four-point rule, exact for quadratics.
                let a = 0.585_410_196_624_968_5;
                let b = 0.138_196_601_125_010_5;
                let mut points = Vec::with_capacity(4);
                for i in 0..4 {
                    let mut p = [b; 4];
                    p[i] = a;
                    points.push(p);
                }
                Self {
                    points,
                    weights: vec![1.0 / 24.0; 4],
                }
            }
            q => Self::collapsed(q),
        }
    }

    /// Collapsed (Duffy) tensor rule with `q` points per dimension.
    fn collapsed(q: usize) -> Self {
        let (g, w) = gauss_legendre(q);
        let mut points = Vec::with_capacity(q * q * q);
        let mut weights = Vec::with_capacity(q * q * q);
        for i in 0..q {
            for j in 0..q {
                for k in 0..q {
                    let (u, v, t) = (g[i], g[j], g[k]);
                    let x = u;
                    let y = v * (1.0 - u);
                    let z = t * (1.0 - u) * (1.0 - v);
                    let jac = (1.0 - u) * (1.0 - u) * (1.0 - v);
                    points.push([1.0 - x - y - z, x, y, z]);
                    weights.push(w[i] * w[j] * w[k] * jac);
                }
            }
        }
        Self { points, weights }
    }
}

/// How two triangles touch, which selects the singular transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Coincident,
    SharedEdge,
    SharedVertex,
}

/// Tensor rule on `T x T` produced by a Sauter-Schwab transform;
/// weights carry the transform Jacobians and sum to `1/4`.
#[derive(Debug, Clone)]
pub struct PairRule {
    /// Reference points on the test triangle.
    pub x: Vec<(f64, f64)>,
    /// Reference points on the trial triangle.
    pub y: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl PairRule {
    /// Builds the transform for `kind` with `q` Gauss points per dimension.
    ///
    /// Both triangles must be parameterised so that the shared feature sits
    /// at the start of the chart: identical vertex order for
    /// [`PairKind::Coincident`], the shared edge mapped from `(0,0)` to
    /// `(1,0)` on both charts for [`PairKind::SharedEdge`], and the shared
    /// vertex at `(0,0)` for [`PairKind::SharedVertex`].
    pub fn sauter_schwab(kind: PairKind, q: usize) -> Self {
        let (g, gw) = gauss_legendre(q);
        let mut rule = Self {
            x: Vec::new(),
            y: Vec::new(),
            weights: Vec::new(),
        };
        let mut emit = |x: (f64, f64), y: (f64, f64), w: f64| {
            debug_assert!(x.1 <= x.0 + 1e-14 && x.0 <= 1.0 + 1e-14);
            debug_assert!(y.1 <= y.0 + 1e-14 && y.0 <= 1.0 + 1e-14);
            rule.x.push(x);
            rule.y.push(y);
            rule.weights.push(w);
        };
        // Variables (xi, e1, e2, e3) on [0,1]^4; the singularity is pulled
        // to xi -> 0 (and, for the edge case, xi*e1 -> 0).
        for i0 in 0..q {
            for i1 in 0..q {
                for i2 in 0..q {
                    for i3 in 0..q {
                        let xi = g[i0];
                        let (e1, e2, e3) = (g[i1], g[i2], g[i3]);
                        let w4 = gw[i0] * gw[i1] * gw[i2] * gw[i3];
                        match kind {
                            PairKind::Coincident => {
                                let j = w4 * xi.powi(3) * e1 * e1 * e2;
                                let pairs = [
                                    (
                                        (xi, xi * (1.0 - e1 + e1 * e2)),
                                        (xi * (1.0 - e1 * e2 * e3), xi * (1.0 - e1)),
                                    ),
                                    (
                                        (xi, xi * e1 * (1.0 - e2 + e2 * e3)),
                                        (xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)),
                                    ),
                                    (
                                        (xi * (1.0 - e1 * e2 * e3), xi * e1 * (1.0 - e2 * e3)),
                                        (xi, xi * e1 * (1.0 - e2)),
                                    ),
                                ];
                                for (px, py) in pairs {
                                    emit(px, py, j);
                                    emit(py, px, j);
                                }
                            }
                            PairKind::SharedEdge => {
                                let j2 = w4 * xi.powi(3) * e1 * e1;
                                emit(
                                    (xi, xi * e1 * e3),
                                    (xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)),
                                    j2,
                                );
                                let j3 = j2 * e2;
                                emit(
                                    (xi, xi * e1),
                                    (xi * (1.0 - e1 * e2 * e3), xi * e1 * e2 * (1.0 - e3)),
                                    j3,
                                );
                                emit(
                                    (xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)),
                                    (xi, xi * e1 * e2 * e3),
                                    j3,
                                );
                                emit(
                                    (xi * (1.0 - e1 * e2 * e3), xi * e1 * e2 * (1.0 - e3)),
                                    (xi, xi * e1),
                                    j3,
                                );
                                emit(
                                    (xi * (1.0 - e1 * e2 * e3), xi * e1 * (1.0 - e2 * e3)),
                                    (xi, xi * e1 * e2),
                                    j3,
                                );
                            }
                            PairKind::SharedVertex => {
                                let j = w4 * xi.powi(3) * e2;
                                emit((xi, xi * e1), (xi * e2, xi * e2 * e3), j);
                                emit((xi * e2, xi * e2 * e3), (xi, xi * e1), j);
                            }
                        }
                    }
                }
            }
        }
        rule
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Exact integral of `a^p b^q` over the reference triangle `T`.
    fn tri_monomial(p: u32, q: u32) -> f64 {
        // int_0^1 int_0^a a^p b^q db da = 1 / ((q+1)(p+q+2))
        1.0 / ((q as f64 + 1.0) * (p as f64 + q as f64 + 2.0))
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        // n points integrate degree 2n-1 exactly on [0,1].
        for n in 1..=10 {
            let (x, w) = gauss_legendre(n);
            assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            for d in 0..(2 * n) {
                let quad: f64 = x.iter().zip(&w).map(|(xi, wi)| xi.powi(d as i32) * wi).sum();
                assert_relative_eq!(quad, 1.0 / (d as f64 + 1.0), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn triangle_rule_integrates_monomials() {
        let rule = TriangleRule::collapsed(4);
        assert_relative_eq!(rule.weights.iter().sum::<f64>(), 0.5, epsilon = 1e-14);
        for (p, q) in [(0, 0), (1, 0), (0, 1), (2, 1), (3, 2), (1, 3)] {
            let quad: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(&(a, b), w)| a.powi(p) * b.powi(q) * w)
                .sum();
            assert_relative_eq!(quad, tri_monomial(p as u32, q as u32), epsilon = 1e-13);
        }
    }

    #[test]
    fn tet_rules_integrate_their_degree() {
        // Exact value of x^a y^b z^c over the unit tetrahedron is
        // a! b! c! / (a+b+c+3)!.
        fn tet_monomial(a: u32, b: u32, c: u32) -> f64 {
            fn fact(n: u32) -> f64 {
                (1..=n).map(|k| k as f64).product()
            }
            fact(a) * fact(b) * fact(c) / fact(a + b + c + 3)
        }
        for order in [1usize, 2, 4] {
            let rule = TetRule::new(order);
            assert_relative_eq!(rule.weights.iter().sum::<f64>(), 1.0 / 6.0, epsilon = 1e-14);
            let degree = if order <= 2 { order } else { 2 };
            for (a, b, c) in [(1, 0, 0), (0, 1, 1), (2, 0, 0), (1, 1, 0)] {
                if (a + b + c) as usize > degree {
                    continue;
                }
                let quad: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(l, w)| {
                        // Cartesian coordinates on the unit tet are (l1, l2, l3).
                        l[1].powi(a) * l[2].powi(b) * l[3].powi(c) * w
                    })
                    .sum();
                assert_relative_eq!(quad, tet_monomial(a as u32, b as u32, c as u32), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn sauter_schwab_weights_cover_the_pair_domain() {
        // Each transform is a measure-preserving re-parameterisation of
        // T x T, so the weights must sum to (1/2)^2 = 1/4.
        for kind in [PairKind::Coincident, PairKind::SharedEdge, PairKind::SharedVertex] {
            let rule = PairRule::sauter_schwab(kind, 4);
            assert_relative_eq!(rule.weights.iter().sum::<f64>(), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn sauter_schwab_is_exact_for_smooth_polynomials() {
        // The transforms are polynomial bijections (up to null sets) of
        // T x T, so at sufficient order they integrate any polynomial
        // integrand exactly. This pins down the region decomposition: an
        // overlap or gap in the subregions would show up as an O(1) error.
        let exact = |px, qx, py, qy| tri_monomial(px, qx) * tri_monomial(py, qy);
        for kind in [PairKind::Coincident, PairKind::SharedEdge, PairKind::SharedVertex] {
            let rule = PairRule::sauter_schwab(kind, 14);
            for (px, qx, py, qy) in [(0, 0, 0, 0), (1, 0, 0, 0), (2, 1, 1, 2), (0, 2, 3, 0)] {
                let quad: f64 = rule
                    .x
                    .iter()
                    .zip(&rule.y)
                    .zip(&rule.weights)
                    .map(|((&(xa, xb), &(ya, yb)), w)| {
                        xa.powi(px) * xb.powi(qx) * ya.powi(py) * yb.powi(qy) * w
                    })
                    .sum();
                assert_relative_eq!(
                    quad,
                    exact(px as u32, qx as u32, py as u32, qy as u32),
                    epsilon = 1e-12,
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn quadrature_config_validation() {
        assert!(QuadratureConfig::default().validate().is_ok());
        let bad = QuadratureConfig {
            regular_order: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = QuadratureConfig {
            singular_order: 33,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
