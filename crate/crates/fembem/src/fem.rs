//! P1 finite element assembly: interior Helmholtz forms on tetrahedra and
//! surface operators on boundary triangulations.
//!
//! The interior bilinear form of one body, after dividing the strong
//! equation `div(rho^{-1} grad p) + rho^{-1} k^2 p = 0` by the density and
//! expanding, is
//!
//! ```text
//!   a(p, q) = int grad p . grad q
//!           + int (grad rho / rho . grad p) q
//!           - int k(x)^2 p q ,
//! ```
//!
//! with `k(x) = k_ext n(x)`. Rows index test functions, columns trial
//! functions. The first term is integrated exactly (P1 gradients are
//! constant per element); the coefficient terms use a tetrahedral rule of
//! configurable order.
//!
//! Surface operators (P1 mass, P1/P0 mixed mass, Laplace-Beltrami) are
//! assembled from closed-form element integrals, exact on flat triangles.

use nalgebra::{Matrix3, Point3, Vector3};
use num_complex::Complex64;

use crate::mesh::{Mesh, RestrictionMaps, Surface};
use crate::problem::{Exterior, Material};
use crate::quadrature::{TetRule, TriangleRule};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Gradients of the four barycentric coordinates of a tetrahedron, plus its
/// volume.
fn tet_gradients(v: [&Point3<f64>; 4]) -> Result<([Vector3<f64>; 4], f64)> {
    let j = Matrix3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
    let det = j.determinant();
    let inv = j
        .try_inverse()
        .ok_or_else(|| Error::Assembly("degenerate tetrahedron".into()))?;
    // lambda_i = row i of J^{-1} applied to (x - v0), i = 1..3.
    let g1 = Vector3::new(inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]);
    let g2 = Vector3::new(inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]);
    let g3 = Vector3::new(inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]);
    Ok(([-g1 - g2 - g3, g1, g2, g3], det / 6.0))
}

/// Assembles the interior Helmholtz form of one body over its canonical
/// volume P1 dofs.
pub fn assemble_fem(
    mesh: &Mesh,
    maps: &RestrictionMaps,
    exterior: &Exterior,
    material: &Material,
    volume_order: usize,
) -> Result<CsrMatrix> {
    let n = maps.volume_dofs.len();
    let mut dof = vec![usize::MAX; mesh.n_vertices()];
    for (i, &v) in maps.volume_dofs.iter().enumerate() {
        dof[v] = i;
    }
    let rule = TetRule::new(volume_order);
    let rho_const = material.density.as_constant().is_some();
    if let Some(rho) = material.density.as_constant() {
        if rho <= 0.0 {
            return Err(Error::Assembly(format!("non-positive density {rho}")));
        }
    }

    let mut triplets: Vec<(usize, usize, Complex64)> = Vec::new();
    for (t, tet) in mesh.tets.iter().enumerate() {
        if mesh.tet_domain[t] != maps.domain {
            continue;
        }
        let v = [
            &mesh.vertices[tet[0]],
            &mesh.vertices[tet[1]],
            &mesh.vertices[tet[2]],
            &mesh.vertices[tet[3]],
        ];
        let (g, vol) = tet_gradients(v)?;
        let mut local = [[0.0f64; 4]; 4];
        // Exact stiffness.
        for a in 0..4 {
            for b in 0..4 {
                local[a][b] = vol * g[a].dot(&g[b]);
            }
        }
        // Coefficient terms by quadrature; scale 6V maps reference weights
        // (summing to 1/6) to the physical element.
        let scale = 6.0 * vol;
        for (q, &w) in rule.points.iter().zip(&rule.weights) {
            let lam = [1.0 - q[0] - q[1] - q[2], q[0], q[1], q[2]];
            let x = Point3::from(
                v[0].coords * lam[0] + v[1].coords * lam[1] + v[2].coords * lam[2]
                    + v[3].coords * lam[3],
            );
            let nref = material.refractivity.value(&x);
            if nref <= 0.0 {
                return Err(Error::Assembly(format!(
                    "non-positive refractivity {nref} at quadrature point ({}, {}, {})",
                    x.x, x.y, x.z
                )));
            }
            let k = exterior.wavenumber * nref;
            let wq = w * scale;
            for a in 0..4 {
                for b in 0..4 {
                    local[a][b] -= wq * k * k * lam[a] * lam[b];
                }
            }
            if !rho_const {
                let rho = material.density.value(&x);
                if rho <= 0.0 {
                    return Err(Error::Assembly(format!(
                        "non-positive density {rho} at quadrature point ({}, {}, {})",
                        x.x, x.y, x.z
                    )));
                }
                let conv = material.density.gradient(&x) / rho;
                for a in 0..4 {
                    for b in 0..4 {
                        local[a][b] += wq * conv.dot(&g[b]) * lam[a];
                    }
                }
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                triplets.push((dof[tet[a]], dof[tet[b]], Complex64::new(local[a][b], 0.0)));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, triplets))
}

/// P1 mass matrix on a surface, exact: the element matrix is
/// `A/12 (1 + delta_ab)`.
pub fn assemble_surface_mass(surface: &Surface) -> CsrMatrix {
    let n = surface.n_vertices();
    let mut triplets = Vec::with_capacity(surface.n_triangles() * 9);
    for t in 0..surface.n_triangles() {
        let tri = surface.tris[t];
        let a12 = surface.areas[t] / 12.0;
        for a in 0..3 {
            for b in 0..3 {
                let val = if a == b { 2.0 * a12 } else { a12 };
                triplets.push((tri[a], tri[b], Complex64::new(val, 0.0)));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// P1 mass matrix weighted by a complex scalar coefficient evaluated by
/// quadrature: entries `int_Gamma c(x) phi_b phi_a`.
pub fn assemble_weighted_surface_mass(
    surface: &Surface,
    rule: &TriangleRule,
    coeff: impl Fn(&Point3<f64>) -> Complex64,
) -> CsrMatrix {
    let n = surface.n_vertices();
    let mut triplets = Vec::with_capacity(surface.n_triangles() * 9);
    for t in 0..surface.n_triangles() {
        let tri = surface.tris[t];
        let v = surface.tri_vertices(t);
        let scale = 2.0 * surface.areas[t];
        let mut local = [[Complex64::ZERO; 3]; 3];
        for (q, &w) in rule.points.iter().zip(&rule.weights) {
            let lam = TriangleRule::barycentric(*q);
            let x =
                Point3::from(v[0].coords * lam[0] + v[1].coords * lam[1] + v[2].coords * lam[2]);
            let c = coeff(&x) * (w * scale);
            for a in 0..3 {
                for b in 0..3 {
                    local[a][b] += c * lam[a] * lam[b];
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                triplets.push((tri[a], tri[b], local[a][b]));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Mixed mass with P1 test functions (rows) against piecewise-constant P0
/// trial functions (columns): `int_T phi_a = A_T / 3` for each vertex of `T`.
pub fn assemble_mixed_mass_p1_p0(surface: &Surface) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(surface.n_triangles() * 3);
    for t in 0..surface.n_triangles() {
        let tri = surface.tris[t];
        let third = surface.areas[t] / 3.0;
        for a in 0..3 {
            triplets.push((tri[a], t, Complex64::new(third, 0.0)));
        }
    }
    CsrMatrix::from_triplets(surface.n_vertices(), surface.n_triangles(), triplets)
}

/// P0 mass matrix: `diag(A_T)`.
/// Weighted mixed pairing `(a, T) -> integral of c * psi_T * phi_a` with P1
/// test functions (rows) and P0 trial functions (columns).
pub fn assemble_weighted_mixed_mass(
    surface: &Surface,
    rule: &TriangleRule,
    coeff: impl Fn(&Point3<f64>) -> Complex64,
) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(surface.n_triangles() * 3);
    for t in 0..surface.n_triangles() {
        let tri = surface.tris[t];
        let v = surface.tri_vertices(t);
        let scale = 2.0 * surface.areas[t];
        let mut local = [Complex64::ZERO; 3];
        for (q, &w) in rule.points.iter().zip(&rule.weights) {
            let lam = TriangleRule::barycentric(*q);
            let x =
                Point3::from(v[0].coords * lam[0] + v[1].coords * lam[1] + v[2].coords * lam[2]);
            let c = coeff(&x) * (w * scale);
            for a in 0..3 {
                local[a] += c * lam[a];
            }
        }
        for a in 0..3 {
            triplets.push((tri[a], t, local[a]));
        }
    }
    CsrMatrix::from_triplets(surface.n_vertices(), surface.n_triangles(), triplets)
}

pub fn assemble_p0_mass(surface: &Surface) -> CsrMatrix {
    CsrMatrix::from_triplets(
        surface.n_triangles(),
        surface.n_triangles(),
        surface
            .areas
            .iter()
            .enumerate()
            .map(|(t, &a)| (t, t, Complex64::new(a, 0.0))),
    )
}

/// Tangential gradients of the three P1 basis functions of a surface
/// triangle: `grad_Gamma phi_a = (n x t_a) / (2A)` with `t_a` the opposite
/// edge in winding order.
pub fn surface_gradients(v: &[Point3<f64>; 3], normal: &Vector3<f64>, area: f64) -> [Vector3<f64>; 3] {
    let t = [v[2] - v[1], v[0] - v[2], v[1] - v[0]];
    t.map(|ta| normal.cross(&ta) / (2.0 * area))
}

/// Tangential curls of the P1 basis: `curl_Gamma phi_a = n x grad_Gamma
/// phi_a = -t_a / (2A)`.
pub fn surface_curls(v: &[Point3<f64>; 3], area: f64) -> [Vector3<f64>; 3] {
    let t = [v[2] - v[1], v[0] - v[2], v[1] - v[0]];
    t.map(|ta| -ta / (2.0 * area))
}

/// Laplace-Beltrami stiffness on the surface, exact:
/// `int_Gamma grad_Gamma phi_a . grad_Gamma phi_b`.
pub fn assemble_surface_laplacian(surface: &Surface) -> CsrMatrix {
    let n = surface.n_vertices();
    let mut triplets = Vec::with_capacity(surface.n_triangles() * 9);
    for t in 0..surface.n_triangles() {
        let tri = surface.tris[t];
        let v = surface.tri_vertices(t);
        let area = surface.areas[t];
        let g = surface_gradients(&v, &surface.normals[t], area);
        for a in 0..3 {
            for b in 0..3 {
                triplets.push((
                    tri[a],
                    tri[b],
                    Complex64::new(area * g[a].dot(&g[b]), 0.0),
                ));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Shifted surface Laplacian `K_LB + shift M`, the elliptic regulariser used
/// to close the three-field systems (`shift = 1` for the modified-Helmholtz
/// variant, `shift = kappa^2` for the shifted one).
pub fn shifted_surface_laplacian(surface: &Surface, shift: Complex64) -> CsrMatrix {
    assemble_surface_laplacian(surface).add_scaled(&assemble_surface_mass(surface), shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cube_mesh, build_restrictions};
    use crate::problem::ScalarField;
    use approx::assert_relative_eq;
    use faer::linalg::solvers::Solve;
    use num_complex::Complex64 as C;

    fn unit_exterior(k: f64) -> Exterior {
        Exterior::new(k, 1.0).unwrap()
    }

    /// A wavenumber-zero exterior turns the form into a pure
    /// stiffness/convection operator for patch tests.
    fn laplace_exterior() -> Exterior {
        Exterior { wavenumber: 0.0, density: 1.0 }
    }

    #[test]
    fn laplace_part_annihilates_linears_on_interior_rows() {
        let mesh = build_cube_mesh(3).unwrap();
        let maps = build_restrictions(&mesh, 1);
        let material = Material::homogeneous(1.0, 1.0);
        let f = assemble_fem(&mesh, &maps, &laplace_exterior(), &material, 2).unwrap();
        let u: Vec<C> = maps
            .volume_dofs
            .iter()
            .map(|&v| {
                let p = mesh.vertices[v];
                C::new(2.0 * p.x - p.y + 0.5 * p.z + 0.7, 0.0)
            })
            .collect();
        let fu = f.matvec(&u);
        for &i in &maps.interior_in_volume {
            assert!(fu[i].norm() < 1e-13, "interior residual {} at {i}", fu[i]);
        }
    }

    #[test]
    fn poisson_patch_test_reproduces_linear_solutions() {
        // Solve the interior Laplace problem with linear Dirichlet data; the
        // P1 solution must be that linear function to round-off.
        let mesh = build_cube_mesh(3).unwrap();
        let maps = build_restrictions(&mesh, 1);
        let material = Material::homogeneous(1.0, 1.0);
        let f = assemble_fem(&mesh, &maps, &laplace_exterior(), &material, 2).unwrap();
        let exact = |p: &Point3<f64>| C::new(p.x + 2.0 * p.y - p.z, 0.0);
        let g: Vec<C> = maps
            .volume_dofs
            .iter()
            .map(|&v| exact(&mesh.vertices[v]))
            .collect();
        // rhs on interior rows: -F_IS g_S.
        let full = f.matvec(&g);
        let f_ii = f.extract(&maps.interior_in_volume, &maps.interior_in_volume);
        let mut rhs = faer::Mat::<C>::zeros(maps.interior_in_volume.len(), 1);
        for (r, &i) in maps.interior_in_volume.iter().enumerate() {
            // full = F g has zero interior rows for the exact solution, so
            // F_II g_I = -(F g - F_II g_I)_I; build rhs directly instead.
            let gi = g[i];
            rhs[(r, 0)] = f_ii.matvec(
                &maps
                    .interior_in_volume
                    .iter()
                    .map(|&j| g[j])
                    .collect::<Vec<_>>(),
            )[r] - full[i];
            let _ = gi;
        }
        let lu = f_ii.to_dense().partial_piv_lu();
        let sol = lu.solve(&rhs);
        for (r, &i) in maps.interior_in_volume.iter().enumerate() {
            assert!((sol[(r, 0)] - g[i]).norm() < 1e-11);
        }
    }

    #[test]
    fn mass_term_integrates_to_the_volume() {
        // Sum over all entries of F with k = 1, unit density and unit
        // refractivity: the stiffness part cancels (constants are in its
        // kernel both ways) leaving -k^2 |Omega| = -1.
        let mesh = build_cube_mesh(2).unwrap();
        let maps = build_restrictions(&mesh, 1);
        let material = Material::homogeneous(1.0, 1.0);
        let f = assemble_fem(&mesh, &maps, &unit_exterior(1.0), &material, 2).unwrap();
        let ones = vec![C::ONE; maps.volume_dofs.len()];
        let total: C = f.matvec(&ones).iter().sum();
        assert_relative_eq!(total.re, -1.0, epsilon = 1e-12);
        assert_relative_eq!(total.im, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn convection_term_matches_the_divergence_identity() {
        // With rho = e^{2x} and u = x: 1^T F u = int grad(1).grad(x)
        // + int 2 d_x(x) = 2 |Omega| (the k term is switched off).
        let mesh = build_cube_mesh(3).unwrap();
        let maps = build_restrictions(&mesh, 1);
        let material = Material {
            density: ScalarField::new(
                |p| (2.0 * p.x).exp(),
                |p| Vector3::new(2.0 * (2.0 * p.x).exp(), 0.0, 0.0),
            ),
            refractivity: ScalarField::constant(1.0),
        };
        let f = assemble_fem(&mesh, &maps, &laplace_exterior(), &material, 6).unwrap();
        let u: Vec<C> = maps
            .volume_dofs
            .iter()
            .map(|&v| C::new(mesh.vertices[v].x, 0.0))
            .collect();
        let total: C = f.matvec(&u).iter().sum();
        assert_relative_eq!(total.re, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn surface_mass_totals_the_area() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let m = assemble_surface_mass(&surface);
        let ones = vec![C::ONE; surface.n_vertices()];
        let total: C = m.matvec(&ones).iter().sum();
        assert_relative_eq!(total.re, 6.0, epsilon = 1e-12);

        // Weighted by c(x) = x: faces x=0 and x=1 give 0 and 1, the four
        // side faces 1/2 each.
        let rule = TriangleRule::collapsed(2);
        let mw = assemble_weighted_surface_mass(&surface, &rule, |p| C::new(p.x, 0.0));
        let total: C = mw.matvec(&ones).iter().sum();
        assert_relative_eq!(total.re, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mixed_and_p0_masses_are_consistent() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let mixed = assemble_mixed_mass_p1_p0(&surface);
        let p0 = assemble_p0_mass(&surface);
        // Column sums of the mixed mass are the triangle areas.
        let ones = vec![C::ONE; surface.n_vertices()];
        let mt = mixed.transpose().matvec(&ones);
        for (t, &v) in mt.iter().enumerate() {
            assert_relative_eq!(v.re, surface.areas[t], epsilon = 1e-14);
        }
        let total: f64 = p0.matvec(&vec![C::ONE; surface.n_triangles()])
            .iter()
            .map(|c| c.re)
            .sum();
        assert_relative_eq!(total, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn surface_laplacian_energy_of_a_linear_field() {
        // u = x interpolates exactly in P1; its tangential gradient is the
        // projection of e_x, which vanishes on the two faces with normal
        // +-e_x and is unit on the four side faces: energy = 4.
        let mesh = build_cube_mesh(3).unwrap();
        let surface = mesh.surface(1);
        let klb = assemble_surface_laplacian(&surface);
        let u: Vec<C> = surface.points.iter().map(|p| C::new(p.x, 0.0)).collect();
        let ku = klb.matvec(&u);
        let energy: C = u.iter().zip(&ku).map(|(a, b)| a * b).sum();
        assert_relative_eq!(energy.re, 4.0, epsilon = 1e-12);

        // Constants are in the kernel.
        let ones = vec![C::ONE; surface.n_vertices()];
        for v in klb.matvec(&ones) {
            assert!(v.norm() < 1e-13);
        }
    }

    #[test]
    fn shifted_laplacian_combines_stiffness_and_mass() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let shift = C::new(0.0, 2.5);
        let s = shifted_surface_laplacian(&surface, shift);
        let ones = vec![C::ONE; surface.n_vertices()];
        // On constants the stiffness dies and the mass integrates the area.
        let total: C = s.matvec(&ones).iter().sum();
        assert!((total - shift * 6.0).norm() < 1e-12);
    }

    #[test]
    fn non_positive_coefficients_are_rejected() {
        let mesh = build_cube_mesh(2).unwrap();
        let maps = build_restrictions(&mesh, 1);
        let bad_n = Material::homogeneous(-0.5, 1.0);
        assert!(matches!(
            assemble_fem(&mesh, &maps, &unit_exterior(1.0), &bad_n, 2),
            Err(Error::Assembly(_))
        ));
        let bad_rho = Material::homogeneous(1.0, 0.0);
        assert!(matches!(
            assemble_fem(&mesh, &maps, &unit_exterior(1.0), &bad_rho, 2),
            Err(Error::Assembly(_))
        ));
        // A field that dips non-positive away from its constant tag is
        // caught at the quadrature points.
        let dipping = Material {
            density: ScalarField::new(|p| 0.5 - p.x, |_| Vector3::new(-1.0, 0.0, 0.0)),
            refractivity: ScalarField::constant(1.0),
        };
        assert!(matches!(
            assemble_fem(&mesh, &maps, &unit_exterior(1.0), &dipping, 2),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn surface_basis_gradients_and_curls() {
        let v = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let n = Vector3::new(0.0, 0.0, 1.0);
        let g = surface_gradients(&v, &n, 0.5);
        // grad phi_a . (v_b - v_a edges): phi_0 falls from 1 to 0 towards
        // the opposite edge.
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 0.0 } else { -1.0 };
                let d = v[b] - v[a];
                if a != b {
                    assert_relative_eq!(g[a].dot(&d), expect, epsilon = 1e-14);
                }
            }
        }
        let c = surface_curls(&v, 0.5);
        for a in 0..3 {
            assert_relative_eq!((n.cross(&g[a]) - c[a]).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn weighted_mixed_mass_reduces_to_plain_mixed_mass() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let rule = TriangleRule::collapsed(3);
        let plain = assemble_mixed_mass_p1_p0(&surface);
        let weighted = assemble_weighted_mixed_mass(&surface, &rule, |_| C::ONE);
        let a = plain.to_dense();
        let b = weighted.to_dense();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                assert_relative_eq!((a[(i, j)] - b[(i, j)]).norm(), 0.0, epsilon = 1e-13);
            }
        }
        // A linear weight is integrated exactly; check one row sum against
        // the closed form for the weighted triangle moment.
        let lin = assemble_weighted_mixed_mass(&surface, &rule, |x| C::new(x.x, 0.0));
        for t in 0..surface.n_triangles() {
            let v = surface.tri_vertices(t);
            let centroid_x = (v[0].x + v[1].x + v[2].x) / 3.0;
            let col: C = (0..surface.n_vertices())
                .filter_map(|i| {
                    let (cols, vals) = lin.row(i);
                    cols.iter().position(|&j| j == t).map(|p| vals[p])
                })
                .sum();
            assert_relative_eq!(col.re, surface.areas[t] * centroid_x, epsilon = 1e-13);
        }
    }
}
