//! Galerkin boundary-element assembly of the four Helmholtz boundary
//! operators and the layer-potential evaluation behind field reconstruction.
//!
//! With the fundamental solution `G(x, y) = e^{ikr} / (4 pi r)`,
//! `r = |x - y|`, the operators on a closed surface are
//!
//! ```text
//!   V psi (x) = int G(x, y) psi(y)                (single layer)
//!   K phi (x) = int dG/dn(y) (x, y) phi(y)        (double layer)
//!   T psi (x) = d/dn(x) int G(x, y) psi(y)        (adjoint double layer)
//!   D phi (x) = -d/dn(x) int dG/dn(y) (x, y) phi  (hypersingular)
//! ```
//!
//! All pairings are bilinear (no complex conjugation). The hypersingular
//! operator is assembled in its integration-by-parts form
//!
//! ```text
//!   <D phi, psi> = int int G curl_G phi . curl_G psi
//!               - k^2 int int G (n_x . n_y) phi psi ,
//! ```
//!
//! which needs tangential derivatives of both densities and is therefore
//! restricted to P1 on both sides. Element pairs that share vertices are
//! integrated with Sauter-Schwab coordinate transforms, everything else with
//! tensorised Gauss rules. Operators requested together share kernel
//! evaluations, which matters: the exponential dominates assembly time.
//!
//! A test-side scalar weight `c(x)` is supported on every operator; it
//! implements the density jump factor of the transmission conditions without
//! a separate weighted-operator code path. For the hypersingular form the
//! product rule adds the term `phi (n x grad_G c)` to the test curl.

use nalgebra::{Point3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::fem::{
    assemble_mixed_mass_p1_p0, assemble_p0_mass, assemble_surface_mass, surface_gradients,
};
use crate::mesh::Surface;
use crate::problem::ScalarField;
use crate::quadrature::{PairKind, PairRule, QuadratureConfig, TriangleRule};
use crate::spaces::{DenseBlock, SpaceKind, SpaceTag, SparseBlock};
use crate::{Error, Result};

/// Helmholtz fundamental solution `e^{ikr} / (4 pi r)`.
pub fn green(k: f64, x: &Point3<f64>, y: &Point3<f64>) -> Result<Complex64> {
    let r = (x - y).norm();
    if r == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(green_r(k, r))
}

#[inline]
fn green_r(k: f64, r: f64) -> Complex64 {
    let (s, c) = (k * r).sin_cos();
    Complex64::new(c, s) / (4.0 * std::f64::consts::PI * r)
}

/// The four boundary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    SingleLayer,
    DoubleLayer,
    AdjointDoubleLayer,
    Hypersingular,
}

impl OperatorKind {
    pub fn label(self) -> &'static str {
        match self {
            OperatorKind::SingleLayer => "V",
            OperatorKind::DoubleLayer => "K",
            OperatorKind::AdjointDoubleLayer => "T",
            OperatorKind::Hypersingular => "D",
        }
    }
}

/// Scalar weight applied to the test functions of one operator block.
#[derive(Clone, Copy)]
pub enum TestWeight<'a> {
    Constant(f64),
    Field(&'a ScalarField),
}

impl TestWeight<'_> {
    fn value(&self, x: &Point3<f64>) -> f64 {
        match self {
            TestWeight::Constant(c) => *c,
            TestWeight::Field(f) => f.value(x),
        }
    }

    fn gradient(&self, x: &Point3<f64>) -> Vector3<f64> {
        match self {
            TestWeight::Constant(_) => Vector3::zeros(),
            TestWeight::Field(f) => f.gradient(x),
        }
    }
}

/// One operator block to assemble; requests passed together share kernel
/// evaluations over the same surface pair.
pub struct OperatorRequest<'a> {
    pub kind: OperatorKind,
    pub test_space: SpaceKind,
    pub trial_space: SpaceKind,
    pub weight: Option<TestWeight<'a>>,
}

impl<'a> OperatorRequest<'a> {
    pub fn new(kind: OperatorKind, test_space: SpaceKind, trial_space: SpaceKind) -> Self {
        OperatorRequest { kind, test_space, trial_space, weight: None }
    }

    pub fn weighted(mut self, weight: TestWeight<'a>) -> Self {
        self.weight = Some(weight);
        self
    }
}

/// Trial-side regular quadrature data of one triangle.
struct TrialData {
    pts: Vec<Point3<f64>>,
    /// Rule weight times the chart Jacobian `2 A`.
    w2a: Vec<f64>,
}

/// Per-triangle geometry reused across all quadrature points.
struct TriGeom {
    v: [Point3<f64>; 3],
    normal: Vector3<f64>,
    area: f64,
    /// `n x grad phi_a`, the surface curl of each hat function.
    curl: [Vector3<f64>; 3],
}

fn tri_geom(surface: &Surface, t: usize) -> TriGeom {
    let v = surface.tri_vertices(t);
    let normal = surface.normals[t];
    let area = surface.areas[t];
    let grad = surface_gradients(&v, &normal, area);
    let curl = [
        normal.cross(&grad[0]),
        normal.cross(&grad[1]),
        normal.cross(&grad[2]),
    ];
    TriGeom { v, normal, area, curl }
}

#[inline]
fn chart(v: &[Point3<f64>; 3], perm: &[usize; 3], p: (f64, f64)) -> (Point3<f64>, [f64; 3]) {
    // Barycentric weights of the chart slots on {0 <= x2 <= x1 <= 1}.
    let b = [1.0 - p.0, p.0 - p.1, p.1];
    let x = Point3::from(
        v[perm[0]].coords * b[0] + v[perm[1]].coords * b[1] + v[perm[2]].coords * b[2],
    );
    (x, b)
}

/// Shared-vertex classification and chart permutations of a singular pair.
/// The shared feature is moved to the start of both charts, ordered so the
/// parameterisations agree along the shared edge.
fn singular_perms(
    test: &[usize; 3],
    trial: &[usize; 3],
) -> Option<(PairKind, [usize; 3], [usize; 3])> {
    let mut shared: Vec<(usize, usize)> = Vec::with_capacity(3);
    for (i, a) in test.iter().enumerate() {
        for (j, b) in trial.iter().enumerate() {
            if a == b {
                shared.push((i, j));
            }
        }
    }
    match shared.len() {
        0 => None,
        1 => {
            let (i, j) = shared[0];
            Some((
                PairKind::SharedVertex,
                [i, (i + 1) % 3, (i + 2) % 3],
                [j, (j + 1) % 3, (j + 2) % 3],
            ))
        }
        2 => {
            // Order the shared pair by vertex id so both charts run the
            // edge in the same direction.
            let (mut a, mut b) = (shared[0], shared[1]);
            if test[a.0] > test[b.0] {
                std::mem::swap(&mut a, &mut b);
            }
            let other_t = 3 - a.0 - b.0;
            let other_s = 3 - a.1 - b.1;
            Some((PairKind::SharedEdge, [a.0, b.0, other_t], [a.1, b.1, other_s]))
        }
        _ => Some((PairKind::Coincident, [0, 1, 2], [0, 1, 2])),
    }
}

/// Per-operator accumulation plan resolved out of the hot loop.
struct OpPlan<'a> {
    kind: OperatorKind,
    test_space: SpaceKind,
    trial_space: SpaceKind,
    weight: Option<TestWeight<'a>>,
    ncols: usize,
}

fn space_dofs(space: SpaceKind, surface: &Surface) -> Result<usize> {
    match space {
        SpaceKind::SurfaceP0 => Ok(surface.n_triangles()),
        SpaceKind::SurfaceP1 => Ok(surface.n_vertices()),
        SpaceKind::VolumeP1 => Err(Error::Assembly(
            "boundary operators take surface spaces only".into(),
        )),
    }
}

/// Assembles several boundary operator blocks over one surface pair in a
/// single sweep. `test` and `trial` may be the same surface (the self
/// interaction, with singular pairs) or surfaces of two disjoint bodies
/// (regular quadrature throughout).
pub fn assemble_operators(
    requests: &[OperatorRequest],
    test: &Surface,
    trial: &Surface,
    k: f64,
    quad: &QuadratureConfig,
) -> Result<Vec<DenseBlock>> {
    quad.validate()?;
    let mut plans = Vec::with_capacity(requests.len());
    for r in requests {
        if r.kind == OperatorKind::Hypersingular
            && (r.trial_space != SpaceKind::SurfaceP1 || r.test_space != SpaceKind::SurfaceP1)
        {
            return Err(Error::Assembly(format!(
                "unsupported space pairing: hypersingular needs P1 test and trial, got {} / {}",
                r.test_space.label(),
                r.trial_space.label()
            )));
        }
        plans.push(OpPlan {
            kind: r.kind,
            test_space: r.test_space,
            trial_space: r.trial_space,
            weight: r.weight,
            ncols: space_dofs(r.trial_space, trial)?,
        });
        space_dofs(r.test_space, test)?;
    }

    let same_surface = test.domain == trial.domain;
    let rule = TriangleRule::collapsed(quad.regular_order);
    let singular_rules = [
        PairRule::sauter_schwab(PairKind::Coincident, quad.singular_order),
        PairRule::sauter_schwab(PairKind::SharedEdge, quad.singular_order),
        PairRule::sauter_schwab(PairKind::SharedVertex, quad.singular_order),
    ];
    let rule_for = |kind: PairKind| match kind {
        PairKind::Coincident => &singular_rules[0],
        PairKind::SharedEdge => &singular_rules[1],
        PairKind::SharedVertex => &singular_rules[2],
    };

    let test_geom: Vec<TriGeom> = (0..test.n_triangles()).map(|t| tri_geom(test, t)).collect();
    let trial_geom: Vec<TriGeom> =
        if same_surface { Vec::new() } else { (0..trial.n_triangles()).map(|t| tri_geom(trial, t)).collect() };
    let trial_geom: &[TriGeom] = if same_surface { &test_geom } else { &trial_geom };

    // Trial-side regular quadrature data, precomputed once.
    let nq = rule.points.len();
    let bary: Vec<[f64; 3]> = rule.points.iter().map(|&p| TriangleRule::barycentric(p)).collect();
    let trial_data: Vec<TrialData> = (0..trial.n_triangles())
        .map(|t| {
            let g = &trial_geom[t];
            let mut pts = Vec::with_capacity(nq);
            let mut w2a = Vec::with_capacity(nq);
            for (q, &w) in rule.points.iter().zip(&rule.weights) {
                let (x, _) = chart(&g.v, &[0, 1, 2], *q);
                pts.push(x);
                w2a.push(w * 2.0 * g.area);
            }
            TrialData { pts, w2a }
        })
        .collect();

    // One dense accumulator per operator; test triangles contribute whole
    // rows, processed in fixed chunks so the scatter order (and therefore
    // the floating-point result) does not depend on the thread count.
    let mut blocks: Vec<faer::Mat<Complex64>> = plans
        .iter()
        .map(|p| faer::Mat::zeros(space_dofs(p.test_space, test).unwrap(), p.ncols))
        .collect();

    let n_trial_tris = trial.n_triangles();
    let chunk = 32usize;
    let test_ids: Vec<usize> = (0..test.n_triangles()).collect();
    for ids in test_ids.chunks(chunk) {
        let partials: Vec<Vec<Vec<Complex64>>> = ids
            .par_iter()
            .map(|&tx| {
                let gx = &test_geom[tx];
                // Local row buffers: one row (P0) or three (P1) per op.
                let mut local: Vec<Vec<Complex64>> = plans
                    .iter()
                    .map(|p| vec![Complex64::ZERO; test_rows(p.test_space) * p.ncols])
                    .collect();
                // Test-side regular quadrature data for this triangle.
                let mut xpts = Vec::with_capacity(nq);
                for q in &rule.points {
                    xpts.push(chart(&gx.v, &[0, 1, 2], *q).0);
                }
                for ty in 0..n_trial_tris {
                    let gy = &trial_geom[ty];
                    let ycols = &trial.tris[ty];
                    let perms = if same_surface {
                        singular_perms(&test.tris[tx], &trial.tris[ty])
                    } else {
                        None
                    };
                    match perms {
                        None => {
                            accumulate_regular(
                                &plans, &mut local, ty, ycols, gx, gy, &xpts,
                                &trial_data[ty], &bary, &rule, k,
                            );
                        }
                        Some((kind, pt, ps)) => {
                            accumulate_singular(
                                &plans, &mut local, ty, ycols, gx, gy, &pt, &ps,
                                rule_for(kind), k,
                            );
                        }
                    }
                }
                local
            })
            .collect();
        for (&tx, local) in ids.iter().zip(&partials) {
            for (p, (plan, rows)) in plans.iter().zip(local).enumerate() {
                let dofs: &[usize] = match plan.test_space {
                    SpaceKind::SurfaceP0 => &[tx],
                    _ => &test.tris[tx],
                };
                for (a, &row) in dofs.iter().enumerate() {
                    for c in 0..plan.ncols {
                        blocks[p][(row, c)] += rows[a * plan.ncols + c];
                    }
                }
            }
        }
    }

    Ok(plans
        .iter()
        .zip(blocks)
        .map(|(p, mat)| {
            DenseBlock::new(
                mat,
                SpaceTag { kind: p.test_space, domain: test.domain },
                SpaceTag { kind: p.trial_space, domain: trial.domain },
            )
        })
        .collect())
}

#[inline]
fn test_rows(space: SpaceKind) -> usize {
    match space {
        SpaceKind::SurfaceP0 => 1,
        _ => 3,
    }
}

/// Kernel bundle at one point pair.
#[inline]
fn kernels(k: f64, x: &Point3<f64>, y: &Point3<f64>) -> (f64, Complex64, Complex64, Vector3<f64>) {
    let d = y - x;
    let r = d.norm();
    let g = green_r(k, r);
    // dG/dr = (ik - 1/r) G
    let gp = Complex64::new(-1.0 / r, k) * g;
    (r, g, gp, d / r)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_regular(
    plans: &[OpPlan],
    local: &mut [Vec<Complex64>],
    ty: usize,
    ycols: &[usize; 3],
    gx: &TriGeom,
    gy: &TriGeom,
    xpts: &[Point3<f64>],
    ydata: &TrialData,
    bary: &[[f64; 3]],
    rule: &TriangleRule,
    k: f64,
) {
    let nxdotny = gx.normal.dot(&gy.normal);
    for (qx, x) in xpts.iter().enumerate() {
        let wx = rule.weights[qx] * 2.0 * gx.area;
        let bx = &bary[qx];
        for (qy, y) in ydata.pts.iter().enumerate() {
            let w = wx * ydata.w2a[qy];
            let by = &bary[qy];
            let (_, g, gp, dir) = kernels(k, x, y);
            for (plan, buf) in plans.iter().zip(local.iter_mut()) {
                accumulate_point(
                    plan, buf, ty, ycols, x, g, gp, &dir, nxdotny, &gx.normal, &gy.normal,
                    bx, by, &gx.curl, &gy.curl, &[0, 1, 2], &[0, 1, 2], w, k,
                );
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_singular(
    plans: &[OpPlan],
    local: &mut [Vec<Complex64>],
    ty: usize,
    ycols: &[usize; 3],
    gx: &TriGeom,
    gy: &TriGeom,
    perm_t: &[usize; 3],
    perm_s: &[usize; 3],
    rule: &PairRule,
    k: f64,
) {
    let nxdotny = gx.normal.dot(&gy.normal);
    let jac = 4.0 * gx.area * gy.area;
    for i in 0..rule.weights.len() {
        let (x, bx) = chart(&gx.v, perm_t, rule.x[i]);
        let (y, by) = chart(&gy.v, perm_s, rule.y[i]);
        let w = rule.weights[i] * jac;
        let (_, g, gp, dir) = kernels(k, &x, &y);
        for (plan, buf) in plans.iter().zip(local.iter_mut()) {
            accumulate_point(
                plan, buf, ty, ycols, &x, g, gp, &dir, nxdotny, &gx.normal, &gy.normal,
                &bx, &by, &gx.curl, &gy.curl, perm_t, perm_s, w, k,
            );
        }
    }
}

/// Adds one quadrature point-pair to one operator's local rows. Basis values
/// arrive in chart-slot order; `perm_*` maps slots back to vertex-local
/// indices (identity for regular pairs). Buffer rows are vertex-local test
/// indices; columns are global trial dofs (`ty` for P0, `ycols` for P1).
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_point(
    plan: &OpPlan,
    buf: &mut [Complex64],
    ty: usize,
    ycols: &[usize; 3],
    x: &Point3<f64>,
    g: Complex64,
    gp: Complex64,
    dir: &Vector3<f64>,
    nxdotny: f64,
    nx: &Vector3<f64>,
    ny: &Vector3<f64>,
    bx: &[f64; 3],
    by: &[f64; 3],
    curlx: &[Vector3<f64>; 3],
    curly: &[Vector3<f64>; 3],
    perm_t: &[usize; 3],
    perm_s: &[usize; 3],
    w: f64,
    k: f64,
) {
    let cw = plan.weight.as_ref().map_or(1.0, |c| c.value(x));
    match plan.kind {
        OperatorKind::Hypersingular => {
            // Weighted test curl: c curl psi + psi (n x grad_G c).
            let wcurl = plan.weight.as_ref().map(|c| {
                let gc = c.gradient(x);
                let tangential = gc - nx * gc.dot(nx);
                nx.cross(&tangential)
            });
            let mass = g * (-k * k * nxdotny * w * cw);
            let gw = g * w;
            for (sa, &a) in perm_t.iter().enumerate() {
                for (sb, &b) in perm_s.iter().enumerate() {
                    let mut ct = curlx[a] * cw;
                    if let Some(extra) = wcurl {
                        ct += extra * bx[sa];
                    }
                    let idx = a * plan.ncols + ycols[b];
                    buf[idx] += gw * ct.dot(&curly[b]) + mass * (bx[sa] * by[sb]);
                }
            }
        }
        kind => {
            let kernel = match kind {
                OperatorKind::SingleLayer => g,
                OperatorKind::DoubleLayer => gp * dir.dot(ny),
                OperatorKind::AdjointDoubleLayer => gp * (-dir.dot(nx)),
                OperatorKind::Hypersingular => unreachable!(),
            } * (w * cw);
            match (plan.test_space, plan.trial_space) {
                (SpaceKind::SurfaceP0, SpaceKind::SurfaceP0) => {
                    buf[ty] += kernel;
                }
                (SpaceKind::SurfaceP0, _) => {
                    for (sb, &b) in perm_s.iter().enumerate() {
                        buf[ycols[b]] += kernel * by[sb];
                    }
                }
                (_, SpaceKind::SurfaceP0) => {
                    for (sa, &a) in perm_t.iter().enumerate() {
                        buf[a * plan.ncols + ty] += kernel * bx[sa];
                    }
                }
                _ => {
                    for (sa, &a) in perm_t.iter().enumerate() {
                        let row = a * plan.ncols;
                        for (sb, &b) in perm_s.iter().enumerate() {
                            buf[row + ycols[b]] += kernel * (bx[sa] * by[sb]);
                        }
                    }
                }
            }
        }
    }
}

/// Assembles one boundary operator block; see [`assemble_operators`].
pub fn assemble_boundary_operator(
    kind: OperatorKind,
    test: &Surface,
    trial: &Surface,
    k: f64,
    test_space: SpaceKind,
    trial_space: SpaceKind,
    quad: &QuadratureConfig,
    weight: Option<TestWeight>,
) -> Result<DenseBlock> {
    let req = OperatorRequest { kind, test_space, trial_space, weight };
    Ok(assemble_operators(std::slice::from_ref(&req), test, trial, k, quad)?
        .pop()
        .unwrap())
}

/// Identity (mass) pairings between the surface spaces.
pub fn assemble_identity(
    surface: &Surface,
    test_space: SpaceKind,
    trial_space: SpaceKind,
) -> Result<SparseBlock> {
    let mat = match (test_space, trial_space) {
        (SpaceKind::SurfaceP1, SpaceKind::SurfaceP1) => assemble_surface_mass(surface),
        (SpaceKind::SurfaceP1, SpaceKind::SurfaceP0) => assemble_mixed_mass_p1_p0(surface),
        (SpaceKind::SurfaceP0, SpaceKind::SurfaceP1) => {
            assemble_mixed_mass_p1_p0(surface).transpose()
        }
        (SpaceKind::SurfaceP0, SpaceKind::SurfaceP0) => assemble_p0_mass(surface),
        _ => {
            return Err(Error::Assembly(
                "identity pairings are defined between surface spaces only".into(),
            ))
        }
    };
    Ok(SparseBlock::new(
        mat,
        SpaceTag { kind: test_space, domain: surface.domain },
        SpaceTag { kind: trial_space, domain: surface.domain },
    ))
}

/// Exact distance from a point to a triangle.
pub(crate) fn point_triangle_distance(p: &Point3<f64>, v: &[Point3<f64>; 3], n: &Vector3<f64>) -> f64 {
    let dist_plane = (p - v[0]).dot(n);
    let proj = p - n * dist_plane;
    let inside = (0..3).all(|i| {
        let a = v[i];
        let b = v[(i + 1) % 3];
        ((b - a).cross(&(proj - a))).dot(n) >= 0.0
    });
    if inside {
        return dist_plane.abs();
    }
    let mut d = f64::INFINITY;
    for i in 0..3 {
        let a = v[i];
        let e = v[(i + 1) % 3] - a;
        let t = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        d = d.min((p - (a + e * t)).norm());
    }
    d
}

fn check_distances(surface: &Surface, points: &[Point3<f64>]) -> Result<()> {
    let limit = surface.max_diameter();
    for (index, p) in points.iter().enumerate() {
        let mut dist = f64::INFINITY;
        for t in 0..surface.n_triangles() {
            dist = dist.min(point_triangle_distance(p, &surface.tri_vertices(t), &surface.normals[t]));
        }
        if dist < limit {
            return Err(Error::PointTooClose { index, distance: dist, limit });
        }
    }
    Ok(())
}

/// Evaluates `K phi - V psi` at off-surface points: the representation of a
/// radiating field from its Dirichlet trace `phi` (P1) and Neumann trace
/// `psi` (P0 or P1). Points closer than one element diameter to the surface
/// are rejected; the quadrature there could not be trusted.
pub fn evaluate_potentials(
    surface: &Surface,
    k: f64,
    dirichlet: &[Complex64],
    neumann: &[Complex64],
    neumann_space: SpaceKind,
    points: &[Point3<f64>],
    quad: &QuadratureConfig,
) -> Result<Vec<Complex64>> {
    if dirichlet.len() != surface.n_vertices() {
        return Err(Error::Assembly(format!(
            "dirichlet density has {} coefficients, surface has {} vertices",
            dirichlet.len(),
            surface.n_vertices()
        )));
    }
    let expect = space_dofs(neumann_space, surface)?;
    if neumann.len() != expect {
        return Err(Error::Assembly(format!(
            "neumann density has {} coefficients, expected {}",
            neumann.len(),
            expect
        )));
    }
    check_distances(surface, points)?;

    // Quadrature data with the densities interpolated at the points.
    let rule = TriangleRule::collapsed(quad.regular_order);
    let mut qpts = Vec::new();
    for t in 0..surface.n_triangles() {
        let v = surface.tri_vertices(t);
        let tri = surface.tris[t];
        let normal = surface.normals[t];
        for (q, &w) in rule.points.iter().zip(&rule.weights) {
            let b = TriangleRule::barycentric(*q);
            let y = Point3::from(v[0].coords * b[0] + v[1].coords * b[1] + v[2].coords * b[2]);
            let phi = dirichlet[tri[0]] * b[0] + dirichlet[tri[1]] * b[1] + dirichlet[tri[2]] * b[2];
            let psi = match neumann_space {
                SpaceKind::SurfaceP0 => neumann[t],
                _ => neumann[tri[0]] * b[0] + neumann[tri[1]] * b[1] + neumann[tri[2]] * b[2],
            };
            qpts.push((y, normal, phi, psi, w * 2.0 * surface.areas[t]));
        }
    }
    Ok(points
        .par_iter()
        .map(|x| {
            let mut acc = Complex64::ZERO;
            for (y, ny, phi, psi, w) in &qpts {
                let (_, g, gp, dir) = kernels(k, x, y);
                acc += (gp * dir.dot(ny) * phi - g * psi) * *w;
            }
            acc
        })
        .collect())
}

/// Single-layer potential of a density given as a callable on the surface
/// (evaluated at the quadrature points with the triangle normal), used for
/// analytically known densities such as incident-wave traces.
pub fn evaluate_single_layer(
    surface: &Surface,
    k: f64,
    density: impl Fn(&Point3<f64>, &Vector3<f64>) -> Complex64 + Sync,
    points: &[Point3<f64>],
    quad: &QuadratureConfig,
) -> Result<Vec<Complex64>> {
    check_distances(surface, points)?;
    let rule = TriangleRule::collapsed(quad.regular_order);
    let mut qpts = Vec::new();
    for t in 0..surface.n_triangles() {
        let v = surface.tri_vertices(t);
        let normal = surface.normals[t];
        for (q, &w) in rule.points.iter().zip(&rule.weights) {
            let b = TriangleRule::barycentric(*q);
            let y = Point3::from(v[0].coords * b[0] + v[1].coords * b[1] + v[2].coords * b[2]);
            qpts.push((y, density(&y, &normal), w * 2.0 * surface.areas[t]));
        }
    }
    Ok(points
        .par_iter()
        .map(|x| {
            let mut acc = Complex64::ZERO;
            for (y, psi, w) in &qpts {
                acc += green_r(k, (x - y).norm()) * psi * *w;
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cube_mesh, build_two_cubes};
    use crate::problem::Incident;
    use approx::assert_relative_eq;
    use faer::linalg::solvers::{PartialPivLu, Solve};
    use num_complex::Complex64 as C;

    fn quad() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    /// Hand-built open patch; winding must match the +z normal.
    fn patch_surface(points: Vec<Point3<f64>>, tris: Vec<[usize; 3]>) -> Surface {
        let mut normals = Vec::new();
        let mut areas = Vec::new();
        for t in &tris {
            let c = (points[t[1]] - points[t[0]]).cross(&(points[t[2]] - points[t[0]]));
            areas.push(c.norm() / 2.0);
            normals.push(c.normalize());
        }
        Surface {
            domain: 1,
            vertex_ids: (0..points.len()).collect(),
            points,
            tri_ids: (0..tris.len()).collect(),
            tris,
            normals,
            areas,
        }
    }

    /// Closed form of `int_T dA_y / |p - y|` over a flat triangle.
    fn static_triangle_potential(v: &[Point3<f64>; 3], p: &Point3<f64>) -> f64 {
        let n = ((v[1] - v[0]).cross(&(v[2] - v[0]))).normalize();
        let w0 = (p - v[0]).dot(&n);
        let rho = p - n * w0;
        let mut total = 0.0;
        for i in 0..3 {
            let a = v[i];
            let b = v[(i + 1) % 3];
            let s_hat = (b - a).normalize();
            let m_hat = s_hat.cross(&n); // outward in-plane edge normal
            let t0 = (a - rho).dot(&m_hat);
            let s_minus = (a - rho).dot(&s_hat);
            let s_plus = (b - rho).dot(&s_hat);
            let r_minus = (p - a).norm();
            let r_plus = (p - b).norm();
            let r0sq = t0 * t0 + w0 * w0;
            total += t0 * ((r_plus + s_plus) / (r_minus + s_minus)).ln();
            if w0 != 0.0 {
                total -= w0.abs()
                    * ((t0 * s_plus / (r0sq + w0.abs() * r_plus)).atan()
                        - (t0 * s_minus / (r0sq + w0.abs() * r_minus)).atan());
            }
        }
        total
    }

    #[test]
    fn green_matches_closed_forms() {
        let x = Point3::new(0.0, 0.0, 0.0);
        let y = Point3::new(1.0, 0.0, 0.0);
        let g0 = green(0.0, &x, &y).unwrap();
        assert_relative_eq!(g0.re, 1.0 / (4.0 * std::f64::consts::PI), epsilon = 1e-15);
        assert_eq!(g0.im, 0.0);
        let y2 = Point3::new(0.3, -0.4, 0.0); // r = 0.5, k = 2 -> phase 1
        let g = green(2.0, &x, &y2).unwrap();
        let scale = 1.0 / (2.0 * std::f64::consts::PI);
        assert_relative_eq!(g.re, 1.0f64.cos() * scale, epsilon = 1e-14);
        assert_relative_eq!(g.im, 1.0f64.sin() * scale, epsilon = 1e-14);
        assert!(matches!(green(1.0, &x, &x), Err(Error::CoincidentPoints)));
    }

    #[test]
    fn coincident_single_layer_matches_the_analytic_potential() {
        // One flat triangle, k = 0, P0: the Sauter-Schwab value against an
        // analytic inner integral with high-order outer quadrature.
        let v = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let surface = patch_surface(v.to_vec(), vec![[0, 1, 2]]);
        let mut q = quad();
        q.singular_order = 8;
        let block = assemble_boundary_operator(
            OperatorKind::SingleLayer,
            &surface,
            &surface,
            0.0,
            SpaceKind::SurfaceP0,
            SpaceKind::SurfaceP0,
            &q,
            None,
        )
        .unwrap();
        let outer = TriangleRule::collapsed(16);
        let mut exact = 0.0;
        for (p, &w) in outer.points.iter().zip(&outer.weights) {
            let b = TriangleRule::barycentric(*p);
            let x = Point3::from(v[0].coords * b[0] + v[1].coords * b[1] + v[2].coords * b[2]);
            exact += w * 2.0 * 0.5 * static_triangle_potential(&v, &x);
        }
        exact /= 4.0 * std::f64::consts::PI;
        assert_relative_eq!(block.mat[(0, 0)].re, exact, max_relative = 2e-4);
        assert!(block.mat[(0, 0)].im.abs() < 1e-16);
    }

    #[test]
    fn singular_pairs_reproduce_the_smooth_helmholtz_difference() {
        // V(k) - V(0) has the entire kernel (e^{ikr} - 1)/(4 pi r), so a
        // plain tensor rule of high order is an independent oracle for every
        // singular-pair family. The patch has a coincident, edge and vertex
        // pair.
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let tris = vec![[0usize, 1, 2], [1, 3, 2], [1, 4, 3]];
        let surface = patch_surface(pts.clone(), tris.clone());
        let k = 2.0;
        let assemble = |kk: f64| {
            assemble_boundary_operator(
                OperatorKind::SingleLayer,
                &surface,
                &surface,
                kk,
                SpaceKind::SurfaceP0,
                SpaceKind::SurfaceP0,
                &quad(),
                None,
            )
            .unwrap()
            .mat
        };
        let diff_ss = assemble(k) - assemble(0.0);

        let hdiff = |r: f64| -> C {
            if r < 1e-12 {
                C::new(0.0, k / (4.0 * std::f64::consts::PI))
            } else {
                let (s, c) = (k * r).sin_cos();
                C::new(c - 1.0, s) / (4.0 * std::f64::consts::PI * r)
            }
        };
        // Different inner/outer orders keep quadrature nodes from colliding
        // on the diagonal pair.
        let rx = TriangleRule::collapsed(10);
        let ry = TriangleRule::collapsed(11);
        for a in 0..3 {
            for b in 0..3 {
                let va = surface.tri_vertices(a);
                let vb = surface.tri_vertices(b);
                let mut want = C::ZERO;
                for (px, &wx) in rx.points.iter().zip(&rx.weights) {
                    let bx = TriangleRule::barycentric(*px);
                    let x = Point3::from(
                        va[0].coords * bx[0] + va[1].coords * bx[1] + va[2].coords * bx[2],
                    );
                    for (py, &wy) in ry.points.iter().zip(&ry.weights) {
                        let by = TriangleRule::barycentric(*py);
                        let y = Point3::from(
                            vb[0].coords * by[0] + vb[1].coords * by[1] + vb[2].coords * by[2],
                        );
                        want += hdiff((x - y).norm())
                            * (wx * 2.0 * surface.areas[a] * wy * 2.0 * surface.areas[b]);
                    }
                }
                // The oracle side itself carries ~1e-6 quadrature error on
                // the odd powers of r; decomposition bugs show up at 1e-4.
                assert!(
                    (diff_ss[(a, b)] - want).norm() < 1e-5,
                    "pair ({a},{b}): {} vs {}",
                    diff_ss[(a, b)],
                    want
                );
            }
        }
    }

    #[test]
    fn operators_satisfy_the_bilinear_transpose_relations() {
        let mesh = build_cube_mesh(3).unwrap();
        let surface = mesh.surface(1);
        let k = 2.0;
        let reqs = [
            OperatorRequest::new(OperatorKind::SingleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
            OperatorRequest::new(OperatorKind::DoubleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
            OperatorRequest::new(OperatorKind::AdjointDoubleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
            OperatorRequest::new(OperatorKind::Hypersingular, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
        ];
        // The relations hold exactly for the continuous operators; the
        // discrete defect is pure singular-quadrature error (the transform
        // families are not transpose-symmetric), vanishing with the order.
        let mut q = quad();
        q.singular_order = 8;
        let blocks = assemble_operators(&reqs, &surface, &surface, k, &q).unwrap();
        let (v, kk, t, d) = (&blocks[0].mat, &blocks[1].mat, &blocks[2].mat, &blocks[3].mat);
        let n = surface.n_vertices();
        let scale = |m: &faer::Mat<C>| {
            let mut s = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    s = s.max(m[(i, j)].norm());
                }
            }
            s
        };
        let max_diff = |m1: &faer::Mat<C>, m2t: &faer::Mat<C>| {
            let mut s = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    s = s.max((m1[(i, j)] - m2t[(j, i)]).norm());
                }
            }
            s
        };
        assert!(
            max_diff(v, v) < 1e-8,
            "V not symmetric: {:.3e}",
            max_diff(v, v)
        );
        assert!(
            max_diff(d, d) < 1e-6 * scale(d),
            "D not symmetric: {:.3e} of {:.3e}",
            max_diff(d, d),
            scale(d)
        );
        assert!(
            max_diff(kk, t) < 1e-6 * scale(kk),
            "T != K^T: {:.3e} of {:.3e}",
            max_diff(kk, t),
            scale(kk)
        );
    }

    #[test]
    fn trial_spaces_agree_on_constant_densities() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let k = 2.0;
        for kind in [OperatorKind::SingleLayer, OperatorKind::DoubleLayer] {
            for test_space in [SpaceKind::SurfaceP0, SpaceKind::SurfaceP1] {
                let on_p1 = assemble_boundary_operator(
                    kind, &surface, &surface, k, test_space, SpaceKind::SurfaceP1, &quad(), None,
                )
                .unwrap();
                let on_p0 = assemble_boundary_operator(
                    kind, &surface, &surface, k, test_space, SpaceKind::SurfaceP0, &quad(), None,
                )
                .unwrap();
                let rows = on_p1.mat.nrows();
                for i in 0..rows {
                    let s1: C = (0..on_p1.mat.ncols()).map(|j| on_p1.mat[(i, j)]).sum();
                    let s0: C = (0..on_p0.mat.ncols()).map(|j| on_p0.mat[(i, j)]).sum();
                    assert!(
                        (s1 - s0).norm() < 1e-12,
                        "{} row {i}: {s1} vs {s0}",
                        kind.label()
                    );
                }
            }
        }
    }

    #[test]
    fn static_hypersingular_annihilates_constants() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let d = assemble_boundary_operator(
            OperatorKind::Hypersingular,
            &surface,
            &surface,
            0.0,
            SpaceKind::SurfaceP1,
            SpaceKind::SurfaceP1,
            &quad(),
            None,
        )
        .unwrap();
        let n = surface.n_vertices();
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                scale = scale.max(d.mat[(i, j)].norm());
            }
        }
        for i in 0..n {
            let row: C = (0..n).map(|j| d.mat[(i, j)]).sum();
            assert!(row.norm() < 1e-12 * scale, "row {i} sums to {row}");
        }
    }

    #[test]
    fn calderon_identity_residual_decreases_under_refinement() {
        // (I/2 + K) V = V (I/2 + T) in strong form, with the P1 mass
        // inverted on the weak products.
        let residual = |sub: usize| -> f64 {
            let mesh = build_cube_mesh(sub).unwrap();
            let surface = mesh.surface(1);
            let k = 2.0;
            let reqs = [
                OperatorRequest::new(OperatorKind::SingleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
                OperatorRequest::new(OperatorKind::DoubleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
                OperatorRequest::new(OperatorKind::AdjointDoubleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1),
            ];
            let blocks = assemble_operators(&reqs, &surface, &surface, k, &quad()).unwrap();
            let m = assemble_identity(&surface, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1)
                .unwrap()
                .mat
                .to_dense();
            let lu = PartialPivLu::new(m.as_ref());
            let strong = |w: &faer::Mat<C>| lu.solve(w);
            let (v, kk, t) = (&blocks[0].mat, &blocks[1].mat, &blocks[2].mat);
            let sv = strong(v);
            let sk = strong(kk);
            let st = strong(t);
            // (1/2 + K)V - V(1/2 + T) acting coefficient-to-coefficient.
            let lhs = &sk * &sv + faer::Scale(C::new(0.5, 0.0)) * &sv;
            let rhs = &sv * &st + faer::Scale(C::new(0.5, 0.0)) * &sv;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..sv.nrows() {
                for j in 0..sv.ncols() {
                    num += (lhs[(i, j)] - rhs[(i, j)]).norm_sqr();
                    den += sv[(i, j)].norm_sqr();
                }
            }
            (num / den).sqrt()
        };
        let r2 = residual(2);
        let r4 = residual(4);
        assert!(r4 < 0.05, "residual at subdivisions=4: {r4}");
        assert!(r4 < r2, "no decrease: {r2} -> {r4}");
    }

    #[test]
    fn identity_pairings_have_the_documented_shapes() {
        let mesh = build_cube_mesh(13).unwrap();
        let surface = mesh.surface(1);
        let mixed = assemble_identity(&surface, SpaceKind::SurfaceP0, SpaceKind::SurfaceP1).unwrap();
        assert_eq!(mixed.shape(), (2028, 1016));
        assert!(mixed.conforms(&mesh));
        let full = assemble_identity(&surface, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1).unwrap();
        assert_eq!(full.shape(), (1016, 1016));
        let p0 = assemble_identity(&surface, SpaceKind::SurfaceP0, SpaceKind::SurfaceP0).unwrap();
        assert_eq!(p0.shape(), (2028, 2028));
    }

    #[test]
    fn hypersingular_rejects_p0_spaces() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        let err = assemble_boundary_operator(
            OperatorKind::Hypersingular,
            &surface,
            &surface,
            1.0,
            SpaceKind::SurfaceP1,
            SpaceKind::SurfaceP0,
            &quad(),
            None,
        );
        assert!(matches!(err, Err(Error::Assembly(_))));
    }

    #[test]
    fn constant_test_weight_scales_every_operator() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        for kind in [
            OperatorKind::SingleLayer,
            OperatorKind::DoubleLayer,
            OperatorKind::AdjointDoubleLayer,
            OperatorKind::Hypersingular,
        ] {
            let plain = assemble_boundary_operator(
                kind, &surface, &surface, 1.7, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1,
                &quad(), None,
            )
            .unwrap();
            let weighted = assemble_boundary_operator(
                kind, &surface, &surface, 1.7, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1,
                &quad(), Some(TestWeight::Constant(2.0)),
            )
            .unwrap();
            let n = surface.n_vertices();
            for i in 0..n {
                for j in 0..n {
                    assert!(
                        (weighted.mat[(i, j)] - plain.mat[(i, j)] * 2.0).norm()
                            < 1e-14 * plain.mat[(i, j)].norm().max(1e-30),
                        "{} entry ({i},{j})",
                        kind.label()
                    );
                }
            }
        }
    }

    #[test]
    fn static_double_layer_potential_is_the_solid_angle() {
        // K applied to the constant density 1 at k = 0: -1 inside the closed
        // surface, 0 outside. Checks normal orientation and the jump.
        let mesh = build_cube_mesh(3).unwrap();
        let surface = mesh.surface(1);
        let phi = vec![C::ONE; surface.n_vertices()];
        let psi = vec![C::ZERO; surface.n_vertices()];
        let points = vec![Point3::new(0.5, 0.5, 0.5), Point3::new(3.0, 0.4, 0.6)];
        let vals = evaluate_potentials(
            &surface, 0.0, &phi, &psi, SpaceKind::SurfaceP1, &points, &quad(),
        )
        .unwrap();
        assert_relative_eq!(vals[0].re, -1.0, epsilon = 1e-3);
        assert!(vals[0].im.abs() < 1e-14);
        assert!(vals[1].norm() < 1e-6, "outside: {}", vals[1]);
    }

    #[test]
    fn potentials_reproduce_an_interior_point_source() {
        let mesh = build_cube_mesh(6).unwrap();
        let surface = mesh.surface(1);
        let k = 1.0;
        let src = Incident::point_source(Point3::new(0.5, 0.5, 0.5), C::ONE);
        let phi = src.dirichlet_coefficients(k, &surface);
        // P0 Neumann coefficients: normal derivative at the centroids.
        let psi: Vec<C> = (0..surface.n_triangles())
            .map(|t| {
                let v = surface.tri_vertices(t);
                let c = Point3::from((v[0].coords + v[1].coords + v[2].coords) / 3.0);
                let g = src.gradient(k, &c);
                let n = surface.normals[t];
                g.x * n.x + g.y * n.y + g.z * n.z
            })
            .collect();
        let points = vec![
            Point3::new(2.0, 0.6, 0.5),
            Point3::new(0.5, -1.2, 0.3),
            Point3::new(1.8, 1.7, 1.9),
        ];
        let vals = evaluate_potentials(
            &surface, k, &phi, &psi, SpaceKind::SurfaceP0, &points, &quad(),
        )
        .unwrap();
        for (x, got) in points.iter().zip(&vals) {
            let want = src.field(k, x);
            assert!(
                (got - want).norm() / want.norm() < 0.01,
                "at {x:?}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn potential_points_too_close_are_rejected() {
        let mesh = build_cube_mesh(6).unwrap();
        let surface = mesh.surface(1);
        let phi = vec![C::ONE; surface.n_vertices()];
        let psi = vec![C::ZERO; surface.n_vertices()];
        let points = vec![Point3::new(3.0, 0.5, 0.5), Point3::new(1.05, 0.5, 0.5)];
        let err = evaluate_potentials(
            &surface, 1.0, &phi, &psi, SpaceKind::SurfaceP1, &points, &quad(),
        );
        match err {
            Err(Error::PointTooClose { index, distance, limit }) => {
                assert_eq!(index, 1);
                assert!(distance < limit);
                assert_relative_eq!(distance, 0.05, epsilon = 1e-12);
            }
            other => panic!("expected PointTooClose, got {other:?}"),
        }
    }

    #[test]
    fn radiated_field_decays_like_one_over_r() {
        let mesh = build_cube_mesh(4).unwrap();
        let surface = mesh.surface(1);
        let k = 1.0;
        let src = Incident::point_source(Point3::new(0.5, 0.5, 0.5), C::ONE);
        let phi = src.dirichlet_coefficients(k, &surface);
        let psi: Vec<C> = (0..surface.n_triangles())
            .map(|t| {
                let v = surface.tri_vertices(t);
                let c = Point3::from((v[0].coords + v[1].coords + v[2].coords) / 3.0);
                let g = src.gradient(k, &c);
                let n = surface.normals[t];
                g.x * n.x + g.y * n.y + g.z * n.z
            })
            .collect();
        let dir = Vector3::new(1.0, 0.3, 0.2).normalize();
        let points: Vec<Point3<f64>> = [50.0, 100.0]
            .iter()
            .map(|&r| Point3::from(Vector3::new(0.5, 0.5, 0.5) + dir * r))
            .collect();
        let vals = evaluate_potentials(
            &surface, k, &phi, &psi, SpaceKind::SurfaceP0, &points, &quad(),
        )
        .unwrap();
        let a50 = vals[0].norm() * 50.0;
        let a100 = vals[1].norm() * 100.0;
        assert!(
            (a50 / a100 - 1.0).abs() < 0.05,
            "scaled amplitudes {a50} vs {a100}"
        );
    }

    #[test]
    fn cross_surface_blocks_obey_the_transpose_relations() {
        let mesh = build_two_cubes(2, 0.5).unwrap();
        let s1 = mesh.surface(1);
        let s2 = mesh.surface(2);
        let k = 1.1;
        let v12 = assemble_boundary_operator(
            OperatorKind::SingleLayer, &s1, &s2, k,
            SpaceKind::SurfaceP1, SpaceKind::SurfaceP1, &quad(), None,
        )
        .unwrap();
        let v21 = assemble_boundary_operator(
            OperatorKind::SingleLayer, &s2, &s1, k,
            SpaceKind::SurfaceP1, SpaceKind::SurfaceP1, &quad(), None,
        )
        .unwrap();
        assert_eq!(v12.test.domain, 1);
        assert_eq!(v12.trial.domain, 2);
        for i in 0..v12.mat.nrows() {
            for j in 0..v12.mat.ncols() {
                assert!((v12.mat[(i, j)] - v21.mat[(j, i)]).norm() < 1e-14);
            }
        }
        let k12 = assemble_boundary_operator(
            OperatorKind::DoubleLayer, &s1, &s2, k,
            SpaceKind::SurfaceP1, SpaceKind::SurfaceP1, &quad(), None,
        )
        .unwrap();
        let t21 = assemble_boundary_operator(
            OperatorKind::AdjointDoubleLayer, &s2, &s1, k,
            SpaceKind::SurfaceP1, SpaceKind::SurfaceP1, &quad(), None,
        )
        .unwrap();
        for i in 0..k12.mat.nrows() {
            for j in 0..k12.mat.ncols() {
                assert!((k12.mat[(i, j)] - t21.mat[(j, i)]).norm() < 1e-14);
            }
        }
    }
}
