//! Field sampling on planes and surfaces, error norms, and artifact emission.
//!
//! Plane slices classify every sample point by ray-casting parity against the
//! surface triangulations: interior points are P1-interpolated from the
//! volume solution, exterior points are reconstructed from the representation
//! formula, and a band of one element diameter around each surface is masked
//! out because the regular quadrature of the potentials cannot be trusted
//! there. Artifacts are legacy ASCII VTK files and a fixed-header CSV table;
//! both are deterministic functions of their inputs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use num_complex::Complex64;

use crate::bem::point_triangle_distance;
use crate::formulations::{reconstruct_exterior, FormulationSystem};
use crate::mesh::{build_restrictions, Mesh, Surface};
use crate::problem::TransmissionProblem;
use crate::quadrature::QuadratureConfig;
use crate::{Error, Result};

/// Exact header line of the benchmark CSV table.
pub const CSV_HEADER: &str =
    "k, formulation, variant, preconditioner, iterations, condition_number, wall_time_s";

/// Classification of one plane sample point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    /// Inside a body; value comes from the P1 volume interpolant.
    Interior,
    /// In the exterior, clear of all near-surface bands.
    Exterior,
    /// Within one element diameter of a surface; value is masked to zero.
    NearSurface,
}

/// A rectangular sampling patch: corner point plus two edge vectors.
#[derive(Debug, Clone)]
pub struct PlaneSpec {
    pub origin: Point3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
}

impl PlaneSpec {
    /// The axis-aligned patch `z = height`, `x, y` in `[lo, hi]`.
    pub fn horizontal(height: f64, lo: f64, hi: f64) -> Self {
        Self {
            origin: Point3::new(lo, lo, height),
            edge_u: Vector3::new(hi - lo, 0.0, 0.0),
            edge_v: Vector3::new(0.0, hi - lo, 0.0),
        }
    }

    /// The patch point at parameters `s, t` in `[0, 1]`.
    pub fn point(&self, s: f64, t: f64) -> Point3<f64> {
        self.origin + self.edge_u * s + self.edge_v * t
    }
}

/// A complex field sampled on a plane patch, with its classification mask.
#[derive(Debug, Clone)]
pub struct FieldSlice {
    pub plane: PlaneSpec,
    /// Samples per patch edge.
    pub resolution: usize,
    /// Row-major over the `v` axis: index `iv * resolution + iu`.
    pub values: Vec<Complex64>,
    pub mask: Vec<PointClass>,
}

impl FieldSlice {
    /// The sample grid in storage order.
    pub fn points(&self) -> Vec<Point3<f64>> {
        let n = self.resolution;
        let step = 1.0 / (n as f64 - 1.0);
        let mut pts = Vec::with_capacity(n * n);
        for iv in 0..n {
            for iu in 0..n {
                pts.push(self.plane.point(iu as f64 * step, iv as f64 * step));
            }
        }
        pts
    }

    /// Values at unmasked points, in storage order.
    pub fn unmasked_values(&self) -> Vec<Complex64> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m != PointClass::NearSurface)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn max_abs_unmasked(&self) -> f64 {
        self.unmasked_values()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Per-tetrahedron interpolation data of one domain.
struct DomainInterpolant {
    tets: Vec<[usize; 4]>,
    /// Inverse edge matrices mapping `x - v0` to barycentric `(l1, l2, l3)`.
    inverses: Vec<Matrix3<f64>>,
    bbox_lo: Vec<Point3<f64>>,
    bbox_hi: Vec<Point3<f64>>,
    /// Volume-dof index of each global vertex.
    dof: HashMap<usize, usize>,
    pressure: Vec<Complex64>,
}

impl DomainInterpolant {
    fn build(mesh: &Mesh, domain: u32, pressure: Vec<Complex64>) -> Result<Self> {
        let maps = build_restrictions(mesh, domain);
        let mut dof = HashMap::new();
        for (i, &v) in maps.volume_dofs.iter().enumerate() {
            dof.insert(v, i);
        }
        let mut tets = Vec::new();
        let mut inverses = Vec::new();
        let mut bbox_lo = Vec::new();
        let mut bbox_hi = Vec::new();
        for (t, tet) in mesh.tets.iter().enumerate() {
            if mesh.tet_domain[t] != domain {
                continue;
            }
            let v: Vec<&Point3<f64>> = tet.iter().map(|&i| &mesh.vertices[i]).collect();
            let edges = Matrix3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
            let inv = edges.try_inverse().ok_or_else(|| {
                Error::Mesh(format!("degenerate tetrahedron {t} in domain {domain}"))
            })?;
            let mut lo = *v[0];
            let mut hi = *v[0];
            for p in &v[1..] {
                for c in 0..3 {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
            tets.push(*tet);
            inverses.push(inv);
            bbox_lo.push(lo);
            bbox_hi.push(hi);
        }
        Ok(Self {
            tets,
            inverses,
            bbox_lo,
            bbox_hi,
            dof,
            pressure,
        })
    }

    /// P1 interpolation at `p`, if some tetrahedron contains it.
    fn evaluate(&self, mesh: &Mesh, p: &Point3<f64>) -> Option<Complex64> {
        const TOL: f64 = 1.0e-9;
        for (t, tet) in self.tets.iter().enumerate() {
            let (lo, hi) = (&self.bbox_lo[t], &self.bbox_hi[t]);
            if (0..3).any(|c| p[c] < lo[c] - TOL || p[c] > hi[c] + TOL) {
                continue;
            }
            let local = self.inverses[t] * (p - mesh.vertices[tet[0]]);
            let l0 = 1.0 - local.x - local.y - local.z;
            if local.x >= -TOL && local.y >= -TOL && local.z >= -TOL && l0 >= -TOL {
                let weights = [l0, local.x, local.y, local.z];
                let mut value = Complex64::default();
                for (w, &vertex) in weights.iter().zip(tet) {
                    value += Complex64::new(*w, 0.0) * self.pressure[self.dof[&vertex]];
                }
                return Some(value);
            }
        }
        None
    }
}

fn distance_to_surface(surface: &Surface, p: &Point3<f64>) -> f64 {
    let mut dist = f64::INFINITY;
    for t in 0..surface.n_triangles() {
        dist = dist.min(point_triangle_distance(
            p,
            &surface.tri_vertices(t),
            &surface.normals[t],
        ));
    }
    dist
}

/// Samples the total pressure on a plane patch.
///
/// Every grid point is classified against each body: points within one
/// element diameter of a surface are masked, interior points take the P1
/// interpolant of that domain's volume solution, and the remaining exterior
/// points go through the representation formula. The mask width matches the
/// distance precondition of the potential evaluation, so no unmasked exterior
/// point can be rejected there.
pub fn sample_plane(
    system: &FormulationSystem,
    mesh: &Mesh,
    problem: &TransmissionProblem,
    solution: &[Complex64],
    plane: &PlaneSpec,
    resolution: usize,
    quad: &QuadratureConfig,
) -> Result<FieldSlice> {
    if resolution < 2 {
        return Err(Error::Formulation(format!(
            "plane resolution must be at least 2, got {resolution}"
        )));
    }
    let parts = system.split(solution)?;
    let slice = FieldSlice {
        plane: plane.clone(),
        resolution,
        values: vec![Complex64::default(); resolution * resolution],
        mask: vec![PointClass::Exterior; resolution * resolution],
    };
    let points = slice.points();
    let mut values = slice.values;
    let mut mask = slice.mask;

    // Classify against every body; the near band wins over everything.
    let mut owner: Vec<Option<u32>> = vec![None; points.len()];
    for part in &parts {
        let surface = mesh.surface(part.domain);
        let width = surface.max_diameter();
        for (i, p) in points.iter().enumerate() {
            if mask[i] == PointClass::NearSurface {
                continue;
            }
            if distance_to_surface(&surface, p) < width {
                mask[i] = PointClass::NearSurface;
                owner[i] = None;
            } else if surface.encloses(p) {
                mask[i] = PointClass::Interior;
                owner[i] = Some(part.domain);
            }
        }
    }

    for part in parts.iter() {
        let interp = DomainInterpolant::build(mesh, part.domain, part.pressure.clone())?;
        for (i, p) in points.iter().enumerate() {
            if owner[i] != Some(part.domain) {
                continue;
            }
            match interp.evaluate(mesh, p) {
                Some(v) => values[i] = v,
                // Ray parity and the tet walk can disagree only inside the
                // skin of the mesh; treat such points as near-surface.
                None => mask[i] = PointClass::NearSurface,
            }
        }
    }

    let exterior: Vec<usize> = (0..points.len())
        .filter(|&i| mask[i] == PointClass::Exterior)
        .collect();
    if !exterior.is_empty() {
        let pts: Vec<Point3<f64>> = exterior.iter().map(|&i| points[i]).collect();
        let field = reconstruct_exterior(system, mesh, problem, solution, &pts, quad)?;
        for (slot, value) in exterior.iter().zip(field) {
            values[*slot] = value;
        }
    }

    for (i, v) in values.iter().enumerate() {
        if mask[i] != PointClass::NearSurface && !(v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::Formulation(format!(
                "non-finite field value at unmasked sample point {i}"
            )));
        }
    }

    Ok(FieldSlice {
        plane: plane.clone(),
        resolution,
        values,
        mask,
    })
}

/// Relative 2-norm deviation of `values` from `reference`.
pub fn relative_error(values: &[Complex64], reference: &[Complex64]) -> Result<f64> {
    if values.len() != reference.len() {
        return Err(Error::Formulation(format!(
            "relative error needs equal lengths, got {} and {}",
            values.len(),
            reference.len()
        )));
    }
    let den: f64 = reference.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Formulation(
            "relative error against a zero reference is undefined".into(),
        ));
    }
    let num: f64 = values
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// One row of the benchmark battery output table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub k: f64,
    pub formulation: String,
    pub variant: String,
    pub preconditioner: String,
    pub iterations: usize,
    pub condition_number: Option<f64>,
    pub wall_time_s: f64,
}

/// Renders the benchmark CSV table (fixed header, one row per record).
pub fn render_csv(records: &[BenchRecord]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let cond = r
            .condition_number
            .map_or_else(String::new, |c| format!("{c}"));
        let _ = writeln!(
            out,
            "{}, {}, {}, {}, {}, {}, {}",
            r.k, r.formulation, r.variant, r.preconditioner, r.iterations, cond, r.wall_time_s
        );
    }
    out
}

pub fn write_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_csv(records))?;
    Ok(())
}

/// Parses a benchmark CSV table back into records.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "bad CSV header: {:?}",
                other.unwrap_or_default()
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::Config(format!(
                "CSV row {} has {} fields, expected 7",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad {what} '{s}' on row {}: {e}", lineno + 2)))
        };
        let condition_number = if fields[5].is_empty() {
            None
        } else {
            Some(parse_f64(fields[5], "condition_number")?)
        };
        records.push(BenchRecord {
            k: parse_f64(fields[0], "wavenumber")?,
            formulation: fields[1].to_string(),
            variant: fields[2].to_string(),
            preconditioner: fields[3].to_string(),
            iterations: fields[4].parse().map_err(|e| {
                Error::Config(format!(
                    "bad iteration count '{}' on row {}: {e}",
                    fields[4],
                    lineno + 2
                ))
            })?,
            condition_number,
            wall_time_s: parse_f64(fields[6], "wall_time_s")?,
        });
    }
    Ok(records)
}

fn vtk_preamble(out: &mut String, title: &str) {
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str(title);
    out.push('\n');
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
}

fn vtk_points(out: &mut String, points: &[Point3<f64>]) {
    let _ = writeln!(out, "POINTS {} double", points.len());
    for p in points {
        let _ = writeln!(out, "{:.12e} {:.12e} {:.12e}", p.x, p.y, p.z);
    }
}

fn vtk_complex_field(out: &mut String, name: &str, values: &[Complex64]) {
    let _ = writeln!(out, "SCALARS {name}_re double 1");
    out.push_str("LOOKUP_TABLE default\n");
    for v in values {
        let _ = writeln!(out, "{:.12e}", v.re);
    }
    let _ = writeln!(out, "SCALARS {name}_im double 1");
    out.push_str("LOOKUP_TABLE default\n");
    for v in values {
        let _ = writeln!(out, "{:.12e}", v.im);
    }
}

/// Renders a plane slice as a legacy ASCII VTK unstructured quad grid.
pub fn render_vtk_plane(slice: &FieldSlice, name: &str) -> String {
    let n = slice.resolution;
    let mut out = String::new();
    vtk_preamble(&mut out, "fembem plane slice");
    vtk_points(&mut out, &slice.points());
    let ncell = (n - 1) * (n - 1);
    let _ = writeln!(out, "CELLS {} {}", ncell, 5 * ncell);
    for iv in 0..n - 1 {
        for iu in 0..n - 1 {
            let a = iv * n + iu;
            let _ = writeln!(out, "4 {} {} {} {}", a, a + 1, a + n + 1, a + n);
        }
    }
    let _ = writeln!(out, "CELL_TYPES {ncell}");
    for _ in 0..ncell {
        out.push_str("9\n");
    }
    let _ = writeln!(out, "POINT_DATA {}", n * n);
    vtk_complex_field(&mut out, name, &slice.values);
    out.push_str("SCALARS mask int 1\nLOOKUP_TABLE default\n");
    for m in &slice.mask {
        let code = match m {
            PointClass::Interior => 1,
            PointClass::Exterior => 0,
            PointClass::NearSurface => 2,
        };
        let _ = writeln!(out, "{code}");
    }
    out
}

pub fn write_vtk_plane(slice: &FieldSlice, name: &str, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_vtk_plane(slice, name))?;
    Ok(())
}

/// Renders a P1 surface field as a legacy ASCII VTK triangle mesh.
pub fn render_vtk_surface(surface: &Surface, values: &[Complex64], name: &str) -> Result<String> {
    if values.len() != surface.points.len() {
        return Err(Error::Formulation(format!(
            "surface field has {} values for {} vertices",
            values.len(),
            surface.points.len()
        )));
    }
    let mut out = String::new();
    vtk_preamble(&mut out, "fembem surface field");
    vtk_points(&mut out, &surface.points);
    let ncell = surface.tris.len();
    let _ = writeln!(out, "CELLS {} {}", ncell, 4 * ncell);
    for t in &surface.tris {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(out, "CELL_TYPES {ncell}");
    for _ in 0..ncell {
        out.push_str("5\n");
    }
    let _ = writeln!(out, "POINT_DATA {}", surface.points.len());
    vtk_complex_field(&mut out, name, values);
    Ok(out)
}

pub fn write_vtk_surface(
    surface: &Surface,
    values: &[Complex64],
    name: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, render_vtk_surface(surface, values, name)?)?;
    Ok(())
}
