//! Tetrahedral meshes with extracted boundary triangulations.
//!
//! Every mesh is a conforming tetrahedralisation of one or more disjoint
//! bodies (domains). The boundary of each domain is extracted as an oriented
//! triangle list with outward unit normals; surface triangles are faces of
//! exactly one tetrahedron of their domain. Degree-of-freedom orderings are
//! canonical and deterministic: volume P1 dofs follow ascending global vertex
//! index per domain, surface P1 dofs follow ascending owning vertex index,
//! and surface P0 dofs follow the triangle order of the domain.
//!
//! Generators: a unit-style cube split into Kuhn tetrahedra (six per voxel,
//! all sharing the voxel diagonal, which makes the subdivision conforming),
//! a ball built from an icosphere with radially stacked prism layers, and a
//! two-cube arrangement for multi-body experiments. Gmsh MSH 2.2 ASCII files
//! can be imported and exported, and meshes can be dumped as legacy VTK for
//! inspection.

use nalgebra::{Point3, Vector3};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::sparse::CsrMatrix;
use crate::{Error, Result};
use num_complex::Complex64;

/// Conforming tetrahedral mesh of one or more disjoint bodies.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Vertex coordinates, shared by all domains.
    pub vertices: Vec<Point3<f64>>,
    /// Tetrahedra as vertex quadruples with positive signed volume.
    pub tets: Vec<[usize; 4]>,
    /// Domain id of each tetrahedron.
    pub tet_domain: Vec<u32>,
    /// Boundary triangles with outward winding, all domains concatenated.
    pub surface_tris: Vec<[usize; 3]>,
    /// Domain id of each surface triangle.
    pub tri_domain: Vec<u32>,
    /// Index of the tetrahedron owning each surface triangle.
    pub tri_owner: Vec<usize>,
    /// Outward unit normal of each surface triangle.
    pub normals: Vec<Vector3<f64>>,
    /// Sorted list of domain ids present in the mesh.
    pub domains: Vec<u32>,
}

/// Boundary triangulation of a single domain with surface-local dof indexing.
#[derive(Debug, Clone)]
pub struct Surface {
    pub domain: u32,
    /// Global vertex id of each surface P1 dof (ascending).
    pub vertex_ids: Vec<usize>,
    /// Coordinates of each surface P1 dof.
    pub points: Vec<Point3<f64>>,
    /// Triangles in surface-local dof indices, outward winding; the order of
    /// this list is the surface P0 dof order.
    pub tris: Vec<[usize; 3]>,
    /// Global surface-triangle index of each local triangle.
    pub tri_ids: Vec<usize>,
    pub normals: Vec<Vector3<f64>>,
    pub areas: Vec<f64>,
}

impl Surface {
    pub fn n_vertices(&self) -> usize {
        self.vertex_ids.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.tris.len()
    }

    /// Vertex coordinates of triangle `t` in winding order.
    pub fn tri_vertices(&self, t: usize) -> [Point3<f64>; 3] {
        let tri = self.tris[t];
        [self.points[tri[0]], self.points[tri[1]], self.points[tri[2]]]
    }

    /// Longest triangle edge over the whole surface.
    pub fn max_diameter(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in 0..self.tris.len() {
            let v = self.tri_vertices(t);
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                h = h.max((v[a] - v[b]).norm());
            }
        }
        h
    }

    /// Total area.
    pub fn area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Axis-aligned bounding box of the surface vertices.
    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }

    /// Whether `point` lies inside the closed surface, by ray-crossing
    /// parity.  Rays that graze an edge, a vertex, or a triangle plane are
    /// discarded and the test retried along a different direction, so the
    /// answer is reliable away from the surface itself; points *on* the
    /// surface land on whichever side the first clean ray reports.
    pub fn encloses(&self, point: &Point3<f64>) -> bool {
        let (lo, hi) = self.bounding_box();
        let diag = (hi - lo).norm();
        if diag == 0.0 {
            return false;
        }
        for i in 0..3 {
            if point[i] < lo[i] - 1e-12 * diag || point[i] > hi[i] + 1e-12 * diag {
                return false;
            }
        }
        let probes = [
            Vector3::new(0.573, 0.371, 0.731),
            Vector3::new(-0.287, 0.912, 0.293),
            Vector3::new(0.802, -0.441, 0.403),
            Vector3::new(0.131, -0.566, -0.814),
            Vector3::new(-0.702, -0.197, 0.684),
            Vector3::new(0.949, 0.104, -0.298),
            Vector3::new(-0.404, -0.871, 0.279),
            Vector3::new(0.217, 0.683, -0.697),
        ];
        'probe: for dir in &probes {
            let d = dir.normalize();
            let mut crossings = 0usize;
            for t in 0..self.tris.len() {
                let v = self.tri_vertices(t);
                match ray_triangle_crossing(point, &d, &v, diag) {
                    RayHit::Miss => {}
                    RayHit::Cross => crossings += 1,
                    RayHit::Grazing => continue 'probe,
                }
            }
            return crossings % 2 == 1;
        }
        // Every probe grazed the surface: the point is essentially on it, so
        // report it as enclosed and let callers apply their own clearance.
        true
    }
}

enum RayHit {
    Miss,
    Cross,
    Grazing,
}

/// Moeller-Trumbore intersection classifying hits too close to the triangle
/// boundary (or to the ray origin) as `Grazing` so the caller can retry.
fn ray_triangle_crossing(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    v: &[Point3<f64>; 3],
    scale: f64,
) -> RayHit {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-12 * e1.norm() * e2.norm() {
        // Near-parallel ray: cannot distinguish a graze from a clean miss.
        return RayHit::Grazing;
    }
    let inv = 1.0 / det;
    let s = origin - v[0];
    let u = s.dot(&p) * inv;
    let q = s.cross(&e1);
    let w = dir.dot(&q) * inv;
    let t = e2.dot(&q) * inv;
    let t_eps = 1e-12 * scale;
    if t < -t_eps {
        return RayHit::Miss;
    }
    if t < t_eps {
        return RayHit::Grazing;
    }
    let b_eps = 1e-10;
    if u < -b_eps || w < -b_eps || u + w > 1.0 + b_eps {
        return RayHit::Miss;
    }
    if u < b_eps || w < b_eps || u + w > 1.0 - b_eps {
        return RayHit::Grazing;
    }
    RayHit::Cross
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn n_surface_triangles(&self) -> usize {
        self.surface_tris.len()
    }

    /// Signed volume of a tetrahedron given its vertex quadruple.
    fn signed_volume(v: [&Point3<f64>; 4]) -> f64 {
        let a = v[1] - v[0];
        let b = v[2] - v[0];
        let c = v[3] - v[0];
        a.cross(&b).dot(&c) / 6.0
    }

    /// Volume of tetrahedron `t`.
    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        Self::signed_volume([
            &self.vertices[a],
            &self.vertices[b],
            &self.vertices[c],
            &self.vertices[d],
        ])
    }

    /// Total volume over all domains.
    pub fn total_volume(&self) -> f64 {
        (0..self.n_tets()).map(|t| self.tet_volume(t)).sum()
    }

    /// Longest tetrahedron edge in the mesh.
    pub fn max_element_diameter(&self) -> f64 {
        let mut h: f64 = 0.0;
        for tet in &self.tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    h = h.max((self.vertices[tet[i]] - self.vertices[tet[j]]).norm());
                }
            }
        }
        h
    }

    /// Radius of the sphere circumscribing the bounding box of all vertices.
    pub fn circumscribed_radius(&self) -> f64 {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        0.5 * (hi - lo).norm()
    }

    /// Global vertex ids incident to the tetrahedra of `domain`, ascending.
    /// This is the canonical volume P1 dof order of the domain.
    pub fn volume_vertices(&self, domain: u32) -> Vec<usize> {
        let mut used = vec![false; self.n_vertices()];
        for (tet, &d) in self.tets.iter().zip(&self.tet_domain) {
            if d == domain {
                for &v in tet {
                    used[v] = true;
                }
            }
        }
        (0..self.n_vertices()).filter(|&v| used[v]).collect()
    }

    /// Global vertex ids on the boundary of `domain`, ascending.
    /// This is the canonical surface P1 dof order of the domain.
    pub fn surface_vertices(&self, domain: u32) -> Vec<usize> {
        let mut used = vec![false; self.n_vertices()];
        for (tri, &d) in self.surface_tris.iter().zip(&self.tri_domain) {
            if d == domain {
                for &v in tri {
                    used[v] = true;
                }
            }
        }
        (0..self.n_vertices()).filter(|&v| used[v]).collect()
    }

    /// Extracts the boundary triangulation of `domain` with surface-local
    /// dof indexing.
    pub fn surface(&self, domain: u32) -> Surface {
        let vertex_ids = self.surface_vertices(domain);
        let mut local = vec![usize::MAX; self.n_vertices()];
        for (i, &v) in vertex_ids.iter().enumerate() {
            local[v] = i;
        }
        let points = vertex_ids.iter().map(|&v| self.vertices[v]).collect();
        let mut tris = Vec::new();
        let mut tri_ids = Vec::new();
        let mut normals = Vec::new();
        let mut areas = Vec::new();
        for (t, (tri, &d)) in self.surface_tris.iter().zip(&self.tri_domain).enumerate() {
            if d != domain {
                continue;
            }
            tris.push([local[tri[0]], local[tri[1]], local[tri[2]]]);
            tri_ids.push(t);
            normals.push(self.normals[t]);
            let e1 = self.vertices[tri[1]] - self.vertices[tri[0]];
            let e2 = self.vertices[tri[2]] - self.vertices[tri[0]];
            areas.push(0.5 * e1.cross(&e2).norm());
        }
        Surface {
            domain,
            vertex_ids,
            points,
            tris,
            tri_ids,
            normals,
            areas,
        }
    }

    /// Checks all structural invariants, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.domains.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Mesh("domain list is not sorted unique".into()));
        }
        for t in 0..self.n_tets() {
            if self.tet_volume(t) <= 0.0 {
                return Err(Error::Mesh(format!(
                    "tetrahedron {t} has non-positive volume {}",
                    self.tet_volume(t)
                )));
            }
        }
        // Face incidence: boundary faces appear once, interior twice.
        let faces = self.face_incidence()?;
        let mut boundary: HashMap<[usize; 3], (usize, usize)> = HashMap::new();
        for (key, list) in faces {
            if list.len() == 1 {
                boundary.insert(key, list[0]);
            }
        }
        if boundary.len() != self.surface_tris.len() {
            return Err(Error::Mesh(format!(
                "extracted surface has {} triangles but {} boundary faces exist",
                self.surface_tris.len(),
                boundary.len()
            )));
        }
        for (t, tri) in self.surface_tris.iter().enumerate() {
            let mut key = *tri;
            key.sort_unstable();
            let Some(&(owner, _)) = boundary.get(&key) else {
                return Err(Error::Mesh(format!(
                    "surface triangle {t} is not a boundary face"
                )));
            };
            if owner != self.tri_owner[t] {
                return Err(Error::Mesh(format!("surface triangle {t} owner mismatch")));
            }
            if self.tet_domain[owner] != self.tri_domain[t] {
                return Err(Error::Mesh(format!("surface triangle {t} domain mismatch")));
            }
            // Normal: unit, consistent with winding, outward of the owner.
            let n = self.normals[t];
            if (n.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::Mesh(format!("normal {t} is not unit")));
            }
            let v = [
                self.vertices[tri[0]],
                self.vertices[tri[1]],
                self.vertices[tri[2]],
            ];
            let rec = (v[1] - v[0]).cross(&(v[2] - v[0]));
            if (rec.normalize() - n).norm() > 1e-12 {
                return Err(Error::Mesh(format!(
                    "normal {t} disagrees with triangle winding"
                )));
            }
            let face_c = Point3::from((v[0].coords + v[1].coords + v[2].coords) / 3.0);
            let tet = self.tets[owner];
            let tet_c = Point3::from(
                tet.iter().map(|&i| self.vertices[i].coords).sum::<Vector3<f64>>() / 4.0,
            );
            if n.dot(&(face_c - tet_c)) <= 0.0 {
                return Err(Error::Mesh(format!("normal {t} points into its owner")));
            }
        }
        Ok(())
    }

    /// Face incidence map; errors if any face is shared by more than two
    /// tetrahedra or by tetrahedra of different domains.
    fn face_incidence(&self) -> Result<HashMap<[usize; 3], Vec<(usize, usize)>>> {
        let mut faces: HashMap<[usize; 3], Vec<(usize, usize)>> = HashMap::new();
        for (t, tet) in self.tets.iter().enumerate() {
            for omit in 0..4 {
                let mut key = [0usize; 3];
                let mut j = 0;
                for i in 0..4 {
                    if i != omit {
                        key[j] = tet[i];
                        j += 1;
                    }
                }
                key.sort_unstable();
                let list = faces.entry(key).or_default();
                list.push((t, tet[omit]));
                if list.len() > 2 {
                    return Err(Error::Mesh(format!(
                        "mesh is not watertight: face {key:?} is shared by more than two tetrahedra"
                    )));
                }
                if list.len() == 2 && self.tet_domain[list[0].0] != self.tet_domain[list[1].0] {
                    return Err(Error::Mesh(format!(
                        "face {key:?} is shared across domains; bodies must be disjoint"
                    )));
                }
            }
        }
        Ok(faces)
    }

    /// Builds a mesh from raw tetrahedra: orients them positively, extracts
    /// oriented boundary triangles per domain and computes outward normals.
    pub fn from_tets(
        vertices: Vec<Point3<f64>>,
        mut tets: Vec<[usize; 4]>,
        tet_domain: Vec<u32>,
    ) -> Result<Mesh> {
        assert_eq!(tets.len(), tet_domain.len());
        for tet in &mut tets {
            let v = [
                &vertices[tet[0]],
                &vertices[tet[1]],
                &vertices[tet[2]],
                &vertices[tet[3]],
            ];
            let vol = Self::signed_volume(v);
            if vol == 0.0 {
                return Err(Error::Mesh(format!("degenerate tetrahedron {tet:?}")));
            }
            if vol < 0.0 {
                tet.swap(2, 3);
            }
        }
        let mut domains: Vec<u32> = tet_domain.clone();
        domains.sort_unstable();
        domains.dedup();
        let mut mesh = Mesh {
            vertices,
            tets,
            tet_domain,
            surface_tris: Vec::new(),
            tri_domain: Vec::new(),
            tri_owner: Vec::new(),
            normals: Vec::new(),
            domains,
        };
        let faces = mesh.face_incidence()?;
        // Deterministic order: boundary faces sorted by (domain, sorted key).
        let mut boundary: Vec<([usize; 3], usize, usize)> = faces
            .into_iter()
            .filter(|(_, list)| list.len() == 1)
            .map(|(key, list)| (key, list[0].0, list[0].1))
            .collect();
        boundary.sort_by_key(|&(key, owner, _)| (mesh.tet_domain[owner], key));
        for (key, owner, opposite) in boundary {
            let [a, b, c] = key;
            let va = mesh.vertices[a];
            let n = (mesh.vertices[b] - va).cross(&(mesh.vertices[c] - va));
            let outward = n.dot(&(va - mesh.vertices[opposite])) > 0.0;
            let tri = if outward { [a, b, c] } else { [a, c, b] };
            let va = mesh.vertices[tri[0]];
            let n = (mesh.vertices[tri[1]] - va)
                .cross(&(mesh.vertices[tri[2]] - va))
                .normalize();
            mesh.surface_tris.push(tri);
            mesh.tri_domain.push(mesh.tet_domain[owner]);
            mesh.tri_owner.push(owner);
            mesh.normals.push(n);
        }
        Ok(mesh)
    }
}

/// Kuhn subdivision of an axis-aligned cube into `6 n^3` tetrahedra.
///
/// Each voxel is split into the six tetrahedra spanned by the orderings of
/// its local coordinates; all six share the voxel diagonal, so neighbouring
/// voxels match faces and the global mesh is conforming. The unit cube is
/// `[0,1]^3`; `subdivisions = n` gives `(n+1)^3` vertices, `12 n^2` boundary
/// triangles and `(n+1)^3 - (n-1)^3` boundary vertices.
pub fn build_cube_mesh(subdivisions: usize) -> Result<Mesh> {
    build_cube_mesh_at(subdivisions, Point3::origin(), 1.0, 1)
}

/// As [`build_cube_mesh`] with explicit placement, edge length and domain id.
pub fn build_cube_mesh_at(
    subdivisions: usize,
    origin: Point3<f64>,
    edge_length: f64,
    domain: u32,
) -> Result<Mesh> {
    if subdivisions == 0 {
        return Err(Error::Mesh("cube needs at least one subdivision".into()));
    }
    if !(edge_length > 0.0) {
        return Err(Error::Mesh(format!("invalid edge length {edge_length}")));
    }
    let n = subdivisions;
    let np = n + 1;
    let vid = |i: usize, j: usize, k: usize| (i * np + j) * np + k;
    let h = edge_length / n as f64;
    let mut vertices = Vec::with_capacity(np * np * np);
    for i in 0..np {
        for j in 0..np {
            for k in 0..np {
                vertices.push(Point3::new(
                    origin.x + i as f64 * h,
                    origin.y + j as f64 * h,
                    origin.z + k as f64 * h,
                ));
            }
        }
    }
    // The six permutations (p0, p1, p2) of the axes; the tetrahedron of a
    // permutation is { 0 <= x_{p0} <= x_{p1} <= x_{p2} <= 1 } with vertices
    // 0, e_{p2}, e_{p2}+e_{p1}, (1,1,1).
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let corner = |d: [usize; 3]| vid(i + d[0], j + d[1], k + d[2]);
                for perm in PERMS {
                    let mut d1 = [0usize; 3];
                    d1[perm[2]] = 1;
                    let mut d2 = d1;
                    d2[perm[1]] = 1;
                    tets.push([
                        corner([0, 0, 0]),
                        corner(d1),
                        corner(d2),
                        corner([1, 1, 1]),
                    ]);
                }
            }
        }
    }
    let domains = vec![domain; tets.len()];
    Mesh::from_tets(vertices, tets, domains)
}

/// Two unit cubes separated along the x axis by `gap`, domains 1 and 2.
pub fn build_two_cubes(subdivisions: usize, gap: f64) -> Result<Mesh> {
    if !(gap > 0.0) {
        return Err(Error::Mesh(format!("cube gap must be positive, got {gap}")));
    }
    let a = build_cube_mesh_at(subdivisions, Point3::origin(), 1.0, 1)?;
    let b = build_cube_mesh_at(subdivisions, Point3::new(1.0 + gap, 0.0, 0.0), 1.0, 2)?;
    merge_meshes(&[a, b])
}

/// Concatenates disjoint meshes with vertex re-offsetting.
pub fn merge_meshes(meshes: &[Mesh]) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut tets = Vec::new();
    let mut tet_domain = Vec::new();
    for m in meshes {
        let off = vertices.len();
        vertices.extend_from_slice(&m.vertices);
        tets.extend(m.tets.iter().map(|t| t.map(|v| v + off)));
        tet_domain.extend_from_slice(&m.tet_domain);
    }
    Mesh::from_tets(vertices, tets, tet_domain)
}

/// Icosphere: subdivided icosahedron projected onto the unit sphere.
/// Level `l` has `20 * 4^l` faces and `10 * 4^l + 2` vertices.
fn icosphere(level: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let phi = 0.5 * (1.0 + 5.0f64.sqrt());
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut verts: Vec<Vector3<f64>> = raw
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    // Enforce outward winding regardless of the table orientation.
    for f in &mut faces {
        let c = (verts[f[0]] + verts[f[1]] + verts[f[2]]) / 3.0;
        let n = (verts[f[1]] - verts[f[0]]).cross(&(verts[f[2]] - verts[f[0]]));
        if n.dot(&c) < 0.0 {
            f.swap(1, 2);
        }
    }
    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for (m, (a, b)) in [(0, 1), (1, 2), (2, 0)].iter().enumerate() {
                let key = (f[*a].min(f[*b]), f[*a].max(f[*b]));
                mid[m] = *midpoint.entry(key).or_insert_with(|| {
                    verts.push((verts[key.0] + verts[key.1]).normalize());
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([mid[0], f[1], mid[1]]);
            next.push([mid[2], mid[1], f[2]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Ball mesh: icosphere surface with radially stacked prism layers inside.
///
/// The sphere triangulation at `level` is copied onto `m` radial shells
/// (`m` chosen so radial spacing matches the surface resolution); shells are
/// connected by prisms split into three tetrahedra each, with quad diagonals
/// anchored at the smallest vertex index so neighbouring prisms agree, and
/// the innermost shell is joined to the centre by a tetrahedron fan.
pub fn build_ball_mesh(level: usize, center: Point3<f64>, radius: f64, domain: u32) -> Result<Mesh> {
    if !(radius > 0.0) {
        return Err(Error::Mesh(format!("invalid ball radius {radius}")));
    }
    if level > 5 {
        return Err(Error::Mesh("icosphere level above 5 is not supported".into()));
    }
    let (unit, faces) = icosphere(level);
    let edge = (unit[faces[0][0]] - unit[faces[0][1]]).norm();
    let layers = (1.0 / edge).round().max(1.0) as usize;
    let shell = unit.len();

    // Vertex 0 is the centre; shell m (1-based) occupies
    // [1 + (m-1) * shell, 1 + m * shell).
    let mut vertices = Vec::with_capacity(1 + layers * shell);
    vertices.push(center);
    for m in 1..=layers {
        let r = radius * m as f64 / layers as f64;
        for u in &unit {
            vertices.push(center + u * r);
        }
    }
    let at = |m: usize, v: usize| 1 + (m - 1) * shell + v;

    let mut tets = Vec::new();
    for f in &faces {
        tets.push([0, at(1, f[0]), at(1, f[1]), at(1, f[2])]);
    }
    for m in 1..layers {
        for f in &faces {
            // Rotate so b0 is the smallest base index; cyclic to keep the
            // winding.
            let mut b = [f[0], f[1], f[2]];
            while !(b[0] < b[1] && b[0] < b[2]) {
                b.rotate_left(1);
            }
            let t = b.map(|v| at(m + 1, v));
            let b = b.map(|v| at(m, v));
            if b[1] < b[2] {
                tets.push([b[0], b[1], b[2], t[2]]);
                tets.push([b[0], b[1], t[2], t[1]]);
                tets.push([b[0], t[1], t[2], t[0]]);
            } else {
                tets.push([b[0], b[1], b[2], t[1]]);
                tets.push([b[0], b[2], t[2], t[1]]);
                tets.push([b[0], t[1], t[2], t[0]]);
            }
        }
    }
    let domains = vec![domain; tets.len()];
    Mesh::from_tets(vertices, tets, domains)
}

/// Trace and interior restriction maps of one domain.
///
/// `trace` (`Z`) selects the surface P1 coefficients out of the volume P1
/// coefficients; `interior` (`Z-bar`) selects the rest. Both are sparse 0/1
/// matrices with one unit entry per row, and together they partition the
/// volume dofs: `Z^T Z + Zbar^T Zbar = I`.
#[derive(Debug, Clone)]
pub struct RestrictionMaps {
    pub domain: u32,
    /// Global vertex id of each volume dof.
    pub volume_dofs: Vec<usize>,
    /// Volume-dof index of each surface dof.
    pub surface_in_volume: Vec<usize>,
    /// Volume-dof index of each interior dof.
    pub interior_in_volume: Vec<usize>,
    /// `Z`: surface x volume.
    pub trace: CsrMatrix,
    /// `Zbar`: interior x volume.
    pub interior: CsrMatrix,
}

/// Builds the restriction maps of `domain`.
pub fn build_restrictions(mesh: &Mesh, domain: u32) -> RestrictionMaps {
    let volume_dofs = mesh.volume_vertices(domain);
    let surface_vertices = mesh.surface_vertices(domain);
    let mut vol_index = HashMap::new();
    for (i, &v) in volume_dofs.iter().enumerate() {
        vol_index.insert(v, i);
    }
    let surface_in_volume: Vec<usize> = surface_vertices.iter().map(|v| vol_index[v]).collect();
    let mut is_surface = vec![false; volume_dofs.len()];
    for &i in &surface_in_volume {
        is_surface[i] = true;
    }
    let interior_in_volume: Vec<usize> =
        (0..volume_dofs.len()).filter(|&i| !is_surface[i]).collect();
    let n_vol = volume_dofs.len();
    let trace = CsrMatrix::from_triplets(
        surface_in_volume.len(),
        n_vol,
        surface_in_volume
            .iter()
            .enumerate()
            .map(|(r, &c)| (r, c, Complex64::ONE)),
    );
    let interior = CsrMatrix::from_triplets(
        interior_in_volume.len(),
        n_vol,
        interior_in_volume
            .iter()
            .enumerate()
            .map(|(r, &c)| (r, c, Complex64::ONE)),
    );
    RestrictionMaps {
        domain,
        volume_dofs,
        surface_in_volume,
        interior_in_volume,
        trace,
        interior,
    }
}

/// Imports a Gmsh MSH 2.2 ASCII mesh.
///
/// Tetrahedra (element type 4) become the volume, with their physical tag as
/// the domain id; points, lines and triangles are ignored (the boundary is
/// re-extracted); any other 3D cell type is rejected. The boundary of each
/// physical volume must be watertight.
pub fn import_msh(text: &str) -> Result<Mesh> {
    let mut lines = text.lines();
    let mut node_ids: HashMap<usize, usize> = HashMap::new();
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut tets: Vec<[usize; 4]> = Vec::new();
    let mut tet_domain: Vec<u32> = Vec::new();
    let mut saw_format = false;

    let parse_err = |msg: &str| Error::Mesh(format!("msh import: {msg}"));
    while let Some(line) = lines.next() {
        match line.trim() {
            "$MeshFormat" => {
                let fmt = lines.next().ok_or_else(|| parse_err("truncated $MeshFormat"))?;
                let mut parts = fmt.split_whitespace();
                let version = parts.next().unwrap_or("");
                if !version.starts_with("2.2") {
                    return Err(parse_err(&format!(
                        "unsupported MSH version {version}; only 2.2 ASCII is handled"
                    )));
                }
                if parts.next() != Some("0") {
                    return Err(parse_err("only ASCII MSH files are handled"));
                }
                saw_format = true;
            }
            "$Nodes" => {
                let count: usize = lines
                    .next()
                    .and_then(|l| l.trim().parse().ok())
                    .ok_or_else(|| parse_err("bad node count"))?;
                for _ in 0..count {
                    let l = lines.next().ok_or_else(|| parse_err("truncated $Nodes"))?;
                    let mut p = l.split_whitespace();
                    let id: usize = p
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err("bad node id"))?;
                    let mut coord = [0.0f64; 3];
                    for c in &mut coord {
                        *c = p
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| parse_err("bad node coordinate"))?;
                    }
                    node_ids.insert(id, vertices.len());
                    vertices.push(Point3::new(coord[0], coord[1], coord[2]));
                }
            }
            "$Elements" => {
                let count: usize = lines
                    .next()
                    .and_then(|l| l.trim().parse().ok())
                    .ok_or_else(|| parse_err("bad element count"))?;
                for _ in 0..count {
                    let l = lines.next().ok_or_else(|| parse_err("truncated $Elements"))?;
                    let nums: Vec<i64> = l
                        .split_whitespace()
                        .map(|s| s.parse().map_err(|_| parse_err("bad element field")))
                        .collect::<Result<_>>()?;
                    if nums.len() < 3 {
                        return Err(parse_err("short element line"));
                    }
                    let etype = nums[1];
                    let ntags = nums[2] as usize;
                    let nodes = &nums[3 + ntags..];
                    match etype {
                        15 | 1 | 2 | 3 => {} // points, lines, tris, quads: skipped
                        4 => {
                            if nodes.len() != 4 {
                                return Err(parse_err("tetrahedron without 4 nodes"));
                            }
                            let mut tet = [0usize; 4];
                            for (slot, &nid) in tet.iter_mut().zip(nodes) {
                                *slot = *node_ids
                                    .get(&(nid as usize))
                                    .ok_or_else(|| parse_err("element references unknown node"))?;
                            }
                            let domain = if ntags > 0 { nums[3].max(1) as u32 } else { 1 };
                            tets.push(tet);
                            tet_domain.push(domain);
                        }
                        other => {
                            return Err(parse_err(&format!(
                                "unsupported cell type {other}; only tetrahedral volumes are handled"
                            )));
                        }
                    }
                }
            }
            t if t.starts_with("$End") || t.is_empty() => {}
            t if t.starts_with('$') => {
                // Skip unknown sections ($PhysicalNames and friends).
                let end = format!("$End{}", &t[1..]);
                for l in lines.by_ref() {
                    if l.trim() == end {
                        break;
                    }
                }
            }
            _ => {}
        }
    }
    if !saw_format {
        return Err(parse_err("missing $MeshFormat section"));
    }
    if tets.is_empty() {
        return Err(parse_err("no tetrahedra found"));
    }
    Mesh::from_tets(vertices, tets, tet_domain)
}

/// Exports the mesh as Gmsh MSH 2.2 ASCII (volume elements only).
pub fn export_msh(mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n");
    out.push_str(&format!("{}\n", mesh.n_vertices()));
    for (i, v) in mesh.vertices.iter().enumerate() {
        out.push_str(&format!("{} {} {} {}\n", i + 1, v.x, v.y, v.z));
    }
    out.push_str("$EndNodes\n$Elements\n");
    out.push_str(&format!("{}\n", mesh.n_tets()));
    for (t, tet) in mesh.tets.iter().enumerate() {
        let d = mesh.tet_domain[t];
        out.push_str(&format!(
            "{} 4 2 {} {} {} {} {} {}\n",
            t + 1,
            d,
            d,
            tet[0] + 1,
            tet[1] + 1,
            tet[2] + 1,
            tet[3] + 1
        ));
    }
    out.push_str("$EndElements\n");
    out
}

/// Dumps the mesh as legacy VTK ASCII (tetrahedra plus boundary triangles,
/// with domain ids as cell data) for external inspection.
pub fn write_vtk_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# vtk DataFile Version 2.0")?;
    writeln!(f, "fembem mesh")?;
    writeln!(f, "ASCII")?;
    writeln!(f, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(f, "POINTS {} double", mesh.n_vertices())?;
    for v in &mesh.vertices {
        writeln!(f, "{} {} {}", v.x, v.y, v.z)?;
    }
    let ncells = mesh.n_tets() + mesh.n_surface_triangles();
    let nints = mesh.n_tets() * 5 + mesh.n_surface_triangles() * 4;
    writeln!(f, "CELLS {} {}", ncells, nints)?;
    for tet in &mesh.tets {
        writeln!(f, "4 {} {} {} {}", tet[0], tet[1], tet[2], tet[3])?;
    }
    for tri in &mesh.surface_tris {
        writeln!(f, "3 {} {} {}", tri[0], tri[1], tri[2])?;
    }
    writeln!(f, "CELL_TYPES {}", ncells)?;
    for _ in 0..mesh.n_tets() {
        writeln!(f, "10")?;
    }
    for _ in 0..mesh.n_surface_triangles() {
        writeln!(f, "5")?;
    }
    writeln!(f, "CELL_DATA {}", ncells)?;
    writeln!(f, "SCALARS domain int 1")?;
    writeln!(f, "LOOKUP_TABLE default")?;
    for d in &mesh.tet_domain {
        writeln!(f, "{}", d)?;
    }
    for d in &mesh.tri_domain {
        writeln!(f, "{}", d)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_complex::Complex64 as C;
    use proptest::prelude::*;

    #[test]
    fn cube_counts_match_closed_forms() {
        for n in [1usize, 2, 3, 8, 13] {
            let mesh = build_cube_mesh(n).unwrap();
            let np = n + 1;
            assert_eq!(mesh.n_vertices(), np * np * np, "vertices at n={n}");
            assert_eq!(mesh.n_tets(), 6 * n * n * n, "tets at n={n}");
            assert_eq!(mesh.n_surface_triangles(), 12 * n * n, "triangles at n={n}");
            let interior = if n >= 2 { (n - 1) * (n - 1) * (n - 1) } else { 0 };
            assert_eq!(
                mesh.surface_vertices(1).len(),
                np * np * np - interior,
                "surface vertices at n={n}"
            );
        }
    }

    #[test]
    fn benchmark_cube_has_the_reference_dof_counts() {
        let mesh = build_cube_mesh(13).unwrap();
        assert_eq!(mesh.n_vertices(), 2744);
        assert_eq!(mesh.surface_vertices(1).len(), 1016);
        assert_eq!(mesh.n_surface_triangles(), 2028);
        assert_relative_eq!(
            mesh.max_element_diameter(),
            3.0f64.sqrt() / 13.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cube_geometry_is_exact() {
        let mesh = build_cube_mesh(3).unwrap();
        mesh.validate().unwrap();
        assert_relative_eq!(mesh.total_volume(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(mesh.surface(1).area(), 6.0, epsilon = 1e-12);
        assert_relative_eq!(mesh.circumscribed_radius(), 0.5 * 3.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn single_voxel_cube_is_all_surface() {
        let mesh = build_cube_mesh(1).unwrap();
        mesh.validate().unwrap();
        assert_eq!(mesh.n_vertices(), 8);
        assert_eq!(mesh.surface_vertices(1).len(), 8);
        let maps = build_restrictions(&mesh, 1);
        assert_eq!(maps.trace.nrows(), 8);
        assert_eq!(maps.interior.nrows(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn cube_invariants_hold_for_small_subdivisions(n in 1usize..=4) {
            let mesh = build_cube_mesh(n).unwrap();
            prop_assert!(mesh.validate().is_ok());
            prop_assert_eq!(mesh.n_tets(), 6 * n * n * n);
            let vol = mesh.total_volume();
            prop_assert!((vol - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn restrictions_partition_the_volume_dofs() {
        let mesh = build_cube_mesh(3).unwrap();
        let maps = build_restrictions(&mesh, 1);
        let n_vol = maps.volume_dofs.len();
        let n_surf = maps.trace.nrows();
        let n_int = maps.interior.nrows();
        assert_eq!(n_surf + n_int, n_vol);
        assert_eq!(n_surf, mesh.surface_vertices(1).len());

        // Z Z^T = identity on surface coefficients.
        let x: Vec<C> = (0..n_surf).map(|i| C::new(i as f64 + 1.0, -0.5)).collect();
        let zt = maps.trace.transpose();
        let roundtrip = maps.trace.matvec(&zt.matvec(&x));
        for (a, b) in roundtrip.iter().zip(&x) {
            assert!((a - b).norm() < 1e-14);
        }

        // Z^T Z + Zbar^T Zbar = identity on volume coefficients.
        let v: Vec<C> = (0..n_vol).map(|i| C::new((i % 7) as f64, (i % 3) as f64)).collect();
        let mut sum = zt.matvec(&maps.trace.matvec(&v));
        let zbt = maps.interior.transpose();
        let part = zbt.matvec(&maps.interior.matvec(&v));
        for (s, p) in sum.iter_mut().zip(&part) {
            *s += p;
        }
        for (s, orig) in sum.iter().zip(&v) {
            assert!((s - orig).norm() < 1e-14);
        }
    }

    #[test]
    fn msh_round_trip_preserves_the_mesh() {
        let mesh = build_cube_mesh(2).unwrap();
        let text = export_msh(&mesh);
        let back = import_msh(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.n_vertices(), mesh.n_vertices());
        assert_eq!(back.n_tets(), mesh.n_tets());
        assert_eq!(back.n_surface_triangles(), mesh.n_surface_triangles());
        assert_eq!(back.domains, mesh.domains);
        assert_relative_eq!(back.total_volume(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn msh_import_rejects_unsupported_cells() {
        let text = "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n8\n\
            1 0 0 0\n2 1 0 0\n3 1 1 0\n4 0 1 0\n5 0 0 1\n6 1 0 1\n7 1 1 1\n8 0 1 1\n\
            $EndNodes\n$Elements\n1\n1 5 2 1 1 1 2 3 4 5 6 7 8\n$EndElements\n";
        let err = import_msh(text).unwrap_err();
        assert!(err.to_string().contains("unsupported cell type 5"));
    }

    #[test]
    fn msh_import_rejects_non_watertight_volumes() {
        // Three tetrahedra sharing the face (1,2,3).
        let text = "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n6\n\
            1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n5 0 0 -1\n6 1 1 1\n\
            $EndNodes\n$Elements\n3\n\
            1 4 2 1 1 1 2 3 4\n2 4 2 1 1 1 2 3 5\n3 4 2 1 1 1 2 3 6\n$EndElements\n";
        let err = import_msh(text).unwrap_err();
        assert!(err.to_string().contains("not watertight"), "got: {err}");
    }

    #[test]
    fn ball_mesh_is_watertight_with_icosphere_boundary() {
        for level in [0usize, 1, 2] {
            let mesh = build_ball_mesh(level, Point3::new(0.5, 0.0, -0.25), 1.0, 1).unwrap();
            mesh.validate().unwrap();
            let faces = 20 * 4usize.pow(level as u32);
            assert_eq!(mesh.n_surface_triangles(), faces);
            assert_eq!(mesh.surface_vertices(1).len(), 10 * 4usize.pow(level as u32) + 2);
        }
        // Volume converges to 4/3 pi R^3 from below as the polyhedron fills
        // the ball.
        let mesh = build_ball_mesh(2, Point3::origin(), 1.0, 1).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI;
        let vol = mesh.total_volume();
        assert!(vol < exact && vol > 0.92 * exact, "ball volume {vol} vs {exact}");
    }

    #[test]
    fn two_cubes_have_disjoint_domains() {
        let mesh = build_two_cubes(2, 3.0).unwrap();
        mesh.validate().unwrap();
        assert_eq!(mesh.domains, vec![1, 2]);
        let v1 = mesh.volume_vertices(1);
        let v2 = mesh.volume_vertices(2);
        assert_eq!(v1.len(), 27);
        assert_eq!(v2.len(), 27);
        assert!(v1.iter().all(|v| !v2.contains(v)));
        let s1 = mesh.surface(1);
        let s2 = mesh.surface(2);
        assert_eq!(s1.n_triangles(), 48);
        assert_eq!(s2.n_triangles(), 48);
        // The second cube sits 1 + gap along x.
        assert!(s2.points.iter().all(|p| p.x >= 4.0 - 1e-12));
    }

    #[test]
    fn enclosure_test_matches_known_geometry() {
        let mesh = build_cube_mesh(2).unwrap();
        let surface = mesh.surface(1);
        assert!(surface.encloses(&Point3::new(0.5, 0.5, 0.5)));
        assert!(surface.encloses(&Point3::new(0.01, 0.01, 0.01)));
        assert!(!surface.encloses(&Point3::new(1.5, 0.5, 0.5)));
        assert!(!surface.encloses(&Point3::new(-0.01, 0.5, 0.5)));
        // Outside the box but inside its bounding-box face planes extended:
        // the y/z slabs still contain the point, so the parity test decides.
        assert!(!surface.encloses(&Point3::new(0.5, 0.5, 1.0 + 1e-6)));
        // Aim straight at a vertex: the probe retry has to cope.
        assert!(surface.encloses(&Point3::new(0.25, 0.25, 0.25)));
    }

    #[test]
    fn enclosure_test_on_ball_and_disjoint_bodies() {
        let mesh = build_ball_mesh(2, Point3::new(0.0, 0.0, 0.0), 1.0, 1).unwrap();
        let surface = mesh.surface(1);
        assert!(surface.encloses(&Point3::new(0.0, 0.0, 0.0)));
        assert!(surface.encloses(&Point3::new(0.5, 0.3, -0.4)));
        // The icosahedral surface is inscribed, so stay clearly outside.
        assert!(!surface.encloses(&Point3::new(1.05, 0.0, 0.0)));
        assert!(!surface.encloses(&Point3::new(0.8, 0.8, 0.8)));

        let two = build_two_cubes(2, 3.0).unwrap();
        let s1 = two.surface(1);
        let s2 = two.surface(2);
        assert!(s1.encloses(&Point3::new(0.5, 0.5, 0.5)));
        assert!(!s1.encloses(&Point3::new(4.5, 0.5, 0.5)));
        assert!(s2.encloses(&Point3::new(4.5, 0.5, 0.5)));
        assert!(!s2.encloses(&Point3::new(0.5, 0.5, 0.5)));
        let (lo1, hi1) = s1.bounding_box();
        let (lo2, _) = s2.bounding_box();
        assert_relative_eq!(hi1.x, 1.0);
        assert_relative_eq!(lo1.x, 0.0);
        assert_relative_eq!(lo2.x, 4.0);
    }

    #[test]
    fn vtk_dump_has_expected_cell_counts() {
        let dir = std::env::temp_dir().join("fembem_mesh_vtk_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cube.vtk");
        let mesh = build_cube_mesh(1).unwrap();
        write_vtk_mesh(&mesh, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 2.0"));
        assert!(text.contains("POINTS 8 double"));
        assert!(text.contains(&format!("CELL_TYPES {}", 6 + 12)));
    }
}
