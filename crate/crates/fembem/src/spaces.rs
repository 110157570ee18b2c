//! Discrete space tags and tagged operator blocks.
//!
//! Every operator block carries the tag of its test (row) and trial (column)
//! space so that block systems can verify conformance before they are glued
//! together: the volume pressure lives in P1 on tetrahedra, Dirichlet-type
//! surface data in P1 on the boundary triangulation, and Neumann-type data in
//! either P0 or P1 on the same triangulation.

use faer::Mat;
use num_complex::Complex64;

use crate::mesh::Mesh;
use crate::sparse::CsrMatrix;

/// The three families of discrete spaces in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    /// Continuous piecewise-linear functions on the tetrahedra of one body.
    VolumeP1,
    /// Continuous piecewise-linear functions on the boundary triangulation.
    SurfaceP1,
    /// Piecewise-constant functions on the boundary triangulation.
    SurfaceP0,
}

impl SpaceKind {
    pub fn label(self) -> &'static str {
        match self {
            SpaceKind::VolumeP1 => "volume-p1",
            SpaceKind::SurfaceP1 => "surface-p1",
            SpaceKind::SurfaceP0 => "surface-p0",
        }
    }
}

/// A discrete space: a kind bound to one body (mesh domain).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpaceTag {
    pub kind: SpaceKind,
    pub domain: u32,
}

impl SpaceTag {
    pub fn volume(domain: u32) -> Self {
        SpaceTag { kind: SpaceKind::VolumeP1, domain }
    }

    pub fn surface_p1(domain: u32) -> Self {
        SpaceTag { kind: SpaceKind::SurfaceP1, domain }
    }

    pub fn surface_p0(domain: u32) -> Self {
        SpaceTag { kind: SpaceKind::SurfaceP0, domain }
    }

    /// Number of dofs this space has on the given mesh.
    pub fn dim(&self, mesh: &Mesh) -> usize {
        match self.kind {
            SpaceKind::VolumeP1 => mesh.volume_vertices(self.domain).len(),
            SpaceKind::SurfaceP1 => mesh.surface_vertices(self.domain).len(),
            SpaceKind::SurfaceP0 => mesh
                .tri_domain
                .iter()
                .filter(|&&d| d == self.domain)
                .count(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.label(), self.domain)
    }
}

/// Dense operator block with its test (rows) and trial (columns) tags.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub mat: Mat<Complex64>,
    pub test: SpaceTag,
    pub trial: SpaceTag,
}

impl DenseBlock {
    pub fn new(mat: Mat<Complex64>, test: SpaceTag, trial: SpaceTag) -> Self {
        DenseBlock { mat, test, trial }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.mat.nrows(), self.mat.ncols())
    }

    /// Checks that the stored dimensions match the tags on the given mesh.
    pub fn conforms(&self, mesh: &Mesh) -> bool {
        self.mat.nrows() == self.test.dim(mesh) && self.mat.ncols() == self.trial.dim(mesh)
    }
}

/// Sparse operator block with its test and trial tags.
#[derive(Debug, Clone)]
pub struct SparseBlock {
    pub mat: CsrMatrix,
    pub test: SpaceTag,
    pub trial: SpaceTag,
}

impl SparseBlock {
    pub fn new(mat: CsrMatrix, test: SpaceTag, trial: SpaceTag) -> Self {
        SparseBlock { mat, test, trial }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.mat.nrows(), self.mat.ncols())
    }

    pub fn conforms(&self, mesh: &Mesh) -> bool {
        self.mat.nrows() == self.test.dim(mesh) && self.mat.ncols() == self.trial.dim(mesh)
    }
}
