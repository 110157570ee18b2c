//! Coupled FEM-BEM block systems for the transmission problem.
//!
//! The interior Helmholtz equation is discretised with volume P1 elements and
//! coupled to boundary-integral equations for the exterior through the trace
//! restriction `Z`.  Three couplings are provided: the standard
//! (Johnson-Nedelec) 2x2 system, the symmetric 2x2 system, and the stabilised
//! 3x3 system with an extra surface unknown and a regularising operator,
//! together with its algebraic variants (moving the stabilisation between
//! columns, applying the regulariser explicitly, and permuting block rows).
//! A block operator abstraction keeps sparse, dense, and operator-only
//! (OSRC) pieces in their natural form; systems are solved through their
//! matrix-vector action or densified outright at small scale.
//!
//! Unknown layout is always `[p, theta, sigma]` per domain, domains
//! ascending: the interior pressure in volume P1, the exterior Neumann trace
//! in surface P0 or P1, and (stabilised only) the penalty unknown in surface
//! P1.  `theta` is the Neumann trace of the *scattered* field except in the
//! standard coupling, where it is the trace of the total field.

use std::sync::Arc;

use faer::Mat;
use nalgebra::Point3;
use num_complex::Complex64;

use crate::bem::{self, OperatorKind, OperatorRequest, TestWeight};
use crate::fem::{
    assemble_fem, assemble_weighted_mixed_mass, assemble_weighted_surface_mass,
    shifted_surface_laplacian,
};
use crate::mesh::{build_restrictions, Mesh, RestrictionMaps, Surface};
use crate::osrc::{characteristic_length, OsrcConfig, OsrcKind, OsrcOperator};
use crate::problem::{Material, ScalarField, TransmissionProblem};
use crate::quadrature::{QuadratureConfig, TriangleRule};
use crate::sparse::CsrMatrix;
use crate::spaces::{DenseBlock, SpaceKind, SpaceTag};
use crate::{Error, Result};

/// One block of a [`BlockOperator`]: an operator kept in whatever form it was
/// assembled in.
#[derive(Clone)]
pub enum BlockOp {
    /// Dense matrix (boundary operators).
    Dense(Arc<Mat<Complex64>>),
    /// Sparse matrix (FEM stiffness, mass pairings, restrictions).
    Sparse(Arc<CsrMatrix>),
    /// Complex multiple of another block.
    Scaled(Complex64, Box<BlockEntry>),
    /// Sum of blocks on the same spaces.
    Sum(Vec<BlockEntry>),
    /// Composition; `Chain([a, b])` acts as `x -> a(b(x))`.
    Chain(Vec<BlockEntry>),
    /// On-the-fly on-surface radiation-condition action.
    Osrc(Arc<OsrcOperator>),
    /// Zero block.
    Zero,
}

/// A block operator together with its test (range) and trial (domain) space
/// tags and dimensions.
#[derive(Clone)]
pub struct BlockEntry {
    pub test: SpaceTag,
    pub trial: SpaceTag,
    rows: usize,
    cols: usize,
    pub op: BlockOp,
}

impl BlockEntry {
    pub fn dense(block: DenseBlock) -> Self {
        let (rows, cols) = block.shape();
        BlockEntry {
            test: block.test,
            trial: block.trial,
            rows,
            cols,
            op: BlockOp::Dense(Arc::new(block.mat)),
        }
    }

    pub fn dense_shared(mat: Arc<Mat<Complex64>>, test: SpaceTag, trial: SpaceTag) -> Self {
        let (rows, cols) = (mat.nrows(), mat.ncols());
        BlockEntry { test, trial, rows, cols, op: BlockOp::Dense(mat) }
    }

    pub fn sparse(mat: CsrMatrix, test: SpaceTag, trial: SpaceTag) -> Self {
        BlockEntry {
            test,
            trial,
            rows: mat.nrows(),
            cols: mat.ncols(),
            op: BlockOp::Sparse(Arc::new(mat)),
        }
    }

    pub fn scaled(factor: Complex64, entry: BlockEntry) -> Self {
        BlockEntry {
            test: entry.test,
            trial: entry.trial,
            rows: entry.rows,
            cols: entry.cols,
            op: BlockOp::Scaled(factor, Box::new(entry)),
        }
    }

    pub fn sum(entries: Vec<BlockEntry>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| {
            Error::Formulation("a block sum needs at least one term".into())
        })?;
        let (test, trial, rows, cols) = (first.test, first.trial, first.rows, first.cols);
        for e in &entries {
            if e.test != test || e.trial != trial || e.rows != rows || e.cols != cols {
                return Err(Error::Formulation(format!(
                    "summed blocks disagree: ({}, {}) vs ({}, {})",
                    test.label(),
                    trial.label(),
                    e.test.label(),
                    e.trial.label()
                )));
            }
        }
        Ok(BlockEntry { test, trial, rows, cols, op: BlockOp::Sum(entries) })
    }

    pub fn chain(entries: Vec<BlockEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Formulation("a block chain needs at least one factor".into()));
        }
        for w in entries.windows(2) {
            if w[0].trial != w[1].test || w[0].cols != w[1].rows {
                return Err(Error::Formulation(format!(
                    "chained blocks do not compose: {} ({} cols) applied to {} ({} rows)",
                    w[0].trial.label(),
                    w[0].cols,
                    w[1].test.label(),
                    w[1].rows
                )));
            }
        }
        let test = entries[0].test;
        let rows = entries[0].rows;
        let trial = entries[entries.len() - 1].trial;
        let cols = entries[entries.len() - 1].cols;
        Ok(BlockEntry { test, trial, rows, cols, op: BlockOp::Chain(entries) })
    }

    /// The OSRC action maps surface P1 coefficients to surface P1
    /// coefficients on its own surface.
    pub fn osrc(op: Arc<OsrcOperator>, domain: u32) -> Self {
        let n = op.dim();
        BlockEntry {
            test: SpaceTag::surface_p1(domain),
            trial: SpaceTag::surface_p1(domain),
            rows: n,
            cols: n,
            op: BlockOp::Osrc(op),
        }
    }

    pub fn zero(test: SpaceTag, trial: SpaceTag, rows: usize, cols: usize) -> Self {
        BlockEntry { test, trial, rows, cols, op: BlockOp::Zero }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.op, BlockOp::Zero)
    }

    /// `y += scale * self * x`.
    pub fn apply_add(&self, x: &[Complex64], y: &mut [Complex64], scale: Complex64) -> Result<()> {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        match &self.op {
            BlockOp::Dense(m) => {
                let xm = Mat::from_fn(self.cols, 1, |i, _| x[i]);
                let p = m.as_ref() * xm.as_ref();
                for i in 0..self.rows {
                    y[i] += scale * p[(i, 0)];
                }
            }
            BlockOp::Sparse(s) => s.apply_add(x, y, scale),
            BlockOp::Scaled(f, e) => e.apply_add(x, y, scale * f)?,
            BlockOp::Sum(es) => {
                for e in es {
                    e.apply_add(x, y, scale)?;
                }
            }
            BlockOp::Chain(es) => {
                let mut cur = x.to_vec();
                for e in es.iter().rev() {
                    cur = e.apply(&cur)?;
                }
                for i in 0..self.rows {
                    y[i] += scale * cur[i];
                }
            }
            BlockOp::Osrc(op) => {
                let v = op.apply(x)?;
                for i in 0..self.rows {
                    y[i] += scale * v[i];
                }
            }
            BlockOp::Zero => {}
        }
        Ok(())
    }

    pub fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut y = vec![Complex64::ZERO; self.rows];
        self.apply_add(x, &mut y, Complex64::ONE)?;
        Ok(y)
    }

    /// Explicit dense matrix of the block.
    pub fn densify(&self) -> Result<Mat<Complex64>> {
        Ok(match &self.op {
            BlockOp::Dense(m) => (**m).clone(),
            BlockOp::Sparse(s) => s.to_dense(),
            BlockOp::Scaled(f, e) => {
                let mut m = e.densify()?;
                for j in 0..m.ncols() {
                    for i in 0..m.nrows() {
                        m[(i, j)] *= f;
                    }
                }
                m
            }
            BlockOp::Sum(es) => {
                let mut m = Mat::<Complex64>::zeros(self.rows, self.cols);
                for e in es {
                    let d = e.densify()?;
                    for j in 0..self.cols {
                        for i in 0..self.rows {
                            m[(i, j)] += d[(i, j)];
                        }
                    }
                }
                m
            }
            BlockOp::Chain(es) => {
                let mut m = es[0].densify()?;
                for e in &es[1..] {
                    let d = e.densify()?;
                    m = m.as_ref() * d.as_ref();
                }
                m
            }
            BlockOp::Osrc(op) => {
                let n = op.dim();
                let mut m = Mat::<Complex64>::zeros(n, n);
                let mut e = vec![Complex64::ZERO; n];
                for j in 0..n {
                    e[j] = Complex64::ONE;
                    let col = op.apply(&e)?;
                    e[j] = Complex64::ZERO;
                    for i in 0..n {
                        m[(i, j)] = col[i];
                    }
                }
                m
            }
            BlockOp::Zero => Mat::zeros(self.rows, self.cols),
        })
    }
}

/// A 2D grid of [`BlockEntry`] values with consistent test spaces along each
/// block row and trial spaces along each block column.
pub struct BlockOperator {
    row_tags: Vec<SpaceTag>,
    col_tags: Vec<SpaceTag>,
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
    entries: Vec<Vec<BlockEntry>>,
}

impl BlockOperator {
    pub fn new(entries: Vec<Vec<BlockEntry>>) -> Result<Self> {
        if entries.is_empty() || entries[0].is_empty() {
            return Err(Error::Formulation("a block operator needs at least one block".into()));
        }
        let ncols = entries[0].len();
        for row in &entries {
            if row.len() != ncols {
                return Err(Error::Formulation("ragged block grid".into()));
            }
        }
        let row_tags: Vec<SpaceTag> = entries.iter().map(|r| r[0].test).collect();
        let col_tags: Vec<SpaceTag> = entries[0].iter().map(|e| e.trial).collect();
        let row_dims: Vec<usize> = entries.iter().map(|r| r[0].rows).collect();
        let col_dims: Vec<usize> = entries[0].iter().map(|e| e.cols).collect();
        for (i, row) in entries.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if e.test != row_tags[i] || e.rows != row_dims[i] {
                    return Err(Error::Formulation(format!(
                        "block ({i}, {j}) tests {} but its row tests {}",
                        e.test.label(),
                        row_tags[i].label()
                    )));
                }
                if e.trial != col_tags[j] || e.cols != col_dims[j] {
                    return Err(Error::Formulation(format!(
                        "block ({i}, {j}) takes {} but its column takes {}",
                        e.trial.label(),
                        col_tags[j].label()
                    )));
                }
            }
        }
        Ok(BlockOperator { row_tags, col_tags, row_dims, col_dims, entries })
    }

    pub fn nrows(&self) -> usize {
        self.row_dims.iter().sum()
    }

    pub fn ncols(&self) -> usize {
        self.col_dims.iter().sum()
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.entries.len(), self.entries[0].len())
    }

    pub fn row_tags(&self) -> &[SpaceTag] {
        &self.row_tags
    }

    pub fn col_tags(&self) -> &[SpaceTag] {
        &self.col_tags
    }

    pub fn entry(&self, i: usize, j: usize) -> &BlockEntry {
        &self.entries[i][j]
    }

    fn offsets(dims: &[usize]) -> Vec<usize> {
        let mut off = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        for &d in dims {
            off.push(acc);
            acc += d;
        }
        off.push(acc);
        off
    }

    pub fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.ncols() {
            return Err(Error::Formulation(format!(
                "operator takes {} unknowns, got {}",
                self.ncols(),
                x.len()
            )));
        }
        let roff = Self::offsets(&self.row_dims);
        let coff = Self::offsets(&self.col_dims);
        let mut y = vec![Complex64::ZERO; self.nrows()];
        for (i, row) in self.entries.iter().enumerate() {
            let yi = &mut y[roff[i]..roff[i + 1]];
            for (j, e) in row.iter().enumerate() {
                e.apply_add(&x[coff[j]..coff[j + 1]], yi, Complex64::ONE)?;
            }
        }
        Ok(y)
    }

    /// The full dense matrix, populated block by block.
    pub fn densify(&self) -> Result<Mat<Complex64>> {
        let roff = Self::offsets(&self.row_dims);
        let coff = Self::offsets(&self.col_dims);
        let mut m = Mat::<Complex64>::zeros(self.nrows(), self.ncols());
        for (i, row) in self.entries.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if e.is_zero() {
                    continue;
                }
                let d = e.densify()?;
                for c in 0..d.ncols() {
                    for r in 0..d.nrows() {
                        m[(roff[i] + r, coff[j] + c)] = d[(r, c)];
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Choice of the regularising surface operator `S` in the stabilised system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Regulariser {
    /// Laplace-Beltrami plus identity: a modified-Helmholtz form on the
    /// surface (label "MH").
    #[serde(rename = "MH", alias = "mh")]
    ModifiedHelmholtz,
    /// Laplace-Beltrami shifted by the squared exterior wavenumber
    /// (label "SL").
    #[serde(rename = "SL", alias = "sl")]
    ShiftedLaplacian,
    /// Mass-paired negative OSRC DtN action; its inverse, the negative OSRC
    /// NtD action, is available explicitly and is what the `alt_reg`
    /// variants apply.
    #[serde(rename = "OSRC", alias = "osrc")]
    Osrc,
}

impl Regulariser {
    pub fn label(self) -> &'static str {
        match self {
            Regulariser::ModifiedHelmholtz => "MH",
            Regulariser::ShiftedLaplacian => "SL",
            Regulariser::Osrc => "OSRC",
        }
    }
}

/// The sparse bilinear form of a regulariser, where one exists.
pub fn assemble_regulariser_form(
    surface: &Surface,
    regulariser: Regulariser,
    kappa: f64,
) -> Result<CsrMatrix> {
    match regulariser {
        Regulariser::ModifiedHelmholtz => Ok(shifted_surface_laplacian(surface, Complex64::ONE)),
        Regulariser::ShiftedLaplacian => {
            if kappa <= 0.0 {
                return Err(Error::Formulation(format!(
                    "shifted-Laplacian wavenumber must be positive, got {kappa}"
                )));
            }
            Ok(shifted_surface_laplacian(surface, Complex64::new(kappa * kappa, 0.0)))
        }
        Regulariser::Osrc => Err(Error::Formulation(
            "the OSRC regulariser is an operator action, not a sparse form".into(),
        )),
    }
}

/// Algebraic variant of the stabilised system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The stabilisation couples into the first block row through `i nu`
    /// times the second boundary equation; the third column of row one is
    /// zero.
    Base,
    /// The `i nu` coupling is eliminated against the second row, leaving the
    /// real factor `nu eta` on the penalty unknown in row one.
    AltNu,
    /// As `AltNu`, with the penalty unknown premultiplied by the explicit
    /// regulariser inverse (OSRC only), so the diagonal penalty block is an
    /// identity pairing.
    AltReg,
    /// As `AltNu` with the last two block rows swapped and the new middle
    /// row negated.
    Permuted,
    /// The row permutation applied to `AltReg`.
    PermutedAltReg,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::AltNu => "alt_nu",
            Variant::AltReg => "alt_reg",
            Variant::Permuted => "permuted",
            Variant::PermutedAltReg => "permuted_alt_reg",
        }
    }

    fn applies_regulariser_inverse(self) -> bool {
        matches!(self, Variant::AltReg | Variant::PermutedAltReg)
    }

    fn is_permuted(self) -> bool {
        matches!(self, Variant::Permuted | Variant::PermutedAltReg)
    }
}

/// Which coupled system a [`FormulationSystem`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormulationTag {
    Standard,
    Symmetric,
    Stabilised { regulariser: Regulariser, variant: Variant },
}

impl FormulationTag {
    pub fn label(self) -> &'static str {
        match self {
            FormulationTag::Standard => "standard",
            FormulationTag::Symmetric => "symmetric",
            FormulationTag::Stabilised { .. } => "stabilised",
        }
    }
}

/// Solution components of one domain.
#[derive(Debug, Clone)]
pub struct DomainSolution {
    pub domain: u32,
    /// Interior pressure coefficients on the domain's canonical volume dofs.
    pub pressure: Vec<Complex64>,
    /// Exterior Neumann-trace coefficients.
    pub theta: Vec<Complex64>,
    /// Penalty coefficients (stabilised systems).
    pub sigma: Option<Vec<Complex64>>,
}

/// An assembled left-hand operator with its right-hand side and bookkeeping.
pub struct FormulationSystem {
    pub operator: BlockOperator,
    pub rhs: Vec<Complex64>,
    /// Unknown layout, domains ascending, `[p, theta(, sigma)]` within each.
    pub layout: Vec<SpaceTag>,
    layout_dims: Vec<usize>,
    pub tag: FormulationTag,
    pub eta: f64,
    pub nu: f64,
    pub domains: Vec<u32>,
    pub theta_space: SpaceKind,
}

impl FormulationSystem {
    pub fn dim(&self) -> usize {
        self.layout_dims.iter().sum()
    }

    pub fn layout_dims(&self) -> &[usize] {
        &self.layout_dims
    }

    /// Whether `theta` is the Neumann trace of the total field rather than
    /// the scattered one.
    pub fn theta_is_total(&self) -> bool {
        matches!(self.tag, FormulationTag::Standard)
    }

    /// Splits a solution vector into per-domain components.
    pub fn split(&self, x: &[Complex64]) -> Result<Vec<DomainSolution>> {
        if x.len() != self.dim() {
            return Err(Error::Formulation(format!(
                "solution vector has {} entries, system has {}",
                x.len(),
                self.dim()
            )));
        }
        let per_domain = self.layout.len() / self.domains.len();
        let mut out = Vec::with_capacity(self.domains.len());
        let mut off = 0;
        for (d, &domain) in self.domains.iter().enumerate() {
            let dims = &self.layout_dims[d * per_domain..(d + 1) * per_domain];
            let pressure = x[off..off + dims[0]].to_vec();
            off += dims[0];
            let theta = x[off..off + dims[1]].to_vec();
            off += dims[1];
            let sigma = if per_domain == 3 {
                let s = x[off..off + dims[2]].to_vec();
                off += dims[2];
                Some(s)
            } else {
                None
            };
            out.push(DomainSolution { domain, pressure, theta, sigma });
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.rhs.len() != self.dim() {
            return Err(Error::Formulation(format!(
                "rhs has {} entries, layout promises {}",
                self.rhs.len(),
                self.dim()
            )));
        }
        if self.operator.nrows() != self.dim() || self.operator.ncols() != self.dim() {
            return Err(Error::Formulation("operator dimensions do not match the layout".into()));
        }
        if self.operator.col_tags() != self.layout {
            return Err(Error::Formulation("operator columns do not follow the layout".into()));
        }
        Ok(())
    }
}

/// Everything about one domain that the builders reuse: restriction maps,
/// the surface, the FEM block, the density coupling coefficient, and the
/// incident Dirichlet data.
struct DomainContext {
    domain: u32,
    maps: RestrictionMaps,
    surface: Surface,
    /// `c(x) = rho_int(x) / rho_ext`, the factor on the interior Neumann
    /// trace in the velocity transmission condition.
    weight: ScalarField,
    fem: CsrMatrix,
    /// Nodal values of the incident Dirichlet trace.
    dirichlet: Vec<Complex64>,
    n_vol: usize,
    n_srf: usize,
}

impl DomainContext {
    fn volume_tag(&self) -> SpaceTag {
        SpaceTag::volume(self.domain)
    }

    fn surface_tag(&self) -> SpaceTag {
        SpaceTag::surface_p1(self.domain)
    }

    fn theta_tag(&self, theta_space: SpaceKind) -> SpaceTag {
        SpaceTag { kind: theta_space, domain: self.domain }
    }

    fn theta_dim(&self, theta_space: SpaceKind) -> usize {
        match theta_space {
            SpaceKind::SurfaceP0 => self.surface.n_triangles(),
            _ => self.n_srf,
        }
    }

    fn trace_entry(&self) -> BlockEntry {
        BlockEntry::sparse(self.maps.trace.clone(), self.surface_tag(), self.volume_tag())
    }

    fn lift_entry(&self) -> BlockEntry {
        BlockEntry::sparse(self.maps.trace.transpose(), self.volume_tag(), self.surface_tag())
    }

    fn weight_coeff(&self) -> impl Fn(&Point3<f64>) -> Complex64 + '_ {
        move |x| Complex64::new(self.weight.value(x), 0.0)
    }
}

fn domain_contexts(
    mesh: &Mesh,
    problem: &TransmissionProblem,
    quad: &QuadratureConfig,
) -> Result<Vec<DomainContext>> {
    let k = problem.exterior.wavenumber;
    let rho_ext = problem.exterior.density;
    let mut out = Vec::with_capacity(mesh.domains.len());
    for &domain in &mesh.domains {
        let maps = build_restrictions(mesh, domain);
        let surface = mesh.surface(domain);
        let material: &Material = problem.material(domain)?;
        let fem = assemble_fem(mesh, &maps, &problem.exterior, material, quad.volume_order)?;
        let dirichlet = problem.incident.dirichlet_coefficients(k, &surface);
        let rho_v = material.density.clone();
        let rho_g = material.density.clone();
        let weight = match material.density.as_constant() {
            Some(c) => ScalarField::constant(c / rho_ext),
            None => ScalarField::new(
                move |x| rho_v.value(x) / rho_ext,
                move |x| rho_g.gradient(x) / rho_ext,
            ),
        };
        let n_vol = maps.volume_dofs.len();
        let n_srf = surface.n_vertices();
        out.push(DomainContext { domain, maps, surface, weight, fem, dirichlet, n_vol, n_srf });
    }
    Ok(out)
}

/// The boundary operators between one (test, trial) surface pair, assembled
/// in a single shared-kernel pass.  Row-one blocks carry the density
/// coupling weight of the test domain; `k_nu`/`v_nu` are the extra
/// weighted operators of the base stabilisation, and `d`/`t` the unweighted
/// operators of the penalty row.
struct BoundaryBlocks {
    d_w: Arc<Mat<Complex64>>,
    t_w: Arc<Mat<Complex64>>,
    k: Arc<Mat<Complex64>>,
    v: Arc<Mat<Complex64>>,
    k_nu: Option<Arc<Mat<Complex64>>>,
    v_nu: Option<Arc<Mat<Complex64>>>,
    d: Option<Arc<Mat<Complex64>>>,
    t: Option<Arc<Mat<Complex64>>>,
}

fn assemble_boundary_blocks(
    test: &DomainContext,
    trial: &DomainContext,
    k: f64,
    theta_space: SpaceKind,
    need_nu: bool,
    need_penalty_row: bool,
    quad: &QuadratureConfig,
) -> Result<BoundaryBlocks> {
    let weight = TestWeight::Field(&test.weight);
    let mut requests = vec![
        OperatorRequest::new(OperatorKind::Hypersingular, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1)
            .weighted(weight),
        OperatorRequest::new(OperatorKind::AdjointDoubleLayer, SpaceKind::SurfaceP1, theta_space)
            .weighted(weight),
        OperatorRequest::new(OperatorKind::DoubleLayer, theta_space, SpaceKind::SurfaceP1),
        OperatorRequest::new(OperatorKind::SingleLayer, theta_space, theta_space),
    ];
    if need_nu {
        requests.push(
            OperatorRequest::new(OperatorKind::DoubleLayer, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1)
                .weighted(weight),
        );
        requests.push(
            OperatorRequest::new(OperatorKind::SingleLayer, SpaceKind::SurfaceP1, theta_space)
                .weighted(weight),
        );
    }
    if need_penalty_row {
        requests.push(OperatorRequest::new(
            OperatorKind::Hypersingular,
            SpaceKind::SurfaceP1,
            SpaceKind::SurfaceP1,
        ));
        requests.push(OperatorRequest::new(
            OperatorKind::AdjointDoubleLayer,
            SpaceKind::SurfaceP1,
            theta_space,
        ));
    }
    let mut blocks = bem::assemble_operators(&requests, &test.surface, &trial.surface, k, quad)?;
    // Consume in reverse so indices stay valid.
    let (mut d, mut t, mut k_nu, mut v_nu) = (None, None, None, None);
    if need_penalty_row {
        t = Some(Arc::new(blocks.pop().unwrap().mat));
        d = Some(Arc::new(blocks.pop().unwrap().mat));
    }
    if need_nu {
        v_nu = Some(Arc::new(blocks.pop().unwrap().mat));
        k_nu = Some(Arc::new(blocks.pop().unwrap().mat));
    }
    let v = Arc::new(blocks.pop().unwrap().mat);
    let k_op = Arc::new(blocks.pop().unwrap().mat);
    let t_w = Arc::new(blocks.pop().unwrap().mat);
    let d_w = Arc::new(blocks.pop().unwrap().mat);
    Ok(BoundaryBlocks { d_w, t_w, k: k_op, v, k_nu, v_nu, d, t })
}

fn mass_rule(quad: &QuadratureConfig) -> TriangleRule {
    TriangleRule::collapsed(quad.regular_order.max(3))
}

/// Weighted Dirichlet pairing `(a, b) -> integral of c * phi_b * phi_a` with
/// P1 test functions and `theta_space` trial functions.
fn weighted_pairing(
    ctx: &DomainContext,
    theta_space: SpaceKind,
    rule: &TriangleRule,
) -> CsrMatrix {
    match theta_space {
        SpaceKind::SurfaceP0 => {
            assemble_weighted_mixed_mass(&ctx.surface, rule, ctx.weight_coeff())
        }
        _ => assemble_weighted_surface_mass(&ctx.surface, rule, ctx.weight_coeff()),
    }
}

fn check_single_domain(mesh: &Mesh, what: &str) -> Result<()> {
    if mesh.domains.len() != 1 {
        return Err(Error::Formulation(format!(
            "{what} couples one body; the mesh has {} domains (use build_multidomain)",
            mesh.domains.len()
        )));
    }
    Ok(())
}

fn check_theta_space(theta_space: SpaceKind) -> Result<()> {
    if theta_space == SpaceKind::VolumeP1 {
        return Err(Error::Formulation(
            "the Neumann trace lives on the surface: choose surface P0 or P1".into(),
        ));
    }
    Ok(())
}

fn dense_matvec(m: &Mat<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    let xm = Mat::from_fn(x.len(), 1, |i, _| x[i]);
    let p = m.as_ref() * xm.as_ref();
    (0..m.nrows()).map(|i| p[(i, 0)]).collect()
}

fn axpy(y: &mut [Complex64], a: Complex64, x: &[Complex64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Standard (Johnson-Nedelec) coupling: the interior weak form against the
/// Neumann trace `theta` of the total field, closed with the exterior
/// direct boundary-integral equation.
///
/// ```text
/// [ F          -c M_c ] [ p     ]   [ 0       ]
/// [ (I/2 - K)Z  V     ] [ theta ] = [ M d_inc ]
/// ```
pub fn build_standard(
    mesh: &Mesh,
    problem: &TransmissionProblem,
    theta_space: SpaceKind,
    quad: &QuadratureConfig,
) -> Result<FormulationSystem> {
    check_single_domain(mesh, "the standard coupling")?;
    check_theta_space(theta_space)?;
    let k = problem.exterior.wavenumber;
    let ctx = domain_contexts(mesh, problem, quad)?.remove(0);
    let rule = mass_rule(quad);

    let requests = [
        OperatorRequest::new(OperatorKind::DoubleLayer, theta_space, SpaceKind::SurfaceP1),
        OperatorRequest::new(OperatorKind::SingleLayer, theta_space, theta_space),
    ];
    let mut ops = bem::assemble_operators(&requests, &ctx.surface, &ctx.surface, k, quad)?;
    let v = ops.pop().unwrap();
    let k_op = ops.pop().unwrap();

    let vol = ctx.volume_tag();
    let theta = ctx.theta_tag(theta_space);
    let n_theta = ctx.theta_dim(theta_space);

    let coupling = weighted_pairing(&ctx, theta_space, &rule);
    let a11 = BlockEntry::sparse(ctx.fem.clone(), vol, vol);
    let a12 = BlockEntry::scaled(
        -Complex64::ONE,
        BlockEntry::chain(vec![
            ctx.lift_entry(),
            BlockEntry::sparse(coupling, ctx.surface_tag(), theta),
        ])?,
    );
    let pairing = bem::assemble_identity(&ctx.surface, theta_space, SpaceKind::SurfaceP1)?;
    let half_i_minus_k = BlockEntry::sum(vec![
        BlockEntry::scaled(
            Complex64::new(0.5, 0.0),
            BlockEntry::sparse(pairing.mat.clone(), theta, ctx.surface_tag()),
        ),
        BlockEntry::scaled(-Complex64::ONE, BlockEntry::dense(k_op)),
    ])?;
    let a21 = BlockEntry::chain(vec![half_i_minus_k, ctx.trace_entry()])?;
    let a22 = BlockEntry::dense(v);

    let operator = BlockOperator::new(vec![vec![a11, a12], vec![a21, a22]])?;
    let mut rhs = vec![Complex64::ZERO; ctx.n_vol + n_theta];
    let projected = pairing.mat.matvec(&ctx.dirichlet);
    rhs[ctx.n_vol..].copy_from_slice(&projected);

    let system = FormulationSystem {
        operator,
        rhs,
        layout: vec![vol, theta],
        layout_dims: vec![ctx.n_vol, n_theta],
        tag: FormulationTag::Standard,
        eta: 0.0,
        nu: 0.0,
        domains: vec![ctx.domain],
        theta_space,
    };
    system.validate()?;
    Ok(system)
}

/// Symmetric coupling: the hypersingular operator moves into the interior
/// equation, making `theta` the Neumann trace of the scattered field.
///
/// ```text
/// [ F + Z'(cD)Z   Z'(cT - c I/2) ] [ p     ]   [ Z'(cD d + c n_inc) ]
/// [ (I/2 - K)Z    V              ] [ theta ] = [ (M/2 - K) d        ]
/// ```
pub fn build_symmetric(
    mesh: &Mesh,
    problem: &TransmissionProblem,
    theta_space: SpaceKind,
    quad: &QuadratureConfig,
) -> Result<FormulationSystem> {
    check_single_domain(mesh, "the symmetric coupling")?;
    check_theta_space(theta_space)?;
    let k = problem.exterior.wavenumber;
    let ctx = domain_contexts(mesh, problem, quad)?.remove(0);
    let rule = mass_rule(quad);
    let blocks = assemble_boundary_blocks(&ctx, &ctx, k, theta_space, false, false, quad)?;

    let vol = ctx.volume_tag();
    let srf = ctx.surface_tag();
    let theta = ctx.theta_tag(theta_space);
    let n_theta = ctx.theta_dim(theta_space);

    let coupling = weighted_pairing(&ctx, theta_space, &rule);
    let a11 = BlockEntry::sum(vec![
        BlockEntry::sparse(ctx.fem.clone(), vol, vol),
        BlockEntry::chain(vec![
            ctx.lift_entry(),
            BlockEntry::dense_shared(blocks.d_w.clone(), srf, srf),
            ctx.trace_entry(),
        ])?,
    ])?;
    let a12 = BlockEntry::chain(vec![
        ctx.lift_entry(),
        BlockEntry::sum(vec![
            BlockEntry::dense_shared(blocks.t_w.clone(), srf, theta),
            BlockEntry::scaled(
                Complex64::new(-0.5, 0.0),
                BlockEntry::sparse(coupling, srf, theta),
            ),
        ])?,
    ])?;
    let pairing = bem::assemble_identity(&ctx.surface, theta_space, SpaceKind::SurfaceP1)?;
    let a21 = BlockEntry::chain(vec![
        BlockEntry::sum(vec![
            BlockEntry::scaled(
                Complex64::new(0.5, 0.0),
                BlockEntry::sparse(pairing.mat.clone(), theta, srf),
            ),
            BlockEntry::scaled(-Complex64::ONE, BlockEntry::dense_shared(blocks.k.clone(), theta, srf)),
        ])?,
        ctx.trace_entry(),
    ])?;
    let a22 = BlockEntry::dense_shared(blocks.v.clone(), theta, theta);

    let operator = BlockOperator::new(vec![vec![a11, a12], vec![a21, a22]])?;

    let neumann_w =
        problem.incident.weighted_neumann_functional(k, &ctx.surface, &rule, ctx.weight_coeff());
    let mut row1_surface = dense_matvec(&blocks.d_w, &ctx.dirichlet);
    axpy(&mut row1_surface, Complex64::ONE, &neumann_w);
    let row1 = ctx.maps.trace.transpose().matvec(&row1_surface);
    let mut row2 = pairing.mat.matvec(&ctx.dirichlet);
    for x in row2.iter_mut() {
        *x *= 0.5;
    }
    axpy(&mut row2, -Complex64::ONE, &dense_matvec(&blocks.k, &ctx.dirichlet));

    let mut rhs = Vec::with_capacity(ctx.n_vol + n_theta);
    rhs.extend_from_slice(&row1);
    rhs.extend_from_slice(&row2);

    let system = FormulationSystem {
        operator,
        rhs,
        layout: vec![vol, theta],
        layout_dims: vec![ctx.n_vol, n_theta],
        tag: FormulationTag::Symmetric,
        eta: 0.0,
        nu: 0.0,
        domains: vec![ctx.domain],
        theta_space,
    };
    system.validate()?;
    Ok(system)
}

/// The three block rows (and rhs rows) of one domain's stabilised system,
/// before any variant permutation.
struct StabilisedRows {
    rows: Vec<Vec<BlockEntry>>,
    rhs: Vec<Vec<Complex64>>,
}

struct StabilisedParams {
    eta: f64,
    nu: f64,
    variant: Variant,
}

#[allow(clippy::too_many_arguments)]
fn stabilised_domain_rows(
    ctx: &DomainContext,
    blocks: &BoundaryBlocks,
    problem: &TransmissionProblem,
    theta_space: SpaceKind,
    params: &StabilisedParams,
    ntd: Option<&Arc<OsrcOperator>>,
    s_block: BlockEntry,
    quad: &QuadratureConfig,
) -> Result<StabilisedRows> {
    let k = problem.exterior.wavenumber;
    let rule = mass_rule(quad);
    let vol = ctx.volume_tag();
    let srf = ctx.surface_tag();
    let theta = ctx.theta_tag(theta_space);
    let n_theta = ctx.theta_dim(theta_space);
    let i_nu = Complex64::new(0.0, params.nu);
    let i_eta = Complex64::new(0.0, params.eta);
    let use_nu_row = params.variant == Variant::Base && params.nu != 0.0;

    let coupling = weighted_pairing(&ctx, theta_space, &rule);
    let weighted_mass =
        assemble_weighted_surface_mass(&ctx.surface, &rule, ctx.weight_coeff());
    let pairing = bem::assemble_identity(&ctx.surface, theta_space, SpaceKind::SurfaceP1)?;

    // Row 1: interior weak form with the coupling on the surface.
    let mut row1_surface_ops = vec![BlockEntry::dense_shared(blocks.d_w.clone(), srf, srf)];
    if use_nu_row {
        row1_surface_ops.push(BlockEntry::scaled(
            i_nu,
            BlockEntry::sum(vec![
                BlockEntry::scaled(
                    Complex64::new(0.5, 0.0),
                    BlockEntry::sparse(weighted_mass.clone(), srf, srf),
                ),
                BlockEntry::scaled(
                    -Complex64::ONE,
                    BlockEntry::dense_shared(blocks.k_nu.as_ref().unwrap().clone(), srf, srf),
                ),
            ])?,
        ));
    }
    let a11 = BlockEntry::sum(vec![
        BlockEntry::sparse(ctx.fem.clone(), vol, vol),
        BlockEntry::chain(vec![
            ctx.lift_entry(),
            BlockEntry::sum(row1_surface_ops)?,
            ctx.trace_entry(),
        ])?,
    ])?;

    let mut row1_theta_ops = vec![
        BlockEntry::dense_shared(blocks.t_w.clone(), srf, theta),
        BlockEntry::scaled(Complex64::new(-0.5, 0.0), BlockEntry::sparse(coupling, srf, theta)),
    ];
    if use_nu_row {
        row1_theta_ops.push(BlockEntry::scaled(
            i_nu,
            BlockEntry::dense_shared(blocks.v_nu.as_ref().unwrap().clone(), srf, theta),
        ));
    }
    let a12 = BlockEntry::chain(vec![ctx.lift_entry(), BlockEntry::sum(row1_theta_ops)?])?;

    let a13 = match params.variant {
        Variant::Base => BlockEntry::zero(vol, srf, ctx.n_vol, ctx.n_srf),
        _ if params.nu == 0.0 => BlockEntry::zero(vol, srf, ctx.n_vol, ctx.n_srf),
        Variant::AltNu | Variant::Permuted => BlockEntry::chain(vec![
            ctx.lift_entry(),
            BlockEntry::scaled(
                Complex64::new(params.nu * params.eta, 0.0),
                BlockEntry::sparse(weighted_mass.clone(), srf, srf),
            ),
        ])?,
        Variant::AltReg | Variant::PermutedAltReg => BlockEntry::chain(vec![
            ctx.lift_entry(),
            BlockEntry::scaled(
                Complex64::new(params.nu * params.eta, 0.0),
                BlockEntry::sparse(weighted_mass.clone(), srf, srf),
            ),
            BlockEntry::osrc(ntd.unwrap().clone(), ctx.domain),
        ])?,
    };

    // Row 2: the direct boundary-integral equation with the penalty.
    let a21 = BlockEntry::chain(vec![
        BlockEntry::sum(vec![
            BlockEntry::scaled(
                Complex64::new(0.5, 0.0),
                BlockEntry::sparse(pairing.mat.clone(), theta, srf),
            ),
            BlockEntry::scaled(-Complex64::ONE, BlockEntry::dense_shared(blocks.k.clone(), theta, srf)),
        ])?,
        ctx.trace_entry(),
    ])?;
    let a22 = BlockEntry::dense_shared(blocks.v.clone(), theta, theta);
    let penalty_pairing = BlockEntry::sparse(pairing.mat.clone(), theta, srf);
    let a23 = if params.variant.applies_regulariser_inverse() {
        BlockEntry::chain(vec![
            BlockEntry::scaled(i_eta, penalty_pairing),
            BlockEntry::osrc(ntd.unwrap().clone(), ctx.domain),
        ])?
    } else {
        BlockEntry::scaled(i_eta, penalty_pairing)
    };

    // Row 3: the second boundary-integral equation tied off by S.
    let unweighted_d = blocks.d.as_ref().expect("penalty row operators requested");
    let unweighted_t = blocks.t.as_ref().expect("penalty row operators requested");
    let a31 = BlockEntry::chain(vec![
        BlockEntry::scaled(
            -Complex64::ONE,
            BlockEntry::dense_shared(unweighted_d.clone(), srf, srf),
        ),
        ctx.trace_entry(),
    ])?;
    let surface_mass = bem::assemble_identity(&ctx.surface, SpaceKind::SurfaceP1, theta_space)?;
    let a32 = BlockEntry::sum(vec![
        BlockEntry::scaled(
            Complex64::new(-0.5, 0.0),
            BlockEntry::sparse(surface_mass.mat.clone(), srf, theta),
        ),
        BlockEntry::scaled(-Complex64::ONE, BlockEntry::dense_shared(unweighted_t.clone(), srf, theta)),
    ])?;
    let a33 = s_block;

    // Right-hand sides.
    let neumann_w =
        problem.incident.weighted_neumann_functional(k, &ctx.surface, &rule, ctx.weight_coeff());
    let mut row1_surface = dense_matvec(&blocks.d_w, &ctx.dirichlet);
    axpy(&mut row1_surface, Complex64::ONE, &neumann_w);
    if use_nu_row {
        let mut nu_part = weighted_mass.matvec(&ctx.dirichlet);
        for x in nu_part.iter_mut() {
            *x *= 0.5;
        }
        axpy(
            &mut nu_part,
            -Complex64::ONE,
            &dense_matvec(blocks.k_nu.as_ref().unwrap(), &ctx.dirichlet),
        );
        axpy(&mut row1_surface, i_nu, &nu_part);
    }
    let rhs1 = ctx.maps.trace.transpose().matvec(&row1_surface);

    let mut rhs2 = pairing.mat.matvec(&ctx.dirichlet);
    for x in rhs2.iter_mut() {
        *x *= 0.5;
    }
    axpy(&mut rhs2, -Complex64::ONE, &dense_matvec(&blocks.k, &ctx.dirichlet));
    debug_assert_eq!(rhs2.len(), n_theta);

    let mut rhs3 = dense_matvec(unweighted_d, &ctx.dirichlet);
    for x in rhs3.iter_mut() {
        *x = -*x;
    }

    Ok(StabilisedRows {
        rows: vec![vec![a11, a12, a13], vec![a21, a22, a23], vec![a31, a32, a33]],
        rhs: vec![rhs1, rhs2, rhs3],
    })
}

fn negate_row(row: Vec<BlockEntry>) -> Vec<BlockEntry> {
    row.into_iter()
        .map(|e| if e.is_zero() { e } else { BlockEntry::scaled(-Complex64::ONE, e) })
        .collect()
}

fn permute_rows(mut sys: StabilisedRows) -> StabilisedRows {
    // [r1, r2, r3] -> [r1, -r3, r2]: swap the boundary-equation rows and
    // flip the sign of the one that moves up.
    let r3 = sys.rows.pop().unwrap();
    let r2 = sys.rows.pop().unwrap();
    sys.rows.push(negate_row(r3));
    sys.rows.push(r2);
    let b3 = sys.rhs.pop().unwrap();
    let b2 = sys.rhs.pop().unwrap();
    sys.rhs.push(b3.into_iter().map(|x| -x).collect());
    sys.rhs.push(b2);
    sys
}

fn osrc_config_for(
    surface: &Surface,
    k: f64,
    osrc: Option<&OsrcConfig>,
) -> Result<OsrcConfig> {
    match osrc {
        Some(cfg) => Ok(cfg.clone()),
        None => OsrcConfig::benchmark(k, characteristic_length(surface)),
    }
}

fn build_s_block(
    ctx: &DomainContext,
    regulariser: Regulariser,
    k: f64,
    osrc: Option<&OsrcConfig>,
) -> Result<(BlockEntry, Option<Arc<OsrcOperator>>)> {
    let srf = ctx.surface_tag();
    match regulariser {
        Regulariser::ModifiedHelmholtz | Regulariser::ShiftedLaplacian => {
            let form = assemble_regulariser_form(&ctx.surface, regulariser, k)?;
            Ok((BlockEntry::sparse(form, srf, srf), None))
        }
        Regulariser::Osrc => {
            let cfg = osrc_config_for(&ctx.surface, k, osrc)?;
            let dtn = OsrcOperator::assemble(OsrcKind::DtN, -1.0, &ctx.surface, &cfg)?;
            let ntd = Arc::new(OsrcOperator::assemble(OsrcKind::NtD, -1.0, &ctx.surface, &cfg)?);
            let mass = bem::assemble_identity(&ctx.surface, SpaceKind::SurfaceP1, SpaceKind::SurfaceP1)?;
            let s = BlockEntry::chain(vec![
                BlockEntry::sparse(mass.mat, srf, srf),
                BlockEntry::osrc(Arc::new(dtn), ctx.domain),
            ])?;
            Ok((s, Some(ntd)))
        }
    }
}

/// Stabilised three-field coupling: the symmetric system augmented with a
/// penalty unknown that vanishes for the exact solution, tied off by the
/// regulariser `S`.
#[allow(clippy::too_many_arguments)]
pub fn build_stabilised(
    mesh: &Mesh,
    problem: &TransmissionProblem,
    theta_space: SpaceKind,
    regulariser: Regulariser,
    eta: f64,
    nu: f64,
    variant: Variant,
    osrc: Option<&OsrcConfig>,
    quad: &QuadratureConfig,
) -> Result<FormulationSystem> {
    check_single_domain(mesh, "the stabilised coupling")?;
    check_theta_space(theta_space)?;
    if eta == 0.0 {
        return Err(Error::Formulation(
            "eta = 0 drops the penalty coupling and degenerates to the symmetric system; \
             use build_symmetric"
                .into(),
        ));
    }
    if nu != 0.0 && nu != eta {
        return Err(Error::Formulation(format!(
            "nu must be 0 or eta = {eta}, got {nu}"
        )));
    }
    if variant.applies_regulariser_inverse() && regulariser != Regulariser::Osrc {
        return Err(Error::Formulation(format!(
            "variant {} applies the regulariser inverse explicitly, which only the OSRC \
             regulariser provides",
            variant.label()
        )));
    }

    let k = problem.exterior.wavenumber;
    let ctx = domain_contexts(mesh, problem, quad)?.remove(0);
    let need_nu = variant == Variant::Base && nu != 0.0;
    let blocks = assemble_boundary_blocks(&ctx, &ctx, k, theta_space, need_nu, true, quad)?;
    let (s_block, ntd) = build_s_block(&ctx, regulariser, k, osrc)?;

    let params = StabilisedParams { eta, nu, variant };
    let mut rows = stabilised_domain_rows(
        &ctx,
        &blocks,
        problem,
        theta_space,
        &params,
        ntd.as_ref(),
        s_block,
        quad,
    )?;
    if variant.is_permuted() {
        rows = permute_rows(rows);
    }

    let operator = BlockOperator::new(rows.rows)?;
    let rhs: Vec<Complex64> = rows.rhs.concat();
    let n_theta = ctx.theta_dim(theta_space);

    let system = FormulationSystem {
        operator,
        rhs,
        layout: vec![ctx.volume_tag(), ctx.theta_tag(theta_space), ctx.surface_tag()],
        layout_dims: vec![ctx.n_vol, n_theta, ctx.n_srf],
        tag: FormulationTag::Stabilised { regulariser, variant },
        eta,
        nu,
        domains: vec![ctx.domain],
        theta_space,
    };
    system.validate()?;
    Ok(system)
}

/// Rejects meshes whose bodies touch or interpenetrate: first a cheap
/// bounding-box test, then point containment and a clearance check against
/// the local mesh width.
fn check_disjoint_surfaces(surfaces: &[Surface]) -> Result<()> {
    for i in 0..surfaces.len() {
        for j in (i + 1)..surfaces.len() {
            let (a, b) = (&surfaces[i], &surfaces[j]);
            let clearance = a.max_diameter().max(b.max_diameter());
            let (alo, ahi) = a.bounding_box();
            let (blo, bhi) = b.bounding_box();
            // Boxes separated by more than one element width are safe.
            let boxes_near =
                (0..3).all(|c| alo[c] - clearance <= bhi[c] && blo[c] - clearance <= ahi[c]);
            if !boxes_near {
                continue;
            }
            if a.points.iter().any(|p| b.encloses(p)) || b.points.iter().any(|p| a.encloses(p)) {
                return Err(Error::Formulation(format!(
                    "domains {} and {} overlap",
                    a.domain, b.domain
                )));
            }
            let mut dist = f64::INFINITY;
            for p in &a.points {
                for q in &b.points {
                    dist = dist.min((p - q).norm());
                }
            }
            if dist < clearance {
                return Err(Error::Formulation(format!(
                    "domains {} and {} are closer ({dist:.3e}) than the mesh can resolve \
                     ({clearance:.3e})",
                    a.domain, b.domain
                )));
            }
        }
    }
    Ok(())
}

/// Stabilised coupling for any number of disjoint bodies (`nu = 0`): the
/// per-domain systems on the diagonal, boundary operators between distinct
/// surfaces as cross blocks, and no cross coupling on the penalty columns.
pub fn build_multidomain(
    mesh: &Mesh,
    problem: &TransmissionProblem,
    theta_space: SpaceKind,
    regulariser: Regulariser,
    eta: f64,
    osrc: Option<&OsrcConfig>,
    quad: &QuadratureConfig,
) -> Result<FormulationSystem> {
    check_theta_space(theta_space)?;
    if eta == 0.0 {
        return Err(Error::Formulation(
            "eta = 0 drops the penalty coupling; the multidomain system is stabilised".into(),
        ));
    }
    let k = problem.exterior.wavenumber;
    let contexts = domain_contexts(mesh, problem, quad)?;
    let surfaces: Vec<Surface> = contexts.iter().map(|c| c.surface.clone()).collect();
    check_disjoint_surfaces(&surfaces)?;

    let params = StabilisedParams {
        eta,
        nu: 0.0,
        variant: Variant::Base,
    };
    let n = contexts.len();
    let mut grid: Vec<Vec<Option<BlockEntry>>> = (0..3 * n)
        .map(|_| (0..3 * n).map(|_| None).collect())
        .collect();
    let mut rhs_rows: Vec<Vec<Complex64>> = Vec::with_capacity(3 * n);

    for (ti, test) in contexts.iter().enumerate() {
        let blocks = assemble_boundary_blocks(test, test, k, theta_space, false, true, quad)?;
        let (s_block, ntd) = build_s_block(test, regulariser, k, osrc)?;
        let rows = stabilised_domain_rows(
            test,
            &blocks,
            problem,
            theta_space,
            &params,
            ntd.as_ref(),
            s_block,
            quad,
        )?;
        for (r, row) in rows.rows.into_iter().enumerate() {
            for (c, entry) in row.into_iter().enumerate() {
                grid[3 * ti + r][3 * ti + c] = Some(entry);
            }
        }
        rhs_rows.extend(rows.rhs);
    }

    for (ti, test) in contexts.iter().enumerate() {
        for (tj, trial) in contexts.iter().enumerate() {
            if ti == tj {
                continue;
            }
            let cross = assemble_boundary_blocks(test, trial, k, theta_space, false, true, quad)?;
            let vol_t = test.volume_tag();
            let srf_t = test.surface_tag();
            let theta_t = test.theta_tag(theta_space);
            let srf_j = trial.surface_tag();
            let theta_j = trial.theta_tag(theta_space);
            let row1_col1 = BlockEntry::chain(vec![
                test.lift_entry(),
                BlockEntry::dense_shared(cross.d_w.clone(), srf_t, srf_j),
                trial.trace_entry(),
            ])?;
            let row1_col2 = BlockEntry::chain(vec![
                test.lift_entry(),
                BlockEntry::dense_shared(cross.t_w.clone(), srf_t, theta_j),
            ])?;
            let row2_col1 = BlockEntry::chain(vec![
                BlockEntry::scaled(
                    -Complex64::ONE,
                    BlockEntry::dense_shared(cross.k.clone(), theta_t, srf_j),
                ),
                trial.trace_entry(),
            ])?;
            let row2_col2 = BlockEntry::dense_shared(cross.v.clone(), theta_t, theta_j);
            let row3_col1 = BlockEntry::chain(vec![
                BlockEntry::scaled(
                    -Complex64::ONE,
                    BlockEntry::dense_shared(cross.d.as_ref().unwrap().clone(), srf_t, srf_j),
                ),
                trial.trace_entry(),
            ])?;
            let row3_col2 = BlockEntry::scaled(
                -Complex64::ONE,
                BlockEntry::dense_shared(cross.t.as_ref().unwrap().clone(), srf_t, theta_j),
            );
            grid[3 * ti][3 * tj] = Some(row1_col1);
            grid[3 * ti][3 * tj + 1] = Some(row1_col2);
            grid[3 * ti][3 * tj + 2] =
                Some(BlockEntry::zero(vol_t, srf_j, test.n_vol, trial.n_srf));
            grid[3 * ti + 1][3 * tj] = Some(row2_col1);
            grid[3 * ti + 1][3 * tj + 1] = Some(row2_col2);
            grid[3 * ti + 1][3 * tj + 2] = Some(BlockEntry::zero(
                theta_t,
                srf_j,
                test.theta_dim(theta_space),
                trial.n_srf,
            ));
            grid[3 * ti + 2][3 * tj] = Some(row3_col1);
            grid[3 * ti + 2][3 * tj + 1] = Some(row3_col2);
            grid[3 * ti + 2][3 * tj + 2] =
                Some(BlockEntry::zero(srf_t, srf_j, test.n_srf, trial.n_srf));
        }
    }

    let entries: Vec<Vec<BlockEntry>> = grid
        .into_iter()
        .map(|row| row.into_iter().map(|e| e.expect("grid fully populated")).collect())
        .collect();
    let operator = BlockOperator::new(entries)?;
    let rhs: Vec<Complex64> = rhs_rows.concat();

    let mut layout = Vec::with_capacity(3 * n);
    let mut layout_dims = Vec::with_capacity(3 * n);
    for ctx in &contexts {
        layout.push(ctx.volume_tag());
        layout.push(ctx.theta_tag(theta_space));
        layout.push(ctx.surface_tag());
        layout_dims.push(ctx.n_vol);
        layout_dims.push(ctx.theta_dim(theta_space));
        layout_dims.push(ctx.n_srf);
    }

    let system = FormulationSystem {
        operator,
        rhs,
        layout,
        layout_dims,
        tag: FormulationTag::Stabilised { regulariser, variant: Variant::Base },
        eta,
        nu: 0.0,
        domains: contexts.iter().map(|c| c.domain).collect(),
        theta_space,
    };
    system.validate()?;
    Ok(system)
}

/// Evaluates the total exterior field at the given points from a solved
/// system: the representation `K(dirichlet trace) - V(theta)` summed over
/// all bodies, minus the single-layer potential of the incident Neumann
/// trace when `theta` is a scattered-field trace, plus the incident field.
///
/// Points inside any body, or within one element diameter of a surface, are
/// rejected.
pub fn reconstruct_exterior(
    system: &FormulationSystem,
    mesh: &Mesh,
    problem: &TransmissionProblem,
    solution: &[Complex64],
    points: &[Point3<f64>],
    quad: &QuadratureConfig,
) -> Result<Vec<Complex64>> {
    let k = problem.exterior.wavenumber;
    let parts = system.split(solution)?;
    let mut total: Vec<Complex64> = points.iter().map(|p| problem.incident.field(k, p)).collect();
    for part in &parts {
        let surface = mesh.surface(part.domain);
        for (i, p) in points.iter().enumerate() {
            if surface.encloses(p) {
                return Err(Error::Formulation(format!(
                    "evaluation point {i} lies inside domain {}",
                    part.domain
                )));
            }
        }
        let maps = build_restrictions(mesh, part.domain);
        let trace = maps.trace.matvec(&part.pressure);
        let scattered = bem::evaluate_potentials(
            &surface,
            k,
            &trace,
            &part.theta,
            system.theta_space,
            points,
            quad,
        )?;
        axpy(&mut total, Complex64::ONE, &scattered);
        if !system.theta_is_total() {
            let incident_layer = bem::evaluate_single_layer(
                &surface,
                k,
                |x, n| {
                    let g = problem.incident.gradient(k, x);
                    g.x * n.x + g.y * n.y + g.z * n.z
                },
                points,
                quad,
            )?;
            axpy(&mut total, -Complex64::ONE, &incident_layer);
        }
    }
    Ok(total)
}
