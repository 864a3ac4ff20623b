//! Structured hexahedral discretization of the box domain.
//!
//! Deformations live on nodes, plastic strains on cells. Cell gradients of `y`
//! are the center values of the trilinear interpolant; gradients of cell fields
//! use central differences inside and one-sided differences at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Mat3, Mat33};

/// A face of the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMin,
        Face::XMax,
        Face::YMin,
        Face::YMax,
        Face::ZMin,
        Face::ZMax,
    ];

    pub fn axis(self) -> usize {
        match self {
            Face::XMin | Face::XMax => 0,
            Face::YMin | Face::YMax => 1,
            Face::ZMin | Face::ZMax => 2,
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, Face::XMax | Face::YMax | Face::ZMax)
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::XMin => "x_min",
            Face::XMax => "x_max",
            Face::YMin => "y_min",
            Face::YMax => "y_max",
            Face::ZMin => "z_min",
            Face::ZMax => "z_max",
        }
    }

    pub fn parse(s: &str) -> Option<Face> {
        Face::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// A cell face lying on the Neumann boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFace<T> {
    pub cell: usize,
    pub face: Face,
    pub nodes: [usize; 4],
    pub area: T,
}

/// Box `[0, L_x] x [0, L_y] x [0, L_z]` split into `n_x n_y n_z` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    extent: [T; 3],
    cells: [usize; 3],
    h: [T; 3],
    dirichlet_faces: Vec<Face>,
    dirichlet: Vec<bool>,
    neumann: Vec<BoundaryFace<T>>,
    positions: Vec<[T; 3]>,
}

impl<T: Real> Grid<T> {
    /// Builds the grid; `dirichlet_faces` is the clamped part Γ_D, every other
    /// face belongs to Γ_N.
    pub fn new(extent: [T; 3], cells: [usize; 3], dirichlet_faces: &[Face]) -> Result<Self> {
        if cells.iter().any(|&n| n == 0) {
            return Err(Error::config("grid.cells", "every axis needs at least one cell"));
        }
        if extent.iter().any(|&l| !(l > T::zero()) || !l.is_finite()) {
            return Err(Error::config("grid.extent_length", "extents must be positive"));
        }
        if dirichlet_faces.is_empty() {
            return Err(Error::config(
                "grid.dirichlet_faces",
                "the clamped boundary must be nonempty",
            ));
        }
        let mut dfaces = dirichlet_faces.to_vec();
        dfaces.sort_by_key(|f| *f as u8);
        dfaces.dedup();
        let h = [
            extent[0] / T::lit(cells[0] as f64),
            extent[1] / T::lit(cells[1] as f64),
            extent[2] / T::lit(cells[2] as f64),
        ];
        let mut grid = Self {
            extent,
            cells,
            h,
            dirichlet_faces: dfaces,
            dirichlet: Vec::new(),
            neumann: Vec::new(),
            positions: Vec::new(),
        };
        let nn = grid.n_nodes();
        grid.positions = (0..nn)
            .map(|n| {
                let [i, j, k] = grid.node_ijk(n);
                [
                    T::lit(i as f64) * h[0],
                    T::lit(j as f64) * h[1],
                    T::lit(k as f64) * h[2],
                ]
            })
            .collect();
        grid.dirichlet = (0..nn)
            .map(|n| {
                let ijk = grid.node_ijk(n);
                grid.dirichlet_faces.iter().any(|f| grid.node_on_face(ijk, *f))
            })
            .collect();
        for face in Face::ALL {
            if grid.dirichlet_faces.contains(&face) {
                continue;
            }
            grid.neumann.extend(grid.faces_on(face));
        }
        Ok(grid)
    }

    fn node_on_face(&self, ijk: [usize; 3], face: Face) -> bool {
        let a = face.axis();
        if face.is_max() {
            ijk[a] == self.cells[a]
        } else {
            ijk[a] == 0
        }
    }

    fn faces_on(&self, face: Face) -> Vec<BoundaryFace<T>> {
        let a = face.axis();
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let layer = if face.is_max() { self.cells[a] - 1 } else { 0 };
        let node_layer = if face.is_max() { self.cells[a] } else { 0 };
        let area = self.h[b] * self.h[c];
        let mut out = Vec::new();
        for u in 0..self.cells[b] {
            for v in 0..self.cells[c] {
                let mut cijk = [0; 3];
                cijk[a] = layer;
                cijk[b] = u;
                cijk[c] = v;
                let mut nodes = [0; 4];
                for (q, (du, dv)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
                    let mut nijk = [0; 3];
                    nijk[a] = node_layer;
                    nijk[b] = u + du;
                    nijk[c] = v + dv;
                    nodes[q] = self.node_index(nijk);
                }
                out.push(BoundaryFace {
                    cell: self.cell_index(cijk),
                    face,
                    nodes,
                    area,
                });
            }
        }
        out
    }

    pub fn extent(&self) -> [T; 3] {
        self.extent
    }

    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    pub fn spacing(&self) -> [T; 3] {
        self.h
    }

    pub fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1] * self.cells[2]
    }

    pub fn n_nodes(&self) -> usize {
        (self.cells[0] + 1) * (self.cells[1] + 1) * (self.cells[2] + 1)
    }

    pub fn cell_volume(&self) -> T {
        self.h[0] * self.h[1] * self.h[2]
    }

    pub fn node_index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + (self.cells[0] + 1) * (j + (self.cells[1] + 1) * k)
    }

    pub fn node_ijk(&self, n: usize) -> [usize; 3] {
        let nx = self.cells[0] + 1;
        let ny = self.cells[1] + 1;
        [n % nx, (n / nx) % ny, n / (nx * ny)]
    }

    pub fn cell_index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.cells[0] * (j + self.cells[1] * k)
    }

    pub fn cell_ijk(&self, c: usize) -> [usize; 3] {
        let nx = self.cells[0];
        let ny = self.cells[1];
        [c % nx, (c / nx) % ny, c / (nx * ny)]
    }

    pub fn node_position(&self, n: usize) -> [T; 3] {
        self.positions[n]
    }

    pub fn cell_center(&self, c: usize) -> [T; 3] {
        let ijk = self.cell_ijk(c);
        let half = T::lit(0.5);
        [
            (T::lit(ijk[0] as f64) + half) * self.h[0],
            (T::lit(ijk[1] as f64) + half) * self.h[1],
            (T::lit(ijk[2] as f64) + half) * self.h[2],
        ]
    }

    /// The eight nodes of a cell, ordered by the bit pattern `dx + 2 dy + 4 dz`.
    pub fn cell_nodes(&self, c: usize) -> [usize; 8] {
        let [i, j, k] = self.cell_ijk(c);
        let mut out = [0; 8];
        for (b, o) in out.iter_mut().enumerate() {
            *o = self.node_index([i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1)]);
        }
        out
    }

    /// Gradient of the trilinear shape function of local node `b` at the cell center.
    fn shape_gradient(&self, b: usize) -> [T; 3] {
        let q = T::lit(0.25);
        let sign = |bit: usize| if bit == 1 { T::one() } else { -T::one() };
        [
            sign(b & 1) * q / self.h[0],
            sign((b >> 1) & 1) * q / self.h[1],
            sign((b >> 2) & 1) * q / self.h[2],
        ]
    }

    pub fn is_dirichlet(&self, n: usize) -> bool {
        self.dirichlet[n]
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet
    }

    pub fn dirichlet_faces(&self) -> &[Face] {
        &self.dirichlet_faces
    }

    pub fn neumann_faces(&self) -> &[BoundaryFace<T>] {
        &self.neumann
    }

    /// Identity deformation `y(x) = x` at the nodes.
    pub fn identity_y(&self) -> Vec<[T; 3]> {
        self.positions.clone()
    }

    /// Cell-center average of a nodal field.
    pub fn cell_average(&self, y: &[[T; 3]], c: usize) -> [T; 3] {
        let mut s = [T::zero(); 3];
        for n in self.cell_nodes(c) {
            for d in 0..3 {
                s[d] += y[n][d];
            }
        }
        s.map(|v| v * T::lit(0.125))
    }

    pub fn face_average(&self, y: &[[T; 3]], f: &BoundaryFace<T>) -> [T; 3] {
        let mut s = [T::zero(); 3];
        for n in f.nodes {
            for d in 0..3 {
                s[d] += y[n][d];
            }
        }
        s.map(|v| v * T::lit(0.25))
    }

    /// Cell-centered gradient of a nodal field; exact for affine `y`.
    pub fn gradient_y(&self, y: &[[T; 3]]) -> Result<Vec<Mat3<T>>> {
        if y.len() != self.n_nodes() {
            return Err(Error::SizeMismatch {
                expected: self.n_nodes(),
                got: y.len(),
            });
        }
        Ok((0..self.n_cells()).map(|c| self.cell_gradient_y(y, c)).collect())
    }

    pub fn cell_gradient_y(&self, y: &[[T; 3]], c: usize) -> Mat3<T> {
        let mut g = Mat3::zero();
        for (b, n) in self.cell_nodes(c).into_iter().enumerate() {
            g += Mat3::outer(y[n], self.shape_gradient(b));
        }
        g
    }

    /// Adjoint of [`Grid::gradient_y`] weighted by the cell volume:
    /// returns `∂/∂y Σ_c vol S_c : (∇y)_c` per node.
    pub fn gradient_y_adjoint(&self, stress: &[Mat3<T>]) -> Vec<[T; 3]> {
        let vol = self.cell_volume();
        let mut out = vec![[T::zero(); 3]; self.n_nodes()];
        for (c, s) in stress.iter().enumerate() {
            let s = *s * vol;
            for (b, n) in self.cell_nodes(c).into_iter().enumerate() {
                let g = self.shape_gradient(b);
                let f = s.mul_vec(g);
                for d in 0..3 {
                    out[n][d] += f[d];
                }
            }
        }
        out
    }

    /// Difference stencil along `axis` at cell `c`: `(plus, minus, weight)` with
    /// derivative `weight (f[plus] - f[minus])`; `None` on a single-cell axis.
    fn cell_stencil(&self, c: usize, axis: usize) -> Option<(usize, usize, T)> {
        let n = self.cells[axis];
        if n < 2 {
            return None;
        }
        let ijk = self.cell_ijk(c);
        let a = ijk[axis];
        let shifted = |d: usize| {
            let mut v = ijk;
            v[axis] = d;
            self.cell_index(v)
        };
        let h = self.h[axis];
        Some(if a == 0 {
            (shifted(1), c, h.recip())
        } else if a == n - 1 {
            (c, shifted(n - 2), h.recip())
        } else {
            (shifted(a + 1), shifted(a - 1), (T::lit(2.0) * h).recip())
        })
    }

    /// `(∇P)_{ijk} = ∂P_ij/∂x_k` per cell.
    pub fn gradient_p(&self, p: &[Mat3<T>]) -> Result<Vec<Mat33<T>>> {
        if p.len() != self.n_cells() {
            return Err(Error::SizeMismatch {
                expected: self.n_cells(),
                got: p.len(),
            });
        }
        Ok((0..self.n_cells())
            .map(|c| {
                let mut g = Mat33::zero();
                for axis in 0..3 {
                    if let Some((plus, minus, w)) = self.cell_stencil(c, axis) {
                        g.set_slice(axis, &((p[plus] - p[minus]) * w));
                    }
                }
                g
            })
            .collect())
    }

    /// Adjoint of [`Grid::gradient_p`]: `∂/∂P Σ_c G_c ⋮ (∇P)_c` per cell.
    pub fn gradient_p_adjoint(&self, g: &[Mat33<T>]) -> Vec<Mat3<T>> {
        let mut out = vec![Mat3::zero(); self.n_cells()];
        for (c, gc) in g.iter().enumerate() {
            for axis in 0..3 {
                if let Some((plus, minus, w)) = self.cell_stencil(c, axis) {
                    let s = gc.slice(axis) * w;
                    out[plus] += s;
                    out[minus] -= s;
                }
            }
        }
        out
    }
}

/// Interpolation used between load table knots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoadInterpolation {
    /// Piecewise linear; the rate is the exact segment slope.
    #[default]
    Linear,
    /// C¹ cubic Hermite with Catmull–Rom slopes.
    Smooth,
}

/// Time tables of body force per cell and traction per Neumann face.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadProgram<T> {
    times: Vec<T>,
    body: Vec<Vec<[T; 3]>>,
    traction: Vec<Vec<[T; 3]>>,
    interpolation: LoadInterpolation,
}

impl<T: Real> LoadProgram<T> {
    pub fn new(
        grid: &Grid<T>,
        times: Vec<T>,
        body: Vec<Vec<[T; 3]>>,
        traction: Vec<Vec<[T; 3]>>,
        interpolation: LoadInterpolation,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::config("loads.knot", "need at least one knot"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("loads.knot.time", "knot times must increase strictly"));
        }
        if body.len() != times.len() || traction.len() != times.len() {
            return Err(Error::SizeMismatch {
                expected: times.len(),
                got: body.len().min(traction.len()),
            });
        }
        for b in &body {
            if b.len() != grid.n_cells() {
                return Err(Error::SizeMismatch {
                    expected: grid.n_cells(),
                    got: b.len(),
                });
            }
        }
        for g in &traction {
            if g.len() != grid.neumann_faces().len() {
                return Err(Error::SizeMismatch {
                    expected: grid.neumann_faces().len(),
                    got: g.len(),
                });
            }
        }
        Ok(Self {
            times,
            body,
            traction,
            interpolation,
        })
    }

    /// No loads over `[0, t_end]`.
    pub fn zero(grid: &Grid<T>, t_end: T) -> Self {
        let nb = grid.n_cells();
        let nt = grid.neumann_faces().len();
        Self {
            times: vec![T::zero(), t_end],
            body: vec![vec![[T::zero(); 3]; nb]; 2],
            traction: vec![vec![[T::zero(); 3]; nt]; 2],
            interpolation: LoadInterpolation::Linear,
        }
    }

    /// Uniform body force and per-face uniform traction at each knot.
    pub fn uniform(
        grid: &Grid<T>,
        times: Vec<T>,
        body: Vec<[T; 3]>,
        traction: Vec<Vec<(Face, [T; 3])>>,
        interpolation: LoadInterpolation,
    ) -> Result<Self> {
        let nb = grid.n_cells();
        let bodies = body.into_iter().map(|b| vec![b; nb]).collect();
        let tractions = traction
            .into_iter()
            .map(|per_face| {
                grid.neumann_faces()
                    .iter()
                    .map(|f| {
                        per_face
                            .iter()
                            .find(|(face, _)| *face == f.face)
                            .map(|(_, v)| *v)
                            .unwrap_or([T::zero(); 3])
                    })
                    .collect()
            })
            .collect();
        Self::new(grid, times, bodies, tractions, interpolation)
    }

    pub fn start(&self) -> T {
        self.times[0]
    }

    pub fn end(&self) -> T {
        *self.times.last().expect("nonempty")
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn interpolation(&self) -> LoadInterpolation {
        self.interpolation
    }

    fn check_time(&self, t: T) -> Result<T> {
        let span = (self.end() - self.start()).max(T::one());
        let slack = T::lit(1e-12) * span;
        if t < self.start() - slack || t > self.end() + slack || !t.is_finite() {
            return Err(Error::TimeOutOfRange(t.as_f64()));
        }
        Ok(t.max(self.start()).min(self.end()))
    }

    /// Knot weights `(a_k(t), a_k'(t))` with `l(t) = Σ a_k l_k`.
    fn weights(&self, t: T) -> Result<Vec<(T, T)>> {
        let t = self.check_time(t)?;
        let n = self.times.len();
        let mut w = vec![(T::zero(), T::zero()); n];
        if n == 1 {
            w[0].0 = T::one();
            return Ok(w);
        }
        let mut k = 0;
        while k + 2 < n && t > self.times[k + 1] {
            k += 1;
        }
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        match self.interpolation {
            LoadInterpolation::Linear => {
                w[k] = (T::one() - s, -h.recip());
                w[k + 1] = (s, h.recip());
            }
            LoadInterpolation::Smooth => {
                let two = T::lit(2.0);
                let three = T::lit(3.0);
                let s2 = s * s;
                let s3 = s2 * s;
                let (h00, h10, h01, h11) = (
                    two * s3 - three * s2 + T::one(),
                    s3 - two * s2 + s,
                    -two * s3 + three * s2,
                    s3 - s2,
                );
                let six = T::lit(6.0);
                let four = T::lit(4.0);
                let (d00, d10, d01, d11) = (
                    (six * s2 - six * s) / h,
                    (three * s2 - four * s + T::one()) / h,
                    (-six * s2 + six * s) / h,
                    (three * s2 - two * s) / h,
                );
                w[k].0 += h00;
                w[k].1 += d00;
                w[k + 1].0 += h01;
                w[k + 1].1 += d01;
                // slopes m_j = Σ_i c_{ji} l_i, scaled by the segment length h
                for (j, (hv, dv)) in [(k, (h10, d10)), (k + 1, (h11, d11))] {
                    for (i, c) in self.slope_coefficients(j) {
                        w[i].0 += hv * h * c;
                        w[i].1 += dv * h * c;
                    }
                }
            }
        }
        Ok(w)
    }

    fn slope_coefficients(&self, j: usize) -> Vec<(usize, T)> {
        let n = self.times.len();
        let (a, b) = if j == 0 {
            (0, 1)
        } else if j == n - 1 {
            (n - 2, n - 1)
        } else {
            (j - 1, j + 1)
        };
        let d = (self.times[b] - self.times[a]).recip();
        vec![(b, d), (a, -d)]
    }

    fn knot_pairing(&self, grid: &Grid<T>, k: usize, y: &[[T; 3]]) -> T {
        let vol = grid.cell_volume();
        let mut s = T::zero();
        for (c, b) in self.body[k].iter().enumerate() {
            if b.iter().all(|v| v.is_zero()) {
                continue;
            }
            let yc = grid.cell_average(y, c);
            s += (b[0] * yc[0] + b[1] * yc[1] + b[2] * yc[2]) * vol;
        }
        for (f, g) in grid.neumann_faces().iter().zip(self.traction[k].iter()) {
            if g.iter().all(|v| v.is_zero()) {
                continue;
            }
            let yf = grid.face_average(y, f);
            s += (g[0] * yf[0] + g[1] * yf[1] + g[2] * yf[2]) * f.area;
        }
        s
    }

    /// `⟨l(t), y⟩`: midpoint quadrature of body force and traction.
    pub fn external_work(&self, grid: &Grid<T>, y: &[[T; 3]], t: T) -> Result<T> {
        check_nodes(grid, y)?;
        let w = self.weights(t)?;
        Ok(w
            .iter()
            .enumerate()
            .filter(|(_, (a, _))| !a.is_zero())
            .map(|(k, (a, _))| *a * self.knot_pairing(grid, k, y))
            .sum())
    }

    /// `⟨l̇(t), y⟩` using the exact table rate.
    pub fn external_power(&self, grid: &Grid<T>, y: &[[T; 3]], t: T) -> Result<T> {
        check_nodes(grid, y)?;
        let w = self.weights(t)?;
        Ok(w
            .iter()
            .enumerate()
            .filter(|(_, (_, d))| !d.is_zero())
            .map(|(k, (_, d))| *d * self.knot_pairing(grid, k, y))
            .sum())
    }

    /// Nodal load vector `∂⟨l(t), y⟩/∂y`.
    pub fn load_vector(&self, grid: &Grid<T>, t: T) -> Result<Vec<[T; 3]>> {
        let w = self.weights(t)?;
        let vol = grid.cell_volume();
        let mut out = vec![[T::zero(); 3]; grid.n_nodes()];
        let eighth = T::lit(0.125);
        let quarter = T::lit(0.25);
        for (k, (a, _)) in w.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (c, b) in self.body[k].iter().enumerate() {
                for n in grid.cell_nodes(c) {
                    for d in 0..3 {
                        out[n][d] += *a * b[d] * vol * eighth;
                    }
                }
            }
            for (f, g) in grid.neumann_faces().iter().zip(self.traction[k].iter()) {
                for n in f.nodes {
                    for d in 0..3 {
                        out[n][d] += *a * g[d] * f.area * quarter;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Upper bound on `sup_t Σ |l̇|` (body force times volume plus traction times
    /// area), the dual-norm surrogate used by the Gronwall constant.
    pub fn rate_bound(&self, grid: &Grid<T>) -> T {
        let n = self.times.len();
        if n < 2 {
            return T::zero();
        }
        let mut best = T::zero();
        // the rate is a combination of knot values; evaluate at knots and midpoints
        let mut probes = Vec::new();
        for k in 0..n - 1 {
            let (a, b) = (self.times[k], self.times[k + 1]);
            probes.extend([a, (a + b) * T::lit(0.5), b]);
        }
        let vol = grid.cell_volume();
        for t in probes {
            let Ok(w) = self.weights(t) else { continue };
            let mut s = T::zero();
            for c in 0..grid.n_cells() {
                let mut v = [T::zero(); 3];
                for (k, (_, d)) in w.iter().enumerate() {
                    for (vd, bd) in v.iter_mut().zip(self.body[k][c].iter()) {
                        *vd += *d * *bd;
                    }
                }
                s += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() * vol;
            }
            for (fi, f) in grid.neumann_faces().iter().enumerate() {
                let mut v = [T::zero(); 3];
                for (k, (_, d)) in w.iter().enumerate() {
                    for (vd, gd) in v.iter_mut().zip(self.traction[k][fi].iter()) {
                        *vd += *d * *gd;
                    }
                }
                s += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() * f.area;
            }
            best = best.max(s);
        }
        best
    }
}

fn check_nodes<T: Real>(grid: &Grid<T>, y: &[[T; 3]]) -> Result<()> {
    if y.len() != grid.n_nodes() {
        return Err(Error::SizeMismatch {
            expected: grid.n_nodes(),
            got: y.len(),
        });
    }
    Ok(())
}
