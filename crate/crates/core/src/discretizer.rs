//! Spatial discretization of court and defender positions.
//!
//! Court cells index the ball-handler's position on a rows x cols grid laid
//! over the half court (rows run from the baseline towards half court, cols
//! run across the width). Defender cells index positions on an egocentric grid
//! centred on the ball-handler and rotated so that the basket direction points
//! along the grid's frontal (row-increasing) axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rows x cols grid resolution. Serialized as `"RxC"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GridRes {
    pub rows: usize,
    pub cols: usize,
}

impl GridRes {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn cells(&self) -> usize {
        self.rows * self.cols
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Shape(format!("resolution {self} has an empty axis")));
        }
        Ok(())
    }
}

impl fmt::Display for GridRes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridRes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::invalid(format!("resolution `{s}` is not of the form RxC")))?;
        let rows = r
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad row count in `{s}`")))?;
        let cols = c
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad column count in `{s}`")))?;
        let res = GridRes { rows, cols };
        res.validate()?;
        Ok(res)
    }
}

impl TryFrom<String> for GridRes {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridRes> for String {
    fn from(r: GridRes) -> String {
        r.to_string()
    }
}

/// Court grids used by the default schedule, coarse to fine.
pub const COURT_RESOLUTIONS: [GridRes; 4] = [
    GridRes::new(4, 5),
    GridRes::new(8, 10),
    GridRes::new(20, 25),
    GridRes::new(40, 50),
];

/// Defender grids used by the default schedule, coarse to fine.
pub const DEFENDER_RESOLUTIONS: [GridRes; 2] = [GridRes::new(6, 6), GridRes::new(12, 12)];

/// A (court, defender) resolution pair. Serialized as `"COURT/DEFENDER"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ResolutionPair {
    pub court: GridRes,
    pub defender: GridRes,
}

impl ResolutionPair {
    pub fn new(court: GridRes, defender: GridRes) -> Result<Self> {
        court.validate()?;
        defender.validate()?;
        Ok(Self { court, defender })
    }
}

impl fmt::Display for ResolutionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.court, self.defender)
    }
}

impl FromStr for ResolutionPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, d) = s
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("resolution pair `{s}` is not COURT/DEFENDER")))?;
        ResolutionPair::new(c.parse()?, d.parse()?)
    }
}

impl TryFrom<String> for ResolutionPair {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ResolutionPair> for String {
    fn from(p: ResolutionPair) -> String {
        p.to_string()
    }
}

/// Physical extent of the half court in feet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CourtGeometry {
    /// Baseline to half court.
    pub depth_ft: f64,
    /// Sideline to sideline.
    pub width_ft: f64,
}

impl Default for CourtGeometry {
    fn default() -> Self {
        Self {
            depth_ft: 47.0,
            width_ft: 50.0,
        }
    }
}

impl CourtGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_ft > 0.0 && self.width_ft > 0.0)
            || !self.depth_ft.is_finite()
            || !self.width_ft.is_finite()
        {
            return Err(Error::invalid(format!(
                "court extent must be positive, got {} x {}",
                self.depth_ft, self.width_ft
            )));
        }
        Ok(())
    }
}

/// Egocentric defender grid.
///
/// The ball-handler sits on the lower-left corner of the anchor cell, so an
/// offset of zero bins into the anchor and grids whose cell sizes differ by an
/// integer factor nest exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenderGridSpec {
    pub resolution: GridRes,
    /// (col, row) of the ball-handler cell.
    pub anchor: (usize, usize),
    /// (frontal, lateral) physical span in feet.
    pub extent_ft: (f64, f64),
}

/// Anchor of the full-resolution defender grid, as (col, row) at 12x12.
const REFERENCE_ANCHOR: (usize, usize) = (6, 2);
const REFERENCE_RES: GridRes = GridRes::new(12, 12);

impl DefenderGridSpec {
    /// Grid with the default 24 ft x 24 ft extent and the anchor scaled from
    /// (6, 2) at 12x12 by integer division.
    pub fn for_resolution(resolution: GridRes) -> Self {
        Self::with_extent(resolution, (24.0, 24.0))
    }

    pub fn with_extent(resolution: GridRes, extent_ft: (f64, f64)) -> Self {
        let anchor = (
            REFERENCE_ANCHOR.0 * resolution.cols / REFERENCE_RES.cols,
            REFERENCE_ANCHOR.1 * resolution.rows / REFERENCE_RES.rows,
        );
        Self {
            resolution,
            anchor,
            extent_ft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        if self.anchor.0 >= self.resolution.cols || self.anchor.1 >= self.resolution.rows {
            return Err(Error::invalid(format!(
                "anchor {:?} outside defender grid {}",
                self.anchor, self.resolution
            )));
        }
        let (f, l) = self.extent_ft;
        if !(f > 0.0 && l > 0.0 && f.is_finite() && l.is_finite()) {
            return Err(Error::invalid(format!("defender extent must be positive, got {f} x {l}")));
        }
        Ok(())
    }

    fn cell_size(&self) -> (f64, f64) {
        (
            self.extent_ft.0 / self.resolution.rows as f64,
            self.extent_ft.1 / self.resolution.cols as f64,
        )
    }
}

fn check_finite(p: (f64, f64), what: &str) -> Result<()> {
    if p.0.is_finite() && p.1.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has a non-finite coordinate: {p:?}")))
    }
}

fn bin(v: f64, extent: f64, n: usize) -> usize {
    let clamped = v.clamp(0.0, extent);
    ((clamped / extent * n as f64).floor() as usize).min(n - 1)
}

/// Court cell of a position `(x, y)` in feet, `x` across the width and `y`
/// from the baseline. Out-of-bounds positions clamp to the boundary.
pub fn court_cell(pos: (f64, f64), geometry: &CourtGeometry, res: GridRes) -> Result<usize> {
    check_finite(pos, "court position")?;
    res.validate()?;
    let row = bin(pos.1, geometry.depth_ft, res.rows);
    let col = bin(pos.0, geometry.width_ft, res.cols);
    Ok(row * res.cols + col)
}

/// Offset of `defender` relative to `bh` in the basket-aligned frame, as
/// `(frontal, lateral)`. Frontal points from the ball-handler to the basket;
/// lateral points to the ball-handler's right when facing the basket.
pub fn oriented_offset(
    bh: (f64, f64),
    basket: (f64, f64),
    defender: (f64, f64),
) -> Result<(f64, f64)> {
    check_finite(bh, "ball-handler position")?;
    check_finite(basket, "basket position")?;
    check_finite(defender, "defender position")?;
    let (ux, uy) = (basket.0 - bh.0, basket.1 - bh.1);
    let norm = ux.hypot(uy);
    if norm == 0.0 {
        return Err(Error::invalid(
            "ball-handler stands on the basket; defender orientation is undefined",
        ));
    }
    let (ux, uy) = (ux / norm, uy / norm);
    let (ox, oy) = (defender.0 - bh.0, defender.1 - bh.1);
    let mut frontal = ox * ux + oy * uy;
    let mut lateral = ox * uy - oy * ux;
    // Round-off must not push on-axis defenders across a cell boundary.
    let scale = 1e-9 * ox.hypot(oy).max(1.0);
    if lateral.abs() < scale {
        lateral = 0.0;
    }
    if frontal.abs() < scale {
        frontal = 0.0;
    }
    Ok((frontal, lateral))
}

/// Cell of an oriented offset on the defender grid, or `None` when it falls
/// outside the grid.
pub fn offset_cell(offset: (f64, f64), spec: &DefenderGridSpec) -> Option<usize> {
    let (cell_h, cell_w) = spec.cell_size();
    let row = spec.anchor.1 as f64 + (offset.0 / cell_h).floor();
    let col = spec.anchor.0 as f64 + (offset.1 / cell_w).floor();
    let res = spec.resolution;
    if row < 0.0 || col < 0.0 || row >= res.rows as f64 || col >= res.cols as f64 {
        return None;
    }
    Some(row as usize * res.cols + col as usize)
}

/// Distinct defender cells occupied around the ball-handler, sorted.
pub fn defender_cells(
    bh: (f64, f64),
    basket: (f64, f64),
    defenders: &[(f64, f64)],
    spec: &DefenderGridSpec,
) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(defenders.len());
    for &d in defenders {
        let off = oriented_offset(bh, basket, d)?;
        if let Some(c) = offset_cell(off, spec) {
            cells.push(c);
        }
    }
    cells.sort_unstable();
    cells.dedup();
    Ok(cells)
}

/// Index of court cell `d1` on the `f`-th of `contexts` side-by-side courts.
pub fn extend_cell(d1: usize, f: usize, res: GridRes, contexts: usize) -> Result<usize> {
    let n = res.cells();
    if d1 >= n {
        return Err(Error::OutOfRange(format!("court cell {d1} >= {n}")));
    }
    if f >= contexts {
        return Err(Error::OutOfRange(format!("context {f} >= {contexts}")));
    }
    Ok(d1 + f * n)
}

/// Inverse of [`extend_cell`]: `(d1, f)`.
pub fn decode_extended(x: usize, res: GridRes, contexts: usize) -> Result<(usize, usize)> {
    let n = res.cells();
    if n == 0 || x >= n * contexts {
        return Err(Error::OutOfRange(format!(
            "extended cell {x} >= {}",
            n * contexts
        )));
    }
    Ok((x % n, x / n))
}

/// Coarse-to-fine cell correspondence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinegrainMap {
    pub coarse: GridRes,
    pub fine: GridRes,
    /// Parent coarse cell of every fine cell.
    pub parent: Vec<usize>,
    /// Fine cells covered by every coarse cell, ascending.
    pub children: Vec<Vec<usize>>,
}

impl FinegrainMap {
    pub fn is_identity(&self) -> bool {
        self.coarse == self.fine
    }

    /// The same map applied independently to `blocks` side-by-side copies of
    /// both grids.
    pub fn repeated(&self, blocks: usize) -> FinegrainMap {
        let nc = self.coarse.cells();
        let nf = self.fine.cells();
        let mut parent = Vec::with_capacity(nf * blocks);
        let mut children = vec![Vec::new(); nc * blocks];
        for b in 0..blocks {
            for (child, &p) in self.parent.iter().enumerate() {
                parent.push(p + b * nc);
                children[p + b * nc].push(child + b * nf);
            }
        }
        FinegrainMap {
            coarse: GridRes::new(self.coarse.rows * blocks, self.coarse.cols),
            fine: GridRes::new(self.fine.rows * blocks, self.fine.cols),
            parent,
            children,
        }
    }
}

/// Assigns every fine cell to the coarse cell containing its centre. For
/// grids that divide evenly this is the usual nested refinement.
pub fn finegrain_map(coarse: GridRes, fine: GridRes) -> Result<FinegrainMap> {
    coarse.validate()?;
    fine.validate()?;
    if fine.rows < coarse.rows || fine.cols < coarse.cols {
        return Err(Error::Shape(format!(
            "cannot finegrain {coarse} into the coarser {fine}"
        )));
    }
    // Centre of fine index r is (2r + 1) / (2 * fine); containment is exact in
    // integer arithmetic.
    let parent_axis = |r: usize, nf: usize, nc: usize| (2 * r + 1) * nc / (2 * nf);
    let mut parent = Vec::with_capacity(fine.cells());
    let mut children = vec![Vec::new(); coarse.cells()];
    for r in 0..fine.rows {
        let pr = parent_axis(r, fine.rows, coarse.rows);
        for c in 0..fine.cols {
            let pc = parent_axis(c, fine.cols, coarse.cols);
            let p = pr * coarse.cols + pc;
            children[p].push(r * fine.cols + c);
            parent.push(p);
        }
    }
    Ok(FinegrainMap {
        coarse,
        fine,
        parent,
        children,
    })
}

/// Maps fine defender cells onto their coarse parents, keeping multiplicity.
/// A coarse cell covering several occupied fine cells appears once per fine
/// cell, which makes copy-finegraining preserve logits exactly.
pub fn pool_cells(fine_cells: &[usize], map: &FinegrainMap) -> Vec<usize> {
    let mut out: Vec<usize> = fine_cells.iter().map(|&c| map.parent[c]).collect();
    out.sort_unstable();
    out
}
