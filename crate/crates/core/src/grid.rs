//! Raster grids, least-cost travel time over a friction surface,
//! treatment-seeking proportions, and facility catchment weights.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::prelude::*;
use thiserror::Error;

/// Grid cell as `(row, col)`.
pub type Cell = (usize, usize);

/// Travel-time cutoff in minutes beyond which a facility attracts nobody.
pub const CATCHMENT_CUTOFF_MINUTES: f64 = 200.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("facility at {0:?} lies on a masked cell")]
    FacilityOnMasked(Cell),
    #[error("cell {0:?} outside a {1}x{2} grid")]
    OutOfBounds(Cell, usize, usize),
    #[error("rasters disagree in shape: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("friction must be strictly positive on active cells; found {0} at {1:?}")]
    NonPositiveFriction(f64, Cell),
    #[error("invalid treatment-seeking parameters: {0}")]
    InvalidParams(String),
    #[error("attractiveness must be positive; w[{0}] = {1}")]
    NonPositiveAttractiveness(usize, f64),
    #[error("raster io: {0}")]
    Io(#[from] std::io::Error),
    #[error("raster parse: {0}")]
    Parse(String),
}

/// A rectangular grid of values with an activity mask. Inactive (masked)
/// cells take no part in any computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    values: Array2<f64>,
    mask: Array2<bool>,
    cell_size: f64,
}

impl Raster {
    pub fn new(values: Array2<f64>, mask: Array2<bool>, cell_size: f64) -> Self {
        assert_eq!(values.dim(), mask.dim(), "values and mask must align");
        assert!(cell_size > 0.0, "cell size must be positive");
        Self {
            values,
            mask,
            cell_size,
        }
    }

    /// All-active raster with a constant value.
    pub fn constant(n_rows: usize, n_cols: usize, value: f64, cell_size: f64) -> Self {
        Self::new(
            Array2::from_elem((n_rows, n_cols), value),
            Array2::from_elem((n_rows, n_cols), true),
            cell_size,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn is_active(&self, cell: Cell) -> bool {
        self.mask[cell]
    }

    pub fn get(&self, cell: Cell) -> f64 {
        self.values[cell]
    }

    pub fn set(&mut self, cell: Cell, v: f64) {
        self.values[cell] = v;
    }

    /// Linear index of a cell (row major).
    pub fn linear(&self, cell: Cell) -> usize {
        cell.0 * self.n_cols() + cell.1
    }

    pub fn cell_of(&self, linear: usize) -> Cell {
        (linear / self.n_cols(), linear % self.n_cols())
    }

    /// Active cells in row-major order.
    pub fn active_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..self.n_rows() {
            for c in 0..self.n_cols() {
                if self.mask[(r, c)] {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Cell-center coordinates in length units, `(x, y) = (col, row) * cell_size`.
    pub fn coords(&self, cell: Cell) -> [f64; 2] {
        [
            cell.1 as f64 * self.cell_size,
            cell.0 as f64 * self.cell_size,
        ]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.values.dim() == other.values.dim()
    }

    /// Check that all active values are finite.
    pub fn validate_finite(&self) -> Result<(), GridError> {
        for r in 0..self.n_rows() {
            for c in 0..self.n_cols() {
                if self.mask[(r, c)] && !self.values[(r, c)].is_finite() {
                    return Err(GridError::Parse(format!(
                        "non-finite value at active cell ({r}, {c})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Write in the plain-text grid format: a header of `nrows`, `ncols`,
    /// `cellsize`, `nodata`, then row-major whitespace-separated values.
    /// Masked cells are written as the nodata value.
    pub fn write_ascii<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        const NODATA: f64 = -9999.0;
        writeln!(w, "nrows {}", self.n_rows())?;
        writeln!(w, "ncols {}", self.n_cols())?;
        writeln!(w, "cellsize {}", self.cell_size)?;
        writeln!(w, "nodata {}", NODATA)?;
        for r in 0..self.n_rows() {
            let mut line = String::new();
            for c in 0..self.n_cols() {
                if c > 0 {
                    line.push(' ');
                }
                if self.mask[(r, c)] {
                    line.push_str(&format!("{}", self.values[(r, c)]));
                } else {
                    line.push_str(&format!("{}", NODATA));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn write_ascii_file<P: AsRef<Path>>(&self, path: P) -> Result<(), GridError> {
        let f = std::fs::File::create(path)?;
        self.write_ascii(std::io::BufWriter::new(f))
    }

    /// Read the plain-text grid format. Header keys are case-insensitive;
    /// the ESRI spellings (`NODATA_value`, `xllcorner`, `yllcorner`) are
    /// accepted, the two corner entries being ignored.
    pub fn read_ascii<R: BufRead>(r: R) -> Result<Self, GridError> {
        let mut n_rows = None;
        let mut n_cols = None;
        let mut cell_size = 1.0;
        let mut nodata = -9999.0;
        let mut numbers: Vec<f64> = Vec::new();

        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let first = parts.next().unwrap();
            if first.chars().next().map(char::is_alphabetic).unwrap_or(false) {
                let key = first.to_ascii_lowercase();
                let val = parts
                    .next()
                    .ok_or_else(|| GridError::Parse(format!("header `{key}` missing value")))?;
                match key.as_str() {
                    "nrows" => n_rows = Some(parse_usize(val)?),
                    "ncols" => n_cols = Some(parse_usize(val)?),
                    "cellsize" => cell_size = parse_f64(val)?,
                    "nodata" | "nodata_value" => nodata = parse_f64(val)?,
                    "xllcorner" | "yllcorner" => {}
                    other => {
                        return Err(GridError::Parse(format!("unknown header key `{other}`")))
                    }
                }
            } else {
                numbers.push(parse_f64(first)?);
                for p in parts {
                    numbers.push(parse_f64(p)?);
                }
            }
        }

        let (nr, nc) = match (n_rows, n_cols) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(GridError::Parse("missing nrows/ncols header".into())),
        };
        if numbers.len() != nr * nc {
            return Err(GridError::Parse(format!(
                "expected {} values, found {}",
                nr * nc,
                numbers.len()
            )));
        }
        let values = Array2::from_shape_vec((nr, nc), numbers).unwrap();
        let mask = values.mapv(|v| v != nodata);
        let values = values.mapv(|v| if v == nodata { f64::NAN } else { v });
        Ok(Self::new(values, mask, cell_size))
    }

    pub fn read_ascii_file<P: AsRef<Path>>(path: P) -> Result<Self, GridError> {
        let f = std::fs::File::open(path)?;
        Self::read_ascii(std::io::BufReader::new(f))
    }
}

fn parse_usize(s: &str) -> Result<usize, GridError> {
    s.parse()
        .map_err(|_| GridError::Parse(format!("bad integer `{s}`")))
}

fn parse_f64(s: &str) -> Result<f64, GridError> {
    s.parse()
        .map_err(|_| GridError::Parse(format!("bad number `{s}`")))
}

/// A raster whose value is traversal time per unit length through a cell
/// (minutes per length unit). Strictly positive on active cells; `+inf`
/// marks an impassable cell.
#[derive(Debug, Clone)]
pub struct FrictionSurface(Raster);

impl FrictionSurface {
    pub fn new(raster: Raster) -> Result<Self, GridError> {
        for r in 0..raster.n_rows() {
            for c in 0..raster.n_cols() {
                if raster.is_active((r, c)) {
                    let v = raster.get((r, c));
                    if !(v > 0.0) {
                        return Err(GridError::NonPositiveFriction(v, (r, c)));
                    }
                }
            }
        }
        Ok(Self(raster))
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }
}

/// Logistic-decay treatment-seeking curve parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreatmentSeekingParams {
    pub alpha: f64,
    /// Decay rate per minute of travel time.
    pub sigma: f64,
    pub beta: f64,
}

impl TreatmentSeekingParams {
    pub fn new(alpha: f64, sigma: f64, beta: f64) -> Result<Self, GridError> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0) {
            return Err(GridError::InvalidParams(format!(
                "need alpha >= 0, beta >= 0, alpha + beta <= 1; got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self { alpha, sigma, beta })
    }

    /// The reference parameterisation: maximum 0.6, minimum 0.15, and
    /// proportion 0.3 at 120 minutes.
    pub fn reference() -> Self {
        Self {
            alpha: 0.6,
            sigma: 0.00916,
            beta: 0.15,
        }
    }
}

/// Proportion of people at travel time `t` (minutes) who seek treatment:
/// `alpha / (1 + exp(sigma t)) + beta`. Non-increasing in `t`, ranging from
/// `alpha/2 + beta` at `t = 0` down to `beta`.
pub fn treatment_seeking_proportion(t: f64, params: &TreatmentSeekingParams) -> f64 {
    debug_assert!(t >= 0.0, "travel time must be non-negative");
    params.alpha / (1.0 + (params.sigma * t).exp()) + params.beta
}

/// 8-neighbour offsets with unit-distance multipliers.
const NEIGHBORS: [(isize, isize, f64); 8] = [
    (-1, -1, std::f64::consts::SQRT_2),
    (-1, 0, 1.0),
    (-1, 1, std::f64::consts::SQRT_2),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (1, -1, std::f64::consts::SQRT_2),
    (1, 0, 1.0),
    (1, 1, std::f64::consts::SQRT_2),
];

#[derive(PartialEq)]
struct HeapState {
    cost: f64,
    cell: Cell,
}

impl Eq for HeapState {}

impl PartialOrd for HeapState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapState {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for a min-heap; cell index breaks cost ties
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

/// Minimal cumulative travel time (minutes) from `facility_cell` to every
/// cell, via Dijkstra on the 8-connected grid graph. The cost of an edge is
/// the mean of the two cells' friction times the Euclidean distance between
/// cell centers (`sqrt(2) * cell_size` on diagonals). Masked cells are
/// unreachable and get `+inf`, as do active cells cut off by impassable
/// friction.
pub fn travel_time(friction: &FrictionSurface, facility_cell: Cell) -> Result<Raster, GridError> {
    let f = friction.raster();
    let (nr, nc) = (f.n_rows(), f.n_cols());
    if facility_cell.0 >= nr || facility_cell.1 >= nc {
        return Err(GridError::OutOfBounds(facility_cell, nr, nc));
    }
    if !f.is_active(facility_cell) {
        return Err(GridError::FacilityOnMasked(facility_cell));
    }

    let mut time = Array2::from_elem((nr, nc), f64::INFINITY);
    let mut heap = BinaryHeap::new();
    time[facility_cell] = 0.0;
    heap.push(HeapState {
        cost: 0.0,
        cell: facility_cell,
    });

    while let Some(HeapState { cost, cell }) = heap.pop() {
        if cost > time[cell] {
            continue;
        }
        let f_here = f.get(cell);
        for &(dr, dc, mult) in &NEIGHBORS {
            let nr_i = cell.0 as isize + dr;
            let nc_i = cell.1 as isize + dc;
            if nr_i < 0 || nc_i < 0 || nr_i as usize >= nr || nc_i as usize >= nc {
                continue;
            }
            let nbr = (nr_i as usize, nc_i as usize);
            if !f.is_active(nbr) {
                continue;
            }
            let edge = 0.5 * (f_here + f.get(nbr)) * mult * f.cell_size();
            if !edge.is_finite() {
                continue; // impassable
            }
            let next = cost + edge;
            if next < time[nbr] {
                time[nbr] = next;
                heap.push(HeapState {
                    cost: next,
                    cell: nbr,
                });
            }
        }
    }

    Ok(Raster::new(time, f.mask().clone(), f.cell_size()))
}

/// Per-(pixel, facility) attribution: travel times, facility attractiveness,
/// and the normalized probability that a treatment seeker in a pixel attends
/// each facility.
#[derive(Debug, Clone)]
pub struct CatchmentWeights {
    /// `n_pixels x n_facilities` travel times in minutes (row-major pixels).
    pub travel_time: Array2<f64>,
    /// Per-facility attractiveness, `w_j > 0`.
    pub attractiveness: Vec<f64>,
    /// `n_pixels x n_facilities` probabilities; rows sum to 1 for covered
    /// pixels and are all-zero for uncovered ones.
    pub p: Array2<f64>,
    /// Pixels with no facility within the cutoff.
    pub uncovered: Vec<bool>,
    pub cutoff: f64,
}

impl CatchmentWeights {
    pub fn n_pixels(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_facilities(&self) -> usize {
        self.p.ncols()
    }

    /// Sparse view: for each facility, the pixels with positive probability.
    pub fn nonzero_by_facility(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n_facilities()];
        for (i, row) in self.p.rows().into_iter().enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                if pij > 0.0 {
                    out[j].push((i, pij));
                }
            }
        }
        out
    }
}

/// Build catchment weights from per-facility travel-time fields.
///
/// Unnormalized weight `t^{-2} w_j` within the cutoff, zero beyond it, then
/// normalized per pixel. A pixel co-located with one or more facilities
/// (t = 0) is split equally among its zero-time facilities. Pixels with no
/// facility within the cutoff get an all-zero row and an `uncovered` flag.
pub fn catchment_weights(
    travel_times: &Array2<f64>,
    attractiveness: &[f64],
    cutoff: f64,
) -> Result<CatchmentWeights, GridError> {
    let (n_pix, n_fac) = travel_times.dim();
    assert_eq!(attractiveness.len(), n_fac, "one weight per facility");
    assert!(cutoff > 0.0);
    for (j, &w) in attractiveness.iter().enumerate() {
        if !(w > 0.0) {
            return Err(GridError::NonPositiveAttractiveness(j, w));
        }
    }

    let mut p = Array2::zeros((n_pix, n_fac));
    let mut uncovered = vec![false; n_pix];
    for i in 0..n_pix {
        let times = travel_times.row(i);
        let zero_time: Vec<usize> = (0..n_fac).filter(|&j| times[j] == 0.0).collect();
        if !zero_time.is_empty() {
            let share = 1.0 / zero_time.len() as f64;
            for j in zero_time {
                p[(i, j)] = share;
            }
            continue;
        }
        let mut total = 0.0;
        for j in 0..n_fac {
            let t = times[j];
            if t <= cutoff {
                let u = attractiveness[j] / (t * t);
                p[(i, j)] = u;
                total += u;
            }
        }
        if total > 0.0 {
            for j in 0..n_fac {
                p[(i, j)] /= total;
            }
        } else {
            uncovered[i] = true;
        }
    }

    Ok(CatchmentWeights {
        travel_time: travel_times.clone(),
        attractiveness: attractiveness.to_vec(),
        p,
        uncovered,
        cutoff,
    })
}

/// Travel-time fields for several facilities, flattened to the
/// `n_pixels x n_facilities` layout of [`catchment_weights`]. Fields are
/// independent per facility and evaluated in parallel.
pub fn travel_time_matrix(
    friction: &FrictionSurface,
    facilities: &[Cell],
) -> Result<Array2<f64>, GridError> {
    use rayon::prelude::*;
    let fields: Result<Vec<Raster>, GridError> = facilities
        .par_iter()
        .map(|&cell| travel_time(friction, cell))
        .collect();
    let fields = fields?;
    let n_pix = friction.raster().n_rows() * friction.raster().n_cols();
    let mut out = Array2::from_elem((n_pix, facilities.len()), f64::INFINITY);
    for (j, field) in fields.iter().enumerate() {
        for (i, v) in field.values().iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform_friction(nr: usize, nc: usize, f: f64, cs: f64) -> FrictionSurface {
        FrictionSurface::new(Raster::constant(nr, nc, f, cs)).unwrap()
    }

    #[test]
    fn straight_line_travel_time() {
        // uniform friction f on a 1x3 grid: times (0, f*cs, 2 f*cs)
        let f = 2.5;
        let cs = 3.0;
        let fric = uniform_friction(1, 3, f, cs);
        let t = travel_time(&fric, (0, 0)).unwrap();
        assert_abs_diff_eq!(t.get((0, 0)), 0.0);
        assert_abs_diff_eq!(t.get((0, 1)), f * cs, epsilon = 1e-12);
        assert_abs_diff_eq!(t.get((0, 2)), 2.0 * f * cs, epsilon = 1e-12);
    }

    #[test]
    fn facility_cell_is_zero() {
        let fric = uniform_friction(4, 4, 1.0, 1.0);
        let t = travel_time(&fric, (2, 3)).unwrap();
        assert_eq!(t.get((2, 3)), 0.0);
    }

    #[test]
    fn masked_facility_is_an_error() {
        let mut mask = Array2::from_elem((2, 2), true);
        mask[(0, 1)] = false;
        let r = Raster::new(Array2::ones((2, 2)), mask, 1.0);
        let fric = FrictionSurface::new(r).unwrap();
        assert!(matches!(
            travel_time(&fric, (0, 1)),
            Err(GridError::FacilityOnMasked(_))
        ));
    }

    #[test]
    fn infinite_wall_splits_grid() {
        // 3x3 grid, middle column impassable: far side unreachable.
        // Hand-computed shortest paths on the 9-node graph confirm the
        // near side: (0,0)->(1,0) costs 1, (0,0)->(2,0) costs 2 (down the
        // left edge), never through the wall.
        let mut vals = Array2::ones((3, 3));
        for r in 0..3 {
            vals[(r, 1)] = f64::INFINITY;
        }
        let fric = FrictionSurface::new(Raster::new(
            vals,
            Array2::from_elem((3, 3), true),
            1.0,
        ))
        .unwrap();
        let t = travel_time(&fric, (0, 0)).unwrap();
        assert_abs_diff_eq!(t.get((1, 0)), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.get((2, 0)), 2.0, epsilon = 1e-12);
        for r in 0..3 {
            assert!(t.get((r, 2)).is_infinite(), "far side must be unreachable");
            assert!(t.get((r, 1)).is_infinite(), "wall cells unreachable");
        }
    }

    #[test]
    fn diagonal_costs_sqrt2() {
        let fric = uniform_friction(2, 2, 1.0, 1.0);
        let t = travel_time(&fric, (0, 0)).unwrap();
        assert_abs_diff_eq!(t.get((1, 1)), std::f64::consts::SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn travel_time_satisfies_triangle_relaxation() {
        // shortest-path fixpoint: no cell exceeds a neighbor's value + edge cost
        use rand::Rng;
        let mut rng = crate::seed::stream_rng(3, "grid-test", 0);
        let vals = Array2::from_shape_fn((12, 14), |_| 0.5 + rng.random::<f64>() * 4.0);
        let fric = FrictionSurface::new(Raster::new(
            vals.clone(),
            Array2::from_elem((12, 14), true),
            2.0,
        ))
        .unwrap();
        let t = travel_time(&fric, (5, 7)).unwrap();
        for r in 0..12usize {
            for c in 0..14usize {
                for &(dr, dc, mult) in &NEIGHBORS {
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    if rr < 0 || cc < 0 || rr >= 12 || cc >= 14 {
                        continue;
                    }
                    let nbr = (rr as usize, cc as usize);
                    let edge = 0.5 * (vals[(r, c)] + vals[nbr]) * mult * 2.0;
                    assert!(
                        t.get((r, c)) <= t.get(nbr) + edge + 1e-9,
                        "triangle violated at ({r},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn treatment_seeking_reference_values() {
        let p = TreatmentSeekingParams::reference();
        // paper-stated: 0.3 at t = 120 minutes
        assert!((treatment_seeking_proportion(120.0, &p) - 0.2999).abs() < 1e-3);
        // alpha/2 + beta at t = 0
        assert_abs_diff_eq!(treatment_seeking_proportion(0.0, &p), 0.45, epsilon = 1e-12);
        // beta in the limit
        assert_abs_diff_eq!(
            treatment_seeking_proportion(1e9, &p),
            0.15,
            epsilon = 1e-9
        );
    }

    #[test]
    fn treatment_seeking_stays_in_range_and_decreases() {
        let p = TreatmentSeekingParams::reference();
        let mut last = f64::INFINITY;
        for k in 0..400 {
            let t = k as f64 * 5.0;
            let v = treatment_seeking_proportion(t, &p);
            assert!(v >= p.beta - 1e-12 && v <= p.alpha / 2.0 + p.beta + 1e-12);
            assert!(v <= last + 1e-12, "must be non-increasing");
            last = v;
        }
    }

    #[test]
    fn params_validation() {
        assert!(TreatmentSeekingParams::new(0.8, 0.01, 0.3).is_err());
        assert!(TreatmentSeekingParams::new(-0.1, 0.01, 0.3).is_err());
        assert!(TreatmentSeekingParams::new(0.6, 0.01, 0.15).is_ok());
    }

    #[test]
    fn single_facility_takes_whole_pixel() {
        let tt = arr2(&[[50.0]]);
        let cw = catchment_weights(&tt, &[1.0], CATCHMENT_CUTOFF_MINUTES).unwrap();
        assert_abs_diff_eq!(cw.p[(0, 0)], 1.0);
        assert!(!cw.uncovered[0]);
    }

    #[test]
    fn inverse_square_ratio() {
        // equal attractiveness, times 100 and 200 -> (4/5, 1/5)
        let tt = arr2(&[[100.0, 200.0]]);
        let cw = catchment_weights(&tt, &[1.0, 1.0], CATCHMENT_CUTOFF_MINUTES).unwrap();
        assert_abs_diff_eq!(cw.p[(0, 0)], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(cw.p[(0, 1)], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn cutoff_excludes_distant_facility() {
        // times 100 and 250 with cutoff 200 -> (1, 0)
        let tt = arr2(&[[100.0, 250.0]]);
        let cw = catchment_weights(&tt, &[1.0, 1.0], CATCHMENT_CUTOFF_MINUTES).unwrap();
        assert_abs_diff_eq!(cw.p[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cw.p[(0, 1)], 0.0);
    }

    #[test]
    fn zero_travel_time_takes_all() {
        let tt = arr2(&[[0.0, 10.0]]);
        let cw = catchment_weights(&tt, &[1.0, 5.0], CATCHMENT_CUTOFF_MINUTES).unwrap();
        assert_abs_diff_eq!(cw.p[(0, 0)], 1.0);
        assert_abs_diff_eq!(cw.p[(0, 1)], 0.0);
        // ties split equally
        let tt = arr2(&[[0.0, 0.0, 10.0]]);
        let cw = catchment_weights(&tt, &[1.0, 9.0, 1.0], CATCHMENT_CUTOFF_MINUTES).unwrap();
        assert_abs_diff_eq!(cw.p[(0, 0)], 0.5);
        assert_abs_diff_eq!(cw.p[(0, 1)], 0.5);
    }

    #[test]
    fn uncovered_pixels_get_zero_rows() {
        let tt = arr2(&[[300.0, 400.0], [10.0, 20.0]]);
        let cw = catchment_weights(&tt, &[1.0, 1.0], CATCHMENT_CUTOFF_MINUTES).unwrap();
        assert!(cw.uncovered[0]);
        assert!(!cw.uncovered[1]);
        assert_eq!(cw.p.row(0).sum(), 0.0);
        assert_abs_diff_eq!(cw.p.row(1).sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn attractiveness_scale_invariance() {
        use rand::Rng;
        let mut rng = crate::seed::stream_rng(5, "grid-test", 1);
        let tt = Array2::from_shape_fn((30, 4), |_| 20.0 + rng.random::<f64>() * 300.0);
        let w: Vec<f64> = (0..4).map(|_| 0.5 + rng.random::<f64>()).collect();
        let doubled: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let a = catchment_weights(&tt, &w, CATCHMENT_CUTOFF_MINUTES).unwrap();
        let b = catchment_weights(&tt, &doubled, CATCHMENT_CUTOFF_MINUTES).unwrap();
        for (x, y) in a.p.iter().zip(b.p.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one_within_tolerance() {
        use rand::Rng;
        let mut rng = crate::seed::stream_rng(5, "grid-test", 2);
        let tt = Array2::from_shape_fn((100, 6), |_| 1.0 + rng.random::<f64>() * 400.0);
        let w: Vec<f64> = (0..6).map(|_| 0.25 + rng.random::<f64>() * 2.0).collect();
        let cw = catchment_weights(&tt, &w, CATCHMENT_CUTOFF_MINUTES).unwrap();
        for (i, row) in cw.p.rows().into_iter().enumerate() {
            let s = row.sum();
            if cw.uncovered[i] {
                assert_eq!(s, 0.0);
            } else {
                assert!((s - 1.0).abs() <= 1e-9, "row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn ascii_grid_roundtrip() {
        let mut vals = arr2(&[[1.0, 2.5], [3.25, -4.0]]);
        vals[(1, 1)] = -4.0;
        let mut mask = Array2::from_elem((2, 2), true);
        mask[(0, 1)] = false;
        let r = Raster::new(vals, mask, 0.5);
        let mut buf = Vec::new();
        r.write_ascii(&mut buf).unwrap();
        let back = Raster::read_ascii(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.n_rows(), 2);
        assert_eq!(back.n_cols(), 2);
        assert_abs_diff_eq!(back.cell_size(), 0.5);
        assert_eq!(back.mask(), r.mask());
        assert_abs_diff_eq!(back.get((0, 0)), 1.0);
        assert_abs_diff_eq!(back.get((1, 0)), 3.25);
        assert_abs_diff_eq!(back.get((1, 1)), -4.0);
    }

    #[test]
    fn esri_header_variant_is_accepted() {
        let text = "ncols 2\nnrows 1\nxllcorner 0.0\nyllcorner 0.0\ncellsize 1.0\nNODATA_value -1\n3 -1\n";
        let r = Raster::read_ascii(std::io::Cursor::new(text)).unwrap();
        assert_eq!(r.n_rows(), 1);
        assert!(r.is_active((0, 0)));
        assert!(!r.is_active((0, 1)));
    }
}
