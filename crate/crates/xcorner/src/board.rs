//! Checkerboard structure recovery from refined candidates: local
//! edge-orientation analysis seeds a 2×2 or 3×3 indexing matrix, region
//! growth extends it border by border, and 2-wide grids merge with
//! boundary-seeded matrices whose mean edge length stays within 0.8–1.2 of
//! the grid's. Occluded or missing corners simply stay absent.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::candidates::Candidate;
use crate::error::Result;
use crate::grid::ValueGrid;

/// Histogram bins over [0°, 180°).
const ORIENT_BINS: usize = 32;
/// Peak prominence relative to the histogram maximum.
const ORIENT_PROMINENCE: f64 = 0.3;
/// Angular tolerance when searching adjacent corners along an orientation.
const ANGLE_TOL_DEG: f64 = 15.0;
/// Distance gate for adjacency, relative to the median nearest-neighbor
/// distance of the candidate set.
const DIST_GATE: (f64, f64) = (0.3, 3.0);
/// Acceptance radius for grown corners, relative to the mean edge length.
const GROW_RADIUS: f64 = 0.3;
/// Mean-edge ratio window for merging boundary-seeded matrices.
const MERGE_RATIO: (f64, f64) = (0.8, 1.2);

/// Modulo-180° edge directions found around a corner, sorted ascending,
/// with their histogram peak heights.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet {
    pub angles: Vec<f64>,
    pub strengths: Vec<f64>,
}

impl OrientationSet {
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

/// Gradient-direction histogram over the 20×20 neighborhood of `corner`:
/// magnitude-weighted, folded to [0°, 180°), 32 bins, circularly smoothed
/// with a 1-2-1 kernel. Local maxima at or above 0.3× the global maximum
/// are returned as edge directions (gradient normal + 90°).
pub fn edge_orientations(image: &ValueGrid, corner: (f64, f64)) -> OrientationSet {
    let empty = OrientationSet { angles: Vec::new(), strengths: Vec::new() };
    let (h, w) = (image.height(), image.width());
    let cx = corner.0.round() as i64;
    let cy = corner.1.round() as i64;
    // 20×20 window plus the 1-px ring for central differences
    if cx - 11 < 0 || cy - 11 < 0 || cx + 10 >= w as i64 || cy + 10 >= h as i64 {
        return empty;
    }
    let mut hist = [0.0f64; ORIENT_BINS];
    let mut energy = 0.0;
    for py in cy - 10..=cy + 9 {
        for px in cx - 10..=cx + 9 {
            let (ux, uy) = (px as usize, py as usize);
            let gx = (image.at(0, uy, ux + 1) - image.at(0, uy, ux - 1)) / 2.0;
            let gy = (image.at(0, uy + 1, ux) - image.at(0, uy - 1, ux)) / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            energy += mag;
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let bin = ((angle / 180.0 * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
            hist[bin] += mag;
        }
    }
    if energy < 1e-9 {
        return empty;
    }
    let mut smooth = [0.0f64; ORIENT_BINS];
    for i in 0..ORIENT_BINS {
        let prev = hist[(i + ORIENT_BINS - 1) % ORIENT_BINS];
        let next = hist[(i + 1) % ORIENT_BINS];
        smooth[i] = (prev + 2.0 * hist[i] + next) / 4.0;
    }
    let max = smooth.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return empty;
    }
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 0..ORIENT_BINS {
        let prev = smooth[(i + ORIENT_BINS - 1) % ORIENT_BINS];
        let next = smooth[(i + 1) % ORIENT_BINS];
        if smooth[i] > prev && smooth[i] > next && smooth[i] >= ORIENT_PROMINENCE * max {
            let gradient_angle = (i as f64 + 0.5) * 180.0 / ORIENT_BINS as f64;
            let edge_angle = (gradient_angle + 90.0).rem_euclid(180.0);
            peaks.push((edge_angle, smooth[i]));
        }
    }
    peaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    OrientationSet {
        angles: peaks.iter().map(|p| p.0).collect(),
        strengths: peaks.iter().map(|p| p.1).collect(),
    }
}

/// A rows×cols indexing matrix of candidate references representing a
/// recovered (possibly partial) checkerboard. Absent cells mark occluded or
/// missing corners.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerGrid {
    rows: usize,
    cols: usize,
    cells: Vec<Option<usize>>,
    mean_edge_px: f64,
}

impl CornerGrid {
    fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![None; rows * cols], mean_edge_px: 0.0 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mean_edge_px(&self) -> f64 {
        self.mean_edge_px
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<usize> {
        self.cells[row * self.cols + col]
    }

    fn set(&mut self, row: usize, col: usize, idx: usize) {
        self.cells[row * self.cols + col] = Some(idx);
    }

    pub fn present_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Candidate indices referenced by the grid.
    pub fn candidate_indices(&self) -> Vec<usize> {
        self.cells.iter().flatten().copied().collect()
    }

    /// Mean distance between grid-adjacent present corners.
    pub fn compute_mean_edge(&self, candidates: &[Candidate]) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut edge = |a: Option<usize>, b: Option<usize>| {
            if let (Some(i), Some(j)) = (a, b) {
                let (ax, ay) = candidates[i].position();
                let (bx, by) = candidates[j].position();
                sum += (ax - bx).hypot(ay - by);
                count += 1;
            }
        };
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c + 1 < self.cols {
                    edge(self.cell(r, c), self.cell(r, c + 1));
                }
                if r + 1 < self.rows {
                    edge(self.cell(r, c), self.cell(r + 1, c));
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    fn refresh_mean_edge(&mut self, candidates: &[Candidate]) {
        self.mean_edge_px = self.compute_mean_edge(candidates);
    }

    /// Check structural invariants: unique candidate references, convex and
    /// consistently wound 2×2 blocks, and adjacent spacings within
    /// [0.5, 2.0] of the mean edge length.
    pub fn validate(&self, candidates: &[Candidate]) -> Result<()> {
        use crate::error::Error;
        let mut seen = std::collections::HashSet::new();
        for idx in self.candidate_indices() {
            if !seen.insert(idx) {
                return Err(Error::Parameter(format!("candidate {idx} referenced twice")));
            }
        }
        let mut winding = 0.0f64;
        for r in 0..self.rows.saturating_sub(1) {
            for c in 0..self.cols.saturating_sub(1) {
                let quad = [
                    self.cell(r, c),
                    self.cell(r, c + 1),
                    self.cell(r + 1, c + 1),
                    self.cell(r + 1, c),
                ];
                let Some(quad): Option<Vec<usize>> = quad.into_iter().collect() else {
                    continue;
                };
                let p: Vec<(f64, f64)> =
                    quad.iter().map(|&i| candidates[i].position()).collect();
                for k in 0..4 {
                    let a = p[k];
                    let b = p[(k + 1) % 4];
                    let c2 = p[(k + 2) % 4];
                    let cross = (b.0 - a.0) * (c2.1 - b.1) - (b.1 - a.1) * (c2.0 - b.0);
                    if cross == 0.0 {
                        return Err(Error::Parameter("degenerate 2x2 block".into()));
                    }
                    if winding == 0.0 {
                        winding = cross.signum();
                    } else if cross.signum() != winding {
                        return Err(Error::Parameter(
                            "inconsistent winding in 2x2 block".into(),
                        ));
                    }
                }
            }
        }
        let mean = self.compute_mean_edge(candidates);
        if mean > 0.0 {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let mut check = |other: Option<usize>| -> Result<()> {
                        if let (Some(i), Some(j)) = (self.cell(r, c), other) {
                            let (ax, ay) = candidates[i].position();
                            let (bx, by) = candidates[j].position();
                            let d = (ax - bx).hypot(ay - by);
                            if d < 0.5 * mean || d > 2.0 * mean {
                                return Err(Error::Parameter(format!(
                                    "edge length {d:.2} outside [0.5, 2.0] x mean {mean:.2}"
                                )));
                            }
                        }
                        Ok(())
                    };
                    if c + 1 < self.cols {
                        check(self.cell(r, c + 1))?;
                    }
                    if r + 1 < self.rows {
                        check(self.cell(r + 1, c))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn transposed(&self) -> CornerGrid {
        let mut g = CornerGrid::new(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                g.cells[c * self.rows + r] = self.cell(r, c);
            }
        }
        g.mean_edge_px = self.mean_edge_px;
        g
    }

    fn flipped(&self, flip_rows: bool, flip_cols: bool) -> CornerGrid {
        let mut g = CornerGrid::new(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let rr = if flip_rows { self.rows - 1 - r } else { r };
                let cc = if flip_cols { self.cols - 1 - c } else { c };
                g.cells[r * self.cols + c] = self.cell(rr, cc);
            }
        }
        g.mean_edge_px = self.mean_edge_px;
        g
    }

    fn first_present_position(&self, candidates: &[Candidate]) -> Option<(f64, f64)> {
        self.cells.iter().flatten().next().map(|&i| candidates[i].position())
    }

    /// Canonical orientation: rows ≥ cols (transposing if needed), then the
    /// flip variant whose top-left present corner position is
    /// lexicographically smallest.
    pub fn canonicalize(&mut self, candidates: &[Candidate]) {
        let base = if self.rows < self.cols { self.transposed() } else { self.clone() };
        let mut variants = Vec::new();
        for flip_rows in [false, true] {
            for flip_cols in [false, true] {
                variants.push(base.flipped(flip_rows, flip_cols));
            }
        }
        if base.rows == base.cols {
            let t = base.transposed();
            for flip_rows in [false, true] {
                for flip_cols in [false, true] {
                    variants.push(t.flipped(flip_rows, flip_cols));
                }
            }
        }
        let mut best = 0usize;
        let mut best_key = (f64::INFINITY, f64::INFINITY);
        for (i, v) in variants.iter().enumerate() {
            if let Some((x, y)) = v.first_present_position(candidates) {
                let key = (x, y);
                if key < best_key {
                    best_key = key;
                    best = i;
                }
            }
        }
        *self = variants.swap_remove(best);
    }
}

/// Median nearest-neighbor distance over the available candidates.
fn median_nn_distance(candidates: &[Candidate], available: &[bool]) -> Option<f64> {
    let points: Vec<(f64, f64)> = candidates
        .iter()
        .zip(available)
        .filter(|(_, &a)| a)
        .map(|(c, _)| c.position())
        .collect();
    if points.len() < 2 {
        return None;
    }
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &q)| (p.0 - q.0).hypot(p.1 - q.1))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(nn[nn.len() / 2])
}

/// Nearest available candidate from `from` along `direction_deg`, within
/// ±15° and the given distance gate. Ties break toward the lower index.
fn find_along(
    candidates: &[Candidate],
    available: &[bool],
    from: (f64, f64),
    direction_deg: f64,
    dist_range: (f64, f64),
) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !available[i] {
            continue;
        }
        let (x, y) = c.position();
        let (dx, dy) = (x - from.0, y - from.1);
        let d = dx.hypot(dy);
        if d < dist_range.0 || d > dist_range.1 || d == 0.0 {
            continue;
        }
        let angle = dy.atan2(dx).to_degrees().rem_euclid(360.0);
        let mut diff = (angle - direction_deg).rem_euclid(360.0);
        if diff > 180.0 {
            diff = 360.0 - diff;
        }
        if diff > ANGLE_TOL_DEG {
            continue;
        }
        if best.map(|(bd, bi)| (d, i) < (bd, bi)).unwrap_or(true) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Recovery working state over one candidate set.
struct Recovery<'a> {
    candidates: &'a [Candidate],
    image: &'a ValueGrid,
    /// Candidates not yet claimed by any grid (including the one under
    /// construction).
    available: Vec<bool>,
}

impl<'a> Recovery<'a> {
    fn new(candidates: &'a [Candidate], image: &'a ValueGrid) -> Self {
        Self { candidates, image, available: vec![true; candidates.len()] }
    }

    fn position(&self, idx: usize) -> (f64, f64) {
        self.candidates[idx].position()
    }

    fn take(&mut self, idx: usize) {
        self.available[idx] = false;
    }

    fn release_grid(&mut self, grid: &CornerGrid) {
        for idx in grid.candidate_indices() {
            self.available[idx] = true;
        }
    }

    fn claim_grid(&mut self, grid: &CornerGrid) {
        for idx in grid.candidate_indices() {
            self.available[idx] = false;
        }
    }

    /// Attempt a 3×3 (or 2×2) initial indexing matrix around `seed_idx`.
    fn build_initial(&mut self, seed_idx: usize) -> Option<CornerGrid> {
        let orient = edge_orientations(self.image, self.position(seed_idx));
        if orient.len() < 2 || orient.len() > 4 {
            return None;
        }
        // two strongest orientations as lattice axes
        let mut by_strength: Vec<(f64, f64)> = orient
            .angles
            .iter()
            .zip(&orient.strengths)
            .map(|(&a, &s)| (s, a))
            .collect();
        by_strength.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let a1 = by_strength[0].1;
        let a2 = by_strength[1].1;
        let sep = (a1 - a2).rem_euclid(180.0);
        let sep = sep.min(180.0 - sep);
        if sep < 2.0 * ANGLE_TOL_DEG {
            return None;
        }
        let med = median_nn_distance(self.candidates, &self.available)?;
        let gate = (DIST_GATE.0 * med, DIST_GATE.1 * med);

        let mut used: Vec<usize> = vec![seed_idx];
        let mut cells: [[Option<usize>; 3]; 3] = [[None; 3]; 3];
        cells[1][1] = Some(seed_idx);
        let probe = |cells: &mut [[Option<usize>; 3]; 3],
                         used: &mut Vec<usize>,
                         from: (usize, usize),
                         to: (usize, usize),
                         dir: f64|
         -> Option<usize> {
            let from_idx = cells[from.1][from.0]?;
            if cells[to.1][to.0].is_some() {
                return cells[to.1][to.0];
            }
            let origin = self.candidates[from_idx].position();
            let found = find_along(self.candidates, &self.available, origin, dir, gate)?;
            if used.contains(&found) {
                return None;
            }
            cells[to.1][to.0] = Some(found);
            used.push(found);
            Some(found)
        };
        // axis neighbors: ±a1 is the column direction, ±a2 the row direction
        let dirs = [a1, a1 + 180.0, a2, a2 + 180.0];
        let steps: [((usize, usize), (usize, usize), f64); 4] = [
            ((1, 1), (2, 1), dirs[0]),
            ((1, 1), (0, 1), dirs[1]),
            ((1, 1), (1, 2), dirs[2]),
            ((1, 1), (1, 0), dirs[3]),
        ];
        for (from, to, dir) in steps {
            let _ = probe(&mut cells, &mut used, from, to, dir);
        }
        // one ring outward: diagonals via the axis neighbors
        let diagonals: [((usize, usize), (usize, usize), f64); 8] = [
            ((2, 1), (2, 2), dirs[2]),
            ((1, 2), (2, 2), dirs[0]),
            ((0, 1), (0, 2), dirs[2]),
            ((1, 2), (0, 2), dirs[1]),
            ((2, 1), (2, 0), dirs[3]),
            ((1, 0), (2, 0), dirs[0]),
            ((0, 1), (0, 0), dirs[3]),
            ((1, 0), (0, 0), dirs[1]),
        ];
        for (from, to, dir) in diagonals {
            let _ = probe(&mut cells, &mut used, from, to, dir);
        }

        let full = (0..3).all(|r| (0..3).all(|c| cells[r][c].is_some()));
        let mut grid = if full {
            let mut g = CornerGrid::new(3, 3);
            for r in 0..3 {
                for c in 0..3 {
                    g.set(r, c, cells[r][c].unwrap());
                }
            }
            g
        } else {
            // best fully-present 2×2 quadrant around the seed
            let quads = [(1usize, 1usize), (1, 0), (0, 1), (0, 0)];
            let mut found: Option<CornerGrid> = None;
            for (qr, qc) in quads {
                let block = [
                    cells[qr][qc],
                    cells[qr][qc + 1],
                    cells[qr + 1][qc],
                    cells[qr + 1][qc + 1],
                ];
                if block.iter().all(Option::is_some) {
                    let mut g = CornerGrid::new(2, 2);
                    g.set(0, 0, block[0].unwrap());
                    g.set(0, 1, block[1].unwrap());
                    g.set(1, 0, block[2].unwrap());
                    g.set(1, 1, block[3].unwrap());
                    found = Some(g);
                    break;
                }
            }
            found?
        };
        grid.refresh_mean_edge(self.candidates);
        if grid.validate(self.candidates).is_err() {
            return None;
        }
        for idx in grid.candidate_indices() {
            self.take(idx);
        }
        Some(grid)
    }

    /// Highest-response available seed that yields an initial matrix.
    fn seed(&mut self) -> Option<CornerGrid> {
        let mut order: Vec<usize> =
            (0..self.candidates.len()).filter(|&i| self.available[i]).collect();
        if order.len() < 4 {
            return None;
        }
        order.sort_by(|&i, &j| {
            let (a, b) = (&self.candidates[i], &self.candidates[j]);
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.py.cmp(&b.py))
                .then(a.px.cmp(&b.px))
        });
        for seed_idx in order {
            if let Some(grid) = self.build_initial(seed_idx) {
                return Some(grid);
            }
        }
        None
    }

    /// Linear prediction for a cell from the two present cells of its row
    /// (or column) nearest to it.
    fn predict_in_line(
        &self,
        grid: &CornerGrid,
        row: usize,
        col: usize,
        along_row: bool,
    ) -> Option<(f64, f64)> {
        let (target, len) =
            if along_row { (col as i64, grid.cols) } else { (row as i64, grid.rows) };
        let mut support: Vec<(i64, (f64, f64))> = Vec::new();
        for t in 0..len {
            let idx = if along_row { grid.cell(row, t) } else { grid.cell(t, col) };
            if let Some(i) = idx {
                support.push((t as i64, self.position(i)));
            }
        }
        if support.len() < 2 {
            return None;
        }
        support.sort_by_key(|&(t, _)| ((t - target).abs(), t));
        let (t0, p0) = support[0];
        let (t1, p1) = support[1];
        let f = (target - t0) as f64 / (t1 - t0) as f64;
        Some((p0.0 + (p1.0 - p0.0) * f, p0.1 + (p1.1 - p0.1) * f))
    }

    /// Nearest available candidate within `radius` of the prediction.
    fn match_prediction(&self, prediction: (f64, f64), radius: f64) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in self.candidates.iter().enumerate() {
            if !self.available[i] {
                continue;
            }
            let (x, y) = c.position();
            let d = (x - prediction.0).hypot(y - prediction.1);
            if d <= radius && best.map(|(bd, bi)| (d, i) < (bd, bi)).unwrap_or(true) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Border expansion plus interior hole filling until nothing changes.
    fn grow(&mut self, mut grid: CornerGrid) -> CornerGrid {
        grid.refresh_mean_edge(self.candidates);
        loop {
            let mut changed = false;
            let radius = GROW_RADIUS * grid.mean_edge_px;

            // fill absent interior cells from their row/column neighbors
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    if grid.cell(r, c).is_some() {
                        continue;
                    }
                    let mut matched: Option<(f64, usize)> = None;
                    for along_row in [false, true] {
                        if let Some(p) = self.predict_in_line(&grid, r, c, along_row) {
                            if let Some(i) = self.match_prediction(p, radius) {
                                let (x, y) = self.position(i);
                                let d = (x - p.0).hypot(y - p.1);
                                if matched.map(|(bd, _)| d < bd).unwrap_or(true) {
                                    matched = Some((d, i));
                                }
                            }
                        }
                    }
                    if let Some((_, idx)) = matched {
                        grid.set(r, c, idx);
                        self.take(idx);
                        grid.refresh_mean_edge(self.candidates);
                        changed = true;
                    }
                }
            }

            // expand each border: extrapolate from the two outermost present
            // cells of each line, accept if at least half the predictions
            // match
            for border in 0..4usize {
                let (vertical, target): (bool, i64) = match border {
                    0 => (false, -1),
                    1 => (false, grid.rows as i64),
                    2 => (true, -1),
                    _ => (true, grid.cols as i64),
                };
                let lines = if vertical { grid.rows } else { grid.cols };
                let mut predictions = 0usize;
                let mut matches: Vec<(usize, usize)> = Vec::new();
                let mut taken: Vec<usize> = Vec::new();
                for line in 0..lines {
                    // outermost two present cells toward the border
                    let len = if vertical { grid.cols } else { grid.rows } as i64;
                    let mut cells_on_line: Vec<(i64, usize)> = (0..len)
                        .filter_map(|t| {
                            let idx = if vertical {
                                grid.cell(line, t as usize)
                            } else {
                                grid.cell(t as usize, line)
                            };
                            idx.map(|i| (t, i))
                        })
                        .collect();
                    if cells_on_line.len() < 2 {
                        continue;
                    }
                    cells_on_line.sort_by_key(|&(t, _)| (t - target).abs());
                    let (t0, i0) = cells_on_line[0];
                    let (t1, i1) = cells_on_line[1];
                    predictions += 1;
                    let p0 = self.position(i0);
                    let p1 = self.position(i1);
                    let f = (target - t0) as f64 / (t1 - t0) as f64;
                    let p = (p0.0 + (p1.0 - p0.0) * f, p0.1 + (p1.1 - p0.1) * f);
                    if let Some(idx) = self.match_prediction(p, radius) {
                        if !taken.contains(&idx) {
                            taken.push(idx);
                            matches.push((line, idx));
                        }
                    }
                }
                if predictions == 0 || matches.len() * 2 < predictions {
                    continue;
                }
                // add the border line with matched cells present
                let mut next = if vertical {
                    let mut g = CornerGrid::new(grid.rows, grid.cols + 1);
                    let shift = if target < 0 { 1usize } else { 0 };
                    for r in 0..grid.rows {
                        for c in 0..grid.cols {
                            if let Some(i) = grid.cell(r, c) {
                                g.set(r, c + shift, i);
                            }
                        }
                    }
                    let new_col = if target < 0 { 0 } else { grid.cols };
                    for &(line, idx) in &matches {
                        g.set(line, new_col, idx);
                    }
                    g
                } else {
                    let mut g = CornerGrid::new(grid.rows + 1, grid.cols);
                    let shift = if target < 0 { 1usize } else { 0 };
                    for r in 0..grid.rows {
                        for c in 0..grid.cols {
                            if let Some(i) = grid.cell(r, c) {
                                g.set(r + shift, c, i);
                            }
                        }
                    }
                    let new_row = if target < 0 { 0 } else { grid.rows };
                    for &(line, idx) in &matches {
                        g.set(new_row, line, idx);
                    }
                    g
                };
                for &(_, idx) in &matches {
                    self.take(idx);
                }
                next.refresh_mean_edge(self.candidates);
                grid = next;
                changed = true;
            }
            if !changed {
                return grid;
            }
        }
    }

    /// For 2-wide grids: seed new initial matrices from boundary corners and
    /// merge them when their mean edge length stays within 0.8–1.2 of the
    /// grid's and every shared corner coincides. Delegates to growth.
    fn merge_two_wide(&mut self, grid: CornerGrid) -> CornerGrid {
        let mut grid = grid;
        let boundary: Vec<usize> = {
            let mut b = Vec::new();
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    if r == 0 || c == 0 || r + 1 == grid.rows || c + 1 == grid.cols {
                        if let Some(i) = grid.cell(r, c) {
                            b.push(i);
                        }
                    }
                }
            }
            b
        };
        for seed_idx in boundary {
            if grid.rows.min(grid.cols) > 2 {
                break;
            }
            // allow the new matrix to reuse this grid's corners so shared
            // cells can be checked for coincidence
            self.release_grid(&grid);
            let candidate_grid = self.build_initial(seed_idx);
            self.claim_grid(&grid);
            let Some(new_grid) = candidate_grid else {
                continue;
            };
            let ratio = new_grid.mean_edge_px / grid.mean_edge_px.max(1e-12);
            if !(MERGE_RATIO.0..=MERGE_RATIO.1).contains(&ratio) {
                for idx in new_grid.candidate_indices() {
                    if grid.candidate_indices().contains(&idx) {
                        continue;
                    }
                    self.available[idx] = true;
                }
                continue;
            }
            if let Some(merged) = merge_grids(&grid, &new_grid, self.candidates) {
                for idx in merged.candidate_indices() {
                    self.available[idx] = false;
                }
                grid = self.grow(merged);
            } else {
                for idx in new_grid.candidate_indices() {
                    if !grid.candidate_indices().contains(&idx) {
                        self.available[idx] = true;
                    }
                }
            }
        }
        self.grow(grid)
    }
}

/// Align `new` onto `base` through a dihedral transform such that every
/// shared candidate sits at the same lattice position, then merge into one
/// grid. Returns `None` when no alignment with at least one shared corner
/// exists.
fn merge_grids(
    base: &CornerGrid,
    new: &CornerGrid,
    candidates: &[Candidate],
) -> Option<CornerGrid> {
    use std::collections::HashMap;
    let mut base_pos: HashMap<usize, (i64, i64)> = HashMap::new();
    for r in 0..base.rows {
        for c in 0..base.cols {
            if let Some(i) = base.cell(r, c) {
                base_pos.insert(i, (r as i64, c as i64));
            }
        }
    }
    let mut variants = Vec::new();
    for flip_rows in [false, true] {
        for flip_cols in [false, true] {
            variants.push(new.flipped(flip_rows, flip_cols));
            variants.push(new.transposed().flipped(flip_rows, flip_cols));
        }
    }
    for variant in variants {
        // anchor on any shared candidate
        let mut offset: Option<(i64, i64)> = None;
        'anchor: for r in 0..variant.rows {
            for c in 0..variant.cols {
                if let Some(i) = variant.cell(r, c) {
                    if let Some(&(br, bc)) = base_pos.get(&i) {
                        offset = Some((br - r as i64, bc - c as i64));
                        break 'anchor;
                    }
                }
            }
        }
        let Some((dr, dc)) = offset else {
            continue;
        };
        // every cell of the variant must agree with base where both present
        let mut consistent = true;
        for r in 0..variant.rows {
            for c in 0..variant.cols {
                let Some(i) = variant.cell(r, c) else { continue };
                let (tr, tc) = (r as i64 + dr, c as i64 + dc);
                match base_pos.get(&i) {
                    Some(&(br, bc)) if (br, bc) != (tr, tc) => {
                        consistent = false;
                    }
                    _ => {}
                }
                if tr >= 0 && tc >= 0 && tr < base.rows as i64 && tc < base.cols as i64 {
                    if let Some(j) = base.cell(tr as usize, tc as usize) {
                        if j != i {
                            consistent = false;
                        }
                    }
                }
                if !consistent {
                    break;
                }
            }
        }
        if !consistent {
            continue;
        }
        // merged bounding box
        let r0 = 0i64.min(dr);
        let c0 = 0i64.min(dc);
        let r1 = (base.rows as i64).max(variant.rows as i64 + dr);
        let c1 = (base.cols as i64).max(variant.cols as i64 + dc);
        let mut merged = CornerGrid::new((r1 - r0) as usize, (c1 - c0) as usize);
        for r in 0..base.rows {
            for c in 0..base.cols {
                if let Some(i) = base.cell(r, c) {
                    merged.set((r as i64 - r0) as usize, (c as i64 - c0) as usize, i);
                }
            }
        }
        for r in 0..variant.rows {
            for c in 0..variant.cols {
                if let Some(i) = variant.cell(r, c) {
                    merged.set(
                        (r as i64 + dr - r0) as usize,
                        (c as i64 + dc - c0) as usize,
                        i,
                    );
                }
            }
        }
        merged.refresh_mean_edge(candidates);
        if merged.validate(candidates).is_ok() {
            return Some(merged);
        }
    }
    None
}

/// Build a 2×2 or 3×3 initial indexing matrix from the strongest viable
/// seed, or `None` when every seed is exhausted.
pub fn seed_matrix(candidates: &[Candidate], image: &ValueGrid) -> Option<CornerGrid> {
    Recovery::new(candidates, image).seed()
}

/// Extend a grid with region growth over the remaining candidates.
pub fn grow(grid: &CornerGrid, candidates: &[Candidate], image: &ValueGrid) -> CornerGrid {
    let mut rec = Recovery::new(candidates, image);
    rec.claim_grid(grid);
    rec.grow(grid.clone())
}

/// Merge boundary-seeded matrices into a 2-wide grid, then grow.
pub fn merge_two_wide(
    grid: &CornerGrid,
    candidates: &[Candidate],
    image: &ValueGrid,
) -> CornerGrid {
    let mut rec = Recovery::new(candidates, image);
    rec.claim_grid(grid);
    rec.merge_two_wide(grid.clone())
}

/// Recover every checkerboard structure in the candidate set: repeatedly
/// seed, grow (merging 2-wide grids), claim the grid's candidates, and stop
/// when seeding fails. Grids with fewer than 4 present cells are discarded.
pub fn recover_boards(candidates: &[Candidate], image: &ValueGrid) -> Vec<CornerGrid> {
    let mut rec = Recovery::new(candidates, image);
    let mut grids = Vec::new();
    while let Some(seeded) = rec.seed() {
        let grown = rec.grow(seeded);
        let mut grid = if grown.rows.min(grown.cols) == 2 {
            rec.merge_two_wide(grown)
        } else {
            grown
        };
        rec.claim_grid(&grid);
        if grid.present_count() >= 4 {
            grid.canonicalize(candidates);
            grids.push(grid);
        }
    }
    grids
}

/// Write a recovered grid as `row,col,x,y,present` CSV; absent cells carry
/// empty coordinates.
pub fn save_grid_csv<P: AsRef<Path>>(
    path: P,
    grid: &CornerGrid,
    candidates: &[Candidate],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "row,col,x,y,present\n")?;
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            match grid.cell(r, c) {
                Some(i) => {
                    let (x, y) = candidates[i].position();
                    write!(w, "{r},{c},{x:.6},{y:.6},1\n")?;
                }
                None => write!(w, "{r},{c},,,0\n")?,
            }
        }
    }
    Ok(())
}
