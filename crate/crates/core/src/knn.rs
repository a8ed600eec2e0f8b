//! Uniform-grid k-nearest-neighbor queries over Gaussian centers.

use nalgebra::Vector3;

/// Bucketed point set. Cells are cubes; the grid covers the bounding box.
pub struct Grid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let extent = hi - lo;
        let volume = extent.iter().map(|e| e.max(1e-9)).product::<f64>();
        // About two points per cell on average.
        let mut cell = (2.0 * volume / points.len().max(1) as f64).cbrt();
        let max_extent = extent.max();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        cell = cell.max(max_extent / 256.0).max(1e-12);
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).max(1));
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut grid = Self { points, origin: lo, cell, dims, cells: Vec::new() };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(p);
            cells[grid.flat(c)].push(i as u32);
        }
        grid.cells = cells;
        grid
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|a| (((p[a] - self.origin[a]) / self.cell).floor().max(0.0) as usize).min(self.dims[a] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Distances to the `k` nearest other points of point `i`, ascending.
    /// Fewer than `k` are returned only when the set is too small.
    pub fn neighbors(&self, i: usize, k: usize) -> Vec<f64> {
        let q = self.points[i];
        let home = self.cell_of(&q);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        for ring in 0..=max_ring {
            self.visit_ring(home, ring, |j| {
                if j == i {
                    return;
                }
                let d = (self.points[j] - q).norm();
                if best.len() < k || d < best[best.len() - 1] {
                    let at = best.partition_point(|&b| b <= d);
                    best.insert(at, d);
                    best.truncate(k);
                }
            });
            // Every point beyond this ring is at least `ring * cell` away.
            if best.len() == k && best[k - 1] <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }

    fn visit_ring(&self, home: [usize; 3], ring: usize, mut f: impl FnMut(usize)) {
        let r = ring as isize;
        let range = |a: usize| {
            let c = home[a] as isize;
            (c - r).max(0)..=(c + r).min(self.dims[a] as isize - 1)
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let on_shell = [x, y, z]
                        .iter()
                        .zip(home)
                        .any(|(&v, h)| (v - h as isize).abs() == r);
                    if !on_shell {
                        continue;
                    }
                    for &j in &self.cells[self.flat([x as usize, y as usize, z as usize])] {
                        f(j as usize);
                    }
                }
            }
        }
    }
}

/// Distance from every point to its nearest other point.
///
/// `None` when fewer than two points are given.
pub fn nearest_neighbor_distances(points: &[Vector3<f64>]) -> Option<Vec<f64>> {
    if points.len() < 2 {
        return None;
    }
    let grid = Grid::new(points);
    Some((0..points.len()).map(|i| grid.neighbors(i, 1)[0]).collect())
}

/// Mean distance from every point to its `k` nearest other points.
///
/// `None` unless `1 <= k < points.len()`.
pub fn mean_knn_distances(points: &[Vector3<f64>], k: usize) -> Option<Vec<f64>> {
    if k == 0 || points.len() <= k {
        return None;
    }
    let grid = Grid::new(points);
    Some(
        (0..points.len())
            .map(|i| grid.neighbors(i, k).iter().sum::<f64>() / k as f64)
            .collect(),
    )
}
