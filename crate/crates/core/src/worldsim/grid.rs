use serde::{Deserialize, Serialize};

use super::{Point, WorldError};

/// Rectangular cell region `[col0, col1) x [row0, row1)`, optionally tagged
/// with a landmark token id. Generated worlds record one region per room.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub col0: usize,
    pub row0: usize,
    pub col1: usize,
    pub row1: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<u16>,
}

impl Region {
    pub fn contains_cell(&self, col: usize, row: usize) -> bool {
        col >= self.col0 && col < self.col1 && row >= self.row0 && row < self.row1
    }

    pub fn center(&self, resolution: f64) -> Point {
        Point::new(
            (self.col0 + self.col1 - 1) as f64 * 0.5 * resolution,
            (self.row0 + self.row1 - 1) as f64 * 0.5 * resolution,
        )
    }
}

/// Occupancy grid. Cell `(col, row)` is centered on `(col * res, row * res)`
/// and covers `[(col - 0.5) * res, (col + 0.5) * res)` along x (likewise y).
/// Border cells are always blocked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridMapRecord", into = "GridMapRecord")]
pub struct GridMap {
    resolution: f64,
    width: usize,
    height: usize,
    occupancy: Vec<bool>,
    regions: Vec<Region>,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        occupancy: Vec<bool>,
    ) -> Result<Self, WorldError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(WorldError::InvalidMap(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if width < 3 || height < 3 {
            return Err(WorldError::InvalidMap(format!(
                "map must be at least 3x3 cells, got {width}x{height}"
            )));
        }
        if width * height != occupancy.len() {
            return Err(WorldError::InvalidMap(format!(
                "occupancy has {} cells, expected {}x{}",
                occupancy.len(),
                width,
                height
            )));
        }
        let mut map = GridMap {
            resolution,
            width,
            height,
            occupancy,
            regions: Vec::new(),
        };
        map.block_border();
        Ok(map)
    }

    /// An open map: only the border is blocked.
    pub fn open(width: usize, height: usize, resolution: f64) -> Self {
        GridMap::new(width, height, resolution, vec![false; width * height])
            .expect("valid open map")
    }

    pub fn with_regions(mut self, regions: Vec<Region>) -> Self {
        self.regions = regions;
        self
    }

    fn block_border(&mut self) {
        for col in 0..self.width {
            self.occupancy[col] = true;
            self.occupancy[(self.height - 1) * self.width + col] = true;
        }
        for row in 0..self.height {
            self.occupancy[row * self.width] = true;
            self.occupancy[row * self.width + self.width - 1] = true;
        }
    }

    /// Sets every cell in `[col0, col1) x [row0, row1)` (clipped to the map).
    /// Border cells stay blocked regardless of `blocked`.
    pub fn fill_rect(&mut self, col0: usize, row0: usize, col1: usize, row1: usize, blocked: bool) {
        for row in row0..row1.min(self.height) {
            for col in col0..col1.min(self.width) {
                self.occupancy[row * self.width + col] = blocked;
            }
        }
        self.block_border();
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn size_meters(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn col_row(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    /// Blocked test for signed cell coordinates; outside the map counts as blocked.
    #[inline]
    pub fn blocked_at(&self, col: isize, row: isize) -> bool {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            return true;
        }
        self.occupancy[row as usize * self.width + col as usize]
    }

    #[inline]
    pub fn is_blocked_cell(&self, idx: usize) -> bool {
        self.occupancy[idx]
    }

    /// Index of the cell containing `p`, or `None` outside the map.
    #[inline]
    pub fn cell_of(&self, p: &Point) -> Option<usize> {
        let fx = p.x / self.resolution + 0.5;
        let fy = p.y / self.resolution + 0.5;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let col = fx.floor() as usize;
        let row = fy.floor() as usize;
        if col >= self.width || row >= self.height {
            return None;
        }
        Some(row * self.width + col)
    }

    /// Index of the free cell containing `p`, or `None` if blocked or outside.
    #[inline]
    pub fn free_cell_of(&self, p: &Point) -> Option<usize> {
        self.cell_of(p).filter(|&i| !self.occupancy[i])
    }

    #[inline]
    pub fn is_free(&self, p: &Point) -> bool {
        self.free_cell_of(p).is_some()
    }

    #[inline]
    pub fn cell_center(&self, idx: usize) -> Point {
        let (col, row) = self.col_row(idx);
        Point::new(col as f64 * self.resolution, row as f64 * self.resolution)
    }

    /// Landmark of the first region containing `p`.
    pub fn landmark_at(&self, p: &Point) -> Option<u16> {
        self.region_index_at(p)
            .and_then(|i| self.regions[i].landmark)
    }

    pub fn region_index_at(&self, p: &Point) -> Option<usize> {
        let idx = self.cell_of(p)?;
        let (col, row) = self.col_row(idx);
        self.regions.iter().position(|r| r.contains_cell(col, row))
    }

    pub fn free_cell_count(&self) -> usize {
        self.occupancy.iter().filter(|b| !**b).count()
    }
}

/// On-disk form: one string per row (row 0 first), `#` blocked and `.` free.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridMapRecord {
    resolution: f64,
    width: usize,
    height: usize,
    rows: Vec<String>,
    #[serde(default)]
    regions: Vec<Region>,
}

impl TryFrom<GridMapRecord> for GridMap {
    type Error = WorldError;

    fn try_from(rec: GridMapRecord) -> Result<Self, Self::Error> {
        if rec.rows.len() != rec.height {
            return Err(WorldError::InvalidMap(format!(
                "expected {} rows, found {}",
                rec.height,
                rec.rows.len()
            )));
        }
        let mut occupancy = Vec::with_capacity(rec.width * rec.height);
        for (r, row) in rec.rows.iter().enumerate() {
            if row.len() != rec.width {
                return Err(WorldError::InvalidMap(format!(
                    "row {r} has {} cells, expected {}",
                    row.len(),
                    rec.width
                )));
            }
            for ch in row.bytes() {
                match ch {
                    b'#' => occupancy.push(true),
                    b'.' => occupancy.push(false),
                    other => {
                        return Err(WorldError::InvalidMap(format!(
                            "row {r}: unexpected cell character {:?}",
                            other as char
                        )))
                    }
                }
            }
        }
        let map = GridMap::new(rec.width, rec.height, rec.resolution, occupancy)?;
        for region in &rec.regions {
            if region.col1 > rec.width || region.row1 > rec.height {
                return Err(WorldError::InvalidMap("region outside map".into()));
            }
        }
        Ok(map.with_regions(rec.regions))
    }
}

impl From<GridMap> for GridMapRecord {
    fn from(map: GridMap) -> Self {
        let rows = map
            .occupancy
            .chunks(map.width)
            .map(|row| row.iter().map(|&b| if b { '#' } else { '.' }).collect())
            .collect();
        GridMapRecord {
            resolution: map.resolution,
            width: map.width,
            height: map.height,
            rows,
            regions: map.regions,
        }
    }
}
