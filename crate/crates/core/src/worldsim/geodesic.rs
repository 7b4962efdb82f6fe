use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use super::{GridMap, Point, WorldError};

const MOVES: [(isize, isize, f64); 8] = [
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT_2),
    (1, -1, SQRT_2),
    (-1, 1, SQRT_2),
    (-1, -1, SQRT_2),
];

#[derive(Clone, Copy, PartialEq)]
struct Node {
    key: f64,
    cell: usize,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on key, ties toward the lower cell index.
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Calls `f(neighbor, step_cost)` for each legal 8-connected move out of `idx`.
/// Diagonal moves require both adjacent orthogonal cells to be free.
#[inline]
fn for_each_neighbor(map: &GridMap, idx: usize, mut f: impl FnMut(usize, f64)) {
    let (c, r) = map.col_row(idx);
    let (c, r) = (c as isize, r as isize);
    let res = map.resolution();
    for &(dc, dr, w) in &MOVES {
        let (nc, nr) = (c + dc, r + dr);
        if map.blocked_at(nc, nr) {
            continue;
        }
        if dc != 0 && dr != 0 && (map.blocked_at(c + dc, r) || map.blocked_at(c, r + dr)) {
            continue;
        }
        f(map.index(nc as usize, nr as usize), w * res);
    }
}

/// Dijkstra from `source`. `visit(cell, dist)` is called as each cell is
/// settled; returning `false` stops the search. Unsettled cells keep
/// `f64::INFINITY` or a tentative distance.
pub(crate) fn dijkstra_until(
    map: &GridMap,
    source: usize,
    mut visit: impl FnMut(usize, f64) -> bool,
) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; map.len()];
    if map.is_blocked_cell(source) {
        return dist;
    }
    let mut settled = vec![false; map.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Node {
        key: 0.0,
        cell: source,
    });
    while let Some(Node { key, cell }) = heap.pop() {
        if settled[cell] {
            continue;
        }
        settled[cell] = true;
        if !visit(cell, key) {
            break;
        }
        for_each_neighbor(map, cell, |n, w| {
            let nd = key + w;
            if nd < dist[n] {
                dist[n] = nd;
                heap.push(Node { key: nd, cell: n });
            }
        });
    }
    dist
}

fn octile(map: &GridMap, a: usize, b: usize) -> f64 {
    let (ac, ar) = map.col_row(a);
    let (bc, br) = map.col_row(b);
    let dx = ac.abs_diff(bc) as f64;
    let dy = ar.abs_diff(br) as f64;
    map.resolution() * (dx.max(dy) + (SQRT_2 - 1.0) * dx.min(dy))
}

/// A* between two cells with the (consistent) octile heuristic. Returns the
/// path length and the cell sequence including both endpoints.
pub(crate) fn astar(map: &GridMap, from: usize, to: usize) -> Option<(f64, Vec<usize>)> {
    if map.is_blocked_cell(from) || map.is_blocked_cell(to) {
        return None;
    }
    let n = map.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[from] = 0.0;
    heap.push(Node {
        key: octile(map, from, to),
        cell: from,
    });
    while let Some(Node { cell, .. }) = heap.pop() {
        if closed[cell] {
            continue;
        }
        if cell == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Some((g[to], path));
        }
        closed[cell] = true;
        let gc = g[cell];
        for_each_neighbor(map, cell, |nb, w| {
            let nd = gc + w;
            if nd < g[nb] {
                g[nb] = nd;
                parent[nb] = cell;
                heap.push(Node {
                    key: nd + octile(map, nb, to),
                    cell: nb,
                });
            }
        });
    }
    None
}

/// Sum of Euclidean segment lengths.
pub(crate) fn path_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

fn cells_to_polyline(map: &GridMap, a: Point, cells: &[usize], b: Point) -> Vec<Point> {
    let mut pts = Vec::with_capacity(cells.len() + 2);
    pts.push(a);
    for &c in cells {
        let p = map.cell_center(c);
        if *pts.last().unwrap() != p {
            pts.push(p);
        }
    }
    if *pts.last().unwrap() != b {
        pts.push(b);
    }
    pts
}

/// Geodesic distance between two points: the shortest 8-connected grid path
/// between their cells plus the offsets from each point to its cell center.
/// Points in the same cell are joined by a straight segment. Returns
/// `f64::INFINITY` when either point is blocked or the two are disconnected.
pub fn geodesic_distance(map: &GridMap, a: &Point, b: &Point) -> f64 {
    let (Some(ca), Some(cb)) = (map.free_cell_of(a), map.free_cell_of(b)) else {
        return f64::INFINITY;
    };
    if ca == cb {
        return a.distance(b);
    }
    match astar(map, ca, cb) {
        Some((g, _)) => a.distance(&map.cell_center(ca)) + g + b.distance(&map.cell_center(cb)),
        None => f64::INFINITY,
    }
}

/// Shortest free-space polyline from `a` to `b` whose length equals
/// [`geodesic_distance`]. The cell sequence is the descent of the distance
/// field around `b` (see [`GeodesicField::path_from`]), so the path from any
/// cell on it is a suffix of it.
pub fn shortest_path(map: &GridMap, a: &Point, b: &Point) -> Result<Vec<Point>, WorldError> {
    let (Some(ca), Some(cb)) = (map.free_cell_of(a), map.free_cell_of(b)) else {
        return Err(WorldError::Disconnected);
    };
    if ca == cb {
        return Ok(if a == b { vec![*a] } else { vec![*a, *b] });
    }
    // Cells on shortest paths from ca are settled before ca itself.
    let dist = dijkstra_until(map, cb, |cell, _| cell != ca);
    let cells = descend(map, &dist, ca, cb).ok_or(WorldError::Disconnected)?;
    Ok(cells_to_polyline(map, *a, &cells, *b))
}

/// Follows shortest-path predecessors in `dist` from `from` down to
/// `anchor`. Among equally short moves it takes a diagonal one if it can,
/// then the lowest cell index. The rule ignores where the anchor is, so the
/// path toward any cell on this path is a prefix of it, and it depends on
/// the current cell only, so the path from any cell on it is a suffix.
fn descend(map: &GridMap, dist: &[f64], from: usize, anchor: usize) -> Option<Vec<usize>> {
    if !dist[from].is_finite() {
        return None;
    }
    let straight = map.resolution() * 1.2;
    let mut cells = vec![from];
    let mut cur = from;
    while cur != anchor {
        let mut best: Option<(bool, usize)> = None;
        for_each_neighbor(map, cur, |n, w| {
            if dist[n] + w > dist[cur] + 1e-12 || dist[n] >= dist[cur] {
                return;
            }
            let diag = w > straight;
            let better = match best {
                None => true,
                Some((bd, bn)) => (diag && !bd) || (diag == bd && n < bn),
            };
            if better {
                best = Some((diag, n));
            }
        });
        cur = best?.1;
        cells.push(cur);
    }
    Some(cells)
}

/// Geodesic distances from every free cell to a fixed anchor point.
///
/// One full Dijkstra pass; afterwards distances and shortest paths toward the
/// anchor are lookups and gradient descents.
#[derive(Clone, Debug)]
pub struct GeodesicField {
    anchor: Point,
    anchor_cell: usize,
    dist: Vec<f64>,
}

impl GeodesicField {
    pub fn new(map: &GridMap, anchor: Point) -> Result<Self, WorldError> {
        let anchor_cell = map.free_cell_of(&anchor).ok_or(WorldError::Disconnected)?;
        let dist = dijkstra_until(map, anchor_cell, |_, _| true);
        Ok(GeodesicField {
            anchor,
            anchor_cell,
            dist,
        })
    }

    pub fn anchor(&self) -> Point {
        self.anchor
    }

    /// Same value as `geodesic_distance(map, p, anchor)`.
    pub fn distance_from(&self, map: &GridMap, p: &Point) -> f64 {
        let Some(cp) = map.free_cell_of(p) else {
            return f64::INFINITY;
        };
        if cp == self.anchor_cell {
            return p.distance(&self.anchor);
        }
        let d = self.dist[cp];
        if !d.is_finite() {
            return f64::INFINITY;
        }
        p.distance(&map.cell_center(cp))
            + d
            + self.anchor.distance(&map.cell_center(self.anchor_cell))
    }

    /// Shortest polyline from `p` to the anchor, by steepest descent.
    pub fn path_from(&self, map: &GridMap, p: &Point) -> Result<Vec<Point>, WorldError> {
        let cp = map.free_cell_of(p).ok_or(WorldError::Disconnected)?;
        if cp == self.anchor_cell {
            return Ok(if *p == self.anchor {
                vec![*p]
            } else {
                vec![*p, self.anchor]
            });
        }
        if !self.dist[cp].is_finite() {
            return Err(WorldError::Disconnected);
        }
        let cells =
            descend(map, &self.dist, cp, self.anchor_cell).ok_or(WorldError::Disconnected)?;
        Ok(cells_to_polyline(map, *p, &cells, self.anchor))
    }
}
