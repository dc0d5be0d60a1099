//! Cell lattice, binary distance-threshold adjacency and separator partitions.
//!
//! A separator partition splits the cells into a boundary set `B` and blocks
//! `D_1..D_L` such that no edge joins two different blocks. Given the spatial
//! effects on `B`, the blocks are conditionally independent under the CAR
//! prior and can be swept concurrently.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Planar cell locations with external labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    ids: Vec<u64>,
    coords: Vec<[f64; 2]>,
}

impl CellGrid {
    pub fn new(ids: Vec<u64>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(Error::InvalidInput(format!(
                "{} cell ids but {} coordinates",
                ids.len(),
                coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for (&id, c) in ids.iter().zip(&coords) {
            if !seen.insert(id) {
                return Err(Error::InvalidInput(format!("duplicate cell id {id}")));
            }
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::InvalidInput(format!("cell {id} has non-finite coordinates")));
            }
        }
        Ok(Self { ids, coords })
    }

    /// `nx` columns by `ny` rows at unit spacing; cell `row * nx + col` sits at
    /// `(col, row)`.
    pub fn rectangular(nx: usize, ny: usize) -> Self {
        let mut coords = Vec::with_capacity(nx * ny);
        for row in 0..ny {
            for col in 0..nx {
                coords.push([col as f64, row as f64]);
            }
        }
        Self {
            ids: (0..(nx * ny) as u64).collect(),
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, cell: usize) -> [f64; 2] {
        self.coords[cell]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn id(&self, cell: usize) -> u64 {
        self.ids[cell]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Reorders cells so that new cell `k` is old cell `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            coords: order.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

/// Symmetric binary adjacency in compressed-row form. Neighbour lists are
/// sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    /// Builds from per-cell neighbour lists, checking symmetry and the
    /// absence of self loops and isolated cells.
    pub fn from_lists(mut lists: Vec<Vec<usize>>, labels: &[u64]) -> Result<Self> {
        let n = lists.len();
        let mut isolated = Vec::new();
        for (i, list) in lists.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.is_empty() {
                isolated.push(labels.get(i).copied().unwrap_or(i as u64));
            }
            if list.iter().any(|&j| j == i || j >= n) {
                return Err(Error::InvalidInput(format!(
                    "cell {i} has a self loop or out-of-range neighbour"
                )));
            }
        }
        if !isolated.is_empty() {
            return Err(Error::IsolatedCells { ids: isolated });
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &lists {
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        let adj = Self { offsets, neighbors };
        for i in 0..n {
            for &j in adj.neighbors(i) {
                if !adj.contains(j, i) {
                    return Err(Error::InvalidInput(format!(
                        "adjacency is not symmetric between {i} and {j}"
                    )));
                }
            }
        }
        Ok(adj)
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.neighbors[self.offsets[cell]..self.offsets[cell + 1]]
    }

    /// Row sum `w_{i+}`.
    pub fn degree(&self, cell: usize) -> usize {
        self.offsets[cell + 1] - self.offsets[cell]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .copied()
                .filter(move |&j| j > i)
                .map(move |j| (i, j))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut stack = Vec::new();
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                for &j in self.neighbors(i) {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        components
    }

    /// Relabels cells so that new cell `k` is old cell `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let mut offsets = Vec::with_capacity(order.len() + 1);
        let mut neighbors = Vec::with_capacity(self.neighbors.len());
        offsets.push(0);
        for &old in order {
            let start = neighbors.len();
            neighbors.extend(self.neighbors(old).iter().map(|&j| inverse[j]));
            neighbors[start..].sort_unstable();
            offsets.push(neighbors.len());
        }
        Self { offsets, neighbors }
    }
}

/// `w(i,j) = 1` iff the Euclidean distance between the cells is below
/// `threshold` and `i != j`.
pub fn build_adjacency(grid: &CellGrid, threshold: f64) -> Result<Adjacency> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidInput(format!("threshold must be positive, got {threshold}")));
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty cell grid".into()));
    }
    let bucket = |c: [f64; 2]| {
        (
            (c[0] / threshold).floor() as i64,
            (c[1] / threshold).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &c) in grid.coords().iter().enumerate() {
        buckets.entry(bucket(c)).or_default().push(i);
    }
    let limit = threshold * threshold;
    let lists = grid
        .coords()
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (bx, by) = bucket(c);
            let mut list = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(members) = buckets.get(&(bx + dx, by + dy)) {
                        for &j in members {
                            if j == i {
                                continue;
                            }
                            let d = grid.coord(j);
                            let ex = d[0] - c[0];
                            let ey = d[1] - c[1];
                            if ex * ex + ey * ey < limit {
                                list.push(j);
                            }
                        }
                    }
                }
            }
            list
        })
        .collect();
    Adjacency::from_lists(lists, grid.ids())
}

/// Boundary set plus mutually non-adjacent blocks. All lists ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeparatorPartition {
    pub boundary: Vec<usize>,
    pub blocks: Vec<Vec<usize>>,
}

/// Role of a cell in a [`SeparatorPartition`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellRole {
    Boundary,
    Block(usize),
}

impl std::fmt::Display for CellRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellRole::Boundary => write!(f, "boundary"),
            CellRole::Block(k) => write!(f, "block_{k}"),
        }
    }
}

impl SeparatorPartition {
    /// Everything in one block; the schedule degenerates to a plain sweep.
    pub fn single_block(cells: usize) -> Self {
        Self {
            boundary: Vec::new(),
            blocks: vec![(0..cells).collect()],
        }
    }

    /// `|B| + max_k |D_k|`: the sequential steps on the critical path.
    pub fn sequential_step_count(&self) -> usize {
        self.boundary.len() + self.blocks.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn roles(&self, cells: usize) -> Vec<CellRole> {
        let mut roles = vec![CellRole::Boundary; cells];
        for (k, block) in self.blocks.iter().enumerate() {
            for &c in block {
                roles[c] = CellRole::Block(k);
            }
        }
        roles
    }

    /// Checks exact coverage and that no edge joins two different blocks.
    pub fn validate(&self, adj: &Adjacency) -> Result<()> {
        let n = adj.len();
        let mut owner: Vec<Option<CellRole>> = vec![None; n];
        let mut assign = |cell: usize, role: CellRole| -> Result<()> {
            if cell >= n {
                return Err(Error::InvalidPartition(format!("cell {cell} out of range")));
            }
            if owner[cell].is_some() {
                return Err(Error::InvalidPartition(format!("cell {cell} assigned twice")));
            }
            owner[cell] = Some(role);
            Ok(())
        };
        for &c in &self.boundary {
            assign(c, CellRole::Boundary)?;
        }
        for (k, block) in self.blocks.iter().enumerate() {
            for &c in block {
                assign(c, CellRole::Block(k))?;
            }
        }
        if let Some(missing) = owner.iter().position(Option::is_none) {
            return Err(Error::InvalidPartition(format!("cell {missing} not covered")));
        }
        for (i, j) in adj.edges() {
            if let (Some(CellRole::Block(a)), Some(CellRole::Block(b))) = (owner[i], owner[j]) {
                if a != b {
                    return Err(Error::InvalidPartition(format!(
                        "edge ({i}, {j}) joins blocks {a} and {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of blocks along each axis for a separator layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StripeLayout {
    pub across: usize,
    pub down: usize,
}

fn distinct_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
    v
}

fn position(levels: &[f64], x: f64) -> usize {
    match levels.binary_search_by(|l| l.total_cmp(&x)) {
        Ok(k) => k,
        Err(k) => {
            // nearest of the neighbours (values were deduplicated with a tolerance)
            if k == 0 {
                0
            } else if k == levels.len() || (x - levels[k - 1]) <= (levels[k] - x) {
                k - 1
            } else {
                k
            }
        }
    }
}

/// For `levels` coordinate levels split into `blocks` groups, returns for each
/// level either `None` (separator) or `Some(group)`.
fn assign_levels(levels: usize, blocks: usize) -> Result<Vec<Option<usize>>> {
    if blocks == 0 {
        return Err(Error::InfeasiblePartition {
            requested: 0,
            max_feasible: levels.div_ceil(2),
        });
    }
    let separators = blocks - 1;
    if levels < blocks + separators {
        return Err(Error::InfeasiblePartition {
            requested: blocks,
            max_feasible: levels.div_ceil(2),
        });
    }
    let free = levels - separators;
    let mut out = Vec::with_capacity(levels);
    for b in 0..blocks {
        let width = free / blocks + usize::from(b < free % blocks);
        out.extend(std::iter::repeat_n(Some(b), width));
        if b + 1 < blocks {
            out.push(None);
        }
    }
    Ok(out)
}

/// Separator partition from one-cell-wide axis-aligned stripes: `across - 1`
/// stripes cut the x levels and `down - 1` stripes cut the y levels.
pub fn partition_layout(
    adj: &Adjacency,
    grid: &CellGrid,
    layout: StripeLayout,
) -> Result<SeparatorPartition> {
    if adj.len() != grid.len() {
        return Err(Error::InvalidPartition(format!(
            "adjacency has {} cells but grid has {}",
            adj.len(),
            grid.len()
        )));
    }
    let xs = distinct_sorted(grid.coords().iter().map(|c| c[0]));
    let ys = distinct_sorted(grid.coords().iter().map(|c| c[1]));
    let col_group = assign_levels(xs.len(), layout.across)?;
    let row_group = assign_levels(ys.len(), layout.down)?;
    let mut boundary = Vec::new();
    let mut blocks = vec![Vec::new(); layout.across * layout.down];
    for (cell, c) in grid.coords().iter().enumerate() {
        match (col_group[position(&xs, c[0])], row_group[position(&ys, c[1])]) {
            (Some(bx), Some(by)) => blocks[by * layout.across + bx].push(cell),
            _ => boundary.push(cell),
        }
    }
    blocks.retain(|b| !b.is_empty());
    let partition = SeparatorPartition { boundary, blocks };
    partition.validate(adj)?;
    Ok(partition)
}

/// `blocks` blocks separated by stripes running along the shorter axis (so the
/// stripes cut the longer one). `blocks = 1` gives an empty boundary.
pub fn partition_stripes(
    adj: &Adjacency,
    grid: &CellGrid,
    blocks: usize,
) -> Result<SeparatorPartition> {
    if blocks == 1 {
        let p = SeparatorPartition::single_block(grid.len());
        p.validate(adj)?;
        return Ok(p);
    }
    let nx = distinct_sorted(grid.coords().iter().map(|c| c[0])).len();
    let ny = distinct_sorted(grid.coords().iter().map(|c| c[1])).len();
    let layout = if nx >= ny {
        StripeLayout { across: blocks, down: 1 }
    } else {
        StripeLayout { across: 1, down: blocks }
    };
    partition_layout(adj, grid, layout)
}
