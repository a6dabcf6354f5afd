//! Candidate regions from a feature grid: a cosine-similarity graph over the
//! 4-neighbourhood, spanning-tree clustering, and farthest-point seed cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::numerics::{dot, l2_norm};

#[cfg(test)]
mod tests;

/// Undirected edge between two cells, identified by row-major cell index with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    /// Cosine similarity of the two cells' features.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub height: usize,
    pub width: usize,
    /// Participating cells in ascending order.
    pub nodes: Vec<usize>,
    /// Edges sorted by `(a, b)`.
    pub edges: Vec<Edge>,
}

impl SimilarityGraph {
    pub fn coord(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (l2_norm(a) * l2_norm(b))).clamp(-1.0, 1.0)
}

/// Cells that can take part in cosine comparisons: valid and nonzero.
fn usable_cells(grid: &FeatureGrid) -> Result<Vec<usize>> {
    if grid.valid_count() == 0 {
        return Err(Error::InvalidArgument("grid has no valid cells".into()));
    }
    let mut cells = Vec::with_capacity(grid.valid_count());
    let mut zero = 0;
    for cell in 0..grid.cell_count() {
        if !grid.validity()[cell] {
            continue;
        }
        if l2_norm(grid.cell_feature(cell)) == 0.0 {
            zero += 1;
        } else {
            cells.push(cell);
        }
    }
    if zero > 0 {
        log::warn!("ignoring {zero} valid cells with zero-norm features");
    }
    Ok(cells)
}

pub fn build_similarity_graph(grid: &FeatureGrid) -> Result<SimilarityGraph> {
    let nodes = usable_cells(grid)?;
    let w = grid.width();
    let mut present = vec![false; grid.cell_count()];
    for &c in &nodes {
        present[c] = true;
    }
    let mut edges = Vec::new();
    for &a in &nodes {
        let (i, j) = (a / w, a % w);
        let mut neighbours = Vec::with_capacity(2);
        if j + 1 < w {
            neighbours.push(a + 1);
        }
        if i + 1 < grid.height() {
            neighbours.push(a + w);
        }
        for b in neighbours {
            if present[b] {
                edges.push(Edge { a, b, weight: cosine(grid.cell_feature(a), grid.cell_feature(b)) });
            }
        }
    }
    edges.sort_by_key(|e| (e.a, e.b));
    Ok(SimilarityGraph { height: grid.height(), width: w, nodes, edges })
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Maximum-similarity spanning forest by Kruskal. Among equal weights the
/// lexicographically smaller `(a, b)` is taken first.
pub fn maximum_spanning_forest(graph: &SimilarityGraph) -> Vec<Edge> {
    let mut order = graph.edges.clone();
    order.sort_by(|x, y| y.weight.total_cmp(&x.weight).then((x.a, x.b).cmp(&(y.a, y.b))));
    let mut sets = DisjointSet::new(graph.height * graph.width);
    order.into_iter().filter(|e| sets.union(e.a, e.b)).collect()
}

/// Connected components of `nodes` under `edges`, each sorted, ordered by smallest cell.
pub fn components(nodes: &[usize], edges: &[Edge], cell_count: usize) -> Vec<Vec<usize>> {
    let mut sets = DisjointSet::new(cell_count);
    for e in edges {
        sets.union(e.a, e.b);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &n in nodes {
        groups.entry(sets.find(n)).or_default().push(n);
    }
    // Roots are the smallest member, so BTreeMap order is smallest-cell order.
    groups.into_values().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    /// Disjoint cell sets (row-major indices), ordered by smallest member.
    pub regions: Vec<Vec<usize>>,
    /// Mean (row, column) of each region.
    pub centroids: Vec<[f64; 2]>,
    /// Mean similarity over graph edges inside each region; 1 for singletons.
    pub mean_similarity: Vec<f64>,
}

/// Splits the spanning forest into `target` regions by removing its
/// lowest-similarity edges.
///
/// A forest with more than `target` components already has too many pieces;
/// the `target` largest are kept. A graph with fewer than `target` cells
/// yields one region per cell.
pub fn mst_cluster(graph: &SimilarityGraph, target: usize) -> Result<RegionProposal> {
    if target == 0 {
        return Err(Error::InvalidArgument("target region count must be >= 1".into()));
    }
    if graph.nodes.is_empty() {
        return Err(Error::InvalidArgument("similarity graph has no nodes".into()));
    }
    let cell_count = graph.height * graph.width;
    let regions = if graph.nodes.len() < target {
        log::warn!("only {} cells for {target} regions; one region per cell", graph.nodes.len());
        graph.nodes.iter().map(|&n| vec![n]).collect()
    } else {
        let tree = maximum_spanning_forest(graph);
        let pieces = graph.nodes.len() - tree.len();
        if pieces >= target {
            if pieces > target {
                log::warn!("similarity graph has {pieces} components; keeping the {target} largest");
            }
            let mut comps = components(&graph.nodes, &tree, cell_count);
            // Stable sort keeps smallest-cell order among equal sizes.
            comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
            comps.truncate(target);
            comps.sort_by_key(|c| c[0]);
            comps
        } else {
            let cut = lowest_edges(&tree, target - pieces);
            let kept: Vec<Edge> =
                tree.iter().enumerate().filter(|(i, _)| !cut.contains(i)).map(|(_, e)| *e).collect();
            components(&graph.nodes, &kept, cell_count)
        }
    };
    Ok(describe_regions(graph, regions))
}

/// Indices into `tree` of the `count` lowest-weight edges, ties to the smaller `(a, b)`.
fn lowest_edges(tree: &[Edge], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tree.len()).collect();
    order.sort_by(|&x, &y| {
        let (ex, ey) = (&tree[x], &tree[y]);
        ex.weight.total_cmp(&ey.weight).then((ex.a, ex.b).cmp(&(ey.a, ey.b)))
    });
    order.truncate(count);
    order
}

fn describe_regions(graph: &SimilarityGraph, regions: Vec<Vec<usize>>) -> RegionProposal {
    let mut owner = vec![usize::MAX; graph.height * graph.width];
    for (r, cells) in regions.iter().enumerate() {
        for &c in cells {
            owner[c] = r;
        }
    }
    let mut sums = vec![0.0; regions.len()];
    let mut counts = vec![0usize; regions.len()];
    for e in &graph.edges {
        let r = owner[e.a];
        if r != usize::MAX && r == owner[e.b] {
            sums[r] += e.weight;
            counts[r] += 1;
        }
    }
    let centroids = regions
        .iter()
        .map(|cells| {
            let n = cells.len() as f64;
            let (si, sj) = cells.iter().fold((0.0, 0.0), |(si, sj), &c| {
                let (i, j) = graph.coord(c);
                (si + i as f64, sj + j as f64)
            });
            [si / n, sj / n]
        })
        .collect();
    let mean_similarity = sums.iter().zip(&counts).map(|(&s, &n)| if n == 0 { 1.0 } else { s / n as f64 }).collect();
    RegionProposal { regions, centroids, mean_similarity }
}

/// Three well-spread cells: the cosine medoid, then two farthest-point picks
/// maximizing the minimum cosine distance to the cells already chosen. Ties go
/// to the smaller cell index.
pub fn triangular_seeds(grid: &FeatureGrid) -> Result<[(usize, usize); 3]> {
    let cells = usable_cells(grid)?;
    if cells.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 usable cells for seeds, found {}", cells.len())));
    }
    let unit: Vec<Vec<f64>> = cells
        .iter()
        .map(|&c| {
            let f = grid.cell_feature(c);
            let n = l2_norm(f);
            f.iter().map(|x| x / n).collect()
        })
        .collect();
    let n = cells.len();
    let distance = |a: usize, b: usize| 1.0 - dot(&unit[a], &unit[b]).clamp(-1.0, 1.0);

    let mut best = (f64::INFINITY, 0);
    for a in 0..n {
        let total: f64 = (0..n).map(|b| distance(a, b)).sum();
        if total < best.0 {
            best = (total, a);
        }
    }
    let mut chosen = vec![best.1];
    let mut nearest: Vec<f64> = (0..n).map(|b| distance(best.1, b)).collect();
    while chosen.len() < 3 {
        let mut pick = (f64::NEG_INFINITY, usize::MAX);
        for (a, &d) in nearest.iter().enumerate() {
            if !chosen.contains(&a) && d > pick.0 {
                pick = (d, a);
            }
        }
        chosen.push(pick.1);
        for (b, d) in nearest.iter_mut().enumerate() {
            *d = d.min(distance(pick.1, b));
        }
    }
    let w = grid.width();
    let coord = |i: usize| (cells[chosen[i]] / w, cells[chosen[i]] % w);
    Ok([coord(0), coord(1), coord(2)])
}

/// Regions, centroids and seeds in the shape written by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiReport {
    pub regions: Vec<Vec<usize>>,
    pub centroids: Vec<[f64; 2]>,
    pub seeds: Vec<[usize; 2]>,
}

pub fn propose_regions(grid: &FeatureGrid, target: usize) -> Result<RoiReport> {
    let graph = build_similarity_graph(grid)?;
    let proposal = mst_cluster(&graph, target)?;
    let seeds = triangular_seeds(grid)?.iter().map(|&(i, j)| [i, j]).collect();
    Ok(RoiReport { regions: proposal.regions, centroids: proposal.centroids, seeds })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings have {} and {} items", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&v| pairs(v)).sum();
    let rows: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total == 0.0 { 0.0 } else { rows * cols / total };
    let max = (rows + cols) / 2.0;
    if max == expected {
        // Both labelings are trivial (all one cluster or all singletons).
        return Ok(if a_same_as_b(a, b) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

fn a_same_as_b(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

/// Per-cell region labels for `cells`; cells outside every region get `None`.
pub fn region_labels(proposal: &RegionProposal, cells: &[usize]) -> Vec<Option<usize>> {
    cells.iter().map(|c| proposal.regions.iter().position(|r| r.binary_search(c).is_ok())).collect()
}
