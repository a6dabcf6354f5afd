use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synth::{synth_grid, SynthConfig};

fn grid_from(height: usize, width: usize, rows: &[Vec<f64>]) -> FeatureGrid {
    let dim = rows[0].len();
    FeatureGrid::from_features(height, width, dim, rows.concat()).unwrap()
}

fn axis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// Angle-parameterized unit vectors, so cosine distance grows with |Δposition|.
fn on_arc(p: f64) -> Vec<f64> {
    let t = p * std::f64::consts::FRAC_PI_8;
    vec![t.cos(), t.sin()]
}

#[test]
fn two_cell_graphs() {
    let same = grid_from(1, 2, &[vec![1.0, 2.0], vec![2.0, 4.0]]);
    let g = build_similarity_graph(&same).unwrap();
    assert_eq!(g.edges.len(), 1);
    assert!((g.edges[0].weight - 1.0).abs() < 1e-15);
    let orth = grid_from(1, 2, &[axis(2, 0), axis(2, 1)]);
    assert_eq!(build_similarity_graph(&orth).unwrap().edges[0].weight, 0.0);
}

#[test]
fn square_has_four_edges() {
    let g = grid_from(2, 2, &[axis(3, 0), axis(3, 1), axis(3, 2), vec![1.0, 1.0, 1.0]]);
    let graph = build_similarity_graph(&g).unwrap();
    let pairs: Vec<_> = graph.edges.iter().map(|e| (e.a, e.b)).collect();
    assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
}

#[test]
fn invalid_and_zero_cells_are_skipped() {
    let g = FeatureGrid::new(1, 3, 1, vec![1.0, 0.0, 0.0], vec![true, true, false]).unwrap();
    let graph = build_similarity_graph(&g).unwrap();
    assert_eq!(graph.nodes, vec![0]);
    assert!(graph.edges.is_empty());
    let empty = FeatureGrid::new(1, 2, 1, vec![0.0, 0.0], vec![false, false]).unwrap();
    assert!(build_similarity_graph(&empty).is_err());
}

#[test]
fn strip_of_three_blocks() {
    let rows = [axis(3, 0), axis(3, 0), axis(3, 1), axis(3, 1), axis(3, 2), axis(3, 2)];
    let g = grid_from(1, 6, &rows);
    let p = mst_cluster(&build_similarity_graph(&g).unwrap(), 3).unwrap();
    assert_eq!(p.regions, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
    assert_eq!(p.mean_similarity, vec![1.0, 1.0, 1.0]);
    assert_eq!(p.centroids, vec![[0.0, 0.5], [0.0, 2.5], [0.0, 4.5]]);
}

#[test]
fn uniform_features_cut_deterministically() {
    let g = grid_from(2, 3, &vec![vec![1.0, 1.0]; 6]);
    let graph = build_similarity_graph(&g).unwrap();
    let a = mst_cluster(&graph, 3).unwrap();
    let b = mst_cluster(&graph, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.regions.len(), 3);
    assert_eq!(a.regions.iter().map(Vec::len).sum::<usize>(), 6);
}

#[test]
fn diagonal_blobs_are_separated() {
    // Top-left and bottom-right 2×2 blobs share a feature; the other cells form
    // a dissimilar bridge.
    let mut rows = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            rows.push(if (i < 2 && j < 2) || (i >= 2 && j >= 2) { axis(2, 0) } else { vec![-0.2, 1.0] });
        }
    }
    let g = grid_from(4, 4, &rows);
    let p = mst_cluster(&build_similarity_graph(&g).unwrap(), 3).unwrap();
    let region_of = |c: usize| p.regions.iter().position(|r| r.contains(&c)).unwrap();
    assert_ne!(region_of(0), region_of(15));
}

#[test]
fn too_few_cells_gives_singletons() {
    let g = grid_from(1, 2, &[axis(2, 0), axis(2, 1)]);
    let p = mst_cluster(&build_similarity_graph(&g).unwrap(), 3).unwrap();
    assert_eq!(p.regions, vec![vec![0], vec![1]]);
}

#[test]
fn surplus_components_keep_largest() {
    // Valid cells form pieces of sizes 1, 3, 2, 1 separated by invalid cells.
    let valid = [true, false, true, true, true, false, true, true, false, true];
    let features: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let g = FeatureGrid::new(1, 10, 1, features, valid.to_vec()).unwrap();
    let p = mst_cluster(&build_similarity_graph(&g).unwrap(), 3).unwrap();
    assert_eq!(p.regions, vec![vec![0], vec![2, 3, 4], vec![6, 7]]);
}

/// Independent brute force: every pair of removed tree edges, components by
/// flood fill, minimal removed weight wins.
fn best_two_cut(nodes: &[usize], tree: &[Edge]) -> (f64, BTreeSet<Vec<usize>>) {
    let mut best = (f64::INFINITY, BTreeSet::new());
    for x in 0..tree.len() {
        for y in x + 1..tree.len() {
            let kept: Vec<&Edge> = tree.iter().enumerate().filter(|(i, _)| *i != x && *i != y).map(|(_, e)| e).collect();
            let mut seen = BTreeSet::new();
            let mut parts = BTreeSet::new();
            for &start in nodes {
                if seen.contains(&start) {
                    continue;
                }
                let mut stack = vec![start];
                let mut part = vec![];
                seen.insert(start);
                while let Some(n) = stack.pop() {
                    part.push(n);
                    for e in &kept {
                        let other = if e.a == n { e.b } else if e.b == n { e.a } else { continue };
                        if seen.insert(other) {
                            stack.push(other);
                        }
                    }
                }
                part.sort();
                parts.insert(part);
            }
            let cost = tree[x].weight + tree[y].weight;
            if cost < best.0 {
                best = (cost, parts);
            }
        }
    }
    best
}

fn random_grid(rng: &mut ChaCha8Rng, max_cells: usize) -> FeatureGrid {
    loop {
        let h = rng.random_range(1..=4);
        let w = rng.random_range(1..=4);
        if h * w > max_cells || h * w < 3 {
            continue;
        }
        let d = 3;
        let f: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        return FeatureGrid::from_features(h, w, d, f).unwrap();
    }
}

#[test]
fn cut_matches_brute_force_on_small_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let g = random_grid(&mut rng, 12);
        let graph = build_similarity_graph(&g).unwrap();
        let tree = maximum_spanning_forest(&graph);
        assert_eq!(tree.len(), graph.nodes.len() - 1);
        let (_, expected) = best_two_cut(&graph.nodes, &tree);
        let got: BTreeSet<Vec<usize>> = mst_cluster(&graph, 3).unwrap().regions.into_iter().collect();
        assert_eq!(got, expected);
    }
}

/// Heaviest spanning tree weight by trying every edge subset of size n−1.
fn brute_force_max_tree(graph: &SimilarityGraph) -> f64 {
    let n = graph.nodes.len();
    let m = graph.edges.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != n - 1 {
            continue;
        }
        let chosen: Vec<Edge> = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| graph.edges[i]).collect();
        if components(&graph.nodes, &chosen, graph.height * graph.width).len() == 1 {
            best = best.max(chosen.iter().map(|e| e.weight).sum());
        }
    }
    best
}

#[test]
fn spanning_tree_is_maximal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..60 {
        let g = random_grid(&mut rng, 9);
        let graph = build_similarity_graph(&g).unwrap();
        let tree: f64 = maximum_spanning_forest(&graph).iter().map(|e| e.weight).sum();
        assert!((tree - brute_force_max_tree(&graph)).abs() < 1e-12);
    }
}

#[test]
fn planted_blobs_are_recovered() {
    for seed in 0..10 {
        let s = synth_grid(&SynthConfig { height: 12, width: 12, dim: 16, clusters: 3, noise: 0.1, seed }).unwrap();
        let p = mst_cluster(&build_similarity_graph(&s.grid).unwrap(), 3).unwrap();
        let cells: Vec<usize> = (0..144).collect();
        let labels: Vec<usize> = region_labels(&p, &cells).into_iter().map(|l| l.unwrap()).collect();
        let ari = adjusted_rand_index(&labels, &s.labels).unwrap();
        assert!(ari >= 0.9, "seed {seed}: {ari}");
    }
}

#[test]
fn seeds_on_three_cells() {
    let g = grid_from(1, 3, &[axis(2, 0), axis(2, 1), vec![1.0, 1.0]]);
    let seeds = triangular_seeds(&g).unwrap();
    let set: BTreeSet<_> = seeds.iter().collect();
    assert_eq!(set.len(), 3);
    // The 45° cell is nearest to both others.
    assert_eq!(seeds[0], (0, 2));
    assert!(triangular_seeds(&grid_from(1, 2, &[axis(2, 0), axis(2, 1)])).is_err());
}

#[test]
fn duplicate_of_medoid_is_never_picked() {
    let rows = [on_arc(0.0), on_arc(2.0), on_arc(2.0), on_arc(4.0)];
    for perm in [[0, 1, 2, 3], [1, 0, 3, 2], [3, 2, 1, 0], [2, 3, 0, 1]] {
        let ordered: Vec<_> = perm.iter().map(|&i| rows[i].clone()).collect();
        let g = grid_from(1, 4, &ordered);
        let seeds = triangular_seeds(&g).unwrap();
        let medoid = ordered[seeds[0].1].clone();
        for s in &seeds[1..] {
            assert_ne!(ordered[s.1], medoid);
        }
    }
}

#[test]
fn strip_seeds_are_centre_and_ends() {
    let rows: Vec<_> = (0..5).map(|p| on_arc(p as f64)).collect();
    let g = grid_from(1, 5, &rows);
    let seeds = triangular_seeds(&g).unwrap();
    assert_eq!(seeds[0], (0, 2));
    let rest: BTreeSet<_> = seeds[1..].iter().collect();
    assert_eq!(rest, [(0, 0), (0, 4)].iter().collect());
}

#[test]
fn ari_examples() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() < 0.0);
    assert_eq!(adjusted_rand_index(&[0, 0, 0], &[2, 2, 2]).unwrap(), 1.0);
    assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
}

#[test]
fn report_has_regions_and_seeds() {
    let s = synth_grid(&SynthConfig::default()).unwrap();
    let r = propose_regions(&s.grid, 3).unwrap();
    assert_eq!(r.regions.len(), 3);
    assert_eq!(r.centroids.len(), 3);
    assert_eq!(r.seeds.len(), 3);
    let json = serde_json::to_value(&r).unwrap();
    assert!(json.get("regions").is_some() && json.get("centroids").is_some() && json.get("seeds").is_some());
}

proptest! {
    #[test]
    fn regions_are_disjoint_and_cover_nodes(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.random_range(1..=6);
        let w = rng.random_range(1..=6);
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
        prop_assume!(valid.iter().any(|&v| v));
        let f: Vec<f64> = valid.iter().flat_map(|&v| {
            let x: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if v { x } else { [0.0; 2] }
        }).collect();
        let g = FeatureGrid::new(h, w, 2, f, valid).unwrap();
        let graph = build_similarity_graph(&g).unwrap();
        let p = mst_cluster(&graph, 3).unwrap();
        let comps = components(&graph.nodes, &graph.edges, h * w).len();
        let mut all: Vec<usize> = p.regions.concat();
        let n = all.len();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert!(all.iter().all(|c| graph.nodes.contains(c)));
        prop_assert_eq!(p.regions.len(), 3.min(graph.nodes.len()));
        if comps <= 3 {
            prop_assert_eq!(n, graph.nodes.len());
        }
    }

    #[test]
    fn seeds_ignore_positive_scaling(seed in 0u64..500, scale in 0.001f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..20 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = FeatureGrid::from_features(4, 5, 4, f.clone()).unwrap();
        let b = FeatureGrid::from_features(4, 5, 4, f.iter().map(|x| x * scale).collect()).unwrap();
        prop_assert_eq!(triangular_seeds(&a).unwrap(), triangular_seeds(&b).unwrap());
    }
}
