//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxoseg::taxonomy::{Relation, TaxonomyTree};

/// A random forest on `n` nodes with random exclusions between non-nested
/// nodes and random `exclusive_children` parents.
pub fn random_forest(seed: u64, n: usize) -> TaxonomyTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
    let mut parent = vec![None; n];
    let mut edges = Vec::new();
    for (c, slot) in parent.iter_mut().enumerate().skip(1) {
        if rng.random_bool(0.7) {
            let p = rng.random_range(0..c);
            *slot = Some(p);
            edges.push((p, c));
        }
    }
    let nested = |a: usize, b: usize| ancestors(&parent, a).contains(&b) || ancestors(&parent, b).contains(&a);
    let mut exclusions = Vec::new();
    for _ in 0..rng.random_range(0..=n) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !nested(a, b) && !exclusions.contains(&(a, b)) && !exclusions.contains(&(b, a)) {
            exclusions.push((a, b));
        }
    }
    let mut exclusive_children = Vec::new();
    for p in 0..n {
        let kids = parent.iter().filter(|&&q| q == Some(p)).count();
        if kids >= 2 && rng.random_bool(0.4) {
            exclusive_children.push(p);
        }
    }
    TaxonomyTree::new(names, edges, exclusions, exclusive_children).expect("generator emits valid forests")
}

/// Strict ancestors of `x`, nearest first.
pub fn ancestors(parent: &[Option<usize>], mut x: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while let Some(p) = parent[x] {
        out.push(p);
        x = p;
    }
    out
}

/// Relation of `(i, j)` by walking parent paths, without any closure table.
pub fn path_relation(tree: &TaxonomyTree, i: usize, j: usize) -> Relation {
    if i == j {
        return Relation::Identity;
    }
    let parent = tree.parents();
    let up_i = ancestors(&parent, i);
    let up_j = ancestors(&parent, j);
    if up_i.contains(&j) {
        return Relation::Subset;
    }
    if up_j.contains(&i) {
        return Relation::Superset;
    }
    let mut line_i = up_i;
    line_i.push(i);
    let mut line_j = up_j;
    line_j.push(j);
    let mut pairs: Vec<(usize, usize)> = tree.exclusions().to_vec();
    for &p in tree.exclusive_children() {
        let kids: Vec<usize> = (0..tree.len()).filter(|&c| parent[c] == Some(p)).collect();
        for &a in &kids {
            for &b in &kids {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
    }
    let hit = pairs.iter().any(|&(a, b)| {
        (line_i.contains(&a) && line_j.contains(&b)) || (line_i.contains(&b) && line_j.contains(&a))
    });
    if hit {
        Relation::Exclusive
    } else {
        Relation::Unrelated
    }
}

/// Two-sided signed-rank p by listing every sign assignment of `d`.
pub fn enumeration_p(d: &[f64]) -> f64 {
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    // average ranks, recomputed by counting
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let less = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w = observed.min(total - observed);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let wp: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
        if wp.min(total - wp) <= w + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}
