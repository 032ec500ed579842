//! Total space of a tree system with its quotient metric.
//!
//! Points of the glued space are equivalence classes of constituent
//! points under the injections. The distance between two classes is the
//! minimum length of an efficient linking chain: pick representatives,
//! follow the unique tree path between their constituents, and at every
//! cut pair along the way choose one of the two gate points. That is a
//! two-state dynamic program per pair of classes; the all-pairs table is
//! computed in parallel over class pairs with deterministic output.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::par;
use crate::rational::Rat;
use crate::tree::{IncompatibleEdge, MetricAssignment, TreeSystem};

/// One glued point: all (vertex, local point) realizations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GluedClass {
    pub members: BTreeSet<(String, usize)>,
}

impl GluedClass {
    /// Local point index inside a given vertex space, if any.
    pub fn point_in(&self, vertex: &str) -> Option<usize> {
        self.members
            .iter()
            .find(|(v, _)| v == vertex)
            .map(|(_, p)| *p)
    }
}

/// The total space `M_S` of a tree system under a compatible metric
/// assignment.
#[derive(Clone, Debug, Serialize)]
pub struct GluedSpace {
    pub system: TreeSystem,
    pub metrics: MetricAssignment,
    pub classes: Vec<GluedClass>,
    pub dist: Vec<Vec<Rat>>,
    #[serde(skip)]
    class_of: BTreeMap<(String, usize), usize>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GlueError {
    #[error(transparent)]
    Incompatible(#[from] IncompatibleEdge),
    #[error("unknown W-node {0}")]
    UnknownW(String),
    #[error("{w} is a frontier marker; component structure there is not determined at this depth")]
    FrontierPair { w: String },
    #[error("depth {have} is too shallow, need at least {need}")]
    DepthTooShallow { need: u32, have: u32 },
    #[error("eps = {eps} is too small at depth {k}; it must exceed {min_feasible}")]
    EpsTooSmall { eps: Rat, k: u32, min_feasible: Rat },
    #[error("end through {frontier} is classified redundant; its limit is the base point")]
    RedundantEnd { frontier: String },
    #[error("no ray from the base reaches {0}")]
    NoRay(String),
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Glues a system along its injections and computes the full quotient
/// metric table, scanning class pairs in parallel.
pub fn glue(system: &TreeSystem, metrics: &MetricAssignment) -> Result<GluedSpace, GlueError> {
    glue_impl(system, metrics, true)
}

/// Same computation with the sequential scan, for benches and the
/// determinism suite.
pub fn glue_seq(system: &TreeSystem, metrics: &MetricAssignment) -> Result<GluedSpace, GlueError> {
    glue_impl(system, metrics, false)
}

fn glue_impl(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    parallel: bool,
) -> Result<GluedSpace, GlueError> {
    metrics.check_compatible(system)?;
    let mut out = glue_classes_only(system, metrics);
    let n = out.classes.len();
    out.dist = vec![vec![Rat::zero(); n]; n];
    let reps: Vec<(String, usize)> = out
        .classes
        .iter()
        .map(|c| {
            c.members
                .iter()
                .find(|(id, _)| system.tree.is_v(id))
                .expect("class has a constituent member")
                .clone()
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let per_pair = |idx: usize| {
        let (i, j) = pairs[idx];
        chain_distance(system, metrics, &reps[i], &reps[j])
    };
    let values = if parallel {
        par::map_range(pairs.len(), per_pair)
    } else {
        par::map_range_seq(pairs.len(), per_pair)
    };
    for (idx, (i, j)) in pairs.iter().enumerate() {
        out.dist[*i][*j] = values[idx].clone();
        out.dist[*j][*i] = values[idx].clone();
    }
    Ok(out)
}

fn glue_classes_only(system: &TreeSystem, metrics: &MetricAssignment) -> GluedSpace {
    let mut local: Vec<(String, usize)> = Vec::new();
    for v in &system.tree.v_nodes {
        for p in 0..system.constituent[v].len() {
            local.push((v.clone(), p));
        }
    }
    for w in &system.tree.w_nodes {
        local.push((w.clone(), 0));
        local.push((w.clone(), 1));
    }
    let index: BTreeMap<(String, usize), usize> = local
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, k)| (k, i))
        .collect();
    let mut uf = UnionFind::new(local.len());
    for ((v, w), img) in &system.injection {
        for side in 0..2 {
            uf.union(index[&(w.clone(), side)], index[&(v.clone(), img[side])]);
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<(String, usize)>> = BTreeMap::new();
    for (i, key) in local.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().insert(key.clone());
    }
    let mut classes: Vec<GluedClass> = groups
        .into_values()
        .map(|members| GluedClass { members })
        .collect();
    classes.sort_by(|a, b| a.members.iter().next().cmp(&b.members.iter().next()));
    let mut class_of = BTreeMap::new();
    for (ci, class) in classes.iter().enumerate() {
        for key in &class.members {
            class_of.insert(key.clone(), ci);
        }
    }
    GluedSpace {
        system: system.clone(),
        metrics: metrics.clone(),
        classes,
        dist: Vec::new(),
        class_of,
    }
}

/// Minimum length over efficient linking chains between two constituent
/// points, as a two-state DP along the tree path. Valid for any two
/// points whose constituents lie in a common connected subtree, since
/// efficient chains never leave the tree geodesic.
pub(crate) fn chain_distance(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    x: &(String, usize),
    y: &(String, usize),
) -> Rat {
    let (vx, px) = x;
    let (vy, py) = y;
    if vx == vy {
        return metrics.tables[vx].d(*px, *py).clone();
    }
    let path = system.tree.path(vx, vy);
    // path alternates V, W, V, ..., W, V.
    let mut cost: Option<[Rat; 2]> = None;
    let mut prev_v = vx.clone();
    let mut i = 1;
    while i + 1 < path.len() {
        let w = &path[i];
        let next_v = &path[i + 1];
        let img_prev = system.image(&prev_v, w);
        let new_cost: [Rat; 2] = match &cost {
            None => {
                let t = &metrics.tables[&prev_v];
                [t.d(*px, img_prev[0]).clone(), t.d(*px, img_prev[1]).clone()]
            }
            Some(c) => {
                // prev_v interior: enter via its earlier W, leave via w.
                let enter_img = system.image(&prev_v, &path[i - 2]);
                let t = &metrics.tables[&prev_v];
                let step = |g_out: usize| -> Rat {
                    let a = &c[0] + t.d(enter_img[0], img_prev[g_out]);
                    let b = &c[1] + t.d(enter_img[1], img_prev[g_out]);
                    a.min(b)
                };
                [step(0), step(1)]
            }
        };
        cost = Some(new_cost);
        prev_v = next_v.clone();
        i += 2;
    }
    let c = cost.expect("distinct constituents are joined through at least one W");
    let last_w = &path[path.len() - 2];
    let img = system.image(vy, last_w);
    let t = &metrics.tables[vy];
    (&c[0] + t.d(img[0], *py)).min(&c[1] + t.d(img[1], *py))
}

impl GluedSpace {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_of(&self, vertex: &str, point: usize) -> usize {
        self.class_of[&(vertex.to_string(), point)]
    }

    pub fn d(&self, i: usize, j: usize) -> &Rat {
        &self.dist[i][j]
    }

    /// The two classes of a cut pair space.
    pub fn pair_classes(&self, w: &str) -> Result<[usize; 2], GlueError> {
        if !self.system.tree.w_nodes.iter().any(|x| x == w) {
            return Err(GlueError::UnknownW(w.to_string()));
        }
        Ok([self.class_of(w, 0), self.class_of(w, 1)])
    }

    /// Exact diameter of a constituent's class set in the glued table.
    pub fn constituent_diameter(&self, v: &str) -> Rat {
        let ids: Vec<usize> = (0..self.system.constituent[v].len())
            .map(|p| self.class_of(v, p))
            .collect();
        let mut best = Rat::zero();
        for (a, i) in ids.iter().enumerate() {
            for j in ids.iter().skip(a + 1) {
                if self.dist[*i][*j] > best {
                    best = self.dist[*i][*j].clone();
                }
            }
        }
        best
    }

    /// Connectivity at net scale: two classes are adjacent when they are
    /// realized in a common constituent. Components of the complement of
    /// `removed` under that adjacency.
    pub fn components_without(&self, removed: &BTreeSet<usize>) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(self.classes.len());
        for v in &self.system.tree.v_nodes {
            let pts: Vec<usize> = (0..self.system.constituent[v].len())
                .map(|p| self.class_of(v, p))
                .filter(|c| !removed.contains(c))
                .collect();
            for win in pts.windows(2) {
                uf.union(win[0], win[1]);
            }
            if pts.len() > 1 {
                uf.union(pts[0], pts[pts.len() - 1]);
            }
        }
        let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for c in 0..self.classes.len() {
            if removed.contains(&c) {
                continue;
            }
            comps.entry(uf.find(c)).or_default().push(c);
        }
        comps.into_values().collect()
    }

    /// Components after removing an interior cut pair. Their count
    /// equals the number of components of the tree minus that W-node.
    pub fn split_at_pair(&self, w: &str) -> Result<Vec<Vec<usize>>, GlueError> {
        if self.system.tree.frontier.contains(w) {
            return Err(GlueError::FrontierPair { w: w.to_string() });
        }
        let pair = self.pair_classes(w)?;
        let removed: BTreeSet<usize> = pair.iter().copied().collect();
        Ok(self.components_without(&removed))
    }
}

/// Test-support oracle: the quotient distance as a brute-force minimum
/// over all efficient linking chains, enumerating every routing choice
/// at every cut pair along the tree path. Independent of the DP above.
pub mod oracle {
    use super::*;

    pub fn chain_min(
        system: &TreeSystem,
        metrics: &MetricAssignment,
        x: &(String, usize),
        y: &(String, usize),
    ) -> Rat {
        let (vx, px) = x;
        let (vy, py) = y;
        if vx == vy {
            return metrics.tables[vx].d(*px, *py).clone();
        }
        let path = system.tree.path(vx, vy);
        let v_seq: Vec<&String> = path.iter().step_by(2).collect();
        let w_seq: Vec<&String> = path.iter().skip(1).step_by(2).collect();
        let l = w_seq.len();
        let mut best: Option<Rat> = None;
        for mask in 0u64..(1u64 << l) {
            let gates: Vec<usize> = (0..l).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut total = Rat::zero();
            for (i, v) in v_seq.iter().enumerate() {
                let t = &metrics.tables[(*v).as_str()];
                let start = if i == 0 {
                    *px
                } else {
                    system.image(v, w_seq[i - 1])[gates[i - 1]]
                };
                let end = if i == l {
                    *py
                } else {
                    system.image(v, w_seq[i])[gates[i]]
                };
                total += t.d(start, end).clone();
            }
            best = Some(match best {
                None => total,
                Some(b) => b.min(total),
            });
        }
        best.unwrap()
    }

    /// Full table comparison against a glued space.
    pub fn matches_glued(glued: &GluedSpace) -> bool {
        let reps: Vec<(String, usize)> = glued
            .classes
            .iter()
            .map(|c| {
                c.members
                    .iter()
                    .find(|(id, _)| glued.system.tree.is_v(id))
                    .unwrap()
                    .clone()
            })
            .collect();
        for i in 0..glued.len() {
            for j in (i + 1)..glued.len() {
                let expect = chain_min(&glued.system, &glued.metrics, &reps[i], &reps[j]);
                if expect != glued.dist[i][j] {
                    return false;
                }
            }
        }
        true
    }
}

/// Classification of one frontier direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum EndClass {
    /// The canonical ray's cut pairs are eventually a constant point.
    /// `point` is that point's class realization when it is visible
    /// inside the truncation.
    Redundant { point: Option<(String, usize)> },
    NonRedundant,
    /// No template: finite data cannot decide the tail behavior.
    UndecidedAtDepth { depth: u32 },
}

/// One end of the (conceptually infinite) tree, as seen from the base:
/// the alternating ray to a frontier marker plus the classification of
/// its canonical continuation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EndDescriptor {
    pub ray: Vec<String>,
    pub frontier: String,
    pub classification: EndClass,
}

/// One descriptor per frontier direction. Classification is exact for
/// template instances and `UndecidedAtDepth` otherwise.
pub fn enumerate_ends(system: &TreeSystem) -> Vec<EndDescriptor> {
    let depth = system.depth();
    let mut out = Vec::new();
    for w in system.tree.frontier.iter() {
        let ray = system.tree.path(&system.tree.base, w);
        let classification = match &system.template {
            None => EndClass::UndecidedAtDepth { depth },
            Some(info) => classify_template_ray(system, w, info),
        };
        out.push(EndDescriptor {
            ray,
            frontier: w.clone(),
            classification,
        });
    }
    out
}

fn classify_template_ray(
    system: &TreeSystem,
    frontier_w: &str,
    info: &crate::tree::TemplateInfo,
) -> EndClass {
    let template = &info.template;
    let entry = match info.frontier_entry.get(frontier_w) {
        Some(e) => e.clone(),
        None => return EndClass::UndecidedAtDepth {
            depth: system.depth(),
        },
    };
    // Walk the canonical periodic continuation beyond the frontier.
    // Step state: the W-class just crossed and the incidence we crossed
    // it by; per step record whether consecutive pairs share a point and
    // how the pair indices chain through it.
    let mut arrive = entry.clone();
    let steps = 4 * (template.incidences.len() + 2) * (template.incidences.len() + 2) + 8;
    // links[n] = Some((idx_in_pair_n, idx_in_pair_{n+1})) when pair n and
    // pair n+1 share a point inside the constituent between them.
    let mut links: Vec<Option<(usize, usize)>> = Vec::new();
    for _ in 0..steps {
        let w_class = template.incidence(&arrive).w_class.clone();
        let exit = next_w_incidence(template, &w_class, &arrive);
        let v_class = template.incidence(&exit).v_class.clone();
        let onward = template.continue_from(&v_class, &exit);
        let img_in = template.incidence(&exit).image;
        let img_out = template.incidence(&onward).image;
        let mut link = None;
        for (a, ia) in img_in.iter().enumerate() {
            for (b, ib) in img_out.iter().enumerate() {
                if ia == ib {
                    link = Some((a, b));
                }
            }
        }
        links.push(link);
        arrive = onward;
    }
    // Redundant iff a tail of the (eventually periodic) walk is fully
    // chained: every step shares a point and the shared point's index
    // carries over between consecutive steps.
    let window = steps / 2;
    let tail_chained = (window..steps - 1).all(|n| match (links[n], links[n + 1]) {
        (Some((_, out_idx)), Some((in_idx, _))) => out_idx == in_idx,
        _ => false,
    }) && links[window].is_some();
    if !tail_chained {
        return EndClass::NonRedundant;
    }
    // Chained from the very first step: the constant point is already a
    // point of the frontier pair inside the truncation.
    let from_start = (0..steps - 1).all(|n| match (links[n], links[n + 1]) {
        (Some((_, out_idx)), Some((in_idx, _))) => out_idx == in_idx,
        _ => false,
    }) && links[0].is_some();
    let point = if from_start {
        links[0].map(|(idx, _)| (frontier_w.to_string(), idx))
    } else {
        None
    };
    EndClass::Redundant { point }
}

fn next_w_incidence(template: &crate::tree::Template, w_class: &str, arrived: &str) -> String {
    let mut ids: Vec<&String> = template
        .incidences
        .iter()
        .filter(|i| i.w_class == w_class)
        .map(|i| &i.id)
        .collect();
    ids.sort();
    let pos = ids.iter().position(|id| *id == arrived).unwrap_or(0);
    ids[(pos + 1) % ids.len()].clone()
}

/// An end adjoined to the completion approximation, with the depth-`k`
/// gate class standing in for its limit.
#[derive(Clone, Debug, Serialize)]
pub struct AdjoinedEnd {
    pub descriptor: EndDescriptor,
    pub gate_class: usize,
}

/// Finite-depth completion data: the glued base plus one adjoined point
/// per non-redundant end, distances carrying the geometric-tail error
/// bound, and an eps-net covering classes and ends.
#[derive(Clone, Debug, Serialize)]
pub struct CompletionApprox {
    pub depth: u32,
    pub ends: Vec<AdjoinedEnd>,
    /// `dist_to_ends[e][c] = d(gate_e, c)`, correct to within
    /// `end_error` of the true distance to the end.
    pub dist_to_ends: Vec<Vec<Rat>>,
    pub end_error: Rat,
    /// `end_end[e][f] = d(gate_e, gate_f)`, within `end_end_error`.
    pub end_end: Vec<Vec<Rat>>,
    pub end_end_error: Rat,
    pub net: Vec<usize>,
    pub eps: Rat,
}

/// Adjoins non-redundant ends with error bounds `2^-(k-1)` and returns a
/// finite eps-net covering every class and adjoined end.
pub fn approximate_completion(
    glued: &GluedSpace,
    k: u32,
    eps: &Rat,
) -> Result<CompletionApprox, GlueError> {
    let have = glued.system.depth();
    if have < k {
        return Err(GlueError::DepthTooShallow { need: k, have });
    }
    let min_feasible = Rat::pow2(-(k as i32) + 2);
    if *eps < min_feasible {
        return Err(GlueError::EpsTooSmall {
            eps: eps.clone(),
            k,
            min_feasible,
        });
    }

    let dist_from_base = glued.system.tree.distances(&glued.system.tree.base);
    let mut ends = Vec::new();
    for desc in enumerate_ends(&glued.system) {
        if matches!(desc.classification, EndClass::Redundant { .. }) {
            continue;
        }
        // Gate: the ray's W-node at tree distance 2k - 1.
        let gate_w = desc
            .ray
            .iter()
            .find(|id| !glued.system.tree.is_v(id) && dist_from_base[*id] == 2 * k - 1)
            .cloned()
            .ok_or_else(|| GlueError::NoRay(desc.frontier.clone()))?;
        let pair = glued.pair_classes(&gate_w)?;
        let gate_class = pair[0].min(pair[1]);
        ends.push(AdjoinedEnd {
            descriptor: desc,
            gate_class,
        });
    }

    let n = glued.len();
    let dist_to_ends: Vec<Vec<Rat>> = ends
        .iter()
        .map(|e| (0..n).map(|c| glued.dist[e.gate_class][c].clone()).collect())
        .collect();
    let end_end: Vec<Vec<Rat>> = ends
        .iter()
        .map(|e| {
            ends.iter()
                .map(|f| glued.dist[e.gate_class][f.gate_class].clone())
                .collect()
        })
        .collect();

    let end_error = Rat::pow2(-(k as i32) + 1);
    let threshold = eps - &end_error;
    let mut net: Vec<usize> = Vec::new();
    for c in 0..n {
        if net.iter().all(|m| glued.dist[c][*m] > threshold) {
            net.push(c);
        }
    }

    Ok(CompletionApprox {
        depth: k,
        ends,
        dist_to_ends,
        end_error: end_error.clone(),
        end_end,
        end_end_error: Rat::pow2(-(k as i32) + 2),
        net,
        eps: eps.clone(),
    })
}

impl CompletionApprox {
    /// Component split including the adjoined ends, each assigned to the
    /// side its ray continues into.
    pub fn split_at_pair(
        &self,
        glued: &GluedSpace,
        w: &str,
    ) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>), GlueError> {
        let comps = glued.split_at_pair(w)?;
        let removed: BTreeSet<usize> = glued.pair_classes(w)?.iter().copied().collect();
        let mut end_sides: Vec<Vec<usize>> = vec![Vec::new(); comps.len()];
        for (ei, end) in self.ends.iter().enumerate() {
            // Deepest surviving class along the ray places the end.
            let mut placed = None;
            for id in end.descriptor.ray.iter().rev() {
                if glued.system.tree.is_v(id) {
                    continue;
                }
                let pair = glued.pair_classes(id)?;
                if let Some(c) = pair.iter().find(|c| !removed.contains(c)) {
                    placed = Some(*c);
                    break;
                }
            }
            if let Some(c) = placed {
                if let Some(pos) = comps.iter().position(|comp| comp.contains(&c)) {
                    end_sides[pos].push(ei);
                }
            }
        }
        Ok((comps, end_sides))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use std::collections::VecDeque;

    fn glued(sys: &TreeSystem) -> GluedSpace {
        let metrics = sys.assign_shrinking().unwrap();
        glue(sys, &metrics).unwrap()
    }

    #[test]
    fn identified_points_are_one_class() {
        let sys = fixtures::pair_system();
        let g = glued(&sys);
        assert_eq!(g.class_of("w0", 0), g.class_of("v0", 0));
        assert_eq!(g.class_of("w0", 0), g.class_of("v1", 0));
        // 4 + 4 points minus 2 identifications.
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn two_constituent_distance_matches_gate_formula() {
        let sys = fixtures::pair_system();
        let g = glued(&sys);
        let ta = &g.metrics.tables["v0"];
        let tb = &g.metrics.tables["v1"];
        let [a0, a1] = sys.image("v0", "w0");
        let [b0, b1] = sys.image("v1", "w0");
        for x in 0..ta.len() {
            for y in 0..tb.len() {
                let expect = (ta.d(x, a0) + tb.d(b0, y)).min(ta.d(x, a1) + tb.d(b1, y));
                let got = g.dist[g.class_of("v0", x)][g.class_of("v1", y)].clone();
                assert_eq!(got, expect, "x={x} y={y}");
            }
        }
    }

    #[test]
    fn constituents_embed_isometrically() {
        for (_, sys) in fixtures::bundled_tree_systems() {
            let g = glued(&sys);
            for v in &sys.tree.v_nodes {
                let t = &g.metrics.tables[v];
                for x in 0..t.len() {
                    for y in 0..t.len() {
                        let got = &g.dist[g.class_of(v, x)][g.class_of(v, y)];
                        assert_eq!(got, t.d(x, y), "restriction to {v} broken at ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn dp_matches_bruteforce_chain_oracle_on_small_systems() {
        for (name, sys) in fixtures::small_tree_systems() {
            let g = glued(&sys);
            assert!(oracle::matches_glued(&g), "oracle mismatch on {name}");
        }
    }

    #[test]
    fn glued_table_is_a_metric() {
        for (name, sys) in fixtures::bundled_tree_systems() {
            let g = glued(&sys);
            let pts: Vec<String> = (0..g.len()).map(|i| format!("c{i}")).collect();
            let space = crate::metric::FiniteMetricSpace::new(pts, g.dist.clone()).unwrap();
            assert!(
                space.validate_metric().is_metric(),
                "glued table of {name} violates an axiom"
            );
        }
    }

    #[test]
    fn shrinking_diameters_hold_in_glued_table() {
        let sys = fixtures::trivalent_system(2);
        let g = glued(&sys);
        let dist = sys.tree.distances(&sys.tree.base);
        for v in &sys.tree.v_nodes {
            let k = dist[v] / 2;
            assert!(g.constituent_diameter(v) <= Rat::pow2(-(k as i32)));
        }
    }

    #[test]
    fn split_at_valence_three_pair_gives_three_components() {
        let sys = fixtures::quad_system();
        let g = glued(&sys);
        let comps = g.split_at_pair("w0").unwrap();
        assert_eq!(comps.len(), 3);
    }

    #[test]
    fn removing_a_non_cut_pair_keeps_one_component() {
        let sys = fixtures::quad_system();
        let g = glued(&sys);
        // alternate pair inside v0, not any cut pair
        let removed: BTreeSet<usize> = [g.class_of("v0", 2), g.class_of("v0", 3)].into();
        assert_eq!(g.components_without(&removed).len(), 1);
    }

    #[test]
    fn split_membership_matches_tree_sides() {
        let sys = fixtures::trivalent_system(2);
        let g = glued(&sys);
        for w in sys.tree.w_nodes.iter().filter(|w| !sys.tree.frontier.contains(*w)) {
            let comps = g.split_at_pair(w).unwrap();
            // tree component count oracle
            let adj = sys.tree.adjacency();
            let mut remaining: BTreeSet<String> = sys
                .tree
                .v_nodes
                .iter()
                .chain(sys.tree.w_nodes.iter())
                .filter(|id| *id != w)
                .cloned()
                .collect();
            let mut tree_comps: Vec<BTreeSet<String>> = Vec::new();
            while let Some(seed) = remaining.iter().next().cloned() {
                let mut comp = BTreeSet::new();
                let mut queue = VecDeque::from([seed.clone()]);
                remaining.remove(&seed);
                comp.insert(seed);
                while let Some(u) = queue.pop_front() {
                    for nb in &adj[&u] {
                        if remaining.contains(nb) {
                            remaining.remove(nb);
                            comp.insert(nb.clone());
                            queue.push_back(nb.clone());
                        }
                    }
                }
                tree_comps.push(comp);
            }
            assert_eq!(comps.len(), tree_comps.len(), "at {w}");
            // every other interior pair's non-shared classes sit in the
            // component matching its tree side
            let removed: BTreeSet<usize> = g.pair_classes(w).unwrap().iter().copied().collect();
            for w2 in sys.tree.w_nodes.iter() {
                if w2 == w {
                    continue;
                }
                let side = tree_comps.iter().position(|c| c.contains(w2)).unwrap();
                for cls in g.pair_classes(w2).unwrap() {
                    if removed.contains(&cls) {
                        continue;
                    }
                    let got = comps.iter().position(|c| c.contains(&cls)).unwrap();
                    let expected_vertices = &tree_comps[side];
                    // the component holding cls must be the one whose
                    // classes live on the same tree side
                    let comp_vertices: BTreeSet<&String> = comps[got]
                        .iter()
                        .flat_map(|c| g.classes[*c].members.iter().map(|(v, _)| v))
                        .collect();
                    assert!(
                        comp_vertices.iter().any(|v| expected_vertices.contains(*v)),
                        "pair {w2} landed on the wrong side of {w}"
                    );
                }
            }
        }
    }

    #[test]
    fn split_at_frontier_is_refused() {
        let sys = fixtures::line_system(1);
        let g = glued(&sys);
        let w = sys.tree.frontier.iter().next().unwrap();
        assert!(matches!(
            g.split_at_pair(w),
            Err(GlueError::FrontierPair { .. })
        ));
    }

    #[test]
    fn incompatible_metrics_are_rejected_with_edge() {
        let sys = fixtures::pair_system();
        // intrinsic tables: v0 is skewed (pair length 1), v1 uniform
        // (pair length 1) - compatible. Break one side.
        let mut bad = sys.clone();
        bad.constituent.insert(
            "v1".into(),
            crate::metric::FiniteMetricSpace::uniform(
                vec!["p0".into(), "p1".into(), "p2".into(), "p3".into()],
                Rat::new(1, 3),
            ),
        );
        assert!(bad.intrinsic_assignment().is_err());
    }

    #[test]
    fn ends_classified_by_template() {
        let line = fixtures::line_system(2);
        for end in enumerate_ends(&line) {
            assert_eq!(end.classification, EndClass::NonRedundant);
        }
        let share = fixtures::lineshare_system(2);
        for end in enumerate_ends(&share) {
            match end.classification {
                EndClass::Redundant { point: Some((ref w, _)) } => {
                    assert_eq!(w, &end.frontier);
                }
                ref other => panic!("expected redundant with visible point, got {other:?}"),
            }
        }
        let tri = fixtures::trivalent_system(1);
        for end in enumerate_ends(&tri) {
            assert_eq!(end.classification, EndClass::NonRedundant);
        }
    }

    #[test]
    fn ends_without_template_are_undecided() {
        let mut sys = fixtures::line_system(2);
        sys.template = None;
        for end in enumerate_ends(&sys) {
            assert!(matches!(
                end.classification,
                EndClass::UndecidedAtDepth { depth: 2 }
            ));
        }
    }

    #[test]
    fn template_classification_stable_under_doubling() {
        // Frontier directions are compared by the W-class they cut
        // through; the classification multiset must not move when the
        // unfolding depth doubles.
        let signature = |sys: &TreeSystem| -> Vec<(String, EndClass)> {
            let info = sys.template.as_ref().unwrap();
            let mut sig: Vec<(String, EndClass)> = enumerate_ends(sys)
                .into_iter()
                .map(|e| {
                    let kind = match e.classification {
                        EndClass::Redundant { .. } => EndClass::Redundant { point: None },
                        other => other,
                    };
                    (info.w_class[&e.frontier].clone(), kind)
                })
                .collect();
            sig.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
            sig.dedup();
            sig
        };
        for k in [1u32, 2] {
            let a = signature(&fixtures::lineshare_system(k));
            let b = signature(&fixtures::lineshare_system(2 * k));
            assert_eq!(a, b);
            let a = signature(&fixtures::trivalent_system(k));
            let b = signature(&fixtures::trivalent_system(2 * k));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn completion_adjoins_only_non_redundant_ends() {
        let share = fixtures::lineshare_system(3);
        let g = glued(&share);
        let c = approximate_completion(&g, 3, &Rat::new(1, 2)).unwrap();
        assert!(c.ends.is_empty());

        let line = fixtures::line_system(3);
        let g = glued(&line);
        let c = approximate_completion(&g, 3, &Rat::new(1, 2)).unwrap();
        assert_eq!(c.ends.len(), 2);
        // two ends branching at the base stay a positive distance apart
        assert!(c.end_end[0][1].is_positive());
    }

    #[test]
    fn net_covers_all_classes_and_ends() {
        let sys = fixtures::trivalent_system(3);
        let g = glued(&sys);
        let eps = Rat::new(1, 2);
        let c = approximate_completion(&g, 3, &eps).unwrap();
        let threshold = &eps - &c.end_error;
        for cls in 0..g.len() {
            assert!(
                c.net.iter().any(|m| g.dist[cls][*m] <= threshold),
                "class {cls} not covered"
            );
        }
        for (ei, _end) in c.ends.iter().enumerate() {
            assert!(c
                .net
                .iter()
                .any(|m| c.dist_to_ends[ei][*m].clone() + c.end_error.clone() <= eps));
        }
    }

    #[test]
    fn eps_below_feasible_is_refused_with_minimum() {
        let sys = fixtures::line_system(3);
        let g = glued(&sys);
        match approximate_completion(&g, 3, &Rat::new(1, 8)) {
            Err(GlueError::EpsTooSmall { min_feasible, .. }) => {
                assert_eq!(min_feasible, Rat::new(1, 2));
            }
            other => panic!("expected eps refusal, got {other:?}"),
        }
    }

    #[test]
    fn end_gate_distances_are_monotone_in_depth() {
        let sys = fixtures::line_system(4);
        let g4 = glued(&sys);
        let c3 = approximate_completion(&g4, 3, &Rat::new(2, 3)).unwrap();
        let c4 = approximate_completion(&g4, 4, &Rat::new(1, 3)).unwrap();
        // ends match up by frontier marker (same system, same rays)
        for (e3, e4) in c3.ends.iter().zip(c4.ends.iter()) {
            assert_eq!(e3.descriptor.frontier, e4.descriptor.frontier);
            for cls in 0..g4.len() {
                let delta = (&g4.dist[e3.gate_class][cls] - &g4.dist[e4.gate_class][cls]).abs();
                assert!(delta <= Rat::pow2(-2), "entry moved more than 2^-(k-1)");
            }
        }
    }
}
