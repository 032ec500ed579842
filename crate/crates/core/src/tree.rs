//! Finite bipartite tree systems of cut pairs.
//!
//! A system carries a constituent metric space at every V-node, a
//! two-point space at every W-node, and an injection of each W-pair into
//! each neighboring constituent. Infinite systems are represented at
//! desk scale by truncations: W-nodes of valence one marked as
//! `frontier` stand for the cut locus, and an optional periodic template
//! records how the tree continues, making end behavior decidable.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::metric::{halver_rescale, FiniteMetricSpace, MetricError, PairCollection};
use crate::rational::Rat;

/// Finite bipartite tree over V-ids and W-ids with a base V-node and
/// frontier markers on the W-nodes where a truncation was cut.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BipartiteTree {
    pub v_nodes: Vec<String>,
    pub w_nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub base: String,
    pub frontier: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum TreeProblem {
    DuplicateId { id: String },
    UnknownVertex { id: String },
    BaseNotVNode { id: String },
    EdgeNotBipartite { v: String, w: String },
    DuplicateEdge { v: String, w: String },
    Disconnected { unreachable: String },
    Cycle { extra_edges: usize },
    InteriorValenceOne { w: String },
    FrontierValence { w: String, valence: usize },
    MissingConstituent { v: String },
    MissingCutPair { w: String },
    MissingInjection { v: String, w: String },
    NonInjective { v: String, w: String },
    /// Two edges into the same constituent with two-point common image.
    ImageOverlap {
        v: String,
        w1: String,
        w2: String,
        overlap: usize,
    },
    BadImageIndex { v: String, w: String, index: usize },
    TemplateProblem { detail: String },
}

impl std::fmt::Display for TreeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeProblem::ImageOverlap { v, w1, w2, overlap } => {
                write!(f, "edges ({v},{w1}) and ({v},{w2}): image overlap = {overlap}")
            }
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TreeError {
    #[error("invalid tree system: {}", .0.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<TreeProblem>),
    #[error("subtree is not connected (split at {0})")]
    SubtreeDisconnected(String),
    #[error("empty subtree")]
    EmptySubtree,
    #[error("unknown vertex {0}")]
    UnknownVertex(String),
    #[error("constituent {v} has fewer than 2 points and cannot anchor a rescale")]
    CannotAnchor { v: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl BipartiteTree {
    pub fn contains(&self, id: &str) -> bool {
        self.v_nodes.iter().any(|v| v == id) || self.w_nodes.iter().any(|w| w == id)
    }

    pub fn is_v(&self, id: &str) -> bool {
        self.v_nodes.iter().any(|v| v == id)
    }

    /// Sorted adjacency map over all vertices.
    pub fn adjacency(&self) -> BTreeMap<String, Vec<String>> {
        let mut adj: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for v in self.v_nodes.iter().chain(self.w_nodes.iter()) {
            adj.insert(v.clone(), Vec::new());
        }
        for (v, w) in &self.edges {
            adj.get_mut(v).unwrap().push(w.clone());
            adj.get_mut(w).unwrap().push(v.clone());
        }
        for nbrs in adj.values_mut() {
            nbrs.sort();
        }
        adj
    }

    /// BFS distances from `from` (in tree edges).
    pub fn distances(&self, from: &str) -> BTreeMap<String, u32> {
        let adj = self.adjacency();
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        dist.insert(from.to_string(), 0u32);
        queue.push_back(from.to_string());
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for nb in &adj[&u] {
                if !dist.contains_key(nb) {
                    dist.insert(nb.clone(), du + 1);
                    queue.push_back(nb.clone());
                }
            }
        }
        dist
    }

    /// Unique vertex path between two vertices, inclusive.
    pub fn path(&self, from: &str, to: &str) -> Vec<String> {
        let adj = self.adjacency();
        let mut parent: BTreeMap<String, String> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        seen.insert(from.to_string());
        queue.push_back(from.to_string());
        while let Some(u) = queue.pop_front() {
            if u == to {
                break;
            }
            for nb in &adj[&u] {
                if seen.insert(nb.clone()) {
                    parent.insert(nb.clone(), u.clone());
                    queue.push_back(nb.clone());
                }
            }
        }
        let mut path = vec![to.to_string()];
        let mut cur = to.to_string();
        while cur != from {
            cur = parent[&cur].clone();
            path.push(cur.clone());
        }
        path.reverse();
        path
    }
}

/// Two-point space at a W-node: the names of its two points.
pub type CutPair = [String; 2];

/// Template class data for eventually periodic instances: a finite
/// quotient pattern whose non-backtracking unfolding is the infinite
/// tree. Each incidence is one edge class between a V-class and a
/// W-class, carrying the image of the W-pair in the V-class space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Template {
    pub v_classes: BTreeMap<String, FiniteMetricSpace>,
    pub w_classes: BTreeMap<String, CutPair>,
    pub incidences: Vec<Incidence>,
    pub base_class: String,
    /// `(v_class, incoming incidence) -> outgoing incidence`: the
    /// designated straight-ahead continuation used to classify the
    /// canonical periodic ray through each frontier direction.
    pub continuation: BTreeMap<(String, String), String>,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Incidence {
    pub id: String,
    pub v_class: String,
    pub w_class: String,
    /// Image indices of the W-pair's two points in the V-class space.
    pub image: [usize; 2],
}

/// Labels tying an unfolded system's vertices back to template classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TemplateInfo {
    pub template: Template,
    pub v_class: BTreeMap<String, String>,
    pub w_class: BTreeMap<String, String>,
    pub edge_incidence: BTreeMap<(String, String), String>,
    /// For each frontier W-node, the incidence realized by its single
    /// in-tree edge (the direction pointing back inside).
    pub frontier_entry: BTreeMap<String, String>,
}

/// A tree system of cut pairs, possibly truncated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeSystem {
    pub tree: BipartiteTree,
    pub constituent: BTreeMap<String, FiniteMetricSpace>,
    pub cut_pair: BTreeMap<String, CutPair>,
    /// Edge `(v, w)` -> indices in `constituent[v]` of the images of the
    /// pair's two points, in `cut_pair[w]` order.
    pub injection: BTreeMap<(String, String), [usize; 2]>,
    pub template: Option<TemplateInfo>,
}

/// A compatible metric table per constituent plus the induced length of
/// every cut pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricAssignment {
    pub tables: BTreeMap<String, FiniteMetricSpace>,
    pub pair_len: BTreeMap<String, Rat>,
}

impl TreeSystem {
    /// Validates all system invariants; violations carry witnesses.
    pub fn build(
        tree: BipartiteTree,
        constituent: BTreeMap<String, FiniteMetricSpace>,
        cut_pair: BTreeMap<String, CutPair>,
        injection: BTreeMap<(String, String), [usize; 2]>,
        template: Option<TemplateInfo>,
    ) -> Result<TreeSystem, TreeError> {
        let mut problems = Vec::new();

        let mut ids = BTreeSet::new();
        for id in tree.v_nodes.iter().chain(tree.w_nodes.iter()) {
            if !ids.insert(id.clone()) {
                problems.push(TreeProblem::DuplicateId { id: id.clone() });
            }
        }
        if !tree.is_v(&tree.base) {
            problems.push(TreeProblem::BaseNotVNode {
                id: tree.base.clone(),
            });
        }
        let mut edge_set = BTreeSet::new();
        for (v, w) in &tree.edges {
            if !tree.is_v(v) || !tree.w_nodes.iter().any(|x| x == w) {
                problems.push(TreeProblem::EdgeNotBipartite {
                    v: v.clone(),
                    w: w.clone(),
                });
            }
            if !edge_set.insert((v.clone(), w.clone())) {
                problems.push(TreeProblem::DuplicateEdge {
                    v: v.clone(),
                    w: w.clone(),
                });
            }
        }
        for w in &tree.frontier {
            if !tree.w_nodes.iter().any(|x| x == w) {
                problems.push(TreeProblem::UnknownVertex { id: w.clone() });
            }
        }
        if problems.is_empty() {
            let dist = tree.distances(&tree.base);
            for id in tree.v_nodes.iter().chain(tree.w_nodes.iter()) {
                if !dist.contains_key(id) {
                    problems.push(TreeProblem::Disconnected {
                        unreachable: id.clone(),
                    });
                    break;
                }
            }
            let n_vertices = tree.v_nodes.len() + tree.w_nodes.len();
            if tree.edges.len() + 1 != n_vertices && problems.is_empty() {
                problems.push(TreeProblem::Cycle {
                    extra_edges: tree.edges.len() + 1 - n_vertices.min(tree.edges.len() + 1),
                });
            }
            let adj = tree.adjacency();
            for w in &tree.w_nodes {
                let valence = adj[w].len();
                if tree.frontier.contains(w) {
                    if valence != 1 {
                        problems.push(TreeProblem::FrontierValence {
                            w: w.clone(),
                            valence,
                        });
                    }
                } else if valence < 2 {
                    problems.push(TreeProblem::InteriorValenceOne { w: w.clone() });
                }
            }
        }

        for v in &tree.v_nodes {
            if !constituent.contains_key(v) {
                problems.push(TreeProblem::MissingConstituent { v: v.clone() });
            }
        }
        for w in &tree.w_nodes {
            if !cut_pair.contains_key(w) {
                problems.push(TreeProblem::MissingCutPair { w: w.clone() });
            }
        }
        for (v, w) in &tree.edges {
            match injection.get(&(v.clone(), w.clone())) {
                None => problems.push(TreeProblem::MissingInjection {
                    v: v.clone(),
                    w: w.clone(),
                }),
                Some(&[a, b]) => {
                    if let Some(space) = constituent.get(v) {
                        for idx in [a, b] {
                            if idx >= space.len() {
                                problems.push(TreeProblem::BadImageIndex {
                                    v: v.clone(),
                                    w: w.clone(),
                                    index: idx,
                                });
                            }
                        }
                        if a == b {
                            problems.push(TreeProblem::NonInjective {
                                v: v.clone(),
                                w: w.clone(),
                            });
                        }
                    }
                }
            }
        }
        // Distinct edges into one constituent share at most one image point.
        let mut by_v: BTreeMap<&String, Vec<(&String, [usize; 2])>> = BTreeMap::new();
        for ((v, w), img) in &injection {
            by_v.entry(v).or_default().push((w, *img));
        }
        for (v, edges) in by_v {
            for i in 0..edges.len() {
                for j in (i + 1)..edges.len() {
                    let a: BTreeSet<usize> = edges[i].1.iter().copied().collect();
                    let b: BTreeSet<usize> = edges[j].1.iter().copied().collect();
                    let overlap = a.intersection(&b).count();
                    if overlap > 1 {
                        problems.push(TreeProblem::ImageOverlap {
                            v: v.clone(),
                            w1: edges[i].0.clone(),
                            w2: edges[j].0.clone(),
                            overlap,
                        });
                    }
                }
            }
        }

        if !problems.is_empty() {
            return Err(TreeError::Invalid(problems));
        }
        Ok(TreeSystem {
            tree,
            constituent,
            cut_pair,
            injection,
            template,
        })
    }

    /// Image pair of edge `(v, w)` inside `constituent[v]`.
    pub fn image(&self, v: &str, w: &str) -> [usize; 2] {
        self.injection[&(v.to_string(), w.to_string())]
    }

    /// Peripheral collection of a constituent: the image pairs of all
    /// incident edges, keyed deterministically by W-id.
    pub fn peripheral(&self, v: &str) -> Vec<(String, [usize; 2])> {
        let mut out: Vec<(String, [usize; 2])> = self
            .injection
            .iter()
            .filter(|((ev, _), _)| ev == v)
            .map(|((_, w), img)| (w.clone(), *img))
            .collect();
        out.sort();
        out
    }

    /// Radius-`2k` truncation about the base. The result keeps every
    /// vertex within tree distance `2k` of the base; W-nodes at distance
    /// `2k + 1` with a neighbor inside are kept as frontier markers of
    /// valence one, so cut-pair data survives for the kettlebell and
    /// completion constructions.
    pub fn truncate(&self, k: u32) -> TreeSystem {
        let dist = self.tree.distances(&self.tree.base);
        let keep = |id: &String| -> bool {
            let d = dist[id];
            d <= 2 * k || (d == 2 * k + 1 && !self.tree.is_v(id))
        };
        let v_nodes: Vec<String> = self.tree.v_nodes.iter().filter(|v| keep(v)).cloned().collect();
        let w_nodes: Vec<String> = self.tree.w_nodes.iter().filter(|w| keep(w)).cloned().collect();
        let edges: Vec<(String, String)> = self
            .tree
            .edges
            .iter()
            .filter(|(v, w)| keep(v) && keep(w))
            .cloned()
            .collect();
        let mut frontier: BTreeSet<String> = self
            .tree
            .frontier
            .iter()
            .filter(|w| keep(w))
            .cloned()
            .collect();
        for w in &w_nodes {
            if dist[w] == 2 * k + 1 {
                frontier.insert(w.clone());
            }
        }
        let kept: BTreeSet<&String> = v_nodes.iter().chain(w_nodes.iter()).collect();
        let constituent = self
            .constituent
            .iter()
            .filter(|(v, _)| kept.contains(v))
            .map(|(k, s)| (k.clone(), s.clone()))
            .collect();
        let cut_pair = self
            .cut_pair
            .iter()
            .filter(|(w, _)| kept.contains(w))
            .map(|(k, p)| (k.clone(), p.clone()))
            .collect();
        let injection: BTreeMap<(String, String), [usize; 2]> = self
            .injection
            .iter()
            .filter(|((v, w), _)| kept.contains(v) && kept.contains(w))
            .map(|(k, img)| (k.clone(), *img))
            .collect();
        let template = self.template.as_ref().map(|info| {
            let mut frontier_entry: BTreeMap<String, String> = BTreeMap::new();
            for w in &frontier {
                // The single in-tree edge at a frontier W-node names the
                // incidence pointing back inside.
                if let Some(((v, _), _)) = injection.iter().find(|((_, ew), _)| ew == w) {
                    if let Some(inc) = info.edge_incidence.get(&(v.clone(), w.clone())) {
                        frontier_entry.insert(w.clone(), inc.clone());
                    }
                }
            }
            TemplateInfo {
                template: info.template.clone(),
                v_class: info
                    .v_class
                    .iter()
                    .filter(|(v, _)| kept.contains(v))
                    .map(|(a, b)| (a.clone(), b.clone()))
                    .collect(),
                w_class: info
                    .w_class
                    .iter()
                    .filter(|(w, _)| kept.contains(w))
                    .map(|(a, b)| (a.clone(), b.clone()))
                    .collect(),
                edge_incidence: info
                    .edge_incidence
                    .iter()
                    .filter(|((v, w), _)| kept.contains(v) && kept.contains(w))
                    .map(|(k, i)| (k.clone(), i.clone()))
                    .collect(),
                frontier_entry,
            }
        });
        let tree = BipartiteTree {
            v_nodes,
            w_nodes,
            edges,
            base: self.tree.base.clone(),
            frontier,
        };
        TreeSystem {
            tree,
            constituent,
            cut_pair,
            injection,
            template,
        }
    }

    /// Compatible shrinking metric assignment with respect to the base.
    ///
    /// The base constituent is uniformly scaled to diameter exactly 1/2;
    /// each deeper constituent is rebuilt by the diameter-halving
    /// rescale anchored at its entry pair with `K` equal to the pair's
    /// already-assigned length. Constituents at tree distance `2k` from
    /// the base then have diameter at most `2^-k`, and every pair one
    /// step outside the radius-`2k` truncation has diameter at most
    /// `2^-(k+1)`.
    pub fn assign_shrinking(&self) -> Result<MetricAssignment, TreeError> {
        let dist = self.tree.distances(&self.tree.base);
        let mut tables: BTreeMap<String, FiniteMetricSpace> = BTreeMap::new();
        let mut pair_len: BTreeMap<String, Rat> = BTreeMap::new();

        let base_space = &self.constituent[&self.tree.base];
        let seeded = {
            let (diam, _) = base_space.diameter();
            if diam.is_zero() {
                base_space.clone()
            } else {
                base_space.scale(&(&Rat::new(1, 2) / &diam))?
            }
        };
        tables.insert(self.tree.base.clone(), seeded);

        let mut v_by_depth: Vec<&String> = self.tree.v_nodes.iter().collect();
        v_by_depth.sort_by_key(|v| (dist[*v], (*v).clone()));
        let adj = self.tree.adjacency();

        for v in v_by_depth {
            if *v == self.tree.base {
                continue;
            }
            // Parent W-node (one step toward the base) and its pair length,
            // defined from the already-assigned side.
            let w = adj[v]
                .iter()
                .find(|w| dist[*w] + 1 == dist[v])
                .expect("non-base V-node has a parent W")
                .clone();
            let vp = adj[&w]
                .iter()
                .find(|u| dist[*u] + 1 == dist[&w])
                .expect("W-node has a parent V")
                .clone();
            let parent_img = self.image(&vp, &w);
            let parent_table = &tables[&vp];
            let k_len = parent_table.d(parent_img[0], parent_img[1]).clone();
            pair_len.insert(w.clone(), k_len.clone());

            let space = &self.constituent[v];
            if space.len() < 2 {
                return Err(TreeError::CannotAnchor { v: v.clone() });
            }
            let peripheral = self.peripheral(v);
            let pairs: Vec<[usize; 2]> = peripheral.iter().map(|(_, img)| *img).collect();
            let coll = PairCollection::new(pairs, space)?;
            let anchor = self.image(v, &w);
            let rescaled = halver_rescale(space, &coll, anchor, &k_len)?;
            tables.insert(v.clone(), rescaled);
        }

        // Pair lengths for W-nodes whose deeper side was never assigned
        // (frontier markers), taken from the inside constituent.
        for w in &self.tree.w_nodes {
            if pair_len.contains_key(w) {
                continue;
            }
            let v = adj[w]
                .iter()
                .find(|u| dist[*u] + 1 == dist[w])
                .expect("W-node has a parent V")
                .clone();
            let img = self.image(&v, w);
            pair_len.insert(w.clone(), tables[&v].d(img[0], img[1]).clone());
        }

        let assignment = MetricAssignment { tables, pair_len };
        debug_assert!(assignment.check_compatible(self).is_ok());
        Ok(assignment)
    }

    /// Uses the constituents' own tables as the assignment, provided
    /// they are compatible: every cut pair must receive the same length
    /// from all incident injections.
    pub fn intrinsic_assignment(&self) -> Result<MetricAssignment, IncompatibleEdge> {
        let tables: BTreeMap<String, FiniteMetricSpace> = self.constituent.clone();
        let mut pair_len = BTreeMap::new();
        for w in &self.tree.w_nodes {
            let mut len: Option<(Rat, (String, String))> = None;
            for ((v, ew), img) in &self.injection {
                if ew != w {
                    continue;
                }
                let d = tables[v].d(img[0], img[1]).clone();
                match &len {
                    None => len = Some((d, (v.clone(), w.clone()))),
                    Some((prev, first_edge)) => {
                        if *prev != d {
                            return Err(IncompatibleEdge {
                                edge: (v.clone(), w.clone()),
                                len: d,
                                other_edge: first_edge.clone(),
                                other_len: prev.clone(),
                            });
                        }
                    }
                }
            }
            if let Some((d, _)) = len {
                pair_len.insert(w.clone(), d);
            }
        }
        Ok(MetricAssignment { tables, pair_len })
    }

    /// Peripheral collection and branch descriptors of a connected
    /// subtree. The two lists are index-aligned.
    pub fn frontier_data(
        &self,
        subtree: &BTreeSet<String>,
    ) -> Result<(Vec<FrontierPair>, Vec<BranchDescriptor>), TreeError> {
        if subtree.is_empty() {
            return Err(TreeError::EmptySubtree);
        }
        for id in subtree {
            if !self.tree.contains(id) {
                return Err(TreeError::UnknownVertex(id.clone()));
            }
        }
        // Connectivity of the induced subgraph.
        let adj = self.tree.adjacency();
        let start = subtree.iter().next().unwrap().clone();
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        seen.insert(start.clone());
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for nb in &adj[&u] {
                if subtree.contains(nb) && seen.insert(nb.clone()) {
                    queue.push_back(nb.clone());
                }
            }
        }
        if let Some(missing) = subtree.iter().find(|id| !seen.contains(*id)) {
            return Err(TreeError::SubtreeDisconnected(missing.clone()));
        }

        let mut directions: Vec<FrontierDirection> = Vec::new();
        for (v, w) in &self.tree.edges {
            let vi = subtree.contains(v);
            let wi = subtree.contains(w);
            if vi != wi {
                directions.push(FrontierDirection::Edge {
                    v: v.clone(),
                    w: w.clone(),
                    w_inside: wi,
                });
            }
        }
        for w in &self.tree.frontier {
            if subtree.contains(w) {
                directions.push(FrontierDirection::Continuation { w: w.clone() });
            }
        }
        directions.sort_by_key(|d| d.sort_key());

        let mut pairs = Vec::new();
        let mut branches = Vec::new();
        for dir in directions {
            let (w_id, seed) = match &dir {
                FrontierDirection::Edge { v, w, w_inside } => {
                    let seed = if *w_inside { v.clone() } else { w.clone() };
                    (w.clone(), Some(seed))
                }
                FrontierDirection::Continuation { w } => (w.clone(), None),
            };
            let vertices = match seed {
                None => BTreeSet::new(),
                Some(seed) => {
                    let mut comp = BTreeSet::new();
                    let mut queue = VecDeque::new();
                    comp.insert(seed.clone());
                    queue.push_back(seed);
                    while let Some(u) = queue.pop_front() {
                        for nb in &adj[&u] {
                            if !subtree.contains(nb) && comp.insert(nb.clone()) {
                                queue.push_back(nb.clone());
                            }
                        }
                    }
                    comp
                }
            };
            pairs.push(FrontierPair {
                direction: dir.clone(),
                w: w_id,
            });
            branches.push(BranchDescriptor {
                direction: dir,
                vertices,
            });
        }
        Ok((pairs, branches))
    }

    /// Vertex set of the radius-`2k` truncation (including its frontier
    /// markers), usable as a filtration member.
    pub fn truncation_vertices(&self, k: u32) -> BTreeSet<String> {
        let dist = self.tree.distances(&self.tree.base);
        self.tree
            .v_nodes
            .iter()
            .chain(self.tree.w_nodes.iter())
            .filter(|id| {
                let d = dist[*id];
                d <= 2 * k || (d == 2 * k + 1 && !self.tree.is_v(id))
            })
            .cloned()
            .collect()
    }

    /// Largest `k` such that the radius-`2k` truncation is meaningful
    /// (base eccentricity over V-nodes, halved).
    pub fn depth(&self) -> u32 {
        let dist = self.tree.distances(&self.tree.base);
        self.tree
            .v_nodes
            .iter()
            .map(|v| dist[v] / 2)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("incompatible metrics: edge ({},{}) gives pair length {len}, but edge ({},{}) gives {other_len}", edge.0, edge.1, other_edge.0, other_edge.1)]
pub struct IncompatibleEdge {
    pub edge: (String, String),
    pub len: Rat,
    pub other_edge: (String, String),
    pub other_len: Rat,
}

impl MetricAssignment {
    /// Exact compatibility: every injection is an isometry from the
    /// pair's length onto its image.
    pub fn check_compatible(&self, system: &TreeSystem) -> Result<(), IncompatibleEdge> {
        for ((v, w), img) in &system.injection {
            let d = self.tables[v].d(img[0], img[1]).clone();
            let expected = &self.pair_len[w];
            if d != *expected {
                return Err(IncompatibleEdge {
                    edge: (v.clone(), w.clone()),
                    len: d,
                    other_edge: (v.clone(), w.clone()),
                    other_len: expected.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One outward direction of a subtree: either a tree edge leaving it or
/// the unseen continuation beyond an in-subtree frontier marker.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind")]
pub enum FrontierDirection {
    Edge { v: String, w: String, w_inside: bool },
    Continuation { w: String },
}

impl FrontierDirection {
    fn sort_key(&self) -> (String, u8, String) {
        match self {
            FrontierDirection::Edge { v, w, .. } => (w.clone(), 0, v.clone()),
            FrontierDirection::Continuation { w } => (w.clone(), 1, String::new()),
        }
    }

    pub fn w_id(&self) -> &str {
        match self {
            FrontierDirection::Edge { w, .. } => w,
            FrontierDirection::Continuation { w } => w,
        }
    }
}

/// A peripheral pair of a subtree: the two points of `w`'s cut pair,
/// realized inside the subtree's total space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrontierPair {
    pub direction: FrontierDirection,
    pub w: String,
}

/// Connected component of the tree minus a subtree, tagged by the
/// direction it hangs from. Continuation directions carry no in-system
/// vertices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BranchDescriptor {
    pub direction: FrontierDirection,
    pub vertices: BTreeSet<String>,
}

impl Template {
    pub fn validate(&self) -> Result<(), TreeError> {
        let mut problems = Vec::new();
        if !self.v_classes.contains_key(&self.base_class) {
            problems.push(TreeProblem::TemplateProblem {
                detail: format!("base class {} is not a V-class", self.base_class),
            });
        }
        let mut inc_ids = BTreeSet::new();
        let mut by_w: BTreeMap<&String, usize> = BTreeMap::new();
        let mut by_v: BTreeMap<&String, Vec<&Incidence>> = BTreeMap::new();
        for inc in &self.incidences {
            if !inc_ids.insert(&inc.id) {
                problems.push(TreeProblem::TemplateProblem {
                    detail: format!("duplicate incidence id {}", inc.id),
                });
            }
            match (self.v_classes.get(&inc.v_class), self.w_classes.get(&inc.w_class)) {
                (Some(space), Some(_)) => {
                    if inc.image[0] == inc.image[1]
                        || inc.image.iter().any(|&i| i >= space.len())
                    {
                        problems.push(TreeProblem::TemplateProblem {
                            detail: format!("incidence {} has a bad image", inc.id),
                        });
                    }
                }
                _ => problems.push(TreeProblem::TemplateProblem {
                    detail: format!("incidence {} references unknown classes", inc.id),
                }),
            }
            *by_w.entry(&inc.w_class).or_insert(0) += 1;
            by_v.entry(&inc.v_class).or_default().push(inc);
        }
        for (w, count) in by_w {
            if count < 2 {
                problems.push(TreeProblem::TemplateProblem {
                    detail: format!("W-class {w} has valence {count} < 2"),
                });
            }
        }
        for (v, incs) in &by_v {
            for i in 0..incs.len() {
                for j in (i + 1)..incs.len() {
                    let a: BTreeSet<usize> = incs[i].image.iter().copied().collect();
                    let b: BTreeSet<usize> = incs[j].image.iter().copied().collect();
                    if a.intersection(&b).count() > 1 {
                        problems.push(TreeProblem::TemplateProblem {
                            detail: format!(
                                "incidences {} and {} overlap in two points of {v}",
                                incs[i].id, incs[j].id
                            ),
                        });
                    }
                }
            }
        }
        for ((vc, inc_in), inc_out) in &self.continuation {
            let ok = self
                .incidences
                .iter()
                .any(|i| &i.id == inc_in && &i.v_class == vc)
                && self
                    .incidences
                    .iter()
                    .any(|i| &i.id == inc_out && &i.v_class == vc)
                && inc_in != inc_out;
            if !ok {
                problems.push(TreeProblem::TemplateProblem {
                    detail: format!("continuation ({vc}, {inc_in}) -> {inc_out} is invalid"),
                });
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TreeError::Invalid(problems))
        }
    }

    /// Straight-ahead incidence at `v_class` when entering via `inc_in`:
    /// the declared continuation, or the cyclically next incidence of
    /// the class in sorted id order.
    pub fn continue_from(&self, v_class: &str, inc_in: &str) -> String {
        if let Some(out) = self
            .continuation
            .get(&(v_class.to_string(), inc_in.to_string()))
        {
            return out.clone();
        }
        let mut ids: Vec<&String> = self
            .incidences
            .iter()
            .filter(|i| i.v_class == v_class)
            .map(|i| &i.id)
            .collect();
        ids.sort();
        let pos = ids.iter().position(|id| *id == inc_in).unwrap_or(0);
        ids[(pos + 1) % ids.len()].clone()
    }

    pub fn incidence(&self, id: &str) -> &Incidence {
        self.incidences.iter().find(|i| i.id == id).unwrap()
    }

    /// Unfolds the pattern into the radius-`2k` truncation of its
    /// universal cover, with frontier markers at depth `2k + 1`.
    pub fn unfold(&self, k: u32) -> Result<TreeSystem, TreeError> {
        self.validate()?;
        let mut v_nodes = Vec::new();
        let mut w_nodes = Vec::new();
        let mut edges = Vec::new();
        let mut frontier = BTreeSet::new();
        let mut constituent = BTreeMap::new();
        let mut cut_pair = BTreeMap::new();
        let mut injection = BTreeMap::new();
        let mut v_class_of = BTreeMap::new();
        let mut w_class_of = BTreeMap::new();
        let mut edge_incidence = BTreeMap::new();
        let mut frontier_entry = BTreeMap::new();

        struct Pending {
            id: String,
            class: String,
            is_v: bool,
            depth: u32,
            // Incidence consumed by the edge to the parent.
            via: Option<String>,
        }

        let mut vc = 0usize;
        let mut wc = 0usize;
        let mut queue = VecDeque::new();
        queue.push_back(Pending {
            id: "v0".to_string(),
            class: self.base_class.clone(),
            is_v: true,
            depth: 0,
            via: None,
        });
        vc += 1;

        while let Some(cur) = queue.pop_front() {
            if cur.is_v {
                v_nodes.push(cur.id.clone());
                constituent.insert(cur.id.clone(), self.v_classes[&cur.class].clone());
                v_class_of.insert(cur.id.clone(), cur.class.clone());
            } else {
                w_nodes.push(cur.id.clone());
                cut_pair.insert(cur.id.clone(), self.w_classes[&cur.class].clone());
                w_class_of.insert(cur.id.clone(), cur.class.clone());
                if cur.depth == 2 * k + 1 {
                    frontier.insert(cur.id.clone());
                    frontier_entry.insert(cur.id.clone(), cur.via.clone().unwrap());
                    continue;
                }
            }
            let mut incs: Vec<&Incidence> = self
                .incidences
                .iter()
                .filter(|i| {
                    if cur.is_v {
                        i.v_class == cur.class
                    } else {
                        i.w_class == cur.class
                    }
                })
                .collect();
            incs.sort_by(|a, b| a.id.cmp(&b.id));
            let mut skipped_parent = false;
            for inc in incs {
                if !skipped_parent && Some(&inc.id) == cur.via.as_ref() {
                    skipped_parent = true;
                    continue;
                }
                let child_depth = cur.depth + 1;
                if cur.is_v {
                    // child is a W-node
                    let wid = format!("w{wc}");
                    wc += 1;
                    edges.push((cur.id.clone(), wid.clone()));
                    injection.insert((cur.id.clone(), wid.clone()), inc.image);
                    edge_incidence.insert((cur.id.clone(), wid.clone()), inc.id.clone());
                    queue.push_back(Pending {
                        id: wid,
                        class: inc.w_class.clone(),
                        is_v: false,
                        depth: child_depth,
                        via: Some(inc.id.clone()),
                    });
                } else {
                    let vid = format!("v{vc}");
                    vc += 1;
                    edges.push((vid.clone(), cur.id.clone()));
                    injection.insert((vid.clone(), cur.id.clone()), inc.image);
                    edge_incidence.insert((vid.clone(), cur.id.clone()), inc.id.clone());
                    queue.push_back(Pending {
                        id: vid,
                        class: inc.v_class.clone(),
                        is_v: true,
                        depth: child_depth,
                        via: Some(inc.id.clone()),
                    });
                }
            }
        }

        let tree = BipartiteTree {
            v_nodes,
            w_nodes,
            edges,
            base: "v0".to_string(),
            frontier,
        };
        let info = TemplateInfo {
            template: self.clone(),
            v_class: v_class_of,
            w_class: w_class_of,
            edge_incidence,
            frontier_entry,
        };
        TreeSystem::build(tree, constituent, cut_pair, injection, Some(info))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn degenerate_single_vertex_system_is_valid() {
        let tree = BipartiteTree {
            v_nodes: vec!["v0".into()],
            w_nodes: vec![],
            edges: vec![],
            base: "v0".into(),
            frontier: BTreeSet::new(),
        };
        let mut constituent = BTreeMap::new();
        constituent.insert(
            "v0".into(),
            FiniteMetricSpace::uniform(vec!["a".into(), "b".into()], Rat::one()),
        );
        let sys = TreeSystem::build(tree, constituent, BTreeMap::new(), BTreeMap::new(), None);
        assert!(sys.is_ok());
    }

    #[test]
    fn two_constituents_through_one_pair_is_valid() {
        let sys = fixtures::pair_system();
        assert_eq!(sys.tree.v_nodes.len(), 2);
        assert_eq!(sys.tree.w_nodes.len(), 1);
    }

    #[test]
    fn identical_images_are_rejected_with_overlap_two() {
        let mut sys = fixtures::pair_system();
        // Second edge into v0 with the same two image points.
        sys.tree.w_nodes.push("w1".into());
        sys.tree.frontier.insert("w1".into());
        sys.tree.edges.push(("v0".into(), "w1".into()));
        sys.cut_pair.insert("w1".into(), ["x".into(), "y".into()]);
        sys.injection
            .insert(("v0".into(), "w1".into()), sys.image("v0", "w0"));
        let rebuilt = TreeSystem::build(
            sys.tree.clone(),
            sys.constituent.clone(),
            sys.cut_pair.clone(),
            sys.injection.clone(),
            None,
        );
        match rebuilt {
            Err(TreeError::Invalid(problems)) => {
                assert!(problems
                    .iter()
                    .any(|p| matches!(p, TreeProblem::ImageOverlap { overlap: 2, .. })));
            }
            other => panic!("expected overlap rejection, got {other:?}"),
        }
    }

    #[test]
    fn truncate_at_zero_keeps_only_the_base_constituent() {
        let sys = fixtures::line_system(2);
        let t0 = sys.truncate(0);
        assert_eq!(t0.tree.v_nodes, vec!["v0".to_string()]);
        assert!(t0.tree.w_nodes.iter().all(|w| t0.tree.frontier.contains(w)));
    }

    #[test]
    fn truncate_beyond_radius_is_identity() {
        let sys = fixtures::line_system(2);
        let t = sys.truncate(99);
        assert_eq!(t, sys);
    }

    #[test]
    fn truncate_composes_as_min() {
        let sys = fixtures::line_system(3);
        let a = sys.truncate(2).truncate(1);
        let b = sys.truncate(1);
        assert_eq!(a, b);
        let c = sys.truncate(1).truncate(2);
        assert_eq!(c, b);
    }

    #[test]
    fn truncation_vertex_set_matches_bfs_oracle() {
        let sys = fixtures::trivalent_system(2);
        let dist = sys.tree.distances(&sys.tree.base);
        for k in 0..=2u32 {
            let t = sys.truncate(k);
            for id in t.tree.v_nodes.iter() {
                assert!(dist[id] <= 2 * k);
            }
            for id in t.tree.w_nodes.iter() {
                let d = dist[id];
                assert!(d <= 2 * k + 1);
                if d == 2 * k + 1 {
                    assert!(t.tree.frontier.contains(id));
                }
            }
            // Oracle: every vertex within the BFS radius appears.
            for (id, d) in &dist {
                if *d <= 2 * k {
                    assert!(t.tree.contains(id), "{id} missing at k={k}");
                }
            }
        }
    }

    #[test]
    fn shrinking_assignment_is_compatible_and_shrinks() {
        let sys = fixtures::trivalent_system(2);
        let assignment = sys.assign_shrinking().unwrap();
        assignment.check_compatible(&sys).unwrap();
        let dist = sys.tree.distances(&sys.tree.base);
        for v in &sys.tree.v_nodes {
            let k = dist[v] / 2;
            let (diam, _) = assignment.tables[v].diameter();
            assert!(
                diam <= Rat::pow2(-(k as i32)),
                "diam({v}) = {diam} exceeds 2^-{k}"
            );
        }
        // Pairs one step outside the radius-2k truncation stay below 2^-(k+1).
        for (w, len) in &assignment.pair_len {
            let k_stage = dist[w] / 2; // w at distance 2k+1 has k_stage = k
            assert!(
                *len <= Rat::pow2(-(k_stage as i32 + 1)),
                "pair {w} has length {len} at stage {k_stage}"
            );
        }
        // Base seeded to diameter exactly 1/2.
        let (d0, _) = assignment.tables[&sys.tree.base].diameter();
        assert_eq!(d0, Rat::new(1, 2));
    }

    #[test]
    fn frontier_data_on_whole_complete_tree_is_empty() {
        let sys = fixtures::pair_system();
        let all: BTreeSet<String> = sys
            .tree
            .v_nodes
            .iter()
            .chain(sys.tree.w_nodes.iter())
            .cloned()
            .collect();
        let (pairs, branches) = sys.frontier_data(&all).unwrap();
        assert!(pairs.is_empty());
        assert!(branches.is_empty());
    }

    #[test]
    fn frontier_data_star_counts_match_valence() {
        let sys = fixtures::trivalent_system(1);
        let sub: BTreeSet<String> = [sys.tree.base.clone()].into();
        let (pairs, branches) = sys.frontier_data(&sub).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(branches.len(), 3);
        for (p, b) in pairs.iter().zip(&branches) {
            assert_eq!(p.direction, b.direction);
            assert!(!b.vertices.is_empty());
        }
    }

    #[test]
    fn frontier_data_matches_component_oracle() {
        let sys = fixtures::trivalent_system(2);
        let sub = sys.truncation_vertices(1);
        let (pairs, branches) = sys.frontier_data(&sub).unwrap();
        assert_eq!(pairs.len(), branches.len());
        // Oracle: components of the complement computed independently.
        let adj = sys.tree.adjacency();
        let mut remaining: BTreeSet<String> = sys
            .tree
            .v_nodes
            .iter()
            .chain(sys.tree.w_nodes.iter())
            .filter(|id| !sub.contains(*id))
            .cloned()
            .collect();
        let mut comps = Vec::new();
        while let Some(seed) = remaining.iter().next().cloned() {
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([seed.clone()]);
            comp.insert(seed.clone());
            remaining.remove(&seed);
            while let Some(u) = queue.pop_front() {
                for nb in &adj[&u] {
                    if remaining.contains(nb) {
                        remaining.remove(nb);
                        comp.insert(nb.clone());
                        queue.push_back(nb.clone());
                    }
                }
            }
            comps.push(comp);
        }
        let edge_branches: Vec<&BranchDescriptor> = branches
            .iter()
            .filter(|b| matches!(b.direction, FrontierDirection::Edge { .. }))
            .collect();
        assert_eq!(edge_branches.len(), comps.len());
        for b in edge_branches {
            assert!(comps.contains(&b.vertices));
        }
        // Every pair has both points realized inside the subtree.
        for p in &pairs {
            match &p.direction {
                FrontierDirection::Edge { v, w, w_inside } => {
                    if !w_inside {
                        assert!(sub.contains(v));
                        assert!(sys.injection.contains_key(&(v.clone(), w.clone())));
                    }
                }
                FrontierDirection::Continuation { w } => {
                    assert!(sub.contains(w));
                }
            }
        }
    }

    #[test]
    fn disconnected_subtree_is_rejected() {
        let sys = fixtures::line_system(2);
        // Two V-nodes not joined within the subset.
        let sub: BTreeSet<String> = ["v1".to_string(), "v2".to_string()].into();
        assert!(matches!(
            sys.frontier_data(&sub),
            Err(TreeError::SubtreeDisconnected(_))
        ));
    }

    #[test]
    fn template_unfolding_depths_and_classes() {
        let sys = fixtures::line_system(3);
        let info = sys.template.as_ref().unwrap();
        // Line: base has two W-neighbors, every V-class is the same.
        let dist = sys.tree.distances(&sys.tree.base);
        assert_eq!(sys.tree.v_nodes.iter().filter(|v| dist[*v] == 2).count(), 2);
        assert_eq!(sys.tree.v_nodes.iter().filter(|v| dist[*v] == 6).count(), 2);
        for class in info.v_class.values() {
            assert_eq!(class, "L");
        }
        assert_eq!(sys.tree.frontier.len(), 2);
    }
}
