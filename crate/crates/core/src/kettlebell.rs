//! Kettlebell spaces and the inverse system they form.
//!
//! The kettlebell space over a finite subtree `F` is the glued space
//! `M_F` with one peripheral arc attached along each outward direction:
//! a closed interval of length `d(a, b)` whose endpoints are identified
//! with the direction's cut pair `{a, b}`. Bonding maps run from larger
//! subtrees to smaller ones: the retained part maps by the identity and
//! each discarded branch is projected onto its peripheral arc by the
//! Urysohn map. Bonds compose along augmenting chains one vertex at a
//! time; the composite is independent of the chain order, which the
//! test-suite verifies rather than assumes.
//!
//! Points are represented structurally (a constituent point, or an arc
//! direction plus an exact parameter), so bonding never materializes
//! intermediate distance tables.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::glue::{chain_distance, EndClass, EndDescriptor};
use crate::par;
use crate::rational::Rat;
use crate::tree::{FrontierDirection, MetricAssignment, TreeSystem};

/// What lies beyond an arc's cut pair, distinguishing parallel arcs on
/// the same pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Beyond {
    /// The W-node itself is outside the subtree.
    WOutside,
    /// The W-node is inside; the arc points at this outside V-neighbor.
    NextV(String),
    /// The W-node is a frontier marker; the arc stands for the unseen
    /// remainder.
    Frontier,
}

/// One peripheral arc direction of a kettlebell space.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ArcDir {
    pub w: String,
    pub beyond: Beyond,
}

/// A point of a kettlebell space: a constituent point of the base, or a
/// position on a peripheral arc with `0 <= t <= len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum KPoint {
    Base { vertex: String, point: usize },
    OnArc { dir: ArcDir, t: Rat },
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum KettleError {
    #[error("subtree is empty or has no constituent")]
    EmptySubtree,
    #[error("subtree is not connected near {0}")]
    Disconnected(String),
    #[error("W-node {0} has no constituent neighbor inside the subtree")]
    DanglingW(String),
    #[error("unknown vertex {0}")]
    UnknownVertex(String),
    #[error("arc at {w} would be degenerate: its pair has length 0")]
    DegenerateArc { w: String },
    #[error("target subtree is not contained in the source subtree (missing {0})")]
    NotSubset(String),
    #[error("point lies outside the subtree; extend it by {needed:?}")]
    PointOutside { needed: BTreeSet<String> },
    #[error("end through {frontier} is redundant; its limit is a base point, use gamma on the redundant point instead")]
    RedundantEnd { frontier: String },
    #[error("ray supports only {available} nested steps, {requested} requested")]
    RayTooShort { available: usize, requested: usize },
}

/// View of the kettlebell space over one subtree.
pub struct Kettlebell<'a> {
    pub system: &'a TreeSystem,
    pub metrics: &'a MetricAssignment,
    pub subtree: BTreeSet<String>,
}

/// Builds the kettlebell view, validating the subtree: connected,
/// containing at least one constituent, every W-node accompanied by a
/// constituent neighbor, and no degenerate arcs.
pub fn build_kettlebell<'a>(
    system: &'a TreeSystem,
    metrics: &'a MetricAssignment,
    subtree: BTreeSet<String>,
) -> Result<Kettlebell<'a>, KettleError> {
    if subtree.is_empty() || !subtree.iter().any(|id| system.tree.is_v(id)) {
        return Err(KettleError::EmptySubtree);
    }
    for id in &subtree {
        if !system.tree.contains(id) {
            return Err(KettleError::UnknownVertex(id.clone()));
        }
    }
    let adj = system.tree.adjacency();
    let start = subtree.iter().next().unwrap().clone();
    let mut seen: BTreeSet<String> = [start.clone()].into();
    let mut stack = vec![start];
    while let Some(u) = stack.pop() {
        for nb in &adj[&u] {
            if subtree.contains(nb) && seen.insert(nb.clone()) {
                stack.push(nb.clone());
            }
        }
    }
    if let Some(missing) = subtree.iter().find(|id| !seen.contains(*id)) {
        return Err(KettleError::Disconnected(missing.clone()));
    }
    for id in &subtree {
        if !system.tree.is_v(id) && !adj[id].iter().any(|v| subtree.contains(v)) {
            return Err(KettleError::DanglingW(id.clone()));
        }
    }
    let kb = Kettlebell {
        system,
        metrics,
        subtree,
    };
    for dir in kb.arcs() {
        if !kb.arc_len(&dir).is_positive() {
            return Err(KettleError::DegenerateArc { w: dir.w });
        }
    }
    Ok(kb)
}

impl<'a> Kettlebell<'a> {
    /// All arc directions, deterministically ordered.
    pub fn arcs(&self) -> Vec<ArcDir> {
        let (pairs, _) = self
            .system
            .frontier_data(&self.subtree)
            .expect("subtree validated at construction");
        pairs
            .into_iter()
            .map(|p| match p.direction {
                FrontierDirection::Edge { v, w, w_inside } => {
                    if w_inside {
                        ArcDir {
                            w,
                            beyond: Beyond::NextV(v),
                        }
                    } else {
                        ArcDir {
                            w,
                            beyond: Beyond::WOutside,
                        }
                    }
                }
                FrontierDirection::Continuation { w } => ArcDir {
                    w,
                    beyond: Beyond::Frontier,
                },
            })
            .collect()
    }

    pub fn arc_len(&self, dir: &ArcDir) -> Rat {
        self.metrics.pair_len[&dir.w].clone()
    }

    /// In-subtree realizations of the arc's two endpoints, in cut pair
    /// point order.
    pub fn arc_anchor(&self, dir: &ArcDir) -> [(String, usize); 2] {
        let host = self.arc_host(&dir.w);
        let img = self.system.image(&host, &dir.w);
        [(host.clone(), img[0]), (host, img[1])]
    }

    // Deterministic in-subtree constituent carrying a pair.
    fn arc_host(&self, w: &str) -> String {
        let adj = self.system.tree.adjacency();
        adj[w]
            .iter()
            .filter(|v| self.subtree.contains(*v))
            .min()
            .expect("every W touching the subtree has an inside neighbor")
            .clone()
    }

    /// Canonical form: arc endpoints become base points, base points on
    /// W-vertices are realized in a constituent.
    pub fn canonicalize(&self, p: &KPoint) -> KPoint {
        match p {
            KPoint::Base { vertex, point } => {
                if self.system.tree.is_v(vertex) {
                    p.clone()
                } else {
                    let host = self.arc_host(vertex);
                    let img = self.system.image(&host, vertex);
                    KPoint::Base {
                        vertex: host,
                        point: img[*point],
                    }
                }
            }
            KPoint::OnArc { dir, t } => {
                let [a, b] = self.arc_anchor(dir);
                let len = self.arc_len(dir);
                if t.is_zero() {
                    KPoint::Base {
                        vertex: a.0,
                        point: a.1,
                    }
                } else if *t == len {
                    KPoint::Base {
                        vertex: b.0,
                        point: b.1,
                    }
                } else {
                    p.clone()
                }
            }
        }
    }

    fn base_dist(&self, x: &(String, usize), y: &(String, usize)) -> Rat {
        chain_distance(self.system, self.metrics, x, y)
    }

    /// Quotient metric of the kettlebell space: base distances are the
    /// glued metric, arc-to-base routes through the nearer endpoint, and
    /// distinct arcs route through the four endpoint combinations.
    pub fn distance(&self, p: &KPoint, q: &KPoint) -> Rat {
        let p = self.canonicalize(p);
        let q = self.canonicalize(q);
        match (&p, &q) {
            (
                KPoint::Base {
                    vertex: vx,
                    point: px,
                },
                KPoint::Base {
                    vertex: vy,
                    point: py,
                },
            ) => self.base_dist(&(vx.clone(), *px), &(vy.clone(), *py)),
            (KPoint::Base { vertex, point }, KPoint::OnArc { dir, t })
            | (KPoint::OnArc { dir, t }, KPoint::Base { vertex, point }) => {
                let [a, b] = self.arc_anchor(dir);
                let len = self.arc_len(dir);
                let x = (vertex.clone(), *point);
                (t + &self.base_dist(&a, &x)).min(&(&len - t) + &self.base_dist(&b, &x))
            }
            (KPoint::OnArc { dir: d1, t: t1 }, KPoint::OnArc { dir: d2, t: t2 }) => {
                if d1 == d2 {
                    (t1 - t2).abs()
                } else {
                    let [a1, b1] = self.arc_anchor(d1);
                    let len1 = self.arc_len(d1);
                    let [a2, b2] = self.arc_anchor(d2);
                    let len2 = self.arc_len(d2);
                    let exits1 = [(t1.clone(), a1), (&len1 - t1, b1)];
                    let exits2 = [(t2.clone(), a2), (&len2 - t2, b2)];
                    let mut best: Option<Rat> = None;
                    for (c1, e1) in &exits1 {
                        for (c2, e2) in &exits2 {
                            let total = c1 + &(c2 + &self.base_dist(e1, e2));
                            best = Some(match best {
                                None => total,
                                Some(b) => b.min(total),
                            });
                        }
                    }
                    best.unwrap()
                }
            }
        }
    }

    /// Exact point equality in the quotient.
    pub fn same_point(&self, p: &KPoint, q: &KPoint) -> bool {
        self.distance(p, q).is_zero()
    }
}

/// Chain orders for composing bonds; the result must not depend on the
/// choice, which tests verify explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainOrder {
    Lex,
    RevLex,
}

// Single downward step: remove a pendant W-node. Parallel arcs beyond it
// all land identically on the single outside-direction arc.
fn step_remove_w(system: &TreeSystem, after: &BTreeSet<String>, w: &str, p: &KPoint) -> KPoint {
    match p {
        KPoint::Base { vertex, point } if vertex == w => {
            let adj = system.tree.adjacency();
            let host = adj[w]
                .iter()
                .filter(|v| after.contains(*v))
                .min()
                .expect("pendant W keeps its parent")
                .clone();
            let img = system.image(&host, w);
            KPoint::Base {
                vertex: host,
                point: img[*point],
            }
        }
        KPoint::OnArc { dir, t } if dir.w == w => KPoint::OnArc {
            dir: ArcDir {
                w: w.to_string(),
                beyond: Beyond::WOutside,
            },
            t: t.clone(),
        },
        other => other.clone(),
    }
}

// Distance from a local point of the removed constituent to one end of
// its entry pair, inside the pre-step space: direct, or around through
// the other end.
fn side_distance(
    table: &crate::metric::FiniteMetricSpace,
    img: [usize; 2],
    len: &Rat,
    p_idx: usize,
    end: usize,
) -> Rat {
    let direct = table.d(p_idx, img[end]).clone();
    let around = table.d(p_idx, img[1 - end]) + len;
    direct.min(around)
}

// Single downward step: remove a leaf constituent `x`, projecting its
// side onto the peripheral arc of the pair joining it to the rest.
fn step_remove_v(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    after: &BTreeSet<String>,
    x: &str,
    p: &KPoint,
) -> KPoint {
    let adj = system.tree.adjacency();
    let w = adj[x]
        .iter()
        .find(|w| after.contains(*w))
        .expect("leaf constituent attaches through one W")
        .clone();
    let img = system.image(x, &w);
    let len = metrics.pair_len[&w].clone();
    let table = &metrics.tables[x];
    let target = ArcDir {
        w: w.clone(),
        beyond: Beyond::NextV(x.to_string()),
    };
    let urysohn = |da: Rat, db: Rat| -> KPoint {
        let t = &(&da * &len) / &(&da + &db);
        KPoint::OnArc {
            dir: target.clone(),
            t,
        }
    };
    match p {
        KPoint::Base { vertex, point } if vertex == x => urysohn(
            side_distance(table, img, &len, *point, 0),
            side_distance(table, img, &len, *point, 1),
        ),
        KPoint::OnArc { dir, t } if arc_hangs_off(system, after, dir, x) => {
            let jmg = system.image(x, &dir.w);
            let alen = metrics.pair_len[&dir.w].clone();
            let da = (t + &side_distance(table, img, &len, jmg[0], 0))
                .min(&(&alen - t) + &side_distance(table, img, &len, jmg[1], 0));
            let db = (t + &side_distance(table, img, &len, jmg[0], 1))
                .min(&(&alen - t) + &side_distance(table, img, &len, jmg[1], 1));
            urysohn(da, db)
        }
        other => other.clone(),
    }
}

// Whether an arc sits on the removed constituent's side: its W-node is
// an outside neighbor of `x`.
fn arc_hangs_off(system: &TreeSystem, after: &BTreeSet<String>, dir: &ArcDir, x: &str) -> bool {
    if after.contains(&dir.w) {
        return false;
    }
    let adj = system.tree.adjacency();
    adj[x].iter().any(|w| w == &dir.w)
}

// Upward augmenting chain from `to` to `from`: vertices added one at a
// time, each adjacent to the current subtree, in the requested order.
fn augmenting_chain(
    system: &TreeSystem,
    from: &BTreeSet<String>,
    to: &BTreeSet<String>,
    order: ChainOrder,
) -> Result<Vec<String>, KettleError> {
    if let Some(missing) = to.iter().find(|id| !from.contains(*id)) {
        return Err(KettleError::NotSubset(missing.clone()));
    }
    let adj = system.tree.adjacency();
    let mut current = to.clone();
    let mut added = Vec::new();
    while current.len() < from.len() {
        let candidates: Vec<&String> = from
            .iter()
            .filter(|id| !current.contains(*id))
            .filter(|id| adj[*id].iter().any(|nb| current.contains(nb)))
            .collect();
        let pick = match order {
            ChainOrder::Lex => candidates.iter().min(),
            ChainOrder::RevLex => candidates.iter().max(),
        }
        .expect("source subtree is connected, so a candidate exists")
        .to_string();
        current.insert(pick.clone());
        added.push(pick);
    }
    Ok(added)
}

/// Bonding map from the kettlebell space over `from` to the one over
/// `to`, composed along an augmenting chain in the given order.
pub fn bond(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    from: &BTreeSet<String>,
    to: &BTreeSet<String>,
    p: &KPoint,
    order: ChainOrder,
) -> Result<KPoint, KettleError> {
    let added = augmenting_chain(system, from, to, order)?;
    let mut cur_set = from.clone();
    let mut point = p.clone();
    for x in added.iter().rev() {
        cur_set.remove(x);
        point = if system.tree.is_v(x) {
            step_remove_v(system, metrics, &cur_set, x, &point)
        } else {
            step_remove_w(system, &cur_set, x, &point)
        };
    }
    let kb = build_kettlebell(system, metrics, to.clone())?;
    Ok(kb.canonicalize(&point))
}

/// Projection of a point of the total space into the kettlebell space
/// over `F`: the identity on points already inside, the bonding map from
/// any larger subtree otherwise.
pub fn gamma(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    f: &BTreeSet<String>,
    vertex: &str,
    point: usize,
) -> Result<KPoint, KettleError> {
    if !system.tree.contains(vertex) {
        return Err(KettleError::UnknownVertex(vertex.to_string()));
    }
    // Normalize W-realizations to a constituent realization first.
    let (vertex, point) = if system.tree.is_v(vertex) {
        (vertex.to_string(), point)
    } else {
        let adj = system.tree.adjacency();
        let host = adj[vertex].iter().min().unwrap().clone();
        let img = system.image(&host, vertex);
        (host, img[point])
    };
    if f.contains(&vertex) {
        let kb = build_kettlebell(system, metrics, f.clone())?;
        return Ok(kb.canonicalize(&KPoint::Base { vertex, point }));
    }
    // F' = F plus the tree geodesic from the vertex to F.
    let base_in_f = f
        .iter()
        .filter(|id| system.tree.is_v(id))
        .min()
        .ok_or(KettleError::EmptySubtree)?
        .clone();
    let path = system.tree.path(&vertex, &base_in_f);
    let mut needed: BTreeSet<String> = BTreeSet::new();
    for id in &path {
        if f.contains(id) {
            break;
        }
        needed.insert(id.clone());
    }
    let mut from = f.clone();
    from.extend(needed.iter().cloned());
    bond(
        system,
        metrics,
        &from,
        f,
        &KPoint::Base { vertex, point },
        ChainOrder::Lex,
    )
}

/// A closed subinterval of one peripheral arc.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArcInterval {
    pub dir: ArcDir,
    pub lo: Rat,
    pub hi: Rat,
}

impl ArcInterval {
    pub fn length(&self) -> Rat {
        &self.hi - &self.lo
    }

    pub fn contains(&self, other: &ArcInterval) -> bool {
        self.dir == other.dir && self.lo <= other.lo && other.hi <= self.hi
    }
}

// Propagates an interval on an arc through one removal step. Image
// intervals are exact: the Urysohn value is a Moebius function of the
// parameter between routing breakpoints, so evaluating at the interval
// endpoints and the breakpoints suffices.
fn propagate_interval(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    after: &BTreeSet<String>,
    removed: &str,
    iv: &ArcInterval,
) -> ArcInterval {
    if !system.tree.is_v(removed) {
        if iv.dir.w == removed {
            return ArcInterval {
                dir: ArcDir {
                    w: removed.to_string(),
                    beyond: Beyond::WOutside,
                },
                lo: iv.lo.clone(),
                hi: iv.hi.clone(),
            };
        }
        return iv.clone();
    }
    let x = removed;
    if !arc_hangs_off(system, after, &iv.dir, x) {
        return iv.clone();
    }
    let adj = system.tree.adjacency();
    let w = adj[x]
        .iter()
        .find(|w| after.contains(*w))
        .expect("leaf constituent attaches through one W")
        .clone();
    let img = system.image(x, &w);
    let len = metrics.pair_len[&w].clone();
    let table = &metrics.tables[x];
    let jmg = system.image(x, &iv.dir.w);
    let alen = metrics.pair_len[&iv.dir.w].clone();
    let u_at = |t: &Rat| -> Rat {
        let da = (t + &side_distance(table, img, &len, jmg[0], 0))
            .min(&(&alen - t) + &side_distance(table, img, &len, jmg[1], 0));
        let db = (t + &side_distance(table, img, &len, jmg[0], 1))
            .min(&(&alen - t) + &side_distance(table, img, &len, jmg[1], 1));
        &(&da * &len) / &(&da + &db)
    };
    let half = Rat::new(1, 2);
    let mut probes = vec![iv.lo.clone(), iv.hi.clone()];
    for end in 0..2 {
        let d0 = side_distance(table, img, &len, jmg[0], end);
        let d1 = side_distance(table, img, &len, jmg[1], end);
        let t_star = &(&(&alen + &d1) - &d0) * &half;
        if t_star > iv.lo && t_star < iv.hi {
            probes.push(t_star);
        }
    }
    let values: Vec<Rat> = probes.iter().map(u_at).collect();
    let mut lo = values[0].clone();
    let mut hi = values[0].clone();
    for v in &values[1..] {
        if *v < lo {
            lo = v.clone();
        }
        if *v > hi {
            hi = v.clone();
        }
    }
    ArcInterval {
        dir: ArcDir {
            w,
            beyond: Beyond::NextV(x.to_string()),
        },
        lo,
        hi,
    }
}

/// Nested arc images of a non-redundant end inside the kettlebell space
/// over `F`: for `m = 1..=n`, the image of the full arc at the ray's
/// `m`-th cut pair beyond `F` under the bonding map back to `F`.
pub fn boundary_gamma(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    f: &BTreeSet<String>,
    end: &EndDescriptor,
    n: usize,
) -> Result<Vec<ArcInterval>, KettleError> {
    if matches!(end.classification, EndClass::Redundant { .. }) {
        return Err(KettleError::RedundantEnd {
            frontier: end.frontier.clone(),
        });
    }
    let ray_ws = ray_ws_beyond(system, f, end);
    if n > ray_ws.len() {
        return Err(KettleError::RayTooShort {
            available: ray_ws.len(),
            requested: n,
        });
    }
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let w_idx = ray_ws[m];
        let w_id = &end.ray[w_idx];
        let dir = if w_idx + 1 < end.ray.len() {
            ArcDir {
                w: w_id.clone(),
                beyond: Beyond::NextV(end.ray[w_idx + 1].clone()),
            }
        } else {
            ArcDir {
                w: w_id.clone(),
                beyond: Beyond::Frontier,
            }
        };
        // Subtree F_m: F plus the ray prefix through w_m.
        let mut added: Vec<String> = Vec::new();
        for id in end.ray.iter() {
            if !f.contains(id) {
                added.push(id.clone());
            }
            if id == w_id {
                break;
            }
        }
        let mut cur: BTreeSet<String> = f.clone();
        cur.extend(added.iter().cloned());
        let mut iv = ArcInterval {
            dir,
            lo: Rat::zero(),
            hi: metrics.pair_len[w_id].clone(),
        };
        for x in added.iter().rev() {
            cur.remove(x);
            iv = propagate_interval(system, metrics, &cur, x, &iv);
        }
        out.push(iv);
    }
    Ok(out)
}

// Ray positions of the W-nodes at or beyond the exit from `f`.
fn ray_ws_beyond(system: &TreeSystem, f: &BTreeSet<String>, end: &EndDescriptor) -> Vec<usize> {
    let exit = end.ray.iter().position(|id| !f.contains(id));
    end.ray
        .iter()
        .enumerate()
        .filter(|(i, id)| {
            !system.tree.is_v(id)
                && match exit {
                    None => end.ray[*i] == end.frontier,
                    Some(e) => *i + 1 >= e,
                }
        })
        .map(|(i, _)| i)
        .collect()
}

/// Number of nested-arc steps available for an end beyond a subtree.
pub fn max_nested_steps(system: &TreeSystem, f: &BTreeSet<String>, end: &EndDescriptor) -> usize {
    ray_ws_beyond(system, f, end).len()
}

/// Whether the shared-point chain along the visible ray beyond `f` is
/// unbroken: every consecutive pair of cut pairs shares a point and the
/// shared point carries over. While unbroken, the nested arc images may
/// legitimately touch an arc endpoint; once broken they are strictly
/// interior forever after.
pub fn visible_chain_unbroken(
    system: &TreeSystem,
    f: &BTreeSet<String>,
    end: &EndDescriptor,
) -> bool {
    let ws = ray_ws_beyond(system, f, end);
    let mut prev_out: Option<usize> = None;
    for m in 0..ws.len().saturating_sub(1) {
        let v = &end.ray[ws[m] + 1];
        let img_in = system.image(v, &end.ray[ws[m]]);
        let img_out = system.image(v, &end.ray[ws[m + 1]]);
        let mut link = None;
        for (a, ia) in img_in.iter().enumerate() {
            for (b, ib) in img_out.iter().enumerate() {
                if ia == ib {
                    link = Some((a, b));
                }
            }
        }
        match link {
            None => return false,
            Some((a, b)) => {
                if let Some(prev) = prev_out {
                    if prev != a {
                        return false;
                    }
                }
                prev_out = Some(b);
            }
        }
    }
    true
}

/// One record of the limit-comparison report.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Report of the finite-depth comparison between the completion picture
/// and the inverse-system picture.
#[derive(Clone, Debug, Serialize)]
pub struct LimitReport {
    pub checks: Vec<CheckRecord>,
    pub failures: Vec<String>,
    pub max_interval_length_per_n: Vec<Rat>,
}

impl LimitReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, name: &str, passed: bool, detail: String) {
        if !passed {
            self.failures.push(format!("{name}: {detail}"));
        }
        self.checks.push(CheckRecord {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// Finite-depth consistency battery over the truncation filtration
/// `T_0 subset ... subset T_k`:
///
/// 1. thread consistency and chain independence of every bonding map on
///    every sampled point, exactly;
/// 2. 1-Lipschitz inequalities on sampled pairs;
/// 3. injectivity witnesses separating base points and ends (end images
///    are arc-interior, base images are not);
/// 4. nested-arc decay within the geometric bound.
pub fn compare_limits(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    k: u32,
) -> Result<LimitReport, KettleError> {
    let members: Vec<BTreeSet<String>> = (0..=k).map(|j| system.truncation_vertices(j)).collect();
    let mut report = LimitReport {
        checks: Vec::new(),
        failures: Vec::new(),
        max_interval_length_per_n: Vec::new(),
    };

    // Sample points: every constituent point of the system.
    let mut samples: Vec<(String, usize)> = Vec::new();
    for v in &system.tree.v_nodes {
        for p in 0..system.constituent[v].len() {
            samples.push((v.clone(), p));
        }
    }

    // (1) thread consistency + chain independence, parallel over samples.
    let member_refs = &members;
    let results = par::map_range(samples.len(), |si| {
        let (vertex, point) = &samples[si];
        let mut bad: Vec<String> = Vec::new();
        let gammas: Vec<KPoint> = member_refs
            .iter()
            .map(|f| gamma(system, metrics, f, vertex, *point).expect("sample inside system"))
            .collect();
        for j in 0..member_refs.len() {
            for i in 0..j {
                for order in [ChainOrder::Lex, ChainOrder::RevLex] {
                    let via = bond(
                        system,
                        metrics,
                        &member_refs[j],
                        &member_refs[i],
                        &gammas[j],
                        order,
                    )
                    .expect("members are nested");
                    let kb = build_kettlebell(system, metrics, member_refs[i].clone()).unwrap();
                    if !kb.same_point(&via, &gammas[i]) {
                        bad.push(format!(
                            "thread broken for ({vertex},{point}) between T_{j} and T_{i} ({order:?})"
                        ));
                    }
                }
            }
        }
        bad
    });
    let thread_failures: Vec<String> = results.into_iter().flatten().collect();
    report.record(
        "thread_consistency",
        thread_failures.is_empty(),
        if thread_failures.is_empty() {
            format!(
                "{} samples consistent across {} members and both chain orders",
                samples.len(),
                members.len()
            )
        } else {
            thread_failures.join("; ")
        },
    );

    // (2) 1-Lipschitz on sampled pairs across consecutive members.
    let mut lip_ok = true;
    let mut lip_detail = String::new();
    let sample_cap = samples.len().min(24);
    for j in 1..members.len() {
        let kb_hi = build_kettlebell(system, metrics, members[j].clone()).unwrap();
        let kb_lo = build_kettlebell(system, metrics, members[j - 1].clone()).unwrap();
        for a in 0..sample_cap {
            for b in (a + 1)..sample_cap {
                let (va, pa) = &samples[a];
                let (vb, pb) = &samples[b];
                let pa = gamma(system, metrics, &members[j], va, *pa).unwrap();
                let pb = gamma(system, metrics, &members[j], vb, *pb).unwrap();
                let d_hi = kb_hi.distance(&pa, &pb);
                let qa =
                    bond(system, metrics, &members[j], &members[j - 1], &pa, ChainOrder::Lex)
                        .unwrap();
                let qb =
                    bond(system, metrics, &members[j], &members[j - 1], &pb, ChainOrder::Lex)
                        .unwrap();
                let d_lo = kb_lo.distance(&qa, &qb);
                if d_lo > d_hi {
                    lip_ok = false;
                    lip_detail =
                        format!("bond T_{j} -> T_{} expanded a pair: {d_lo} > {d_hi}", j - 1);
                }
            }
        }
    }
    report.record(
        "one_lipschitz",
        lip_ok,
        if lip_ok {
            format!("checked {} member steps", members.len().saturating_sub(1))
        } else {
            lip_detail
        },
    );

    // (3) injectivity witnesses.
    let ends = crate::glue::enumerate_ends(system);
    let usable_ends: Vec<&EndDescriptor> = ends
        .iter()
        .filter(|e| matches!(e.classification, EndClass::NonRedundant))
        .collect();
    let mut inj_ok = true;
    let mut inj_detail = String::new();
    {
        let top = &members[k as usize];
        let kb = build_kettlebell(system, metrics, top.clone()).unwrap();
        for a in 0..sample_cap {
            for b in (a + 1)..sample_cap {
                let (va, pa) = &samples[a];
                let (vb, pb) = &samples[b];
                let ga = gamma(system, metrics, top, va, *pa).unwrap();
                let gb = gamma(system, metrics, top, vb, *pb).unwrap();
                let same_class =
                    chain_distance(system, metrics, &(va.clone(), *pa), &(vb.clone(), *pb))
                        .is_zero();
                if !same_class && kb.same_point(&ga, &gb) {
                    inj_ok = false;
                    inj_detail = format!("({va},{pa}) and ({vb},{pb}) collide in T_{k}");
                }
            }
        }
    }
    for end in &usable_ends {
        for f in members.iter() {
            let n_avail = max_nested_steps(system, f, end);
            // While the visible shared-point chain is unbroken, the
            // nested images may still touch an arc endpoint; after a
            // break they must be strictly interior.
            if n_avail == 0 || visible_chain_unbroken(system, f, end) {
                continue;
            }
            let ivs = boundary_gamma(system, metrics, f, end, n_avail).unwrap();
            let last = ivs.last().unwrap();
            let len = metrics.pair_len[&last.dir.w].clone();
            if !(last.lo.is_positive() && last.hi < len) {
                inj_ok = false;
                inj_detail = format!("end {} image not arc-interior", end.frontier);
            }
        }
    }
    for a in 0..sample_cap {
        let (va, pa) = &samples[a];
        let eventually_base = members
            .iter()
            .any(|f| matches!(gamma(system, metrics, f, va, *pa), Ok(KPoint::Base { .. })));
        if !eventually_base {
            inj_ok = false;
            inj_detail = format!("base sample ({va},{pa}) never lands in a base");
        }
    }
    for a in 0..usable_ends.len() {
        for b in (a + 1)..usable_ends.len() {
            let f = &members[k as usize];
            let ia = boundary_gamma(system, metrics, f, usable_ends[a], 1).unwrap();
            let ib = boundary_gamma(system, metrics, f, usable_ends[b], 1).unwrap();
            if ia[0].dir == ib[0].dir {
                inj_ok = false;
                inj_detail = format!(
                    "ends {} and {} share a crossing arc",
                    usable_ends[a].frontier, usable_ends[b].frontier
                );
            }
        }
    }
    report.record(
        "injectivity_witnesses",
        inj_ok,
        if inj_ok {
            format!(
                "{} base samples and {} ends distinguished",
                sample_cap,
                usable_ends.len()
            )
        } else {
            inj_detail
        },
    );

    // (4) nested arcs with geometric decay, seen from the smallest member.
    let mut nest_ok = true;
    let mut nest_detail = String::new();
    let mut max_len: Vec<Rat> = Vec::new();
    let f0 = &members[0];
    for end in &usable_ends {
        let n_avail = max_nested_steps(system, f0, end);
        if n_avail == 0 {
            continue;
        }
        let ivs = boundary_gamma(system, metrics, f0, end, n_avail).unwrap();
        for (m, iv) in ivs.iter().enumerate() {
            if m > 0 && !ivs[m - 1].contains(iv) {
                nest_ok = false;
                nest_detail = format!("A_{} of end {} not nested", m + 1, end.frontier);
            }
            // length(A_n) <= 2 * 2^-n: the pair at step n is one level
            // outside T_{n-1}, and bonds are 1-Lipschitz.
            let bound = &Rat::from_int(2) * &Rat::pow2(-(m as i32 + 1));
            if iv.length() > bound {
                nest_ok = false;
                nest_detail = format!(
                    "A_{} of end {} has length {} > {bound}",
                    m + 1,
                    end.frontier,
                    iv.length()
                );
            }
            if max_len.len() <= m {
                max_len.push(iv.length());
            } else if iv.length() > max_len[m] {
                max_len[m] = iv.length();
            }
        }
        // Once the visible shared-point chain has broken, the deepest
        // image must be strictly in the open interior of the first arc.
        if !visible_chain_unbroken(system, f0, end) {
            let last = ivs.last().unwrap();
            if !(ivs[0].lo < last.lo && last.hi < ivs[0].hi) {
                nest_ok = false;
                nest_detail =
                    format!("deepest image of end {} not strictly interior", end.frontier);
            }
        }
    }
    report.record(
        "nested_arcs",
        nest_ok,
        if nest_ok {
            format!("{} ends, geometric decay verified", usable_ends.len())
        } else {
            nest_detail
        },
    );
    report.max_interval_length_per_n = max_len;

    Ok(report)
}

/// Threads of the inverse system: the member-indexed images of one point
/// under every `gamma`, recorded for reporting.
pub fn thread_of(
    system: &TreeSystem,
    metrics: &MetricAssignment,
    k: u32,
    vertex: &str,
    point: usize,
) -> Result<BTreeMap<u32, KPoint>, KettleError> {
    let mut out = BTreeMap::new();
    for j in 0..=k {
        let f = system.truncation_vertices(j);
        out.insert(j, gamma(system, metrics, &f, vertex, point)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::glue::enumerate_ends;

    fn setup(sys: &TreeSystem) -> MetricAssignment {
        sys.assign_shrinking().unwrap()
    }

    #[test]
    fn arc_endpoints_are_identified_with_the_pair() {
        let sys = fixtures::line_system(1);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(0);
        let kb = build_kettlebell(&sys, &metrics, f).unwrap();
        for dir in kb.arcs() {
            let [a, b] = kb.arc_anchor(&dir);
            let len = kb.arc_len(&dir);
            let p0 = KPoint::OnArc {
                dir: dir.clone(),
                t: Rat::zero(),
            };
            let p1 = KPoint::OnArc {
                dir: dir.clone(),
                t: len.clone(),
            };
            assert!(kb.same_point(
                &p0,
                &KPoint::Base {
                    vertex: a.0.clone(),
                    point: a.1
                }
            ));
            assert!(kb.same_point(
                &p1,
                &KPoint::Base {
                    vertex: b.0.clone(),
                    point: b.1
                }
            ));
            let mid = KPoint::OnArc {
                dir: dir.clone(),
                t: &len * &Rat::new(1, 2),
            };
            assert_eq!(
                kb.distance(&mid, &KPoint::Base { vertex: a.0, point: a.1 }),
                &len * &Rat::new(1, 2)
            );
        }
    }

    #[test]
    fn base_distances_are_unchanged_from_glue() {
        let sys = fixtures::trivalent_system(1);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(1);
        let kb = build_kettlebell(&sys, &metrics, f).unwrap();
        let glued = crate::glue::glue(&sys, &metrics).unwrap();
        for i in 0..glued.len() {
            for j in (i + 1)..glued.len() {
                let (vi, pi) = glued.classes[i]
                    .members
                    .iter()
                    .find(|(v, _)| sys.tree.is_v(v))
                    .unwrap()
                    .clone();
                let (vj, pj) = glued.classes[j]
                    .members
                    .iter()
                    .find(|(v, _)| sys.tree.is_v(v))
                    .unwrap()
                    .clone();
                let a = KPoint::Base {
                    vertex: vi,
                    point: pi,
                };
                let b = KPoint::Base {
                    vertex: vj,
                    point: pj,
                };
                assert_eq!(kb.distance(&a, &b), glued.dist[i][j]);
            }
        }
    }

    #[test]
    fn bond_on_same_subtree_is_identity() {
        let sys = fixtures::line_system(1);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(1);
        let kb = build_kettlebell(&sys, &metrics, f.clone()).unwrap();
        let p = KPoint::Base {
            vertex: "v0".into(),
            point: 2,
        };
        let q = bond(&sys, &metrics, &f, &f, &p, ChainOrder::Lex).unwrap();
        assert!(kb.same_point(&p, &q));
    }

    #[test]
    fn pair_endpoints_bond_to_arc_parameters_zero_and_len() {
        let sys = fixtures::line_system(1);
        let metrics = setup(&sys);
        let t0 = sys.truncation_vertices(0);
        let t1 = sys.truncation_vertices(1);
        let dist = sys.tree.distances(&sys.tree.base);
        let v = sys
            .tree
            .v_nodes
            .iter()
            .find(|v| dist[*v] == 2)
            .unwrap()
            .clone();
        let w = sys.tree.adjacency()[&v]
            .iter()
            .find(|w| dist[*w] == 1)
            .unwrap()
            .clone();
        let img = sys.image(&v, &w);
        let kb0 = build_kettlebell(&sys, &metrics, t0.clone()).unwrap();
        for side in 0..2 {
            let got = bond(
                &sys,
                &metrics,
                &t1,
                &t0,
                &KPoint::Base {
                    vertex: v.clone(),
                    point: img[side],
                },
                ChainOrder::Lex,
            )
            .unwrap();
            let expected = KPoint::Base {
                vertex: sys.tree.base.clone(),
                point: sys.image(&sys.tree.base, &w)[side],
            };
            assert!(kb0.same_point(&got, &expected), "pair side {side}");
        }
    }

    #[test]
    fn bonds_are_one_lipschitz_exactly() {
        let sys = fixtures::trivalent_system(2);
        let metrics = setup(&sys);
        let t2 = sys.truncation_vertices(2);
        let t1 = sys.truncation_vertices(1);
        let kb2 = build_kettlebell(&sys, &metrics, t2.clone()).unwrap();
        let kb1 = build_kettlebell(&sys, &metrics, t1.clone()).unwrap();
        let mut pts: Vec<KPoint> = Vec::new();
        for v in sys.tree.v_nodes.iter().take(8) {
            for p in 0..sys.constituent[v].len() {
                pts.push(gamma(&sys, &metrics, &t2, v, p).unwrap());
            }
        }
        for dir in kb2.arcs().into_iter().take(3) {
            pts.push(KPoint::OnArc {
                dir: dir.clone(),
                t: &kb2.arc_len(&dir) * &Rat::new(1, 3),
            });
        }
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let d2 = kb2.distance(&pts[i], &pts[j]);
                let qa = bond(&sys, &metrics, &t2, &t1, &pts[i], ChainOrder::Lex).unwrap();
                let qb = bond(&sys, &metrics, &t2, &t1, &pts[j], ChainOrder::Lex).unwrap();
                let d1 = kb1.distance(&qa, &qb);
                assert!(d1 <= d2, "bond expanded: {d1} > {d2}");
            }
        }
    }

    #[test]
    fn chain_order_does_not_change_bonds() {
        let sys = fixtures::trivalent_system(2);
        let metrics = setup(&sys);
        let t2 = sys.truncation_vertices(2);
        let t0 = sys.truncation_vertices(0);
        let kb0 = build_kettlebell(&sys, &metrics, t0.clone()).unwrap();
        for v in &sys.tree.v_nodes {
            for p in 0..sys.constituent[v].len() {
                let x = KPoint::Base {
                    vertex: v.clone(),
                    point: p,
                };
                let a = bond(&sys, &metrics, &t2, &t0, &x, ChainOrder::Lex).unwrap();
                let b = bond(&sys, &metrics, &t2, &t0, &x, ChainOrder::RevLex).unwrap();
                assert!(kb0.same_point(&a, &b), "chain order changed bond of ({v},{p})");
            }
        }
    }

    #[test]
    fn bond_composition_along_members() {
        let sys = fixtures::line_system(2);
        let metrics = setup(&sys);
        let t: Vec<_> = (0..=2).map(|j| sys.truncation_vertices(j)).collect();
        let kb0 = build_kettlebell(&sys, &metrics, t[0].clone()).unwrap();
        for v in &sys.tree.v_nodes {
            for p in 0..sys.constituent[v].len() {
                let x = KPoint::Base {
                    vertex: v.clone(),
                    point: p,
                };
                let direct = bond(&sys, &metrics, &t[2], &t[0], &x, ChainOrder::Lex).unwrap();
                let mid = bond(&sys, &metrics, &t[2], &t[1], &x, ChainOrder::Lex).unwrap();
                let via = bond(&sys, &metrics, &t[1], &t[0], &mid, ChainOrder::Lex).unwrap();
                assert!(kb0.same_point(&direct, &via));
            }
        }
    }

    #[test]
    fn gamma_is_identity_inside_and_urysohn_one_branch_out() {
        let sys = fixtures::pair_system();
        let metrics = setup(&sys);
        let f: BTreeSet<String> = ["v0".to_string(), "w0".to_string()].into();
        let g = gamma(&sys, &metrics, &f, "v0", 3).unwrap();
        assert_eq!(
            g,
            KPoint::Base {
                vertex: "v0".into(),
                point: 3
            }
        );
        let g = gamma(&sys, &metrics, &f, "v1", 2).unwrap();
        match g {
            KPoint::OnArc { dir, t } => {
                assert_eq!(dir.w, "w0");
                let table = &metrics.tables["v1"];
                let img = sys.image("v1", "w0");
                let len = metrics.pair_len["w0"].clone();
                let da = table.d(2, img[0]).clone().min(table.d(2, img[1]) + &len);
                let db = table.d(2, img[1]).clone().min(table.d(2, img[0]) + &len);
                assert_eq!(t, &(&da * &len) / &(&da + &db));
            }
            other => panic!("expected arc point, got {other:?}"),
        }
    }

    #[test]
    fn gamma_distinct_points_in_common_member_stay_distinct() {
        let sys = fixtures::line_system(2);
        let metrics = setup(&sys);
        let t2 = sys.truncation_vertices(2);
        let kb = build_kettlebell(&sys, &metrics, t2.clone()).unwrap();
        let a = gamma(&sys, &metrics, &t2, "v1", 0).unwrap();
        let b = gamma(&sys, &metrics, &t2, "v1", 3).unwrap();
        assert!(!kb.same_point(&a, &b));
    }

    #[test]
    fn first_nested_arc_is_the_full_crossing_arc() {
        let sys = fixtures::line_system(2);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(0);
        for end in enumerate_ends(&sys) {
            let ivs = boundary_gamma(&sys, &metrics, &f, &end, 1).unwrap();
            assert_eq!(ivs[0].lo, Rat::zero());
            assert_eq!(ivs[0].hi, metrics.pair_len[&ivs[0].dir.w]);
        }
    }

    #[test]
    fn nested_arcs_shrink_geometrically_and_interior() {
        let sys = fixtures::trivalent_system(3);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(0);
        let mut saw_broken = false;
        for end in enumerate_ends(&sys) {
            let n = max_nested_steps(&sys, &f, &end);
            assert!(n >= 3);
            let ivs = boundary_gamma(&sys, &metrics, &f, &end, n).unwrap();
            for m in 1..ivs.len() {
                assert!(ivs[m - 1].contains(&ivs[m]), "A_{} not nested", m + 1);
            }
            for (m, iv) in ivs.iter().enumerate() {
                assert!(iv.length() <= Rat::pow2(-(m as i32)));
            }
            // once the visible shared-point chain breaks, the deepest
            // image must be interior; directions that keep sharing a
            // point all the way to the frontier may touch an endpoint
            if !visible_chain_unbroken(&sys, &f, &end) {
                saw_broken = true;
                let last = ivs.last().unwrap();
                assert!(ivs[0].lo < last.lo && last.hi < ivs[0].hi);
            }
        }
        assert!(saw_broken, "no ray exercised the interiority check");
    }

    #[test]
    fn second_arc_is_interior_when_consecutive_pairs_are_disjoint() {
        let sys = fixtures::line_system(2);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(0);
        for end in enumerate_ends(&sys) {
            let ivs = boundary_gamma(&sys, &metrics, &f, &end, 2).unwrap();
            assert!(ivs[0].lo < ivs[1].lo && ivs[1].hi < ivs[0].hi);
        }
    }

    #[test]
    fn redundant_end_is_refused() {
        let sys = fixtures::lineshare_system(2);
        let metrics = setup(&sys);
        let f = sys.truncation_vertices(0);
        let end = enumerate_ends(&sys).into_iter().next().unwrap();
        assert!(matches!(
            boundary_gamma(&sys, &metrics, &f, &end, 1),
            Err(KettleError::RedundantEnd { .. })
        ));
    }

    #[test]
    fn compare_limits_passes_on_bundled_templates() {
        for (name, sys) in [
            ("line", fixtures::line_system(2)),
            ("trivalent", fixtures::trivalent_system(2)),
        ] {
            let metrics = setup(&sys);
            let report = compare_limits(&sys, &metrics, 2).unwrap();
            assert!(report.passed(), "{name} failed: {:?}", report.failures);
            for (m, len) in report.max_interval_length_per_n.iter().enumerate() {
                assert!(*len <= Rat::pow2(-(m as i32)));
            }
        }
    }

    #[test]
    fn threads_of_base_points_are_eventually_constant() {
        let sys = fixtures::line_system(2);
        let metrics = setup(&sys);
        let thread = thread_of(&sys, &metrics, 2, "v0", 1).unwrap();
        for p in thread.values() {
            assert_eq!(
                *p,
                KPoint::Base {
                    vertex: "v0".into(),
                    point: 1
                }
            );
        }
    }

    #[test]
    fn degenerate_pair_is_rejected() {
        let sys = fixtures::pair_system();
        let mut metrics = setup(&sys);
        metrics.pair_len.insert("w0".into(), Rat::zero());
        let f: BTreeSet<String> = ["v0".to_string(), "w0".to_string()].into();
        assert!(matches!(
            build_kettlebell(&sys, &metrics, f),
            Err(KettleError::DegenerateArc { .. })
        ));
    }
}
