//! Finite metric spaces with exact rational distance tables.
//!
//! Everything downstream (tree systems, glued spaces, kettlebell
//! complexes) is built out of these, so the three metric axioms are
//! validated with witnesses rather than assumed. The two nontrivial
//! operations are the 1-Lipschitz Urysohn map and the diameter-halving
//! rescale: given a marked pair collection and an anchor pair, the
//! rescale produces a metric of diameter exactly `K` attained at the
//! anchor while forcing every other marked pair below `K/2`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rational::Rat;

/// A finite point set with a symmetric exact-rational distance table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteMetricSpace {
    points: Vec<String>,
    dist: Vec<Vec<Rat>>,
}

/// Unordered two-point subsets of one space, pairwise sharing at most
/// one point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCollection {
    pub pairs: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum MetricError {
    #[error("distance table is not square: {rows} rows for {points} points (row {bad_row} has {bad_len} entries)")]
    NotSquare {
        points: usize,
        rows: usize,
        bad_row: usize,
        bad_len: usize,
    },
    #[error("negative entry at ({x}, {y}): {value}")]
    NegativeEntry { x: String, y: String, value: Rat },
    #[error("duplicate point id {0:?}")]
    DuplicatePoint(String),
    #[error("unknown point {0:?}")]
    UnknownPoint(String),
    #[error("pair ({x}, {y}) is not a two-point subset")]
    DegeneratePair { x: usize, y: usize },
    #[error("pairs {a:?} and {b:?} intersect in more than one point")]
    PairOverlap { a: [usize; 2], b: [usize; 2] },
    #[error("anchor pair is not a member of the collection")]
    AnchorNotInCollection,
    #[error("anchor points coincide")]
    AnchorDegenerate,
    #[error("urysohn endpoints coincide")]
    UrysohnDegenerate,
    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(Rat),
    #[error("space fails the metric axioms: {0}")]
    InvalidMetric(String),
}

/// One violated metric axiom together with the witnessing tuple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "axiom")]
pub enum MetricViolation {
    /// `d(x,x) != 0`.
    NonzeroDiagonal { x: String, value: Rat },
    /// `d(x,y) <= 0` for distinct points.
    NonPositive { x: String, y: String, value: Rat },
    /// `d(x,y) != d(y,x)`.
    Asymmetric { x: String, y: String },
    /// `d(x,z) > d(x,y) + d(y,z)`.
    Triangle {
        x: String,
        z: String,
        via: String,
        excess: Rat,
    },
}

impl fmt::Display for MetricViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricViolation::NonzeroDiagonal { x, value } => {
                write!(f, "d({x},{x}) = {value} != 0")
            }
            MetricViolation::NonPositive { x, y, value } => {
                write!(f, "d({x},{y}) = {value} is not positive")
            }
            MetricViolation::Asymmetric { x, y } => write!(f, "d({x},{y}) != d({y},{x})"),
            MetricViolation::Triangle { x, z, via, excess } => {
                write!(f, "d({x},{z}) > d({x},{via}) + d({via},{z}) by {excess}")
            }
        }
    }
}

/// Axiom-violation listing; empty iff the table is a metric.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricReport {
    pub violations: Vec<MetricViolation>,
}

impl MetricReport {
    pub fn is_metric(&self) -> bool {
        self.violations.is_empty()
    }
}

impl FiniteMetricSpace {
    /// Structural construction: table must be square and free of
    /// negative entries. Axiom violations are reported separately by
    /// [`FiniteMetricSpace::validate_metric`].
    pub fn new(points: Vec<String>, dist: Vec<Vec<Rat>>) -> Result<Self, MetricError> {
        let n = points.len();
        let mut seen = BTreeSet::new();
        for p in &points {
            if !seen.insert(p.clone()) {
                return Err(MetricError::DuplicatePoint(p.clone()));
            }
        }
        if dist.len() != n {
            return Err(MetricError::NotSquare {
                points: n,
                rows: dist.len(),
                bad_row: dist.len(),
                bad_len: 0,
            });
        }
        for (i, row) in dist.iter().enumerate() {
            if row.len() != n {
                return Err(MetricError::NotSquare {
                    points: n,
                    rows: dist.len(),
                    bad_row: i,
                    bad_len: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if v.is_negative() {
                    return Err(MetricError::NegativeEntry {
                        x: points[i].clone(),
                        y: points[j].clone(),
                        value: v.clone(),
                    });
                }
            }
        }
        Ok(FiniteMetricSpace { points, dist })
    }

    /// Uniform space: all distinct points at distance `d`.
    pub fn uniform(points: Vec<String>, d: Rat) -> Self {
        let n = points.len();
        let dist = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { Rat::zero() } else { d.clone() })
                    .collect()
            })
            .collect();
        FiniteMetricSpace { points, dist }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[String] {
        &self.points
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.points.iter().position(|p| p == name)
    }

    pub fn d(&self, i: usize, j: usize) -> &Rat {
        &self.dist[i][j]
    }

    pub fn table(&self) -> &Vec<Vec<Rat>> {
        &self.dist
    }

    /// Replaces the table, keeping point names. Structural checks rerun.
    pub fn with_table(&self, dist: Vec<Vec<Rat>>) -> Result<Self, MetricError> {
        FiniteMetricSpace::new(self.points.clone(), dist)
    }

    /// Largest pairwise distance and one pair attaining it.
    /// A space with fewer than two points has diameter zero.
    pub fn diameter(&self) -> (Rat, Option<[usize; 2]>) {
        let mut best = Rat::zero();
        let mut arg = None;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.dist[i][j] > best {
                    best = self.dist[i][j].clone();
                    arg = Some([i, j]);
                }
            }
        }
        (best, arg)
    }

    /// Uniformly scales every distance by `factor > 0`.
    pub fn scale(&self, factor: &Rat) -> Result<Self, MetricError> {
        if !factor.is_positive() {
            return Err(MetricError::NonPositiveScale(factor.clone()));
        }
        let dist = self
            .dist
            .iter()
            .map(|row| row.iter().map(|v| v * factor).collect())
            .collect();
        Ok(FiniteMetricSpace {
            points: self.points.clone(),
            dist,
        })
    }

    /// Checks all three metric axioms by exhaustive scan and reports
    /// every violation with its witnessing tuple.
    pub fn validate_metric(&self) -> MetricReport {
        let n = self.len();
        let mut violations = Vec::new();
        for i in 0..n {
            if !self.dist[i][i].is_zero() {
                violations.push(MetricViolation::NonzeroDiagonal {
                    x: self.points[i].clone(),
                    value: self.dist[i][i].clone(),
                });
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if self.dist[i][j] != self.dist[j][i] {
                    violations.push(MetricViolation::Asymmetric {
                        x: self.points[i].clone(),
                        y: self.points[j].clone(),
                    });
                }
                if !self.dist[i][j].is_positive() {
                    violations.push(MetricViolation::NonPositive {
                        x: self.points[i].clone(),
                        y: self.points[j].clone(),
                        value: self.dist[i][j].clone(),
                    });
                }
            }
        }
        for i in 0..n {
            for k in 0..n {
                if i == k {
                    continue;
                }
                for j in 0..n {
                    if j == i || j == k {
                        continue;
                    }
                    let via = &self.dist[i][j] + &self.dist[j][k];
                    if self.dist[i][k] > via {
                        violations.push(MetricViolation::Triangle {
                            x: self.points[i].clone(),
                            z: self.points[k].clone(),
                            via: self.points[j].clone(),
                            excess: &self.dist[i][k] - &via,
                        });
                    }
                }
            }
        }
        MetricReport { violations }
    }

    fn require_metric(&self) -> Result<(), MetricError> {
        let report = self.validate_metric();
        if let Some(v) = report.violations.first() {
            return Err(MetricError::InvalidMetric(v.to_string()));
        }
        Ok(())
    }
}

impl PairCollection {
    /// Validates: both entries distinct and in range for `space`,
    /// pairwise intersections of size at most one.
    pub fn new(pairs: Vec<[usize; 2]>, space: &FiniteMetricSpace) -> Result<Self, MetricError> {
        let n = space.len();
        let mut normalized = Vec::with_capacity(pairs.len());
        for &[a, b] in &pairs {
            if a == b || a >= n || b >= n {
                return Err(MetricError::DegeneratePair { x: a, y: b });
            }
            normalized.push(if a < b { [a, b] } else { [b, a] });
        }
        for i in 0..normalized.len() {
            for j in (i + 1)..normalized.len() {
                let s: BTreeSet<usize> = normalized[i]
                    .iter()
                    .chain(normalized[j].iter())
                    .copied()
                    .collect();
                if s.len() < 3 {
                    return Err(MetricError::PairOverlap {
                        a: normalized[i],
                        b: normalized[j],
                    });
                }
            }
        }
        Ok(PairCollection { pairs: normalized })
    }

    pub fn contains(&self, pair: [usize; 2]) -> bool {
        let key = if pair[0] < pair[1] {
            pair
        } else {
            [pair[1], pair[0]]
        };
        self.pairs.contains(&key)
    }
}

/// Urysohn table `u(x) = d(x,p) * d(p,q) / (d(x,p) + d(x,q))`.
///
/// `u(p) = 0`, `u(q) = d(p,q)`, and `|u(x) - u(y)| <= d(x,y)` for all
/// pairs, exactly.
pub fn urysohn_map(
    space: &FiniteMetricSpace,
    p: usize,
    q: usize,
) -> Result<Vec<Rat>, MetricError> {
    if p == q {
        return Err(MetricError::UrysohnDegenerate);
    }
    let dpq = space.d(p, q).clone();
    let mut out = Vec::with_capacity(space.len());
    for x in 0..space.len() {
        if x == p {
            out.push(Rat::zero());
        } else if x == q {
            out.push(dpq.clone());
        } else {
            let dp = space.d(x, p);
            let dq = space.d(x, q);
            let denom = dp + dq;
            out.push(&(dp * &dpq) / &denom);
        }
    }
    Ok(out)
}

/// Diameter-halving rescale.
///
/// Returns a metric on the same point set with diameter exactly `K`
/// attained at the anchor pair, while every other pair of `collection`
/// has diameter at most `K/2`. The reparametrizing function is the
/// canonical monotone piecewise-linear map with breakpoints at the
/// extreme Urysohn values of the exceptional pairs.
pub fn halver_rescale(
    space: &FiniteMetricSpace,
    collection: &PairCollection,
    anchor: [usize; 2],
    k: &Rat,
) -> Result<FiniteMetricSpace, MetricError> {
    if anchor[0] == anchor[1] {
        return Err(MetricError::AnchorDegenerate);
    }
    if !collection.contains(anchor) {
        return Err(MetricError::AnchorNotInCollection);
    }
    if !k.is_positive() {
        return Err(MetricError::NonPositiveScale(k.clone()));
    }
    space.require_metric()?;
    let (a, b) = (anchor[0], anchor[1]);
    let n = space.len();
    let half = Rat::new(1, 2);

    // d' = d normalized so d'(a,b) = 1.
    let dab = space.d(a, b).clone();
    let inv = dab.recip();
    let dp = |i: usize, j: usize| space.d(i, j) * &inv;

    // Exceptional pairs: marked pairs other than the anchor whose
    // normalized diameter exceeds 1/2.
    let mut a_set: BTreeSet<usize> = BTreeSet::new();
    for &pair in &collection.pairs {
        if pair == [a.min(b), a.max(b)] {
            continue;
        }
        if dp(pair[0], pair[1]) > half {
            for &pt in &pair {
                if pt != a && pt != b {
                    a_set.insert(pt);
                }
            }
        }
    }

    // Urysohn values under d' (so u maps into [0,1]).
    let u: Vec<Rat> = (0..n)
        .map(|x| {
            if x == a {
                Rat::zero()
            } else if x == b {
                Rat::one()
            } else {
                let da = dp(x, a);
                let db = dp(x, b);
                &da / &(&da + &db)
            }
        })
        .collect();

    let mut l1 = half.clone();
    let mut l2 = half.clone();
    for &pt in &a_set {
        l1 = l1.min(u[pt].clone());
        l2 = l2.max(u[pt].clone());
    }

    // f1: [0, l1] -> [0, 1/2] and [l2, 1] -> [1/2, 1] linearly,
    // constant 1/2 in between. l1 > 0 and l2 < 1 because the anchor
    // points are excluded from the exceptional set.
    let f1 = |t: &Rat| -> Rat {
        if *t <= l1 {
            t * &(&half / &l1)
        } else if *t < l2 {
            half.clone()
        } else {
            &half + &(&(t - &l2) * &(&half / &(&Rat::one() - &l2)))
        }
    };
    let f: Vec<Rat> = u.iter().map(f1).collect();

    // Max-metric on the graph of f inside X x [0,1], scaled by K.
    let mut diam_dp = Rat::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dp(i, j);
            if v > diam_dp {
                diam_dp = v;
            }
        }
    }
    let two_diam = &Rat::from_int(2) * &diam_dp;
    let dist: Vec<Vec<Rat>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Rat::zero()
                    } else {
                        let spread = &dp(i, j) / &two_diam;
                        let drop = (&f[i] - &f[j]).abs();
                        k * &spread.max(drop)
                    }
                })
                .collect()
        })
        .collect();

    space.with_table(dist)
}

/// Pairs of `collection` whose two points are more than `eps` apart,
/// in input order.
pub fn null_check(
    space: &FiniteMetricSpace,
    collection: &PairCollection,
    eps: &Rat,
) -> Vec<[usize; 2]> {
    collection
        .pairs
        .iter()
        .filter(|p| space.d(p[0], p[1]) > eps)
        .copied()
        .collect()
}
