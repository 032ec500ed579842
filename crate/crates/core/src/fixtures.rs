//! Bundled example systems.
//!
//! These are the instances shipped under `instances/` in source form,
//! also constructible directly for tests and benches. Tree-system
//! constituents are four-point spaces that are connected without cut
//! points or cut pairs at net scale, so the decomposition round trip
//! applies to all of them.

use std::collections::{BTreeMap, BTreeSet};

use crate::metric::FiniteMetricSpace;
use crate::rational::Rat;
use crate::tree::{BipartiteTree, Incidence, Template, TreeSystem};

/// Four points, all pairwise distances 1.
pub fn uniform4() -> FiniteMetricSpace {
    FiniteMetricSpace::uniform(
        vec!["p0".into(), "p1".into(), "p2".into(), "p3".into()],
        Rat::one(),
    )
}

/// Four points with an uneven table, so Urysohn values differ between
/// points and rescales stay asymmetric:
/// d(p1,p2) = 3/2, d(p2,p3) = 1/2, everything else 1.
pub fn skewed4() -> FiniteMetricSpace {
    let o = Rat::one;
    let d = vec![
        vec![Rat::zero(), o(), o(), o()],
        vec![o(), Rat::zero(), Rat::new(3, 2), o()],
        vec![o(), Rat::new(3, 2), Rat::zero(), Rat::new(1, 2)],
        vec![o(), o(), Rat::new(1, 2), Rat::zero()],
    ];
    FiniteMetricSpace::new(
        vec!["p0".into(), "p1".into(), "p2".into(), "p3".into()],
        d,
    )
    .unwrap()
}

/// Complete two-constituent system: `v0 - w0 - v1`, both images {p0,p1}.
pub fn pair_system() -> TreeSystem {
    let tree = BipartiteTree {
        v_nodes: vec!["v0".into(), "v1".into()],
        w_nodes: vec!["w0".into()],
        edges: vec![("v0".into(), "w0".into()), ("v1".into(), "w0".into())],
        base: "v0".into(),
        frontier: BTreeSet::new(),
    };
    let mut constituent = BTreeMap::new();
    constituent.insert("v0".to_string(), skewed4());
    constituent.insert("v1".to_string(), uniform4());
    let mut cut_pair = BTreeMap::new();
    cut_pair.insert("w0".to_string(), ["x".to_string(), "y".to_string()]);
    let mut injection = BTreeMap::new();
    injection.insert(("v0".to_string(), "w0".to_string()), [0usize, 1]);
    injection.insert(("v1".to_string(), "w0".to_string()), [0usize, 1]);
    TreeSystem::build(tree, constituent, cut_pair, injection, None).unwrap()
}

/// Complete system with one valence-3 cut pair joining three
/// constituents.
pub fn quad_system() -> TreeSystem {
    let tree = BipartiteTree {
        v_nodes: vec!["v0".into(), "v1".into(), "v2".into()],
        w_nodes: vec!["w0".into()],
        edges: vec![
            ("v0".into(), "w0".into()),
            ("v1".into(), "w0".into()),
            ("v2".into(), "w0".into()),
        ],
        base: "v0".into(),
        frontier: BTreeSet::new(),
    };
    let mut constituent = BTreeMap::new();
    for v in ["v0", "v1", "v2"] {
        constituent.insert(v.to_string(), uniform4());
    }
    let mut cut_pair = BTreeMap::new();
    cut_pair.insert("w0".to_string(), ["x".to_string(), "y".to_string()]);
    let mut injection = BTreeMap::new();
    for v in ["v0", "v1", "v2"] {
        injection.insert((v.to_string(), "w0".to_string()), [0usize, 1]);
    }
    TreeSystem::build(tree, constituent, cut_pair, injection, None).unwrap()
}

/// Periodic line template whose consecutive cut pairs are disjoint
/// inside every constituent: both ends are non-redundant.
pub fn line_template() -> Template {
    let mut v_classes = BTreeMap::new();
    v_classes.insert("L".to_string(), skewed4());
    let mut w_classes = BTreeMap::new();
    w_classes.insert("m".to_string(), ["x".to_string(), "y".to_string()]);
    let incidences = vec![
        Incidence {
            id: "i0".into(),
            v_class: "L".into(),
            w_class: "m".into(),
            image: [0, 1],
        },
        Incidence {
            id: "i1".into(),
            v_class: "L".into(),
            w_class: "m".into(),
            image: [2, 3],
        },
    ];
    let mut continuation = BTreeMap::new();
    continuation.insert(("L".to_string(), "i0".to_string()), "i1".to_string());
    continuation.insert(("L".to_string(), "i1".to_string()), "i0".to_string());
    Template {
        v_classes,
        w_classes,
        incidences,
        base_class: "L".into(),
        continuation,
        depth: 3,
    }
}

pub fn line_system(k: u32) -> TreeSystem {
    line_template().unfold(k).unwrap()
}

/// Periodic line whose consecutive cut pairs always share the point
/// `p0`: both ends are redundant.
pub fn lineshare_template() -> Template {
    let mut t = line_template();
    t.incidences[1].image = [0, 2];
    t
}

pub fn lineshare_system(k: u32) -> TreeSystem {
    lineshare_template().unfold(k).unwrap()
}

/// Homogeneous trivalent template: every constituent meets three cut
/// pairs with images {p0,p1}, {p2,p3}, {p1,p2}. The straight-ahead
/// continuation alternates the disjoint pairs, so every canonical ray is
/// non-redundant.
pub fn trivalent_template() -> Template {
    let mut v_classes = BTreeMap::new();
    v_classes.insert("V1".to_string(), skewed4());
    v_classes.insert("V2".to_string(), skewed4());
    let mut w_classes = BTreeMap::new();
    for w in ["wa", "wb", "wc"] {
        w_classes.insert(w.to_string(), ["x".to_string(), "y".to_string()]);
    }
    let image_of = |w: &str| -> [usize; 2] {
        match w {
            "wa" => [0, 1],
            "wb" => [2, 3],
            _ => [1, 2],
        }
    };
    let mut incidences = Vec::new();
    for (suffix, v_class) in [("1", "V1"), ("2", "V2")] {
        for w in ["wa", "wb", "wc"] {
            incidences.push(Incidence {
                id: format!("i{}{}", &w[1..], suffix),
                v_class: v_class.to_string(),
                w_class: w.to_string(),
                image: image_of(w),
            });
        }
    }
    let mut continuation = BTreeMap::new();
    for (suffix, v_class) in [("1", "V1"), ("2", "V2")] {
        continuation.insert(
            (v_class.to_string(), format!("ia{suffix}")),
            format!("ib{suffix}"),
        );
        continuation.insert(
            (v_class.to_string(), format!("ib{suffix}")),
            format!("ia{suffix}"),
        );
        continuation.insert(
            (v_class.to_string(), format!("ic{suffix}")),
            format!("ia{suffix}"),
        );
    }
    Template {
        v_classes,
        w_classes,
        incidences,
        base_class: "V1".into(),
        continuation,
        depth: 4,
    }
}

pub fn trivalent_system(k: u32) -> TreeSystem {
    trivalent_template().unfold(k).unwrap()
}

/// All bundled tree systems at their round-trip depths, keyed by name.
pub fn bundled_tree_systems() -> Vec<(String, TreeSystem)> {
    vec![
        ("pair".to_string(), pair_system()),
        ("quad".to_string(), quad_system()),
        ("line".to_string(), line_system(3)),
        ("lineshare".to_string(), lineshare_system(3)),
        ("trivalent".to_string(), trivalent_system(3)),
    ]
}

/// Bundled systems small enough for the exhaustive linking-chain oracle.
pub fn small_tree_systems() -> Vec<(String, TreeSystem)> {
    vec![
        ("pair".to_string(), pair_system()),
        ("quad".to_string(), quad_system()),
        ("line_k1".to_string(), line_system(1)),
        ("lineshare_k1".to_string(), lineshare_system(1)),
    ]
}
