//! The slow, exact reasoner: graph edit distance over concept graphs, a
//! prototype knowledge base, and similarity-softmax classification.
//!
//! Distances are exact minima over all injective partial node mappings, found
//! by depth-first search with an admissible bound (identical results to plain
//! exhaustive enumeration). The knowledge base is append-only: entries are
//! never touched after insertion, which is what makes the reasoner's
//! predictions on old classes permanently stable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decompose::ConceptGraph;
use crate::error::{Error, Result};

/// Exact edit distance is only computed for graphs up to this many nodes.
pub const MAX_GED_NODES: usize = 6;

/// Edit cost table. All costs are non-negative and substitution is symmetric
/// by construction (a substitution cost depends only on whether the attribute
/// differs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GedCosts {
    pub node_shape_sub: f64,
    pub node_color_sub: f64,
    pub node_indel: f64,
    pub edge_sub: f64,
    pub edge_indel: f64,
}

impl Default for GedCosts {
    fn default() -> Self {
        GedCosts {
            node_shape_sub: 1.0,
            node_color_sub: 1.0,
            node_indel: 2.0,
            edge_sub: 1.0,
            edge_indel: 1.0,
        }
    }
}

struct GedSearch<'a> {
    g1: &'a ConceptGraph,
    g2: &'a ConceptGraph,
    m1: Vec<Vec<Option<(u8, u8)>>>,
    m2: Vec<Vec<Option<(u8, u8)>>>,
    costs: &'a GedCosts,
    assignment: Vec<Option<usize>>,
    used: Vec<bool>,
    best: f64,
}

impl<'a> GedSearch<'a> {
    fn node_sub_cost(&self, v1: usize, v2: usize) -> f64 {
        let a = self.g1.nodes[v1];
        let b = self.g2.nodes[v2];
        let mut cost = 0.0;
        if a.shape != b.shape {
            cost += self.costs.node_shape_sub;
        }
        if a.color != b.color {
            cost += self.costs.node_color_sub;
        }
        cost
    }

    /// Edge cost between the new pair (v1 -> v2) and one already-processed
    /// node u1 (mapped to `image`, or deleted).
    fn edge_cost(&self, u1: usize, image: Option<usize>, v1: usize, v2: usize) -> f64 {
        let e1 = self.m1[u1][v1];
        match image {
            Some(u2) => {
                let e2 = self.m2[u2][v2];
                match (e1, e2) {
                    (Some(l1), Some(l2)) => {
                        if l1 == l2 {
                            0.0
                        } else {
                            self.costs.edge_sub
                        }
                    }
                    (Some(_), None) | (None, Some(_)) => self.costs.edge_indel,
                    (None, None) => 0.0,
                }
            }
            None => {
                if e1.is_some() {
                    self.costs.edge_indel
                } else {
                    0.0
                }
            }
        }
    }

    fn remaining_bound(&self, next: usize) -> f64 {
        let r1 = self.g1.nodes.len() - next;
        let r2 = self.used.iter().filter(|&&u| !u).count();
        self.costs.node_indel * (r1 as f64 - r2 as f64).abs()
    }

    fn leaf_cost(&self) -> f64 {
        let mut cost = 0.0;
        for used in &self.used {
            if !used {
                cost += self.costs.node_indel;
            }
        }
        for e in &self.g2.edges {
            let (a, b) = (e.from_idx as usize, e.to_idx as usize);
            if !self.used[a] || !self.used[b] {
                cost += self.costs.edge_indel;
            }
        }
        cost
    }

    fn search(&mut self, v1: usize, acc: f64) {
        if acc + self.remaining_bound(v1) >= self.best {
            return;
        }
        if v1 == self.g1.nodes.len() {
            let total = acc + self.leaf_cost();
            if total < self.best {
                self.best = total;
            }
            return;
        }
        for v2 in 0..self.g2.nodes.len() {
            if self.used[v2] {
                continue;
            }
            let mut step = self.node_sub_cost(v1, v2);
            for u1 in 0..v1 {
                step += self.edge_cost(u1, self.assignment[u1], v1, v2);
            }
            self.used[v2] = true;
            self.assignment[v1] = Some(v2);
            self.search(v1 + 1, acc + step);
            self.assignment[v1] = None;
            self.used[v2] = false;
        }
        // Delete v1: the node itself plus all its edges to processed nodes.
        let mut step = self.costs.node_indel;
        for u1 in 0..v1 {
            if self.m1[u1][v1].is_some() {
                step += self.costs.edge_indel;
            }
        }
        self.search(v1 + 1, acc + step);
    }
}

/// Exact graph edit distance between two concept graphs.
pub fn ged(g1: &ConceptGraph, g2: &ConceptGraph, costs: &GedCosts) -> Result<f64> {
    for g in [g1, g2] {
        if g.nodes.len() > MAX_GED_NODES {
            return Err(Error::GraphTooLarge { nodes: g.nodes.len(), max: MAX_GED_NODES });
        }
    }
    let delete_everything = costs.node_indel * (g1.nodes.len() + g2.nodes.len()) as f64
        + costs.edge_indel * (g1.edges.len() + g2.edges.len()) as f64;
    let mut search = GedSearch {
        g1,
        g2,
        m1: g1.label_matrix(),
        m2: g2.label_matrix(),
        costs,
        assignment: vec![None; g1.nodes.len()],
        used: vec![false; g2.nodes.len()],
        best: delete_everything + 1.0,
    };
    search.search(0, 0.0);
    Ok(search.best)
}

/// Similarity score `1 / (1 + ged)`, in (0, 1].
pub fn sim(g1: &ConceptGraph, g2: &ConceptGraph, costs: &GedCosts) -> Result<f64> {
    Ok(1.0 / (1.0 + ged(g1, g2, costs)?))
}

/// The graph minimizing total edit distance to the others (the class medoid).
/// Ties break on the lexicographically smallest canonical serialization, so
/// the result does not depend on input order.
pub fn select_prototype(graphs: &[ConceptGraph], costs: &GedCosts) -> Result<ConceptGraph> {
    if graphs.is_empty() {
        return Err(Error::EmptyClass);
    }
    // Many samples share the same graph; dedup to cut the quadratic work.
    let mut unique: Vec<(&ConceptGraph, String, f64)> = Vec::new();
    for g in graphs {
        let json = g.canonical_json();
        match unique.iter_mut().find(|(_, j, _)| *j == json) {
            Some(entry) => entry.2 += 1.0,
            None => unique.push((g, json, 1.0)),
        }
    }
    let mut best: Option<(f64, &str, &ConceptGraph)> = None;
    for (g, json, _) in &unique {
        let mut total = 0.0;
        for (other, _, count) in &unique {
            total += count * ged(g, other, costs)?;
        }
        let better = match &best {
            None => true,
            Some((t, j, _)) => total < *t || (total == *t && json.as_str() < *j),
        };
        if better {
            best = Some((total, json, g));
        }
    }
    Ok(best.expect("non-empty").2.clone())
}

/// Timestep-stamped prototype store. Append-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub entries: BTreeMap<u32, ConceptGraph>,
    pub timestep: u32,
}

impl KnowledgeBase {
    pub fn new() -> KnowledgeBase {
        KnowledgeBase::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stable JSON form: entries ascend by class id.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Versioned<'a> {
            format_version: u32,
            timestep: u32,
            entries: &'a BTreeMap<u32, ConceptGraph>,
        }
        serde_json::to_string_pretty(&Versioned {
            format_version: 1,
            timestep: self.timestep,
            entries: &self.entries,
        })
        .expect("knowledge base serialization cannot fail")
    }
}

/// Ingest one task: select a prototype per class and append it.
/// Returns a new knowledge base; the old entries are carried over untouched.
pub fn kb_update(
    kb: &KnowledgeBase,
    task_graphs: &BTreeMap<u32, Vec<ConceptGraph>>,
    costs: &GedCosts,
) -> Result<KnowledgeBase> {
    let mut next = kb.clone();
    for (&class_id, graphs) in task_graphs {
        if next.entries.contains_key(&class_id) {
            return Err(Error::DuplicateClass { class_id });
        }
        next.entries.insert(class_id, select_prototype(graphs, costs)?);
    }
    next.timestep = kb.timestep + 1;
    Ok(next)
}

/// Probabilities over a set of classes, ascending by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<(u32, f64)>,
}

impl ClassDistribution {
    /// Most probable class; exact ties go to the lowest class id.
    pub fn argmax(&self) -> u32 {
        let mut best = self.probs[0];
        for &(class_id, p) in &self.probs[1..] {
            if p > best.1 {
                best = (class_id, p);
            }
        }
        best.0
    }
}

/// Softmax over similarity scores against every prototype in the knowledge
/// base (class-incremental scope).
pub fn classify(kb: &KnowledgeBase, graph: &ConceptGraph, costs: &GedCosts) -> Result<ClassDistribution> {
    let all: Vec<u32> = kb.entries.keys().copied().collect();
    classify_masked(kb, graph, costs, &all)
}

/// Softmax over similarity scores restricted to `classes` (task-incremental
/// scope). Scores for classes outside the mask are never computed, so adding
/// unrelated classes to the knowledge base cannot perturb the result.
pub fn classify_masked(
    kb: &KnowledgeBase,
    graph: &ConceptGraph,
    costs: &GedCosts,
    classes: &[u32],
) -> Result<ClassDistribution> {
    let mut scored: Vec<(u32, f64)> = Vec::with_capacity(classes.len());
    for &class_id in classes {
        let prototype = kb.entries.get(&class_id).ok_or(Error::EmptyKnowledgeBase)?;
        scored.push((class_id, sim(graph, prototype, costs)?));
    }
    if scored.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    scored.sort_by_key(|&(class_id, _)| class_id);
    let max = scored.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(u32, f64)> =
        scored.iter().map(|&(c, s)| (c, (s - max).exp())).collect();
    let z: f64 = probs.iter().map(|&(_, e)| e).sum();
    for (_, p) in &mut probs {
        *p /= z;
    }
    Ok(ClassDistribution { probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{build_graph, ConceptNode, Detection, RelationEdge};
    use crate::scenegen::{ColorKind, ShapeKind};

    fn node_graph(attrs: &[(ShapeKind, ColorKind)]) -> ConceptGraph {
        // Chain the nodes left to right, 20 px apart.
        let detections: Vec<Detection> = attrs
            .iter()
            .enumerate()
            .map(|(i, &(shape, color))| Detection {
                bbox: (0.0, 0.0, 1.0, 1.0),
                shape,
                color,
                centroid: (20.0 * i as f64, 10.0),
            })
            .collect();
        build_graph(&detections)
    }

    #[test]
    fn ged_of_identical_graphs_is_zero() {
        let g = node_graph(&[
            (ShapeKind::Circle, ColorKind::Blue),
            (ShapeKind::Square, ColorKind::Red),
            (ShapeKind::Pentagon, ColorKind::White),
        ]);
        assert_eq!(ged(&g, &g, &GedCosts::default()).unwrap(), 0.0);
    }

    #[test]
    fn single_color_substitution_costs_one() {
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let b = node_graph(&[(ShapeKind::Circle, ColorKind::Red)]);
        assert_eq!(ged(&a, &b, &GedCosts::default()).unwrap(), 1.0);
    }

    #[test]
    fn deleting_one_node_costs_node_indel() {
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let empty = ConceptGraph { nodes: Vec::new(), edges: Vec::new() };
        assert_eq!(ged(&a, &empty, &GedCosts::default()).unwrap(), 2.0);
        assert_eq!(ged(&empty, &a, &GedCosts::default()).unwrap(), 2.0);
    }

    #[test]
    fn oversized_graph_is_rejected() {
        let big = ConceptGraph {
            nodes: vec![ConceptNode { shape: ShapeKind::Circle, color: ColorKind::Blue }; 7],
            edges: Vec::new(),
        };
        let small = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        assert!(matches!(
            ged(&big, &small, &GedCosts::default()),
            Err(Error::GraphTooLarge { nodes: 7, .. })
        ));
    }

    #[test]
    fn sim_follows_the_reciprocal_formula() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        assert_eq!(sim(&a, &a, &costs).unwrap(), 1.0);
        let b = node_graph(&[(ShapeKind::Circle, ColorKind::Red)]);
        assert_eq!(sim(&a, &b, &costs).unwrap(), 0.5);
        let c = node_graph(&[(ShapeKind::Square, ColorKind::Red)]);
        // shape + color substitution, plus one more unit via an extra node.
        let d = node_graph(&[
            (ShapeKind::Square, ColorKind::Red),
            (ShapeKind::Square, ColorKind::Red),
        ]);
        assert_eq!(ged(&c, &d, &GedCosts::default()).unwrap(), 3.0);
        assert_eq!(sim(&c, &d, &costs).unwrap(), 0.25);
    }

    #[test]
    fn prototype_of_singleton_and_uniform_lists() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        assert_eq!(select_prototype(&[a.clone()], &costs).unwrap(), a);
        assert_eq!(select_prototype(&[a.clone(), a.clone(), a.clone()], &costs).unwrap(), a);
        assert!(matches!(select_prototype(&[], &costs), Err(Error::EmptyClass)));
    }

    #[test]
    fn prototype_is_the_medoid() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let b = node_graph(&[(ShapeKind::Square, ColorKind::Red)]);
        assert_eq!(ged(&a, &b, &costs).unwrap(), 2.0);
        // Totals: a -> 2, b -> 4.
        let proto = select_prototype(&[a.clone(), a.clone(), b], &costs).unwrap();
        assert_eq!(proto, a);
    }

    fn task(entries: &[(u32, ConceptGraph)]) -> BTreeMap<u32, Vec<ConceptGraph>> {
        entries.iter().map(|(id, g)| (*id, vec![g.clone()])).collect()
    }

    #[test]
    fn kb_update_appends_without_touching_old_entries() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let b = node_graph(&[(ShapeKind::Square, ColorKind::Red)]);
        let kb0 = KnowledgeBase::new();
        let kb1 = kb_update(&kb0, &task(&[(0, a.clone())]), &costs).unwrap();
        assert_eq!(kb1.len(), 1);
        assert_eq!(kb1.timestep, 1);
        let kb2 = kb_update(&kb1, &task(&[(1, b)]), &costs).unwrap();
        assert_eq!(kb2.len(), 2);
        assert_eq!(kb2.timestep, 2);
        assert_eq!(kb2.entries[&0], a);
        assert!(matches!(
            kb_update(&kb2, &task(&[(0, a)]), &costs),
            Err(Error::DuplicateClass { class_id: 0 })
        ));
    }

    #[test]
    fn kb_is_order_invariant() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let b = node_graph(&[(ShapeKind::Square, ColorKind::Red)]);
        let t1 = task(&[(0, a.clone()), (1, b.clone())]);
        let t2 = task(&[(2, node_graph(&[(ShapeKind::Pentagon, ColorKind::White)]))]);
        let fwd = kb_update(&kb_update(&KnowledgeBase::new(), &t1, &costs).unwrap(), &t2, &costs)
            .unwrap();
        let rev = kb_update(&kb_update(&KnowledgeBase::new(), &t2, &costs).unwrap(), &t1, &costs)
            .unwrap();
        assert_eq!(fwd.to_json(), rev.to_json());
    }

    #[test]
    fn classify_singleton_kb_is_certain() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let kb = kb_update(&KnowledgeBase::new(), &task(&[(3, a.clone())]), &costs).unwrap();
        let dist = classify(&kb, &a, &costs).unwrap();
        assert_eq!(dist.probs, vec![(3, 1.0)]);
        assert!(matches!(
            classify(&KnowledgeBase::new(), &a, &costs),
            Err(Error::EmptyKnowledgeBase)
        ));
    }

    #[test]
    fn classify_matches_the_softmax_of_similarities() {
        let costs = GedCosts::default();
        // Prototype B sits at distance 4 from the query, prototype A at 0.
        let a = node_graph(&[
            (ShapeKind::Circle, ColorKind::Blue),
            (ShapeKind::Square, ColorKind::Red),
        ]);
        let b = node_graph(&[
            (ShapeKind::Triangle, ColorKind::Green),
            (ShapeKind::Pentagon, ColorKind::Yellow),
        ]);
        assert_eq!(ged(&a, &b, &costs).unwrap(), 4.0);
        let kb = kb_update(
            &KnowledgeBase::new(),
            &task(&[(0, a.clone()), (1, b)]),
            &costs,
        )
        .unwrap();
        let dist = classify(&kb, &a, &costs).unwrap();
        let expected = (1.0f64).exp() / ((1.0f64).exp() + (0.2f64).exp());
        assert!((dist.probs[0].1 - expected).abs() < 1e-12);
        assert!((dist.probs[0].1 - 0.690).abs() < 1e-3);
        let total: f64 = dist.probs.iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equidistant_prototypes_tie_to_the_lower_class_id() {
        let costs = GedCosts::default();
        let query = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let p1 = node_graph(&[(ShapeKind::Circle, ColorKind::Red)]);
        let p2 = node_graph(&[(ShapeKind::Circle, ColorKind::Green)]);
        let kb =
            kb_update(&KnowledgeBase::new(), &task(&[(4, p1), (7, p2)]), &costs).unwrap();
        let dist = classify(&kb, &query, &costs).unwrap();
        assert_eq!(dist.probs[0].1, dist.probs[1].1);
        assert_eq!(dist.argmax(), 4);
    }

    #[test]
    fn masked_classification_ignores_other_classes() {
        let costs = GedCosts::default();
        let a = node_graph(&[(ShapeKind::Circle, ColorKind::Blue)]);
        let b = node_graph(&[(ShapeKind::Square, ColorKind::Red)]);
        let c = node_graph(&[(ShapeKind::Pentagon, ColorKind::White)]);
        let kb = kb_update(
            &KnowledgeBase::new(),
            &task(&[(0, a.clone()), (1, b.clone())]),
            &costs,
        )
        .unwrap();
        let before = classify_masked(&kb, &a, &costs, &[0, 1]).unwrap();
        let kb2 = kb_update(&kb, &task(&[(2, c)]), &costs).unwrap();
        let after = classify_masked(&kb2, &a, &costs, &[0, 1]).unwrap();
        assert_eq!(before, after);
    }
}
