//! Decomposition of scenes and rasters into concept graphs.
//!
//! A concept graph is the abstract, class-identifying summary of one image:
//! one node per detected object carrying (shape, color), and one edge per
//! unordered node pair carrying the quantized direction (eight 45-degree
//! sectors) and quantized center distance between the two objects. Both the
//! oracle path (scene metadata) and the classical path (raster detection)
//! produce graphs through the same `build_graph`, and none of it has any
//! trainable or time-varying state.

mod detect;

pub use detect::detect_objects;

use serde::{Deserialize, Serialize};

use crate::scenegen::{self, ColorKind, Scene, ShapeKind};

/// Width of one distance quantization bin, in pixels.
pub const DIST_BIN_PX: f64 = 6.0;
/// Distance bins are capped so the label fits comfortably in a byte.
pub const DIST_BIN_MAX: u8 = 15;
/// Node ordering quantizes positions to this grid (relative to the scene's
/// top-left-most centroid, so ordering is translation invariant).
pub const POSITION_QUANT_PX: f64 = 4.0;

/// One detected object: box, attributes, and center of mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// (x0, y0, x1, y1), with x0 < x1 and y0 < y1.
    pub bbox: (f64, f64, f64, f64),
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub centroid: (f64, f64),
}

/// A graph node: the class-relevant attributes of one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptNode {
    pub shape: ShapeKind,
    pub color: ColorKind,
}

impl ConceptNode {
    fn sort_key(self) -> (u8, u8) {
        (self.shape.code(), self.color.code())
    }
}

/// A spatial relation between two nodes. Stored once per unordered pair with
/// `from_idx < to_idx`; the reverse direction is `direction_bin + 4 mod 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub from_idx: u32,
    pub to_idx: u32,
    /// 45-degree sector of the angle of centroid(to) - centroid(from);
    /// bin 0 is centered on the +x axis.
    pub direction_bin: u8,
    /// Quantized center-to-center distance, `floor(d / DIST_BIN_PX)`, capped.
    pub distance_bin: u8,
}

/// The complete labeled graph over all detections of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGraph {
    pub nodes: Vec<ConceptNode>,
    pub edges: Vec<RelationEdge>,
}

impl ConceptGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Canonical JSON form: node order and edge order are already canonical,
    /// so this string is stable across runs and platforms.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialization cannot fail")
    }

    /// Oriented edge labels as an adjacency matrix: entry (i, j) holds the
    /// (direction, distance) label of the edge read from i to j.
    pub(crate) fn label_matrix(&self) -> Vec<Vec<Option<(u8, u8)>>> {
        let n = self.nodes.len();
        let mut mat = vec![vec![None; n]; n];
        for e in &self.edges {
            let (f, t) = (e.from_idx as usize, e.to_idx as usize);
            mat[f][t] = Some((e.direction_bin, e.distance_bin));
            mat[t][f] = Some(((e.direction_bin + 4) % 8, e.distance_bin));
        }
        mat
    }

    /// A string equal for exactly the graphs that admit a zero-cost node
    /// bijection (same node attributes, same edge labels). Positions play no
    /// role. Computed as the lexicographically minimal serialization over
    /// attribute-preserving node orders.
    pub fn isomorphism_key(&self) -> String {
        let n = self.nodes.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| self.nodes[i].sort_key());

        // Only permutations within groups of identical node attributes can
        // change the serialization while keeping node order sorted.
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut start = 0;
        for i in 1..=n {
            if i == n || self.nodes[order[i]].sort_key() != self.nodes[order[start]].sort_key() {
                groups.push((start, i));
                start = i;
            }
        }

        let mat = self.label_matrix();
        let mut best: Option<String> = None;
        permute_groups(&mut order, &groups, 0, &mut |perm| {
            let mut inv = vec![0usize; n];
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                inv[old_idx] = new_idx;
            }
            let mut edges: Vec<(usize, usize, u8, u8)> = Vec::with_capacity(n * (n - 1) / 2);
            for e in &self.edges {
                let (mut a, mut b) = (inv[e.from_idx as usize], inv[e.to_idx as usize]);
                let mut dir = e.direction_bin;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                    dir = (dir + 4) % 8;
                }
                let (_, dist) = mat[e.from_idx as usize][e.to_idx as usize].unwrap();
                edges.push((a, b, dir, dist));
            }
            edges.sort_unstable();
            let mut s = String::new();
            for &i in perm.iter() {
                let node = self.nodes[i];
                s.push_str(&format!("n{},{};", node.shape.code(), node.color.code()));
            }
            for (a, b, dir, dist) in edges {
                s.push_str(&format!("e{a},{b},{dir},{dist};"));
            }
            if best.as_ref().map_or(true, |b| s < *b) {
                best = Some(s);
            }
        });
        best.unwrap_or_default()
    }
}

fn permute_groups(
    order: &mut Vec<usize>,
    groups: &[(usize, usize)],
    g: usize,
    visit: &mut dyn FnMut(&[usize]),
) {
    if g == groups.len() {
        visit(order);
        return;
    }
    let (lo, hi) = groups[g];
    permute_range(order, lo, hi, lo, groups, g, visit);
}

fn permute_range(
    order: &mut Vec<usize>,
    lo: usize,
    hi: usize,
    k: usize,
    groups: &[(usize, usize)],
    g: usize,
    visit: &mut dyn FnMut(&[usize]),
) {
    if k == hi {
        permute_groups(order, groups, g + 1, visit);
        return;
    }
    for i in k..hi {
        order.swap(k, i);
        permute_range(order, lo, hi, k + 1, groups, g, visit);
        order.swap(k, i);
    }
}

/// Exact detections straight from scene metadata.
pub fn oracle_detect(scene: &Scene) -> Vec<Detection> {
    scene
        .objects
        .iter()
        .map(|object| {
            let (x0, y0, x1, y1) = scenegen::object_bbox(object);
            let w = f64::from(scene.canvas.0);
            let h = f64::from(scene.canvas.1);
            Detection {
                bbox: (x0.max(0.0), y0.max(0.0), x1.min(w), y1.min(h)),
                shape: object.shape,
                color: object.color,
                centroid: (object.cx, object.cy),
            }
        })
        .collect()
}

/// Direction sector of the vector (dx, dy); sector 0 is centered on +x and
/// boundaries fall to the lower sector.
pub(crate) fn direction_bin(dx: f64, dy: f64) -> u8 {
    let mut theta = dy.atan2(dx).to_degrees();
    if theta < 0.0 {
        theta += 360.0;
    }
    let bin = ((theta + 22.5) / 45.0).ceil() as i64 - 1;
    (bin.rem_euclid(8)) as u8
}

pub(crate) fn distance_bin(dx: f64, dy: f64) -> u8 {
    let d = (dx * dx + dy * dy).sqrt();
    let bin = (d / DIST_BIN_PX).floor() as i64;
    bin.clamp(0, i64::from(DIST_BIN_MAX)) as u8
}

/// Assemble the concept graph from detections.
///
/// Nodes are ordered by (shape, color, quantized position); positions are
/// quantized on a 4-px grid relative to the minimal centroid so that
/// translating the whole scene leaves the graph byte-identical. Edges connect
/// every pair.
pub fn build_graph(detections: &[Detection]) -> ConceptGraph {
    if detections.is_empty() {
        return ConceptGraph { nodes: Vec::new(), edges: Vec::new() };
    }
    let min_x =
        detections.iter().map(|d| d.centroid.0).fold(f64::INFINITY, f64::min);
    let min_y =
        detections.iter().map(|d| d.centroid.1).fold(f64::INFINITY, f64::min);
    let quant = |c: f64, min: f64| ((c - min) / POSITION_QUANT_PX).floor() as i64;

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by_key(|&i| {
        let d = &detections[i];
        (
            d.shape.code(),
            d.color.code(),
            quant(d.centroid.0, min_x),
            quant(d.centroid.1, min_y),
        )
    });

    let nodes: Vec<ConceptNode> = order
        .iter()
        .map(|&i| ConceptNode { shape: detections[i].shape, color: detections[i].color })
        .collect();

    let mut edges = Vec::with_capacity(nodes.len() * (nodes.len().saturating_sub(1)) / 2);
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            let (ax, ay) = detections[order[a]].centroid;
            let (bx, by) = detections[order[b]].centroid;
            let (dx, dy) = (bx - ax, by - ay);
            edges.push(RelationEdge {
                from_idx: a as u32,
                to_idx: b as u32,
                direction_bin: direction_bin(dx, dy),
                distance_bin: distance_bin(dx, dy),
            });
        }
    }
    ConceptGraph { nodes, edges }
}
