//! Classical object detection: palette segmentation, connected components,
//! and contour-based shape classification.
//!
//! Pixels are assigned to the nearest palette color (background excluded by a
//! distance threshold), same-color components are extracted with
//! 8-connectivity, and each surviving component is classified from its outer
//! contour: a polygon approximation with 3/4/5 vertices names the polygon,
//! otherwise a sufficiently circular blob is a circle. Ambiguous components
//! get best-effort labels; the cost of a wrong label surfaces as a graph
//! mismatch downstream, never as an error here.

use super::Detection;
use crate::scenegen::{ColorKind, Raster, ShapeKind};

/// Pixels farther than this from every palette color are background.
const BG_DIST_THRESHOLD: f64 = 60.0;
/// Components smaller than this many pixels are discarded as noise.
const MIN_COMPONENT_AREA: usize = 12;
/// Circularity (4*pi*A/P^2) above which a non-polygon contour is a circle.
const CIRCULARITY_THRESHOLD: f64 = 0.82;
/// Polygon approximation tolerance, as a fraction of the contour perimeter.
const APPROX_EPS_FRACTION: f64 = 0.055;

fn nearest_palette(rgb: [u8; 3]) -> Option<ColorKind> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for color in ColorKind::ALL {
        let c = color.rgb();
        let d = (0..3)
            .map(|i| (f64::from(rgb[i]) - f64::from(c[i])).powi(2))
            .sum::<f64>()
            .sqrt();
        if d < best_d {
            best_d = d;
            best = Some(color);
        }
    }
    if best_d <= BG_DIST_THRESHOLD {
        best
    } else {
        None
    }
}

struct Component {
    color: ColorKind,
    pixels: Vec<(u32, u32)>,
}

/// Connected components of same-color pixels, 8-connectivity, in scan order.
fn color_components(raster: &Raster) -> Vec<Component> {
    let w = raster.width as usize;
    let h = raster.height as usize;
    let labels: Vec<Option<ColorKind>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| nearest_palette(raster.get(x as u32, y as u32)))
        .collect();
    let mut visited = vec![false; w * h];
    let mut components = Vec::new();

    for start in 0..w * h {
        let color = match labels[start] {
            Some(c) if !visited[start] => c,
            _ => continue,
        };
        let mut pixels = Vec::new();
        let mut queue = vec![start];
        visited[start] = true;
        while let Some(idx) = queue.pop() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x as u32, y as u32));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if !visited[nidx] && labels[nidx] == Some(color) {
                        visited[nidx] = true;
                        queue.push(nidx);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        components.push(Component { color, pixels });
    }
    components
}

/// Moore-neighbor boundary trace of a component, starting from its
/// topmost-leftmost pixel. Returns the closed outer contour as pixel coords.
fn trace_contour(pixels: &[(u32, u32)]) -> Vec<(i64, i64)> {
    use std::collections::HashSet;
    let set: HashSet<(i64, i64)> =
        pixels.iter().map(|&(x, y)| (i64::from(x), i64::from(y))).collect();
    let start = pixels
        .iter()
        .map(|&(x, y)| (i64::from(x), i64::from(y)))
        .min_by_key(|&(x, y)| (y, x))
        .expect("non-empty component");

    // Clockwise Moore neighborhood starting from west.
    const NEIGHBORS: [(i64, i64); 8] =
        [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

    let mut contour = vec![start];
    let mut current = start;
    // Entered the start pixel moving east, so backtracking points west.
    let mut backtrack_dir = 0usize;
    loop {
        let mut found = None;
        for step in 0..8 {
            let dir = (backtrack_dir + step) % 8;
            let candidate = (current.0 + NEIGHBORS[dir].0, current.1 + NEIGHBORS[dir].1);
            if set.contains(&candidate) {
                found = Some((candidate, dir));
                break;
            }
        }
        match found {
            None => break, // isolated pixel
            Some((next, dir)) => {
                if next == start && contour.len() > 1 {
                    break;
                }
                contour.push(next);
                current = next;
                // Resume scanning from just past the pixel we came from.
                backtrack_dir = (dir + 5) % 8;
            }
        }
        if contour.len() > 4 * pixels.len() + 8 {
            break; // safety bound
        }
    }
    contour
}

fn contour_perimeter(contour: &[(i64, i64)]) -> f64 {
    let n = contour.len();
    if n < 2 {
        return 1.0;
    }
    (0..n)
        .map(|i| {
            let (x0, y0) = contour[i];
            let (x1, y1) = contour[(i + 1) % n];
            (((x1 - x0).pow(2) + (y1 - y0).pow(2)) as f64).sqrt()
        })
        .sum()
}

fn contour_area(contour: &[(i64, i64)]) -> f64 {
    let n = contour.len();
    if n < 3 {
        return 1.0;
    }
    let twice: i64 = (0..n)
        .map(|i| {
            let (x0, y0) = contour[i];
            let (x1, y1) = contour[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    // Digital contours pass through pixel centers; add half the boundary and
    // one for the center pixel ring (Pick-style correction).
    (twice.abs() as f64) / 2.0 + contour_perimeter(contour) / 2.0 + 1.0
}

fn point_segment_distance(p: (i64, i64), a: (i64, i64), b: (i64, i64)) -> f64 {
    let (px, py) = (p.0 as f64, p.1 as f64);
    let (ax, ay) = (a.0 as f64, a.1 as f64);
    let (bx, by) = (b.0 as f64, b.1 as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    ((px - (ax + t * dx)).powi(2) + (py - (ay + t * dy)).powi(2)).sqrt()
}

fn douglas_peucker(points: &[(i64, i64)], eps: f64, keep: &mut Vec<(i64, i64)>) {
    if points.len() < 3 {
        return;
    }
    let (mut max_d, mut max_i) = (0.0f64, 0usize);
    let a = points[0];
    let b = points[points.len() - 1];
    for (i, &p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
        let d = point_segment_distance(p, a, b);
        if d > max_d {
            max_d = d;
            max_i = i;
        }
    }
    if max_d > eps {
        douglas_peucker(&points[..=max_i], eps, keep);
        keep.pop(); // shared split point, keep once
        keep.push(points[max_i]);
        douglas_peucker(&points[max_i..], eps, keep);
    }
}

/// Number of vertices in the closed polygon approximation of a contour.
fn approx_vertex_count(contour: &[(i64, i64)], eps: f64) -> usize {
    if contour.len() < 3 {
        return contour.len();
    }
    // Split the closed contour at the two mutually farthest of (first point,
    // farthest-from-first), then simplify both open halves.
    let far = (0..contour.len())
        .max_by(|&i, &j| {
            let d = |k: usize| {
                let (x, y) = contour[k];
                let (x0, y0) = contour[0];
                (x - x0).pow(2) + (y - y0).pow(2)
            };
            d(i).cmp(&d(j))
        })
        .unwrap();
    if far == 0 {
        return 1;
    }
    let mut first_half = vec![contour[0]];
    douglas_peucker(&contour[..=far], eps, &mut first_half);
    first_half.push(contour[far]);

    let mut rest: Vec<(i64, i64)> = contour[far..].to_vec();
    rest.push(contour[0]);
    let mut second_half = vec![contour[far]];
    douglas_peucker(&rest, eps, &mut second_half);
    second_half.push(contour[0]);

    // Vertices: both chain interiors plus the two split points.
    (first_half.len() - 2) + (second_half.len() - 2) + 2
}

fn classify_shape(contour: &[(i64, i64)]) -> ShapeKind {
    let perimeter = contour_perimeter(contour);
    let area = contour_area(contour);
    let circularity = 4.0 * std::f64::consts::PI * area / (perimeter * perimeter);
    let eps = APPROX_EPS_FRACTION * perimeter;
    let vertices = approx_vertex_count(contour, eps);
    match vertices {
        3 => ShapeKind::Triangle,
        4 => ShapeKind::Square,
        5 => ShapeKind::Pentagon,
        _ => {
            if circularity > CIRCULARITY_THRESHOLD {
                ShapeKind::Circle
            } else if vertices < 3 {
                ShapeKind::Triangle
            } else {
                ShapeKind::Pentagon
            }
        }
    }
}

/// Detect objects in a raster.
pub fn detect_objects(raster: &Raster) -> Vec<Detection> {
    color_components(raster)
        .into_iter()
        .filter(|c| c.pixels.len() >= MIN_COMPONENT_AREA)
        .map(|component| {
            let contour = trace_contour(&component.pixels);
            let shape = classify_shape(&contour);
            // Majority color vote is trivial here: segmentation already
            // grouped pixels by palette label.
            let color = component.color;
            let n = component.pixels.len() as f64;
            let cx = component.pixels.iter().map(|&(x, _)| f64::from(x) + 0.5).sum::<f64>() / n;
            let cy = component.pixels.iter().map(|&(_, y)| f64::from(y) + 0.5).sum::<f64>() / n;
            let x0 = component.pixels.iter().map(|&(x, _)| x).min().unwrap();
            let x1 = component.pixels.iter().map(|&(x, _)| x).max().unwrap();
            let y0 = component.pixels.iter().map(|&(_, y)| y).min().unwrap();
            let y1 = component.pixels.iter().map(|&(_, y)| y).max().unwrap();
            Detection {
                bbox: (f64::from(x0), f64::from(y0), f64::from(x1 + 1), f64::from(y1 + 1)),
                shape,
                color,
                centroid: (cx, cy),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{render, ObjectInstance, Scene, CANVAS};

    fn single_object_scene(object: ObjectInstance) -> Scene {
        Scene { class_id: 0, objects: vec![object], canvas: (CANVAS, CANVAS) }
    }

    #[test]
    fn background_only_raster_yields_nothing() {
        let raster = render(&Scene { class_id: 0, objects: Vec::new(), canvas: (CANVAS, CANVAS) });
        assert!(detect_objects(&raster).is_empty());
    }

    #[test]
    fn single_filled_red_square_detected() {
        let scene = single_object_scene(ObjectInstance {
            shape: ShapeKind::Square,
            color: ColorKind::Red,
            cx: 30.0,
            cy: 34.0,
            scale: 1.0,
            rotation: 0.0,
            filled: true,
            stroke_width: 1.0,
        });
        let detections = detect_objects(&render(&scene));
        assert_eq!(detections.len(), 1);
        let d = &detections[0];
        assert_eq!(d.shape, ShapeKind::Square);
        assert_eq!(d.color, ColorKind::Red);
        assert!((d.centroid.0 - 30.0).abs() <= 1.5, "cx {}", d.centroid.0);
        assert!((d.centroid.1 - 34.0).abs() <= 1.5, "cy {}", d.centroid.1);
    }

    #[test]
    fn shape_classification_handles_all_kinds_at_scale_one() {
        for shape in ShapeKind::ALL {
            for filled in [true, false] {
                let scene = single_object_scene(ObjectInstance {
                    shape,
                    color: ColorKind::Yellow,
                    cx: 32.0,
                    cy: 32.0,
                    scale: 1.2,
                    rotation: 10.0,
                    filled,
                    stroke_width: 2.0,
                });
                let detections = detect_objects(&render(&scene));
                assert_eq!(detections.len(), 1, "{shape:?} filled={filled}");
                assert_eq!(detections[0].shape, shape, "filled={filled}");
            }
        }
    }
}
