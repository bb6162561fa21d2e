//! Deterministic rasterization of scenes.
//!
//! No anti-aliasing: a pixel is painted with the exact palette color when its
//! center lies in the shape (fill) or within half a stroke width of the
//! boundary (outline). Every pixel of a raster is therefore either the
//! background triple or one palette triple, which keeps color segmentation
//! exact downstream.

use serde::{Deserialize, Serialize};

use super::{ObjectInstance, Scene, ShapeKind, BACKGROUND};

/// Packed RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Raster {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Raster { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Vertices of the polygon for a shape, or None for a circle.
/// Listed in angle order around the center; convex by construction.
pub(crate) fn polygon_vertices(object: &ObjectInstance) -> Option<Vec<(f64, f64)>> {
    let radius = super::BASE_RADIUS * object.scale;
    let (sides, phase) = match object.shape {
        ShapeKind::Square => (4, 45.0),
        ShapeKind::Triangle => (3, -90.0),
        ShapeKind::Pentagon => (5, -90.0),
        ShapeKind::Circle => return None,
    };
    let vertices = (0..sides)
        .map(|k| {
            let angle =
                (object.rotation + phase + 360.0 * f64::from(k) / f64::from(sides)).to_radians();
            (object.cx + radius * angle.cos(), object.cy + radius * angle.sin())
        })
        .collect();
    Some(vertices)
}

fn point_in_convex_polygon(px: f64, py: f64, vertices: &[(f64, f64)]) -> bool {
    let mut sign = 0.0f64;
    let n = vertices.len();
    for i in 0..n {
        let (x0, y0) = vertices[i];
        let (x1, y1) = vertices[(i + 1) % n];
        let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn distance_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn covers(object: &ObjectInstance, px: f64, py: f64) -> bool {
    let radius = super::BASE_RADIUS * object.scale;
    match polygon_vertices(object) {
        None => {
            let d = ((px - object.cx).powi(2) + (py - object.cy).powi(2)).sqrt();
            if object.filled {
                d <= radius
            } else {
                (d - radius).abs() <= object.stroke_width / 2.0
            }
        }
        Some(vertices) => {
            if object.filled {
                point_in_convex_polygon(px, py, &vertices)
            } else {
                let n = vertices.len();
                (0..n).any(|i| {
                    distance_to_segment(px, py, vertices[i], vertices[(i + 1) % n])
                        <= object.stroke_width / 2.0
                })
            }
        }
    }
}

/// Axis-aligned bounding box of the drawn geometry, in continuous canvas
/// coordinates (before clamping).
pub fn object_bbox(object: &ObjectInstance) -> (f64, f64, f64, f64) {
    let stroke = if object.filled { 0.0 } else { object.stroke_width / 2.0 };
    match polygon_vertices(object) {
        None => {
            let r = super::BASE_RADIUS * object.scale + stroke;
            (object.cx - r, object.cy - r, object.cx + r, object.cy + r)
        }
        Some(vertices) => {
            let mut x0 = f64::INFINITY;
            let mut y0 = f64::INFINITY;
            let mut x1 = f64::NEG_INFINITY;
            let mut y1 = f64::NEG_INFINITY;
            for (x, y) in vertices {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            (x0 - stroke, y0 - stroke, x1 + stroke, y1 + stroke)
        }
    }
}

/// Rasterize a scene. Objects are painted in order, later over earlier.
pub fn render(scene: &Scene) -> Raster {
    let (width, height) = scene.canvas;
    let mut raster = Raster::filled(width, height, BACKGROUND);
    for object in &scene.objects {
        let (bx0, by0, bx1, by1) = object_bbox(object);
        let x_lo = bx0.floor().max(0.0) as u32;
        let y_lo = by0.floor().max(0.0) as u32;
        let x_hi = (bx1.ceil() as u32).min(width.saturating_sub(1));
        let y_hi = (by1.ceil() as u32).min(height.saturating_sub(1));
        let rgb = object.color.rgb();
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if covers(object, f64::from(x) + 0.5, f64::from(y) + 0.5) {
                    raster.set(x, y, rgb);
                }
            }
        }
    }
    raster
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{ColorKind, CANVAS};

    fn blank_scene() -> Scene {
        Scene { class_id: 0, objects: Vec::new(), canvas: (CANVAS, CANVAS) }
    }

    #[test]
    fn empty_scene_is_pure_background() {
        let raster = render(&blank_scene());
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                assert_eq!(raster.get(x, y), BACKGROUND);
            }
        }
    }

    #[test]
    fn filled_circle_covers_its_center() {
        let mut scene = blank_scene();
        scene.objects.push(ObjectInstance {
            shape: ShapeKind::Circle,
            color: ColorKind::Blue,
            cx: 32.0,
            cy: 32.0,
            scale: 1.0,
            rotation: 0.0,
            filled: true,
            stroke_width: 1.0,
        });
        let raster = render(&scene);
        assert_eq!(raster.get(32, 32), ColorKind::Blue.rgb());
    }

    #[test]
    fn render_is_deterministic() {
        let schema = crate::scenegen::sample_class_schema(
            &mut crate::rng::stream(3, "schema", &[0]),
            0,
            &[],
        )
        .unwrap();
        let scene =
            crate::scenegen::instantiate_scene(&schema, &mut crate::rng::stream(4, "s", &[]), 2.0);
        assert_eq!(render(&scene).data, render(&scene).data);
    }

    #[test]
    fn outline_shapes_touch_only_the_boundary() {
        let mut scene = blank_scene();
        scene.objects.push(ObjectInstance {
            shape: ShapeKind::Circle,
            color: ColorKind::Red,
            cx: 32.0,
            cy: 32.0,
            scale: 1.0,
            rotation: 0.0,
            filled: false,
            stroke_width: 2.0,
        });
        let raster = render(&scene);
        assert_eq!(raster.get(32, 32), BACKGROUND, "outline interior stays background");
        let boundary = 32.0 + super::super::BASE_RADIUS;
        assert_eq!(raster.get(boundary as u32, 32), ColorKind::Red.rgb());
    }
}
