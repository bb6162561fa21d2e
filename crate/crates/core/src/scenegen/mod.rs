//! Procedural generation of compositional scene classes and task streams.
//!
//! A class is a schema: one center object plus 1-4 ring objects placed on a
//! circle around it at 45-degree angle bins. Samples of a class re-render the
//! schema with class-irrelevant variation (scale, rotation, fill, stroke
//! width) and Gaussian translational jitter of strength `u`. Classes within a
//! stream are pairwise distinct as concept graphs, so a noise-free sample is
//! always uniquely attributable to its class.

mod render;

pub use render::{object_bbox, render, Raster};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{self, ConceptGraph};
use crate::error::{Error, Result};
use crate::rng;

/// Canvas is fixed at 64x64 RGB.
pub const CANVAS: u32 = 64;
/// Distance from the schema center to ring objects, at scale 1.
pub const RING_RADIUS: f64 = 20.0;
/// Circumradius of an object at scale 1.
pub const BASE_RADIUS: f64 = 6.0;
/// Number of 45-degree ring placement bins.
pub const ANGLE_BINS: u32 = 8;
/// Background color; far from every palette entry.
pub const BACKGROUND: [u8; 3] = [40, 40, 40];
/// Task id assigned to pretraining samples, which belong to no task.
pub const PRETRAIN_TASK: u32 = u32::MAX;

const SCHEMA_RETRIES: usize = 10_000;
const JITTER_RETRIES: usize = 64;

/// Object shapes. Codes are stable: Square=0, Triangle=1, Circle=2, Pentagon=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Triangle,
    Circle,
    Pentagon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Circle,
        ShapeKind::Pentagon,
    ];

    pub fn code(self) -> u8 {
        match self {
            ShapeKind::Square => 0,
            ShapeKind::Triangle => 1,
            ShapeKind::Circle => 2,
            ShapeKind::Pentagon => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<ShapeKind> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Object colors with fixed RGB triples. Codes are stable: Blue=0 .. White=6.
///
/// The palette is spread out in RGB space (minimum pairwise Euclidean
/// distance 83) so nearest-color classification is unambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ColorKind {
    Blue,
    Red,
    Purple,
    Green,
    Yellow,
    Orange,
    White,
}

impl ColorKind {
    pub const ALL: [ColorKind; 7] = [
        ColorKind::Blue,
        ColorKind::Red,
        ColorKind::Purple,
        ColorKind::Green,
        ColorKind::Yellow,
        ColorKind::Orange,
        ColorKind::White,
    ];

    pub fn code(self) -> u8 {
        match self {
            ColorKind::Blue => 0,
            ColorKind::Red => 1,
            ColorKind::Purple => 2,
            ColorKind::Green => 3,
            ColorKind::Yellow => 4,
            ColorKind::Orange => 5,
            ColorKind::White => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<ColorKind> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorKind::Blue => [40, 60, 230],
            ColorKind::Red => [220, 40, 40],
            ColorKind::Purple => [150, 40, 180],
            ColorKind::Green => [0, 130, 30],
            ColorKind::Yellow => [240, 220, 40],
            ColorKind::Orange => [250, 140, 20],
            ColorKind::White => [255, 255, 255],
        }
    }
}

/// One ring slot of a schema: what sits on the ring and at which angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingSlot {
    pub shape: ShapeKind,
    pub color: ColorKind,
    /// Placement angle in degrees; always a multiple of 45.
    pub angle_deg: f64,
}

/// The class-defining composition: a center object and 1-4 ring objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSchema {
    pub class_id: u32,
    pub center: (ShapeKind, ColorKind),
    pub ring: Vec<RingSlot>,
    pub ring_radius: f64,
}

impl ClassSchema {
    /// Nominal object centers: schema center at the canvas midpoint, ring
    /// objects on the placement circle.
    pub fn nominal_positions(&self) -> Vec<(f64, f64)> {
        let mid = f64::from(CANVAS) / 2.0;
        let mut pos = vec![(mid, mid)];
        for slot in &self.ring {
            let rad = slot.angle_deg.to_radians();
            pos.push((mid + self.ring_radius * rad.cos(), mid + self.ring_radius * rad.sin()));
        }
        pos
    }

    /// The noise-free scene: nominal positions, neutral nuisance factors.
    pub fn nominal_scene(&self) -> Scene {
        let positions = self.nominal_positions();
        let attrs: Vec<(ShapeKind, ColorKind)> = std::iter::once(self.center)
            .chain(self.ring.iter().map(|s| (s.shape, s.color)))
            .collect();
        let objects = attrs
            .iter()
            .zip(&positions)
            .map(|(&(shape, color), &(cx, cy))| ObjectInstance {
                shape,
                color,
                cx,
                cy,
                scale: 1.0,
                rotation: 0.0,
                filled: true,
                stroke_width: 1.0,
            })
            .collect();
        Scene { class_id: self.class_id, objects, canvas: (CANVAS, CANVAS) }
    }

    /// The concept graph every noise-free sample of this class decomposes to.
    pub fn canonical_graph(&self) -> ConceptGraph {
        decompose::build_graph(&decompose::oracle_detect(&self.nominal_scene()))
    }
}

/// One drawable object: class-relevant attributes plus nuisance factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub rotation: f64,
    pub filled: bool,
    pub stroke_width: f64,
}

impl ObjectInstance {
    /// Conservative half-extent: circumradius plus stroke overhang. The
    /// bounding box of any rotation fits inside this square.
    pub fn half_extent(&self) -> f64 {
        let stroke = if self.filled { 0.0 } else { self.stroke_width / 2.0 };
        BASE_RADIUS * self.scale + stroke
    }
}

/// Ground-truth description of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub class_id: u32,
    pub objects: Vec<ObjectInstance>,
    pub canvas: (u32, u32),
}

/// One dataset entry: the raster, its scene metadata, and its labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub raster: Raster,
    pub scene: Scene,
    pub label: u32,
    pub task_id: u32,
}

/// Stream-level generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub num_tasks: u32,
    pub classes_per_task: u32,
    pub train_per_class: u32,
    pub test_per_class: u32,
    /// Standard deviation of the per-object translational jitter, in pixels.
    pub noise_scale: f64,
    pub master_seed: u64,
    pub pretrain_classes: u32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_tasks: 10,
            classes_per_task: 10,
            train_per_class: 200,
            test_per_class: 50,
            noise_scale: 2.0,
            master_seed: 0,
            pretrain_classes: 50,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 1 {
            return Err(Error::InvalidConfig("num_tasks must be >= 1".into()));
        }
        if self.classes_per_task < 1 {
            return Err(Error::InvalidConfig("classes_per_task must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_continual_classes(&self) -> u32 {
        self.num_tasks * self.classes_per_task
    }
}

/// One continual task: its class ids and train/test samples.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: u32,
    pub class_ids: Vec<u32>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// A full continual episode's data: ordered tasks plus the pretraining split.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub pretrain: Vec<Sample>,
    pub schemas: Vec<ClassSchema>,
    pub config: StreamConfig,
}

impl TaskStream {
    pub fn schema(&self, class_id: u32) -> &ClassSchema {
        &self.schemas[class_id as usize]
    }
}

fn draw_schema(rng: &mut ChaCha8Rng, class_id: u32) -> ClassSchema {
    let center = (
        ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
        ColorKind::ALL[rng.gen_range(0..ColorKind::ALL.len())],
    );
    let ring_len = rng.gen_range(1..=4usize);
    // Partial Fisher-Yates over the angle bins gives distinct bins, which are
    // automatically >= 45 degrees apart.
    let mut bins: Vec<u32> = (0..ANGLE_BINS).collect();
    for i in 0..ring_len {
        let j = rng.gen_range(i..bins.len());
        bins.swap(i, j);
    }
    let ring = bins[..ring_len]
        .iter()
        .map(|&bin| RingSlot {
            shape: ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
            color: ColorKind::ALL[rng.gen_range(0..ColorKind::ALL.len())],
            angle_deg: f64::from(bin) * 45.0,
        })
        .collect();
    ClassSchema { class_id, center, ring, ring_radius: RING_RADIUS }
}

/// Sample a schema whose canonical graph differs from every existing schema's.
///
/// Distinctness is graph-level: a candidate is rejected when its canonical
/// graph is isomorphic (edit distance zero) to an existing one.
pub fn sample_class_schema(
    rng: &mut ChaCha8Rng,
    class_id: u32,
    existing: &[ClassSchema],
) -> Result<ClassSchema> {
    let existing_keys: Vec<String> =
        existing.iter().map(|s| s.canonical_graph().isomorphism_key()).collect();
    for _ in 0..SCHEMA_RETRIES {
        let candidate = draw_schema(rng, class_id);
        let key = candidate.canonical_graph().isomorphism_key();
        if !existing_keys.contains(&key) {
            return Ok(candidate);
        }
    }
    Err(Error::SchemaSpaceExhausted { retries: SCHEMA_RETRIES })
}

/// Instantiate one scene from a schema with translational noise `u`.
///
/// Nuisance factors are drawn per object (scale, rotation, fill, stroke
/// width), then jitter is resampled until the object's bounding box stays
/// inside the canvas. A clamp fallback keeps the loop bounded; nominal
/// placement leaves enough margin that it is essentially never taken.
pub fn instantiate_scene(schema: &ClassSchema, rng: &mut ChaCha8Rng, u: f64) -> Scene {
    let positions = schema.nominal_positions();
    let attrs: Vec<(ShapeKind, ColorKind)> = std::iter::once(schema.center)
        .chain(schema.ring.iter().map(|s| (s.shape, s.color)))
        .collect();
    let canvas = f64::from(CANVAS);
    let jitter = if u > 0.0 { Some(Normal::new(0.0, u).expect("valid std")) } else { None };

    let objects = attrs
        .iter()
        .zip(&positions)
        .map(|(&(shape, color), &(nx, ny))| {
            let scale = rng.gen_range(0.7..=1.3);
            let rotation = rng.gen_range(0.0..360.0);
            let filled = rng.gen_bool(0.5);
            let stroke_width = f64::from(rng.gen_range(1..=3u32));
            let mut object = ObjectInstance {
                shape,
                color,
                cx: nx,
                cy: ny,
                scale,
                rotation,
                filled,
                stroke_width,
            };
            if let Some(normal) = &jitter {
                let ext = object.half_extent();
                let mut placed = false;
                for _ in 0..JITTER_RETRIES {
                    let cx = nx + normal.sample(rng);
                    let cy = ny + normal.sample(rng);
                    if cx - ext >= 0.0 && cx + ext <= canvas && cy - ext >= 0.0 && cy + ext <= canvas
                    {
                        object.cx = cx;
                        object.cy = cy;
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    object.cx = (nx + normal.sample(rng)).clamp(ext, canvas - ext);
                    object.cy = (ny + normal.sample(rng)).clamp(ext, canvas - ext);
                }
            }
            object
        })
        .collect();

    Scene { class_id: schema.class_id, objects, canvas: (CANVAS, CANVAS) }
}

fn generate_sample(
    schema: &ClassSchema,
    config: &StreamConfig,
    sample_index: u32,
    task_id: u32,
) -> Sample {
    let mut rng = rng::stream(
        config.master_seed,
        "sample",
        &[u64::from(schema.class_id), u64::from(sample_index)],
    );
    let scene = instantiate_scene(schema, &mut rng, config.noise_scale);
    let raster = render(&scene);
    Sample { raster, scene, label: schema.class_id, task_id }
}

/// Build the full task stream for a config.
///
/// The result is a pure function of the config: schemas come from per-class
/// RNG streams with graph-distinctness rejection, and every sample comes from
/// its own `(master_seed, class_id, sample_index)` stream, so any part of the
/// stream can be regenerated independently.
pub fn build_task_stream(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let continual = config.num_continual_classes();
    let total_classes = continual + config.pretrain_classes;

    let mut schemas: Vec<ClassSchema> = Vec::with_capacity(total_classes as usize);
    for class_id in 0..total_classes {
        let mut rng = rng::stream(config.master_seed, "schema", &[u64::from(class_id)]);
        let schema = sample_class_schema(&mut rng, class_id, &schemas)?;
        schemas.push(schema);
    }

    let class_samples = |class_id: u32, task_id: u32, count: u32, index_offset: u32| {
        let schema = &schemas[class_id as usize];
        (0..count)
            .into_par_iter()
            .map(|i| generate_sample(schema, config, index_offset + i, task_id))
            .collect::<Vec<_>>()
    };

    let tasks = (0..config.num_tasks)
        .map(|task_id| {
            let class_ids: Vec<u32> = (task_id * config.classes_per_task
                ..(task_id + 1) * config.classes_per_task)
                .collect();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for &class_id in &class_ids {
                train.extend(class_samples(class_id, task_id, config.train_per_class, 0));
                test.extend(class_samples(
                    class_id,
                    task_id,
                    config.test_per_class,
                    config.train_per_class,
                ));
            }
            TaskData { task_id, class_ids, train, test }
        })
        .collect();

    let mut pretrain = Vec::new();
    for class_id in continual..total_classes {
        pretrain.extend(class_samples(class_id, PRETRAIN_TASK, config.train_per_class, 0));
    }

    Ok(TaskStream { tasks, pretrain, schemas, config: clone_config(config) })
}

fn clone_config(config: &StreamConfig) -> StreamConfig {
    config.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_rng(seed: u64, class: u32) -> ChaCha8Rng {
        rng::stream(seed, "schema", &[u64::from(class)])
    }

    #[test]
    fn palette_is_well_separated() {
        let mut min = f64::INFINITY;
        for (i, a) in ColorKind::ALL.iter().enumerate() {
            for b in &ColorKind::ALL[i + 1..] {
                let d: f64 = a
                    .rgb()
                    .iter()
                    .zip(b.rgb())
                    .map(|(&x, y)| (f64::from(x) - f64::from(y)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min >= 60.0, "minimum pairwise palette distance {min}");
        for color in ColorKind::ALL {
            let d: f64 = color
                .rgb()
                .iter()
                .zip(BACKGROUND)
                .map(|(&x, y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d >= 60.0, "background too close to {color:?}");
        }
    }

    #[test]
    fn schema_sampling_accepts_any_valid_schema_with_empty_set() {
        let mut rng = schema_rng(11, 0);
        let schema = sample_class_schema(&mut rng, 0, &[]).unwrap();
        assert!(!schema.ring.is_empty() && schema.ring.len() <= 4);
        let bins: Vec<i64> =
            schema.ring.iter().map(|s| (s.angle_deg / 45.0).round() as i64).collect();
        let mut sorted = bins.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), bins.len(), "ring angles must be distinct bins");
    }

    #[test]
    fn schema_resampling_avoids_duplicates() {
        // Re-running the same rng stream against an existing set containing
        // its own first draw forces at least one resample.
        let first = sample_class_schema(&mut schema_rng(5, 3), 3, &[]).unwrap();
        let second = sample_class_schema(&mut schema_rng(5, 3), 3, &[first.clone()]).unwrap();
        let d = crate::symbolic::ged(
            &first.canonical_graph(),
            &second.canonical_graph(),
            &crate::symbolic::GedCosts::default(),
        )
        .unwrap();
        assert!(d >= 1.0, "resampled schema must be graph-distinct, got ged {d}");
    }

    #[test]
    fn two_object_schema_space_is_large() {
        // All center x ring-slot combinations at one ring position, across the
        // 8 angle bins: 28 * 28 * 8 = 6272 parameterizations. Swapping center
        // and ring roles can produce the same concept graph, so the distinct
        // graph count is about half that, still far above any stream's needs.
        let mut keys = std::collections::HashSet::new();
        let mut tuples = 0usize;
        for &(cs, cc) in &all_attrs() {
            for &(rs, rc) in &all_attrs() {
                for bin in 0..ANGLE_BINS {
                    tuples += 1;
                    let schema = ClassSchema {
                        class_id: 0,
                        center: (cs, cc),
                        ring: vec![RingSlot {
                            shape: rs,
                            color: rc,
                            angle_deg: f64::from(bin) * 45.0,
                        }],
                        ring_radius: RING_RADIUS,
                    };
                    keys.insert(schema.canonical_graph().isomorphism_key());
                }
            }
        }
        assert_eq!(tuples, 6272);
        assert!(keys.len() >= 3000, "distinct 2-object graphs: {}", keys.len());
    }

    fn all_attrs() -> Vec<(ShapeKind, ColorKind)> {
        let mut v = Vec::new();
        for s in ShapeKind::ALL {
            for c in ColorKind::ALL {
                v.push((s, c));
            }
        }
        v
    }

    #[test]
    fn zero_noise_scene_is_nominal() {
        let schema = sample_class_schema(&mut schema_rng(1, 0), 0, &[]).unwrap();
        let scene = instantiate_scene(&schema, &mut schema_rng(2, 0), 0.0);
        let nominal = schema.nominal_positions();
        for (object, &(nx, ny)) in scene.objects.iter().zip(&nominal) {
            assert_eq!(object.cx, nx);
            assert_eq!(object.cy, ny);
        }
    }

    #[test]
    fn instantiation_is_deterministic() {
        let schema = sample_class_schema(&mut schema_rng(1, 0), 0, &[]).unwrap();
        let a = instantiate_scene(&schema, &mut schema_rng(9, 1), 3.0);
        let b = instantiate_scene(&schema, &mut schema_rng(9, 1), 3.0);
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_std_matches_noise_scale() {
        // Monte-Carlo over the center object, which sits far from the canvas
        // border, so rejection effects are negligible.
        let schema = ClassSchema {
            class_id: 0,
            center: (ShapeKind::Circle, ColorKind::Blue),
            ring: vec![RingSlot { shape: ShapeKind::Square, color: ColorKind::Red, angle_deg: 0.0 }],
            ring_radius: RING_RADIUS,
        };
        let u = 4.0;
        let n = 10_000;
        let deviations: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = rng::stream(77, "jitter-test", &[i]);
                let scene = instantiate_scene(&schema, &mut rng, u);
                scene.objects[0].cx - schema.nominal_positions()[0].0
            })
            .collect();
        let mean = deviations.iter().sum::<f64>() / f64::from(n as u32);
        let var = deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / f64::from(n as u32);
        let std = var.sqrt();
        assert!((std - u).abs() <= 0.05 * u, "empirical std {std} vs u {u}");
    }

    #[test]
    fn objects_stay_inside_canvas() {
        let schema = sample_class_schema(&mut schema_rng(3, 0), 0, &[]).unwrap();
        for i in 0..200 {
            let mut rng = rng::stream(13, "canvas-test", &[i]);
            let scene = instantiate_scene(&schema, &mut rng, 8.0);
            for object in &scene.objects {
                let ext = object.half_extent();
                assert!(object.cx - ext >= 0.0 && object.cx + ext <= f64::from(CANVAS));
                assert!(object.cy - ext >= 0.0 && object.cy + ext <= f64::from(CANVAS));
            }
        }
    }

    #[test]
    fn minimal_stream_has_two_samples() {
        let config = StreamConfig {
            num_tasks: 1,
            classes_per_task: 1,
            train_per_class: 1,
            test_per_class: 1,
            pretrain_classes: 0,
            ..StreamConfig::default()
        };
        let stream = build_task_stream(&config).unwrap();
        assert_eq!(stream.tasks.len(), 1);
        assert_eq!(stream.tasks[0].train.len(), 1);
        assert_eq!(stream.tasks[0].test.len(), 1);
        assert!(stream.pretrain.is_empty());
    }

    #[test]
    fn stream_is_deterministic() {
        let config = StreamConfig {
            num_tasks: 2,
            classes_per_task: 2,
            train_per_class: 3,
            test_per_class: 2,
            pretrain_classes: 2,
            master_seed: 21,
            ..StreamConfig::default()
        };
        let a = build_task_stream(&config).unwrap();
        let b = build_task_stream(&config).unwrap();
        for (ta, tb) in a.tasks.iter().zip(&b.tasks) {
            for (sa, sb) in ta.train.iter().zip(&tb.train) {
                assert_eq!(sa.raster.data, sb.raster.data);
                assert_eq!(sa.scene, sb.scene);
            }
            for (sa, sb) in ta.test.iter().zip(&tb.test) {
                assert_eq!(sa.raster.data, sb.raster.data);
            }
        }
        for (sa, sb) in a.pretrain.iter().zip(&b.pretrain) {
            assert_eq!(sa.raster.data, sb.raster.data);
        }
    }

    #[test]
    fn stream_classes_are_graph_distinct() {
        let config = StreamConfig {
            num_tasks: 3,
            classes_per_task: 3,
            train_per_class: 1,
            test_per_class: 1,
            pretrain_classes: 3,
            master_seed: 4,
            ..StreamConfig::default()
        };
        let stream = build_task_stream(&config).unwrap();
        let costs = crate::symbolic::GedCosts::default();
        let graphs: Vec<ConceptGraph> =
            stream.schemas.iter().map(|s| s.canonical_graph()).collect();
        for i in 0..graphs.len() {
            for j in i + 1..graphs.len() {
                let d = crate::symbolic::ged(&graphs[i], &graphs[j], &costs).unwrap();
                assert!(d >= 1.0, "classes {i} and {j} too close: ged {d}");
            }
        }
    }
}
