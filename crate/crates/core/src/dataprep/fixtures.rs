//! Procedural fixture datasets, one per modality.
//!
//! Every generated value is exactly representable as `f32` (pixel values
//! are multiples of 1/255 or 1/256, coordinates multiples of 1/1024), so a
//! fixture survives the `f32` wire encoding bit-for-bit.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{filter_detection_samples, save_png, save_tensor, DataError, DatasetManifest, SampleEntry, TruthRef};
use crate::actions::{BBox, FlowField, GroundTruth, Image, Modality};
use crate::tensor::Tensor;

pub const DIGIT_SIZE: usize = 28;
pub const DIGIT_CLASSES: u32 = 10;
pub const DETECTION_WINDOW: usize = 128;
pub const DETECTION_EXTENT: i32 = 64;
pub const DETECTION_SOURCE: usize = 272;
pub const DETECTION_CLASSES: [u32; 5] = [0, 1, 2, 3, 4];
pub const CLOUD_CLASSES: u32 = 4;

#[derive(Debug, Clone)]
pub enum Payload {
    Png(Image),
    Tensor(Tensor),
    Truth(GroundTruth),
}

/// A manifest plus the payload files it references.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub manifest: DatasetManifest,
    pub files: Vec<(String, Payload)>,
}

impl FixtureSet {
    /// Writes payloads and `manifest.json` into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, payload) in &self.files {
            let p = dir.join(name);
            match payload {
                Payload::Png(im) => save_png(&p, im)?,
                Payload::Tensor(t) => save_tensor(&p, t)?,
                Payload::Truth(t) => {
                    let text = serde_json::to_string(t).expect("truth serializes");
                    fs::write(&p, text).map_err(|source| DataError::Io { path: p.clone(), source })?;
                }
            }
        }
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

fn q255(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn q256(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 256.0).round().min(255.0) / 256.0
}

fn q1024(v: f64) -> f64 {
    (v * 1024.0).round() / 1024.0
}

fn manifest(modality: Modality, provenance: String, samples: Vec<SampleEntry>) -> DatasetManifest {
    DatasetManifest {
        modality,
        provenance,
        window: None,
        samples,
        base_dir: PathBuf::new(),
    }
}

type Segment = ([f64; 2], [f64; 2]);

/// Three random strokes per class; class 9 is class 6 turned upside down.
fn glyph(class: u32) -> Vec<Segment> {
    let base = if class == 9 { 6 } else { class };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e65_726f ^ u64::from(base));
    let mut pt = || [rng.random_range(5.0..23.0), rng.random_range(5.0..23.0)];
    let mut segs: Vec<Segment> = (0..3).map(|_| (pt(), pt())).collect();
    if class == 9 {
        let c = (DIGIT_SIZE as f64 - 1.0) / 2.0;
        let flip = |p: [f64; 2]| [2.0 * c - p[0], 2.0 * c - p[1]];
        segs = segs.into_iter().map(|(a, b)| (flip(a), flip(b))).collect();
    }
    segs
}

fn segment_distance(p: [f64; 2], (a, b): Segment) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// 28×28 grayscale stroke glyphs, `per_class` samples for each of 10 classes.
pub fn digits(per_class: usize, seed: u64) -> FixtureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut files = Vec::new();
    for class in 0..DIGIT_CLASSES {
        let strokes = glyph(class);
        for k in 0..per_class {
            let (ox, oy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let mut data = Vec::with_capacity(DIGIT_SIZE * DIGIT_SIZE);
            for row in 0..DIGIT_SIZE {
                for col in 0..DIGIT_SIZE {
                    let p = [col as f64 - ox, row as f64 - oy];
                    let d = strokes
                        .iter()
                        .map(|s| segment_distance(p, *s))
                        .fold(f64::INFINITY, f64::min);
                    let ink = (1.6 - d).clamp(0.0, 1.0);
                    data.push(q255(ink + rng.random_range(0.0..0.08)));
                }
            }
            let id = format!("digit-{class}-{k:03}");
            let name = format!("{id}.png");
            files.push((name.clone(), Payload::Png(Image::new(DIGIT_SIZE, DIGIT_SIZE, 1, data))));
            samples.push(SampleEntry {
                id,
                payload: name,
                truth: TruthRef::Inline(GroundTruth::ClassLabel {
                    index: class,
                    num_classes: DIGIT_CLASSES,
                }),
                class_label: Some(class),
                center: None,
                source_size: None,
            });
        }
    }
    FixtureSet {
        manifest: manifest(
            Modality::ImageClassification,
            format!("synthetic stroke glyphs, {per_class} per class, seed {seed}"),
            samples,
        ),
        files,
    }
}

fn fill_rect(im: &mut Image, b: &BBox, shade: impl Fn(usize, usize) -> f64) {
    for row in b.ymin as usize..b.ymax as usize {
        for col in b.xmin as usize..b.xmax as usize {
            if col < im.width && row < im.height {
                im.set(col, row, 0, shade(col, row));
            }
        }
    }
}

fn class_shade(class: u32) -> impl Fn(usize, usize) -> f64 {
    move |col, row| {
        let v = match class {
            0 => 0.9,
            1 => if (col / 4 + row / 4) % 2 == 0 { 0.9 } else { 0.5 },
            2 => if row % 6 < 3 { 0.85 } else { 0.4 },
            3 => if col % 6 < 3 { 0.85 } else { 0.4 },
            _ => 0.35 + 0.05 * ((col + 2 * row) % 12) as f64,
        };
        q255(v)
    }
}

/// 272×272 scenes, each with one designated key object and two distractors.
///
/// With `include_ineligible`, every fourth candidate is made to fail one of
/// the eligibility criteria (tiny box, unselected class, or too near the
/// edge); the returned manifest then holds the raw candidates.
pub fn detection_scenes(n: usize, seed: u64, include_ineligible: bool) -> FixtureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut files = Vec::new();
    let s = DETECTION_SOURCE;
    for k in 0..n {
        let mut im = Image::new(s, s, 1, (0..s * s).map(|_| q255(rng.random_range(0.0..0.15))).collect());
        let defect = if include_ineligible && k % 4 == 3 { (k / 4) % 3 + 1 } else { 0 };
        let mut class = DETECTION_CLASSES[rng.random_range(0..DETECTION_CLASSES.len())];
        let (mut w, mut h) = (rng.random_range(20..=60) as f64, rng.random_range(20..=60) as f64);
        let (mut cx, cy) = (rng.random_range(128..=144) as f64, rng.random_range(128..=144) as f64);
        match defect {
            1 => (w, h) = (8.0, 10.0),
            2 => class = 5 + rng.random_range(0..3),
            3 => cx = 90.0,
            _ => {}
        }
        let key = BBox::new(cx - (w / 2.0).floor(), cy - (h / 2.0).floor(), cx + (w / 2.0).ceil(), cy + (h / 2.0).ceil())
            .with_class(class);
        for _ in 0..2 {
            let (dx, dy) = (rng.random_range(10..230) as f64, rng.random_range(10..230) as f64);
            let d = BBox::new(dx, dy, dx + 24.0, dy + 18.0);
            if crate::metrics::iou(&d, &key) == 0.0 {
                fill_rect(&mut im, &d, |_, _| q255(0.6));
            }
        }
        fill_rect(&mut im, &key, class_shade(class));
        let id = format!("scene-{k:03}");
        let name = format!("{id}.png");
        files.push((name.clone(), Payload::Png(im)));
        samples.push(SampleEntry {
            id,
            payload: name,
            truth: TruthRef::Inline(GroundTruth::BBox { bbox: key }),
            class_label: Some(class),
            center: Some([cx, cy]),
            source_size: Some([s, s]),
        });
    }
    let mut m = manifest(
        Modality::ImageDetection,
        format!("synthetic scenes, {n} candidates, seed {seed}"),
        samples,
    );
    m.window = Some([DETECTION_WINDOW, DETECTION_WINDOW]);
    FixtureSet { manifest: m, files }
}

/// Restricts a detection fixture to its eligible samples.
pub fn eligible_only(set: &FixtureSet) -> FixtureSet {
    let manifest = filter_detection_samples(
        &set.manifest,
        &DETECTION_CLASSES,
        (DETECTION_WINDOW, DETECTION_WINDOW),
        DETECTION_EXTENT,
    );
    let keep: std::collections::HashSet<&str> = manifest.samples.iter().map(|s| s.payload.as_str()).collect();
    let files = set
        .files
        .iter()
        .filter(|(n, _)| keep.contains(n.as_str()))
        .cloned()
        .collect();
    FixtureSet { manifest, files }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticFlow {
    Uniform([f64; 2]),
    /// Rigid rotation with angular rate `omega` (rad/frame) about the grid center.
    Rotation(f64),
}

impl AnalyticFlow {
    pub fn field(self, size: usize) -> FlowField {
        let c = (size as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                data.push(match self {
                    AnalyticFlow::Uniform(v) => v,
                    AnalyticFlow::Rotation(w) => [-w * (row as f64 - c), w * (col as f64 - c)],
                });
            }
        }
        FlowField::new(size, size, data)
    }
}

fn particles(size: usize, centers: &[[f64; 2]]) -> Image {
    let mut data = vec![0.0; size * size];
    for (i, v) in data.iter_mut().enumerate() {
        let p = [(i % size) as f64, (i / size) as f64];
        let s: f64 = centers
            .iter()
            .map(|c| (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / 1.5).exp())
            .sum();
        *v = q256(s);
    }
    Image::new(size, size, 1, data)
}

/// Particle image pairs advected by uniform or rigid-rotation flows.
pub fn piv_pairs(n: usize, seed: u64, size: usize) -> FixtureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut files = Vec::new();
    for k in 0..n {
        let flow = if k % 2 == 0 {
            AnalyticFlow::Uniform([
                f64::from(rng.random_range(-4..=4)) / 4.0,
                f64::from(rng.random_range(-4..=4)) / 4.0,
            ])
        } else {
            let w = f64::from(rng.random_range(1..=4)) / 32.0;
            AnalyticFlow::Rotation(if rng.random_bool(0.5) { w } else { -w })
        };
        let field = flow.field(size);
        let count = size * size / 8;
        let first_c: Vec<[f64; 2]> = (0..count)
            .map(|_| [rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)])
            .collect();
        let second_c: Vec<[f64; 2]> = first_c
            .iter()
            .map(|c| {
                let (col, row) = (
                    (c[0].round() as usize).min(size - 1),
                    (c[1].round() as usize).min(size - 1),
                );
                let v = field.get(col, row);
                [c[0] + v[0], c[1] + v[1]]
            })
            .collect();
        let (a, b) = (particles(size, &first_c), particles(size, &second_c));
        let mut flat = a.data.clone();
        flat.extend_from_slice(&b.data);
        let id = format!("piv-{k:03}");
        let (img, truth) = (format!("{id}.json"), format!("{id}.flow.json"));
        files.push((img.clone(), Payload::Tensor(Tensor::f32(vec![2, size, size, 1], &flat))));
        files.push((truth.clone(), Payload::Truth(GroundTruth::FlowField { flow: field })));
        samples.push(SampleEntry {
            id,
            payload: img,
            truth: TruthRef::Path(truth),
            class_label: None,
            center: None,
            source_size: None,
        });
    }
    FixtureSet {
        manifest: manifest(
            Modality::ImagePairFlow,
            format!("synthetic particle pairs, {size}x{size}, seed {seed}"),
            samples,
        ),
        files,
    }
}

fn shape_point(class: u32, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let u: f64 = rng.random_range(0.0..1.0);
    let v: f64 = rng.random_range(0.0..1.0);
    match class {
        // Sphere.
        0 => {
            let (th, z) = (2.0 * PI * u, 2.0 * v - 1.0);
            let r = (1.0 - z * z).sqrt();
            [r * th.cos(), r * th.sin(), z]
        }
        // Box surface, 1 × 0.6 × 0.3 half extents.
        1 => {
            let face = rng.random_range(0..6);
            let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
            let p = match face {
                0 => [1.0, a, b],
                1 => [-1.0, a, b],
                2 => [a, 1.0, b],
                3 => [a, -1.0, b],
                4 => [a, b, 1.0],
                _ => [a, b, -1.0],
            };
            [p[0], 0.6 * p[1], 0.3 * p[2]]
        }
        // Open cylinder along z.
        2 => {
            let th = 2.0 * PI * u;
            [0.5 * th.cos(), 0.5 * th.sin(), 2.0 * v - 1.0]
        }
        // Cone with apex at +z.
        _ => {
            let th = 2.0 * PI * u;
            let r = 0.7 * (1.0 - v);
            [r * th.cos(), r * th.sin(), 2.0 * v - 1.0]
        }
    }
}

/// Parametric point clouds (sphere, box, cylinder, cone).
pub fn point_clouds(per_class: usize, seed: u64, points: usize) -> FixtureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut files = Vec::new();
    for class in 0..CLOUD_CLASSES {
        for k in 0..per_class {
            let scale: f64 = rng.random_range(0.8..1.2);
            let mut flat = Vec::with_capacity(points * 3);
            for _ in 0..points {
                for c in shape_point(class, &mut rng) {
                    flat.push(q1024(c * scale + rng.random_range(-0.02..0.02)));
                }
            }
            let id = format!("cloud-{class}-{k:03}");
            let name = format!("{id}.json");
            files.push((name.clone(), Payload::Tensor(Tensor::f32(vec![points, 3], &flat))));
            samples.push(SampleEntry {
                id,
                payload: name,
                truth: TruthRef::Inline(GroundTruth::ClassLabel {
                    index: class,
                    num_classes: CLOUD_CLASSES,
                }),
                class_label: Some(class),
                center: None,
                source_size: None,
            });
        }
    }
    FixtureSet {
        manifest: manifest(
            Modality::PointcloudClassification,
            format!("parametric point clouds, {per_class} per class, {points} points, seed {seed}"),
            samples,
        ),
        files,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::InputData;
    use crate::dataprep::Dataset;

    fn load(set: &FixtureSet) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let path = set.write(dir.path()).unwrap();
        let ds = Dataset::from_manifest_path(&path).unwrap();
        (dir, ds)
    }

    fn f32_exact(v: &[f64]) -> bool {
        v.iter().all(|x| f64::from(*x as f32) == *x)
    }

    #[test]
    fn digits_load_back() {
        let set = digits(2, 1);
        let (_d, ds) = load(&set);
        assert_eq!(ds.samples.len(), 20);
        let InputData::Image { image } = &ds.samples[0].input.data else { panic!() };
        assert_eq!((image.width, image.height, image.channels), (28, 28, 1));
        let Payload::Png(orig) = &set.files[0].1 else { panic!() };
        assert_eq!(image, orig);
    }

    #[test]
    fn nine_is_an_upside_down_six() {
        let (six, nine) = (glyph(6), glyph(9));
        for ((a, b), (c, d)) in six.iter().zip(&nine) {
            assert!((a[0] + c[0] - 27.0).abs() < 1e-12 && (b[1] + d[1] - 27.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_candidates_filter_down() {
        let set = detection_scenes(12, 3, true);
        let ok = eligible_only(&set);
        assert_eq!(ok.manifest.samples.len(), 9);
        let (_d, ds) = load(&ok);
        for s in &ds.samples {
            let GroundTruth::BBox { bbox } = s.truth else { panic!() };
            assert!(bbox.xmin >= 0.0 && bbox.xmax <= 128.0 && bbox.ymin >= 0.0 && bbox.ymax <= 128.0);
            let ctx = s.context.as_ref().unwrap();
            assert!(ctx.crop(64, 64).is_ok() && ctx.crop(-64, -64).is_ok());
        }
    }

    #[test]
    fn piv_values_are_f32_exact() {
        let set = piv_pairs(4, 5, 16);
        let (_d, ds) = load(&set);
        for s in &ds.samples {
            let InputData::ImagePair { first, second } = &s.input.data else { panic!() };
            assert!(f32_exact(&first.data) && f32_exact(&second.data));
            let GroundTruth::FlowField { flow } = &s.truth else { panic!() };
            assert!(f32_exact(&flow.flat()));
        }
    }

    #[test]
    fn rotation_flow_is_rigid() {
        let f = AnalyticFlow::Rotation(0.25).field(4);
        // Right of center moves down (rows grow downward).
        assert_eq!(f.get(3, 1), [0.125, 0.375]);
    }

    #[test]
    fn clouds_load_back() {
        let set = point_clouds(2, 9, 32);
        let (_d, ds) = load(&set);
        assert_eq!(ds.samples.len(), 8);
        let InputData::PointCloud { points } = &ds.samples[0].input.data else { panic!() };
        assert_eq!(points.0.len(), 32);
        assert!(f32_exact(&points.flat()));
    }
}
