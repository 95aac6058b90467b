//! Dataset manifests, loading, and the detection sample construction
//! utilities (key-object windows and eligibility filtering).
//!
//! A manifest is a JSON index next to its payload files:
//!
//! ```json
//! {
//!   "modality": "image-detection",
//!   "provenance": "synthetic scenes, seed 7",
//!   "window": [128, 128],
//!   "samples": [
//!     {"id": "scene-000", "payload": "scene-000.png", "class_label": 2,
//!      "truth": {"kind": "bbox", "bbox": {"xmin": 120, "ymin": 118, "xmax": 150, "ymax": 140, "class_index": 2}}}
//!   ]
//! }
//! ```
//!
//! Payloads are PNG images (values scaled to `[0, 1]`) or JSON tensor files
//! in the wire convention: `[H, W, C]` images, `[2, H, W, C]` image pairs,
//! `[N, 3]` point clouds. `truth` is either inline or a path to a JSON file
//! holding a ground-truth object (used for flow fields). Detection truth
//! boxes are in source-image pixels; loading crops the window around the key
//! object and re-expresses the box in window coordinates.

pub mod fixtures;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{crop, ActionError, BBox, GroundTruth, Image, InputData, InputSample, Modality, PointCloud, TranslationContext};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Payload { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Action(#[from] ActionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthRef {
    Path(String),
    Inline(GroundTruth),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub payload: String,
    pub truth: TruthRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<u32>,
    /// Detection only: window center in source pixels (default: box center).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
    /// Detection only: `[width, height]` of the source image. Filled in from
    /// the payload on load when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_size: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modality: Modality,
    #[serde(default)]
    pub provenance: String,
    /// Detection only: `[width, height]` of the evaluation window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
    pub samples: Vec<SampleEntry>,
    /// Directory payload paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(json_err(path))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        if m.modality == Modality::ImageDetection {
            for i in 0..m.samples.len() {
                if m.samples[i].source_size.is_none() {
                    let p = m.resolve(&m.samples[i].payload);
                    let im = load_image(&p)?;
                    m.samples[i].source_size = Some([im.width, im.height]);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::Invalid(format!("duplicate sample id {:?}", s.id)));
            }
            if let TruthRef::Inline(t) = &s.truth {
                if !self.modality.accepts_truth(t) {
                    return Err(DataError::Invalid(format!(
                        "sample {}: truth kind does not match {}",
                        s.id, self.modality
                    )));
                }
                t.validate()
                    .map_err(|e| DataError::Invalid(format!("sample {}: {e}", s.id)))?;
            }
        }
        if self.modality == Modality::ImageDetection {
            match self.window {
                Some([w, h]) if w > 0 && h > 0 => {}
                _ => return Err(DataError::Invalid("detection manifest needs a positive window".into())),
            }
        }
        Ok(())
    }

    fn truth_of(&self, s: &SampleEntry) -> Result<GroundTruth, DataError> {
        match &s.truth {
            TruthRef::Inline(t) => Ok(t.clone()),
            TruthRef::Path(rel) => {
                let p = self.resolve(rel);
                let text = fs::read_to_string(&p).map_err(io_err(&p))?;
                let t: GroundTruth = serde_json::from_str(&text).map_err(json_err(&p))?;
                if !self.modality.accepts_truth(&t) {
                    return Err(DataError::Invalid(format!(
                        "sample {}: truth kind does not match {}",
                        s.id, self.modality
                    )));
                }
                t.validate().map_err(|message| DataError::Payload { path: p, message })?;
                Ok(t)
            }
        }
    }
}

/// A loaded sample: the evaluation input, its ground truth in the input's
/// frame, and (detection) the source context translations crop from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: InputSample,
    pub truth: GroundTruth,
    pub class_label: Option<u32>,
    pub context: Option<TranslationContext>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modality: Modality,
    pub provenance: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Dataset, DataError> {
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let path = manifest.resolve(&entry.payload);
            let truth = manifest.truth_of(entry)?;
            let class_label = entry.class_label.or_else(|| truth.class_label());
            let sample = match manifest.modality {
                Modality::ImageClassification => Sample {
                    input: InputSample::image(&entry.id, load_image(&path)?),
                    truth,
                    class_label,
                    context: None,
                },
                Modality::ImageDetection => {
                    let GroundTruth::BBox { bbox } = truth else {
                        unreachable!("validated truth kind")
                    };
                    let [w, h] = manifest.window.expect("validated window");
                    let source = load_image(&path)?;
                    let center = entry.center.unwrap_or(bbox.center());
                    crop_window(&entry.id, source, &bbox, center, (w, h), class_label)?
                }
                Modality::ImagePairFlow => {
                    let t = load_tensor(&path)?;
                    let bad = |message: String| DataError::Payload {
                        path: path.clone(),
                        message,
                    };
                    t.expect_shape(&[Some(2), None, None, None])
                        .map_err(|e| bad(e.to_string()))?;
                    let flat = t.decode().map_err(|e| bad(e.to_string()))?;
                    let (hh, ww, c) = (t.shape[1], t.shape[2], t.shape[3]);
                    let half = hh * ww * c;
                    let first = Image::new(ww, hh, c, flat[..half].to_vec());
                    let second = Image::new(ww, hh, c, flat[half..].to_vec());
                    if let GroundTruth::FlowField { flow } = &truth {
                        if flow.width != ww || flow.height != hh {
                            return Err(bad("flow truth shape differs from the image pair".into()));
                        }
                    }
                    Sample {
                        input: InputSample::pair(&entry.id, first, second),
                        truth,
                        class_label,
                        context: None,
                    }
                }
                Modality::PointcloudClassification => {
                    let t = load_tensor(&path)?;
                    let points = PointCloud::from_tensor(&t).map_err(|message| DataError::Payload {
                        path: path.clone(),
                        message,
                    })?;
                    Sample {
                        input: InputSample {
                            id: entry.id.clone(),
                            data: InputData::PointCloud { points },
                        },
                        truth,
                        class_label,
                        context: None,
                    }
                }
            };
            sample
                .input
                .validate()
                .map_err(|message| DataError::Payload { path, message })?;
            samples.push(sample);
        }
        Ok(Dataset {
            modality: manifest.modality,
            provenance: manifest.provenance.clone(),
            samples,
        })
    }

    pub fn from_manifest_path(path: &Path) -> Result<Dataset, DataError> {
        Dataset::load(&DatasetManifest::load(path)?)
    }
}

/// Top-left corner of a `window` centered on `center`.
pub fn window_origin(center: [f64; 2], window: (usize, usize)) -> (i64, i64) {
    (
        (center[0] - window.0 as f64 / 2.0).floor() as i64,
        (center[1] - window.1 as f64 / 2.0).floor() as i64,
    )
}

/// Crops the evaluation window around a key object and re-expresses its box
/// in window coordinates. The returned sample keeps the source so that
/// translations can be realized by cropping at shifted bounds.
pub fn crop_window(
    id: &str,
    source: Image,
    bbox: &BBox,
    center: [f64; 2],
    window: (usize, usize),
    class_label: Option<u32>,
) -> Result<Sample, ActionError> {
    let origin = window_origin(center, window);
    let image = crop(&source, origin.0, origin.1, window.0, window.1)?;
    let local = bbox.translated(-(origin.0 as f64), -(origin.1 as f64));
    Ok(Sample {
        input: InputSample::image(id, image),
        truth: GroundTruth::BBox { bbox: local },
        class_label: class_label.or(Some(local.class_index)),
        context: Some(TranslationContext {
            source,
            origin,
            window,
        }),
    })
}

pub const MIN_AREA_RATIO: f64 = 0.01;
pub const MAX_AREA_RATIO: f64 = 0.5;

/// Whether a detection entry is eligible: its class is selected, the window
/// stays inside the source under every shift up to `extent`, and the box
/// covers between 1% and 50% of the window (both bounds inclusive).
pub fn detection_eligible(entry: &SampleEntry, classes: &[u32], window: (usize, usize), extent: i32) -> bool {
    let TruthRef::Inline(GroundTruth::BBox { bbox }) = &entry.truth else {
        return false;
    };
    let label = entry.class_label.unwrap_or(bbox.class_index);
    if !classes.contains(&label) {
        return false;
    }
    let Some([sw, sh]) = entry.source_size else {
        return false;
    };
    let (x, y) = window_origin(entry.center.unwrap_or(bbox.center()), window);
    let e = i64::from(extent);
    let fits = x - e >= 0
        && y - e >= 0
        && x + e + window.0 as i64 <= sw as i64
        && y + e + window.1 as i64 <= sh as i64;
    if !fits {
        return false;
    }
    let ratio = bbox.area() / (window.0 * window.1) as f64;
    (MIN_AREA_RATIO..=MAX_AREA_RATIO).contains(&ratio)
}

/// Keeps the detection samples satisfying all three eligibility criteria,
/// in their original order.
pub fn filter_detection_samples(
    manifest: &DatasetManifest,
    classes: &[u32],
    window: (usize, usize),
    extent: i32,
) -> DatasetManifest {
    DatasetManifest {
        samples: manifest
            .samples
            .iter()
            .filter(|s| detection_eligible(s, classes, window, extent))
            .cloned()
            .collect(),
        ..manifest.clone()
    }
}

pub fn load_tensor(path: &Path) -> Result<Tensor, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let text = serde_json::to_string(t).map_err(json_err(path))?;
    fs::write(path, text).map_err(io_err(path))
}

/// Loads a PNG (grayscale to one channel, anything else to RGB) or a JSON
/// `[H, W, C]` tensor.
pub fn load_image(path: &Path) -> Result<Image, DataError> {
    let payload_err = |message: String| DataError::Payload {
        path: path.to_path_buf(),
        message,
    };
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        return Image::from_tensor(&load_tensor(path)?).map_err(payload_err);
    }
    let img = image::open(path).map_err(|e| payload_err(e.to_string()))?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    let (w, h, c, bytes) = if gray {
        let g = img.to_luma8();
        (g.width(), g.height(), 1, g.into_raw())
    } else {
        let rgb = img.to_rgb8();
        (rgb.width(), rgb.height(), 3, rgb.into_raw())
    };
    Ok(Image::new(
        w as usize,
        h as usize,
        c,
        bytes.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    ))
}

/// Writes a 1- or 3-channel image as 8-bit PNG (values clamped to `[0, 1]`).
pub fn save_png(path: &Path, im: &Image) -> Result<(), DataError> {
    let bytes: Vec<u8> = im
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (im.width as u32, im.height as u32);
    let color = match im.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(DataError::Payload {
                path: path.to_path_buf(),
                message: format!("cannot write a {c}-channel PNG"),
            })
        }
    };
    image::save_buffer(path, &bytes, w, h, color).map_err(|e| DataError::Payload {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::act_input;
    use crate::groups::GroupElement;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::new(w, h, 1, (0..w * h).map(|i| i as f64).collect())
    }

    #[test]
    fn full_window_is_identity() {
        let src = ramp(6, 4);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let s = crop_window("s", src.clone(), &b, [3.0, 2.0], (6, 4), None).unwrap();
        let InputData::Image { image } = &s.input.data else { panic!() };
        assert_eq!(image, &src);
        assert_eq!(s.truth, GroundTruth::BBox { bbox: b });
    }

    #[test]
    fn centered_window_is_inner_block() {
        let src = ramp(4, 4);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let s = crop_window("s", src, &b, [2.0, 2.0], (2, 2), None).unwrap();
        let InputData::Image { image } = &s.input.data else { panic!() };
        assert_eq!(image.data, vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn box_re_expressed_in_window_frame() {
        let src = Image::zeros(40, 40, 1);
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        // Center (12, 12) with a 8x8 window puts the origin at (8, 8).
        let s = crop_window("s", src, &b, [12.0, 12.0], (8, 8), None).unwrap();
        assert_eq!(s.context.as_ref().unwrap().origin, (8, 8));
        assert_eq!(s.truth, GroundTruth::BBox { bbox: BBox::new(2.0, 2.0, 12.0, 12.0) });
    }

    #[test]
    fn window_out_of_bounds() {
        let src = Image::zeros(8, 8, 1);
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert!(crop_window("s", src, &b, [1.0, 1.0], (4, 4), None).is_err());
    }

    fn entry(bbox: BBox, class: u32, source: [usize; 2]) -> SampleEntry {
        SampleEntry {
            id: format!("s{class}-{}", bbox.xmin),
            payload: "x.png".into(),
            truth: TruthRef::Inline(GroundTruth::BBox { bbox: bbox.with_class(class) }),
            class_label: Some(class),
            center: None,
            source_size: Some(source),
        }
    }

    fn centered_box(side_w: f64, side_h: f64) -> BBox {
        BBox::new(136.0 - side_w / 2.0, 136.0 - side_h / 2.0, 136.0 + side_w / 2.0, 136.0 + side_h / 2.0)
    }

    #[test]
    fn eligibility_criteria() {
        // 100x100 window so that the 1% and 50% areas are exact.
        let win = (100, 100);
        let src = [240, 240];
        let at = |w: f64, h: f64| BBox::new(120.0 - w / 2.0, 120.0 - h / 2.0, 120.0 + w / 2.0, 120.0 + h / 2.0);
        assert!(!detection_eligible(&entry(at(5.0, 10.0), 1, src), &[1], win, 64));
        assert!(detection_eligible(&entry(at(10.0, 10.0), 1, src), &[1], win, 64));
        assert!(detection_eligible(&entry(at(100.0, 50.0), 1, src), &[1], win, 64));
        assert!(!detection_eligible(&entry(at(100.0, 52.0), 1, src), &[1], win, 64));
        assert!(!detection_eligible(&entry(at(10.0, 10.0), 7, src), &[1, 2], win, 64));
        // Window origin (10, 60): too near the left edge for extent 64, fine for 8.
        let edge = BBox::new(50.0, 100.0, 70.0, 120.0);
        assert!(!detection_eligible(&entry(edge, 1, src), &[1], win, 64));
        assert!(detection_eligible(&entry(edge, 1, src), &[1], win, 8));
    }

    #[test]
    fn filtering_is_idempotent_and_ordered() {
        let src = [272, 272];
        let m = DatasetManifest {
            modality: Modality::ImageDetection,
            provenance: String::new(),
            window: Some([128, 128]),
            samples: vec![
                entry(centered_box(30.0, 30.0), 1, src),
                entry(centered_box(2.0, 2.0), 1, src),
                entry(centered_box(31.0, 30.0), 3, src),
                entry(centered_box(32.0, 30.0), 9, src),
            ],
            base_dir: PathBuf::new(),
        };
        let f = filter_detection_samples(&m, &[1, 3], (128, 128), 64);
        let ids: Vec<_> = f.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, vec![m.samples[0].id.clone(), m.samples[2].id.clone()]);
        assert_eq!(filter_detection_samples(&f, &[1, 3], (128, 128), 64), f);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = entry(centered_box(30.0, 30.0), 1, [272, 272]);
        let m = DatasetManifest {
            modality: Modality::ImageDetection,
            provenance: String::new(),
            window: Some([128, 128]),
            samples: vec![e.clone(), e],
            base_dir: PathBuf::new(),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let im = Image::new(3, 2, 1, [0, 51, 102, 153, 204, 255].map(|v| v as f64 / 255.0).to_vec());
        save_png(&p, &im).unwrap();
        assert_eq!(load_image(&p).unwrap(), im);
    }

    proptest! {
        /// Cropping then translating equals cropping directly at shifted bounds.
        #[test]
        fn crop_then_translate_is_shifted_crop(
            tx in -6i32..=6, ty in -6i32..=6, cx in 10.0f64..14.0, cy in 10.0f64..14.0, seed in 0u64..1000,
        ) {
            let src = Image::new(24, 24, 1, (0..576).map(|i| ((i as u64 * 2654435761 + seed) % 251) as f64).collect());
            let b = BBox::new(cx - 2.0, cy - 2.0, cx + 2.0, cy + 2.0);
            let s = crop_window("s", src.clone(), &b, [cx, cy], (8, 8), None).unwrap();
            let ctx = s.context.as_ref().unwrap();
            let moved = act_input(&GroupElement::translation(tx, ty), &s.input, Some(ctx)).unwrap();
            let (ox, oy) = window_origin([cx, cy], (8, 8));
            let direct = crop(&src, ox - i64::from(tx), oy - i64::from(ty), 8, 8).unwrap();
            let InputData::Image { image } = moved.data else { panic!() };
            prop_assert_eq!(image, direct);
        }
    }
}
