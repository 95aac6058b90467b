//! Inputs, ground truth, and model outputs for the supported modalities.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::groups::GroupKind;
use crate::tensor::Tensor;

/// A row-major `height × width × channels` intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Image {
        assert_eq!(data.len(), width * height * channels, "image buffer size");
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Image {
        Image::new(width, height, channels, vec![0.0; width * height * channels])
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, ch: usize) -> f64 {
        self.data[self.index(col, row, ch)]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, ch: usize, v: f64) {
        let i = self.index(col, row, ch);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn tensor_shape(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image, String> {
        t.expect_shape(&[None, None, None]).map_err(|e| e.to_string())?;
        let (h, w, c) = (t.shape[0], t.shape[1], t.shape[2]);
        if h == 0 || w == 0 || c == 0 {
            return Err(format!("image dimensions must be positive, got {:?}", t.shape));
        }
        Ok(Image::new(w, h, c, t.decode().map_err(|e| e.to_string())?))
    }
}

impl Serialize for Image {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Tensor::f64(self.tensor_shape(), &self.data).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Image {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Image::from_tensor(&Tensor::deserialize(d)?).map_err(D::Error::custom)
    }
}

/// A dense 2-D vector field in pixels/frame, row-major. `v` points down.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 2]>) -> FlowField {
        assert_eq!(data.len(), width * height, "flow buffer size");
        FlowField {
            width,
            height,
            data,
        }
    }

    pub fn uniform(width: usize, height: usize, v: [f64; 2]) -> FlowField {
        FlowField::new(width, height, vec![v; width * height])
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> [f64; 2] {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flat(&self) -> Vec<f64> {
        self.data.iter().flat_map(|v| *v).collect()
    }

    pub fn from_tensor(t: &Tensor) -> Result<FlowField, String> {
        t.expect_shape(&[None, None, Some(2)]).map_err(|e| e.to_string())?;
        let (h, w) = (t.shape[0], t.shape[1]);
        if h == 0 || w == 0 {
            return Err(format!("flow dimensions must be positive, got {:?}", t.shape));
        }
        let flat = t.decode().map_err(|e| e.to_string())?;
        Ok(FlowField::new(
            w,
            h,
            flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        ))
    }
}

impl Serialize for FlowField {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Tensor::f64(vec![self.height, self.width, 2], &self.flat()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FlowField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        FlowField::from_tensor(&Tensor::deserialize(d)?).map_err(D::Error::custom)
    }
}

/// `N × 3` point coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud(pub Vec<[f64; 3]>);

impl PointCloud {
    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| *p).collect()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.0.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.0 {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn from_tensor(t: &Tensor) -> Result<PointCloud, String> {
        t.expect_shape(&[None, Some(3)]).map_err(|e| e.to_string())?;
        let flat = t.decode().map_err(|e| e.to_string())?;
        Ok(PointCloud(
            flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        ))
    }
}

impl Serialize for PointCloud {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Tensor::f64(vec![self.0.len(), 3], &self.flat()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PointCloud {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        PointCloud::from_tensor(&Tensor::deserialize(d)?).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputData {
    Image { image: Image },
    /// Two frames in temporal order.
    ImagePair { first: Image, second: Image },
    PointCloud { points: PointCloud },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSample {
    pub id: String,
    #[serde(flatten)]
    pub data: InputData,
}

impl InputSample {
    pub fn image(id: impl Into<String>, image: Image) -> InputSample {
        InputSample {
            id: id.into(),
            data: InputData::Image { image },
        }
    }

    pub fn pair(id: impl Into<String>, first: Image, second: Image) -> InputSample {
        InputSample {
            id: id.into(),
            data: InputData::ImagePair { first, second },
        }
    }

    pub fn cloud(id: impl Into<String>, points: Vec<[f64; 3]>) -> InputSample {
        InputSample {
            id: id.into(),
            data: InputData::PointCloud {
                points: PointCloud(points),
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.data {
            InputData::Image { .. } => "image",
            InputData::ImagePair { .. } => "image_pair",
            InputData::PointCloud { .. } => "point_cloud",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |im: &Image| {
            if im.width == 0 || im.height == 0 || im.channels == 0 {
                Err(format!("sample {}: image dimensions must be positive", self.id))
            } else {
                Ok(())
            }
        };
        match &self.data {
            InputData::Image { image } => positive(image),
            InputData::ImagePair { first, second } => {
                positive(first)?;
                if !first.same_shape(second) {
                    return Err(format!("sample {}: image pair shapes differ", self.id));
                }
                Ok(())
            }
            InputData::PointCloud { points } => {
                if points.0.is_empty() {
                    return Err(format!("sample {}: empty point cloud", self.id));
                }
                if points.0.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(format!("sample {}: non-finite point coordinate", self.id));
                }
                Ok(())
            }
        }
    }
}

/// Axis-aligned box in pixels, with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    #[serde(default)]
    pub class_index: u32,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> BBox {
        BBox {
            xmin,
            ymin,
            xmax,
            ymax,
            class_index: 0,
        }
    }

    pub fn with_class(self, class_index: u32) -> BBox {
        BBox {
            class_index,
            ..self
        }
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            (self.xmin + self.xmax) / 2.0,
            (self.ymin + self.ymax) / 2.0,
        ]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
            class_index: self.class_index,
        }
    }

    /// Scales both sides by `s` about the box center.
    pub fn scaled(&self, s: f64) -> BBox {
        let [cx, cy] = self.center();
        let hw = (self.xmax - self.xmin) * s / 2.0;
        let hh = (self.ymax - self.ymin) * s / 2.0;
        BBox {
            xmin: cx - hw,
            ymin: cy - hh,
            xmax: cx + hw,
            ymax: cy + hh,
            class_index: self.class_index,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(format!(
                "box ({}, {}, {}, {}) is not ordered",
                self.xmin, self.ymin, self.xmax, self.ymax
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    ClassLabel { index: u32, num_classes: u32 },
    #[serde(rename = "bbox")]
    BBox { bbox: BBox },
    FlowField { flow: FlowField },
}

impl GroundTruth {
    pub fn class_label(&self) -> Option<u32> {
        match self {
            GroundTruth::ClassLabel { index, .. } => Some(*index),
            GroundTruth::BBox { bbox } => Some(bbox.class_index),
            GroundTruth::FlowField { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            GroundTruth::ClassLabel { index, num_classes } => {
                if index >= num_classes {
                    return Err(format!("label {index} out of range for {num_classes} classes"));
                }
                Ok(())
            }
            GroundTruth::BBox { bbox } => bbox.validate(),
            GroundTruth::FlowField { flow } => {
                if flow.data.iter().flatten().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err("flow field contains non-finite vectors".into())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelOutput {
    ClassProbs { probs: Vec<f64> },
    Detections { detections: Vec<Detection> },
    FlowField { flow: FlowField },
}

pub const PROB_SUM_TOL: f64 = 1e-6;

impl ModelOutput {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelOutput::ClassProbs { .. } => "class_probs",
            ModelOutput::Detections { .. } => "detections",
            ModelOutput::FlowField { .. } => "flow_field",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            ModelOutput::ClassProbs { probs } => {
                if probs.is_empty() {
                    return Err("empty probability vector".into());
                }
                if probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err("negative or NaN probability".into());
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(format!("probabilities sum to {sum}"));
                }
                Ok(())
            }
            ModelOutput::Detections { detections } => {
                for d in detections {
                    if !(0.0..=1.0).contains(&d.confidence) {
                        return Err(format!("confidence {} outside [0, 1]", d.confidence));
                    }
                    d.bbox.validate()?;
                }
                Ok(())
            }
            ModelOutput::FlowField { flow } => GroundTruth::FlowField { flow: flow.clone() }.validate(),
        }
    }

    /// The highest-confidence detection; ties go to the earliest.
    pub fn top_detection(&self) -> Option<&Detection> {
        let ModelOutput::Detections { detections } = self else {
            return None;
        };
        detections.iter().reduce(|best, d| {
            if d.confidence > best.confidence {
                d
            } else {
                best
            }
        })
    }
}

/// Data modality a model serves; fixes input, truth, and output kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    ImageClassification,
    ImageDetection,
    ImagePairFlow,
    PointcloudClassification,
}

impl Modality {
    /// The transform group evaluated for this modality.
    pub fn group_kind(self) -> GroupKind {
        match self {
            Modality::ImageClassification => GroupKind::Rotation2d,
            Modality::ImageDetection => GroupKind::Translation2d,
            Modality::ImagePairFlow => GroupKind::SquareSym,
            Modality::PointcloudClassification => GroupKind::AxisAngle3d,
        }
    }

    pub fn accepts_input(self, x: &InputSample) -> bool {
        matches!(
            (self, &x.data),
            (
                Modality::ImageClassification | Modality::ImageDetection,
                InputData::Image { .. }
            ) | (Modality::ImagePairFlow, InputData::ImagePair { .. })
                | (Modality::PointcloudClassification, InputData::PointCloud { .. })
        )
    }

    pub fn accepts_truth(self, y: &GroundTruth) -> bool {
        matches!(
            (self, y),
            (
                Modality::ImageClassification | Modality::PointcloudClassification,
                GroundTruth::ClassLabel { .. }
            ) | (Modality::ImageDetection, GroundTruth::BBox { .. })
                | (Modality::ImagePairFlow, GroundTruth::FlowField { .. })
        )
    }

    pub fn accepts_output(self, y: &ModelOutput) -> bool {
        matches!(
            (self, y),
            (
                Modality::ImageClassification | Modality::PointcloudClassification,
                ModelOutput::ClassProbs { .. }
            ) | (Modality::ImageDetection, ModelOutput::Detections { .. })
                | (Modality::ImagePairFlow, ModelOutput::FlowField { .. })
        )
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::ImageClassification => "image-classification",
            Modality::ImageDetection => "image-detection",
            Modality::ImagePairFlow => "image-pair-flow",
            Modality::PointcloudClassification => "pointcloud-classification",
        })
    }
}
