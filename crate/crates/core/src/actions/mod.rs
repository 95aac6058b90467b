//! Group actions on model inputs and on outputs.
//!
//! `act_input` realizes `x' = φ(g, x)` for each modality and `act_output`
//! realizes `y' = φ̃(g, y)`. Classification outputs are invariant (`φ̃ = I`),
//! boxes are equivariant under translation, and flow fields are covariant
//! under the square symmetries: both the domain and the vectors rotate.
//!
//! Pixel geometry: columns grow right, rows grow down, and rotations are
//! counter-clockwise as seen on screen. Rotations act about the pixel-grid
//! center `((W-1)/2, (H-1)/2)`.

mod types;

pub use types::*;

use thiserror::Error;

use crate::groups::{cos_sin_deg, GroupElement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("{group} cannot act on {target}")]
    Incompatible { group: String, target: String },
    #[error("translation needs the uncropped source image")]
    MissingContext,
    #[error("shifted window at ({x}, {y}) size {w}x{h} exceeds source bounds {sw}x{sh}")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: usize,
        h: usize,
        sw: usize,
        sh: usize,
    },
    #[error("square symmetries need square images, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
}

/// Source data for translations realized by shifted-bounds cropping.
///
/// `origin` is the top-left corner of the unshifted window in source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationContext {
    pub source: Image,
    pub origin: (i64, i64),
    pub window: (usize, usize),
}

impl TranslationContext {
    /// Window origin for the shift `(tx, ty)`.
    ///
    /// An element `(tx, ty)` moves the depicted object by `(tx, ty)` in the
    /// output frame, so the crop window moves by `(-tx, -ty)` in the source.
    pub fn shifted_origin(&self, tx: i32, ty: i32) -> (i64, i64) {
        (self.origin.0 - i64::from(tx), self.origin.1 - i64::from(ty))
    }

    pub fn crop(&self, tx: i32, ty: i32) -> Result<Image, ActionError> {
        let (x, y) = self.shifted_origin(tx, ty);
        crop(&self.source, x, y, self.window.0, self.window.1)
    }
}

/// Extracts the `w × h` window with top-left corner `(x, y)`.
pub fn crop(source: &Image, x: i64, y: i64, w: usize, h: usize) -> Result<Image, ActionError> {
    let fits = x >= 0
        && y >= 0
        && x as usize + w <= source.width
        && y as usize + h <= source.height
        && w > 0
        && h > 0;
    if !fits {
        return Err(ActionError::OutOfBounds {
            x,
            y,
            w,
            h,
            sw: source.width,
            sh: source.height,
        });
    }
    let (x, y) = (x as usize, y as usize);
    let c = source.channels;
    let mut data = Vec::with_capacity(w * h * c);
    for row in y..y + h {
        let start = source.index(x, row, 0);
        data.extend_from_slice(&source.data[start..start + w * c]);
    }
    Ok(Image::new(w, h, c, data))
}

fn incompatible(g: &GroupElement, target: &str) -> ActionError {
    ActionError::Incompatible {
        group: g.kind().to_string(),
        target: target.to_string(),
    }
}

/// `x' = φ(g, x)`.
pub fn act_input(
    g: &GroupElement,
    x: &InputSample,
    ctx: Option<&TranslationContext>,
) -> Result<InputSample, ActionError> {
    let data = match (g, &x.data) {
        (GroupElement::Rotation2d { angle }, InputData::Image { image }) => InputData::Image {
            image: rotate_image(image, *angle),
        },
        (GroupElement::Translation2d { tx, ty }, InputData::Image { image }) => {
            if *tx == 0 && *ty == 0 {
                InputData::Image {
                    image: image.clone(),
                }
            } else {
                let ctx = ctx.ok_or(ActionError::MissingContext)?;
                InputData::Image {
                    image: ctx.crop(*tx, *ty)?,
                }
            }
        }
        (GroupElement::SquareSym { time_reverse, .. }, InputData::ImagePair { first, second }) => {
            let m = g.square_matrix().expect("square symmetry matrix");
            let a = permute_square(first, m)?;
            let b = permute_square(second, m)?;
            if *time_reverse {
                InputData::ImagePair {
                    first: b,
                    second: a,
                }
            } else {
                InputData::ImagePair {
                    first: a,
                    second: b,
                }
            }
        }
        (GroupElement::AxisAngle3d(rot), InputData::PointCloud { points }) => {
            InputData::PointCloud {
                points: rotate_cloud(points, rot),
            }
        }
        _ => return Err(incompatible(g, x.kind_name())),
    };
    Ok(InputSample {
        id: x.id.clone(),
        data,
    })
}

/// `out(p) = in(M⁻¹ p)` for an orthogonal integer matrix `M` about the grid
/// center. Exact pixel permutation.
pub fn permute_square(image: &Image, m: [[i32; 2]; 2]) -> Result<Image, ActionError> {
    if m == [[1, 0], [0, 1]] {
        return Ok(image.clone());
    }
    let (w, h) = (image.width, image.height);
    let swaps_axes = m[0][0] == 0;
    if swaps_axes && w != h {
        return Err(ActionError::NotSquare {
            width: w,
            height: h,
        });
    }
    // M is orthogonal, so M⁻¹ = Mᵀ. Work in doubled coordinates to keep the
    // half-pixel grid center integral.
    let inv = [[m[0][0], m[1][0]], [m[0][1], m[1][1]]];
    let (w2, h2) = ((w as i64) - 1, (h as i64) - 1);
    let mut out = Image::zeros(w, h, image.channels);
    for row in 0..h {
        for col in 0..w {
            let dx = 2 * col as i64 - w2;
            let dy = 2 * row as i64 - h2;
            let sx = i64::from(inv[0][0]) * dx + i64::from(inv[0][1]) * dy;
            let sy = i64::from(inv[1][0]) * dx + i64::from(inv[1][1]) * dy;
            let scol = ((sx + w2) / 2) as usize;
            let srow = ((sy + h2) / 2) as usize;
            for ch in 0..image.channels {
                out.set(col, row, ch, image.get(scol, srow, ch));
            }
        }
    }
    Ok(out)
}

/// Rotates counter-clockwise by `angle` degrees about the grid center.
///
/// Quarter turns on square images (and half turns on any image) are exact
/// pixel permutations; other angles use inverse mapping with bilinear
/// interpolation and zero fill outside the source.
pub fn rotate_image(image: &Image, angle: f64) -> Image {
    let a = angle.rem_euclid(360.0);
    if a == 0.0 {
        return image.clone();
    }
    if a % 90.0 == 0.0 {
        let k = (a / 90.0) as i32;
        if k == 2 || image.width == image.height {
            let m = GroupElement::square(k, false, false)
                .square_matrix()
                .expect("square matrix");
            return permute_square(image, m).expect("shape checked");
        }
    }
    let (c, s) = cos_sin_deg(a);
    let cx = (image.width as f64 - 1.0) / 2.0;
    let cy = (image.height as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(image.width, image.height, image.channels);
    for row in 0..image.height {
        for col in 0..image.width {
            let dx = col as f64 - cx;
            let dy = row as f64 - cy;
            // Source position: rotate the output displacement by -angle.
            let sx = cx + dx * c - dy * s;
            let sy = cy + dx * s + dy * c;
            for ch in 0..image.channels {
                out.set(col, row, ch, bilinear(image, sx, sy, ch));
            }
        }
    }
    out
}

fn bilinear(image: &Image, x: f64, y: f64, ch: usize) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |col: f64, row: f64| -> f64 {
        if col < 0.0 || row < 0.0 || col >= image.width as f64 || row >= image.height as f64 {
            0.0
        } else {
            image.get(col as usize, row as usize, ch)
        }
    };
    let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1.0, y0) * fx;
    let bottom = sample(x0, y0 + 1.0) * (1.0 - fx) + sample(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rigid rotation about the cloud centroid using Rodrigues' formula:
/// `v' = v cosθ + (k × v) sinθ + k (k · v)(1 − cosθ)`.
pub fn rotate_cloud(points: &PointCloud, rot: &crate::groups::AxisAngle) -> PointCloud {
    if rot.angle == 0.0 {
        return points.clone();
    }
    let c = points.centroid();
    let k = rot.axis;
    let (cos, sin) = cos_sin_deg(rot.angle);
    PointCloud(
        points
            .0
            .iter()
            .map(|p| {
                let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                let kxv = [
                    k[1] * v[2] - k[2] * v[1],
                    k[2] * v[0] - k[0] * v[2],
                    k[0] * v[1] - k[1] * v[0],
                ];
                let kdv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
                let mut out = [0.0; 3];
                for i in 0..3 {
                    out[i] = c[i] + v[i] * cos + kxv[i] * sin + k[i] * kdv * (1.0 - cos);
                }
                out
            })
            .collect(),
    )
}

/// Covariant action on a flow field: `V'(p) = s · R V(R⁻¹ p)` with `s = -1`
/// under time reversal.
pub fn act_flow(g: &GroupElement, flow: &FlowField) -> Result<FlowField, ActionError> {
    let GroupElement::SquareSym { time_reverse, .. } = *g else {
        return Err(incompatible(g, "flow_field"));
    };
    let m = g.square_matrix().expect("square matrix");
    let sign = if time_reverse { -1.0 } else { 1.0 };
    // Permute the domain by treating (u, v) as two channels.
    let as_image = Image::new(flow.width, flow.height, 2, flow.flat());
    let moved = permute_square(&as_image, m)?;
    let (a, b, c, d) = (
        f64::from(m[0][0]),
        f64::from(m[0][1]),
        f64::from(m[1][0]),
        f64::from(m[1][1]),
    );
    let data = moved
        .data
        .chunks_exact(2)
        .map(|uv| {
            let (u, v) = (uv[0], uv[1]);
            [sign * (a * u + b * v), sign * (c * u + d * v)]
        })
        .collect();
    Ok(FlowField::new(flow.width, flow.height, data))
}

fn act_bbox(g: &GroupElement, b: &BBox) -> Result<BBox, ActionError> {
    match *g {
        GroupElement::Translation2d { tx, ty } => Ok(b.translated(f64::from(tx), f64::from(ty))),
        _ => Err(incompatible(g, "bbox")),
    }
}

/// Types on which the output action `φ̃` is defined.
pub trait OutputAction: Sized {
    fn act(&self, g: &GroupElement) -> Result<Self, ActionError>;
}

impl OutputAction for BBox {
    fn act(&self, g: &GroupElement) -> Result<Self, ActionError> {
        act_bbox(g, self)
    }
}

impl OutputAction for FlowField {
    fn act(&self, g: &GroupElement) -> Result<Self, ActionError> {
        act_flow(g, self)
    }
}

impl OutputAction for GroundTruth {
    fn act(&self, g: &GroupElement) -> Result<Self, ActionError> {
        Ok(match self {
            GroundTruth::ClassLabel { .. } => self.clone(),
            GroundTruth::BBox { bbox } => GroundTruth::BBox {
                bbox: act_bbox(g, bbox)?,
            },
            GroundTruth::FlowField { flow } => GroundTruth::FlowField {
                flow: act_flow(g, flow)?,
            },
        })
    }
}

impl OutputAction for ModelOutput {
    fn act(&self, g: &GroupElement) -> Result<Self, ActionError> {
        Ok(match self {
            ModelOutput::ClassProbs { .. } => self.clone(),
            ModelOutput::Detections { detections } => ModelOutput::Detections {
                detections: detections
                    .iter()
                    .map(|d| {
                        Ok(Detection {
                            bbox: act_bbox(g, &d.bbox)?,
                            confidence: d.confidence,
                        })
                    })
                    .collect::<Result<_, ActionError>>()?,
            },
            ModelOutput::FlowField { flow } => ModelOutput::FlowField {
                flow: act_flow(g, flow)?,
            },
        })
    }
}

/// `y' = φ̃(g, y)`.
pub fn act_output<T: OutputAction>(g: &GroupElement, y: &T) -> Result<T, ActionError> {
    y.act(g)
}

/// `φ̃(g⁻¹, y)`: pulls an output back to the untransformed frame.
pub fn act_output_inverse<T: OutputAction>(g: &GroupElement, y: &T) -> Result<T, ActionError> {
    y.act(&g.inverse())
}
