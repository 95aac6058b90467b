//! Transform groups, their algebra, and discretized orbits with a 2-D layout.
//!
//! Four group kinds are supported:
//!
//! * `Rotation2D`: planar rotations, stored in degrees in `[0, 360)`.
//! * `Translation2D`: integer pixel shifts.
//! * `SquareSym`: the 8 symmetries of the square times a time-reversal flag
//!   (16 elements).
//! * `AxisAngle3D`: 3-D rotations. Orbits sample axes lying in one of the
//!   three coordinate slicing planes, but composition is closed in SO(3), so
//!   the element itself stores a general unit axis.
//!
//! Composition follows the usual convention for actions: `compose(a, b)` is
//! the transform that applies `b` first, then `a`.

use std::fmt;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("cannot compose {left} with {right}")]
    KindMismatch { left: GroupKind, right: GroupKind },
    #[error("invalid orbit spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Rotation2d,
    Translation2d,
    SquareSym,
    AxisAngle3d,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::Rotation2d => "rotation2d",
            GroupKind::Translation2d => "translation2d",
            GroupKind::SquareSym => "square_sym",
            GroupKind::AxisAngle3d => "axis_angle3d",
        })
    }
}

/// One of the three coordinate planes an `AxisAngle3D` orbit samples axes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlicePlane {
    XY,
    XZ,
    YZ,
}

impl SlicePlane {
    pub const ALL: [SlicePlane; 3] = [SlicePlane::XY, SlicePlane::XZ, SlicePlane::YZ];

    /// Unit vectors spanning the plane: (horizontal, vertical).
    fn basis(self) -> ([f64; 3], [f64; 3]) {
        match self {
            SlicePlane::XY => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            SlicePlane::XZ => ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            SlicePlane::YZ => ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        }
    }

    fn index(self) -> usize {
        match self {
            SlicePlane::XY => 0,
            SlicePlane::XZ => 1,
            SlicePlane::YZ => 2,
        }
    }
}

/// Cosine and sine of an angle in degrees, exact at multiples of 90.
pub fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    if d == 0.0 {
        (1.0, 0.0)
    } else if d == 90.0 {
        (0.0, 1.0)
    } else if d == 180.0 {
        (-1.0, 0.0)
    } else if d == 270.0 {
        (0.0, -1.0)
    } else {
        let r = d.to_radians();
        (r.cos(), r.sin())
    }
}

fn reduce_degrees(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if r >= 360.0 || r == 0.0 {
        0.0
    } else {
        r
    }
}

/// A 3-D rotation in axis-angle form: unit axis and angle in `[0, 180]` degrees.
///
/// Canonical form: the identity uses axis `+x`; a half-turn uses the axis sign
/// whose first nonzero component is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis: [f64; 3],
    pub angle: f64,
}

const AXIS_EPS: f64 = 1e-12;

impl AxisAngle {
    pub const IDENTITY: AxisAngle = AxisAngle {
        axis: [1.0, 0.0, 0.0],
        angle: 0.0,
    };

    /// Rotation by `rot_angle` degrees about the in-plane axis at `axis_angle`
    /// degrees from the plane's horizontal axis.
    pub fn in_plane(plane: SlicePlane, axis_angle: f64, rot_angle: f64) -> AxisAngle {
        let (h, v) = plane.basis();
        let (c, s) = cos_sin_deg(axis_angle);
        let axis = [
            c * h[0] + s * v[0],
            c * h[1] + s * v[1],
            c * h[2] + s * v[2],
        ];
        Self::new(axis, rot_angle)
    }

    /// Builds a canonical rotation from any nonzero axis and angle in degrees.
    pub fn new(axis: [f64; 3], angle: f64) -> AxisAngle {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < AXIS_EPS {
            return Self::IDENTITY;
        }
        let mut axis = [axis[0] / n, axis[1] / n, axis[2] / n];
        // Map the angle into (-180, 180] and fold negative angles onto the
        // opposite axis.
        let mut a = angle.rem_euclid(360.0);
        if a > 180.0 {
            a = 360.0 - a;
            axis = [-axis[0], -axis[1], -axis[2]];
        }
        Self::canonical(axis, a)
    }

    fn canonical(mut axis: [f64; 3], angle: f64) -> AxisAngle {
        if angle.abs() < AXIS_EPS {
            return Self::IDENTITY;
        }
        if angle == 180.0 {
            if let Some(first) = axis.iter().copied().find(|c| c.abs() > AXIS_EPS) {
                if first < 0.0 {
                    axis = [-axis[0], -axis[1], -axis[2]];
                }
            }
        }
        AxisAngle { axis, angle }
    }

    fn quaternion(&self) -> UnitQuaternion<f64> {
        let axis = Unit::new_normalize(Vector3::from(self.axis));
        UnitQuaternion::from_axis_angle(&axis, self.angle.to_radians())
    }

    fn from_quaternion(q: UnitQuaternion<f64>) -> AxisAngle {
        let q = q.into_inner();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.vector())
        } else {
            (q.w, q.vector().into_owned())
        };
        let vn = v.norm();
        if vn < AXIS_EPS {
            return Self::IDENTITY;
        }
        let angle = (2.0 * vn.atan2(w)).to_degrees().min(180.0);
        Self::canonical([v[0] / vn, v[1] / vn, v[2] / vn], angle)
    }

    /// Rotation matrix via Rodrigues' formula.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [x, y, z] = self.axis;
        let (c, s) = cos_sin_deg(self.angle);
        let t = 1.0 - c;
        [
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ]
    }

    /// In-plane coordinates `(axis_angle, rot_angle)` if the axis lies in `plane`.
    pub fn slice(&self, plane: SlicePlane) -> Option<(f64, f64)> {
        if self.angle == 0.0 {
            return Some((0.0, 0.0));
        }
        let (h, v) = plane.basis();
        let normal = Vector3::from(h).cross(&Vector3::from(v));
        let a = Vector3::from(self.axis);
        if a.dot(&normal).abs() > 1e-9 {
            return None;
        }
        let deg = a.dot(&Vector3::from(v)).atan2(a.dot(&Vector3::from(h))).to_degrees();
        Some((reduce_degrees(deg), self.angle))
    }

    /// Largest absolute difference between the two rotation matrices.
    pub fn distance(&self, other: &AxisAngle) -> f64 {
        let a = Matrix3::from(self.matrix()).transpose();
        let b = Matrix3::from(other.matrix()).transpose();
        (a - b).abs().max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupElement {
    Rotation2d {
        angle: f64,
    },
    Translation2d {
        tx: i32,
        ty: i32,
    },
    SquareSym {
        /// Counter-clockwise (on screen) rotation in degrees: 0, 90, 180 or 270.
        rot: u16,
        reflect: bool,
        time_reverse: bool,
    },
    AxisAngle3d(AxisAngle),
}

impl GroupElement {
    pub fn rotation(angle: f64) -> Self {
        GroupElement::Rotation2d {
            angle: reduce_degrees(angle),
        }
    }

    pub fn translation(tx: i32, ty: i32) -> Self {
        GroupElement::Translation2d { tx, ty }
    }

    /// `quarter_turns` is reduced modulo 4.
    pub fn square(quarter_turns: i32, reflect: bool, time_reverse: bool) -> Self {
        GroupElement::SquareSym {
            rot: (quarter_turns.rem_euclid(4) * 90) as u16,
            reflect,
            time_reverse,
        }
    }

    pub fn axis_angle(plane: SlicePlane, axis_angle: f64, rot_angle: f64) -> Self {
        GroupElement::AxisAngle3d(AxisAngle::in_plane(plane, axis_angle, rot_angle))
    }

    pub fn kind(&self) -> GroupKind {
        match self {
            GroupElement::Rotation2d { .. } => GroupKind::Rotation2d,
            GroupElement::Translation2d { .. } => GroupKind::Translation2d,
            GroupElement::SquareSym { .. } => GroupKind::SquareSym,
            GroupElement::AxisAngle3d(_) => GroupKind::AxisAngle3d,
        }
    }

    pub fn identity(kind: GroupKind) -> Self {
        match kind {
            GroupKind::Rotation2d => GroupElement::Rotation2d { angle: 0.0 },
            GroupKind::Translation2d => GroupElement::Translation2d { tx: 0, ty: 0 },
            GroupKind::SquareSym => GroupElement::square(0, false, false),
            GroupKind::AxisAngle3d => GroupElement::AxisAngle3d(AxisAngle::IDENTITY),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.kind())
    }

    /// `a · b`: apply `b`, then `a`.
    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement, GroupError> {
        use GroupElement::*;
        Ok(match (*self, *other) {
            (Rotation2d { angle: a }, Rotation2d { angle: b }) => GroupElement::rotation(a + b),
            (Translation2d { tx: ax, ty: ay }, Translation2d { tx: bx, ty: by }) => {
                Translation2d {
                    tx: ax + bx,
                    ty: ay + by,
                }
            }
            (
                SquareSym {
                    rot: r1,
                    reflect: f1,
                    time_reverse: t1,
                },
                SquareSym {
                    rot: r2,
                    reflect: f2,
                    time_reverse: t2,
                },
            ) => {
                // R^k1 F^f1 R^k2 F^f2 = R^(k1 ± k2) F^(f1 ^ f2), since F R = R^-1 F.
                let k1 = i32::from(r1 / 90);
                let k2 = i32::from(r2 / 90);
                let k = if f1 { k1 - k2 } else { k1 + k2 };
                GroupElement::square(k, f1 ^ f2, t1 ^ t2)
            }
            (AxisAngle3d(a), AxisAngle3d(b)) => {
                AxisAngle3d(AxisAngle::from_quaternion(a.quaternion() * b.quaternion()))
            }
            (a, b) => {
                return Err(GroupError::KindMismatch {
                    left: a.kind(),
                    right: b.kind(),
                })
            }
        })
    }

    pub fn inverse(&self) -> GroupElement {
        match *self {
            GroupElement::Rotation2d { angle } => GroupElement::rotation(360.0 - angle),
            GroupElement::Translation2d { tx, ty } => GroupElement::Translation2d { tx: -tx, ty: -ty },
            GroupElement::SquareSym {
                rot,
                reflect,
                time_reverse,
            } => {
                // Reflections are involutions; pure rotations invert the turn.
                let k = i32::from(rot / 90);
                GroupElement::square(if reflect { k } else { -k }, reflect, time_reverse)
            }
            GroupElement::AxisAngle3d(a) => {
                // Flip the axis and keep the angle in [0, 180].
                GroupElement::AxisAngle3d(AxisAngle::canonical(
                    [-a.axis[0], -a.axis[1], -a.axis[2]],
                    a.angle,
                ))
            }
        }
    }

    /// Integer 2×2 matrix of the spatial part of a `SquareSym` element, acting
    /// on pixel displacements `(dx, dy)` with `y` pointing down.
    pub fn square_matrix(&self) -> Option<[[i32; 2]; 2]> {
        let GroupElement::SquareSym { rot, reflect, .. } = *self else {
            return None;
        };
        // Counter-clockwise on screen: (dx, dy) -> (dy, -dx).
        let quarter = [[0, 1], [-1, 0]];
        let mut m = [[1, 0], [0, 1]];
        for _ in 0..(rot / 90) {
            m = mul2(quarter, m);
        }
        if reflect {
            m = mul2(m, [[-1, 0], [0, 1]]);
        }
        Some(m)
    }

    /// Approximate equality: exact for discrete kinds, rotation-matrix
    /// distance for `AxisAngle3D`, and modular angle distance for `Rotation2D`.
    pub fn approx_eq(&self, other: &GroupElement, tol: f64) -> bool {
        match (self, other) {
            (GroupElement::AxisAngle3d(a), GroupElement::AxisAngle3d(b)) => a.distance(b) <= tol,
            (GroupElement::Rotation2d { angle: a }, GroupElement::Rotation2d { angle: b }) => {
                let d = (a - b).rem_euclid(360.0);
                d.min(360.0 - d) <= tol
            }
            _ => self == other,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            GroupElement::Rotation2d { angle } => format!("{angle}°"),
            GroupElement::Translation2d { tx, ty } => format!("({tx}, {ty})"),
            GroupElement::SquareSym {
                rot,
                reflect,
                time_reverse,
            } => format!(
                "{}{} r{rot}",
                if time_reverse { "F'" } else { "F" },
                if reflect { " flip" } else { "" }
            ),
            GroupElement::AxisAngle3d(a) => {
                for plane in SlicePlane::ALL {
                    if let Some((axis, rot)) = a.slice(plane) {
                        return format!("{plane:?} axis {axis:.0}° rot {rot:.0}°");
                    }
                }
                format!(
                    "axis ({:.3}, {:.3}, {:.3}) rot {:.1}°",
                    a.axis[0], a.axis[1], a.axis[2], a.angle
                )
            }
        }
    }
}

fn mul2(a: [[i32; 2]; 2], b: [[i32; 2]; 2]) -> [[i32; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Discretization of a group into a finite orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    pub group: GroupKind,
    /// Rotation2D step in degrees; must divide 360.
    pub rotation_step: f64,
    /// Translation2D shifts range over `[-shift_extent, shift_extent]` in both axes.
    pub shift_extent: i32,
    pub shift_stride: i32,
    /// AxisAngle3D axis direction step within each plane; must divide 360.
    pub axis_step: f64,
    /// AxisAngle3D rotation angle step; must divide 180.
    pub rot_angle_step: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        OrbitSpec {
            group: GroupKind::Rotation2d,
            rotation_step: 10.0,
            shift_extent: 64,
            shift_stride: 8,
            axis_step: 30.0,
            rot_angle_step: 30.0,
        }
    }
}

fn divides(step: f64, whole: f64) -> bool {
    let n = (whole / step).round();
    n >= 1.0 && (n * step - whole).abs() < 1e-9
}

impl OrbitSpec {
    pub fn new(group: GroupKind) -> Self {
        OrbitSpec {
            group,
            ..OrbitSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        let bad = |msg: String| Err(GroupError::InvalidSpec(msg));
        match self.group {
            GroupKind::Rotation2d => {
                if !(self.rotation_step > 0.0) || !divides(self.rotation_step, 360.0) {
                    return bad(format!(
                        "rotation_step {} must be positive and divide 360",
                        self.rotation_step
                    ));
                }
            }
            GroupKind::Translation2d => {
                if self.shift_extent <= 0 || self.shift_stride <= 0 {
                    return bad("shift_extent and shift_stride must be positive".into());
                }
                if self.shift_extent % self.shift_stride != 0 {
                    return bad(format!(
                        "shift_stride {} must divide shift_extent {}",
                        self.shift_stride, self.shift_extent
                    ));
                }
            }
            GroupKind::SquareSym => {}
            GroupKind::AxisAngle3d => {
                if !(self.axis_step > 0.0) || !divides(self.axis_step, 360.0) {
                    return bad(format!(
                        "axis_step {} must be positive and divide 360",
                        self.axis_step
                    ));
                }
                if !(self.rot_angle_step > 0.0) || !divides(self.rot_angle_step, 180.0) {
                    return bad(format!(
                        "rot_angle_step {} must be positive and divide 180",
                        self.rot_angle_step
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Unit circle, `(cos θ, sin θ)`.
    Polar,
    /// Shift grid, `(tx, ty)`.
    CartesianGrid,
    /// 4×4 cells: column = quarter turns, row = `2·reflect + time_reverse`.
    CellGrid,
    /// Three polar panels (XY, XZ, YZ) side by side; radius = rotation angle.
    TriplePolar,
}

/// Horizontal distance between the centers of adjacent triple-polar panels.
pub const PANEL_SPACING: f64 = 400.0;

/// An ordered, laid-out discretized orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub kind: GroupKind,
    pub layout_kind: LayoutKind,
    pub elements: Vec<GroupElement>,
    pub coords: Vec<[f64; 2]>,
    /// Slicing plane per element (AxisAngle3D only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panels: Option<Vec<SlicePlane>>,
    pub identity_index: usize,
}

impl Orbit {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Layout distance from the identity. For triple-polar layouts this is the
    /// distance from the element's panel center, i.e. its rotation angle.
    pub fn radius(&self, index: usize) -> f64 {
        let c = self.coords[index];
        let origin = match self.layout_kind {
            LayoutKind::TriplePolar => {
                let p = self.panels.as_ref().map(|p| p[index].index()).unwrap_or(0);
                [p as f64 * PANEL_SPACING, 0.0]
            }
            _ => self.coords[self.identity_index],
        };
        ((c[0] - origin[0]).powi(2) + (c[1] - origin[1]).powi(2)).sqrt()
    }

    pub fn max_radius(&self) -> f64 {
        (0..self.len()).map(|i| self.radius(i)).fold(0.0, f64::max)
    }

    /// Index of the element whose layout coordinate is nearest to `point`.
    pub fn nearest(&self, point: [f64; 2]) -> Option<usize> {
        self.coords
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (c[0] - point[0]).powi(2) + (c[1] - point[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

/// Enumerates the discretized orbit for `spec`.
///
/// Ordering: ascending angle for `Rotation2D`; row-major (`ty` outer, `tx`
/// inner, ascending) for `Translation2D`; row-major over the cell grid for
/// `SquareSym`; plane-major, then axis angle, then rotation angle for
/// `AxisAngle3D`, with the identity listed once at the start and the
/// duplicate half-turns `(a, 180)` / `(a + 180, 180)` listed once per plane.
pub fn enumerate_orbit(spec: &OrbitSpec) -> Result<Orbit, GroupError> {
    spec.validate()?;
    let mut elements = Vec::new();
    let mut coords = Vec::new();
    let mut panels = None;
    let layout_kind = match spec.group {
        GroupKind::Rotation2d => {
            let n = (360.0 / spec.rotation_step).round() as usize;
            for i in 0..n {
                let angle = i as f64 * spec.rotation_step;
                let (c, s) = cos_sin_deg(angle);
                elements.push(GroupElement::rotation(angle));
                coords.push([c, s]);
            }
            LayoutKind::Polar
        }
        GroupKind::Translation2d => {
            let (e, s) = (spec.shift_extent, spec.shift_stride);
            let steps: Vec<i32> = (-e..=e).step_by(s as usize).collect();
            for &ty in &steps {
                for &tx in &steps {
                    elements.push(GroupElement::translation(tx, ty));
                    coords.push([f64::from(tx), f64::from(ty)]);
                }
            }
            LayoutKind::CartesianGrid
        }
        GroupKind::SquareSym => {
            for row in 0..4 {
                for col in 0..4 {
                    elements.push(GroupElement::square(col, row >= 2, row % 2 == 1));
                    coords.push([f64::from(col), f64::from(row)]);
                }
            }
            LayoutKind::CellGrid
        }
        GroupKind::AxisAngle3d => {
            let mut plane_of = Vec::new();
            elements.push(GroupElement::identity(GroupKind::AxisAngle3d));
            coords.push([0.0, 0.0]);
            plane_of.push(SlicePlane::XY);
            let n_axis = (360.0 / spec.axis_step).round() as usize;
            let n_rot = (180.0 / spec.rot_angle_step).round() as usize;
            for plane in SlicePlane::ALL {
                let cx = plane.index() as f64 * PANEL_SPACING;
                for ia in 0..n_axis {
                    let axis_angle = ia as f64 * spec.axis_step;
                    for ir in 1..=n_rot {
                        let rot = ir as f64 * spec.rot_angle_step;
                        if rot == 180.0 && axis_angle >= 180.0 {
                            continue;
                        }
                        let (c, s) = cos_sin_deg(axis_angle);
                        elements.push(GroupElement::axis_angle(plane, axis_angle, rot));
                        coords.push([cx + rot * c, rot * s]);
                        plane_of.push(plane);
                    }
                }
            }
            panels = Some(plane_of);
            LayoutKind::TriplePolar
        }
    };
    let identity = GroupElement::identity(spec.group);
    let identity_index = elements
        .iter()
        .position(|g| *g == identity)
        .expect("every orbit enumeration includes the identity");
    Ok(Orbit {
        kind: spec.group,
        layout_kind,
        elements,
        coords,
        panels,
        identity_index,
    })
}
