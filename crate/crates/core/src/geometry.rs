//! Gaze angle and direction conventions.
//!
//! Angles are radians everywhere inside the crate. Pitch is positive
//! upward, yaw positive toward the subject's right (clockwise seen from
//! above). The 3D direction uses x lateral, y vertical, z forward.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deviation from unit length tolerated when constructing a [`GazeVector3`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeAngles {
    pub fn new(pitch: f64, yaw: f64) -> Result<Self> {
        if !pitch.is_finite() || !yaw.is_finite() {
            return Err(Error::Domain(format!(
                "gaze angles must be finite, got pitch={pitch}, yaw={yaw}"
            )));
        }
        Ok(Self { pitch, yaw })
    }

    pub fn from_degrees(pitch: f64, yaw: f64) -> Result<Self> {
        Self::new(pitch.to_radians(), yaw.to_radians())
    }

    /// Whether the angles lie in the canonical open/half-open label ranges.
    pub fn in_canonical_range(&self) -> bool {
        self.pitch > -FRAC_PI_2 && self.pitch < FRAC_PI_2 && self.yaw > -PI && self.yaw <= PI
    }

    /// Treats (yaw, pitch) as an image-plane point: x to the right, y up.
    pub fn as_plane_vector(&self) -> GazeVector2 {
        GazeVector2::new(self.yaw, self.pitch)
    }

    pub fn from_plane_vector(g: GazeVector2) -> Result<Self> {
        Self::new(g.y, g.x)
    }
}

/// Unit-length 3D gaze direction. Construction enforces the norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector3 {
    x: f64,
    y: f64,
    z: f64,
}

impl GazeVector3 {
    /// Accepts a vector whose norm is within [`UNIT_TOLERANCE`] of one and
    /// snaps it onto the unit sphere.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::contract(format!(
                "gaze vector ({x}, {y}, {z}) has norm {n}, expected 1"
            )));
        }
        Ok(Self::snap(x, y, z, n))
    }

    /// Normalizes any finite non-zero vector. Used for stored or predicted
    /// directions whose norm has drifted.
    pub fn normalized(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::contract(format!(
                "cannot normalize gaze vector ({x}, {y}, {z})"
            )));
        }
        Ok(Self::snap(x, y, z, n))
    }

    fn snap(x: f64, y: f64, z: f64, n: f64) -> Self {
        if (n - 1.0).abs() <= 1e-15 {
            Self { x, y, z }
        } else {
            Self {
                x: x / n,
                y: y / n,
                z: z / n,
            }
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// A raw (x, y) pair used for rotation and loss arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeVector2 {
    pub x: f64,
    pub y: f64,
}

impl GazeVector2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.x - other.x, self.y - other.y)
    }
}

pub fn angles_to_vector(a: GazeAngles) -> GazeVector3 {
    let (sp, cp) = a.pitch.sin_cos();
    let (sy, cy) = a.yaw.sin_cos();
    // cos²p(sin²y + cos²y) + sin²p is 1 up to rounding; re-snap to keep the
    // type invariant exact.
    let (x, y, z) = (cp * sy, sp, cp * cy);
    let n = (x * x + y * y + z * z).sqrt();
    GazeVector3::snap(x, y, z, n)
}

pub fn vector_to_angles(v: GazeVector3) -> GazeAngles {
    GazeAngles {
        pitch: v.y.clamp(-1.0, 1.0).asin(),
        yaw: v.x.atan2(v.z),
    }
}

/// Arc angle between two unit directions, in degrees, within [0, 180].
pub fn angular_error(v: &GazeVector3, v_hat: &GazeVector3) -> f64 {
    // atan2 form: exact 0 for identical inputs, no acos loss near 0° and 180°.
    let cx = v.y * v_hat.z - v.z * v_hat.y;
    let cy = v.z * v_hat.x - v.x * v_hat.z;
    let cz = v.x * v_hat.y - v.y * v_hat.x;
    (cx * cx + cy * cy + cz * cz).sqrt().atan2(v.dot(v_hat)).to_degrees()
}

/// Angular error between two angle pairs, going through the 3D conversion.
pub fn angular_error_angles(a: GazeAngles, b: GazeAngles) -> f64 {
    angular_error(&angles_to_vector(a), &angles_to_vector(b))
}

/// Applies R(theta) = [[cos, -sin], [sin, cos]].
pub fn rotate2d(g: GazeVector2, theta: f64) -> Result<GazeVector2> {
    if !theta.is_finite() || !g.x.is_finite() || !g.y.is_finite() {
        return Err(Error::Domain(format!(
            "rotation needs finite inputs, got g=({}, {}), theta={theta}",
            g.x, g.y
        )));
    }
    let (s, c) = theta.sin_cos();
    Ok(GazeVector2::new(c * g.x - s * g.y, s * g.x + c * g.y))
}
