//! Pinhole camera on the robot, looking down at a flat floor.
//!
//! Robot frame: `x` forward, `y` left, `z` up, origin on the floor under the
//! robot center. The camera sits at `(offset[0], offset[1], camera_height)`,
//! faces along `x` and is pitched down by `tilt`. Pixel `(0, 0)` is the top
//! left corner of the image; `u` grows to the right and `v` downwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    /// Meters above the floor.
    pub camera_height: f64,
    /// Pitch below horizontal, radians.
    pub tilt: f64,
    pub hfov: f64,
    pub vfov: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Camera position in the robot frame, meters.
    pub offset: [f64; 2],
}

impl Default for Calibration {
    /// Camera 0.5 m up, pitched 35°, placed behind the robot center so the
    /// optical axis meets the floor right under it.
    fn default() -> Self {
        let camera_height: f64 = 0.5;
        let tilt = 35f64.to_radians();
        Self {
            camera_height,
            tilt,
            hfov: 70f64.to_radians(),
            vfov: 70f64.to_radians(),
            image_width: 64,
            image_height: 64,
            offset: [-camera_height / tilt.tan(), 0.0],
        }
    }
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.camera_height > 0.0) {
            return Err(Error::Config("camera height must be positive".into()));
        }
        if !(self.tilt > 0.0 && self.tilt < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config("tilt must lie strictly between 0 and 90 degrees".into()));
        }
        for fov in [self.hfov, self.vfov] {
            if !(fov > 0.0 && fov < std::f64::consts::PI) {
                return Err(Error::Config("field of view must lie in (0, 180) degrees".into()));
            }
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }

    /// Optical axis, image-right and image-down directions.
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (s, c) = self.tilt.sin_cos();
        ([c, 0.0, -s], [0.0, -1.0, 0.0], [-s, 0.0, -c])
    }

    fn center(&self) -> Vec3 {
        [self.offset[0], self.offset[1], self.camera_height]
    }

    fn half(&self) -> (f64, f64) {
        (self.image_width as f64 / 2.0, self.image_height as f64 / 2.0)
    }

    /// Floor point `(X, Y)` seen at pixel `(u, v)`.
    pub fn pixel_to_robot(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        let (f, r, d) = self.basis();
        let (hw, hh) = self.half();
        let a = (u - hw) / hw * (self.hfov / 2.0).tan();
        let b = (v - hh) / hh * (self.vfov / 2.0).tan();
        let ray = [0, 1, 2].map(|i| f[i] + a * r[i] + b * d[i]);
        if !(ray[2] < -1e-12) {
            return Err(Error::invalid(format!(
                "pixel ({u}, {v}) has no ground intersection (at or above the horizon)"
            )));
        }
        let c = self.center();
        let t = -c[2] / ray[2];
        Ok((c[0] + t * ray[0], c[1] + t * ray[1]))
    }

    /// Pixel coordinates of a robot-frame point, or `None` when the point is
    /// behind the camera. Points outside the field of view project outside
    /// `[0, W] × [0, H]`.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let (f, r, d) = self.basis();
        let c = self.center();
        let rel = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let depth = dot(rel, f);
        if depth <= 1e-9 {
            return None;
        }
        let (hw, hh) = self.half();
        let a = dot(rel, r) / depth;
        let b = dot(rel, d) / depth;
        Some((
            hw + a / (self.hfov / 2.0).tan() * hw,
            hh + b / (self.vfov / 2.0).tan() * hh,
        ))
    }

    /// Whether a pixel lies inside the image.
    pub fn in_view(&self, (u, v): (f64, f64)) -> bool {
        (0.0..=self.image_width as f64).contains(&u) && (0.0..=self.image_height as f64).contains(&v)
    }
}
