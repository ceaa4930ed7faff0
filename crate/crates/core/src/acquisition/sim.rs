//! Closed-loop approach-and-grasp on a flat floor.
//!
//! Each step renders what the robot camera sees, sends a position request
//! over the in-process byte stream, and moves according to the answer:
//! rotate while nothing is visible, walk toward the rough cell, then center
//! the close-view box until it is large and centered enough to grasp.

use std::f64::consts::PI;
use std::time::Duration;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::acquisition::geometry::Calibration;
use crate::acquisition::protocol::{duplex, read_frame, write_frame, AcqFrame};
use crate::acquisition::responder::{CameraSource, Detector, FixedDetector, Responder};
use crate::error::{Error, Result};
use crate::heads::{BoxTarget, GridSpec, Situation};
use crate::model::Models;
use crate::pipeline::{DetectionResult, Pipeline};
use crate::scenegen::{apply_sensor, render, Background, BackgroundKind, Color, SceneObject, SceneSpec};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Searching,
    Approaching,
    Refining,
    Grasped,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Searching => "searching",
            Phase::Approaching => "approaching",
            Phase::Refining => "refining",
            Phase::Grasped => "grasped",
        }
    }

    fn next(self) -> Phase {
        match self {
            Phase::Searching => Phase::Approaching,
            Phase::Approaching => Phase::Refining,
            Phase::Refining | Phase::Grasped => Phase::Grasped,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Square box standing on the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub x: f64,
    pub y: f64,
    /// Half of the footprint side, meters.
    pub radius: f64,
    pub height: f64,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot: RobotPose,
    pub object: Option<WorldObject>,
    pub phase: Phase,
}

impl Default for WorldState {
    fn default() -> Self {
        Self::with_object(2.0, 1.0)
    }
}

impl WorldState {
    pub fn with_object(x: f64, y: f64) -> Self {
        Self {
            robot: RobotPose {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
            },
            object: Some(WorldObject {
                x,
                y,
                radius: 0.2,
                height: 0.4,
                color: Color::Red,
            }),
            phase: Phase::Searching,
        }
    }

    pub fn empty() -> Self {
        Self {
            object: None,
            ..Self::default()
        }
    }

    /// Object 1.5–3 m away at any bearing.
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let d = rng.random_range(1.5..3.0);
        let bearing = rng.random_range(-PI..PI);
        let mut w = Self::with_object(d * bearing.cos(), d * bearing.sin());
        if let Some(o) = w.object.as_mut() {
            o.color = Color::ALL[rng.random_range(0..Color::ALL.len())];
        }
        w
    }

    /// Gap between robot center and the object footprint.
    pub fn distance(&self) -> Option<f64> {
        self.object.map(|o| {
            let dx = (self.robot.x - o.x).abs() - o.radius;
            let dy = (self.robot.y - o.y).abs() - o.radius;
            dx.max(0.0).hypot(dy.max(0.0))
        })
    }

    fn to_robot(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.robot.heading.sin_cos();
        let (dx, dy) = (x - self.robot.x, y - self.robot.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Clipped normalized bounding box of the object in the camera image.
    pub fn visible_box(&self, calib: &Calibration) -> Option<BoxTarget> {
        let o = self.object?;
        let (w, h) = (calib.image_width as f64, calib.image_height as f64);
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (sx, sy, z) in [
            (-1.0, -1.0, 0.0),
            (-1.0, 1.0, 0.0),
            (1.0, -1.0, 0.0),
            (1.0, 1.0, 0.0),
            (-1.0, -1.0, o.height),
            (-1.0, 1.0, o.height),
            (1.0, -1.0, o.height),
            (1.0, 1.0, o.height),
        ] {
            let (rx, ry) = self.to_robot(o.x + sx * o.radius, o.y + sy * o.radius);
            let (u, v) = calib.project([rx, ry, z])?;
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
        let (x0, y0) = (lo.0.clamp(0.0, w) / w, lo.1.clamp(0.0, h) / h);
        let (x1, y1) = (hi.0.clamp(0.0, w) / w, hi.1.clamp(0.0, h) / h);
        let min_side = 0.5 / w.max(h);
        if x1 - x0 < min_side || y1 - y0 < min_side {
            return None;
        }
        Some(BoxTarget {
            x: (x0 + x1) / 2.0,
            y: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub step_length: f64,
    pub turn_rate: f64,
    /// Maximum distance of the box center from the image center for a grasp.
    pub grasp_center_tolerance: f64,
    pub grasp_min_area: f64,
    /// Visible area from which the ground-truth detector calls a view close.
    pub oracle_close_area: f64,
    pub noise_sigma: f64,
    pub grid: GridSpec,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step_length: 0.05,
            turn_rate: 0.2,
            grasp_center_tolerance: 0.1,
            grasp_min_area: 0.25,
            oracle_close_area: 0.13,
            noise_sigma: 0.02,
            grid: GridSpec::default(),
            max_steps: 200,
            seed: 1,
        }
    }
}

/// Ground-truth detection for the current view.
pub fn oracle_detection(bbox: Option<BoxTarget>, config: &SimConfig) -> Result<DetectionResult> {
    let Some(b) = bbox else {
        return Ok(DetectionResult::Nothing);
    };
    if b.w * b.h >= config.oracle_close_area {
        return Ok(DetectionResult::FineBox { bbox: b });
    }
    let index = config.grid.cell_index(b.x, b.y)?;
    Ok(DetectionResult::RoughCell {
        index,
        center: config.grid.cell_center(index)?,
    })
}

/// Camera that yields one pre-rendered frame per opening.
struct ViewCamera {
    frame: Option<Tensor>,
    open: bool,
}

impl CameraSource for ViewCamera {
    fn open(&mut self) -> Result<()> {
        self.open = true;
        Ok(())
    }

    fn poll(&mut self, _timeout: Duration) -> Result<Option<Tensor>> {
        Ok(if self.open { self.frame.take() } else { None })
    }

    fn close(&mut self) {
        self.open = false;
    }
}

pub enum DetectorMode<'a> {
    Oracle,
    Models(&'a Models),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub robot: RobotPose,
    pub verdict: Situation,
    pub result: Option<DetectionResult>,
    /// Robot-frame position from the response frame, meters.
    pub response: Option<(f64, f64)>,
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub steps: usize,
    pub final_phase: Phase,
    pub final_distance: Option<f64>,
    pub final_robot: RobotPose,
    #[serde(skip)]
    pub trajectory: Vec<StepRecord>,
}

impl SimOutcome {
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from(
            "step,phase,robot_x,robot_y,heading,verdict,result,cell,x,y,w,h,response_x,response_y,distance\n",
        );
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.trajectory {
            let (kind, cell, b) = match r.result {
                None => ("none", None, None),
                Some(DetectionResult::Nothing) => ("nothing", None, None),
                Some(DetectionResult::RoughCell { index, center }) => (
                    "rough_cell",
                    Some(index),
                    Some([center.0, center.1, f64::NAN, f64::NAN]),
                ),
                Some(DetectionResult::FineBox { bbox }) => ("fine_box", None, Some(bbox.as_array())),
            };
            let b = b.unwrap_or([f64::NAN; 4]).map(|v| (!v.is_nan()).then_some(v));
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.phase.name(),
                r.robot.x,
                r.robot.y,
                r.robot.heading,
                r.verdict.name(),
                kind,
                cell.map(|c| c.to_string()).unwrap_or_default(),
                opt(b[0]),
                opt(b[1]),
                opt(b[2]),
                opt(b[3]),
                opt(r.response.map(|p| p.0)),
                opt(r.response.map(|p| p.1)),
                opt(r.distance),
            ));
        }
        out
    }
}

fn floor_background(seed: u64) -> Background {
    let mut rng = Rng::seed_from_u64(seed ^ 0xf100_f100);
    let kind = BackgroundKind::TEXTURED[rng.random_range(0..BackgroundKind::TEXTURED.len())];
    Background::random(kind, &mut rng)
}

/// Rendered camera frame for the current pose.
pub fn render_view(
    world: &WorldState,
    calib: &Calibration,
    background: Background,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Option<BoxTarget>)> {
    let bbox = world.visible_box(calib);
    let objects = match (bbox, world.object) {
        (Some(b), Some(o)) => vec![SceneObject {
            bbox: b,
            color: o.color,
        }],
        _ => Vec::new(),
    };
    let spec = SceneSpec::new(background, objects, 0)?;
    let image = render(&spec, calib.image_width, calib.image_height);
    Ok((apply_sensor(&image, noise_sigma, rng)?, bbox))
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn move_toward(robot: &mut RobotPose, target: (f64, f64), config: &SimConfig) {
    let d = target.0.hypot(target.1);
    if d > 1e-12 {
        let s = config.step_length.min(d) / d;
        let (tx, ty) = (target.0 * s, target.1 * s);
        let (sn, cs) = robot.heading.sin_cos();
        robot.x += cs * tx - sn * ty;
        robot.y += sn * tx + cs * ty;
    }
    let bearing = target.1.atan2(target.0);
    if d > config.step_length {
        robot.heading = wrap_angle(robot.heading + bearing.clamp(-config.turn_rate, config.turn_rate));
    }
}

/// Runs until the grasp succeeds or `config.max_steps` steps have passed.
pub fn simulate_approach(
    mut world: WorldState,
    mode: DetectorMode<'_>,
    calib: &Calibration,
    config: &SimConfig,
) -> Result<SimOutcome> {
    calib.validate()?;
    if let DetectorMode::Models(m) = mode {
        if *m.arch.rough.grid() != config.grid {
            return Err(Error::Config("simulation grid differs from the rough head grid".into()));
        }
    }
    let mut rng = Rng::seed_from_u64(config.seed);
    let background = floor_background(config.seed);
    let mut pipeline = match mode {
        DetectorMode::Models(m) => Some(Pipeline::from_models(m)),
        DetectorMode::Oracle => None,
    };
    let (mut robot_end, mut host_end) = duplex();
    let mut responder = Responder::new(Duration::from_millis(100));
    let mut trajectory = Vec::new();
    let mut steps = 0;

    while world.phase != Phase::Grasped && steps < config.max_steps {
        steps += 1;
        let (image, bbox) = render_view(&world, calib, background, config.noise_sigma, &mut rng)?;
        let mut camera = ViewCamera {
            frame: Some(image),
            open: false,
        };

        write_frame(&mut robot_end, &AcqFrame::PositionRequest)?;
        let request = read_frame(&mut host_end)?;
        let mut oracle = FixedDetector(oracle_detection(bbox, config)?);
        let detector: &mut dyn Detector = match pipeline.as_mut() {
            Some(p) => p,
            None => &mut oracle,
        };
        let reply = responder.handle_request(&request, &mut camera, detector, calib);
        if !responder.buffer_is_empty() {
            return Err(Error::Invariant("frame buffer not cleared after a request".into()));
        }
        write_frame(&mut host_end, &reply)?;
        let reply = read_frame(&mut robot_end)?;

        let result = responder.last_result();
        let verdict = result.map_or(Situation::NoObject, |r| r.situation());
        let target = reply.meters();
        let advance = |phase: Phase, wanted: Phase| if wanted > phase { phase.next() } else { phase };

        match (verdict, target) {
            (Situation::NoObject, _) | (_, None) => {
                world.robot.heading = wrap_angle(world.robot.heading + config.turn_rate);
            }
            (Situation::FarObjects, Some(t)) => {
                world.phase = advance(world.phase, Phase::Approaching);
                move_toward(&mut world.robot, t, config);
            }
            (Situation::CloseObject, Some(t)) => {
                let before = world.phase;
                world.phase = advance(world.phase, Phase::Refining);
                let graspable = match result {
                    Some(DetectionResult::FineBox { bbox }) => {
                        (bbox.x - 0.5).hypot(bbox.y - 0.5) <= config.grasp_center_tolerance
                            && bbox.w * bbox.h >= config.grasp_min_area
                    }
                    _ => false,
                };
                if before == Phase::Refining && graspable {
                    world.phase = Phase::Grasped;
                } else {
                    move_toward(&mut world.robot, t, config);
                }
            }
        }
        trajectory.push(StepRecord {
            step: steps,
            phase: world.phase,
            robot: world.robot,
            verdict,
            result,
            response: target,
            distance: world.distance(),
        });
    }
    Ok(SimOutcome {
        steps,
        final_phase: world.phase,
        final_distance: world.distance(),
        final_robot: world.robot,
        trajectory,
    })
}
