//! Vision-host side of the position request: open the camera, wait for a
//! frame in the buffer, detect, convert to robot coordinates, answer, and
//! always close the camera and clear the buffer afterwards.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use crate::acquisition::geometry::Calibration;
use crate::acquisition::protocol::{code, read_frame, write_frame, AcqFrame, FrameError};
use crate::error::{Error, Result};
use crate::pipeline::{DetectionResult, Pipeline};
use crate::tensor::Tensor;

pub trait CameraSource {
    fn open(&mut self) -> Result<()>;
    /// Waits up to `timeout` for the next frame.
    fn poll(&mut self, timeout: Duration) -> Result<Option<Tensor>>;
    fn close(&mut self);
}

pub trait Detector {
    fn detect(&mut self, image: &Tensor) -> Result<DetectionResult>;
}

impl Detector for Pipeline<'_> {
    fn detect(&mut self, image: &Tensor) -> Result<DetectionResult> {
        Ok(self.process_frame(image)?.0)
    }
}

/// Reports a fixed result regardless of the image.
pub struct FixedDetector(pub DetectionResult);

impl Detector for FixedDetector {
    fn detect(&mut self, _image: &Tensor) -> Result<DetectionResult> {
        Ok(self.0)
    }
}

/// Hands out queued frames while open; yields nothing once the queue is
/// empty.
#[derive(Default)]
pub struct QueueCamera {
    frames: std::collections::VecDeque<Tensor>,
    open: bool,
    pub opened: usize,
    pub closed: usize,
}

impl QueueCamera {
    pub fn new(frames: impl IntoIterator<Item = Tensor>) -> Self {
        Self {
            frames: frames.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }
}

impl CameraSource for QueueCamera {
    fn open(&mut self) -> Result<()> {
        self.open = true;
        self.opened += 1;
        Ok(())
    }

    fn poll(&mut self, _timeout: Duration) -> Result<Option<Tensor>> {
        if !self.open {
            return Err(Error::invalid("camera polled while closed"));
        }
        Ok(self.frames.pop_front())
    }

    fn close(&mut self) {
        self.open = false;
        self.closed += 1;
    }
}

/// Single-slot staging area for the frame being processed.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    slot: Option<Tensor>,
}

impl FrameBuffer {
    pub fn store(&mut self, frame: Tensor) {
        self.slot = Some(frame);
    }

    pub fn frame(&self) -> Option<&Tensor> {
        self.slot.as_ref()
    }

    pub fn clear(&mut self) {
        self.slot = None;
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_none()
    }
}

pub struct Responder {
    buffer: FrameBuffer,
    timeout: Duration,
    last: Option<DetectionResult>,
}

impl Responder {
    pub fn new(timeout: Duration) -> Self {
        Self {
            buffer: FrameBuffer::default(),
            timeout,
            last: None,
        }
    }

    pub fn buffer_is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Detection behind the most recent answer, if detection ran.
    pub fn last_result(&self) -> Option<DetectionResult> {
        self.last
    }

    pub fn handle_request(
        &mut self,
        request: &AcqFrame,
        camera: &mut dyn CameraSource,
        detector: &mut dyn Detector,
        calib: &Calibration,
    ) -> AcqFrame {
        self.last = None;
        if *request != AcqFrame::PositionRequest {
            return AcqFrame::Error(code::BAD_REQUEST);
        }
        let answer = self.serve(camera, detector, calib);
        camera.close();
        self.buffer.clear();
        answer.unwrap_or_else(AcqFrame::Error)
    }

    fn serve(
        &mut self,
        camera: &mut dyn CameraSource,
        detector: &mut dyn Detector,
        calib: &Calibration,
    ) -> std::result::Result<AcqFrame, u8> {
        camera.open().map_err(|_| code::CAMERA_TIMEOUT)?;
        let deadline = Instant::now() + self.timeout;
        while self.buffer.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                return Err(code::CAMERA_TIMEOUT);
            }
            match camera.poll(deadline - now).map_err(|_| code::CAMERA_TIMEOUT)? {
                Some(frame) => self.buffer.store(frame),
                None => std::thread::sleep(Duration::from_millis(1).min(deadline - now)),
            }
        }
        let image = self.buffer.frame().expect("stored above");
        let result = detector.detect(image).map_err(|_| code::DETECTION_FAILED)?;
        self.last = Some(result);
        let Some((x, y)) = result.target_point() else {
            return Ok(AcqFrame::NoObject);
        };
        let u = x * calib.image_width as f64;
        let v = y * calib.image_height as f64;
        let (rx, ry) = calib
            .pixel_to_robot(u, v)
            .map_err(|_| code::NO_GROUND_INTERSECTION)?;
        AcqFrame::position(rx, ry).map_err(|_| code::NO_GROUND_INTERSECTION)
    }

    /// Answers requests arriving on `stream` until the peer closes it.
    /// Returns the number of requests served.
    pub fn serve_stream<S: Read + Write>(
        &mut self,
        stream: &mut S,
        camera: &mut dyn CameraSource,
        detector: &mut dyn Detector,
        calib: &Calibration,
    ) -> Result<usize> {
        let mut served = 0;
        loop {
            let reply = match read_frame(stream) {
                Ok(req) => self.handle_request(&req, camera, detector, calib),
                Err(Error::Frame(FrameError::Truncated { got: 0, .. })) => return Ok(served),
                Err(Error::Frame(FrameError::Truncated { .. })) | Err(Error::Io(_)) => return Ok(served),
                Err(Error::Frame(_)) => AcqFrame::Error(code::BAD_REQUEST),
                Err(e) => return Err(e),
            };
            write_frame(stream, &reply)?;
            served += 1;
        }
    }
}
