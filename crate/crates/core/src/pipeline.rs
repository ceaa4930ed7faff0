//! Per-frame dispatch: one extractor pass, one situation verdict, then at
//! most one detection head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{BoxTarget, GridSpec, MetaOutput, Situation};
use crate::model::Models;
use crate::tensor::{self, Tensor};

/// Every stage carries the architecture fingerprint it was built for so a
/// pipeline can refuse to mix models.
pub trait FeatureSource {
    fn fingerprint(&self) -> [u8; 32];
    fn extract(&self, image: &Tensor) -> Result<Tensor>;
}

pub trait SituationClassifier {
    fn fingerprint(&self) -> [u8; 32];
    fn classify(&self, features: &Tensor) -> Result<MetaOutput>;
}

pub trait CellScorer {
    fn fingerprint(&self) -> [u8; 32];
    fn grid(&self) -> GridSpec;
    /// Logits over grid cells.
    fn scores(&self, features: &Tensor) -> Result<Vec<f64>>;
}

pub trait BoxRegressor {
    fn fingerprint(&self) -> [u8; 32];
    fn regress(&self, features: &Tensor) -> Result<BoxTarget>;
}

impl FeatureSource for Models {
    fn fingerprint(&self) -> [u8; 32] {
        *self.bundle.fingerprint()
    }
    fn extract(&self, image: &Tensor) -> Result<Tensor> {
        self.features(image)
    }
}

impl SituationClassifier for Models {
    fn fingerprint(&self) -> [u8; 32] {
        *self.bundle.fingerprint()
    }
    fn classify(&self, features: &Tensor) -> Result<MetaOutput> {
        self.meta(features)
    }
}

impl CellScorer for Models {
    fn fingerprint(&self) -> [u8; 32] {
        *self.bundle.fingerprint()
    }
    fn grid(&self) -> GridSpec {
        *self.arch.rough.grid()
    }
    fn scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.rough_scores(features)
    }
}

impl BoxRegressor for Models {
    fn fingerprint(&self) -> [u8; 32] {
        *self.bundle.fingerprint()
    }
    fn regress(&self, features: &Tensor) -> Result<BoxTarget> {
        self.fine_box(features)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionResult {
    Nothing,
    RoughCell { index: usize, center: (f64, f64) },
    FineBox { bbox: BoxTarget },
}

impl DetectionResult {
    pub fn situation(&self) -> Situation {
        match self {
            DetectionResult::Nothing => Situation::NoObject,
            DetectionResult::RoughCell { .. } => Situation::FarObjects,
            DetectionResult::FineBox { .. } => Situation::CloseObject,
        }
    }

    /// Normalized image point the robot should aim at.
    pub fn target_point(&self) -> Option<(f64, f64)> {
        match *self {
            DetectionResult::Nothing => None,
            DetectionResult::RoughCell { center, .. } => Some(center),
            DetectionResult::FineBox { bbox } => Some((bbox.x, bbox.y)),
        }
    }
}

/// Accumulated wall-clock seconds per stage over `frames` frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub extract_s: f64,
    pub meta_s: f64,
    pub head_s: f64,
    /// TT: total time over all frames.
    pub total_s: f64,
}

impl TimingReport {
    pub fn add(&mut self, other: &TimingReport) {
        self.frames += other.frames;
        self.extract_s += other.extract_s;
        self.meta_s += other.meta_s;
        self.head_s += other.head_s;
        self.total_s += other.total_s;
    }

    /// `TT / NF`.
    pub fn cpu_time(&self) -> f64 {
        self.total_s / self.frames.max(1) as f64
    }

    pub fn mean_extract(&self) -> f64 {
        self.extract_s / self.frames.max(1) as f64
    }

    pub fn mean_meta(&self) -> f64 {
        self.meta_s / self.frames.max(1) as f64
    }

    pub fn mean_head(&self) -> f64 {
        self.head_s / self.frames.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub extract: usize,
    pub meta: usize,
    pub rough: usize,
    pub fine: usize,
}

pub struct Pipeline<'a> {
    extractor: &'a dyn FeatureSource,
    meta: &'a dyn SituationClassifier,
    rough: &'a dyn CellScorer,
    fine: &'a dyn BoxRegressor,
    grid: GridSpec,
    calls: CallCounts,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        extractor: &'a dyn FeatureSource,
        meta: &'a dyn SituationClassifier,
        rough: &'a dyn CellScorer,
        fine: &'a dyn BoxRegressor,
    ) -> Result<Self> {
        let fp = extractor.fingerprint();
        for (name, other) in [
            ("meta", meta.fingerprint()),
            ("rough", rough.fingerprint()),
            ("fine", fine.fingerprint()),
        ] {
            if other != fp {
                return Err(crate::checkpoint::CheckpointError::FingerprintMismatch {
                    expected: crate::checkpoint::hex(&fp),
                    found: format!("{} ({name} head)", crate::checkpoint::hex(&other)),
                }
                .into());
            }
        }
        Ok(Self {
            extractor,
            meta,
            rough,
            fine,
            grid: rough.grid(),
            calls: CallCounts::default(),
        })
    }

    pub fn from_models(models: &'a Models) -> Self {
        Self::new(models, models, models, models).expect("one bundle has one fingerprint")
    }

    pub fn calls(&self) -> CallCounts {
        self.calls
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    fn extract(&mut self, image: &Tensor) -> Result<Tensor> {
        self.calls.extract += 1;
        self.extractor.extract(image)
    }

    fn classify(&mut self, features: &Tensor) -> Result<MetaOutput> {
        self.calls.meta += 1;
        self.meta.classify(features)
    }

    fn head(&mut self, verdict: Situation, features: &Tensor) -> Result<DetectionResult> {
        match verdict {
            Situation::NoObject => Ok(DetectionResult::Nothing),
            Situation::FarObjects => {
                self.calls.rough += 1;
                let scores = self.rough.scores(features)?;
                if scores.len() != self.grid.cells() {
                    return Err(Error::shape("rough_forward", &[scores.len()], &[self.grid.cells()]));
                }
                let index = tensor::argmax(&scores);
                Ok(DetectionResult::RoughCell {
                    index,
                    center: self.grid.cell_center(index)?,
                })
            }
            Situation::CloseObject => {
                self.calls.fine += 1;
                Ok(DetectionResult::FineBox {
                    bbox: self.fine.regress(features)?,
                })
            }
        }
    }

    pub fn process_frame(&mut self, image: &Tensor) -> Result<(DetectionResult, TimingReport)> {
        let t0 = Instant::now();
        let features = self.extract(image)?;
        let t1 = Instant::now();
        let verdict = self.classify(&features)?.verdict();
        let t2 = Instant::now();
        let result = self.head(verdict, &features)?;
        let t3 = Instant::now();
        Ok((
            result,
            TimingReport {
                frames: 1,
                extract_s: (t1 - t0).as_secs_f64(),
                meta_s: (t2 - t1).as_secs_f64(),
                head_s: (t3 - t2).as_secs_f64(),
                total_s: (t3 - t0).as_secs_f64(),
            },
        ))
    }

    pub fn run_sequence(&mut self, frames: &[Tensor]) -> Result<(Vec<DetectionResult>, TimingReport)> {
        if frames.is_empty() {
            return Err(Error::invalid("run_sequence needs at least one frame"));
        }
        let mut total = TimingReport::default();
        let mut results = Vec::with_capacity(frames.len());
        for f in frames {
            let (r, t) = self.process_frame(f)?;
            total.add(&t);
            results.push(r);
        }
        Ok((results, total))
    }

    /// Times the shared pipeline against a decomposition in which the meta
    /// classifier and the selected head each run their own extractor pass,
    /// and against the head path without the meta stage.
    pub fn amortization_probe(&mut self, image: &Tensor, trials: usize) -> Result<AmortizationReport> {
        if trials < 30 {
            return Err(Error::invalid(format!("amortization probe needs at least 30 trials, got {trials}")));
        }
        let mut s = StageSamples::default();
        let mut verdict = Situation::NoObject;
        for _ in 0..trials {
            let (r, t) = self.process_frame(image)?;
            verdict = r.situation();
            s.shared.push(t.total_s);
            s.extract.push(t.extract_s);
            s.meta.push(t.meta_s);
            s.head.push(t.head_s);

            let t0 = Instant::now();
            let f = self.extract(image)?;
            let v = self.classify(&f)?.verdict();
            let f = self.extract(image)?;
            self.head(v, &f)?;
            s.unshared.push(t0.elapsed().as_secs_f64());

            let t0 = Instant::now();
            let f = self.extract(image)?;
            self.head(verdict, &f)?;
            s.head_only.push(t0.elapsed().as_secs_f64());
        }
        let shared = median(&s.shared);
        let unshared = median(&s.unshared);
        let head_only = median(&s.head_only);
        let meta = median(&s.meta);
        Ok(AmortizationReport {
            trials,
            verdict,
            shared_s: shared,
            unshared_s: unshared,
            head_only_s: head_only,
            meta_overhead_s: shared - head_only,
            extract_s: median(&s.extract),
            meta_s: meta,
            head_s: median(&s.head),
            meta_fraction: meta / shared,
            unshared_ratio: unshared / shared,
            samples: s,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSamples {
    pub shared: Vec<f64>,
    pub unshared: Vec<f64>,
    pub head_only: Vec<f64>,
    pub extract: Vec<f64>,
    pub meta: Vec<f64>,
    pub head: Vec<f64>,
}

/// Medians in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmortizationReport {
    pub trials: usize,
    pub verdict: Situation,
    pub shared_s: f64,
    pub unshared_s: f64,
    pub head_only_s: f64,
    pub meta_overhead_s: f64,
    pub extract_s: f64,
    pub meta_s: f64,
    pub head_s: f64,
    pub meta_fraction: f64,
    pub unshared_ratio: f64,
    #[serde(skip)]
    pub samples: StageSamples,
}

impl AmortizationReport {
    /// `stage,median_s,p90_s` rows.
    pub fn to_csv(&self) -> String {
        let s = &self.samples;
        let mut out = String::from("stage,median_s,p90_s\n");
        for (name, v) in [
            ("extract", &s.extract),
            ("meta", &s.meta),
            ("head", &s.head),
            ("shared_total", &s.shared),
            ("unshared_total", &s.unshared),
            ("head_only_total", &s.head_only),
        ] {
            out.push_str(&format!("{name},{:.9},{:.9}\n", median(v), percentile(v, 0.9)));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile, `q` in `(0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
