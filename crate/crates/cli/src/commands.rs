use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use maod_core::acquisition::geometry::Calibration;
use maod_core::acquisition::responder::{CameraSource, Detector, FixedDetector, Responder};
use maod_core::acquisition::sim::{oracle_detection, render_view, simulate_approach, DetectorMode, SimConfig, WorldState};
use maod_core::backbone::{proxy_pretrain, ModelBundle, ProxyReport, EXTRACTOR_PREFIX};
use maod_core::checkpoint::{hex, load_expecting, save_checkpoint};
use maod_core::heads::{GridSpec, Situation};
use maod_core::metrics::{self, ConfusionMatrix, FineEvaluation, Metrics};
use maod_core::model::{Architecture, Models};
use maod_core::pipeline::{Pipeline, TimingReport};
use maod_core::scenegen::{gen_dataset, gen_proxy_dataset, gen_sample, sample_seed, Background, BackgroundKind, Dataset, SceneSample};
use maod_core::tensor::Tensor;
use maod_core::train::{evaluate_fine_head, evaluate_meta_head, evaluate_rough_head, featurize, train_head, HeadKind, TrainReport};
use maod_core::Rng;
use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, HeadArg, Usage, WorldArg};

const COMPONENTS: [&str; 4] = ["extractor", "meta", "rough", "fine"];

pub fn run(command: &Command, seed: u64, config: &RunConfig, out: &Path) -> Result<()> {
    match command {
        Command::Gen { counts } => gen(*counts, seed, config, out),
        Command::Train { data, head, extractor } => train(data, *head, extractor.as_deref(), seed, config, out),
        Command::Eval { data, models, oracle } => eval(data, models.as_deref(), *oracle, config, out),
        Command::Bench {
            models,
            data,
            frames,
            trials,
        } => bench(models, data.as_deref(), *frames, *trials, seed, config, out),
        Command::Sim { models, world, .. } => sim(models.as_deref(), *world, seed, config, out),
        Command::Serve { port, models, world, .. } => serve(*port, models.as_deref(), *world, seed, config, out),
        Command::Rerun { .. } => Err(Usage("rerun cannot be nested".into()).into()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading data set {}", dir.display()))
}

pub fn load_models(dir: &Path, config: &RunConfig) -> Result<Models> {
    let arch = Architecture::new(config.system.clone())?;
    let mut bundle = ModelBundle::new(*arch.fingerprint());
    for name in COMPONENTS {
        let path = dir.join(format!("{name}.ckpt"));
        let part = load_expecting(&path, arch.fingerprint()).with_context(|| format!("loading {}", path.display()))?;
        bundle.merge(part)?;
    }
    Ok(Models::new(arch, bundle)?)
}

fn gen(counts: [usize; 3], seed: u64, config: &RunConfig, out: &Path) -> Result<()> {
    let ds = gen_dataset(counts, seed, &config.scene)?;
    ds.write(out)?;
    say!(
        "generated {} train / {} test frames (none, far, close: {:?} / {:?})",
        ds.train.len(),
        ds.test.len(),
        ds.manifest.train_counts,
        ds.manifest.test_counts
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    proxy: Option<ProxyReport>,
    extractor_checksum_before: String,
    extractor_checksum_after: String,
    heads: Vec<TrainReport>,
}

fn train(data: &Path, head: HeadArg, extractor: Option<&Path>, seed: u64, config: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let arch = Architecture::new(config.system.clone())?;
    let mut rng = Rng::seed_from_u64(seed);
    let (mut bundle, proxy) = match extractor {
        Some(path) => {
            let b = load_expecting(path, arch.fingerprint()).with_context(|| format!("loading {}", path.display()))?;
            (b.subset(EXTRACTOR_PREFIX), None)
        }
        None => {
            let mut b = arch.init_extractor(&mut rng);
            let (train, held_out) = gen_proxy_dataset(config.proxy.samples, seed, &config.scene)?;
            let report = proxy_pretrain(&arch.extractor, &mut b, &train, &held_out, &config.proxy.config(), &mut rng)?;
            say!(
                "proxy pretraining: held-out accuracy {:.3} -> {:.3}",
                report.initial_accuracy, report.final_accuracy
            );
            (b, Some(report))
        }
    };
    bundle.freeze(EXTRACTOR_PREFIX)?;
    let before = bundle.checksum(EXTRACTOR_PREFIX);
    arch.init_heads(&mut bundle, &mut rng);
    let examples = featurize(&arch, &bundle, ds.train.iter().map(|s| (&s.image, s.situation, &s.boxes[..])))?;

    let kinds: Vec<HeadKind> = match head {
        HeadArg::All => HeadKind::ALL.to_vec(),
        HeadArg::Meta => vec![HeadKind::Meta],
        HeadArg::Rough => vec![HeadKind::Rough],
        HeadArg::Fine => vec![HeadKind::Fine],
    };
    let mut reports = Vec::new();
    for kind in kinds {
        let report = train_head(kind, &arch, &mut bundle, &examples, &config.train.resolve(kind, seed))?;
        say!(
            "{} head: {} samples, loss {:.4} -> {:.4}",
            kind.name(),
            report.samples,
            report.initial_loss,
            report.epoch_losses.last().copied().unwrap_or(report.initial_loss)
        );
        write_text(&out.join(format!("loss_{}.csv", kind.name())), &report.loss_csv())?;
        save_checkpoint(&bundle.subset(kind.prefix()), &out.join(format!("{}.ckpt", kind.name())))?;
        reports.push(report);
    }
    let after = bundle.checksum(EXTRACTOR_PREFIX);
    save_checkpoint(&bundle.subset(EXTRACTOR_PREFIX), &out.join("extractor.ckpt"))?;
    write_json(
        &out.join("train_report.json"),
        &TrainSummary {
            proxy,
            extractor_checksum_before: hex(&before),
            extractor_checksum_after: hex(&after),
            heads: reports,
        },
    )?;
    if before != after {
        anyhow::bail!(maod_core::Error::Invariant("frozen extractor changed during head training".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct MetaSummary {
    accuracy: f64,
    confusion: [[usize; 3]; 3],
    row_sums: [usize; 3],
    errors: usize,
    none_vs_object_errors: usize,
    far_vs_close_errors: usize,
}

impl From<&ConfusionMatrix> for MetaSummary {
    fn from(m: &ConfusionMatrix) -> Self {
        Self {
            accuracy: m.accuracy(),
            confusion: m.counts,
            row_sums: m.row_sums(),
            errors: m.errors(),
            none_vs_object_errors: m.none_vs_object_errors(),
            far_vs_close_errors: m.far_vs_close_errors(),
        }
    }
}

#[derive(Serialize)]
struct RoughSummary {
    threshold: f64,
    metrics: Metrics,
    /// Same scoring applied to the training targets themselves: the best a
    /// perfectly calibrated model can do at this threshold.
    calibrated_bound: Metrics,
}

#[derive(Serialize)]
struct FineSummary {
    iou_threshold: f64,
    metrics: Metrics,
    mean_iou: f64,
}

impl FineSummary {
    fn new(iou_threshold: f64, e: FineEvaluation) -> Self {
        Self {
            iou_threshold,
            metrics: e.metrics,
            mean_iou: e.mean_iou,
        }
    }
}

#[derive(Serialize)]
struct EvalSummary {
    oracle: bool,
    test_counts: [usize; 3],
    meta: MetaSummary,
    rough: Option<RoughSummary>,
    fine: Option<FineSummary>,
}

fn centers(s: &SceneSample) -> Vec<(f64, f64)> {
    s.boxes.iter().map(|b| (b.x, b.y)).collect()
}

/// Scores per-frame cell probabilities produced by `probs` over the far test frames.
fn score_far(
    test: &[SceneSample],
    grid: &GridSpec,
    threshold: f64,
    probs: impl Fn(&SceneSample) -> Result<Vec<f64>>,
) -> Result<Option<Metrics>> {
    let frames = test
        .iter()
        .filter(|s| s.situation == Situation::FarObjects)
        .map(|s| Ok((probs(s)?, centers(s))))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Ok(None);
    }
    Ok(Some(metrics::evaluate_rough(
        frames.iter().map(|(p, c)| (&p[..], &c[..])),
        grid,
        threshold,
    )?))
}

fn eval(data: &Path, models: Option<&Path>, oracle: bool, config: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let test = &ds.test;
    if test.is_empty() {
        anyhow::bail!(maod_core::Error::InvalidArgument("the data set has no test frames".into()));
    }
    let grid = config.system.heads.grid;
    let (rt, it) = (config.eval.rough_threshold, config.eval.iou_threshold);
    let has = |s: Situation| test.iter().any(|x| x.situation == s);
    let bound = score_far(test, &grid, rt, |s| {
        s.grid_targets(&grid)
            .ok_or_else(|| anyhow::anyhow!("far frame {} has no grid targets", s.index))
    })?;

    let (confusion, rough, fine) = if oracle {
        let confusion = metrics::evaluate_meta(test.iter().map(|s| (s.situation, s.situation)))?;
        let rough = score_far(test, &grid, rt, |s| {
            let mut p = vec![0.0; grid.cells()];
            for &(x, y) in &centers(s) {
                p[grid.cell_index(x, y)?] = 1.0;
            }
            Ok(p)
        })?;
        let pairs: Vec<_> = test
            .iter()
            .filter(|s| s.situation == Situation::CloseObject)
            .map(|s| (s.boxes[0], s.boxes[0]))
            .collect();
        let fine = if pairs.is_empty() { None } else { Some(metrics::evaluate_fine(&pairs, it)?) };
        (confusion, rough, fine)
    } else {
        let dir = models.ok_or_else(|| Usage("eval needs --models or --oracle".into()))?;
        let models = load_models(dir, config)?;
        let examples = featurize(&models.arch, &models.bundle, test.iter().map(|s| (&s.image, s.situation, &s.boxes[..])))?;
        let confusion = evaluate_meta_head(&models.arch, &models.bundle, &examples)?;
        let rough = has(Situation::FarObjects)
            .then(|| evaluate_rough_head(&models.arch, &models.bundle, &examples, rt))
            .transpose()?;
        let fine = has(Situation::CloseObject)
            .then(|| evaluate_fine_head(&models.arch, &models.bundle, &examples, it))
            .transpose()?;

        let mut timing = String::from("situation,frames,total_s,cpu_time_s,extract_s,meta_s,head_s\n");
        let mut pipeline = Pipeline::from_models(&models);
        for s in Situation::ALL {
            let frames: Vec<Tensor> = test.iter().filter(|x| x.situation == s).map(|x| x.image.clone()).collect();
            if frames.is_empty() {
                continue;
            }
            let (_, t) = pipeline.run_sequence(&frames)?;
            timing.push_str(&timing_row(s.name(), &t));
        }
        write_text(&out.join("timing_eval.csv"), &timing)?;
        (confusion, rough, fine)
    };

    let mut csv = format!("head,{}\n", Metrics::csv_header());
    if let Some(m) = &rough {
        csv.push_str(&format!("rough,{}\n", m.csv_row()));
    }
    if let Some(f) = &fine {
        csv.push_str(&format!("fine,{}\n", f.metrics.csv_row()));
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("confusion.csv"), &confusion.to_csv())?;

    say!("meta accuracy {:.4} ({} errors)", confusion.accuracy(), confusion.errors());
    if let Some(m) = &rough {
        say!("rough F1 {:.4} (P {:.4}, R {:.4})", m.f1, m.precision, m.recall);
    }
    if let Some(f) = &fine {
        say!("fine F1 {:.4}, mean IoU {:.4}", f.metrics.f1, f.mean_iou);
    }
    let summary = EvalSummary {
        oracle,
        test_counts: ds.manifest.test_counts,
        meta: MetaSummary::from(&confusion),
        rough: rough.zip(bound).map(|(metrics, calibrated_bound)| RoughSummary {
            threshold: rt,
            metrics,
            calibrated_bound,
        }),
        fine: fine.map(|f| FineSummary::new(it, f)),
    };
    write_json(&out.join("eval.json"), &summary)
}

fn timing_row(name: &str, t: &TimingReport) -> String {
    format!(
        "{name},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
        t.frames,
        t.total_s,
        t.cpu_time(),
        t.mean_extract(),
        t.mean_meta(),
        t.mean_head()
    )
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    frames: usize,
    sequence: TimingReport,
    cpu_time_s: f64,
    amortization: &'a maod_core::pipeline::AmortizationReport,
}

#[allow(clippy::too_many_arguments)]
fn bench(models: &Path, data: Option<&Path>, frames: usize, trials: usize, seed: u64, config: &RunConfig, out: &Path) -> Result<()> {
    if frames == 0 {
        return Err(Usage("--frames must be positive".into()).into());
    }
    let models = load_models(models, config)?;
    let samples: Vec<SceneSample> = match data {
        Some(dir) => load_dataset(dir)?.test.into_iter().take(frames).collect(),
        None => (0..frames)
            .map(|i| {
                let mut rng = Rng::seed_from_u64(sample_seed(seed, i));
                gen_sample(Situation::ALL[i % 3], &mut rng, &config.scene)
            })
            .collect::<maod_core::Result<_>>()?,
    };
    if samples.is_empty() {
        anyhow::bail!(maod_core::Error::InvalidArgument("no frames to benchmark".into()));
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let probe = samples
        .iter()
        .find(|s| s.situation == Situation::FarObjects)
        .unwrap_or(&samples[0]);

    let mut pipeline = Pipeline::from_models(&models);
    let amortization = pipeline.amortization_probe(&probe.image, trials)?;
    let (results, timing) = pipeline.run_sequence(&images)?;

    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    write_text(&out.join("sequence_results.jsonl"), &jsonl)?;
    write_text(&out.join("timing_amortization.csv"), &amortization.to_csv())?;
    write_text(
        &out.join("timing_sequence.csv"),
        &format!("situation,frames,total_s,cpu_time_s,extract_s,meta_s,head_s\n{}", timing_row("all", &timing)),
    )?;
    write_json(
        &out.join("timing_bench.json"),
        &BenchSummary {
            frames: images.len(),
            sequence: timing,
            cpu_time_s: timing.cpu_time(),
            amortization: &amortization,
        },
    )?;
    say!(
        "shared {:.3} ms, unshared {:.3} ms, meta fraction {:.3}, {:.3} ms/frame over {} frames",
        amortization.shared_s * 1e3,
        amortization.unshared_s * 1e3,
        amortization.meta_fraction,
        timing.cpu_time() * 1e3,
        images.len()
    );
    Ok(())
}

fn world_for(arg: WorldArg, seed: u64) -> WorldState {
    match arg {
        WorldArg::Default => WorldState::default(),
        WorldArg::Empty => WorldState::empty(),
        WorldArg::Random => WorldState::random(seed),
    }
}

#[derive(Serialize)]
struct SimSummary {
    world: WorldArg,
    detector: &'static str,
    initial: WorldState,
    outcome: maod_core::acquisition::sim::SimOutcome,
    grasped: bool,
}

fn sim(models: Option<&Path>, world: WorldArg, seed: u64, config: &RunConfig, out: &Path) -> Result<()> {
    let sim_config = SimConfig {
        seed,
        ..config.sim.clone()
    };
    let initial = world_for(world, seed);
    let loaded = models.map(|dir| load_models(dir, config)).transpose()?;
    let mode = match &loaded {
        Some(m) => DetectorMode::Models(m),
        None => DetectorMode::Oracle,
    };
    let outcome = simulate_approach(initial.clone(), mode, &config.calibration, &sim_config)?;
    write_text(&out.join("trajectory.csv"), &outcome.trajectory_csv())?;
    say!(
        "{} after {} steps, distance {}",
        outcome.final_phase.name(),
        outcome.steps,
        outcome.final_distance.map_or("n/a".into(), |d| format!("{d:.3} m"))
    );
    let grasped = outcome.final_phase == maod_core::acquisition::sim::Phase::Grasped;
    write_json(
        &out.join("summary.json"),
        &SimSummary {
            world,
            detector: if loaded.is_some() { "models" } else { "oracle" },
            initial,
            outcome,
            grasped,
        },
    )
}

/// Renders the robot's current view once per opening.
struct WorldCamera<'a> {
    world: &'a WorldState,
    calib: &'a Calibration,
    background: Background,
    noise_sigma: f64,
    rng: Rng,
    open: bool,
}

impl CameraSource for WorldCamera<'_> {
    fn open(&mut self) -> maod_core::Result<()> {
        self.open = true;
        Ok(())
    }

    fn poll(&mut self, _timeout: Duration) -> maod_core::Result<Option<Tensor>> {
        if !self.open {
            return Ok(None);
        }
        let (image, _) = render_view(self.world, self.calib, self.background, self.noise_sigma, &mut self.rng)?;
        Ok(Some(image))
    }

    fn close(&mut self) {
        self.open = false;
    }
}

#[derive(Serialize)]
struct ServeSummary {
    world: WorldArg,
    detector: &'static str,
    requests: usize,
}

fn serve(port: u16, models: Option<&Path>, world: WorldArg, seed: u64, config: &RunConfig, out: &Path) -> Result<()> {
    let state = world_for(world, seed);
    let calib = &config.calibration;
    calib.validate()?;
    let loaded = models.map(|dir| load_models(dir, config)).transpose()?;
    let mut rng = Rng::seed_from_u64(seed);
    let kind = BackgroundKind::TEXTURED[rng.random_range(0..BackgroundKind::TEXTURED.len())];
    let background = Background::random(kind, &mut rng);
    let mut camera = WorldCamera {
        world: &state,
        calib,
        background,
        noise_sigma: config.sim.noise_sigma,
        rng,
        open: false,
    };
    let mut pipeline = loaded.as_ref().map(Pipeline::from_models);
    let mut oracle = FixedDetector(oracle_detection(state.visible_box(calib), &config.sim)?);
    let detector: &mut dyn Detector = match pipeline.as_mut() {
        Some(p) => p,
        None => &mut oracle,
    };

    let listener = TcpListener::bind(("127.0.0.1", port)).with_context(|| format!("binding port {port}"))?;
    say!("listening on {}", listener.local_addr()?);
    let _ = std::io::stdout().flush();
    let (mut stream, peer) = listener.accept()?;
    let requests = Responder::new(Duration::from_millis(500)).serve_stream(&mut stream, &mut camera, detector, calib)?;
    say!("served {requests} request(s) for {peer}");
    write_json(
        &out.join("serve.json"),
        &ServeSummary {
            world,
            detector: if loaded.is_some() { "models" } else { "oracle" },
            requests,
        },
    )
}
