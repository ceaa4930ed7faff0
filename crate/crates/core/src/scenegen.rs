//! Deterministic synthetic robot-camera scenes.
//!
//! Frames are textured floors with axis-aligned colored boxes on top: no
//! object, one to four small distant objects, or one large close object.
//! Pixel values are quantized to `k/255` at generation time so the PPM files
//! on disk reproduce the in-memory images exactly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::hex;
use crate::error::{Error, Result};
use crate::heads::{rough_targets, BoxTarget, GridSpec, Situation};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    White,
    Red,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::White, Color::Red, Color::Blue];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::White => [0.95, 0.95, 0.95],
            Color::Red => [0.85, 0.1, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Checker,
    HStripes,
    VStripes,
    Diagonal,
    Flat,
}

impl BackgroundKind {
    /// The four textured classes used for proxy pretraining.
    pub const TEXTURED: [BackgroundKind; 4] = [
        BackgroundKind::Checker,
        BackgroundKind::HStripes,
        BackgroundKind::VStripes,
        BackgroundKind::Diagonal,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub kind: BackgroundKind,
    pub tone_a: [f64; 3],
    pub tone_b: [f64; 3],
    /// Texture period in pixels.
    pub period: usize,
}

impl Background {
    pub fn flat(rgb: [f64; 3]) -> Self {
        Self {
            kind: BackgroundKind::Flat,
            tone_a: rgb,
            tone_b: rgb,
            period: 1,
        }
    }

    /// Muted two-tone texture, kept darker than every object color.
    pub fn random(kind: BackgroundKind, rng: &mut Rng) -> Self {
        let base: f64 = rng.random_range(0.1..0.45);
        let contrast: f64 = rng.random_range(0.05..0.15);
        let tone_a = [0, 1, 2].map(|_| (base + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
        let tone_b = tone_a.map(|v| (v + contrast).min(0.7));
        Self {
            kind,
            tone_a,
            tone_b,
            period: rng.random_range(4..=12),
        }
    }

    fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let p = self.period.max(1);
        let alt = match self.kind {
            BackgroundKind::Flat => false,
            BackgroundKind::Checker => (row / p + col / p) % 2 == 1,
            BackgroundKind::HStripes => (row / p) % 2 == 1,
            BackgroundKind::VStripes => (col / p) % 2 == 1,
            BackgroundKind::Diagonal => ((row + col) / p) % 2 == 1,
        };
        if alt {
            self.tone_b
        } else {
            self.tone_a
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BoxTarget,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    background: Background,
    objects: Vec<SceneObject>,
    blur_radius: usize,
}

impl SceneSpec {
    pub fn new(background: Background, objects: Vec<SceneObject>, blur_radius: usize) -> Result<Self> {
        const SLACK: f64 = 1e-9;
        for o in &objects {
            let b = o.bbox;
            if b.x - b.w / 2.0 < -SLACK
                || b.y - b.h / 2.0 < -SLACK
                || b.x + b.w / 2.0 > 1.0 + SLACK
                || b.y + b.h / 2.0 > 1.0 + SLACK
            {
                return Err(Error::invalid(format!("object {b:?} extends outside the image")));
            }
        }
        Ok(Self {
            background,
            objects,
            blur_radius,
        })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }
}

/// Composites objects over the background in list order, weighting each
/// pixel by the exact fraction of its square the rectangle covers, then
/// applies the box blur. No noise is added here.
pub fn render(spec: &SceneSpec, width: usize, height: usize) -> Tensor {
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for r in 0..height {
        for c in 0..width {
            let px = spec.background.pixel(r, c);
            for ch in 0..3 {
                data[ch * plane + r * width + c] = px[ch];
            }
        }
    }
    for o in &spec.objects {
        let (x0, y0, x1, y1) = o.bbox.corners();
        let rgb = o.color.rgb();
        let (c0, c1) = span(x0, x1, width);
        let (r0, r1) = span(y0, y1, height);
        for r in r0..r1 {
            let cy = overlap(y0, y1, r, height);
            for c in c0..c1 {
                let cover = cy * overlap(x0, x1, c, width);
                if cover <= 0.0 {
                    continue;
                }
                for (ch, v) in rgb.iter().enumerate() {
                    let d = &mut data[ch * plane + r * width + c];
                    *d = *d * (1.0 - cover) + v * cover;
                }
            }
        }
    }
    let image = Tensor::new(vec![3, height, width], data).expect("shape matches data");
    box_blur(&image, spec.blur_radius)
}

fn span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo * n as f64).floor().max(0.0) as usize;
    let b = ((hi * n as f64).ceil() as usize).min(n);
    (a.min(n), b)
}

/// Fraction of pixel `i` (of `n`) inside `[lo, hi]`.
fn overlap(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    let (a, b) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
    ((hi.min(b) - lo.max(a)) * n as f64).clamp(0.0, 1.0)
}

/// Separable mean filter over a `(2r+1)²` window with edge clamping.
pub fn box_blur(image: &Tensor, radius: usize) -> Tensor {
    if radius == 0 {
        return image.clone();
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = image.clone();
    let mut out = image.clone();
    for ch in 0..image.shape()[0] {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        let t = &mut tmp.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += src[y * w + xx];
                }
                t[y * w + x] = s * norm;
            }
        }
    }
    for ch in 0..image.shape()[0] {
        let t = &tmp.data()[ch * h * w..(ch + 1) * h * w];
        let o = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += t[yy * w + x];
                }
                o[y * w + x] = s * norm;
            }
        }
    }
    out
}

/// Additive Gaussian pixel noise, clamped to `[0, 1]` and quantized to
/// `k/255`.
pub fn apply_sensor(image: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let data = image.data().iter().map(|v| quantize(v + noise.sample(rng))).collect();
    Tensor::new(image.shape().to_vec(), data)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Largest image-area fraction of a distant object.
    pub far_area_max: f64,
    /// Smallest image-area fraction of a close object.
    pub close_area_min: f64,
    pub far_side: [f64; 2],
    pub close_side: [f64; 2],
    pub max_far_objects: usize,
    /// Minimum gap between an object and the image border.
    pub margin: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    /// Share of no-object frames rendered blurred.
    pub vague_fraction: f64,
    /// Share of object frames whose single object falls between the far and
    /// close area limits.
    pub border_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            far_area_max: 0.06,
            close_area_min: 0.20,
            far_side: [0.1, 0.24],
            close_side: [0.45, 0.85],
            max_far_objects: 4,
            margin: 0.02,
            noise_sigma: 0.02,
            blur_radius: 2,
            vague_fraction: 0.5,
            border_fraction: 0.15,
            test_fraction: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if self.close_area_min <= self.far_area_max {
            return bad(format!(
                "close_area_min {} must exceed far_area_max {} so situations stay separable",
                self.close_area_min, self.far_area_max
            ));
        }
        let [f0, f1] = self.far_side;
        let [c0, c1] = self.close_side;
        if !(0.0 < f0 && f0 <= f1 && f0 * f0 <= self.far_area_max) {
            return bad(format!("far sides {:?} cannot make an object within the far area", self.far_side));
        }
        if !(0.0 < c0 && c0 <= c1 && c1 * c1 >= self.close_area_min && c1 + 2.0 * self.margin < 1.0) {
            return bad(format!("close sides {:?} cannot make a valid close object", self.close_side));
        }
        if self.max_far_objects == 0 {
            return bad("max_far_objects must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.margin >= 0.0) {
            return bad("noise and margin must be non-negative".into());
        }
        for (name, v) in [
            ("vague_fraction", self.vague_fraction),
            ("border_fraction", self.border_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub index: usize,
    pub seed: u64,
    pub image: Tensor,
    pub situation: Situation,
    pub boxes: Vec<BoxTarget>,
}

impl SceneSample {
    /// Rough-head target, or `None` for a frame without objects.
    pub fn grid_targets(&self, grid: &GridSpec) -> Option<Vec<f64>> {
        let centers: Vec<_> = self.boxes.iter().map(|b| (b.x, b.y)).collect();
        rough_targets(&centers, grid).ok()
    }
}

/// Per-sample generator seed, independent of generation order.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"maod-sample");
    h.update(dataset_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn place(w: f64, h: f64, margin: f64, rng: &mut Rng) -> Option<(f64, f64)> {
    let (lx, hx) = (margin + w / 2.0, 1.0 - margin - w / 2.0);
    let (ly, hy) = (margin + h / 2.0, 1.0 - margin - h / 2.0);
    if lx > hx || ly > hy {
        return None;
    }
    Some((rng.random_range(lx..=hx), rng.random_range(ly..=hy)))
}

fn disjoint(a: &BoxTarget, b: &BoxTarget, gap: f64) -> bool {
    (a.x - b.x).abs() >= (a.w + b.w) / 2.0 + gap || (a.y - b.y).abs() >= (a.h + b.h) / 2.0 + gap
}

fn sized(side: [f64; 2], accept: impl Fn(f64) -> bool, rng: &mut Rng) -> (f64, f64) {
    loop {
        let w = rng.random_range(side[0]..=side[1]);
        let h = rng.random_range(side[0]..=side[1]);
        if accept(w * h) {
            return (w, h);
        }
    }
}

/// Size of an object inside the far/close border band.
fn border_size(config: &SceneConfig, rng: &mut Rng) -> (f64, f64) {
    let area = rng.random_range(config.far_area_max..config.close_area_min);
    let aspect: f64 = rng.random_range(0.7..1.4);
    let w = (area * aspect).sqrt().min(1.0 - 2.0 * config.margin - 1e-6);
    (w, area / w)
}

fn object_boxes(situation: Situation, config: &SceneConfig, rng: &mut Rng) -> Result<Vec<BoxTarget>> {
    let border = situation != Situation::NoObject && rng.random_bool(config.border_fraction);
    let count = match situation {
        Situation::NoObject => 0,
        Situation::FarObjects if !border => rng.random_range(1..=config.max_far_objects),
        _ => 1,
    };
    'attempt: for _ in 0..1000 {
        let mut boxes: Vec<BoxTarget> = Vec::with_capacity(count);
        for _ in 0..count {
            let (w, h) = if border {
                border_size(config, rng)
            } else if situation == Situation::FarObjects {
                sized(config.far_side, |a| a <= config.far_area_max, rng)
            } else {
                sized(config.close_side, |a| a >= config.close_area_min, rng)
            };
            let placed = (0..100).find_map(|_| {
                let (x, y) = place(w, h, config.margin, rng)?;
                let b = BoxTarget::new(x, y, w, h).ok()?;
                boxes.iter().all(|o| disjoint(o, &b, 0.02)).then_some(b)
            });
            match placed {
                Some(b) => boxes.push(b),
                None => continue 'attempt,
            }
        }
        return Ok(boxes);
    }
    Err(Error::Config("could not place non-overlapping objects; relax sizes or margin".into()))
}

/// One labelled frame for `situation`.
pub fn gen_sample(situation: Situation, rng: &mut Rng, config: &SceneConfig) -> Result<SceneSample> {
    config.validate()?;
    let kind = *BackgroundKind::TEXTURED.choose(rng).expect("non-empty");
    let background = Background::random(kind, rng);
    let boxes = object_boxes(situation, config, rng)?;
    let objects = boxes
        .iter()
        .map(|&bbox| SceneObject {
            bbox,
            color: *Color::ALL.choose(rng).expect("non-empty"),
        })
        .collect();
    let blur = if situation == Situation::NoObject && rng.random_bool(config.vague_fraction) {
        config.blur_radius
    } else {
        0
    };
    let spec = SceneSpec::new(background, objects, blur)?;
    let image = apply_sensor(&render(&spec, config.width, config.height), config.noise_sigma, rng)?;
    Ok(SceneSample {
        index: 0,
        seed: 0,
        image,
        situation,
        boxes,
    })
}

/// Per-class shuffled split; each class contributes
/// `round_half_up(test_fraction · n_class)` test samples.
pub fn stratified_split(labels: &[Situation], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::seed_from_u64(sample_seed(seed, usize::MAX));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in Situation::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == s).collect();
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64 + 0.5).floor() as usize;
        test.extend_from_slice(&idx[..n_test.min(idx.len())]);
        train.extend_from_slice(&idx[n_test.min(idx.len())..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: [usize; 3],
    pub config: SceneConfig,
    pub config_hash: String,
    pub train_counts: [usize; 3],
    pub test_counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

fn class_counts(samples: &[SceneSample]) -> [usize; 3] {
    let mut c = [0; 3];
    samples.iter().for_each(|s| c[s.situation.index()] += 1);
    c
}

/// Generates `counts = [no_object, far, close]` frames. Sample `i` is drawn
/// from its own generator seeded by [`sample_seed`].
pub fn gen_dataset(counts: [usize; 3], seed: u64, config: &SceneConfig) -> Result<Dataset> {
    config.validate()?;
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::invalid("dataset counts are all zero"));
    }
    let labels: Vec<Situation> = Situation::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&s, n)| std::iter::repeat_n(s, n))
        .collect();
    let mut samples = labels
        .iter()
        .enumerate()
        .map(|(index, &s)| {
            let seed = sample_seed(seed, index);
            let mut rng = Rng::seed_from_u64(seed);
            let mut sample = gen_sample(s, &mut rng, config)?;
            sample.index = index;
            sample.seed = seed;
            Ok(Some(sample))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, test_idx) = stratified_split(&labels, config.test_fraction, seed);
    let train: Vec<SceneSample> = train_idx.iter().map(|&i| samples[i].take().unwrap()).collect();
    let test: Vec<SceneSample> = test_idx.iter().map(|&i| samples[i].take().unwrap()).collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            counts,
            config: config.clone(),
            config_hash: config.hash(),
            train_counts: class_counts(&train),
            test_counts: class_counts(&test),
        },
        train,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Record {
    file: String,
    situation: usize,
    boxes: Vec<BoxTarget>,
    seed: u64,
    config_hash: String,
}

pub fn image_file(index: usize) -> String {
    format!("images/{index:05}.ppm")
}

impl Dataset {
    /// Writes `dataset.json`, `train.jsonl`, `test.jsonl` and `images/*.ppm`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (name, split) in [("train.jsonl", &self.train), ("test.jsonl", &self.test)] {
            let mut out = Vec::new();
            for s in split {
                let file = image_file(s.index);
                fs::write(dir.join(&file), encode_ppm(&s.image)?)?;
                let rec = Record {
                    file,
                    situation: s.situation.index(),
                    boxes: s.boxes.clone(),
                    seed: s.seed,
                    config_hash: self.manifest.config_hash.clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.push(b'\n');
            }
            fs::write(dir.join(name), out)?;
        }
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        fs::write(dir.join("dataset.json"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
        let mut splits = Vec::new();
        for name in ["train.jsonl", "test.jsonl"] {
            let reader = BufReader::new(fs::File::open(dir.join(name))?);
            let mut samples = Vec::new();
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record = serde_json::from_str(&line)?;
                if rec.config_hash != manifest.config_hash {
                    return Err(Error::invalid(format!("{} was generated with another config", rec.file)));
                }
                let index = rec
                    .file
                    .trim_start_matches("images/")
                    .trim_end_matches(".ppm")
                    .parse()
                    .map_err(|_| Error::invalid(format!("unexpected image name {}", rec.file)))?;
                samples.push(SceneSample {
                    index,
                    seed: rec.seed,
                    image: decode_ppm(&fs::read(dir.join(&rec.file))?)?,
                    situation: Situation::from_index(rec.situation)?,
                    boxes: rec.boxes,
                });
            }
            splits.push(samples);
        }
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            manifest,
            train,
            test,
        })
    }
}

/// Binary PPM (`P6`, maxval 255) from a `3×H×W` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("encode_ppm", image.shape(), &[3, 0, 0]));
    };
    let mut out = Vec::with_capacity(w * h * 3 + 16);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad PPM field {s:?}")));
    if fields[0] != "P6" || parse(&fields[3])? != 255 {
        return Err(Error::invalid("only P6 with maxval 255 is supported"));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::invalid("truncated PPM data"))?;
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = px[i * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Background-only frames labelled by texture class, split into train and
/// held-out parts. Stands in for a large pretraining corpus.
pub fn gen_proxy_dataset(
    samples: usize,
    seed: u64,
    config: &SceneConfig,
) -> Result<(Vec<(Tensor, usize)>, Vec<(Tensor, usize)>)> {
    config.validate()?;
    if samples == 0 {
        return Err(Error::invalid("proxy dataset needs at least one sample"));
    }
    let classes = BackgroundKind::TEXTURED.len();
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for i in 0..samples {
        let class = i % classes;
        let mut rng = Rng::seed_from_u64(sample_seed(seed ^ 0x5052_4f58_5900_0000, i));
        let bg = Background::random(BackgroundKind::TEXTURED[class], &mut rng);
        let spec = SceneSpec::new(bg, Vec::new(), 0)?;
        let image = apply_sensor(&render(&spec, config.width, config.height), config.noise_sigma, &mut rng)?;
        if (i / classes) % 5 == 4 {
            held_out.push((image, class));
        } else {
            train.push((image, class));
        }
    }
    Ok((train, held_out))
}
