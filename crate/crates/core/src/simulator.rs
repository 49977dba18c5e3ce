//! Synthetic blurry frames and ideal events from procedurally moving
//! textures.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{shape_err, Error, Result};
use crate::events::{write_events, Event, EventStream, Polarity};
use crate::image::{write_all_atomic, Image};
use crate::parallel::par_map;

/// Added before taking logs so black pixels stay finite.
pub const LOG_EPS: f64 = 1e-4;
pub const DEFAULT_FRAMES: usize = 11;
pub const DEFAULT_CONTRAST: f64 = 0.2;

/// Relative slack when comparing log-intensity differences to multiples of
/// the threshold.
const CROSSING_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    /// Pixels per frame.
    Translate { vx: f64, vy: f64 },
    /// Radians per frame about the image center.
    Rotate { omega: f64 },
    /// Per-pixel displacement per frame.
    Flow(FlowField),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// `(dx, dy)` per pixel, row-major.
    pub data: Vec<(f64, f64)>,
}

impl FlowField {
    /// `flow(p) = a * (p - center) + b`.
    pub fn affine(width: usize, height: usize, a: [[f64; 2]; 2], b: [f64; 2]) -> Self {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                data.push((a[0][0] * px + a[0][1] * py + b[0], a[1][0] * px + a[1][1] * py + b[1]));
            }
        }
        Self { width, height, data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Checker { cell: f64 },
    GaussianBlobs { count: usize },
    Image(Image),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub channels: usize,
    pub motion: Motion,
    pub texture: Texture,
    /// Snap intensities onto the log lattice `ln(LOG_EPS) + n * c`.
    pub posterize: Option<f64>,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(width: usize, height: usize, motion: Motion, texture: Texture, seed: u64) -> Self {
        Self {
            width,
            height,
            n_frames: DEFAULT_FRAMES,
            channels: 1,
            motion,
            texture,
            posterize: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 3 || self.n_frames.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_frames must be odd and >= 3, got {}",
                self.n_frames
            )));
        }
        if self.width == 0 || self.height == 0 || self.width > 65535 || self.height > 65535 {
            return Err(Error::Config(format!(
                "unsupported frame size {}x{}",
                self.width, self.height
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        match &self.motion {
            Motion::Translate { vx, vy } if !(vx.is_finite() && vy.is_finite()) => {
                return Err(Error::Config("non-finite translation speed".into()))
            }
            Motion::Rotate { omega } if !omega.is_finite() => {
                return Err(Error::Config("non-finite rotation speed".into()))
            }
            Motion::Flow(f) => {
                if f.width != self.width || f.height != self.height {
                    return Err(Error::Config("flow field size differs from frame size".into()));
                }
                if f.data.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
                    return Err(Error::Config("non-finite flow".into()));
                }
            }
            _ => {}
        }
        match &self.texture {
            Texture::Checker { cell } if !(*cell > 0.0) => {
                return Err(Error::Config("checker cell must be positive".into()))
            }
            Texture::Image(img) if img.channels() != 1 && img.channels() != self.channels => {
                return Err(Error::Config(format!(
                    "texture image has {} channels, scene has {}",
                    img.channels(),
                    self.channels
                )))
            }
            _ => {}
        }
        if let Some(c) = self.posterize {
            if !(c > 0.0) {
                return Err(Error::Config("posterize step must be positive".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Motion::Translate { vx, vy } => write!(f, "translate:{vx},{vy}"),
            Motion::Rotate { omega } => write!(f, "rotate:{omega}"),
            Motion::Flow(_) => write!(f, "flow"),
        }
    }
}

struct Blob {
    x: f64,
    y: f64,
    inv_two_var: f64,
    amp: f64,
}

/// A texture instantiated with its random parameters.
enum Field<'a> {
    Checker {
        cell: f64,
        phase: (f64, f64),
        lo: f64,
        hi: f64,
    },
    Blobs {
        base: f64,
        blobs: Vec<Blob>,
    },
    Image(&'a Image),
}

impl<'a> Field<'a> {
    fn new(cfg: &'a SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        match &cfg.texture {
            Texture::Checker { cell } => Field::Checker {
                cell: *cell,
                phase: (rng.gen_range(0.0..*cell), rng.gen_range(0.0..*cell)),
                lo: rng.gen_range(0.05..0.35),
                hi: rng.gen_range(0.6..0.95),
            },
            Texture::GaussianBlobs { count } => {
                let (w, h) = (cfg.width as f64, cfg.height as f64);
                let blobs = (0..*count)
                    .map(|_| {
                        let sigma: f64 = rng.gen_range(1.5..7.0);
                        Blob {
                            x: rng.gen_range(-0.5 * w..1.5 * w),
                            y: rng.gen_range(-0.5 * h..1.5 * h),
                            inv_two_var: 1.0 / (2.0 * sigma * sigma),
                            amp: rng.gen_range(-0.45..0.6),
                        }
                    })
                    .collect();
                Field::Blobs {
                    base: rng.gen_range(0.2..0.5),
                    blobs,
                }
            }
            Texture::Image(img) => Field::Image(img),
        }
    }

    fn sample(&self, channel: usize, x: f64, y: f64) -> f64 {
        match self {
            Field::Checker { cell, phase, lo, hi } => {
                let i = ((x + phase.0) / cell).floor() as i64 + ((y + phase.1) / cell).floor() as i64;
                if i.rem_euclid(2) == 0 {
                    *hi
                } else {
                    *lo
                }
            }
            Field::Blobs { base, blobs } => {
                let mut v = *base;
                for b in blobs {
                    let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                    v += b.amp * (-d2 * b.inv_two_var).exp();
                }
                v.clamp(0.02, 0.98)
            }
            Field::Image(img) => {
                let c = if img.channels() == 1 { 0 } else { channel };
                sample_clamped(img, c, x, y)
            }
        }
    }
}

/// Bilinear sample with edge clamping.
fn sample_clamped(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = (1.0 - fx) * img.get(c, y0, x0) + fx * img.get(c, y0, x1);
    let bot = (1.0 - fx) * img.get(c, y1, x0) + fx * img.get(c, y1, x1);
    (1.0 - fy) * top + fy * bot
}

/// Largest lattice level `exp(ln(LOG_EPS) + n*c) - LOG_EPS` not above `v`'s
/// nearest level and not above 1.
pub fn posterize_log(v: f64, c: f64) -> f64 {
    let base = LOG_EPS.ln();
    let top = ((1.0 + LOG_EPS).ln() - base) / c;
    let n = ((v.max(0.0) + LOG_EPS).ln() - base) / c;
    let n = n.round().min(top.floor()).max(0.0);
    ((base + n * c).exp() - LOG_EPS).clamp(0.0, 1.0)
}

/// Latent sharp frames; frame `k` is the texture displaced by `k` steps of
/// the configured motion.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Vec<Image>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let field = Field::new(cfg, &mut rng);
    let tint: Vec<f64> = if cfg.channels == 3 && !matches!(cfg.texture, Texture::Image(_)) {
        (0..3).map(|_| rng.gen_range(0.6..1.0)).collect()
    } else {
        vec![1.0; cfg.channels]
    };
    let (w, h) = (cfg.width, cfg.height);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let kf = k as f64;
        let mut data = vec![0.0; cfg.channels * w * h];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let (sx, sy) = match &cfg.motion {
                    Motion::Translate { vx, vy } => (xf - kf * vx, yf - kf * vy),
                    Motion::Rotate { omega } => {
                        let (s, c) = (-kf * omega).sin_cos();
                        let (dx, dy) = (xf - cx, yf - cy);
                        (c * dx - s * dy + cx, s * dx + c * dy + cy)
                    }
                    Motion::Flow(f) => {
                        let (u, v) = f.data[y * w + x];
                        (xf - kf * u, yf - kf * v)
                    }
                };
                for (ch, t) in tint.iter().enumerate() {
                    let mut v = (field.sample(ch, sx, sy) * t).clamp(0.0, 1.0);
                    if let Some(step) = cfg.posterize {
                        v = posterize_log(v, step);
                    }
                    data[(ch * h + y) * w + x] = v;
                }
            }
        }
        frames.push(Image::new(w, h, cfg.channels, data)?);
    }
    Ok(frames)
}

/// Per-pixel arithmetic mean of the frames.
pub fn blur_average(frames: &[Image]) -> Result<Image> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("blur of zero frames".into()))?;
    let mut acc = vec![0.0; first.data().len()];
    for f in frames {
        first.check_same_shape(f)?;
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let n = frames.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Image::new(first.width(), first.height(), first.channels(), acc)
}

/// `n` evenly spaced instants from `t0` to exactly `t1`.
pub fn uniform_times(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => {
            let dt = (t1 - t0) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n - 1).map(|k| t0 + k as f64 * dt).collect();
            v.push(t1);
            v
        }
    }
}

/// Events over the unit exposure `[0, 1]`.
pub fn emit_events(frames: &[Image], c: f64) -> Result<EventStream> {
    emit_events_in(frames, c, 0.0, 1.0)
}

/// Ideal threshold-crossing events. Frames are placed at
/// [`uniform_times`]`(t0, t1, n)`; log intensity is interpolated linearly
/// between them and each crossing of `reference +- c` emits one event at the
/// interpolated instant.
pub fn emit_events_in(frames: &[Image], c: f64, t0: f64, t1: f64) -> Result<EventStream> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "contrast threshold must be positive, got {c}"
        )));
    }
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("need at least two frames".into()));
    }
    if !(t1 > t0) {
        return Err(Error::DegenerateWindow { t0, t1 });
    }
    let first = &frames[0];
    for f in frames {
        first.check_same_shape(f)?;
    }
    let (w, h) = (first.width(), first.height());
    if w > u16::MAX as usize + 1 || h > u16::MAX as usize + 1 {
        return Err(shape_err!("frame {w}x{h} exceeds event coordinate range"));
    }
    let logs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.luma().data().iter().map(|v| (v + LOG_EPS).ln()).collect())
        .collect();
    let times = uniform_times(t0, t1, frames.len());
    let dt = (t1 - t0) / (frames.len() - 1) as f64;
    let tol = CROSSING_TOL * c;

    let mut events = Vec::new();
    for pix in 0..w * h {
        let (x, y) = ((pix % w) as u16, (pix / w) as u16);
        let mut reference = logs[0][pix];
        for k in 0..frames.len() - 1 {
            let (la, lb) = (logs[k][pix], logs[k + 1][pix]);
            loop {
                let (level, polarity) = if lb - reference >= c - tol {
                    (reference + c, Polarity::Positive)
                } else if reference - lb >= c - tol {
                    (reference - c, Polarity::Negative)
                } else {
                    break;
                };
                let t = if (level - lb).abs() <= tol {
                    reference = lb;
                    times[k + 1]
                } else {
                    reference = level;
                    let frac = (level - la) / (lb - la);
                    (t0 + (k as f64 + frac) * dt).clamp(times[k], times[k + 1])
                };
                events.push(Event::new(t, x, y, polarity));
            }
        }
    }
    EventStream::from_unsorted(events, t0, t1, w, h)
}

#[derive(Clone, Debug)]
pub struct ScenePack {
    pub latent_frames: Vec<Image>,
    pub blur: Image,
    pub events: EventStream,
    pub gt_mid: Image,
    pub contrast_c: f64,
}

/// Frames, blur, events over `[0, 1]` and the centre frame.
pub fn simulate(cfg: &SceneConfig, c: f64) -> Result<ScenePack> {
    let frames = generate_scene(cfg)?;
    let blur = blur_average(&frames)?;
    let events = emit_events(&frames, c)?;
    let gt_mid = frames[(frames.len() - 1) / 2].clone();
    Ok(ScenePack {
        latent_frames: frames,
        blur,
        events,
        gt_mid,
        contrast_c: c,
    })
}

/// One `blur events gt` line of a manifest, with absolute paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub blur: PathBuf,
    pub events: PathBuf,
    pub gt: PathBuf,
}

impl ManifestEntry {
    /// Scene name: the blur file stem without its `_blur` suffix.
    pub fn name(&self) -> String {
        self.blur
            .file_stem()
            .map(|s| s.to_string_lossy().trim_end_matches("_blur").to_string())
            .unwrap_or_default()
    }
}

/// A list of scenes. Paths in the file are relative to its directory; `#`
/// lines carry `key = value` metadata such as the contrast threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub meta: KeyValues,
}

impl Manifest {
    pub fn contrast_c(&self) -> Result<Option<f64>> {
        self.meta.get("c")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut meta_text = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if rest.contains('=') {
                    meta_text.push_str(rest);
                    meta_text.push('\n');
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!(
                    "line {}: expected `blur events gt`, got {line:?}",
                    i + 1
                )));
            }
            entries.push(ManifestEntry {
                blur: dir.join(f[0]),
                events: dir.join(f[1]),
                gt: dir.join(f[2]),
            });
        }
        Ok(Self {
            entries,
            meta: KeyValues::parse(&meta_text)?,
        })
    }

    fn to_text(&self, dir: &Path) -> String {
        let rel = |p: &Path| -> String { p.strip_prefix(dir).unwrap_or(p).display().to_string() };
        let mut s = String::new();
        for line in self.meta.to_text().lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        for e in &self.entries {
            s.push_str(&format!("{} {} {}\n", rel(&e.blur), rel(&e.events), rel(&e.gt)));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        write_all_atomic(path, self.to_text(dir).as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub train: Manifest,
    pub test: Manifest,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

/// Writes every scene as `scenes/NNNN_{blur,gt}.p[gp]m` plus
/// `scenes/NNNN.evt`, and the `train.txt` / `test.txt` manifests. The first
/// `round(train_fraction * n)` scenes form the training split.
pub fn make_dataset(
    scenes: &[SceneConfig],
    contrast_c: f64,
    train_fraction: f64,
    out_dir: impl AsRef<Path>,
    threads: usize,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let out = out_dir.as_ref();
    let scene_dir = out.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;

    let indexed: Vec<(usize, &SceneConfig)> = scenes.iter().enumerate().collect();
    let written = par_map(&indexed, threads, |&(i, cfg)| -> Result<ManifestEntry> {
        let pack = simulate(cfg, contrast_c)?;
        let ext = if cfg.channels == 3 { "ppm" } else { "pgm" };
        let entry = ManifestEntry {
            blur: scene_dir.join(format!("{i:04}_blur.{ext}")),
            events: scene_dir.join(format!("{i:04}.evt")),
            gt: scene_dir.join(format!("{i:04}_gt.{ext}")),
        };
        pack.blur.write_pnm(&entry.blur)?;
        pack.gt_mid.write_pnm(&entry.gt)?;
        write_events(&entry.events, &pack.events)?;
        Ok(entry)
    });
    let entries = written.into_iter().collect::<Result<Vec<_>>>()?;

    let n_train = (train_fraction * scenes.len() as f64).round() as usize;
    let mut meta = KeyValues::new();
    meta.set("c", contrast_c);
    if let Some(first) = scenes.first() {
        meta.set("n_frames", first.n_frames);
    }
    let train = Manifest {
        entries: entries[..n_train].to_vec(),
        meta: meta.clone(),
    };
    let test = Manifest {
        entries: entries[n_train..].to_vec(),
        meta,
    };
    let train_path = out.join("train.txt");
    let test_path = out.join("test.txt");
    train.write(&train_path)?;
    test.write(&test_path)?;
    Ok(DatasetManifest {
        train,
        test,
        train_path,
        test_path,
    })
}

/// Scene-set description used by `simulate` configs.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub channels: usize,
    pub n_scenes: usize,
    pub train_fraction: f64,
    pub contrast_c: f64,
    pub posterize: bool,
    /// `None` draws a random motion per scene.
    pub motion: Option<Motion>,
    /// `None` draws a random texture per scene.
    pub texture: Option<Texture>,
    /// Upper bound on random translation speed, pixels per frame.
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::toy(0)
    }
}

impl DatasetSpec {
    /// 220 grayscale 64x64 scenes, 200 for training and 20 for testing.
    pub fn toy(seed: u64) -> Self {
        Self {
            width: 64,
            height: 64,
            n_frames: DEFAULT_FRAMES,
            channels: 1,
            n_scenes: 220,
            train_fraction: 200.0 / 220.0,
            contrast_c: DEFAULT_CONTRAST,
            posterize: false,
            motion: None,
            texture: None,
            max_speed: 2.0,
            seed,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "width",
        "height",
        "n_frames",
        "channels",
        "n_scenes",
        "train_fraction",
        "contrast_c",
        "posterize",
        "motion",
        "texture",
        "max_speed",
        "seed",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS)?;
        let mut s = Self::toy(kv.get_or("seed", 0)?);
        kv.update("width", &mut s.width)?;
        kv.update("height", &mut s.height)?;
        kv.update("n_frames", &mut s.n_frames)?;
        kv.update("channels", &mut s.channels)?;
        kv.update("n_scenes", &mut s.n_scenes)?;
        kv.update("train_fraction", &mut s.train_fraction)?;
        kv.update("contrast_c", &mut s.contrast_c)?;
        kv.update("posterize", &mut s.posterize)?;
        kv.update("max_speed", &mut s.max_speed)?;
        if let Some(m) = kv.get_str("motion") {
            s.motion = parse_motion(m, s.width, s.height)?;
        }
        if let Some(t) = kv.get_str("texture") {
            s.texture = parse_texture(t)?;
        }
        Ok(s)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("width", self.width);
        kv.set("height", self.height);
        kv.set("n_frames", self.n_frames);
        kv.set("channels", self.channels);
        kv.set("n_scenes", self.n_scenes);
        kv.set("train_fraction", self.train_fraction);
        kv.set("contrast_c", self.contrast_c);
        kv.set("posterize", self.posterize);
        kv.set("max_speed", self.max_speed);
        kv.set("seed", self.seed);
        kv.set(
            "motion",
            self.motion.as_ref().map_or("random".to_string(), |m| m.to_string()),
        );
        kv.set(
            "texture",
            match &self.texture {
                None => "random".to_string(),
                Some(Texture::Checker { cell }) => format!("checker:{cell}"),
                Some(Texture::GaussianBlobs { count }) => format!("blobs:{count}"),
                Some(Texture::Image(_)) => "image".to_string(),
            },
        );
        kv
    }

    /// Deterministic per-scene configurations.
    pub fn scene_configs(&self) -> Vec<SceneConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_scenes)
            .map(|_| {
                let motion = self.motion.clone().unwrap_or_else(|| {
                    if rng.gen_bool(0.75) {
                        let speed = rng.gen_range(0.3 * self.max_speed..self.max_speed);
                        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                        Motion::Translate {
                            vx: speed * angle.cos(),
                            vy: speed * angle.sin(),
                        }
                    } else {
                        // Edge speed at the frame border matches the translation range.
                        let r = 0.5 * self.width.min(self.height) as f64;
                        let omega = rng.gen_range(0.3 * self.max_speed..self.max_speed) / r;
                        Motion::Rotate {
                            omega: if rng.gen_bool(0.5) { omega } else { -omega },
                        }
                    }
                });
                let texture = self.texture.clone().unwrap_or_else(|| {
                    if rng.gen_bool(0.5) {
                        Texture::Checker {
                            cell: rng.gen_range(4.0..12.0),
                        }
                    } else {
                        Texture::GaussianBlobs {
                            count: rng.gen_range(20..60),
                        }
                    }
                });
                SceneConfig {
                    width: self.width,
                    height: self.height,
                    n_frames: self.n_frames,
                    channels: self.channels,
                    motion,
                    texture,
                    posterize: self.posterize.then_some(self.contrast_c),
                    seed: rng.gen(),
                }
            })
            .collect()
    }
}

/// `random`, `translate:vx,vy`, `rotate:omega` or
/// `flow:a00,a01,a10,a11,b0,b1` (affine field about the center).
pub fn parse_motion(s: &str, width: usize, height: usize) -> Result<Option<Motion>> {
    let (kind, args) = s.split_once(':').unwrap_or((s, ""));
    let nums = || -> Result<Vec<f64>> {
        args.split(',')
            .filter(|a| !a.trim().is_empty())
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad motion parameter {a:?}")))
            })
            .collect()
    };
    let arity = |v: &Vec<f64>, n: usize| -> Result<()> {
        if v.len() == n {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "motion {kind} takes {n} parameters, got {}",
                v.len()
            )))
        }
    };
    match kind.trim() {
        "random" => Ok(None),
        "translate" => {
            let v = nums()?;
            arity(&v, 2)?;
            Ok(Some(Motion::Translate { vx: v[0], vy: v[1] }))
        }
        "rotate" => {
            let v = nums()?;
            arity(&v, 1)?;
            Ok(Some(Motion::Rotate { omega: v[0] }))
        }
        "flow" => {
            let v = nums()?;
            arity(&v, 6)?;
            Ok(Some(Motion::Flow(FlowField::affine(
                width,
                height,
                [[v[0], v[1]], [v[2], v[3]]],
                [v[4], v[5]],
            ))))
        }
        other => Err(Error::Config(format!("unsupported motion kind {other:?}"))),
    }
}

/// `random`, `checker:cell`, `blobs:count` or `image:path`.
pub fn parse_texture(s: &str) -> Result<Option<Texture>> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let bad = || Error::Config(format!("bad texture {s:?}"));
    match kind.trim() {
        "random" => Ok(None),
        "checker" => Ok(Some(Texture::Checker {
            cell: arg.trim().parse().map_err(|_| bad())?,
        })),
        "blobs" => Ok(Some(Texture::GaussianBlobs {
            count: arg.trim().parse().map_err(|_| bad())?,
        })),
        "image" => Ok(Some(Texture::Image(Image::read_pnm(arg.trim())?))),
        other => Err(Error::Config(format!("unsupported texture kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::accumulate_through;

    fn checker(motion: Motion) -> SceneConfig {
        SceneConfig::new(24, 16, motion, Texture::Checker { cell: 4.0 }, 7)
    }

    #[test]
    fn static_scene_has_identical_frames_and_no_events() {
        let frames = generate_scene(&checker(Motion::Translate { vx: 0.0, vy: 0.0 })).unwrap();
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
        assert!(emit_events(&frames, 0.2).unwrap().is_empty());
    }

    #[test]
    fn unit_translation_shifts_right() {
        let frames = generate_scene(&checker(Motion::Translate { vx: 1.0, vy: 0.0 })).unwrap();
        let f0 = &frames[0];
        for (k, f) in frames.iter().enumerate() {
            for y in 0..16 {
                for x in k..24 {
                    assert_eq!(f.get(0, y, x), f0.get(0, y, x - k), "frame {k} ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = checker(Motion::Rotate { omega: 0.05 });
        cfg.texture = Texture::GaussianBlobs { count: 10 };
        cfg.channels = 3;
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = checker(Motion::Translate { vx: 1.0, vy: 0.0 });
        cfg.n_frames = 4;
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
        let cfg = checker(Motion::Translate { vx: f64::NAN, vy: 0.0 });
        assert!(generate_scene(&cfg).is_err());
        assert!(parse_motion("spiral:1", 4, 4).is_err());
    }

    #[test]
    fn blur_of_one_frame_and_constants() {
        let f = Image::filled(3, 2, 1, 0.25);
        assert_eq!(blur_average(std::slice::from_ref(&f)).unwrap(), f);
        let b = blur_average(&[Image::filled(3, 2, 1, 0.2), Image::filled(3, 2, 1, 0.4)]).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(blur_average(&[Image::filled(3, 2, 1, 0.2), Image::filled(2, 2, 1, 0.2)]).is_err());
    }

    #[test]
    fn blur_matches_per_pixel_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Image> = (0..11)
            .map(|_| {
                let d = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
                Image::new(5, 6, 1, d).unwrap()
            })
            .collect();
        let b = blur_average(&frames).unwrap();
        for i in 0..30 {
            let mut s = 0.0;
            for f in &frames {
                s += f.data()[i];
            }
            assert!((b.data()[i] - s / 11.0).abs() < 1e-12);
        }
    }

    fn from_log(l: f64) -> f64 {
        l.exp() - LOG_EPS
    }

    #[test]
    fn three_threshold_step_gives_three_equally_spaced_events() {
        let c = 0.2;
        let l0 = 0.1f64.ln();
        let f0 = Image::new(2, 1, 1, vec![from_log(l0), 0.5]).unwrap();
        let f1 = Image::new(2, 1, 1, vec![from_log(l0 + 3.0 * c), 0.5]).unwrap();
        let s = emit_events(&[f0, f1], c).unwrap();
        assert_eq!(s.len(), 3);
        for (i, e) in s.events().iter().enumerate() {
            assert_eq!((e.x, e.y, e.polarity), (0, 0, Polarity::Positive));
            assert!((e.t - (i + 1) as f64 / 3.0).abs() < 1e-9, "t = {}", e.t);
        }
        assert_eq!(s.events()[2].t, 1.0);
    }

    #[test]
    fn up_then_down_is_balanced() {
        let c = 0.15;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.3)).collect();
        let peak: Vec<f64> = base.iter().map(|b| b * rng.gen_range(1.5..3.0)).collect();
        let f = |d: &Vec<f64>| Image::new(4, 3, 1, d.clone()).unwrap();
        let s = emit_events(&[f(&base), f(&peak), f(&base)], c).unwrap();
        let mut count = [(0, 0); 12];
        for e in s.events() {
            let i = e.y as usize * 4 + e.x as usize;
            match e.polarity {
                Polarity::Positive => count[i].0 += 1,
                Polarity::Negative => count[i].1 += 1,
            }
        }
        for (i, (p, n)) in count.iter().enumerate() {
            assert_eq!(p, n, "pixel {i}");
            let expected = (((peak[i] + LOG_EPS) / (base[i] + LOG_EPS)).ln() / c).floor() as usize;
            assert_eq!(*p, expected);
        }
    }

    #[test]
    fn net_polarity_tracks_log_change_within_one_threshold() {
        let c = 0.2;
        let mut cfg = SceneConfig::new(
            20,
            20,
            Motion::Rotate { omega: 0.08 },
            Texture::GaussianBlobs { count: 15 },
            3,
        );
        cfg.n_frames = 7;
        let frames = generate_scene(&cfg).unwrap();
        let s = emit_events(&frames, c).unwrap();
        let net = accumulate_through(&s, 0.0, 1.0).unwrap();
        for i in 0..400 {
            let dl = (frames[6].data()[i] + LOG_EPS).ln() - (frames[0].data()[i] + LOG_EPS).ln();
            assert!((c * net.values[i] - dl).abs() < c + 1e-9);
        }
    }

    #[test]
    fn posterized_frames_are_on_the_log_lattice() {
        let c = 0.2;
        let mut cfg = SceneConfig::new(
            16,
            16,
            Motion::Translate { vx: 0.7, vy: 0.3 },
            Texture::GaussianBlobs { count: 8 },
            1,
        );
        cfg.posterize = Some(c);
        for f in generate_scene(&cfg).unwrap() {
            for v in f.data() {
                let n = ((v + LOG_EPS).ln() - LOG_EPS.ln()) / c;
                assert!((n - n.round()).abs() < 1e-9);
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let dir = Path::new("/data/set");
        let mut meta = KeyValues::new();
        meta.set("c", 0.2);
        let m = Manifest {
            entries: vec![ManifestEntry {
                blur: dir.join("scenes/0000_blur.pgm"),
                events: dir.join("scenes/0000.evt"),
                gt: dir.join("scenes/0000_gt.pgm"),
            }],
            meta,
        };
        let text = m.to_text(dir);
        assert!(text.contains("\nscenes/0000_blur.pgm scenes/0000.evt scenes/0000_gt.pgm\n"));
        assert_eq!(Manifest::parse(&text, dir).unwrap(), m);
        assert_eq!(m.contrast_c().unwrap(), Some(0.2));
    }

    #[test]
    fn dataset_split_and_determinism() {
        let spec = DatasetSpec {
            width: 16,
            height: 16,
            n_scenes: 10,
            train_fraction: 0.8,
            ..DatasetSpec::toy(4)
        };
        let scenes = spec.scene_configs();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = make_dataset(&scenes, spec.contrast_c, spec.train_fraction, a.path(), 2).unwrap();
        let mb = make_dataset(&scenes, spec.contrast_c, spec.train_fraction, b.path(), 1).unwrap();
        assert_eq!(ma.train.entries.len(), 8);
        assert_eq!(ma.test.entries.len(), 2);
        for (ea, eb) in ma
            .train
            .entries
            .iter()
            .chain(&ma.test.entries)
            .zip(mb.train.entries.iter().chain(&mb.test.entries))
        {
            assert!(ea.blur.exists() && ea.gt.exists());
            assert_eq!(std::fs::read(&ea.events).unwrap(), std::fs::read(&eb.events).unwrap());
        }
        let ta = std::fs::read_to_string(a.path().join("train.txt")).unwrap();
        let tb = std::fs::read_to_string(b.path().join("train.txt")).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(Manifest::read(a.path().join("test.txt")).unwrap(), ma.test);
    }

    #[test]
    fn spec_kv_round_trip() {
        let mut spec = DatasetSpec::toy(3);
        spec.motion = Some(Motion::Translate { vx: 1.5, vy: -0.5 });
        spec.texture = Some(Texture::Checker { cell: 6.0 });
        assert_eq!(DatasetSpec::from_kv(&spec.to_kv()).unwrap(), spec);
    }
}
