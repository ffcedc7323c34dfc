//! Synthetic few-shot benchmark data: procedurally rendered colored shapes.
//!
//! Every class is a `"color shape"` pair (e.g. `"red square"`). Images are
//! rendered on a dark background with randomized center and scale, optional
//! Gaussian pixel noise, and 3x3 supersampled edges, so the pixels alone
//! determine the class. Generation, class splits, and few-shot sampling are
//! all seeded and bit-reproducible.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::Image;
use crate::error::{Error, Result};

/// Background intensity for every channel.
pub const BACKGROUND: f64 = 0.1;

/// Minimum class count for a meaningful base/novel benchmark.
pub const MIN_CLASSES: usize = 6;

const SUPERSAMPLE: usize = 3;
const CENTER_MIN: f64 = 0.35;
const CENTER_MAX: f64 = 0.65;
const RADIUS_MIN: f64 = 0.18;
const RADIUS_MAX: f64 = 0.30;
const CROSS_ARM: f64 = 1.0 / 3.0;
const RING_INNER: f64 = 0.55;

/// Fraction of each base class reserved as the few-shot training pool; the
/// rest becomes that class's test set.
const POOL_NUMERATOR: usize = 3;
const POOL_DENOMINATOR: usize = 5;

/// Fill color for a named color word, as RGB in `[0, 1]`.
pub fn color_rgb(word: &str) -> Result<[f64; 3]> {
    match word {
        "red" => Ok([1.0, 0.0, 0.0]),
        "green" => Ok([0.0, 1.0, 0.0]),
        "blue" => Ok([0.0, 0.0, 1.0]),
        "yellow" => Ok([1.0, 1.0, 0.0]),
        "purple" => Ok([0.5, 0.0, 0.5]),
        "orange" => Ok([1.0, 0.5, 0.0]),
        "cyan" => Ok([0.0, 1.0, 1.0]),
        "magenta" => Ok([1.0, 0.0, 1.0]),
        "white" => Ok([1.0, 1.0, 1.0]),
        "gray" => Ok([0.5, 0.5, 0.5]),
        _ => Err(Error::Config(format!("unknown color word `{word}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

fn shape_kind(word: &str) -> Result<ShapeKind> {
    match word {
        "square" => Ok(ShapeKind::Square),
        "circle" => Ok(ShapeKind::Circle),
        "triangle" => Ok(ShapeKind::Triangle),
        "cross" => Ok(ShapeKind::Cross),
        "ring" => Ok(ShapeKind::Ring),
        "diamond" => Ok(ShapeKind::Diamond),
        _ => Err(Error::Config(format!("unknown shape word `{word}`"))),
    }
}

fn inside(kind: ShapeKind, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    match kind {
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Triangle => {
            let (ax, ay) = (cx, cy - r);
            let (bx, by) = (cx - r, cy + r);
            let (tx, ty) = (cx + r, cy + r);
            let side = |x0: f64, y0: f64, x1: f64, y1: f64| {
                (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
            };
            let d1 = side(ax, ay, bx, by);
            let d2 = side(bx, by, tx, ty);
            let d3 = side(tx, ty, ax, ay);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
        ShapeKind::Cross => {
            (dx.abs() <= r && dy.abs() <= r * CROSS_ARM)
                || (dy.abs() <= r && dx.abs() <= r * CROSS_ARM)
        }
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (RING_INNER * r) * (RING_INNER * r)
        }
        ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
    }
}

/// Renders one filled shape. `cx`, `cy`, and `r` are in normalized image
/// coordinates (`[0, 1]` across the full image, y pointing down). Pixels are
/// supersampled, so edges carry fractional coverage.
pub fn render_shape(
    shape: &str,
    color: &str,
    image_size: usize,
    cx: f64,
    cy: f64,
    r: f64,
) -> Result<Image> {
    let kind = shape_kind(shape)?;
    let fg = color_rgb(color)?;
    if image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let mut data = Vec::with_capacity(image_size * image_size * 3);
    let sub = SUPERSAMPLE as f64;
    for py in 0..image_size {
        for px in 0..image_size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / sub) / image_size as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / sub) / image_size as f64;
                    if inside(kind, cx, cy, r, x, y) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (sub * sub);
            for c in 0..3 {
                data.push(cov * fg[c] + (1.0 - cov) * BACKGROUND);
            }
        }
    }
    Image::new(image_size, 3, data)
}

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub image_size: usize,
    pub noise_std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Desk-scale default benchmark: 12 classes, 40 samples each.
    pub fn desk() -> DatasetSpec {
        DatasetSpec {
            colors: ["red", "green", "blue", "yellow"]
                .map(String::from)
                .to_vec(),
            shapes: ["square", "circle", "triangle"].map(String::from).to_vec(),
            image_size: 32,
            noise_std: 0.05,
            samples_per_class: 40,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for color in &self.colors {
            color_rgb(color)?;
        }
        for shape in &self.shapes {
            shape_kind(shape)?;
        }
        let classes = self.colors.len() * self.shapes.len();
        if classes < MIN_CLASSES {
            return Err(Error::Config(format!(
                "{} colors x {} shapes gives {classes} classes, need at least {MIN_CLASSES}",
                self.colors.len(),
                self.shapes.len()
            )));
        }
        let distinct: HashSet<&String> = self.colors.iter().collect();
        if distinct.len() != self.colors.len() {
            return Err(Error::Config("duplicate color word".into()));
        }
        let distinct: HashSet<&String> = self.shapes.iter().collect();
        if distinct.len() != self.shapes.len() {
            return Err(Error::Config("duplicate shape word".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be finite and nonnegative, got {}",
                self.noise_std
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!(
                "image_size {} is too small to render shapes",
                self.image_size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Class definitions in canonical order: colors outer, shapes inner.
    pub fn classes(&self) -> Vec<ClassDef> {
        let mut out = Vec::with_capacity(self.colors.len() * self.shapes.len());
        for color in &self.colors {
            for shape in &self.shapes {
                out.push(ClassDef {
                    color: color.clone(),
                    shape: shape.clone(),
                    name: format!("{color} {shape}"),
                });
            }
        }
        out
    }
}

/// One benchmark class: a color word, a shape word, and the `"color shape"`
/// name fed to the text tower.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub color: String,
    pub shape: String,
    pub name: String,
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// A fully rendered benchmark: the recipe, its classes, and all samples
/// grouped by class in label order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub classes: Vec<ClassDef>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Indices into `samples` carrying the given label, ascending.
    pub fn indices_of_class(&self, label: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// FNV-1a hash over the recipe, labels, and raw pixel bits. Two datasets
    /// generated from the same spec hash identically.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        for color in &self.spec.colors {
            h.update(color.as_bytes());
            h.update(&[0xff]);
        }
        for shape in &self.spec.shapes {
            h.update(shape.as_bytes());
            h.update(&[0xff]);
        }
        h.update(&(self.spec.image_size as u64).to_le_bytes());
        h.update(&self.spec.noise_std.to_le_bytes());
        h.update(&(self.spec.samples_per_class as u64).to_le_bytes());
        h.update(&self.spec.seed.to_le_bytes());
        for sample in &self.samples {
            h.update(&(sample.label as u64).to_le_bytes());
            for &v in &sample.image.data {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Incremental FNV-1a 64-bit hasher.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Fnv {
        Fnv(0xcbf29ce484222325)
    }

    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Renders the full dataset described by `spec`, deterministically under its
/// seed. Pixel noise is Gaussian per channel, clamped back into `[0, 1]`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(classes.len() * spec.samples_per_class);
    for (label, class) in classes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let cx = rng.gen_range(CENTER_MIN..CENTER_MAX);
            let cy = rng.gen_range(CENTER_MIN..CENTER_MAX);
            let r = rng.gen_range(RADIUS_MIN..RADIUS_MAX);
            let mut image = render_shape(&class.shape, &class.color, spec.image_size, cx, cy, r)?;
            if let Some(normal) = &noise {
                for v in &mut image.data {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            samples.push(Sample { image, label });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        classes,
        samples,
    })
}

/// How classes are divided into base (training) and novel (held-out) sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Seeded class-level holdout: this fraction of classes becomes novel.
    Random { novel_fraction: f64 },
    /// Hold out unseen color x shape pairs whose color and shape each still
    /// appear in some base class, so novel classes are recombinations of
    /// seen factors.
    Compositional,
}

/// A base-to-novel episode over one dataset. All entries are indices: class
/// lists index `dataset.classes`, sample lists index `dataset.samples`.
/// `train_pool` is parallel to `base_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub train_pool: Vec<Vec<usize>>,
    pub base_test: Vec<usize>,
    pub novel_test: Vec<usize>,
}

/// Splits a dataset's classes into base and novel sets and carves each base
/// class into a training pool and a test set.
pub fn split_base_novel(dataset: &Dataset, rule: SplitRule, seed: u64) -> Result<Task> {
    let n = dataset.classes.len();
    if dataset.spec.samples_per_class < 2 {
        return Err(Error::Protocol(
            "need at least 2 samples per class to carve a pool and a test set".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut base, mut novel) = match rule {
        SplitRule::Random { novel_fraction } => {
            if !(novel_fraction > 0.0 && novel_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "novel_fraction must lie strictly between 0 and 1, got {novel_fraction}"
                )));
            }
            let novel_count = (n as f64 * novel_fraction).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let novel: Vec<usize> = order[..novel_count.min(n)].to_vec();
            let base: Vec<usize> = order[novel_count.min(n)..].to_vec();
            (base, novel)
        }
        SplitRule::Compositional => {
            let c = dataset.spec.colors.len();
            let s = dataset.spec.shapes.len();
            let mut color_order: Vec<usize> = (0..c).collect();
            let mut shape_order: Vec<usize> = (0..s).collect();
            color_order.shuffle(&mut rng);
            shape_order.shuffle(&mut rng);
            let novel: Vec<usize> = (0..c)
                .map(|i| color_order[i] * s + shape_order[i % s])
                .collect();
            let base: Vec<usize> = (0..n).filter(|i| !novel.contains(i)).collect();
            (base, novel)
        }
    };
    base.sort_unstable();
    novel.sort_unstable();
    if base.len() < 2 || novel.len() < 2 {
        return Err(Error::Protocol(format!(
            "split leaves {} base and {} novel classes, need at least 2 each",
            base.len(),
            novel.len()
        )));
    }

    let pool_size =
        ((dataset.spec.samples_per_class * POOL_NUMERATOR) / POOL_DENOMINATOR).max(1);
    let mut train_pool = Vec::with_capacity(base.len());
    let mut base_test = Vec::new();
    for &class in &base {
        let mut indices = dataset.indices_of_class(class);
        indices.shuffle(&mut rng);
        let mut pool: Vec<usize> = indices[..pool_size].to_vec();
        let mut test: Vec<usize> = indices[pool_size..].to_vec();
        pool.sort_unstable();
        test.sort_unstable();
        base_test.extend(test);
        train_pool.push(pool);
    }
    let mut novel_test = Vec::new();
    for &class in &novel {
        novel_test.extend(dataset.indices_of_class(class));
    }
    Ok(Task {
        base_classes: base,
        novel_classes: novel,
        train_pool,
        base_test,
        novel_test,
    })
}

/// Draws exactly `k` training examples per base class from the task's pool,
/// without replacement. Returns indices into `dataset.samples`, grouped by
/// base class in `task.base_classes` order.
pub fn sample_few_shot(task: &Task, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Protocol("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(task.base_classes.len() * k);
    for (class, pool) in task.base_classes.iter().zip(&task.train_pool) {
        if pool.len() < k {
            return Err(Error::Protocol(format!(
                "base class {class} has a pool of {} samples, cannot draw K={k}",
                pool.len()
            )));
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .iter()
            .map(|i| pool[i])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

// ── On-disk format ──────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"HCDS";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, u32::try_from(s.len()).expect("string length fits u32"))?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

/// Writes the dataset as a single self-describing binary file.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, dataset.spec.colors.len() as u32)?;
    for color in &dataset.spec.colors {
        write_str(&mut w, color)?;
    }
    write_u32(&mut w, dataset.spec.shapes.len() as u32)?;
    for shape in &dataset.spec.shapes {
        write_str(&mut w, shape)?;
    }
    write_u32(&mut w, dataset.spec.image_size as u32)?;
    w.write_all(&dataset.spec.noise_std.to_le_bytes())?;
    write_u32(&mut w, dataset.spec.samples_per_class as u32)?;
    w.write_all(&dataset.spec.seed.to_le_bytes())?;
    write_u32(&mut w, dataset.samples.len() as u32)?;
    for sample in &dataset.samples {
        write_u32(&mut w, sample.label as u32)?;
        for &v in &sample.image.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads back a dataset written by [`save_dataset`], validating the recipe
/// and per-sample labels.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a dataset file (magic {magic:?})"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported dataset version {version}, expected {VERSION}"
        )));
    }
    let n_colors = read_u32(&mut r)? as usize;
    let colors: Vec<String> = (0..n_colors)
        .map(|_| read_str(&mut r))
        .collect::<Result<_>>()?;
    let n_shapes = read_u32(&mut r)? as usize;
    let shapes: Vec<String> = (0..n_shapes)
        .map(|_| read_str(&mut r))
        .collect::<Result<_>>()?;
    let image_size = read_u32(&mut r)? as usize;
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    let noise_std = f64::from_le_bytes(buf);
    let samples_per_class = read_u32(&mut r)? as usize;
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    let seed = u64::from_le_bytes(buf);
    let spec = DatasetSpec {
        colors,
        shapes,
        image_size,
        noise_std,
        samples_per_class,
        seed,
    };
    spec.validate()?;
    let classes = spec.classes();
    let n_samples = read_u32(&mut r)? as usize;
    if n_samples != classes.len() * samples_per_class {
        return Err(Error::Checkpoint(format!(
            "sample count {n_samples} does not match {} classes x {samples_per_class}",
            classes.len()
        )));
    }
    let pixels = image_size * image_size * 3;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let label = read_u32(&mut r)? as usize;
        if label >= classes.len() {
            return Err(Error::Checkpoint(format!(
                "label {label} out of range for {} classes",
                classes.len()
            )));
        }
        let mut data = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        samples.push(Sample {
            image: Image::new(image_size, 3, data)?,
            label,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after final sample".into()));
    }
    Ok(Dataset {
        spec,
        classes,
        samples,
    })
}

/// Human-readable manifest: one `key=value` per line, ending with the
/// content hash.
pub fn manifest(dataset: &Dataset) -> String {
    let spec = &dataset.spec;
    format!(
        "format=hicropl-dataset-v{VERSION}\n\
         classes={}\n\
         samples={}\n\
         samples_per_class={}\n\
         image_size={}\n\
         channels=3\n\
         noise_std={}\n\
         seed={}\n\
         colors={}\n\
         shapes={}\n\
         content_hash={:016x}\n",
        dataset.classes.len(),
        dataset.samples.len(),
        spec.samples_per_class,
        spec.image_size,
        spec.noise_std,
        spec.seed,
        spec.colors.join("+"),
        spec.shapes.join("+"),
        dataset.content_hash(),
    )
}
