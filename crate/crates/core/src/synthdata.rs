//! Deterministic synthetic shapes detection data with disjoint base/novel
//! class splits, plus K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::exec::Exec;

pub const IMAGE_SIZE: usize = 64;
pub const MAX_OBJECTS: usize = 4;
const BACKGROUND_LEVEL: f64 = 0.35;
const BACKGROUND_SIGMA: f64 = 0.05;
const MIN_OBJECT: usize = 10;
const MAX_OBJECT: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Plus,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Plus,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Plus => "plus",
            ShapeKind::Star => "star",
        }
    }

    /// Membership test in normalised coordinates `(u, v) ∈ [-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => {
                let half = 0.28 * std::f64::consts::SQRT_2;
                (u - v).abs() <= half || (u + v).abs() <= half
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Plus => u.abs() <= 0.3 || v.abs() <= 0.3,
            ShapeKind::Star => point_in_star(u, v),
        }
    }
}

fn point_in_star(u: f64, v: f64) -> bool {
    let verts: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 1.0 } else { 0.42 };
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

const COLOR_NAMES: [&str; 16] = [
    "red", "orange", "amber", "yellow", "lime", "green", "jade", "teal", "cyan", "azure", "blue", "indigo", "violet",
    "purple", "magenta", "rose",
];

/// Evenly spaced hues at fixed saturation and value.
fn palette_color(index: usize) -> [f64; 3] {
    let h = 6.0 * index as f64 / COLOR_NAMES.len() as f64;
    let (s, v) = (0.85, 0.95);
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h.floor() as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Axis-aligned box in pixel units, serialised as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn is_valid_within(&self, width: f64, height: f64) -> bool {
        0.0 <= self.x0 && self.x0 < self.x1 && self.x1 <= width && 0.0 <= self.y0 && self.y0 < self.y1 && self.y1 <= height
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    fn overlaps_with_margin(&self, other: &BBox, margin: f64) -> bool {
        self.x0 < other.x1 + margin && other.x0 < self.x1 + margin && self.y0 < other.y1 + margin && other.y0 < self.y1 + margin
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub is_novel: bool,
}

/// An image with its annotations; pixels are `size × size × 3`, row-major,
/// channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: usize,
    pub size: usize,
    pub pixels: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl AnnotatedImage {
    pub fn boxes_of(&self, class_id: usize) -> Vec<BBox> {
        self.boxes
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class_id)
            .map(|(b, _)| *b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub file: String,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub images: Vec<ImageRecord>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub num_novel: usize,
    pub images_per_class: usize,
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            num_novel: 4,
            images_per_class: 80,
            image_size: IMAGE_SIZE,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_class == 0 {
            return Err(VistexError::InvalidConfig("images_per_class must be >= 1".into()));
        }
        if self.image_size != IMAGE_SIZE {
            return Err(VistexError::InvalidConfig(format!(
                "image_size must be {IMAGE_SIZE}"
            )));
        }
        let max = ShapeKind::ALL.len() * COLOR_NAMES.len();
        if self.num_classes > max {
            return Err(VistexError::InvalidConfig(format!(
                "at most {max} distinct (shape, color) classes"
            )));
        }
        Ok(())
    }
}

/// Splits `0..num_classes` into disjoint base and novel id sets (both sorted).
pub fn split_classes(num_classes: usize, num_novel: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_novel == 0 || num_novel >= num_classes {
        return Err(VistexError::InvalidSplit(format!(
            "need 1 <= num_novel < num_classes, got {num_novel} of {num_classes}"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut novel = ids[..num_novel].to_vec();
    let mut base = ids[num_novel..].to_vec();
    novel.sort_unstable();
    base.sort_unstable();
    Ok((base, novel))
}

/// Class `c` gets hue `c mod 16` of the color wheel and shape
/// `(c + c / 16) mod 8`, so (shape, color) pairs stay unique up to 128
/// classes and every shape recurs across several hues.
pub fn class_specs(num_classes: usize, novel: &[usize]) -> Vec<ClassSpec> {
    (0..num_classes)
        .map(|c| {
            let n_colors = COLOR_NAMES.len();
            let shape = ShapeKind::ALL[(c + c / n_colors) % ShapeKind::ALL.len()];
            let (cname, color) = (COLOR_NAMES[c % n_colors], palette_color(c % n_colors));
            ClassSpec {
                id: c,
                name: format!("{cname}_{}", shape.name()),
                shape,
                color,
                is_novel: novel.contains(&c),
            }
        })
        .collect()
}

fn image_seed(seed: u64, id: usize) -> u64 {
    // splitmix64 finaliser over (seed, id)
    let mut z = seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Rendered {
    pixels: Vec<u8>,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
}

fn render_image(id: usize, primary: usize, pool: &[usize], classes: &[ClassSpec], size: usize, seed: u64) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, id));
    let mut px: Vec<f64> = (0..size * size * 3)
        .map(|_| BACKGROUND_LEVEL + BACKGROUND_SIGMA * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let n_objects = rng.random_range(1..=MAX_OBJECTS);
    let mut placed: Vec<(BBox, usize)> = Vec::new();
    for k in 0..n_objects {
        let class_id = if k == 0 {
            primary
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        for _attempt in 0..50 {
            let s = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
            let x = rng.random_range(0..=size - s);
            let y = rng.random_range(0..=size - s);
            let square = BBox::new(x as f64, y as f64, (x + s) as f64, (y + s) as f64);
            if placed.iter().any(|(b, _)| b.overlaps_with_margin(&square, 2.0)) {
                continue;
            }
            if let Some(tight) = paint_shape(&mut px, size, &classes[class_id], x, y, s) {
                placed.push((tight, class_id));
            }
            break;
        }
    }
    let pixels = px
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (boxes, labels) = placed.into_iter().unzip();
    Rendered { pixels, boxes, labels }
}

/// Paints an anti-aliased solid shape into the `s × s` square at `(x, y)`
/// and returns the tight box of pixels with at least half coverage.
fn paint_shape(px: &mut [f64], size: usize, class: &ClassSpec, x: usize, y: usize, s: usize) -> Option<BBox> {
    const SS: usize = 4;
    let half = s as f64 / 2.0;
    let (cx, cy) = (x as f64 + half, y as f64 + half);
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for py in y..y + s {
        for pxi in x..x + s {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let fx = pxi as f64 + (sx as f64 + 0.5) / SS as f64;
                    let fy = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    if class.shape.contains((fx - cx) / half, (fy - cy) / half) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = hits as f64 / (SS * SS) as f64;
            let base = (py * size + pxi) * 3;
            for ch in 0..3 {
                px[base + ch] = px[base + ch] * (1.0 - cov) + class.color[ch] * cov;
            }
            if cov >= 0.5 {
                bx0 = bx0.min(pxi);
                by0 = by0.min(py);
                bx1 = bx1.max(pxi + 1);
                by1 = by1.max(py + 1);
            }
        }
    }
    (bx0 < bx1 && by0 < by1).then(|| BBox::new(bx0 as f64, by0 as f64, bx1 as f64, by1 as f64))
}

/// A dataset held in memory: the manifest plus 8-bit pixels per record.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub image_size: usize,
    pixels: Vec<Vec<u8>>,
    index: BTreeMap<usize, usize>,
}

impl Dataset {
    fn from_parts(manifest: DatasetManifest, image_size: usize, pixels: Vec<Vec<u8>>) -> Self {
        let index = manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i))
            .collect();
        Self {
            manifest,
            image_size,
            pixels,
            index,
        }
    }

    /// Renders the full dataset in memory without touching disk.
    pub fn render(config: &DatasetConfig, seed: u64) -> Result<Self> {
        render_with(config, seed, Exec::default())
    }

    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn record(&self, id: usize) -> Result<&ImageRecord> {
        self.index
            .get(&id)
            .map(|&i| &self.manifest.images[i])
            .ok_or_else(|| VistexError::InvalidInput(format!("unknown image id {id}")))
    }

    pub fn image(&self, id: usize) -> Result<AnnotatedImage> {
        let i = *self
            .index
            .get(&id)
            .ok_or_else(|| VistexError::InvalidInput(format!("unknown image id {id}")))?;
        let rec = &self.manifest.images[i];
        Ok(AnnotatedImage {
            id,
            size: self.image_size,
            pixels: self.pixels[i].iter().map(|&b| b as f64 / 255.0).collect(),
            boxes: rec.boxes.clone(),
            labels: rec.labels.clone(),
        })
    }

    pub fn raw_pixels(&self, id: usize) -> Option<&[u8]> {
        self.index.get(&id).map(|&i| self.pixels[i].as_slice())
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.manifest.split.novel.contains(&class_id)
    }

    /// Ids of images whose every label is a base class.
    pub fn base_image_ids(&self) -> Vec<usize> {
        let novel: BTreeSet<usize> = self.manifest.split.novel.iter().copied().collect();
        self.manifest
            .images
            .iter()
            .filter(|r| r.labels.iter().all(|l| !novel.contains(l)))
            .map(|r| r.id)
            .collect()
    }

    pub fn class_names(&self) -> BTreeMap<usize, String> {
        self.manifest
            .classes
            .iter()
            .map(|c| (c.id, c.name.clone()))
            .collect()
    }

    /// Writes `manifest.json` and `images/<id>.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| VistexError::io(&img_dir, e))?;
        for (rec, px) in self.manifest.images.iter().zip(&self.pixels) {
            write_png(&dir.join(&rec.file), px, self.image_size)?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| VistexError::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| VistexError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| VistexError::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| VistexError::json(&path, e))?;
        manifest.validate(IMAGE_SIZE)?;
        let pixels = manifest
            .images
            .iter()
            .map(|r| read_png(&dir.join(&r.file), IMAGE_SIZE))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(manifest, IMAGE_SIZE, pixels))
    }
}

impl DatasetManifest {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let base: BTreeSet<_> = self.split.base.iter().collect();
        if self.split.novel.iter().any(|c| base.contains(c)) {
            return Err(VistexError::InvalidSplit("base and novel class sets overlap".into()));
        }
        let all: BTreeSet<usize> = self.split.base.iter().chain(&self.split.novel).copied().collect();
        let n = image_size as f64;
        for rec in &self.images {
            if rec.boxes.len() != rec.labels.len() || rec.boxes.is_empty() || rec.boxes.len() > MAX_OBJECTS {
                return Err(VistexError::InvalidInput(format!("image {}: bad annotation count", rec.id)));
            }
            if let Some(b) = rec.boxes.iter().find(|b| !b.is_valid_within(n, n)) {
                return Err(VistexError::InvalidInput(format!("image {}: box {b:?} out of bounds", rec.id)));
            }
            if let Some(l) = rec.labels.iter().find(|l| !all.contains(l)) {
                return Err(VistexError::InvalidInput(format!("image {}: unknown label {l}", rec.id)));
            }
        }
        Ok(())
    }

    /// Image ids containing at least one instance of `class_id`.
    pub fn images_with_class(&self, class_id: usize) -> Vec<usize> {
        self.images
            .iter()
            .filter(|r| r.labels.contains(&class_id))
            .map(|r| r.id)
            .collect()
    }
}

pub fn render_with(config: &DatasetConfig, seed: u64, exec: Exec) -> Result<Dataset> {
    config.validate()?;
    let (base, novel) = split_classes(config.num_classes, config.num_novel, seed)?;
    let classes = class_specs(config.num_classes, &novel);
    let jobs: Vec<usize> = (0..config.num_classes * config.images_per_class).collect();
    let rendered = exec.map(&jobs, |&id| {
        let primary = id / config.images_per_class;
        render_image(id, primary, &[primary], &classes, config.image_size, seed)
    });
    let mut images = Vec::with_capacity(rendered.len());
    let mut pixels = Vec::with_capacity(rendered.len());
    for (id, r) in rendered.into_iter().enumerate() {
        images.push(ImageRecord {
            id,
            file: format!("images/{id}.png"),
            boxes: r.boxes,
            labels: r.labels,
        });
        pixels.push(r.pixels);
    }
    let manifest = DatasetManifest {
        seed,
        classes,
        images,
        split: Split { base, novel },
    };
    Ok(Dataset::from_parts(manifest, config.image_size, pixels))
}

/// Renders the dataset and writes it to `out_dir`.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let ds = Dataset::render(config, seed)?;
    ds.write(out_dir)?;
    Ok(ds.manifest)
}

fn write_png(path: &Path, pixels: &[u8], size: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| VistexError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| VistexError::Image {
        path: PathBuf::from(path),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(pixels).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

fn read_png(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img_err = |message: String| VistexError::Image {
        path: PathBuf::from(path),
        message,
    };
    let file = fs::File::open(path).map_err(|e| VistexError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(size * size * 3)];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(img_err("expected 8-bit RGB".into()));
    }
    if info.width as usize != size || info.height as usize != size {
        return Err(img_err(format!("expected {size}x{size}")));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

/// One K-shot episode: supports per class and the disjoint query set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k: usize,
    pub support_ids: BTreeMap<usize, Vec<usize>>,
    /// Index of "the" exemplar box in each support image, aligned with
    /// `support_ids`.
    pub exemplar_boxes: BTreeMap<usize, Vec<usize>>,
    pub query_ids: Vec<usize>,
    pub class_subset: Vec<usize>,
}

impl EpisodeSpec {
    pub fn all_support_ids(&self) -> BTreeSet<usize> {
        self.support_ids.values().flatten().copied().collect()
    }

    /// Checks the support/query disjointness and per-class shot count.
    pub fn check(&self) -> Result<()> {
        let supports = self.all_support_ids();
        if let Some(id) = self.query_ids.iter().find(|id| supports.contains(id)) {
            return Err(VistexError::Protocol(format!("image {id} is both support and query")));
        }
        let total: usize = self.support_ids.values().map(Vec::len).sum();
        if total != supports.len() {
            return Err(VistexError::Protocol("support image reused across classes".into()));
        }
        for c in &self.class_subset {
            if self.support_ids.get(c).map_or(0, Vec::len) != self.k {
                return Err(VistexError::Protocol(format!("class {c} lacks {} supports", self.k)));
            }
        }
        Ok(())
    }
}

pub fn sample_episode(manifest: &DatasetManifest, k: usize, class_subset: &[usize], seed: u64) -> Result<EpisodeSpec> {
    if k == 0 {
        return Err(VistexError::InvalidInput("K must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: BTreeSet<usize> = class_subset.iter().copied().collect();
    let mut used = BTreeSet::new();
    let mut support_ids = BTreeMap::new();
    let mut exemplar_boxes = BTreeMap::new();
    for &c in &classes {
        let with_c = manifest.images_with_class(c);
        if with_c.len() <= k {
            return Err(VistexError::InsufficientData(format!(
                "class {c} has {} images, need more than K={k}",
                with_c.len()
            )));
        }
        let mut free: Vec<usize> = with_c.into_iter().filter(|id| !used.contains(id)).collect();
        if free.len() < k {
            return Err(VistexError::InsufficientData(format!(
                "class {c}: only {} images left after other classes' supports",
                free.len()
            )));
        }
        free.shuffle(&mut rng);
        let mut chosen: Vec<usize> = free[..k].to_vec();
        chosen.sort_unstable();
        let boxes = chosen
            .iter()
            .map(|&id| {
                let rec = &manifest.images[manifest.images.iter().position(|r| r.id == id).unwrap()];
                let idx: Vec<usize> = (0..rec.labels.len()).filter(|&i| rec.labels[i] == c).collect();
                idx[rng.random_range(0..idx.len())]
            })
            .collect();
        used.extend(chosen.iter().copied());
        support_ids.insert(c, chosen);
        exemplar_boxes.insert(c, boxes);
    }
    let query_ids = manifest
        .images
        .iter()
        .filter(|r| !used.contains(&r.id) && r.labels.iter().any(|l| classes.contains(l)))
        .map(|r| r.id)
        .collect();
    let ep = EpisodeSpec {
        k,
        support_ids,
        exemplar_boxes,
        query_ids,
        class_subset: classes.into_iter().collect(),
    };
    ep.check()?;
    Ok(ep)
}
