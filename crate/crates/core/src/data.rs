//! Synthetic multi-scale shapes corpus.
//!
//! Each image is a gray field with Gaussian noise, one large distractor
//! shape and one small shape whose kind is the label. Small shapes draw
//! from a palette shared by every class, so color carries no label signal.
//!
//! Randomness: ChaCha8 seeded from `spec.seed`, with one stream per image
//! (`split << 40 | index`) and one per split for the label order.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::sten;
use crate::numerics::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["square", "circle", "cross", "triangle"];

const BACKGROUND: f64 = 0.5;
const MAX_RETRIES: usize = 100;
const SUPERSAMPLE: usize = 4;

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.1, 0.1],
    [0.1, 0.85, 0.1],
    [0.1, 0.2, 0.95],
    [0.95, 0.9, 0.1],
    [0.05, 0.05, 0.05],
    [1.0, 1.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Cross,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Cross, ShapeKind::Triangle];

    /// Whether the point `(dx, dy)` relative to the center lies inside a
    /// shape of extent `s`.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let h = s / 2.0;
        match self {
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Circle => dx * dx + dy * dy <= h * h,
            ShapeKind::Cross => {
                let t = (s / 6.0).max(0.5);
                (dx.abs() <= t && dy.abs() <= h) || (dy.abs() <= t && dx.abs() <= h)
            }
            ShapeKind::Triangle => {
                // apex up, base at the bottom edge of the box
                let depth = dy + h;
                (0.0..=s).contains(&depth) && dx.abs() <= depth / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Inclusive pixel extent range of the distractor.
    pub large_size: (usize, usize),
    /// Inclusive pixel extent range of the labeled shape.
    pub small_size: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
    /// Diagnostic: draw neither shape.
    #[serde(default)]
    pub no_shapes: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            train_count: 2000,
            test_count: 500,
            large_size: (24, 40),
            small_size: (3, 6),
            noise_std: 0.03,
            seed: 0,
            no_shapes: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(config_err(format!("num_classes {} outside 1..=4", self.num_classes)));
        }
        let (smin, smax) = self.small_size;
        let (lmin, lmax) = self.large_size;
        if smin == 0 || smin > smax || lmin > lmax {
            return Err(config_err("shape size ranges must be non-empty and positive"));
        }
        if smax >= lmin {
            return Err(config_err(format!("small max {smax} must be below large min {lmin}")));
        }
        if self.image_size < lmax + 2 {
            return Err(config_err(format!(
                "image size {} must be at least large max + 2 = {}",
                self.image_size,
                lmax + 2
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err("noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Images `[n, 3, S, S]` in `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Gathers `indices` into a `[k, 3, S, S]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let s = self.images.shape();
        let t = Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("gathered size");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn stream(seed: u64, split: Split, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | id);
    rng
}

/// Stream id reserved for a split's label order.
const LABEL_STREAM: u64 = (1 << 40) - 1;

pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        generate_split(spec, Split::Train, spec.train_count),
        generate_split(spec, Split::Test, spec.test_count),
    ))
}

fn generate_split(spec: &DatasetSpec, split: Split, count: usize) -> Dataset {
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut stream(spec.seed, split, LABEL_STREAM));
    let plane = 3 * spec.image_size * spec.image_size;
    let mut data = Vec::with_capacity(count * plane);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = stream(spec.seed, split, i as u64);
        data.extend(render(spec, label, &mut rng).into_iter().map(|v| v as f32));
    }
    let s = spec.image_size;
    Dataset {
        images: Tensor::new(vec![count, 3, s, s], data).expect("generated size"),
        labels,
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    color: [f64; 3],
}

impl Placed {
    /// Inclusive pixel bounding box `(x0, y0, x1, y1)`.
    fn bbox(&self) -> (f64, f64, f64, f64) {
        let h = self.size / 2.0;
        (self.cx - h, self.cy - h, self.cx + h, self.cy + h)
    }

    fn overlaps(&self, other: &Placed, margin: f64) -> bool {
        let (a0, a1, a2, a3) = self.bbox();
        let (b0, b1, b2, b3) = other.bbox();
        a0 - margin < b2 && b0 - margin < a2 && a1 - margin < b3 && b1 - margin < a3
    }
}

/// Uniform center keeping a shape of `size` fully inside the image.
fn center(rng: &mut ChaCha8Rng, image: usize, size: usize) -> f64 {
    let h = size as f64 / 2.0;
    rng.random_range(h..=(image as f64 - h))
}

fn render(spec: &DatasetSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.image_size;
    let mut img = vec![BACKGROUND; 3 * s * s];
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in &mut img {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if spec.no_shapes {
        return img;
    }

    let lsize = rng.random_range(spec.large_size.0..=spec.large_size.1);
    let large = Placed {
        kind: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
        cx: center(rng, s, lsize),
        cy: center(rng, s, lsize),
        size: lsize as f64,
        color: [rng.random(), rng.random(), rng.random()],
    };
    let ssize = rng.random_range(spec.small_size.0..=spec.small_size.1);
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    let mut small = Placed {
        kind: ShapeKind::ALL[label],
        cx: 0.0,
        cy: 0.0,
        size: ssize as f64,
        color,
    };
    let mut placed = false;
    for _ in 0..MAX_RETRIES {
        small.cx = center(rng, s, ssize);
        small.cy = center(rng, s, ssize);
        if !small.overlaps(&large, 1.0) {
            placed = true;
            break;
        }
    }
    if !placed {
        place_in_corner(&mut small, &large, s);
    }
    draw(&mut img, s, &large);
    draw(&mut img, s, &small);
    img
}

/// Puts `small` in the first corner whose box clears `large`. With
/// `image >= large max + 2` and a large shape narrower than
/// `image - 2 * (small + 2)`, one side is always free; otherwise the
/// corner farthest from the large center is used.
fn place_in_corner(small: &mut Placed, large: &Placed, image: usize) {
    let h = small.size / 2.0 + 1.0;
    let far = image as f64 - h;
    let corners = [(h, h), (far, h), (h, far), (far, far)];
    for (cx, cy) in corners {
        small.cx = cx;
        small.cy = cy;
        if !small.overlaps(large, 1.0) {
            return;
        }
    }
    let dist = |(x, y): (f64, f64)| (x - large.cx).powi(2) + (y - large.cy).powi(2);
    let best = corners
        .into_iter()
        .max_by(|a, b| dist(*a).total_cmp(&dist(*b)))
        .expect("four corners");
    (small.cx, small.cy) = best;
}

/// Alpha-blends `p` with coverage estimated on a supersampled grid.
fn draw(img: &mut [f64], s: usize, p: &Placed) {
    let (x0, y0, x1, y1) = p.bbox();
    let lo = |v: f64| (v.floor().max(0.0)) as usize;
    let hi = |v: f64| (v.ceil() as usize).min(s);
    let plane = s * s;
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in lo(y0)..hi(y1) {
        for px in lo(x0)..hi(x1) {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    if p.kind.contains(x - p.cx, y - p.cy, p.size) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                let v = &mut img[c * plane + py * s + px];
                *v = (1.0 - a) * *v + a * p.color[c];
            }
        }
    }
}

fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}_images.sten")),
        dir.join(format!("{split}_labels.sten")),
    )
}

/// Writes `<split>_images.sten` and `<split>_labels.sten` under `dir`.
pub fn save_set(dir: impl AsRef<Path>, split: &str, set: &Dataset) -> Result<()> {
    let (ip, lp) = split_paths(dir.as_ref(), split);
    sten::save(ip, &set.images)?;
    let labels: Vec<f32> = set.labels.iter().map(|&l| l as f32).collect();
    sten::save(lp, &Tensor::new(vec![labels.len()], labels)?)
}

pub fn load_set(dir: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let (ip, lp) = split_paths(dir.as_ref(), split);
    let images = sten::load(&ip)?.exact::<f32>().ok_or_else(|| {
        Error::Config(format!("{} does not hold float32 images", ip.display()))
    })?;
    let labels_t = sten::load(&lp)?.into_dtype::<f64>();
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::Shape(format!("image tensor {s:?} is not [n, 3, S, S]")));
    }
    if labels_t.shape() != [s[0]] {
        return Err(Error::Shape(format!(
            "{} images but label tensor {:?}",
            s[0],
            labels_t.shape()
        )));
    }
    let labels = labels_t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("label {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { images, labels })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub prng: String,
    pub classes: Vec<String>,
    pub train_histogram: Vec<usize>,
    pub test_histogram: Vec<usize>,
}

pub const MANIFEST: &str = "manifest.json";

/// Generates, saves both splits, the manifest and `previews` PPM files.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec, previews: usize) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (train, test) = generate(spec)?;
    save_set(dir, "train", &train)?;
    save_set(dir, "test", &test)?;
    let manifest = Manifest {
        spec: spec.clone(),
        prng: "ChaCha8, per-image stream split << 40 | index".into(),
        classes: CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        train_histogram: train.histogram(spec.num_classes),
        test_histogram: test.histogram(spec.num_classes),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    for i in 0..previews.min(train.len()) {
        let name = format!("preview_{i}_{}.ppm", CLASS_NAMES[train.labels[i]]);
        export_ppm(&train.images.select(i), dir.join(name))?;
    }
    Ok((train, test))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

/// Binary P6 with max 255; `image` is `[3, H, W]` in `[0, 1]`.
pub fn ppm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("PPM export needs [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn export_ppm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ppm_bytes(image)?)?;
    Ok(())
}

/// Parses a binary P6 file with max value 255 into `[3, H, W]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                msg: "truncated PPM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    if fields[0].1 != "P6" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected P6, found {}", fields[0].1),
        });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Format {
            offset: fields[i].0,
            msg: format!("bad header number `{}`", fields[i].1),
        })
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(Error::Format {
            offset: fields[3].0,
            msg: format!("max value {max}, only 255 is supported"),
        });
    }
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| Error::Format {
        offset: bytes.len(),
        msg: format!("payload for {w}x{h} truncated"),
    })?;
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}
