//! Deterministic synthetic multi-label dataset: 0-3 shape objects per image
//! on textured, cluttered backgrounds, with hidden ground-truth boxes written
//! only for evaluation splits. Class frequencies stay balanced and every
//! object's box tightly bounds its rendered pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, GtImage};
use crate::fsio;
use crate::geometry::PixelBox;
use crate::image::{read_ppm, write_ppm};
use crate::proposal::ImageSample;
use crate::tensor::Tensor;

/// Desk-scale class set: six shapes in two super-categories, enough to
/// exercise tree cascades.
pub const DESK_CLASSES: [(&str, &str); 6] = [
    ("disk", "curved"),
    ("ring", "curved"),
    ("triangle", "polygonal"),
    ("square", "polygonal"),
    ("cross", "polygonal"),
    ("star", "polygonal"),
];

/// Smallest object scale as a fraction of the image side.
pub const MIN_OBJECT_SCALE: f64 = 0.15;
/// Largest object scale as a fraction of the image side.
pub const MAX_OBJECT_SCALE: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub name: String,
    pub count: usize,
    /// Eval splits also write boxes.txt; train splits expose labels only.
    pub with_boxes: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    /// (class name, super-category) pairs.
    pub classes: Vec<(String, String)>,
    pub side: usize,
    pub seed: u64,
    pub splits: Vec<SplitSpec>,
    /// Textured background and distractor strokes. Disabled by tests that
    /// pixel-scan rendered boxes against a flat background.
    pub clutter: bool,
}

impl DatasetConfig {
    /// The standard desk dataset: two training tranches plus an eval split.
    pub fn desk(seed: u64, train: usize, train2: usize, eval_count: usize) -> DatasetConfig {
        DatasetConfig {
            classes: DESK_CLASSES
                .iter()
                .map(|&(n, s)| (n.to_string(), s.to_string()))
                .collect(),
            side: 64,
            seed,
            splits: vec![
                SplitSpec { name: "train".into(), count: train, with_boxes: false },
                SplitSpec { name: "train2".into(), count: train2, with_boxes: false },
                SplitSpec { name: "eval".into(), count: eval_count, with_boxes: true },
            ],
            clutter: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 3 {
            return Err(Error::Config("need at least 3 classes".to_string()));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(Error::Config("overlapping class definitions".to_string()));
        }
        let mut cats: Vec<&str> = self.classes.iter().map(|(_, s)| s.as_str()).collect();
        cats.sort_unstable();
        cats.dedup();
        if cats.len() < 2 {
            return Err(Error::Config("need at least 2 super-categories".to_string()));
        }
        if self.side < 16 {
            return Err(Error::Config(format!("image side {} too small", self.side)));
        }
        if self.splits.is_empty() {
            return Err(Error::Config("need at least one split".to_string()));
        }
        Ok(())
    }
}

/// Dataset manifest stored at the root of a generated dataset.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub classes: Vec<(String, String)>,
    pub side: usize,
    pub seed: u64,
    pub splits: Vec<SplitSpec>,
}

impl Manifest {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Super-category name -> class ids, in first-appearance order.
    pub fn super_categories(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, (_, cat)) in self.classes.iter().enumerate() {
            if !groups.contains_key(cat) {
                order.push(cat.clone());
            }
            groups.entry(cat.clone()).or_default().push(i);
        }
        order
            .into_iter()
            .map(|cat| {
                let ids = groups[&cat].clone();
                (cat, ids)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "side {}", self.side);
        let classes: Vec<String> = self
            .classes
            .iter()
            .map(|(n, s)| format!("{n}:{s}"))
            .collect();
        let _ = writeln!(out, "classes {}", classes.join(" "));
        for s in &self.splits {
            let kind = if s.with_boxes { "labels+boxes" } else { "labels" };
            let _ = writeln!(out, "split {} {} {}", s.name, s.count, kind);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Manifest> {
        let mut seed = None;
        let mut side = None;
        let mut classes = Vec::new();
        let mut splits = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("seed") => {
                    seed = parts.next().and_then(|v| v.parse().ok());
                }
                Some("side") => {
                    side = parts.next().and_then(|v| v.parse().ok());
                }
                Some("classes") => {
                    for tok in parts {
                        let (name, cat) = tok
                            .split_once(':')
                            .ok_or_else(|| Error::Parse(format!("bad class token {tok:?}")))?;
                        classes.push((name.to_string(), cat.to_string()));
                    }
                }
                Some("split") => {
                    let name = parts.next().unwrap_or_default().to_string();
                    let count = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("bad split line {line:?}")))?;
                    let with_boxes = parts.next() == Some("labels+boxes");
                    splits.push(SplitSpec { name, count, with_boxes });
                }
                _ => return Err(Error::Parse(format!("bad manifest line {line:?}"))),
            }
        }
        Ok(Manifest {
            classes,
            side: side.ok_or_else(|| Error::Parse("manifest missing side".to_string()))?,
            seed: seed.ok_or_else(|| Error::Parse("manifest missing seed".to_string()))?,
            splits,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Ring,
    Triangle,
    Square,
    Cross,
    Star,
}

const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Ring,
    Shape::Triangle,
    Shape::Square,
    Shape::Cross,
    Shape::Star,
];

impl Shape {
    /// Membership test in local coordinates already rotated into the shape
    /// frame, with `half` the nominal half-extent.
    fn contains(&self, u: f64, v: f64, half: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= half * half,
            Shape::Ring => {
                let d2 = u * u + v * v;
                let inner = 0.55 * half;
                d2 <= half * half && d2 >= inner * inner
            }
            Shape::Square => u.abs() <= half && v.abs() <= half,
            Shape::Cross => {
                let bar = 0.34 * half;
                (u.abs() <= bar && v.abs() <= half) || (v.abs() <= bar && u.abs() <= half)
            }
            Shape::Triangle => point_in_polygon(u, v, &Shape::Triangle.polygon(half)),
            Shape::Star => point_in_polygon(u, v, &Shape::Star.polygon(half)),
        }
    }

    /// Outline vertices in the local frame for polygonal shapes.
    fn polygon(&self, half: f64) -> Vec<(f64, f64)> {
        match self {
            Shape::Triangle => (0..3)
                .map(|k| {
                    let a = -std::f64::consts::FRAC_PI_2
                        + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    (half * a.cos(), half * a.sin())
                })
                .collect(),
            Shape::Star => (0..10)
                .map(|k| {
                    let r = if k % 2 == 0 { half } else { 0.50 * half };
                    let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    (r * a.cos(), r * a.sin())
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn point_in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    // even-odd ray cast
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % n];
        if (y1 > y) != (y2 > y) {
            let xi = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
            if x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

struct PlacedObject {
    class_id: usize,
    bbox: PixelBox,
    pixels: Vec<(usize, usize)>,
    color: [f64; 3],
}

/// Rasterizes one shape, returning its covered pixels and their tight box,
/// or None if the placement degenerates.
#[allow(clippy::too_many_arguments)]
fn rasterize(
    shape: Shape,
    class_id: usize,
    cx: f64,
    cy: f64,
    half: f64,
    theta: f64,
    color: [f64; 3],
    side: usize,
) -> Option<PlacedObject> {
    let (sin, cos) = theta.sin_cos();
    let reach = half * 1.5 + 2.0;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil().min(side as f64 - 1.0)) as usize;
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil().min(side as f64 - 1.0)) as usize;
    let mut pixels = Vec::new();
    let (mut bx1, mut by1, mut bx2, mut by2) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // rotate into the shape frame
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if shape.contains(u, v, half) {
                pixels.push((x, y));
                bx1 = bx1.min(x as i64);
                by1 = by1.min(y as i64);
                bx2 = bx2.max(x as i64);
                by2 = by2.max(y as i64);
            }
        }
    }
    if pixels.is_empty() {
        return None;
    }
    Some(PlacedObject {
        class_id,
        bbox: PixelBox::new(bx1, by1, bx2, by2),
        pixels,
        color,
    })
}

fn boxes_separated(a: &PixelBox, b: &PixelBox, margin: i64) -> bool {
    a.x2 + margin < b.x1 || b.x2 + margin < a.x1 || a.y2 + margin < b.y1 || b.y2 + margin < a.y1
}

fn random_color(rng: &mut ChaCha20Rng, bg: [f64; 3]) -> [f64; 3] {
    loop {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let dist = c
            .iter()
            .zip(bg.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if dist >= 0.45 {
            return c;
        }
    }
}

/// Low-frequency value noise plus distractor strokes; returns the base color.
fn paint_background(
    img: &mut Tensor,
    side: usize,
    clutter: bool,
    rng: &mut ChaCha20Rng,
) -> [f64; 3] {
    let base = [
        0.30 + 0.25 * rng.random::<f64>(),
        0.30 + 0.25 * rng.random::<f64>(),
        0.30 + 0.25 * rng.random::<f64>(),
    ];
    if !clutter {
        for p in 0..3 {
            for y in 0..side {
                for v in img.row3_mut(p, y) {
                    *v = base[p];
                }
            }
        }
        return base;
    }
    // 5x5 noise grid, bilinearly upsampled
    let g = 5usize;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let amp = 0.06;
    for y in 0..side {
        let fy = y as f64 / (side - 1) as f64 * (g - 1) as f64;
        let y0 = (fy.floor() as usize).min(g - 2);
        let wy = fy - y0 as f64;
        for x in 0..side {
            let fx = x as f64 / (side - 1) as f64 * (g - 1) as f64;
            let x0 = (fx.floor() as usize).min(g - 2);
            let wx = fx - x0 as f64;
            let n = grid[y0 * g + x0] * (1.0 - wy) * (1.0 - wx)
                + grid[y0 * g + x0 + 1] * (1.0 - wy) * wx
                + grid[(y0 + 1) * g + x0] * wy * (1.0 - wx)
                + grid[(y0 + 1) * g + x0 + 1] * wy * wx;
            for p in 0..3 {
                img.set3(p, y, x, (base[p] + amp * n).clamp(0.0, 1.0));
            }
        }
    }
    let strokes = rng.random_range(1..=3);
    for _ in 0..strokes {
        let color = random_color(rng, base);
        let x1 = rng.random_range(0.0..side as f64);
        let y1 = rng.random_range(0.0..side as f64);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(5.0..18.0);
        let steps = (len * 2.0) as usize + 1;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = x1 + len * angle.cos() * t;
            let y = y1 + len * angle.sin() * t;
            let (xi, yi) = (x.round() as i64, y.round() as i64);
            if xi >= 0 && yi >= 0 && (xi as usize) < side && (yi as usize) < side {
                for p in 0..3 {
                    img.set3(p, yi as usize, xi as usize, color[p]);
                }
            }
        }
    }
    base
}

struct GeneratedImage {
    pixels: Tensor,
    labels: Vec<f64>,
    boxes: Vec<(usize, PixelBox)>,
}

fn generate_image(
    cfg: &DatasetConfig,
    class_counts: &mut [usize],
    rng: &mut ChaCha20Rng,
) -> GeneratedImage {
    let side = cfg.side;
    let classes = cfg.classes.len();
    let mut img = Tensor::zeros(&[3, side, side]);
    let bg = paint_background(&mut img, side, cfg.clutter, rng);

    let roll: f64 = rng.random();
    let object_count = if roll < 0.10 {
        0
    } else if roll < 0.50 {
        1
    } else if roll < 0.80 {
        2
    } else {
        3
    };

    let min_area = (MIN_OBJECT_SCALE * side as f64).powi(2);
    let mut placed: Vec<PlacedObject> = Vec::new();
    for slot in 0..object_count {
        // favor classes lagging the balance
        let min_count = *class_counts.iter().min().unwrap();
        let candidates: Vec<usize> = (0..classes)
            .filter(|&c| class_counts[c] <= min_count + 1)
            .collect();
        let class_id = candidates[rng.random_range(0..candidates.len())];
        let shape = SHAPES[class_id % SHAPES.len()];

        // later objects get smaller to keep placement feasible
        let hi = (MAX_OBJECT_SCALE - 0.11 * slot as f64).max(MIN_OBJECT_SCALE + 0.09);
        let mut success = None;
        for _attempt in 0..14 {
            let scale = rng.random_range(MIN_OBJECT_SCALE + 0.03..hi);
            let size = scale * side as f64;
            let half = size / 2.0;
            let margin = half + 1.0;
            let cx = rng.random_range(margin..side as f64 - margin);
            let cy = rng.random_range(margin..side as f64 - margin);
            let theta = match shape {
                Shape::Disk | Shape::Ring => 0.0,
                _ => rng.random_range(-0.45..0.45),
            };
            let color = random_color(rng, bg);
            if let Some(obj) = rasterize(shape, class_id, cx, cy, half, theta, color, side) {
                if (obj.bbox.area() as f64) < min_area {
                    continue;
                }
                if placed.iter().all(|p| boxes_separated(&p.bbox, &obj.bbox, 2)) {
                    success = Some(obj);
                    break;
                }
            }
        }
        if let Some(obj) = success {
            class_counts[obj.class_id] += 1;
            placed.push(obj);
        }
    }

    let mut labels = vec![0.0; classes];
    let mut boxes = Vec::with_capacity(placed.len());
    for obj in &placed {
        labels[obj.class_id] = 1.0;
        boxes.push((obj.class_id, obj.bbox));
        for &(x, y) in &obj.pixels {
            for p in 0..3 {
                img.set3(p, y, x, obj.color[p]);
            }
        }
    }
    GeneratedImage {
        pixels: img,
        labels,
        boxes,
    }
}

/// Generates the dataset on disk: per split `images/*.ppm` plus `labels.txt`
/// (and `boxes.txt` for eval splits), with `manifest.txt` at the root.
pub fn generate(cfg: &DatasetConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    for (split_idx, split) in cfg.splits.iter().enumerate() {
        let dir = out.join(&split.name);
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        let mut rng = ChaCha20Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(split_idx as u64 + 1),
        );
        let mut class_counts = vec![0usize; cfg.classes.len()];
        let mut labels_txt = String::new();
        let mut boxes_txt = String::new();
        for i in 0..split.count {
            let id = format!("{}_{:05}", split.name, i);
            let g = generate_image(cfg, &mut class_counts, &mut rng);
            write_ppm(&img_dir.join(format!("{id}.ppm")), &g.pixels)?;
            let bits: Vec<String> = g.labels.iter().map(|&b| format!("{}", b as u8)).collect();
            let _ = writeln!(labels_txt, "{id} {}", bits.join(" "));
            if split.with_boxes {
                for (c, b) in &g.boxes {
                    let _ = writeln!(boxes_txt, "{id} {c} {} {} {} {}", b.x1, b.y1, b.x2, b.y2);
                }
            }
        }
        fsio::write_atomic_str(&dir.join("labels.txt"), &labels_txt)?;
        if split.with_boxes {
            fsio::write_atomic_str(&dir.join("boxes.txt"), &boxes_txt)?;
        }
    }
    let manifest = Manifest {
        classes: cfg.classes.clone(),
        side: cfg.side,
        seed: cfg.seed,
        splits: cfg.splits.clone(),
    };
    fsio::write_atomic_str(&out.join("manifest.txt"), &manifest.to_text())?;
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(root.join("manifest.txt"))?;
    Manifest::from_text(&text)
}

/// Loads images and labels for a split. Never reads boxes.txt: training code
/// paths depend only on this loader.
pub fn load_split_samples(root: &Path, split: &str) -> Result<Vec<ImageSample>> {
    let dir = root.join(split);
    let labels_text = std::fs::read_to_string(dir.join("labels.txt"))?;
    let mut out = Vec::new();
    for line in labels_text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("bad label line {line:?}")))?
            .to_string();
        let labels: Vec<f64> = parts
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("bad label bits in {line:?}")))?;
        let pixels = read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
        out.push(ImageSample { id, pixels, labels });
    }
    Ok(out)
}

/// Loads evaluation ground truth (labels plus boxes) for a split.
pub fn load_split_ground_truth(root: &Path, split: &str) -> Result<GroundTruth> {
    let dir = root.join(split);
    let labels_text = std::fs::read_to_string(dir.join("labels.txt"))?;
    let mut images = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for line in labels_text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or_default().to_string();
        let labels: Vec<f64> = parts
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("bad label bits in {line:?}")))?;
        index.insert(id.clone(), images.len());
        images.push(GtImage {
            id,
            labels,
            boxes: Vec::new(),
        });
    }
    let boxes_text = std::fs::read_to_string(dir.join("boxes.txt"))?;
    for line in boxes_text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Parse(format!("bad box line {line:?}")));
        }
        let id = parts[0];
        let class: usize = parts[1]
            .parse()
            .map_err(|_| Error::Parse(format!("bad box class in {line:?}")))?;
        let nums: Vec<i64> = parts[2..]
            .iter()
            .map(|t| t.parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("bad box coords in {line:?}")))?;
        let idx = *index
            .get(id)
            .ok_or_else(|| Error::Parse(format!("box for unknown image {id}")))?;
        images[idx]
            .boxes
            .push((class, PixelBox::new(nums[0], nums[1], nums[2], nums[3])));
    }
    let gt = GroundTruth { images };
    gt.validate()?;
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64, clutter: bool) -> DatasetConfig {
        DatasetConfig {
            classes: DESK_CLASSES
                .iter()
                .map(|&(n, s)| (n.to_string(), s.to_string()))
                .collect(),
            side: 64,
            seed,
            splits: vec![SplitSpec {
                name: "eval".into(),
                count: 40,
                with_boxes: true,
            }],
            clutter,
        }
    }

    fn temp_root(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("weakloc-datagen-{tag}-{}", std::process::id()))
    }

    #[test]
    fn rejects_duplicate_class_names() {
        let mut cfg = tiny_config(1, true);
        cfg.classes[1] = ("disk".into(), "curved".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_single_super_category() {
        let mut cfg = tiny_config(1, true);
        for c in cfg.classes.iter_mut() {
            c.1 = "curved".into();
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_object_images_have_all_zero_labels() {
        let cfg = tiny_config(5, true);
        let mut counts = vec![0usize; 6];
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut saw_empty = false;
        for _ in 0..60 {
            let g = generate_image(&cfg, &mut counts, &mut rng);
            if g.boxes.is_empty() {
                saw_empty = true;
                assert!(g.labels.iter().all(|&b| b == 0.0));
            }
        }
        assert!(saw_empty, "expected some 0-object images");
    }

    #[test]
    fn same_seed_yields_byte_identical_dataset() {
        let cfg = tiny_config(7, true);
        let a = temp_root("det-a");
        let b = temp_root("det-b");
        generate(&cfg, &a).unwrap();
        generate(&cfg, &b).unwrap();
        for entry in std::fs::read_dir(a.join("eval/images")).unwrap() {
            let name = entry.unwrap().file_name();
            let pa = std::fs::read(a.join("eval/images").join(&name)).unwrap();
            let pb = std::fs::read(b.join("eval/images").join(&name)).unwrap();
            assert_eq!(pa, pb, "{name:?} differs across identical seeds");
        }
        assert_eq!(
            std::fs::read(a.join("eval/labels.txt")).unwrap(),
            std::fs::read(b.join("eval/labels.txt")).unwrap()
        );
        assert_eq!(
            std::fs::read(a.join("eval/boxes.txt")).unwrap(),
            std::fs::read(b.join("eval/boxes.txt")).unwrap()
        );
        std::fs::remove_dir_all(&a).ok();
        std::fs::remove_dir_all(&b).ok();
    }

    #[test]
    fn boxes_tightly_bound_rendered_pixels() {
        // flat background, no clutter: every non-background pixel belongs to
        // an object, so the stored boxes must bound them within 1 px
        let cfg = tiny_config(13, false);
        let root = temp_root("tight");
        generate(&cfg, &root).unwrap();
        let gt = load_split_ground_truth(&root, "eval").unwrap();
        let samples = load_split_samples(&root, "eval").unwrap();
        let mut checked_boxes = 0;
        for (sample, gti) in samples.iter().zip(gt.images.iter()) {
            assert_eq!(sample.id, gti.id);
            let (_, h, w) = sample.pixels.dims3().unwrap();
            // background color = most frequent pixel value triple
            let mut freq: BTreeMap<[u8; 3], usize> = BTreeMap::new();
            let quantized = |x: usize, y: usize| {
                [
                    (sample.pixels.at3(0, y, x) * 255.0).round() as u8,
                    (sample.pixels.at3(1, y, x) * 255.0).round() as u8,
                    (sample.pixels.at3(2, y, x) * 255.0).round() as u8,
                ]
            };
            for y in 0..h {
                for x in 0..w {
                    *freq.entry(quantized(x, y)).or_default() += 1;
                }
            }
            let bg = *freq.iter().max_by_key(|(_, &n)| n).unwrap().0;
            for &(_, b) in &gti.boxes {
                let mut found_edge = [false; 4];
                for y in 0..h {
                    for x in 0..w {
                        if quantized(x, y) == bg {
                            continue;
                        }
                        let inside_some = gti
                            .boxes
                            .iter()
                            .any(|&(_, bb)| bb.contains(x as f64, y as f64));
                        assert!(
                            inside_some,
                            "{}: foreground ({x},{y}) outside all boxes",
                            sample.id
                        );
                        if b.contains(x as f64, y as f64) {
                            if (x as i64 - b.x1).abs() <= 1 {
                                found_edge[0] = true;
                            }
                            if (x as i64 - b.x2).abs() <= 1 {
                                found_edge[1] = true;
                            }
                            if (y as i64 - b.y1).abs() <= 1 {
                                found_edge[2] = true;
                            }
                            if (y as i64 - b.y2).abs() <= 1 {
                                found_edge[3] = true;
                            }
                        }
                    }
                }
                assert!(
                    found_edge.iter().all(|&f| f),
                    "{}: box {b:?} not tight: {found_edge:?}",
                    sample.id
                );
                checked_boxes += 1;
            }
        }
        assert!(checked_boxes > 20, "only {checked_boxes} boxes checked");
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn class_frequencies_balanced_and_boxes_meet_min_area() {
        let mut cfg = tiny_config(21, true);
        cfg.splits[0].count = 300;
        let root = temp_root("balance");
        generate(&cfg, &root).unwrap();
        let gt = load_split_ground_truth(&root, "eval").unwrap();
        let mut counts = vec![0usize; 6];
        let min_area = (MIN_OBJECT_SCALE * 64.0).powi(2);
        for img in &gt.images {
            for &(c, b) in &img.boxes {
                counts[c] += 1;
                assert!(
                    b.area() as f64 >= min_area,
                    "box {b:?} area {} below {min_area}",
                    b.area()
                );
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        for (c, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - mean).abs() <= 0.2 * mean,
                "class {c} count {n} vs mean {mean:.1}"
            );
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn manifest_round_trip_and_super_categories() {
        let m = Manifest {
            classes: DESK_CLASSES
                .iter()
                .map(|&(n, s)| (n.to_string(), s.to_string()))
                .collect(),
            side: 64,
            seed: 3,
            splits: vec![
                SplitSpec { name: "train".into(), count: 10, with_boxes: false },
                SplitSpec { name: "eval".into(), count: 5, with_boxes: true },
            ],
        };
        let back = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back.side, 64);
        assert_eq!(back.seed, 3);
        assert_eq!(back.classes.len(), 6);
        assert_eq!(back.splits.len(), 2);
        assert!(back.splits[1].with_boxes);
        assert!(!back.splits[0].with_boxes);
        let cats = back.super_categories();
        assert_eq!(cats.len(), 2);
        assert_eq!(cats[0].0, "curved");
        assert_eq!(cats[0].1, vec![0, 1]);
        assert_eq!(cats[1].1, vec![2, 3, 4, 5]);
    }

    #[test]
    fn train_split_exposes_no_boxes_file() {
        let mut cfg = tiny_config(31, true);
        cfg.splits = vec![SplitSpec {
            name: "train".into(),
            count: 5,
            with_boxes: false,
        }];
        let root = temp_root("noboxes");
        generate(&cfg, &root).unwrap();
        assert!(!root.join("train/boxes.txt").exists());
        assert!(root.join("train/labels.txt").exists());
        let samples = load_split_samples(&root, "train").unwrap();
        assert_eq!(samples.len(), 5);
        std::fs::remove_dir_all(&root).ok();
    }
}
