//! Synthetic "shapes" data: one filled target shape over noisy background
//! with distractor strokes. The reference heatmap is the blurred target
//! mask, standing in for a human attention map.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{io_err, write_manifest, write_pgm16, write_ppm, DataError, ManifestEntry, Result, RgbImage, Sample};
use crate::cam::Heatmap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Point test relative to the shape centre for circumradius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            Shape::Circle => d2 <= r * r,
            Shape::Square => dx.abs().max(dy.abs()) <= 0.8 * r,
            Shape::Triangle => dy <= 0.5 * r && dx.abs() <= (dy + r) * (1.0 / 3f64.sqrt()),
            Shape::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Shape::Ring => d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub image: RgbImage,
    pub heatmap: Heatmap,
    /// Inclusive `(x0, y0, x1, y1)` of the target mask.
    pub bbox: (usize, usize, usize, usize),
}

fn random_color<R: Rng>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn jitter<R: Rng>(rng: &mut R, c: u8, amount: i16) -> u8 {
    (c as i16 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8
}

/// Draws one sample of `shape` on a `size × size` canvas.
pub fn render_sample<R: Rng>(shape: Shape, size: usize, rng: &mut R) -> Result<ShapeSample> {
    if size < 16 {
        return Err(DataError::Invalid(format!("image size {size} below 16")));
    }
    let s = size as f64;
    let bg = random_color(rng, 40, 200);
    let mut px: Vec<[u8; 3]> = (0..size * size)
        .map(|_| [jitter(rng, bg[0], 25), jitter(rng, bg[1], 25), jitter(rng, bg[2], 25)])
        .collect();

    for _ in 0..rng.random_range(3..=5) {
        let color = random_color(rng, 0, 255);
        let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let len = rng.random_range(s / 4.0..s / 2.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = (len * 2.0).ceil() as usize;
        for k in 0..=steps {
            let t = len * k as f64 / steps as f64;
            let (x, y) = (x0 + t * angle.cos(), y0 + t * angle.sin());
            if (0.0..s).contains(&x) && (0.0..s).contains(&y) {
                px[y as usize * size + x as usize] = color;
            }
        }
    }

    let fg = loop {
        let c = random_color(rng, 0, 255);
        let dist: i32 = c.iter().zip(bg).map(|(a, b)| (*a as i32 - b as i32).abs()).sum();
        if dist >= 150 {
            break c;
        }
    };
    let r = rng.random_range(0.2 * s..0.32 * s);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let mut mask = vec![0.0f32; size * size];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                mask[y * size + x] = 1.0;
                px[y * size + x] = [jitter(rng, fg[0], 10), jitter(rng, fg[1], 10), jitter(rng, fg[2], 10)];
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            }
        }
    }
    if x0 == usize::MAX {
        return Err(DataError::Invalid(format!("{} mask is empty", shape.name())));
    }

    let blurred = Heatmap::new(size, size, mask)
        .map_err(|e| DataError::Invalid(e.to_string()))?
        .blurred(s / 32.0);
    let max = blurred.max() as f64;
    let heatmap = Heatmap::new(size, size, blurred.values().iter().map(|&v| (v as f64 / max) as f32).collect())
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let peak = heatmap
        .values()
        .iter()
        .position(|&v| v == 1.0)
        .ok_or_else(|| DataError::Invalid("normalized heatmap has no unit maximum".into()))?;
    let (py, pxx) = (peak / size, peak % size);
    if !(x0..=x1).contains(&pxx) || !(y0..=y1).contains(&py) {
        return Err(DataError::Invalid(format!(
            "heatmap peak ({pxx},{py}) outside target box ({x0},{y0})-({x1},{y1})"
        )));
    }

    let image = RgbImage::new(size, size, px.into_iter().flatten().collect())?;
    Ok(ShapeSample {
        image,
        heatmap,
        bbox: (x0, y0, x1, y1),
    })
}

fn check_args(size: usize, classes: usize) -> Result<()> {
    if size < 16 {
        return Err(DataError::Invalid(format!("image size {size} below 16")));
    }
    if !(2..=5).contains(&classes) {
        return Err(DataError::Invalid(format!("classes must be in 2..=5, got {classes}")));
    }
    Ok(())
}

/// Balanced shuffled labels; sample `i` draws from its own stream so the
/// dataset is a pure function of the seed.
fn synthesize(n: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<(usize, ShapeSample)>> {
    check_args(size, classes)?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(u64::MAX);
    labels.shuffle(&mut order_rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_sample(Shape::ALL[label], size, &mut rng).map(|s| (label, s))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSummary {
    pub manifest: PathBuf,
    pub class_counts: Vec<usize>,
}

/// Writes `img_NNNNN.ppm`, `heat_NNNNN.pgm` and `manifest.jsonl` into `out`.
pub fn generate_shapes(n: usize, size: usize, classes: usize, seed: u64, out: &Path) -> Result<ShapesSummary> {
    let samples = synthesize(n, size, classes, seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::with_capacity(n);
    let mut class_counts = vec![0; classes];
    for (i, (label, s)) in samples.iter().enumerate() {
        let image = format!("img_{i:05}.ppm");
        let heatmap = format!("heat_{i:05}.pgm");
        let p = out.join(&image);
        fs::write(&p, write_ppm(&s.image)).map_err(io_err(&p))?;
        let p = out.join(&heatmap);
        fs::write(&p, write_pgm16(&s.heatmap)).map_err(io_err(&p))?;
        class_counts[*label] += 1;
        entries.push(ManifestEntry {
            image,
            heatmap,
            label: *label,
            classes: Some(classes),
        });
    }
    let manifest = out.join("manifest.jsonl");
    fs::write(&manifest, write_manifest(&entries)).map_err(io_err(&manifest))?;
    Ok(ShapesSummary { manifest, class_counts })
}

/// In-memory variant of [`generate_shapes`] (heatmaps not quantized).
pub fn shapes_dataset(n: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(synthesize(n, size, classes, seed)?
        .into_iter()
        .map(|(label, s)| Sample {
            image: s.image,
            label,
            heatmap: s.heatmap,
        })
        .collect())
}
