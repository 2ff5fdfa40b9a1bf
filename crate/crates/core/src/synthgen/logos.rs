use super::{Compliance, LogoAsset, Result, Split, SynthError};
use crate::catalog::{load_image, save_image};
use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const LOGO_INDEX_FILE: &str = "logos.jsonl";

/// Rim thickness in source pixels. Every opaque pixel within this distance of
/// transparency is pure black or pure white.
const RIM: i64 = 4;
const MARGIN: u32 = 3;

/// Procedural badge library parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogoSpec {
    pub classes: Vec<String>,
    pub variants_per_class: usize,
    /// The first `train_variants` variants of each class are Train split, the rest Test.
    pub train_variants: usize,
    /// Lookalikes per class; the first is Train split, the rest Test.
    pub lookalikes_per_class: usize,
    pub base_size: u32,
    pub seed: u64,
}

impl Default for LogoSpec {
    fn default() -> Self {
        Self {
            classes: vec!["bestseller".into(), "made_in".into(), "award".into()],
            variants_per_class: 4,
            train_variants: 3,
            lookalikes_per_class: 2,
            base_size: 22,
            seed: 1,
        }
    }
}

impl LogoSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes.is_empty() {
            v.push("logo classes must be non-empty".into());
        }
        if self.variants_per_class == 0 {
            v.push("variants_per_class must be >= 1".into());
        }
        if self.train_variants == 0 || self.train_variants > self.variants_per_class {
            v.push("train_variants must be in 1..=variants_per_class".into());
        }
        if self.base_size < 2 * RIM as u32 + 4 {
            v.push(format!("base_size must be >= {}", 2 * RIM + 4));
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Diamond,
    Banner,
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Star,
    Stripes,
    Cross,
    Rings,
    Dots,
}

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Diamond, Shape::Banner];
const MARKS: [Pattern; 3] = [Pattern::Star, Pattern::Stripes, Pattern::Cross];
const LOOKALIKE_MARKS: [Pattern; 2] = [Pattern::Rings, Pattern::Dots];

/// Generates text-free geometric badges: per class a fixed outer shape and mark,
/// several colour/size variants, and lookalikes sharing the shape but not the mark.
pub fn generate_logos(spec: &LogoSpec) -> Result<Vec<LogoAsset>> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(SynthError::InvalidConfig(v.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let shape = SHAPES[ci % SHAPES.len()];
        for v in 0..spec.variants_per_class {
            let size = spec.base_size + 2 * v as u32;
            let pixels = render_badge(&mut rng, shape, MARKS[ci % MARKS.len()], size, v % 2 == 0);
            let split = if v < spec.train_variants {
                Split::Train
            } else {
                Split::Test
            };
            out.push(LogoAsset::new(
                format!("{class}-v{v}"),
                pixels,
                class.clone(),
                Compliance::NonCompliant,
                split,
            )?);
        }
        for l in 0..spec.lookalikes_per_class {
            let size = spec.base_size + 2 * l as u32;
            let mark = LOOKALIKE_MARKS[(ci + l) % LOOKALIKE_MARKS.len()];
            let pixels = render_badge(&mut rng, shape, mark, size, l % 2 == 0);
            let split = if l == 0 { Split::Train } else { Split::Test };
            out.push(LogoAsset::new(
                format!("{class}-look{l}"),
                pixels,
                class.clone(),
                Compliance::CompliantLookalike,
                split,
            )?);
        }
    }
    Ok(out)
}

fn inside(shape: Shape, dx: f64, dy: f64, size: f64) -> bool {
    let r = size / 2.0;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Banner => {
            let (hw, hh, corner) = (r * 1.4, r * 0.7, 3.0);
            let (qx, qy) = (dx.abs() - (hw - corner), dy.abs() - (hh - corner));
            if qx <= 0.0 || qy <= 0.0 {
                dx.abs() <= hw && dy.abs() <= hh
            } else {
                qx * qx + qy * qy <= corner * corner
            }
        }
    }
}

fn star_contains(dx: f64, dy: f64, radius: f64) -> bool {
    // Ten-vertex star polygon, even-odd rule.
    let verts: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { radius } else { radius * 0.45 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > dy) != (yj > dy) && dx < (xj - xi) * (dy - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn mark_contains(pattern: Pattern, x: u32, y: u32, dx: f64, dy: f64, size: f64) -> bool {
    match pattern {
        Pattern::Star => star_contains(dx, dy, size * 0.36),
        Pattern::Stripes => ((x + y) / 3) % 2 == 0,
        Pattern::Cross => dx.abs() < size / 9.0 || dy.abs() < size / 9.0,
        Pattern::Rings => ((dx * dx + dy * dy).sqrt() / 3.0).floor() as i64 % 2 == 0,
        Pattern::Dots => x % 5 >= 1 && x % 5 <= 2 && y % 5 >= 1 && y % 5 <= 2,
    }
}

fn render_badge<R: Rng>(
    rng: &mut R,
    shape: Shape,
    mark: Pattern,
    size: u32,
    black_rim: bool,
) -> RgbaImage {
    let span = match shape {
        Shape::Banner => (
            (size as f64 * 1.4).ceil() as u32,
            (size as f64 * 0.7).ceil() as u32,
        ),
        _ => (size, size),
    };
    let (w, h) = (span.0 + 2 * MARGIN, span.1 + 2 * MARGIN);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mask: Vec<bool> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size as f64))
        .collect();
    let at = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && mask[(y * w as i64 + x) as usize]
    };

    let fill: [u8; 3] = [
        rng.random_range(40..=215),
        rng.random_range(40..=215),
        rng.random_range(40..=215),
    ];
    let fg: [u8; 3] = fill.map(|c| if c > 127 { c - 100 } else { c + 100 });
    let rim = if black_rim {
        [0, 0, 0]
    } else {
        [255, 255, 255]
    };

    RgbaImage::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as i64, y as i64);
        if !at(xi, yi) {
            return Rgba([0, 0, 0, 0]);
        }
        let near_edge = (-RIM..=RIM).any(|oy| (-RIM..=RIM).any(|ox| !at(xi + ox, yi + oy)));
        let c = if near_edge {
            rim
        } else if mark_contains(
            mark,
            x,
            y,
            x as f64 + 0.5 - cx,
            y as f64 + 0.5 - cy,
            size as f64,
        ) {
            fg
        } else {
            fill
        };
        Rgba([c[0], c[1], c[2], 255])
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LogoRecord {
    logo_id: String,
    class_label: String,
    compliance: Compliance,
    split: Split,
    file: String,
}

pub fn save_logos(dir: &Path, logos: &[LogoAsset]) -> Result<()> {
    let io = |source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut index =
        std::io::BufWriter::new(std::fs::File::create(dir.join(LOGO_INDEX_FILE)).map_err(io)?);
    for logo in logos {
        let file = format!("{}.png", logo.logo_id);
        save_image(&logo.pixels, &dir.join(&file))?;
        let rec = LogoRecord {
            logo_id: logo.logo_id.clone(),
            class_label: logo.class_label.clone(),
            compliance: logo.compliance,
            split: logo.split,
            file,
        };
        writeln!(
            index,
            "{}",
            serde_json::to_string(&rec).expect("logo record serializes")
        )
        .map_err(io)?;
    }
    index.flush().map_err(io)
}

pub fn load_logos(dir: &Path) -> Result<Vec<LogoAsset>> {
    let path = dir.join(LOGO_INDEX_FILE);
    let file = std::fs::File::open(&path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogoRecord =
            serde_json::from_str(&line).map_err(|e| SynthError::Parse(e.to_string()))?;
        let pixels = load_image(&dir.join(&rec.file))?;
        out.push(LogoAsset::new(
            rec.logo_id,
            pixels,
            rec.class_label,
            rec.compliance,
            rec.split,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_shape_and_splits() {
        let spec = LogoSpec::default();
        let logos = generate_logos(&spec).unwrap();
        assert_eq!(logos.len(), 3 * (4 + 2));
        for class in &spec.classes {
            let of: Vec<_> = logos.iter().filter(|l| &l.class_label == class).collect();
            let train_nc = of
                .iter()
                .filter(|l| l.compliance == Compliance::NonCompliant && l.split == Split::Train)
                .count();
            assert_eq!(train_nc, 3);
        }
        let ids: std::collections::BTreeSet<_> = logos.iter().map(|l| l.logo_id.clone()).collect();
        assert_eq!(ids.len(), logos.len());
    }

    #[test]
    fn badges_have_margin_and_binary_alpha() {
        for logo in generate_logos(&LogoSpec::default()).unwrap() {
            let px = logo.pixels();
            assert!(px.pixels().all(|p| p[3] == 0 || p[3] == 255));
            let cropped = super::super::tight_crop(px).unwrap();
            assert!(cropped.width() < px.width() && cropped.height() < px.height());
        }
    }

    #[test]
    fn rim_is_black_or_white() {
        for logo in generate_logos(&LogoSpec::default()).unwrap() {
            let px = logo.pixels();
            for (x, y, p) in px.enumerate_pixels() {
                if p[3] == 0 {
                    continue;
                }
                let edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dx, dy)| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx < 0
                            || ny < 0
                            || nx >= px.width() as i64
                            || ny >= px.height() as i64
                            || px.get_pixel(nx as u32, ny as u32)[3] == 0
                    });
                if edge {
                    assert!(p.0[..3] == [0, 0, 0] || p.0[..3] == [255, 255, 255]);
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let logos = generate_logos(&LogoSpec::default()).unwrap();
        save_logos(dir.path(), &logos).unwrap();
        assert_eq!(load_logos(dir.path()).unwrap(), logos);
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_logos(&LogoSpec::default()).unwrap(),
            generate_logos(&LogoSpec::default()).unwrap()
        );
    }
}
