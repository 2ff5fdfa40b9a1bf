use super::{CatalogError, CatalogImage, Result};
use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Lowest channel value the corpus generator emits.
///
/// Generated bases stay inside `[BASE_TONE_MIN, BASE_TONE_MAX]` so that the
/// black and white rims of generated badges always differ from the background.
pub const BASE_TONE_MIN: u8 = 32;
pub const BASE_TONE_MAX: u8 = 223;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub categories: Vec<String>,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub width: u32,
    #[serde(default = "default_dim")]
    pub height: u32,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_dim() -> u32 {
    64
}

fn default_prefix() -> String {
    "img".into()
}

impl CorpusSpec {
    pub fn new(n_images: usize, categories: Vec<String>, seed: u64) -> Self {
        Self {
            n_images,
            categories,
            seed,
            width: default_dim(),
            height: default_dim(),
            id_prefix: default_prefix(),
        }
    }

    /// Every problem with this corpus config, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.n_images == 0 {
            problems.push("n_images must be >= 1".to_string());
        }
        if self.categories.is_empty() {
            problems.push("categories must be non-empty".to_string());
        }
        if self.categories.iter().any(|c| c.is_empty()) {
            problems.push("category names must be non-empty".to_string());
        }
        if self.width == 0 || self.height == 0 {
            problems.push("width and height must be >= 1".to_string());
        }
        problems
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.violations();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CatalogError::InvalidSpec(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Flat,
    Gradient,
    Checkerboard,
    Noise,
}

/// Generates `n_images` procedural product images, categories assigned round-robin.
///
/// Output is a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<CatalogImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let images = (0..spec.n_images)
        .map(|i| {
            let category = &spec.categories[i % spec.categories.len()];
            let pixels = render_pattern(&mut rng, spec.width, spec.height);
            CatalogImage::new(
                format!("{}-{:06}", spec.id_prefix, i),
                pixels,
                category.clone(),
            )
        })
        .collect();
    Ok(images)
}

fn tone<R: Rng>(rng: &mut R) -> [u8; 3] {
    [
        rng.random_range(BASE_TONE_MIN..=BASE_TONE_MAX),
        rng.random_range(BASE_TONE_MIN..=BASE_TONE_MAX),
        rng.random_range(BASE_TONE_MIN..=BASE_TONE_MAX),
    ]
}

fn opaque(c: [u8; 3]) -> Rgba<u8> {
    Rgba([c[0], c[1], c[2], 255])
}

fn render_pattern<R: Rng>(rng: &mut R, width: u32, height: u32) -> RgbaImage {
    let pattern = match rng.random_range(0..4u8) {
        0 => Pattern::Flat,
        1 => Pattern::Gradient,
        2 => Pattern::Checkerboard,
        _ => Pattern::Noise,
    };
    match pattern {
        Pattern::Flat => RgbaImage::from_pixel(width, height, opaque(tone(rng))),
        Pattern::Gradient => {
            let (a, b) = (tone(rng), tone(rng));
            let dir = rng.random_range(0..3u8);
            RgbaImage::from_fn(width, height, |x, y| {
                let t = match dir {
                    0 => x as f64 / (width.max(2) - 1) as f64,
                    1 => y as f64 / (height.max(2) - 1) as f64,
                    _ => (x + y) as f64 / (width + height).saturating_sub(2).max(1) as f64,
                };
                let mix = |i: usize| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8;
                opaque([mix(0), mix(1), mix(2)])
            })
        }
        Pattern::Checkerboard => {
            let (a, b) = (tone(rng), tone(rng));
            let cell = rng.random_range(2..=12u32);
            RgbaImage::from_fn(width, height, |x, y| {
                if ((x / cell) + (y / cell)) % 2 == 0 {
                    opaque(a)
                } else {
                    opaque(b)
                }
            })
        }
        Pattern::Noise => {
            let center = tone(rng);
            let amp = rng.random_range(8..=48i32);
            let mut img = RgbaImage::new(width, height);
            for px in img.pixels_mut() {
                let mut c = [0u8; 3];
                for (i, v) in c.iter_mut().enumerate() {
                    let n = center[i] as i32 + rng.random_range(-amp..=amp);
                    *v = n.clamp(BASE_TONE_MIN as i32, BASE_TONE_MAX as i32) as u8;
                }
                *px = opaque(c);
            }
            img
        }
    }
}
