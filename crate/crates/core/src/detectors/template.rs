use super::{Detector, DetectorError, DetectorOutput, Result, ScoredBox};
use crate::catalog::BoundingBox;
use crate::raster::{luma, warp, Linear2, Resample};
use crate::synthgen::{tight_crop, Compliance, LogoAsset, Split};
use image::RgbaImage;

/// Correlations this close to ±1 are reported as exactly ±1.
const SNAP: f64 = 1e-12;

/// A single-channel float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LumaPlane {
    pub fn from_rgba(img: &RgbaImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(luma).collect(),
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A template at one scale, reduced to its weighted, mean-centred taps.
#[derive(Debug, Clone)]
pub struct PreparedTemplate {
    pub scale: f64,
    pub width: usize,
    pub height: usize,
    // (dx, dy, weight, centred value)
    taps: Vec<(usize, usize, f64, f64)>,
    weight_sum: f64,
    energy: f64,
}

impl PreparedTemplate {
    /// `weights` are per-pixel in `[0,1]`; zero-weight pixels do not take part.
    pub fn from_plane(plane: &LumaPlane, weights: &[f64], scale: f64) -> Result<Self> {
        assert_eq!(weights.len(), plane.data.len());
        let mut taps = Vec::new();
        let mut weight_sum = 0.0;
        let mut weighted = 0.0;
        for y in 0..plane.height {
            for x in 0..plane.width {
                let w = weights[y * plane.width + x];
                if w > 0.0 {
                    let v = plane.at(x, y);
                    taps.push((x, y, w, v));
                    weight_sum += w;
                    weighted += w * v;
                }
            }
        }
        if taps.is_empty() {
            return Err(DetectorError::DegenerateTemplate);
        }
        let mean = weighted / weight_sum;
        let mut energy = 0.0;
        for tap in &mut taps {
            tap.3 -= mean;
            energy += tap.2 * tap.3 * tap.3;
        }
        if energy <= SNAP * weight_sum {
            return Err(DetectorError::DegenerateTemplate);
        }
        Ok(Self {
            scale,
            width: plane.width,
            height: plane.height,
            taps,
            weight_sum,
            energy,
        })
    }

    /// Rescales an RGBA template with nearest-neighbour sampling, crops it to its
    /// non-transparent pixels and uses alpha as the correlation weight.
    pub fn from_rgba(template: &RgbaImage, scale: f64) -> Result<Self> {
        let warped = warp(template, &Linear2::scale(scale), Resample::Nearest);
        let cropped = tight_crop(&warped).map_err(|_| DetectorError::DegenerateTemplate)?;
        let weights: Vec<f64> = cropped.pixels().map(|p| p[3] as f64 / 255.0).collect();
        Self::from_plane(&LumaPlane::from_rgba(&cropped), &weights, scale)
    }

    pub fn fits(&self, image: &LumaPlane) -> bool {
        self.width <= image.width && self.height <= image.height
    }

    /// ZNCC of the template placed with its top-left corner at `(x, y)`.
    pub fn zncc_at(&self, image: &LumaPlane, x: usize, y: usize) -> f64 {
        let mut sum = 0.0;
        for &(dx, dy, w, _) in &self.taps {
            sum += w * image.at(x + dx, y + dy);
        }
        let mean = sum / self.weight_sum;
        let mut cross = 0.0;
        let mut var = 0.0;
        for &(dx, dy, w, t) in &self.taps {
            let d = image.at(x + dx, y + dy) - mean;
            cross += w * t * d;
            var += w * d * d;
        }
        if var <= SNAP * self.weight_sum {
            return 0.0;
        }
        let z = (cross / (self.energy.sqrt() * var.sqrt())).clamp(-1.0, 1.0);
        if 1.0 - z.abs() <= SNAP {
            z.signum()
        } else {
            z
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub zncc: f64,
    pub confidence: f64,
    pub scale: f64,
    /// `(x_min, y_min, x_max, y_max)`, max exclusive.
    pub window: (u32, u32, u32, u32),
}

/// Best placement over all templates that fit, scanning in order, then row-major.
/// The first strictly better score wins.
pub fn template_match_plane(
    image: &LumaPlane,
    templates: &[PreparedTemplate],
) -> Result<MatchResult> {
    let mut best: Option<MatchResult> = None;
    for t in templates.iter().filter(|t| t.fits(image)) {
        for y in 0..=image.height - t.height {
            for x in 0..=image.width - t.width {
                let z = t.zncc_at(image, x, y);
                if best.is_none_or(|b| z > b.zncc) {
                    best = Some(MatchResult {
                        zncc: z,
                        confidence: (z + 1.0) / 2.0,
                        scale: t.scale,
                        window: (
                            x as u32,
                            y as u32,
                            (x + t.width) as u32,
                            (y + t.height) as u32,
                        ),
                    });
                }
            }
        }
    }
    best.ok_or(DetectorError::TemplateTooLarge)
}

/// Multi-scale zero-normalised cross-correlation of `template` against `image`.
pub fn template_match(
    image: &RgbaImage,
    template: &RgbaImage,
    scales: &[f64],
) -> Result<MatchResult> {
    let prepared = prepare_scales(template, scales)?;
    template_match_plane(&LumaPlane::from_rgba(image), &prepared)
}

fn prepare_scales(template: &RgbaImage, scales: &[f64]) -> Result<Vec<PreparedTemplate>> {
    if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(DetectorError::InvalidConfig(
            "scales must be positive and non-empty".into(),
        ));
    }
    // Variance is judged on the template as given; a scale that collapses it is skipped.
    let weights: Vec<f64> = template.pixels().map(|p| p[3] as f64 / 255.0).collect();
    PreparedTemplate::from_plane(&LumaPlane::from_rgba(template), &weights, 1.0)?;
    let prepared: Vec<_> = scales
        .iter()
        .filter_map(|&s| PreparedTemplate::from_rgba(template, s).ok())
        .collect();
    if prepared.is_empty() {
        return Err(DetectorError::DegenerateTemplate);
    }
    Ok(prepared)
}

/// Logo detector backed by template matching against Train-split logos.
pub struct LogoDetector {
    id: String,
    classes: Vec<String>,
    templates: Vec<(String, Vec<PreparedTemplate>)>,
}

impl LogoDetector {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }
}

/// Builds a logo detector from Train-split, non-compliant logos at the given scales.
pub fn logo_detector_from_templates(
    templates: &[LogoAsset],
    scales: &[f64],
) -> Result<LogoDetector> {
    if templates.is_empty() {
        return Err(DetectorError::InvalidConfig("empty template list".into()));
    }
    let mut classes: Vec<String> = Vec::new();
    let mut prepared = Vec::with_capacity(templates.len());
    for logo in templates {
        if logo.split() != Split::Train || logo.compliance() != Compliance::NonCompliant {
            return Err(DetectorError::InvalidConfig(format!(
                "template {} must be a Train-split non-compliant logo",
                logo.logo_id()
            )));
        }
        let cropped = logo.cropped()?;
        prepared.push((
            logo.class_label().to_string(),
            prepare_scales(cropped.pixels(), scales)?,
        ));
        if !classes.iter().any(|c| c == logo.class_label()) {
            classes.push(logo.class_label().to_string());
        }
    }
    Ok(LogoDetector {
        id: format!("logo:{}", classes.join("+")),
        classes,
        templates: prepared,
    })
}

impl Detector for LogoDetector {
    fn detector_id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Images smaller than every template cannot contain the logo and score 0.
    fn detect(&self, image: &RgbaImage) -> Result<DetectorOutput> {
        let plane = LumaPlane::from_rgba(image);
        let mut best: Option<(&str, MatchResult)> = None;
        for (class, prepared) in &self.templates {
            match template_match_plane(&plane, prepared) {
                Ok(m) if best.is_none_or(|(_, b)| m.zncc > b.zncc) => best = Some((class, m)),
                Ok(_) | Err(DetectorError::TemplateTooLarge) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(match best {
            None => DetectorOutput::without_boxes(&self.id, 0.0),
            Some((class, m)) => {
                let (x0, y0, x1, y1) = m.window;
                DetectorOutput {
                    confidence: m.confidence,
                    boxes: vec![ScoredBox {
                        bbox: BoundingBox::new(x0, y0, x1, y1, class),
                        score: m.confidence,
                    }],
                    detector_id: self.id.clone(),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{imageops, Rgba};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: u32, h: u32, seed: u64) -> RgbaImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbaImage::from_fn(w, h, |_, _| {
            Rgba([rng.random(), rng.random(), rng.random(), 255])
        })
    }

    #[test]
    fn exact_window_scores_one() {
        let img = random_image(40, 30, 1);
        let tmpl = imageops::crop_imm(&img, 11, 7, 9, 6).to_image();
        let m = template_match(&img, &tmpl, &[1.0]).unwrap();
        assert_eq!(m.zncc, 1.0);
        assert_eq!(m.confidence, 1.0);
        assert_eq!(m.window, (11, 7, 20, 13));
    }

    #[test]
    fn negative_window_scores_minus_one() {
        let img = random_image(24, 24, 2);
        let mut tmpl = imageops::crop_imm(&img, 4, 5, 8, 8).to_image();
        for p in tmpl.pixels_mut() {
            for c in 0..3 {
                p[c] = 255 - p[c];
            }
        }
        let prepared = [PreparedTemplate::from_rgba(&tmpl, 1.0).unwrap()];
        let z = prepared[0].zncc_at(&LumaPlane::from_rgba(&img), 4, 5);
        assert!((z + 1.0).abs() < 1e-9, "{z}");
    }

    #[test]
    fn constant_template_is_degenerate() {
        let img = random_image(20, 20, 3);
        let tmpl = RgbaImage::from_pixel(5, 5, Rgba([90, 90, 90, 255]));
        assert!(matches!(
            template_match(&img, &tmpl, &[1.0]),
            Err(DetectorError::DegenerateTemplate)
        ));
    }

    #[test]
    fn oversized_template() {
        let img = random_image(6, 6, 4);
        let tmpl = random_image(8, 8, 5);
        assert!(matches!(
            template_match(&img, &tmpl, &[1.0, 2.0]),
            Err(DetectorError::TemplateTooLarge)
        ));
        assert!(template_match(&img, &tmpl, &[0.5]).is_ok());
    }

    #[test]
    fn transparent_pixels_are_ignored() {
        let img = random_image(30, 30, 6);
        let mut tmpl = imageops::crop_imm(&img, 10, 10, 8, 8).to_image();
        // Corrupt a transparent ring; it must not affect the match.
        for (x, y, p) in tmpl.enumerate_pixels_mut() {
            if x == 0 || y == 0 || x == 7 || y == 7 {
                *p = Rgba([0, 255, 0, 0]);
            }
        }
        let m = template_match(&img, &tmpl, &[1.0]).unwrap();
        assert_eq!(m.zncc, 1.0);
        assert_eq!(m.window, (11, 11, 17, 17));
    }

    fn naive_best(img: &LumaPlane, t: &LumaPlane) -> (f64, usize, usize) {
        let n = (t.width * t.height) as f64;
        let tm: f64 = t.data.iter().sum::<f64>() / n;
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for y in 0..=img.height - t.height {
            for x in 0..=img.width - t.width {
                let mut im = 0.0;
                for ty in 0..t.height {
                    for tx in 0..t.width {
                        im += img.at(x + tx, y + ty);
                    }
                }
                im /= n;
                let (mut num, mut a, mut b) = (0.0, 0.0, 0.0);
                for ty in 0..t.height {
                    for tx in 0..t.width {
                        let p = img.at(x + tx, y + ty) - im;
                        let q = t.at(tx, ty) - tm;
                        num += p * q;
                        a += p * p;
                        b += q * q;
                    }
                }
                let z = num / (a * b).sqrt();
                if z > best.0 {
                    best = (z, x, y);
                }
            }
        }
        best
    }

    #[test]
    fn matches_naive_oracle() {
        for seed in 0..5 {
            let img = random_image(32, 28, 100 + seed);
            let tmpl = random_image(8, 8, 200 + seed);
            let m = template_match(&img, &tmpl, &[1.0]).unwrap();
            let (z, x, y) = naive_best(&LumaPlane::from_rgba(&img), &LumaPlane::from_rgba(&tmpl));
            assert!((m.zncc - z).abs() < 1e-9);
            assert_eq!((m.window.0, m.window.1), (x as u32, y as u32));
        }
    }

    #[test]
    fn affine_brightness_invariance() {
        let img = LumaPlane::from_rgba(&random_image(30, 30, 9));
        let tmpl = LumaPlane::from_rgba(&random_image(7, 7, 10));
        let prepared = [PreparedTemplate::from_plane(&tmpl, &[1.0; 49], 1.0).unwrap()];
        let base = template_match_plane(&img, &prepared).unwrap();
        for (a, c) in [(0.5, 10.0), (2.0, -30.0), (1.3, 0.25)] {
            let shifted = template_match_plane(&img.map(|v| a * v + c), &prepared).unwrap();
            assert!((shifted.zncc - base.zncc).abs() < 1e-6);
            assert_eq!(shifted.window, base.window);
        }
    }

    #[test]
    fn logo_detector_rejects_test_split_and_empty() {
        let logos = crate::synthgen::generate_logos(&crate::synthgen::LogoSpec::default()).unwrap();
        assert!(logo_detector_from_templates(&[], &[1.0]).is_err());
        let test = logos
            .iter()
            .find(|l| l.split() == Split::Test)
            .unwrap()
            .clone();
        assert!(logo_detector_from_templates(&[test], &[1.0]).is_err());
    }

    #[test]
    fn logo_detector_finds_pasted_logo() {
        use crate::synthgen::{generate_logos, superimpose, LogoSpec, TransformParams};
        let logos = generate_logos(&LogoSpec::default()).unwrap();
        let train: Vec<_> = logos
            .iter()
            .filter(|l| l.split() == Split::Train && l.compliance() == Compliance::NonCompliant)
            .cloned()
            .collect();
        let det = logo_detector_from_templates(&train[..1], &[1.0, 0.75]).unwrap();
        let base = crate::catalog::CatalogImage::new("b", random_image(64, 64, 11), "shoes");
        let logo = train[0].cropped().unwrap();
        let mut t = TransformParams::identity_at(20, 13);
        t.scale = 0.75;
        let s = superimpose(&base, &logo, &t, Resample::Nearest, 8).unwrap();
        let out = det.detect(&s.sample.image.pixels).unwrap();
        assert_eq!(out.confidence, 1.0);
        assert_eq!(out.boxes[0].bbox.iou(&s.sample.boxes[0]), 1.0);
        assert_eq!(out.detector_id, det.detector_id());
        assert!(det.detect(&RgbaImage::new(4, 4)).unwrap().confidence == 0.0);
    }
}
