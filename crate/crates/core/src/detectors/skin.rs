use super::{sigmoid, Detector, DetectorOutput, Result};
use image::{Rgba, RgbaImage};

/// Slope and intercept of the ratio-to-confidence logistic.
/// Ratio 0 maps to about 0.018 and ratio 1 to about 0.982.
pub const SKIN_LOGISTIC_A: f64 = 8.0;
pub const SKIN_LOGISTIC_B: f64 = -4.0;

/// Skin test: the uniform-daylight RGB rule
/// (R > 95, G > 40, B > 20, max - min > 15, |R - G| > 15, R > G, R > B)
/// intersected with the YCbCr box Cb in [77, 127], Cr in [133, 173] (BT.601, full range).
pub fn is_skin(p: &Rgba<u8>) -> bool {
    let (r, g, b) = (p[0] as i32, p[1] as i32, p[2] as i32);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let rgb_rule =
        r > 95 && g > 40 && b > 20 && max - min > 15 && (r - g).abs() > 15 && r > g && r > b;
    if !rgb_rule {
        return false;
    }
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let cb = 128.0 - 0.168736 * rf - 0.331264 * gf + 0.5 * bf;
    let cr = 128.0 + 0.5 * rf - 0.418688 * gf - 0.081312 * bf;
    (77.0..=127.0).contains(&cb) && (133.0..=173.0).contains(&cr)
}

/// Fraction of pixels classified as skin. Empty rasters have ratio 0.
pub fn skin_ratio(image: &RgbaImage) -> f64 {
    let n = image.width() as usize * image.height() as usize;
    if n == 0 {
        return 0.0;
    }
    image.pixels().filter(|p| is_skin(p)).count() as f64 / n as f64
}

pub fn skin_confidence(ratio: f64) -> f64 {
    sigmoid(SKIN_LOGISTIC_A * ratio + SKIN_LOGISTIC_B)
}

pub fn skin_ratio_detect(image: &RgbaImage) -> DetectorOutput {
    DetectorOutput::without_boxes("skin", skin_confidence(skin_ratio(image)))
}

pub struct SkinDetector {
    id: String,
    classes: Vec<String>,
}

impl SkinDetector {
    pub fn new(id: impl Into<String>, class: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            classes: vec![class.into()],
        }
    }
}

impl Detector for SkinDetector {
    fn detector_id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn detect(&self, image: &RgbaImage) -> Result<DetectorOutput> {
        Ok(DetectorOutput::without_boxes(
            &self.id,
            skin_confidence(skin_ratio(image)),
        ))
    }
}
