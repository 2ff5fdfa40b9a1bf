use super::{
    sample_transform, superimpose, Compliance, LogoAsset, Result, Split, SynthError,
    TransformConfig, TransformParams,
};
use crate::catalog::{save_image, AnnotatedSample, CatalogImage, Label, Provenance};
use crate::raster::diff_bbox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    pub n_per_class: usize,
    pub neg_ratio: f64,
    /// Share of negatives drawn as lookalike superimpositions (when the class has any).
    pub lookalike_fraction: f64,
    pub seed: u64,
    pub transform: TransformConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: vec!["bestseller".into()],
            n_per_class: 100,
            neg_ratio: 1.0,
            lookalike_fraction: 0.5,
            seed: 7,
            transform: TransformConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.transform.violations();
        if self.classes.is_empty() {
            v.push("dataset classes must be non-empty".into());
        }
        if !(self.neg_ratio >= 0.0 && self.neg_ratio.is_finite()) {
            v.push(format!("neg_ratio must be >= 0 (got {})", self.neg_ratio));
        }
        if !(0.0..=1.0).contains(&self.lookalike_fraction) {
            v.push(format!(
                "lookalike_fraction must be in [0, 1] (got {})",
                self.lookalike_fraction
            ));
        }
        v
    }

    pub fn negatives_per_class(&self) -> usize {
        (self.neg_ratio * self.n_per_class as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Positive,
    Lookalike,
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: String,
    pub class: String,
    pub kind: SampleKind,
    pub base_id: String,
    pub logo_id: Option<String>,
    pub split: Option<Split>,
    pub transform: Option<TransformParams>,
    pub sample: AnnotatedSample,
}

/// Builds `n_per_class` positives and `ceil(neg_ratio * n_per_class)` negatives per class.
///
/// Only Train-split logos are used. Sample `i` draws from its own RNG stream
/// `(seed, i)`, so the parallel build equals a serial one.
pub fn generate_dataset(
    spec: &DatasetSpec,
    bases: &[CatalogImage],
    logos: &[LogoAsset],
) -> Result<Vec<SyntheticSample>> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(SynthError::InvalidConfig(v.join("; ")));
    }
    if bases.is_empty() {
        return Err(SynthError::InvalidConfig("no base images".into()));
    }
    let train: Vec<LogoAsset> = logos
        .iter()
        .filter(|l| l.split == Split::Train)
        .map(LogoAsset::cropped)
        .collect::<Result<_>>()?;
    let mut plan = Vec::new();
    for class in &spec.classes {
        let positives: Vec<&LogoAsset> = train
            .iter()
            .filter(|l| &l.class_label == class && l.compliance == Compliance::NonCompliant)
            .collect();
        if positives.is_empty() {
            return Err(SynthError::SplitExhausted(class.clone()));
        }
        let lookalikes: Vec<&LogoAsset> = train
            .iter()
            .filter(|l| &l.class_label == class && l.compliance == Compliance::CompliantLookalike)
            .collect();
        for _ in 0..spec.n_per_class {
            plan.push((class, true, positives.clone(), lookalikes.clone()));
        }
        for _ in 0..spec.negatives_per_class() {
            plan.push((class, false, positives.clone(), lookalikes.clone()));
        }
    }

    plan.into_par_iter()
        .enumerate()
        .map(|(idx, (class, positive, positives, lookalikes))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(idx as u64);
            let sample_id = format!("syn-{idx:06}");
            let base = &bases[rng.random_range(0..bases.len())];
            let logo = if positive {
                Some(positives[rng.random_range(0..positives.len())])
            } else if !lookalikes.is_empty() && rng.random_bool(spec.lookalike_fraction) {
                Some(lookalikes[rng.random_range(0..lookalikes.len())])
            } else {
                None
            };
            match logo {
                Some(logo) => {
                    let t = sample_transform(
                        &mut rng,
                        &spec.transform,
                        logo.pixels.dimensions(),
                        base.pixels.dimensions(),
                    )
                    .map_err(|e| match e {
                        SynthError::LogoTooLarge {
                            lw,
                            lh,
                            scale,
                            bw,
                            bh,
                            ..
                        } => SynthError::LogoTooLarge {
                            logo: logo.logo_id.clone(),
                            lw,
                            lh,
                            scale,
                            bw,
                            bh,
                        },
                        other => other,
                    })?;
                    let mut s = superimpose(
                        base,
                        logo,
                        &t,
                        spec.transform.resample,
                        spec.transform.alpha_threshold,
                    )?;
                    s.sample.image.image_id = sample_id.clone();
                    Ok(SyntheticSample {
                        sample_id,
                        class: class.clone(),
                        kind: if positive {
                            SampleKind::Positive
                        } else {
                            SampleKind::Lookalike
                        },
                        base_id: base.image_id.clone(),
                        logo_id: Some(logo.logo_id.clone()),
                        split: Some(logo.split),
                        transform: Some(t),
                        sample: s.sample,
                    })
                }
                None => {
                    let mut image = base.clone();
                    image.image_id = sample_id.clone();
                    Ok(SyntheticSample {
                        sample_id,
                        class: class.clone(),
                        kind: SampleKind::Plain,
                        base_id: base.image_id.clone(),
                        logo_id: None,
                        split: None,
                        transform: None,
                        sample: AnnotatedSample {
                            image,
                            label: Label::Compliant,
                            boxes: Vec::new(),
                            provenance: Provenance::Synthetic,
                        },
                    })
                }
            }
        })
        .collect()
}

/// Footprint recovered from the pixel difference between a base and its composite.
pub fn recover_box(base: &image::RgbaImage, composite: &image::RgbaImage) -> Option<[u32; 4]> {
    diff_bbox(base, composite).map(|(x0, y0, x1, y1)| [x0, y0, x1, y1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub scale: f64,
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub shear: f64,
    pub translate: [u32; 2],
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub image_path: String,
    pub label: Label,
    pub class: String,
    pub boxes: Vec<[u32; 4]>,
    pub logo_id: Option<String>,
    pub split: Option<Split>,
    pub kind: SampleKind,
    pub base_id: String,
    pub category: String,
    pub transform: Option<TransformRecord>,
}

impl From<&SyntheticSample> for AnnotationRecord {
    fn from(s: &SyntheticSample) -> Self {
        Self {
            sample_id: s.sample_id.clone(),
            image_path: format!("images/{}.png", s.sample_id),
            label: s.sample.label,
            class: s.class.clone(),
            boxes: s.sample.boxes.iter().map(|b| b.coords()).collect(),
            logo_id: s.logo_id.clone(),
            split: s.split,
            kind: s.kind,
            base_id: s.base_id.clone(),
            category: s.sample.image.category.clone(),
            transform: s.transform.as_ref().map(|t| TransformRecord {
                scale: t.scale,
                rotation_deg: t.rotation_deg,
                flip_h: t.flip_h,
                shear: t.shear,
                translate: [t.translate.0, t.translate.1],
            }),
        }
    }
}

/// Writes `images/<sample_id>.png` and `annotations.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let io = |source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir.join("images")).map_err(io)?;
    samples.par_iter().try_for_each(|s| {
        save_image(
            &s.sample.image.pixels,
            &dir.join(format!("images/{}.png", s.sample_id)),
        )
    })?;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(dir.join(ANNOTATIONS_FILE)).map_err(io)?);
    for s in samples {
        let line =
            serde_json::to_string(&AnnotationRecord::from(s)).expect("annotation serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let file = std::fs::File::open(&path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|source| SynthError::Io {
                path: path.display().to_string(),
                source,
            })?;
            serde_json::from_str(&l).map_err(|e| SynthError::Parse(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_corpus, CorpusSpec};
    use crate::synthgen::{generate_logos, LogoSpec};

    fn fixtures() -> (Vec<CatalogImage>, Vec<LogoAsset>) {
        let bases =
            generate_corpus(&CorpusSpec::new(20, vec!["toy".into(), "book".into()], 3)).unwrap();
        (bases, generate_logos(&LogoSpec::default()).unwrap())
    }

    #[test]
    fn counts() {
        let (bases, logos) = fixtures();
        let spec = DatasetSpec {
            n_per_class: 5,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec, &bases, &logos).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(
            ds.iter().filter(|s| s.kind == SampleKind::Positive).count(),
            5
        );
        assert!(ds[..5].iter().all(|s| s.sample.boxes.len() == 1));
        assert!(ds[5..]
            .iter()
            .all(|s| s.sample.boxes.is_empty() && s.sample.label == Label::Compliant));

        let spec = DatasetSpec {
            n_per_class: 5,
            neg_ratio: 0.3,
            classes: vec!["bestseller".into(), "award".into()],
            ..DatasetSpec::default()
        };
        assert_eq!(
            generate_dataset(&spec, &bases, &logos).unwrap().len(),
            2 * (5 + 2)
        );
    }

    #[test]
    fn split_hygiene() {
        let (bases, logos) = fixtures();
        let test_ids: Vec<_> = logos
            .iter()
            .filter(|l| l.split() == Split::Test)
            .map(|l| l.logo_id().to_string())
            .collect();
        assert!(!test_ids.is_empty());
        let spec = DatasetSpec {
            n_per_class: 60,
            classes: vec!["bestseller".into(), "made_in".into(), "award".into()],
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec, &bases, &logos).unwrap();
        for s in &ds {
            if let Some(id) = &s.logo_id {
                assert!(!test_ids.contains(id), "{id} is a Test logo");
                assert_eq!(s.split, Some(Split::Train));
            }
        }
        assert!(ds.iter().any(|s| s.kind == SampleKind::Lookalike));
        assert!(ds.iter().any(|s| s.kind == SampleKind::Plain));
    }

    #[test]
    fn missing_train_logos() {
        let (bases, logos) = fixtures();
        let only_test: Vec<_> = logos
            .into_iter()
            .filter(|l| l.split() == Split::Test)
            .collect();
        let err = generate_dataset(&DatasetSpec::default(), &bases, &only_test).unwrap_err();
        assert!(matches!(err, SynthError::SplitExhausted(c) if c == "bestseller"));
    }

    #[test]
    fn same_seed_byte_identical_annotations() {
        let (bases, logos) = fixtures();
        let spec = DatasetSpec {
            n_per_class: 8,
            ..DatasetSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &generate_dataset(&spec, &bases, &logos).unwrap()).unwrap();
        write_dataset(b.path(), &generate_dataset(&spec, &bases, &logos).unwrap()).unwrap();
        let fa = std::fs::read(a.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(fa, std::fs::read(b.path().join(ANNOTATIONS_FILE)).unwrap());
        let recs = read_annotations(a.path()).unwrap();
        assert_eq!(recs.len(), 16);
        assert!(a.path().join(&recs[0].image_path).exists());
    }

    #[test]
    fn serial_equals_parallel() {
        let (bases, logos) = fixtures();
        let spec = DatasetSpec {
            n_per_class: 12,
            ..DatasetSpec::default()
        };
        let par = generate_dataset(&spec, &bases, &logos).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| generate_dataset(&spec, &bases, &logos).unwrap());
        assert_eq!(par, serial);
    }

    #[test]
    fn boxes_recoverable_from_diff() {
        let (bases, logos) = fixtures();
        let spec = DatasetSpec {
            n_per_class: 80,
            classes: vec!["bestseller".into(), "made_in".into(), "award".into()],
            neg_ratio: 0.0,
            ..DatasetSpec::default()
        };
        for s in generate_dataset(&spec, &bases, &logos).unwrap() {
            let base = bases.iter().find(|b| b.image_id == s.base_id).unwrap();
            assert_eq!(
                recover_box(&base.pixels, &s.sample.image.pixels),
                Some(s.sample.boxes[0].coords()),
                "{}",
                s.sample_id
            );
        }
    }
}
