//! First-stage routing: an L1 category classifier and the category-to-detector table.

use crate::catalog::CatalogImage;
use crate::signature::{ClassicDescriptor, Signature, SignatureExtractor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// The catch-all category that visits no detectors.
pub const REST: &str = "rest";

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("category `rest` must map to no detectors")]
    RestNotEmpty,
    #[error("category {category} references unknown detector {detector}")]
    UnknownDetector { category: String, detector: String },
    #[error("classifier has no centroids")]
    NotFitted,
    #[error("no labelled images")]
    InsufficientData,
    #[error("signature dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

pub type Result<T, E = RouterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoutingTable {
    routes: BTreeMap<String, BTreeSet<String>>,
}

impl RoutingTable {
    /// Validates `routes` against the known detector ids. `rest` is added if absent.
    pub fn new<'a>(
        routes: BTreeMap<String, BTreeSet<String>>,
        known_detectors: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let known: BTreeSet<&str> = known_detectors.into_iter().collect();
        let mut table = Self { routes };
        table.validate(&known)?;
        table.routes.entry(REST.to_string()).or_default();
        Ok(table)
    }

    fn validate(&self, known: &BTreeSet<&str>) -> Result<()> {
        if self.routes.get(REST).is_some_and(|d| !d.is_empty()) {
            return Err(RouterError::RestNotEmpty);
        }
        for (category, detectors) in &self.routes {
            if let Some(d) = detectors.iter().find(|d| !known.contains(d.as_str())) {
                return Err(RouterError::UnknownDetector {
                    category: category.clone(),
                    detector: d.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, category: &str) -> bool {
        self.routes.contains_key(category)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.routes.keys().map(String::as_str)
    }

    /// Every detector id referenced by any category.
    pub fn all_detectors(&self) -> BTreeSet<&str> {
        self.routes.values().flatten().map(String::as_str).collect()
    }

    /// Detectors for `category`; `rest` and unknown categories get none.
    pub fn route(&self, category: &str) -> &BTreeSet<String> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        self.routes.get(category).unwrap_or(&EMPTY)
    }
}

pub fn route<'t>(table: &'t RoutingTable, category: &str) -> &'t BTreeSet<String> {
    table.route(category)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Mode {
    #[default]
    MetadataTrusted,
    NearestCentroid,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct L1Classifier {
    pub mode: L1Mode,
    #[serde(default)]
    pub centroids: BTreeMap<String, Signature>,
}

/// Outcome of L1 classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1Decision {
    /// Category used for routing.
    pub category: String,
    /// What the classifier produced before unknown categories fell back to `rest`.
    pub predicted: String,
}

impl L1Decision {
    pub fn fell_back(&self) -> bool {
        self.category != self.predicted
    }
}

impl L1Classifier {
    pub fn metadata_trusted() -> Self {
        Self::default()
    }

    fn predict(&self, image: &CatalogImage) -> Result<String> {
        match self.mode {
            L1Mode::MetadataTrusted => Ok(image.category.clone()),
            L1Mode::NearestCentroid => {
                if self.centroids.is_empty() {
                    return Err(RouterError::NotFitted);
                }
                let sig = ClassicDescriptor.extract(&image.pixels);
                let mut best: Option<(f64, &str)> = None;
                // BTreeMap order makes the first minimum the lexicographically smallest.
                for (category, c) in &self.centroids {
                    let d = sig.euclidean_sq(c).map_err(|_| RouterError::Dimension {
                        expected: c.dim(),
                        actual: sig.dim(),
                    })?;
                    if best.is_none_or(|(b, _)| d < b) {
                        best = Some((d, category));
                    }
                }
                Ok(best.expect("non-empty").1.to_string())
            }
        }
    }
}

pub fn l1_classify(
    clf: &L1Classifier,
    table: &RoutingTable,
    image: &CatalogImage,
) -> Result<L1Decision> {
    let predicted = clf.predict(image)?;
    let category = if table.contains(&predicted) {
        predicted.clone()
    } else {
        REST.to_string()
    };
    Ok(L1Decision {
        category,
        predicted,
    })
}

/// Nearest-centroid classifier whose centroids are per-category mean signatures.
pub fn fit_centroids(labeled: &[(CatalogImage, String)]) -> Result<L1Classifier> {
    if labeled.is_empty() {
        return Err(RouterError::InsufficientData);
    }
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (image, category) in labeled {
        let sig = ClassicDescriptor.extract(&image.pixels);
        let entry = sums
            .entry(category.clone())
            .or_insert_with(|| (vec![0.0; sig.dim()], 0));
        for (acc, v) in entry.0.iter_mut().zip(&sig.values) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let centroids = sums
        .into_iter()
        .map(|(c, (sum, n))| {
            (
                c,
                Signature::new(sum.into_iter().map(|v| v / n as f64).collect()),
            )
        })
        .collect();
    Ok(L1Classifier {
        mode: L1Mode::NearestCentroid,
        centroids,
    })
}
