//! Closed synthetic report grammar with per-disease image regions.
//!
//! Each disease owns a characteristic blob location, a keyword set that the
//! rule labeler matches on, and several abnormal sentence phrasings. Normal
//! sentences never contain any disease keyword, which keeps the labeler
//! exact by construction over generated corpora.

use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use super::CorpusError;

/// Lesion renderer. Shapes are deliberately distinctive per disease so the
/// classifier can separate classes by appearance, not just position (global
/// average pooling erases position).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlobShape {
    /// Isotropic gaussian.
    Round { sigma_frac: f64 },
    /// Anisotropic gaussian (layering effusions, streaky edema).
    Band { sigma_x_frac: f64, sigma_y_frac: f64 },
    /// Annulus around the center.
    Ring { radius_frac: f64, sigma_frac: f64 },
    /// Cluster of small dots jittered inside a spread radius.
    Speckle {
        dots: usize,
        spread_frac: f64,
        sigma_frac: f64,
    },
}

impl BlobShape {
    /// Half-extent of the rendered support along (y, x), as size fractions.
    pub fn extent_frac(&self) -> (f64, f64) {
        match self {
            BlobShape::Round { sigma_frac } => (2.2 * sigma_frac, 2.2 * sigma_frac),
            BlobShape::Band {
                sigma_x_frac,
                sigma_y_frac,
            } => (2.2 * sigma_y_frac, 2.2 * sigma_x_frac),
            BlobShape::Ring {
                radius_frac,
                sigma_frac,
            } => (
                radius_frac + 2.2 * sigma_frac,
                radius_frac + 2.2 * sigma_frac,
            ),
            BlobShape::Speckle {
                spread_frac,
                sigma_frac,
                ..
            } => (
                spread_frac + 2.2 * sigma_frac,
                spread_frac + 2.2 * sigma_frac,
            ),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub name: String,
    /// Keyword phrases; a sentence matches when one appears as a contiguous
    /// token run.
    pub keywords: Vec<String>,
    /// Abnormal sentence templates, lowercase, no terminal punctuation.
    pub templates: Vec<String>,
    /// Blob anchor as (row, col) fractions of the image size.
    pub center: (f64, f64),
    pub shape: BlobShape,
    /// Peak intensity range.
    pub intensity: (f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiseaseGrammar {
    pub diseases: Vec<DiseaseSpec>,
    pub normal_templates: Vec<String>,
    /// Cue words/phrases that flip a keyword match to negative.
    pub negation_cues: Vec<String>,
    /// Blob center jitter as a fraction of the image size.
    pub jitter_frac: f64,
}

impl DiseaseGrammar {
    pub fn num_classes(&self) -> usize {
        self.diseases.len()
    }

    /// Axis-aligned ground-truth region (y0, x0, y1, x1) for a disease blob:
    /// anchor plus jitter plus the shape's rendered extent, clipped.
    pub fn ground_truth_box(&self, class: usize, image_size: usize) -> (usize, usize, usize, usize) {
        let spec = &self.diseases[class];
        let (ey, ex) = spec.shape.extent_frac();
        let half_y = (self.jitter_frac + ey) * image_size as f64;
        let half_x = (self.jitter_frac + ex) * image_size as f64;
        let cy = spec.center.0 * image_size as f64;
        let cx = spec.center.1 * image_size as f64;
        let clamp = |v: f64| v.max(0.0).min(image_size as f64) as usize;
        (
            clamp(cy - half_y),
            clamp(cx - half_x),
            clamp(cy + half_y),
            clamp(cx + half_x),
        )
    }

    /// Structural checks: every abnormal template labels exactly its own
    /// class, and no normal template contains any disease keyword.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.diseases.is_empty() {
            return Err(CorpusError::Grammar("no diseases defined".into()));
        }
        for (c, spec) in self.diseases.iter().enumerate() {
            if spec.keywords.is_empty() {
                return Err(CorpusError::Grammar(format!(
                    "disease {} has no keywords",
                    spec.name
                )));
            }
            if spec.templates.len() < 3 {
                return Err(CorpusError::Grammar(format!(
                    "disease {} needs at least 3 templates",
                    spec.name
                )));
            }
            for t in &spec.templates {
                let bits = super::label_sentence(t, self);
                let expected: Vec<bool> = (0..self.diseases.len()).map(|i| i == c).collect();
                if bits != expected {
                    return Err(CorpusError::Grammar(format!(
                        "template {t:?} of {} labels {bits:?}",
                        spec.name
                    )));
                }
            }
        }
        for t in &self.normal_templates {
            let toks = tokenize(t);
            for spec in &self.diseases {
                for kw in &spec.keywords {
                    if contains_phrase(&toks, kw) {
                        return Err(CorpusError::Grammar(format!(
                            "normal template {t:?} contains keyword {kw:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// True when `phrase` (whitespace-separated words) occurs as a contiguous
/// token run in `tokens`.
pub(crate) fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    if words.is_empty() || words.len() > tokens.len() {
        return false;
    }
    tokens
        .windows(words.len())
        .any(|w| w.iter().zip(words.iter()).all(|(t, p)| t == p))
}

impl Default for DiseaseGrammar {
    fn default() -> Self {
        let d = |name: &str,
                 keywords: &[&str],
                 templates: &[&str],
                 center: (f64, f64),
                 shape: BlobShape,
                 intensity: (f64, f64)|
         -> DiseaseSpec {
            DiseaseSpec {
                name: name.into(),
                keywords: keywords.iter().map(|s| s.to_string()).collect(),
                templates: templates.iter().map(|s| s.to_string()).collect(),
                center,
                shape,
                intensity,
            }
        };
        DiseaseGrammar {
            diseases: vec![
                d(
                    "cardiomegaly",
                    &["cardiomegaly", "enlarged", "upper limits"],
                    &[
                        "heart size is upper limits of normal",
                        "the heart is enlarged with moderate cardiomegaly",
                        "stable cardiomegaly is again noted",
                        "the cardiac silhouette is enlarged",
                    ],
                    (0.25, 0.20),
                    BlobShape::Round { sigma_frac: 0.085 },
                    (0.45, 0.65),
                ),
                d(
                    "pleural_effusion",
                    &["effusion", "effusions"],
                    &[
                        "there is a small right pleural effusion",
                        "a moderate left pleural effusion is present",
                        "bilateral pleural effusions have increased in size",
                        "a layering pleural effusion is seen",
                    ],
                    (0.25, 0.50),
                    BlobShape::Band {
                        sigma_x_frac: 0.11,
                        sigma_y_frac: 0.028,
                    },
                    (0.60, 0.80),
                ),
                d(
                    "pneumothorax",
                    &["pneumothorax", "pneumothoraces"],
                    &[
                        "there is a small apical pneumothorax",
                        "a left sided pneumothorax is present",
                        "moderate pneumothorax is identified",
                        "the pneumothorax has slightly increased",
                    ],
                    (0.25, 0.80),
                    BlobShape::Ring {
                        radius_frac: 0.075,
                        sigma_frac: 0.018,
                    },
                    (0.55, 0.80),
                ),
                d(
                    "consolidation",
                    &["consolidation", "consolidative"],
                    &[
                        "there is focal consolidation in the right lower lobe",
                        "patchy consolidation is present in the left base",
                        "dense consolidation is seen at the lung base",
                        "a consolidative process is noted in the right middle lobe",
                    ],
                    (0.75, 0.20),
                    BlobShape::Round { sigma_frac: 0.045 },
                    (0.88, 1.00),
                ),
                d(
                    "edema",
                    &["edema", "vascular congestion"],
                    &[
                        "there is mild pulmonary edema",
                        "interstitial edema has worsened",
                        "moderate pulmonary edema with vascular congestion",
                        "findings are consistent with pulmonary edema",
                    ],
                    (0.75, 0.50),
                    BlobShape::Band {
                        sigma_x_frac: 0.03,
                        sigma_y_frac: 0.10,
                    },
                    (0.50, 0.70),
                ),
                d(
                    "lung_opacity",
                    &["opacity", "opacities", "crowding"],
                    &[
                        "there are low lung volumes with bronchovascular crowding and scattered opacities in the bilateral lung",
                        "a hazy opacity is seen in the right mid lung",
                        "patchy opacities are present bilaterally",
                        "an ill defined opacity projects over the left lung",
                    ],
                    (0.75, 0.80),
                    BlobShape::Speckle {
                        dots: 3,
                        spread_frac: 0.06,
                        sigma_frac: 0.035,
                    },
                    (0.60, 0.80),
                ),
            ],
            normal_templates: [
                "the lungs are clear",
                "no pleural abnormality is seen",
                "the mediastinal contours are within normal limits",
                "no acute osseous abnormality is identified",
                "the trachea is midline",
                "visualized soft tissues are unremarkable",
                "lung volumes are well maintained",
                "degenerative changes are noted in the thoracic spine",
                "the heart is normal in size",
                "there is no free air beneath the diaphragm",
                "pulmonary vasculature is within normal limits",
                "osseous structures are intact",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            negation_cues: ["no", "without", "clear of"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            jitter_frac: 0.045,
        }
    }
}
