//! Synthetic image/report corpus with ground-truth lesions, plus the
//! deterministic sentence labeler that stands in for a learned extractor.

mod grammar;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grammar::{BlobShape, DiseaseGrammar, DiseaseSpec};
pub use vocab::{detokenize, tokenize, Vocabulary, BOS, EOS, PAD, SEP, UNK};

use grammar::contains_phrase;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus must be non-empty")]
    EmptyCorpus,

    #[error("invalid grammar: {0}")]
    Grammar(String),

    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed corpus record at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// One dataset unit: square grayscale image, report text and the
/// ground-truth disease bits the report was built from.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// Row-major size×size pixels in [0, 1].
    pub pixels: Vec<f64>,
    pub size: usize,
    pub report: String,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub image_size: usize,
    /// Per-class Bernoulli rate for drawing diseases.
    pub prevalence: f64,
    /// Upper bound on diseases per sample.
    pub max_diseases: usize,
    /// Inclusive range of normal sentences per report.
    pub normal_sentences: (usize, usize),
    pub noise_amplitude: f64,
    pub id_prefix: String,
    pub grammar: DiseaseGrammar,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            image_size: 64,
            prevalence: 0.25,
            max_diseases: 3,
            normal_sentences: (2, 4),
            noise_amplitude: 0.12,
            id_prefix: "s".into(),
            grammar: DiseaseGrammar::default(),
        }
    }
}

/// Labels a single sentence: a disease is positive when one of its keyword
/// phrases occurs and no negation cue appears in the sentence.
pub fn label_sentence(sentence: &str, grammar: &DiseaseGrammar) -> Vec<bool> {
    let tokens = tokenize(sentence);
    let negated = grammar
        .negation_cues
        .iter()
        .any(|cue| contains_phrase(&tokens, cue));
    grammar
        .diseases
        .iter()
        .map(|spec| {
            !negated && spec.keywords.iter().any(|kw| contains_phrase(&tokens, kw))
        })
        .collect()
}

/// Report-level labels: the sentence-wise OR of `label_sentence`.
/// Unrecognized text yields all-negative.
pub fn extract_labels(report: &str, grammar: &DiseaseGrammar) -> Vec<bool> {
    let mut bits = vec![false; grammar.num_classes()];
    for sentence in crate::prior::split_sentences(report) {
        for (b, s) in bits.iter_mut().zip(label_sentence(&sentence, grammar)) {
            *b = *b || s;
        }
    }
    bits
}

fn draw_labels(rng: &mut ChaCha8Rng, config: &CorpusConfig) -> Vec<bool> {
    let k = config.grammar.num_classes();
    loop {
        let bits: Vec<bool> = (0..k).map(|_| rng.gen_bool(config.prevalence)).collect();
        if bits.iter().filter(|&&b| b).count() <= config.max_diseases {
            return bits;
        }
    }
}

fn add_gaussian(img: &mut [f64], size: usize, cy: f64, cx: f64, sy: f64, sx: f64, peak: f64) {
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 - cy) / sy;
            let dx = (x as f64 - cx) / sx;
            img[y * size + x] += peak * (-(dy * dy + dx * dx) / 2.0).exp();
        }
    }
}

fn render_blob(
    img: &mut [f64],
    size: usize,
    shape: &BlobShape,
    cy: f64,
    cx: f64,
    peak: f64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let s = size as f64;
    match shape {
        BlobShape::Round { sigma_frac } => {
            let sig = sigma_frac * s * scale;
            add_gaussian(img, size, cy, cx, sig, sig, peak);
        }
        BlobShape::Band {
            sigma_x_frac,
            sigma_y_frac,
        } => {
            add_gaussian(
                img,
                size,
                cy,
                cx,
                sigma_y_frac * s * scale,
                sigma_x_frac * s * scale,
                peak,
            );
        }
        BlobShape::Ring {
            radius_frac,
            sigma_frac,
        } => {
            let r0 = radius_frac * s * scale;
            let sig = sigma_frac * s;
            for y in 0..size {
                for x in 0..size {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let r = (dy * dy + dx * dx).sqrt();
                    let d = (r - r0) / sig;
                    img[y * size + x] += peak * (-d * d / 2.0).exp();
                }
            }
        }
        BlobShape::Speckle {
            dots,
            spread_frac,
            sigma_frac,
        } => {
            let spread = spread_frac * s;
            let sig = sigma_frac * s * scale;
            for _ in 0..*dots {
                let dy = rng.gen_range(-spread..=spread);
                let dx = rng.gen_range(-spread..=spread);
                add_gaussian(img, size, cy + dy, cx + dx, sig, sig, peak);
            }
        }
    }
}

fn render_image(rng: &mut ChaCha8Rng, config: &CorpusConfig, bits: &[bool]) -> Vec<f64> {
    let size = config.image_size;
    let mut img: Vec<f64> = (0..size * size)
        .map(|_| rng.gen_range(0.0..config.noise_amplitude))
        .collect();
    for (c, &on) in bits.iter().enumerate() {
        if !on {
            continue;
        }
        let spec = &config.grammar.diseases[c];
        let jitter = config.grammar.jitter_frac * size as f64;
        let cy = spec.center.0 * size as f64 + rng.gen_range(-jitter..=jitter);
        let cx = spec.center.1 * size as f64 + rng.gen_range(-jitter..=jitter);
        let peak = rng.gen_range(spec.intensity.0..spec.intensity.1);
        let scale = rng.gen_range(0.85..1.15);
        render_blob(&mut img, size, &spec.shape, cy, cx, peak, scale, rng);
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn compose_report(rng: &mut ChaCha8Rng, config: &CorpusConfig, bits: &[bool]) -> String {
    let grammar = &config.grammar;
    let mut sentences: Vec<String> = Vec::new();
    for (c, &on) in bits.iter().enumerate() {
        if on {
            let templates = &grammar.diseases[c].templates;
            sentences.push(templates[rng.gen_range(0..templates.len())].clone());
        }
    }
    let (lo, hi) = config.normal_sentences;
    let n_normal = rng.gen_range(lo..=hi).min(grammar.normal_templates.len());
    let mut pool: Vec<usize> = (0..grammar.normal_templates.len()).collect();
    pool.shuffle(rng);
    for &i in pool.iter().take(n_normal) {
        sentences.push(grammar.normal_templates[i].clone());
    }
    sentences.shuffle(rng);
    let cased: Vec<String> = sentences
        .iter()
        .map(|s| {
            let mut chars = s.chars();
            match chars.next() {
                Some(f) => f.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect();
    format!("{}.", cased.join(". "))
}

/// Deterministic corpus generation; each sample uses an RNG stream derived
/// from (seed, index) so samples are independent of corpus size.
pub fn generate_corpus(seed: u64, n: usize, config: &CorpusConfig) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let bits = draw_labels(&mut rng, config);
            let pixels = render_image(&mut rng, config, &bits);
            let report = compose_report(&mut rng, config, &bits);
            Sample {
                id: format!("{}{:05}", config.id_prefix, i),
                pixels,
                size: config.image_size,
                report,
                labels: bits,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    /// base64 of float32 little-endian pixels, row-major, square.
    image: String,
    report: String,
    labels: Vec<u8>,
}

/// One JSON record per line: id, image (base64 f32-LE), report, labels.
pub fn save_corpus(path: &Path, corpus: &[Sample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for sample in corpus {
        let mut bytes = Vec::with_capacity(sample.pixels.len() * 4);
        for &v in &sample.pixels {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let record = SampleRecord {
            id: sample.id.clone(),
            image: B64.encode(&bytes),
            report: sample.report.clone(),
            labels: sample.labels.iter().map(|&b| u8::from(b)).collect(),
        };
        serde_json::to_writer(&mut w, &record)
            .map_err(|e| CorpusError::Malformed { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let bytes = B64.decode(record.image.as_bytes()).map_err(|e| {
            CorpusError::Malformed {
                line: lineno + 1,
                msg: format!("bad base64 image: {e}"),
            }
        })?;
        if bytes.len() % 4 != 0 {
            return Err(CorpusError::Malformed {
                line: lineno + 1,
                msg: "image byte length not a multiple of 4".into(),
            });
        }
        let pixels: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let size = (pixels.len() as f64).sqrt() as usize;
        if size * size != pixels.len() {
            return Err(CorpusError::Malformed {
                line: lineno + 1,
                msg: format!("image length {} is not a square", pixels.len()),
            });
        }
        out.push(Sample {
            id: record.id,
            pixels,
            size,
            report: record.report,
            labels: record.labels.iter().map(|&b| b != 0).collect(),
        });
    }
    Ok(out)
}
