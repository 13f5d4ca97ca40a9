//! Phase 1: multi-label GAP classifier, class activation maps, and
//! disease-oriented masks with truncated-SVD channel compression.

mod svd;

pub use svd::{reconstruction_error, truncated_svd, TruncatedSvd};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use numerics::{
    backward, bce_with_logits, conv2d, global_avg_pool, load_checkpoint, save_checkpoint, Adam,
    AdamConfig, CheckpointEntry, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;

#[derive(Debug, Error)]
pub enum CamError {
    #[error("class index {index} out of range (num_classes = {k})")]
    ClassOutOfRange { index: usize, k: usize },

    #[error("compress_dom needs at least 3 channels, got {k}; configure identity pass-through for smaller stacks")]
    TooFewChannels { k: usize },

    #[error("classifier training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("corpus must be non-empty and labeled")]
    EmptyCorpus,

    #[error(transparent)]
    Tensor(#[from] numerics::TensorError),

    #[error("pool i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed pool file: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Channel widths of the three stride-2 conv layers.
    pub channels: [usize; 3],
    pub kernel: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_size: 64,
            num_classes: 6,
            channels: [8, 16, 32],
            kernel: 3,
            lr: 1e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Three stride-2 conv/relu layers, then exactly global-average-pool and a
/// single linear map — the structure class activation maps require.
pub struct ClassifierModel {
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    /// [num_classes, feature_channels]; row c holds the per-unit weights
    /// used both for classification and for the class-c activation map.
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub config: ClassifierConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainCurve {
    pub epoch_losses: Vec<f64>,
}

fn init_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller on the seeded stream
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect()
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig) -> Result<ClassifierModel, CamError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut cin = 1;
        for &cout in &config.channels {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            conv_w.push(Tensor::param(
                init_normal(&mut rng, cout * cin * k * k, std),
                &[cout, cin, k, k],
            )?);
            conv_b.push(Tensor::param(vec![0.0; cout], &[cout])?);
            cin = cout;
        }
        let cfeat = config.channels[2];
        let std = (1.0 / cfeat as f64).sqrt();
        let head_w = Tensor::param(
            init_normal(&mut rng, config.num_classes * cfeat, std),
            &[config.num_classes, cfeat],
        )?;
        let head_b = Tensor::param(vec![0.0; config.num_classes], &[config.num_classes])?;
        Ok(ClassifierModel {
            conv_w,
            conv_b,
            head_w,
            head_b,
            config,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = Vec::new();
        for (w, b) in self.conv_w.iter().zip(self.conv_b.iter()) {
            p.push(w.clone());
            p.push(b.clone());
        }
        p.push(self.head_w.clone());
        p.push(self.head_b.clone());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv_w.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Final conv feature maps for one image, shape [c_feat, h, w].
    pub fn features(&self, pixels: &[f64]) -> Result<Tensor, CamError> {
        let s = self.config.image_size;
        let mut x = Tensor::from_vec(pixels.to_vec(), &[1, s, s])?;
        for (w, b) in self.conv_w.iter().zip(self.conv_b.iter()) {
            x = conv2d(&x, w, b, 2, self.config.kernel / 2)?.relu();
        }
        Ok(x)
    }

    /// Pre-sigmoid class scores, shape [1, num_classes].
    pub fn logits(&self, pixels: &[f64]) -> Result<Tensor, CamError> {
        let feat = self.features(pixels)?;
        let pooled = global_avg_pool(&feat)?;
        Ok(pooled
            .matmul(&self.head_w.transpose2d()?)?
            .add(&self.head_b)?)
    }

    /// Sigmoid probabilities per class.
    pub fn predict(&self, pixels: &[f64]) -> Result<Vec<f64>, CamError> {
        Ok(self.logits(pixels)?.sigmoid().data())
    }

    pub fn save(&self, path: &Path) -> Result<(), CamError> {
        let entries: Vec<CheckpointEntry> = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, t)| CheckpointEntry {
                name,
                shape: t.shape(),
                data: t.data(),
            })
            .collect();
        save_checkpoint(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path, config: ClassifierConfig) -> Result<ClassifierModel, CamError> {
        let model = ClassifierModel::new(config)?;
        let entries = load_checkpoint(path)?;
        let names = model.param_names();
        let params = model.params();
        if entries.len() != params.len() {
            return Err(CamError::Malformed(format!(
                "expected {} tensors, found {}",
                params.len(),
                entries.len()
            )));
        }
        for ((name, param), entry) in names.iter().zip(params.iter()).zip(entries.iter()) {
            if *name != entry.name || param.shape() != entry.shape {
                return Err(CamError::Malformed(format!(
                    "tensor {} does not match the configured architecture",
                    entry.name
                )));
            }
            param.set_data(entry.data.clone())?;
        }
        Ok(model)
    }
}

/// Minimizes per-class sigmoid binary cross-entropy with Adam; deterministic
/// under the config seed.
pub fn train_classifier(
    corpus: &[Sample],
    config: ClassifierConfig,
) -> Result<(ClassifierModel, TrainCurve), CamError> {
    if corpus.is_empty() {
        return Err(CamError::EmptyCorpus);
    }
    let model = ClassifierModel::new(config.clone())?;
    let params = model.params();
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut curve = TrainCurve::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sample = &corpus[idx];
                let targets: Vec<f64> =
                    sample.labels.iter().map(|&b| f64::from(u8::from(b))).collect();
                let logits = model.logits(&sample.pixels)?;
                let loss = bce_with_logits(&logits, &targets)?;
                epoch_loss += loss.item();
                backward(&loss.scale(scale))?;
            }
            opt.step(&params)?;
        }
        epoch_loss /= corpus.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(CamError::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        curve.epoch_losses.push(epoch_loss);
    }
    Ok((model, curve))
}

/// Spatial class evidence for one class: raw map at feature resolution plus
/// the clamped, upsampled and min-max-normalized image-resolution map.
#[derive(Clone, Debug)]
pub struct ClassActivationMap {
    pub class_index: usize,
    /// Σ_k w_k^c · f_k(x, y) before clamping; ties algebraically to the
    /// GAP-path logit.
    pub lowres_raw: Vec<f64>,
    pub lowres_h: usize,
    pub lowres_w: usize,
    /// Image-resolution map in [0, 1]; constant raw maps become all-zeros.
    pub upsampled: Vec<f64>,
    pub size: usize,
}

fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Raw spatial class evidence: Σ_k class_weights[k] · features[k, y, x].
/// `features` is [c_feat, h, w] row-major, `class_weights` has length c_feat.
pub fn cam_raw_map(
    class_weights: &[f64],
    features: &[f64],
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut map = vec![0.0; h * w];
    for (unit, &wkc) in class_weights.iter().enumerate() {
        let plane = &features[unit * h * w..(unit + 1) * h * w];
        for (m, &v) in map.iter_mut().zip(plane.iter()) {
            *m += wkc * v;
        }
    }
    map
}

/// Weighted sum of feature maps for `class_index`, clamped at zero,
/// bilinearly upsampled to image resolution and min-max normalized.
pub fn compute_cam(
    model: &ClassifierModel,
    pixels: &[f64],
    class_index: usize,
) -> Result<ClassActivationMap, CamError> {
    let k = model.config.num_classes;
    if class_index >= k {
        return Err(CamError::ClassOutOfRange {
            index: class_index,
            k,
        });
    }
    let feat = model.features(pixels)?;
    let shape = feat.shape();
    let (cfeat, h, w) = (shape[0], shape[1], shape[2]);
    let weights = model.head_w.data();
    let lowres_raw = feat.with_data(|f| {
        cam_raw_map(&weights[class_index * cfeat..(class_index + 1) * cfeat], f, h, w)
    });
    let size = model.config.image_size;
    let clamped: Vec<f64> = lowres_raw.iter().map(|&v| v.max(0.0)).collect();
    let mut upsampled = bilinear_upsample(&clamped, h, w, size, size);
    let max = upsampled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = upsampled.iter().cloned().fold(f64::INFINITY, f64::min);
    if max - min <= 1e-12 {
        upsampled.iter_mut().for_each(|v| *v = 0.0);
    } else {
        upsampled.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
    }
    Ok(ClassActivationMap {
        class_index,
        lowres_raw,
        lowres_h: h,
        lowres_w: w,
        upsampled,
        size,
    })
}

/// Channel-last stack of per-class activation maps with its rank-3
/// compression.
#[derive(Clone, Debug)]
pub struct DiseaseOrientedMask {
    pub sample_id: String,
    /// (H, W, K) channel-last: raw[(y·W + x)·K + c].
    pub raw: Vec<f64>,
    /// (H, W, 3) channel-last.
    pub compressed: Vec<f64>,
    pub size: usize,
    pub classes: usize,
}

/// Rank-3 compression of the (H·W)×K channel matrix: returns U₃Σ₃ refolded
/// to (H, W, 3). Channel-last layout makes the unfolding a reinterpretation.
pub fn compress_dom(raw: &[f64], size: usize, classes: usize) -> Result<Vec<f64>, CamError> {
    if classes < 3 {
        return Err(CamError::TooFewChannels { k: classes });
    }
    let rows = size * size;
    let svd = truncated_svd(raw, rows, classes, 3);
    let mut compressed = vec![0.0; rows * 3];
    for (j, col) in svd.scaled_left.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            compressed[i * 3 + j] = v;
        }
    }
    Ok(compressed)
}

/// Stacks compute_cam over all classes in class order and compresses.
pub fn build_dom(
    model: &ClassifierModel,
    pixels: &[f64],
    sample_id: &str,
) -> Result<DiseaseOrientedMask, CamError> {
    let k = model.config.num_classes;
    let size = model.config.image_size;
    let mut raw = vec![0.0; size * size * k];
    for c in 0..k {
        let cam = compute_cam(model, pixels, c)?;
        for (i, &v) in cam.upsampled.iter().enumerate() {
            raw[i * k + c] = v;
        }
    }
    let compressed = compress_dom(&raw, size, k)?;
    Ok(DiseaseOrientedMask {
        sample_id: sample_id.to_string(),
        raw,
        compressed,
        size,
        classes: k,
    })
}

/// Compressed DOM per corpus sample, in corpus order.
pub fn build_dom_pool(
    model: &ClassifierModel,
    corpus: &[Sample],
) -> Result<Vec<DiseaseOrientedMask>, CamError> {
    corpus
        .iter()
        .map(|s| build_dom(model, &s.pixels, &s.id))
        .collect()
}

const POOL_MAGIC: &[u8; 4] = b"DOMP";
const POOL_VERSION: u32 = 1;

/// Pool layout: magic `DOMP`, version u32, entry count u64, then per entry
/// id length u32 + UTF-8 id, H, W, C (u32 each), float32-LE payload.
pub fn save_dom_pool(path: &Path, pool: &[DiseaseOrientedMask]) -> Result<(), CamError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(POOL_MAGIC)?;
    w.write_all(&POOL_VERSION.to_le_bytes())?;
    w.write_all(&(pool.len() as u64).to_le_bytes())?;
    for dom in pool {
        let id = dom.sample_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(dom.size as u32).to_le_bytes())?;
        w.write_all(&(dom.size as u32).to_le_bytes())?;
        w.write_all(&3u32.to_le_bytes())?;
        for &v in &dom.compressed {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pool entries as (sample_id, flattened compressed mask).
pub fn load_dom_pool(path: &Path) -> Result<Vec<(String, Vec<f64>)>, CamError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POOL_MAGIC {
        return Err(CamError::Malformed(format!(
            "bad magic {magic:?}, expected {POOL_MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != POOL_VERSION {
        return Err(CamError::Malformed(format!("unsupported version {version}")));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf4)?;
        let id_len = u32::from_le_bytes(buf4) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id =
            String::from_utf8(id).map_err(|e| CamError::Malformed(format!("bad id: {e}")))?;
        r.read_exact(&mut buf4)?;
        let h = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let w = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let c = u32::from_le_bytes(buf4) as usize;
        let mut payload = vec![0u8; h * w * c * 4];
        r.read_exact(&mut payload)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((id, data));
    }
    Ok(out)
}

/// Rank-based (Mann-Whitney) AUC averaged over classes that have both
/// positives and negatives.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> f64 {
    let k = scores.first().map(Vec::len).unwrap_or(0);
    let mut aucs = Vec::new();
    for c in 0..k {
        let mut pairs: Vec<(f64, bool)> = scores
            .iter()
            .zip(labels.iter())
            .map(|(s, l)| (s[c], l[c]))
            .collect();
        let pos = pairs.iter().filter(|(_, l)| *l).count();
        let neg = pairs.len() - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // average ranks over ties
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < pairs.len() {
            let mut j = i;
            while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
                j += 1;
            }
            let avg_rank = (i + j) as f64 / 2.0 + 1.0;
            for p in pairs.iter().take(j + 1).skip(i) {
                if p.1 {
                    rank_sum_pos += avg_rank;
                }
            }
            i = j + 1;
        }
        let auc =
            (rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64);
        aucs.push(auc);
    }
    if aucs.is_empty() {
        0.0
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}
