//! One-hidden-layer instance classifier with hand-derived gradients.
//!
//! Features are box crops pooled to a `G x G` grid per channel and averaged
//! over time. The network is `softmax(W2 · relu(W1 · f + b1) + b2)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use thiserror::Error;

use crate::clipstore::Clip;
use crate::geometry::BBox;

pub const MODEL_MAGIC: &[u8; 4] = b"MDL1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("zero-area box {0:?}")]
    ZeroArea(BBox),
    #[error("box {0:?} outside {1}x{2} frame")]
    OutOfFrame(BBox, usize, usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("parameter shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(ModelShape, ModelShape),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} outside 0..{num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("batch weights sum to zero")]
    ZeroWeight,
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("bad model magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("inconsistent model header: D={input_dim} but G={grid}, C={channels}")]
    BadHeader { input_dim: usize, grid: usize, channels: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pooled, normalized crop features; values lie in `[-0.5, 0.5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Area-overlap weights of unit pixels `[j, j+1)` against `[lo, hi)`.
fn overlap_weights(lo: f64, hi: f64, limit: usize) -> Vec<(usize, f64)> {
    let start = lo.floor().max(0.0) as usize;
    let end = (hi.ceil().max(0.0) as usize).min(limit);
    (start..end)
        .filter_map(|j| {
            let w = hi.min(j as f64 + 1.0) - lo.max(j as f64);
            (w > 0.0).then_some((j, w))
        })
        .collect()
}

/// Crop `bbox` in every frame, area-average it onto a `grid x grid` lattice per
/// channel, average over time, and map `[0, 255]` to `[-0.5, 0.5]`.
/// Output layout is channel-last: index `(gy * grid + gx) * C + c`.
pub fn extract_features(clip: &Clip, bbox: &BBox, grid: usize) -> Result<FeatureVector, ModelError> {
    if bbox.area() <= 0.0 {
        return Err(ModelError::ZeroArea(*bbox));
    }
    if !bbox.within(clip.width, clip.height) {
        return Err(ModelError::OutOfFrame(*bbox, clip.width, clip.height));
    }
    let (bw, bh) = (bbox.width() / grid as f64, bbox.height() / grid as f64);
    let cols: Vec<Vec<(usize, f64)>> = (0..grid)
        .map(|g| overlap_weights(bbox.x1 + g as f64 * bw, bbox.x1 + (g + 1) as f64 * bw, clip.width))
        .collect();
    let rows: Vec<Vec<(usize, f64)>> = (0..grid)
        .map(|g| overlap_weights(bbox.y1 + g as f64 * bh, bbox.y1 + (g + 1) as f64 * bh, clip.height))
        .collect();

    let ch = clip.channels;
    let mut out = vec![0.0; grid * grid * ch];
    let mut acc = vec![0.0; ch];
    for (gy, row_w) in rows.iter().enumerate() {
        let wy: f64 = row_w.iter().map(|r| r.1).sum();
        for (gx, col_w) in cols.iter().enumerate() {
            let wx: f64 = col_w.iter().map(|c| c.1).sum();
            acc.fill(0.0);
            for t in 0..clip.frames {
                for &(i, ry) in row_w {
                    for &(j, rx) in col_w {
                        let base = clip.index(t, i, j, 0);
                        let w = ry * rx;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += w * clip.data[base + c] as f64;
                        }
                    }
                }
            }
            let norm = wy * wx * clip.frames as f64 * 255.0;
            let cell = (gy * grid + gx) * ch;
            for c in 0..ch {
                out[cell + c] = acc[c] / norm - 0.5;
            }
        }
    }
    Ok(FeatureVector(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub grid: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelShape {
    pub fn input_dim(&self) -> usize {
        self.grid * self.grid * self.channels
    }
}

/// Network weights. `w1` is `hidden x D` and `w2` is `K x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        let (d, h, k) = (shape.input_dim(), shape.hidden_dim, shape.num_classes);
        ModelParams { shape, w1: vec![0.0; h * d], b1: vec![0.0; h], w2: vec![0.0; k * h], b2: vec![0.0; k] }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let mut p = ModelParams::zeros(shape);
        let (d, h, k) = (shape.input_dim(), shape.hidden_dim, shape.num_classes);
        let s1 = (6.0 / (d + h) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-s1..=s1));
        let s2 = (6.0 / (h + k) as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-s2..=s2));
        p
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        for (name, t) in ["w1", "b1", "w2", "b2"].into_iter().zip(self.tensors()) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &ModelParams) -> Result<(), ModelError> {
        if self.shape != other.shape {
            return Err(ModelError::ShapeMismatch(self.shape, other.shape));
        }
        Ok(())
    }

    fn check_input(&self, f: &FeatureVector) -> Result<(), ModelError> {
        let d = self.shape.input_dim();
        if f.len() != d {
            return Err(ModelError::DimMismatch { expected: d, found: f.len() });
        }
        Ok(())
    }

    /// Pre-activations, hidden activations and logits.
    fn activations(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (d, h) = (self.shape.input_dim(), self.shape.hidden_dim);
        let pre: Vec<f64> = (0..h)
            .map(|r| self.b1[r] + dot(&self.w1[r * d..(r + 1) * d], f))
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let logits: Vec<f64> = (0..self.shape.num_classes)
            .map(|k| self.b2[k] + dot(&self.w2[k * h..(k + 1) * h], &hidden))
            .collect();
        (pre, hidden, logits)
    }

    /// Class probabilities for one feature vector.
    pub fn forward(&self, f: &FeatureVector) -> Result<Vec<f64>, ModelError> {
        self.check_finite()?;
        self.check_input(f)?;
        Ok(softmax(&self.activations(&f.0).2))
    }

    /// Probabilities for many feature vectors; parameters are validated once.
    pub fn forward_batch(&self, fs: &[&FeatureVector]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_finite()?;
        fs.iter()
            .map(|f| {
                self.check_input(f)?;
                Ok(softmax(&self.activations(&f.0).2))
            })
            .collect()
    }

    /// Weighted-mean cross-entropy and its gradient.
    pub fn loss_and_grad(&self, batch: &[(&FeatureVector, usize, f64)]) -> Result<(f64, ModelParams), ModelError> {
        self.check_finite()?;
        let total_weight: f64 = batch.iter().map(|b| b.2).sum();
        for &(f, label, w) in batch {
            self.check_input(f)?;
            if label >= self.shape.num_classes {
                return Err(ModelError::LabelOutOfRange { label, num_classes: self.shape.num_classes });
            }
            if w < 0.0 || !w.is_finite() {
                return Err(ModelError::NegativeWeight(w));
            }
        }
        if total_weight <= 0.0 {
            return Err(ModelError::ZeroWeight);
        }

        let (d, h) = (self.shape.input_dim(), self.shape.hidden_dim);
        let mut grad = ModelParams::zeros(self.shape);
        let mut loss = 0.0;
        let mut dh = vec![0.0; h];
        for &(f, label, w) in batch {
            if w == 0.0 {
                continue;
            }
            let scale = w / total_weight;
            let (pre, hidden, logits) = self.activations(&f.0);
            let lse = log_sum_exp(&logits);
            loss += scale * (lse - logits[label]);

            // dL/dz = softmax(z) - onehot(label)
            dh.fill(0.0);
            for (k, &z) in logits.iter().enumerate() {
                let dz = scale * ((z - lse).exp() - if k == label { 1.0 } else { 0.0 });
                grad.b2[k] += dz;
                let w2_row = &self.w2[k * h..(k + 1) * h];
                for r in 0..h {
                    grad.w2[k * h + r] += dz * hidden[r];
                    dh[r] += dz * w2_row[r];
                }
            }
            for r in 0..h {
                if pre[r] <= 0.0 {
                    continue;
                }
                let da = dh[r];
                grad.b1[r] += da;
                for (g, &x) in grad.w1[r * d..(r + 1) * d].iter_mut().zip(&f.0) {
                    *g += da * x;
                }
            }
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        ModelParams::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(MODEL_MAGIC)?;
        let s = self.shape;
        for v in [s.input_dim(), s.hidden_dim, s.num_classes, s.grid, s.channels] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for t in self.tensors() {
            for &v in t {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let mut dims = [0u32; 5];
        r.read_u32_into::<LittleEndian>(&mut dims)?;
        let [input_dim, hidden_dim, num_classes, grid, channels] = dims.map(|v| v as usize);
        let shape = ModelShape { grid, channels, hidden_dim, num_classes };
        if shape.input_dim() != input_dim {
            return Err(ModelError::BadHeader { input_dim, grid, channels });
        }
        let mut p = ModelParams::zeros(shape);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
        }
        Ok(p)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-shifted exponential normalization.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index and value of the largest probability; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Mean-teacher update: `teacher = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<ModelParams, ModelError> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<(), ModelError> {
    teacher.check_same_shape(student)?;
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, sv) in t.iter_mut().zip(s) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}
