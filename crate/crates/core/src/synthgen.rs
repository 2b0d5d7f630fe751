//! Deterministic two-domain synthetic action benchmark.
//!
//! Every action instance is a checkered rectangle. Its class fixes the checker
//! frequency (cycles across the box) and the motion pattern (static,
//! horizontal or vertical drift), so the class is only recoverable from
//! spatial layout plus temporal pooling. The two domains differ
//! photometrically: background level, global contrast and sensor noise.
//! Source data may be long-tailed and contains close-up clips whose single
//! instance fills most of the frame.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clipstore::{Annotation, Clip, DataError, DatasetIndex, DomainTag, Origin, Sample};
use crate::geometry::{iou, BBox};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Photometric appearance of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub background_mean: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

/// Target appearance relative to the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub background_delta: f64,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub num_classes: usize,
    pub clips_per_domain: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Side length range of regular instances, pixels.
    pub box_min: usize,
    pub box_max: usize,
    /// Fraction of source clips showing a single close-up instance.
    pub closeup_fraction: f64,
    /// Close-up side length as a fraction of the frame side.
    pub closeup_min: f64,
    pub closeup_max: f64,
    /// Largest IoU allowed between two instances of one clip.
    pub max_overlap: f64,
    /// Drift speed of moving classes, in pixels per frame for a `box_max` instance.
    pub speed: f64,
    pub source: DomainStyle,
    pub shift: DomainShift,
    pub long_tail_gamma: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            num_classes: 6,
            clips_per_domain: 200,
            val_clips: 100,
            frames: 8,
            height: 48,
            width: 48,
            channels: 3,
            instances_min: 1,
            instances_max: 3,
            box_min: 10,
            box_max: 16,
            closeup_fraction: 0.3,
            closeup_min: 0.75,
            closeup_max: 0.95,
            max_overlap: 0.05,
            speed: 1.5,
            source: DomainStyle { background_mean: 100.0, contrast: 1.0, noise_sigma: 3.0 },
            shift: DomainShift { background_delta: 50.0, contrast_scale: 0.45, noise_sigma: 12.0 },
            long_tail_gamma: 0.5,
            seed: 42,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.frames < 3 {
            return bad("frames must be at least 3");
        }
        if !matches!(self.channels, 1 | 3) {
            return bad("channels must be 1 or 3");
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return bad("need 1 <= instances_min <= instances_max");
        }
        if self.box_min == 0 || self.box_min > self.box_max {
            return bad("need 1 <= box_min <= box_max");
        }
        if self.box_max > self.width || self.box_max > self.height {
            return bad("instance boxes cannot fit in the frame");
        }
        if !(0.0..=1.0).contains(&self.closeup_fraction)
            || !(0.0 < self.closeup_min && self.closeup_min <= self.closeup_max && self.closeup_max <= 1.0)
        {
            return bad("close-up fractions must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]");
        }
        if self.long_tail_gamma < 0.0 {
            return bad("long_tail_gamma must be non-negative");
        }
        if self.source.noise_sigma < 0.0 || self.shift.noise_sigma < 0.0 {
            return bad("noise sigma must be non-negative");
        }
        Ok(())
    }

    pub fn target_style(&self) -> DomainStyle {
        DomainStyle {
            background_mean: self.source.background_mean + self.shift.background_delta,
            contrast: self.source.contrast * self.shift.contrast_scale,
            noise_sigma: self.shift.noise_sigma,
        }
    }
}

/// How one split of one domain is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub style: DomainStyle,
    pub tag: DomainTag,
    pub id_prefix: String,
    pub num_clips: usize,
    /// Classes that may appear; empty means all.
    pub classes: Vec<usize>,
    pub long_tail_gamma: f64,
    pub closeup_fraction: f64,
    /// Independent random sub-stream for this split.
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motion {
    Static,
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    cycles: f64,
    motion: Motion,
}

fn class_style(class_id: usize) -> ClassStyle {
    let motion = match (class_id / 2) % 3 {
        0 => Motion::Static,
        1 => Motion::Horizontal,
        _ => Motion::Vertical,
    };
    ClassStyle { cycles: 1.0 + (class_id % 2) as f64 + (class_id / 6) as f64, motion }
}

struct Instance {
    bbox: BBox,
    class_id: usize,
    bright: f64,
    dark: f64,
    /// Displacement per frame.
    velocity: (f64, f64),
}

struct Layout {
    background: [f64; 3],
    gradient: (f64, f64),
    instances: Vec<Instance>,
}

/// Per-class quotas `n * p_k` with `p_k ~ (rank + 1)^-gamma`, rounded by largest remainder.
fn class_quotas(total: usize, classes: &[usize], gamma: f64) -> Vec<(usize, usize)> {
    let weights: Vec<f64> = (0..classes.len()).map(|r| (r as f64 + 1.0).powf(-gamma)).collect();
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    classes.iter().copied().zip(counts).collect()
}

fn place_boxes<R: Rng>(cfg: &BenchmarkConfig, closeup: bool, rng: &mut R) -> Vec<BBox> {
    let (w, h) = (cfg.width, cfg.height);
    if closeup {
        let side = rng.gen_range(cfg.closeup_min..=cfg.closeup_max);
        let bw = ((w as f64 * side).round() as usize).clamp(1, w);
        let bh = ((h as f64 * side).round() as usize).clamp(1, h);
        let x = rng.gen_range(0..=w - bw) as f64;
        let y = rng.gen_range(0..=h - bh) as f64;
        return vec![BBox::new(x, y, x + bw as f64, y + bh as f64)];
    }
    let n = rng.gen_range(cfg.instances_min..=cfg.instances_max);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..200 {
            let bw = rng.gen_range(cfg.box_min..=cfg.box_max);
            let bh = rng.gen_range(cfg.box_min..=cfg.box_max);
            let x = rng.gen_range(0..=w - bw) as f64;
            let y = rng.gen_range(0..=h - bh) as f64;
            let b = BBox::new(x, y, x + bw as f64, y + bh as f64);
            if boxes.iter().all(|o| iou(o, &b) <= cfg.max_overlap) {
                boxes.push(b);
                break;
            }
        }
    }
    boxes
}

fn render(cfg: &BenchmarkConfig, style: &DomainStyle, layout: &Layout, noise_seed: u64) -> Clip {
    let (t_n, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let key = t_n / 2;
    let mut rng = stream(noise_seed, Purpose::Generate, u64::MAX);
    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("finite sigma");
    let mut data = vec![0u8; t_n * h * w * c];
    let mut scene = vec![0.0f64; c];
    for t in 0..t_n {
        let dt = t as f64 - key as f64;
        let moved: Vec<(BBox, &Instance)> = layout
            .instances
            .iter()
            .map(|inst| (inst.bbox.translate(inst.velocity.0 * dt, inst.velocity.1 * dt), inst))
            .collect();
        for i in 0..h {
            for j in 0..w {
                let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                for (ch, s) in scene.iter_mut().enumerate() {
                    *s = layout.background[ch] + layout.gradient.0 * (px - w as f64 / 2.0)
                        + layout.gradient.1 * (py - h as f64 / 2.0);
                }
                for (b, inst) in &moved {
                    if px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2 {
                        let cycles = 2.0 * class_style(inst.class_id).cycles;
                        let u = ((px - b.x1) / b.width() * cycles).floor() as i64;
                        let v = ((py - b.y1) / b.height() * cycles).floor() as i64;
                        scene.fill(if (u + v) % 2 == 0 { inst.bright } else { inst.dark });
                    }
                }
                for (ch, &s) in scene.iter().enumerate() {
                    let mut v = 128.0 + style.contrast * (s - 128.0);
                    if style.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data[((t * h + i) * w + j) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Clip::new(t_n, h, w, c, data).expect("generator dims are valid")
}

/// Generate one split of one domain.
pub fn gen_domain(cfg: &BenchmarkConfig, spec: &DomainSpec) -> Result<DatasetIndex, SynthError> {
    cfg.validate()?;
    let classes: Vec<usize> = if spec.classes.is_empty() {
        (0..cfg.num_classes).collect()
    } else {
        spec.classes.clone()
    };
    if let Some(&k) = classes.iter().find(|&&k| k >= cfg.num_classes) {
        return Err(SynthError::Config(format!("class {k} outside 0..{}", cfg.num_classes)));
    }

    let mut rng = stream(cfg.seed, Purpose::Generate, spec.stream);
    let n_closeup = (spec.num_clips as f64 * spec.closeup_fraction).round() as usize;
    let mut closeup: Vec<bool> = (0..spec.num_clips).map(|i| i < n_closeup).collect();
    closeup.shuffle(&mut rng);
    let boxes: Vec<Vec<BBox>> = closeup.iter().map(|&cu| place_boxes(cfg, cu, &mut rng)).collect();

    let total: usize = boxes.iter().map(Vec::len).sum();
    let mut labels: Vec<usize> = class_quotas(total, &classes, spec.long_tail_gamma)
        .into_iter()
        .flat_map(|(k, n)| std::iter::repeat_n(k, n))
        .collect();
    labels.shuffle(&mut rng);

    let mut next_label = labels.into_iter();
    let mut layouts = Vec::with_capacity(spec.num_clips);
    for clip_boxes in boxes {
        let level = spec.style.background_mean + rng.gen_range(-15.0..15.0);
        let mut background = [level; 3];
        background.iter_mut().for_each(|b| *b += rng.gen_range(-5.0..5.0));
        let gradient = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let instances = clip_boxes
            .into_iter()
            .map(|bbox| {
                let class_id = next_label.next().expect("one label per box");
                let zoom = bbox.width().max(bbox.height()) / cfg.box_max as f64;
                let v = cfg.speed * zoom;
                let velocity = match class_style(class_id).motion {
                    Motion::Static => (0.0, 0.0),
                    Motion::Horizontal => (v, 0.0),
                    Motion::Vertical => (0.0, v),
                };
                let jitter = rng.gen_range(-15.0..15.0);
                Instance { bbox, class_id, bright: 205.0 + jitter, dark: 95.0 + jitter, velocity }
            })
            .collect();
        layouts.push(Layout { background, gradient, instances });
    }
    let noise_seeds: Vec<u64> = (0..spec.num_clips).map(|_| rng.gen()).collect();

    let origin = match spec.tag {
        DomainTag::Source => Origin::SourcePrimary,
        DomainTag::Target => Origin::Target,
    };
    let samples: Vec<Sample> = layouts
        .par_iter()
        .zip(noise_seeds.par_iter())
        .enumerate()
        .map(|(idx, (layout, &ns))| {
            let clip = render(cfg, &spec.style, layout, ns);
            let annotations = layout
                .instances
                .iter()
                .enumerate()
                .map(|(n, inst)| Annotation {
                    bbox: inst.bbox,
                    class_id: inst.class_id,
                    instance_id: n as i64,
                    origin,
                })
                .collect();
            Sample::new(format!("{}_{idx:05}", spec.id_prefix), clip, annotations)
        })
        .collect();
    Ok(DatasetIndex::new(spec.tag, cfg.num_classes, samples)?)
}

/// The three standard splits.
pub struct Benchmark {
    pub source: DatasetIndex,
    pub target_train: DatasetIndex,
    pub target_val: DatasetIndex,
}

impl BenchmarkConfig {
    pub fn source_spec(&self) -> DomainSpec {
        DomainSpec {
            style: self.source,
            tag: DomainTag::Source,
            id_prefix: "src".into(),
            num_clips: self.clips_per_domain,
            classes: Vec::new(),
            long_tail_gamma: self.long_tail_gamma,
            closeup_fraction: self.closeup_fraction,
            stream: 0,
        }
    }

    pub fn target_spec(&self, val: bool) -> DomainSpec {
        DomainSpec {
            style: self.target_style(),
            tag: DomainTag::Target,
            id_prefix: if val { "val" } else { "tgt" }.into(),
            num_clips: if val { self.val_clips } else { self.clips_per_domain },
            classes: Vec::new(),
            long_tail_gamma: 0.0,
            closeup_fraction: 0.0,
            stream: if val { 2 } else { 1 },
        }
    }
}

/// Source, target-train and target-validation splits from disjoint random sub-streams.
/// Target-train labels are present in the data; consumers treat them as hidden.
pub fn gen_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark, SynthError> {
    Ok(Benchmark {
        source: gen_domain(cfg, &cfg.source_spec())?,
        target_train: gen_domain(cfg, &cfg.target_spec(false))?,
        target_val: gen_domain(cfg, &cfg.target_spec(true))?,
    })
}
