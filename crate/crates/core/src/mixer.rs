//! Action-instance cross-domain mixing.
//!
//! Half of the source instances are sampled, their boxes are expanded and
//! rasterized on the key-frame, and the 2D mask is replicated over time. Large
//! pasted regions trigger a 0.5 downscale of the source clip. Target boxes that
//! end up mostly covered by pasted source boxes are dropped from supervision.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clipstore::{Annotation, Clip, Origin, Sample};
use crate::geometry::{coverage, expand_box, rasterize, resize_box_half, BBox, GeometryError, Mask3D};

#[derive(Debug, Error)]
pub enum MixError {
    #[error("no instances to select from")]
    NoInstances,
    #[error("clip dims differ: source {0:?} vs target {1:?}")]
    DimMismatch((usize, usize, usize, usize), (usize, usize, usize, usize)),
    #[error("mask dims {0:?} do not match clip dims {1:?}")]
    MaskMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("{pseudo} pseudo-labels for {targets} target boxes")]
    Misaligned { pseudo: usize, targets: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    /// Total relative growth of each pasted box.
    pub expand_factor: f64,
    /// Target boxes covered by more than this fraction are discarded.
    pub discard_threshold: f64,
    /// Key-frame mask occupancy above which the source clip is downscaled.
    pub downscale_area_ratio: f64,
    pub enable_resize: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { expand_factor: 0.2, discard_threshold: 0.4, downscale_area_ratio: 0.5, enable_resize: true }
    }
}

/// Teacher output for one target box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct MixedSample {
    pub clip: Clip,
    /// Selected source instances first, then the kept target instances.
    pub annotations: Vec<Annotation>,
    /// Teacher confidence of each target-origin annotation, in order.
    pub kept_target_confidences: Vec<f64>,
    pub discarded_count: usize,
    pub downscaled: bool,
}

impl MixedSample {
    pub fn target_count(&self) -> usize {
        self.annotations.iter().filter(|a| a.origin == Origin::Target).count()
    }
}

/// A uniformly random subset of `ceil(n / 2)` items, in input order.
pub fn select_instances<T: Clone, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> Result<Vec<T>, MixError> {
    if items.is_empty() {
        return Err(MixError::NoInstances);
    }
    let k = items.len().div_ceil(2);
    let mut idx = rand::seq::index::sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

/// Expanded boxes as pasted onto the mixed frame.
pub fn pasted_boxes(selected: &[BBox], expand_factor: f64, width: usize, height: usize) -> Vec<BBox> {
    selected.iter().map(|b| expand_box(b, expand_factor, width, height)).collect()
}

/// Expand, rasterize on the key-frame and replicate across `frames`.
pub fn build_mask(selected: &[BBox], expand_factor: f64, frames: usize, height: usize, width: usize) -> Mask3D {
    let key = rasterize(&pasted_boxes(selected, expand_factor, width, height), width, height);
    Mask3D::replicate(&key, frames)
}

/// 2x2 mean pooling of every frame, pasted centered into a zero frame at
/// offset `(round(H/4), round(W/4))`. Odd trailing rows and columns pool with zeros.
pub fn downscale_clip(clip: &Clip) -> Clip {
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
    let oy = (h as f64 / 4.0).round() as usize;
    let ox = (w as f64 / 4.0).round() as usize;
    let mut out = Clip { data: vec![0; clip.len()], ..clip.clone() };
    for t in 0..clip.frames {
        for i in 0..hh {
            for j in 0..hw {
                for ch in 0..c {
                    let mut sum = 0u32;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (r, q) = (2 * i + di, 2 * j + dj);
                        if r < h && q < w {
                            sum += clip.get(t, r, q, ch) as u32;
                        }
                    }
                    let idx = out.index(t, oy + i, ox + j, ch);
                    out.data[idx] = ((sum + 2) / 4) as u8;
                }
            }
        }
    }
    out
}

/// Outcome of the downscale decision.
#[derive(Debug, Clone)]
pub struct Downscaled {
    pub source: Sample,
    pub selected: Vec<Annotation>,
    pub mask: Mask3D,
    pub applied: bool,
}

/// Downscale the source clip when the key-frame mask covers more than
/// `downscale_area_ratio` of the frame. All source boxes follow the resize and
/// the mask is rebuilt from the moved selected boxes.
pub fn apply_downscale_rule(source: &Sample, selected: &[Annotation], mask: Mask3D, cfg: &MixConfig) -> Downscaled {
    let clip = &source.clip;
    let ratio = mask.slice_popcount(clip.key_index) as f64 / (clip.height * clip.width) as f64;
    if !(cfg.enable_resize && ratio > cfg.downscale_area_ratio) {
        return Downscaled { source: source.clone(), selected: selected.to_vec(), mask, applied: false };
    }
    let (w, h) = (clip.width, clip.height);
    let resize = |a: &Annotation| Annotation { bbox: resize_box_half(&a.bbox, w, h), ..*a };
    let moved_selected: Vec<Annotation> = selected.iter().map(resize).collect();
    let boxes: Vec<BBox> = moved_selected.iter().map(|a| a.bbox).collect();
    let mask = build_mask(&boxes, cfg.expand_factor, clip.frames, h, w);
    let source = Sample {
        sample_id: source.sample_id.clone(),
        clip: std::sync::Arc::new(downscale_clip(clip)),
        annotations: source.annotations.iter().map(resize).collect(),
    };
    Downscaled { source, selected: moved_selected, mask, applied: true }
}

/// `x_M = M * x_S + (1 - M) * x_T`, exactly, voxel by voxel.
pub fn mix_clips(source: &Clip, target: &Clip, mask: &Mask3D) -> Result<Clip, MixError> {
    let dims = |c: &Clip| (c.frames, c.height, c.width, c.channels);
    if !source.same_dims(target) {
        return Err(MixError::DimMismatch(dims(source), dims(target)));
    }
    if (mask.frames, mask.height, mask.width) != (source.frames, source.height, source.width) {
        return Err(MixError::MaskMismatch(
            (mask.frames, mask.height, mask.width),
            (source.frames, source.height, source.width),
        ));
    }
    let c = source.channels;
    let data = mask
        .data
        .iter()
        .zip(source.data.chunks_exact(c).zip(target.data.chunks_exact(c)))
        .flat_map(|(&m, (s, t))| if m != 0 { s } else { t })
        .copied()
        .collect();
    Ok(Clip { data, ..target.clone() })
}

#[derive(Debug, Clone)]
pub struct MixedLabels {
    pub annotations: Vec<Annotation>,
    pub confidences: Vec<f64>,
    pub discarded_count: usize,
}

/// Merge source ground truth with pseudo-labeled target boxes. A target box is
/// kept iff its coverage by the pasted boxes is at most `discard_threshold`.
pub fn mix_labels(
    selected_source: &[Annotation],
    target: &[Annotation],
    pseudo: &[PseudoLabel],
    pasted: &[BBox],
    cfg: &MixConfig,
) -> Result<MixedLabels, MixError> {
    if pseudo.len() != target.len() {
        return Err(MixError::Misaligned { pseudo: pseudo.len(), targets: target.len() });
    }
    let mut annotations = selected_source.to_vec();
    let mut confidences = Vec::new();
    let mut discarded_count = 0;
    for (t, p) in target.iter().zip(pseudo) {
        if coverage(&t.bbox, pasted)? > cfg.discard_threshold {
            discarded_count += 1;
            continue;
        }
        annotations.push(Annotation { class_id: p.label, origin: Origin::Target, ..*t });
        confidences.push(p.confidence);
    }
    Ok(MixedLabels { annotations, confidences, discarded_count })
}

/// Build one mixed training sample from a source/target pair.
///
/// Returns [`MixError::NoInstances`] when the source has no annotations; the
/// caller then trains on the target clip with its pseudo-labels alone.
pub fn aim_mix<R: Rng + ?Sized>(
    source: &Sample,
    target: &Sample,
    pseudo: &[PseudoLabel],
    rng: &mut R,
    cfg: &MixConfig,
) -> Result<MixedSample, MixError> {
    let (s, t) = (&source.clip, &target.clip);
    if !s.same_dims(t) {
        return Err(MixError::DimMismatch(
            (s.frames, s.height, s.width, s.channels),
            (t.frames, t.height, t.width, t.channels),
        ));
    }
    if pseudo.len() != target.annotations.len() {
        return Err(MixError::Misaligned { pseudo: pseudo.len(), targets: target.annotations.len() });
    }
    let selected = select_instances(&source.annotations, rng)?;
    let boxes: Vec<BBox> = selected.iter().map(|a| a.bbox).collect();
    let mask = build_mask(&boxes, cfg.expand_factor, s.frames, s.height, s.width);
    let down = apply_downscale_rule(source, &selected, mask, cfg);

    let clip = mix_clips(&down.source.clip, t, &down.mask)?;
    let moved: Vec<BBox> = down.selected.iter().map(|a| a.bbox).collect();
    let pasted = pasted_boxes(&moved, cfg.expand_factor, s.width, s.height);
    let labels = mix_labels(&down.selected, &target.annotations, pseudo, &pasted, cfg)?;
    Ok(MixedSample {
        clip,
        annotations: labels.annotations,
        kept_target_confidences: labels.confidences,
        discarded_count: labels.discarded_count,
        downscaled: down.applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ann(b: BBox, class_id: usize, origin: Origin) -> Annotation {
        Annotation { bbox: b, class_id, instance_id: 0, origin }
    }

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, c: usize) -> Clip {
        Clip::new(t, h, w, c, (0..t * h * w * c).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn select_half_rounded_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_instances(&[7], &mut rng).unwrap(), vec![7]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = select_instances(&[1, 2, 3, 4], &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            let mut again = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(select_instances(&[1, 2, 3, 4], &mut again).unwrap(), s);
        }
        assert_eq!(select_instances(&[1, 2, 3, 4, 5], &mut rng).unwrap().len(), 3);
        assert!(matches!(select_instances::<u8, _>(&[], &mut rng), Err(MixError::NoInstances)));
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(&[], 0.2, 3, 5, 5);
        assert!(m.data.iter().all(|&v| v == 0));
        let m = build_mask(&[BBox::full_frame(5, 4)], 0.2, 3, 4, 5);
        assert!(m.data.iter().all(|&v| v == 1));
        let m = build_mask(&[BBox::new(40.0, 40.0, 60.0, 60.0)], 0.2, 4, 100, 100);
        for t in 0..4 {
            assert_eq!(m.slice_popcount(t), 24 * 24);
            assert_eq!(m.slice(t), m.slice(0));
        }
    }

    #[test]
    fn downscale_threshold() {
        let cfg = MixConfig::default();
        let clip = Clip::filled(2, 100, 100, 1, 80);
        let big = ann(BBox::new(0.0, 0.0, 100.0, 60.0), 0, Origin::SourcePrimary);
        let source = Sample::new("s", clip.clone(), vec![big]);
        // 6000 of 10000 pixels occupied.
        let mask = build_mask(&[big.bbox], 0.0, 2, 100, 100);
        assert_eq!(mask.slice_popcount(1), 6000);
        let d = apply_downscale_rule(&source, &[big], mask, &MixConfig { expand_factor: 0.0, ..cfg });
        assert!(d.applied);
        assert_eq!(d.selected[0].bbox, BBox::new(25.0, 25.0, 75.0, 55.0));
        assert_eq!(d.mask.slice_popcount(0), 50 * 30);

        let small = ann(BBox::new(0.0, 0.0, 10.0, 10.0), 0, Origin::SourcePrimary);
        let source = Sample::new("s", clip, vec![small]);
        let mask = build_mask(&[small.bbox], 0.0, 2, 100, 100);
        let d = apply_downscale_rule(&source, &[small], mask.clone(), &MixConfig { expand_factor: 0.0, ..cfg });
        assert!(!d.applied);
        assert_eq!(d.mask, mask);
        assert_eq!(*d.source.clip, *source.clip);
        assert_eq!(d.selected, vec![small]);
    }

    #[test]
    fn downscale_disabled_passes_through() {
        let cfg = MixConfig { enable_resize: false, ..MixConfig::default() };
        let full = ann(BBox::full_frame(10, 10), 0, Origin::SourcePrimary);
        let source = Sample::new("s", Clip::filled(2, 10, 10, 1, 9), vec![full]);
        let mask = build_mask(&[full.bbox], 0.2, 2, 10, 10);
        assert!(!apply_downscale_rule(&source, &[full], mask, &cfg).applied);
    }

    #[test]
    fn downscale_constant_clip() {
        let out = downscale_clip(&Clip::filled(2, 10, 12, 3, 80));
        // Paste region rows [round(2.5)=3, 3+5) and cols [3, 3+6).
        for t in 0..2 {
            for i in 0..10 {
                for j in 0..12 {
                    let inside = (3..8).contains(&i) && (3..9).contains(&j);
                    for c in 0..3 {
                        assert_eq!(out.get(t, i, j, c), if inside { 80 } else { 0 }, "({t},{i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn downscale_region_matches_resized_full_frame() {
        for (h, w) in [(10, 12), (7, 9), (5, 5), (1, 3)] {
            let out = downscale_clip(&Clip::filled(1, h, w, 1, 200));
            let region = rasterize(&[resize_box_half(&BBox::full_frame(w, h), w, h)], w, h);
            for i in 0..h {
                for j in 0..w {
                    assert_eq!(out.get(0, i, j, 0) != 0, region.get(i, j) == 1, "{h}x{w} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn mix_clip_extremes_and_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_clip(&mut rng, 3, 6, 7, 3);
        let t = random_clip(&mut rng, 3, 6, 7, 3);
        assert_eq!(mix_clips(&s, &t, &Mask3D::zeros(3, 6, 7)).unwrap(), t);
        let ones = Mask3D { data: vec![1; 3 * 6 * 7], ..Mask3D::zeros(3, 6, 7) };
        assert_eq!(mix_clips(&s, &t, &ones).unwrap(), s);

        let mut m = Mask3D::zeros(3, 6, 7);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(0..2));
        let x = mix_clips(&s, &t, &m).unwrap();
        for ti in 0..3 {
            for i in 0..6 {
                for j in 0..7 {
                    for c in 0..3 {
                        let expect = if m.get(ti, i, j) == 1 { s.get(ti, i, j, c) } else { t.get(ti, i, j, c) };
                        assert_eq!(x.get(ti, i, j, c), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn mix_clip_dim_errors() {
        let a = Clip::filled(2, 4, 4, 1, 0);
        let b = Clip::filled(2, 4, 5, 1, 0);
        assert!(matches!(mix_clips(&a, &b, &Mask3D::zeros(2, 4, 4)), Err(MixError::DimMismatch(..))));
        assert!(matches!(mix_clips(&a, &a, &Mask3D::zeros(1, 4, 4)), Err(MixError::MaskMismatch(..))));
    }

    #[test]
    fn mix_labels_worked_example() {
        let cfg = MixConfig::default();
        let src = [ann(BBox::new(10.0, 10.0, 30.0, 30.0), 2, Origin::SourcePrimary)];
        let targets = [
            ann(BBox::new(12.0, 12.0, 28.0, 28.0), 5, Origin::Target),
            ann(BBox::new(60.0, 60.0, 80.0, 80.0), 5, Origin::Target),
        ];
        let pseudo = [PseudoLabel { label: 1, confidence: 0.7 }, PseudoLabel { label: 0, confidence: 0.95 }];
        let pasted = pasted_boxes(&[src[0].bbox], 0.2, 100, 100);
        let out = mix_labels(&src, &targets, &pseudo, &pasted, &cfg).unwrap();
        assert_eq!(out.discarded_count, 1);
        assert_eq!(out.annotations.len(), 2);
        assert_eq!(out.annotations[0], src[0]);
        assert_eq!(out.annotations[1].bbox, BBox::new(60.0, 60.0, 80.0, 80.0));
        assert_eq!((out.annotations[1].class_id, out.annotations[1].origin), (0, Origin::Target));
        assert_eq!(out.confidences, vec![0.95]);

        let err = mix_labels(&src, &targets, &pseudo[..1], &pasted, &cfg).unwrap_err();
        assert!(matches!(err, MixError::Misaligned { pseudo: 1, targets: 2 }));
    }

    #[test]
    fn aim_mix_full_frame_instance_leaves_target_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = ann(BBox::full_frame(40, 40), 3, Origin::SourcePrimary);
        let source = Sample::new("s", Clip::filled(4, 40, 40, 3, 200), vec![full]);
        let target = Sample::new("t", Clip::filled(4, 40, 40, 3, 30), vec![]);
        let out = aim_mix(&source, &target, &[], &mut rng, &MixConfig::default()).unwrap();
        assert!(out.downscaled);
        // Resized box (10,10,30,30) expanded to (8,8,32,32); outside that the target shows,
        // and the strip between the paste region and the mask edge is zero fill.
        for t in 0..4 {
            for i in 0..40 {
                for j in 0..40 {
                    let in_mask = (8..32).contains(&i) && (8..32).contains(&j);
                    let in_paste = (10..30).contains(&i) && (10..30).contains(&j);
                    let expect = match (in_mask, in_paste) {
                        (false, _) => 30,
                        (true, true) => 200,
                        (true, false) => 0,
                    };
                    assert_eq!(out.clip.get(t, i, j, 0), expect);
                }
            }
        }
        assert_eq!(out.annotations[0].bbox, BBox::new(10.0, 10.0, 30.0, 30.0));
    }

    #[test]
    fn aim_mix_without_discard_keeps_everything() {
        let cfg = MixConfig { expand_factor: 0.0, discard_threshold: 1.0, ..MixConfig::default() };
        let s_ann = ann(BBox::new(0.0, 0.0, 8.0, 8.0), 1, Origin::SourcePrimary);
        let source = Sample::new("s", Clip::filled(2, 32, 32, 1, 1), vec![s_ann]);
        let t_anns = vec![
            ann(BBox::new(10.0, 10.0, 16.0, 16.0), 0, Origin::Target),
            ann(BBox::new(20.0, 2.0, 30.0, 9.0), 0, Origin::Target),
        ];
        let target = Sample::new("t", Clip::filled(2, 32, 32, 1, 2), t_anns);
        let pseudo = [PseudoLabel { label: 4, confidence: 0.5 }, PseudoLabel { label: 2, confidence: 0.9 }];
        let out = aim_mix(&source, &target, &pseudo, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        assert_eq!(out.annotations.len(), 3);
        assert_eq!(out.discarded_count, 0);
        assert_eq!(out.annotations.iter().map(|a| a.class_id).collect::<Vec<_>>(), vec![1, 4, 2]);
        assert_eq!(out.kept_target_confidences, vec![0.5, 0.9]);
    }

    #[test]
    fn aim_mix_is_deterministic_and_skips_empty_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let anns: Vec<_> = (0..4)
            .map(|i| ann(BBox::new(i as f64 * 8.0, 4.0, i as f64 * 8.0 + 6.0, 12.0), i, Origin::SourcePrimary))
            .collect();
        let source = Sample::new("s", random_clip(&mut rng, 3, 32, 32, 3), anns);
        let target = Sample::new(
            "t",
            random_clip(&mut rng, 3, 32, 32, 3),
            vec![ann(BBox::new(5.0, 5.0, 15.0, 20.0), 0, Origin::Target)],
        );
        let pseudo = [PseudoLabel { label: 2, confidence: 0.3 }];
        let a = aim_mix(&source, &target, &pseudo, &mut ChaCha8Rng::seed_from_u64(3), &MixConfig::default()).unwrap();
        let b = aim_mix(&source, &target, &pseudo, &mut ChaCha8Rng::seed_from_u64(3), &MixConfig::default()).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.annotations.iter().filter(|x| x.origin.is_source()).count(), 2);

        let empty = Sample::new("e", random_clip(&mut rng, 3, 32, 32, 3), vec![]);
        assert!(matches!(aim_mix(&empty, &target, &pseudo, &mut rng, &MixConfig::default()), Err(MixError::NoInstances)));
    }
}
