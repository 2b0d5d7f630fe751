use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::{
    parse_annotation_csv, read_clip, write_annotation_csv, write_clip, Annotation, Clip,
    CsvRecord, DataError, Origin,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

/// A clip and its key-frame annotations. Clips are shared between derived datasets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sample_id: String,
    pub clip: Arc<Clip>,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn new(sample_id: impl Into<String>, clip: Clip, annotations: Vec<Annotation>) -> Self {
        Sample { sample_id: sample_id.into(), clip: Arc::new(clip), annotations }
    }
}

/// An ordered, validated collection of samples from one domain.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    domain: DomainTag,
    num_classes: usize,
    samples: Vec<Sample>,
    histogram: Vec<usize>,
    class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn new(domain: DomainTag, num_classes: usize, samples: Vec<Sample>) -> Result<Self, DataError> {
        for s in &samples {
            for a in &s.annotations {
                if a.class_id >= num_classes {
                    return Err(DataError::ClassOutOfRange {
                        sample_id: s.sample_id.clone(),
                        class_id: a.class_id,
                        num_classes,
                    });
                }
                if !a.bbox.within(s.clip.width, s.clip.height) {
                    return Err(DataError::BoxOutOfFrame {
                        sample_id: s.sample_id.clone(),
                        bbox: a.bbox,
                        width: s.clip.width,
                        height: s.clip.height,
                    });
                }
            }
        }
        let histogram = histogram_of(&samples, num_classes);
        let class_names = (0..num_classes).map(|k| format!("class_{k}")).collect();
        Ok(DatasetIndex { domain, num_classes, samples, histogram, class_names })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.num_classes {
            return Err(DataError::ClassCountMismatch(names.len(), self.num_classes));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn histogram(&self) -> &[usize] {
        &self.histogram
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_annotations(&self) -> usize {
        self.histogram.iter().sum()
    }

    /// Same samples re-tagged for another role; annotation origins follow the tag.
    pub fn retagged(&self, domain: DomainTag, origin: Origin) -> DatasetIndex {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                annotations: s.annotations.iter().map(|a| Annotation { origin, ..*a }).collect(),
                ..s.clone()
            })
            .collect();
        DatasetIndex { domain, samples, ..self.clone() }
    }
}

fn histogram_of(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for a in samples.iter().flat_map(|s| &s.annotations) {
        h[a.class_id] += 1;
    }
    h
}

/// Per-class annotation counts, recomputed from the samples.
pub fn class_histogram(ds: &DatasetIndex) -> Vec<usize> {
    histogram_of(&ds.samples, ds.num_classes)
}

/// Keep at most `cap` annotations per class, chosen uniformly without replacement.
/// Samples left with no annotations are dropped; classes at or below the cap are untouched.
pub fn cap_per_class<R: Rng + ?Sized>(ds: &DatasetIndex, cap: usize, rng: &mut R) -> DatasetIndex {
    let cap = cap.max(1);
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ds.num_classes];
    for (si, s) in ds.samples.iter().enumerate() {
        for (ai, a) in s.annotations.iter().enumerate() {
            by_class[a.class_id].push((si, ai));
        }
    }
    if by_class.iter().all(|v| v.len() <= cap) {
        return ds.clone();
    }
    let mut keep: HashSet<(usize, usize)> = HashSet::new();
    for members in &by_class {
        if members.len() <= cap {
            keep.extend(members.iter().copied());
        } else {
            let chosen = rand::seq::index::sample(rng, members.len(), cap);
            keep.extend(chosen.iter().map(|i| members[i]));
        }
    }
    let samples: Vec<Sample> = ds
        .samples
        .iter()
        .enumerate()
        .filter_map(|(si, s)| {
            let annotations: Vec<Annotation> = s
                .annotations
                .iter()
                .enumerate()
                .filter(|(ai, _)| keep.contains(&(si, *ai)))
                .map(|(_, a)| *a)
                .collect();
            (!annotations.is_empty()).then(|| Sample { annotations, ..s.clone() })
        })
        .collect();
    let histogram = histogram_of(&samples, ds.num_classes);
    DatasetIndex { samples, histogram, ..ds.clone() }
}

/// Concatenate a primary and an auxiliary source. Auxiliary annotations are
/// flagged `SourceAuxiliary`; primary annotations keep their origin.
pub fn extend_source(primary: &DatasetIndex, auxiliary: &DatasetIndex) -> Result<DatasetIndex, DataError> {
    if primary.num_classes != auxiliary.num_classes {
        return Err(DataError::ClassCountMismatch(primary.num_classes, auxiliary.num_classes));
    }
    let mut samples = primary.samples.clone();
    samples.extend(auxiliary.samples.iter().map(|s| Sample {
        annotations: s
            .annotations
            .iter()
            .map(|a| Annotation { origin: Origin::SourceAuxiliary, ..*a })
            .collect(),
        ..s.clone()
    }));
    let histogram = primary
        .histogram
        .iter()
        .zip(&auxiliary.histogram)
        .map(|(a, b)| a + b)
        .collect();
    Ok(DatasetIndex {
        domain: DomainTag::Source,
        num_classes: primary.num_classes,
        samples,
        histogram,
        class_names: primary.class_names.clone(),
    })
}

/// Write `clips/<sample_id>.clp`, `annotations.csv` and `classes.txt` under `dir`.
pub fn save_dataset(ds: &DatasetIndex, dir: &Path) -> Result<(), DataError> {
    let clips = dir.join("clips");
    fs::create_dir_all(&clips)?;
    let mut records = Vec::with_capacity(ds.num_annotations());
    for s in &ds.samples {
        write_clip(&s.clip, &clips.join(format!("{}.clp", s.sample_id)))?;
        records.extend(
            s.annotations
                .iter()
                .map(|a| CsvRecord::from_annotation(&s.sample_id, a, s.clip.width, s.clip.height)),
        );
    }
    fs::write(dir.join("annotations.csv"), write_annotation_csv(&records))?;
    let mut classes = ds.class_names.join("\n");
    classes.push('\n');
    fs::write(dir.join("classes.txt"), classes)?;
    Ok(())
}

/// Load a dataset directory; samples are ordered by sample id.
pub fn load_dataset(dir: &Path, domain: DomainTag) -> Result<DatasetIndex, DataError> {
    let layout = |msg: &str| DataError::Layout(dir.display().to_string(), msg.to_string());
    let names: Vec<String> = fs::read_to_string(dir.join("classes.txt"))
        .map_err(|_| layout("missing classes.txt"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(layout("classes.txt lists no classes"));
    }
    let clip_dir = dir.join("clips");
    let mut clips: BTreeMap<String, Clip> = BTreeMap::new();
    for entry in fs::read_dir(&clip_dir).map_err(|_| layout("missing clips/ directory"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("clp") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| layout("bad clip name"))?;
        clips.insert(id.to_string(), read_clip(&path)?);
    }
    let file = fs::File::open(dir.join("annotations.csv")).map_err(|_| layout("missing annotations.csv"))?;
    let origin = match domain {
        DomainTag::Source => Origin::SourcePrimary,
        DomainTag::Target => Origin::Target,
    };
    let mut anns: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for rec in parse_annotation_csv(BufReader::new(file))? {
        let clip = clips
            .get(&rec.sample_id)
            .ok_or_else(|| DataError::UnknownSample(rec.sample_id.clone()))?;
        let ann = rec.to_annotation(clip.width, clip.height, origin)?;
        anns.entry(rec.sample_id).or_default().push(ann);
    }
    let samples = clips
        .into_iter()
        .map(|(id, clip)| {
            let annotations = anns.remove(&id).unwrap_or_default();
            Sample::new(id, clip, annotations)
        })
        .collect();
    DatasetIndex::new(domain, names.len(), samples)?.with_class_names(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ann(class_id: usize, instance_id: i64) -> Annotation {
        Annotation {
            bbox: BBox::new(1.0, 1.0, 3.0, 3.0),
            class_id,
            instance_id,
            origin: Origin::SourcePrimary,
        }
    }

    /// One sample per annotation, classes given as (class, count).
    fn dataset(counts: &[(usize, usize)], num_classes: usize) -> DatasetIndex {
        let mut samples = Vec::new();
        for &(class, n) in counts {
            for i in 0..n {
                samples.push(Sample::new(format!("c{class}_{i}"), Clip::filled(1, 4, 4, 1, 0), vec![ann(class, 0)]));
            }
        }
        DatasetIndex::new(DomainTag::Source, num_classes, samples).unwrap()
    }

    #[test]
    fn histogram_examples() {
        let empty = DatasetIndex::new(DomainTag::Source, 4, vec![]).unwrap();
        assert_eq!(class_histogram(&empty), vec![0; 4]);
        let one = Sample::new("a", Clip::filled(1, 4, 4, 1, 0), vec![ann(0, 0), ann(0, 1), ann(3, 2)]);
        let ds = DatasetIndex::new(DomainTag::Source, 4, vec![one]).unwrap();
        assert_eq!(class_histogram(&ds), vec![2, 0, 0, 1]);
        assert_eq!(ds.histogram(), class_histogram(&ds).as_slice());
    }

    #[test]
    fn rejects_out_of_range_class_and_box() {
        let s = Sample::new("a", Clip::filled(1, 4, 4, 1, 0), vec![ann(5, 0)]);
        assert!(matches!(DatasetIndex::new(DomainTag::Source, 3, vec![s]), Err(DataError::ClassOutOfRange { .. })));
        let mut a = ann(0, 0);
        a.bbox = BBox::new(0.0, 0.0, 5.0, 2.0);
        let s = Sample::new("a", Clip::filled(1, 4, 4, 1, 0), vec![a]);
        assert!(matches!(DatasetIndex::new(DomainTag::Source, 3, vec![s]), Err(DataError::BoxOutOfFrame { .. })));
    }

    #[test]
    fn cap_matches_count_arithmetic() {
        let ds = dataset(&[(0, 7000), (1, 300)], 2);
        let capped = cap_per_class(&ds, 5000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(capped.histogram(), &[5000, 300]);
        assert_eq!(capped.len(), 5300);
        assert_eq!(class_histogram(&capped), capped.histogram());
    }

    #[test]
    fn cap_above_max_is_identity() {
        let ds = dataset(&[(0, 12), (1, 3)], 2);
        let capped = cap_per_class(&ds, 12, &mut ChaCha8Rng::seed_from_u64(1));
        let ids = |d: &DatasetIndex| d.samples().iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&capped), ids(&ds));
    }

    #[test]
    fn cap_is_deterministic_and_idempotent() {
        let ds = dataset(&[(0, 50), (1, 20), (2, 8)], 3);
        let ids = |d: &DatasetIndex| d.samples().iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>();
        let a = cap_per_class(&ds, 10, &mut ChaCha8Rng::seed_from_u64(9));
        let b = cap_per_class(&ds, 10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(ids(&a), ids(&b));
        let twice = cap_per_class(&a, 10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(ids(&twice), ids(&a));
    }

    #[test]
    fn cap_drops_only_emptied_samples() {
        let s = Sample::new("mixed", Clip::filled(1, 4, 4, 1, 0), vec![ann(0, 0), ann(1, 1)]);
        let mut samples = vec![s];
        for i in 0..5 {
            samples.push(Sample::new(format!("z{i}"), Clip::filled(1, 4, 4, 1, 0), vec![ann(0, 0)]));
        }
        let ds = DatasetIndex::new(DomainTag::Source, 2, samples).unwrap();
        let capped = cap_per_class(&ds, 1, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(capped.histogram(), &[1, 1]);
        // The class-1 annotation lives in "mixed", which must survive.
        assert!(capped.samples().iter().any(|s| s.sample_id == "mixed"));
    }

    #[test]
    fn extend_examples() {
        let p = dataset(&[(0, 100)], 3);
        let a = dataset(&[(1, 50)], 3);
        let e = extend_source(&p, &a).unwrap();
        assert_eq!(e.histogram(), &[100, 50, 0]);
        assert_eq!(e.len(), p.len() + a.len());
        assert!(e.samples()[..100].iter().all(|s| s.annotations[0].origin == Origin::SourcePrimary));
        assert!(e.samples()[100..].iter().all(|s| s.annotations[0].origin == Origin::SourceAuxiliary));

        let empty = DatasetIndex::new(DomainTag::Source, 3, vec![]).unwrap();
        let same = extend_source(&p, &empty).unwrap();
        assert_eq!(same.histogram(), p.histogram());
        assert_eq!(same.len(), p.len());

        let e = extend_source(&dataset(&[(2, 10)], 3), &dataset(&[(2, 5)], 3)).unwrap();
        assert_eq!(e.histogram(), &[0, 0, 15]);
        assert!(matches!(extend_source(&p, &dataset(&[], 4)), Err(DataError::ClassCountMismatch(3, 4))));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut clip = Clip::filled(3, 10, 20, 3, 0);
        clip.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 251) as u8);
        let a = Annotation { bbox: BBox::new(2.0, 1.0, 12.0, 9.0), class_id: 1, instance_id: 4, origin: Origin::Target };
        let ds = DatasetIndex::new(DomainTag::Target, 2, vec![
            Sample::new("b", clip.clone(), vec![a]),
            Sample::new("a", clip.clone(), vec![]),
        ]).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), DomainTag::Target).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.samples()[0].sample_id, "a");
        assert!(back.samples()[0].annotations.is_empty());
        let b = &back.samples()[1];
        assert_eq!(*b.clip, clip);
        assert_eq!(b.annotations.len(), 1);
        assert!((b.annotations[0].bbox.x2 - 12.0).abs() < 1e-4);
        assert_eq!(b.annotations[0].class_id, 1);
        assert_eq!(back.class_names(), &["class_0", "class_1"]);
    }

    proptest! {
        #[test]
        fn capping_never_exceeds_cap(counts in prop::collection::vec(0usize..40, 1..5), cap in 1usize..30, seed in any::<u64>()) {
            let spec: Vec<(usize, usize)> = counts.iter().copied().enumerate().collect();
            let ds = dataset(&spec, counts.len());
            let capped = cap_per_class(&ds, cap, &mut ChaCha8Rng::seed_from_u64(seed));
            let h = class_histogram(&capped);
            for (k, &n) in h.iter().enumerate() {
                prop_assert_eq!(n, counts[k].min(cap));
            }
        }
    }
}
