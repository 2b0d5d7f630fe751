use instmix::clipstore::DatasetIndex;
use instmix::model::extract_features;
use instmix::synthgen::{gen_benchmark, BenchmarkConfig, DomainShift};

const GRID: usize = 8;

fn labeled_features(ds: &DatasetIndex) -> Vec<(Vec<f64>, usize)> {
    ds.samples()
        .iter()
        .flat_map(|s| {
            s.annotations
                .iter()
                .map(|a| (extract_features(&s.clip, &a.bbox, GRID).unwrap().0, a.class_id))
        })
        .collect()
}

struct NearestCentroid {
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    fn fit(data: &[(Vec<f64>, usize)], num_classes: usize) -> Self {
        let dim = data[0].0.len();
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (f, c) in data {
            counts[*c] += 1;
            for (s, x) in sums[*c].iter_mut().zip(f) {
                *s += x;
            }
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        NearestCentroid { centroids }
    }

    fn predict(&self, f: &[f64]) -> usize {
        let mut best = (usize::MAX, f64::INFINITY);
        for (k, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d: f64 = c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
        }
        best.0
    }

    fn accuracy(&self, data: &[(Vec<f64>, usize)]) -> f64 {
        let hits = data.iter().filter(|(f, c)| self.predict(f) == *c).count();
        hits as f64 / data.len() as f64
    }
}

#[test]
fn nearest_centroid_separates_source_classes() {
    let cfg = BenchmarkConfig { seed: 42, ..BenchmarkConfig::default() };
    let bench = gen_benchmark(&cfg).unwrap();
    let data = labeled_features(&bench.source);
    let cut = data.len() * 7 / 10;
    let clf = NearestCentroid::fit(&data[..cut], cfg.num_classes);
    let acc = clf.accuracy(&data[cut..]);
    println!("held-out source accuracy {acc:.3} over {} instances", data.len() - cut);
    assert!(acc >= 0.90, "held-out source accuracy {acc}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn more_target_noise_never_helps_source_classifier() {
    let sigmas = [0.0, 10.0, 20.0, 40.0];
    let mut medians = Vec::new();
    for &sigma in &sigmas {
        let accs = (0..3u64)
            .map(|seed| {
                let base = BenchmarkConfig::default();
                let cfg = BenchmarkConfig {
                    seed,
                    clips_per_domain: 120,
                    val_clips: 1,
                    shift: DomainShift { noise_sigma: sigma, ..base.shift },
                    ..base
                };
                let bench = gen_benchmark(&cfg).unwrap();
                let clf = NearestCentroid::fit(&labeled_features(&bench.source), cfg.num_classes);
                clf.accuracy(&labeled_features(&bench.target_train))
            })
            .collect();
        medians.push(median(accs));
    }
    println!("target accuracy by noise sigma {sigmas:?}: {medians:?}");
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}
