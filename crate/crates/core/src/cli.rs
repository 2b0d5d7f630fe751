//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::clipstore::{
    load_dataset, parse_annotation_csv, save_dataset, write_annotation_csv, write_clip, Annotation, CsvRecord,
    DataError, DatasetIndex, DomainTag, Origin, CSV_HEADER,
};
use crate::config::Config;
use crate::evaluator::{evaluate_model, EvalError};
use crate::geometry::BBox;
use crate::mixer::{aim_mix, MixError, PseudoLabel};
use crate::model::{ModelError, ModelParams};
use crate::propagator::{propagate_annotations, FrameDetections};
use crate::rng::{stream, Purpose};
use crate::synthgen::{gen_domain, DomainSpec, SynthError};
use crate::trainer::{pseudo_label, train, TrainError};

#[derive(Parser, Debug)]
#[command(name = "instmix", version, about = "Cross-domain action-instance mixing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic source / target benchmark.
    GenData(GenDataArgs),
    /// Train a classifier, with or without adaptation.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Dump mixed clips and their annotations for inspection.
    MixPreview(MixPreviewArgs),
    /// Propagate key-frame annotations onto detector boxes.
    Propagate(PropagateArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory; receives source/, target_train/ and target_val/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classes moved out of the source into an extra auxiliary/ split (comma-separated).
    #[arg(long, value_delimiter = ',')]
    aux_classes: Vec<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    source: PathBuf,
    /// Auxiliary labeled source merged into the primary source.
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Target boxes; labels are ignored for training.
    #[arg(long)]
    target: PathBuf,
    /// Labeled target split for per-epoch evaluation; defaults to --target.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Source-only baseline: disables mixing, pseudo-labels and resizing.
    #[arg(long)]
    no_adapt: bool,
    #[arg(long)]
    no_mix: bool,
    #[arg(long)]
    no_pseudo: bool,
    #[arg(long)]
    no_resize: bool,
    /// Size of the worker pool.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args, Debug)]
struct MixPreviewArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Teacher used for pseudo-labels; without it target labels are used at confidence 1.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PropagateArgs {
    /// Key-frame annotations; sample ids are `<sequence>@<frame>` or a bare frame number.
    #[arg(long)]
    keyframes: PathBuf,
    /// Detector boxes in the same format; class_id may be -1.
    #[arg(long)]
    detections: PathBuf,
    /// Dense annotations CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou_min: f64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: e.into() }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Data(_) | TrainError::Inconsistent(_) => data_err(e),
            _ => runtime_err(e),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::BadMagic(_) | ModelError::BadHeader { .. } => data_err(e),
            _ => runtime_err(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        runtime_err(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        data_err(e)
    }
}

/// Parse `argv` (including the program name) and run the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::MixPreview(a) => mix_preview(a),
        Command::Propagate(a) => propagate_cmd(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(data_err)?;
            Config::parse(&text).with_context(|| format!("in {}", p.display())).map_err(data_err)
        }
    }
}

fn load(dir: &Path, domain: DomainTag) -> CliResult<DatasetIndex> {
    load_dataset(dir, domain).with_context(|| format!("loading {}", dir.display())).map_err(data_err)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(runtime_err)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(runtime_err)
}

fn synth_err(e: SynthError) -> Failure {
    match e {
        SynthError::Config(_) => data_err(e),
        SynthError::Data(_) => runtime_err(e),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.bench.seed = s;
    }
    let bench = &cfg.bench;
    bench.validate().map_err(synth_err)?;
    if let Some(&k) = a.aux_classes.iter().find(|&&k| k >= bench.num_classes) {
        return Err(data_err(anyhow!("auxiliary class {k} out of range 0..{}", bench.num_classes)));
    }
    let mut source = bench.source_spec();
    let mut splits: Vec<(&str, DomainSpec)> = Vec::new();
    if !a.aux_classes.is_empty() {
        source.classes = (0..bench.num_classes).filter(|k| !a.aux_classes.contains(k)).collect();
        if source.classes.is_empty() {
            return Err(data_err(anyhow!("auxiliary classes leave the source empty")));
        }
        let aux = DomainSpec {
            id_prefix: "aux".into(),
            classes: a.aux_classes.clone(),
            long_tail_gamma: 0.0,
            stream: 3,
            ..bench.source_spec()
        };
        splits.push(("auxiliary", aux));
    }
    splits.push(("source", source));
    splits.push(("target_train", bench.target_spec(false)));
    splits.push(("target_val", bench.target_spec(true)));
    for (name, spec) in &splits {
        let ds = gen_domain(bench, spec).map_err(synth_err)?;
        save_dataset(&ds, &a.out.join(name)).map_err(runtime_err)?;
    }
    write_file(&a.out.join("config.txt"), cfg.to_text())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(s) = a.seed {
        t.seed = s;
        cfg.bench.seed = s;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if a.no_adapt {
        *t = t.clone().source_only();
    }
    t.enable_mix &= !a.no_mix;
    t.enable_pseudo &= !a.no_pseudo;
    t.enable_resize &= !a.no_resize;
    t.validate().map_err(data_err)?;

    let source = load(&a.source, DomainTag::Source)?;
    let aux = a.aux.as_deref().map(|p| load(p, DomainTag::Source)).transpose()?;
    let target = load(&a.target, DomainTag::Target)?;
    let val = a.val.as_deref().map(|p| load(p, DomainTag::Target)).transpose()?;

    let run = || train(&cfg.train, &source, aux.as_ref(), &target, val.as_ref());
    let out = match a.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(runtime_err)?
            .install(run),
        None => run(),
    }?;

    let mut jsonl = String::new();
    for m in &out.epochs {
        jsonl.push_str(&serde_json::to_string(m).map_err(runtime_err)?);
        jsonl.push('\n');
    }
    write_file(&a.out.join("metrics.jsonl"), jsonl)?;
    write_file(&a.out.join("config.txt"), cfg.to_text())?;
    write_file(
        &a.out.join("pseudo_confusion.json"),
        serde_json::to_string_pretty(&out.pseudo_confusion).map_err(runtime_err)?,
    )?;
    out.student.save(&a.out.join("final.mdl1")).map_err(runtime_err)?;
    out.teacher.save(&a.out.join("teacher.mdl1")).map_err(runtime_err)?;
    if let Some(last) = out.epochs.last() {
        println!("epoch {} target mAP {:.4}", last.epoch, last.target_map);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let params = ModelParams::load(&a.model)?;
    let ds = load(&a.data, DomainTag::Target)?;
    let report = evaluate_model(&params, &ds, a.iou).map_err(|e| match e {
        EvalError::BadThreshold(..) | EvalError::LabelOutOfRange(..) | EvalError::Model(_) => data_err(e),
        other => runtime_err(other),
    })?;
    write_file(&a.out, serde_json::to_string_pretty(&report).map_err(runtime_err)?)?;
    println!("mAP {:.4} accuracy {:.4}", report.result.map, report.accuracy);
    Ok(())
}

fn mix_preview(a: MixPreviewArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let source = load(&a.source, DomainTag::Source)?;
    let target = load(&a.target, DomainTag::Target)?;
    let teacher = a.model.as_deref().map(ModelParams::load).transpose()?;
    if source.is_empty() || target.is_empty() {
        return Err(data_err(anyhow!("source and target must be non-empty")));
    }
    let mix_cfg = cfg.train.mix_config();
    let clip_dir = a.out.join("clips");
    fs::create_dir_all(&clip_dir).map_err(runtime_err)?;
    let mut csv = format!("{CSV_HEADER},origin,confidence\n");
    let mut written = 0;
    for i in 0..a.count {
        let s = &source.samples()[i % source.len()];
        let t = &target.samples()[i % target.len()];
        let boxes: Vec<BBox> = t.annotations.iter().map(|x| x.bbox).collect();
        let pseudo: Vec<PseudoLabel> = match &teacher {
            Some(m) => pseudo_label(m, &t.clip, &boxes)?,
            None => t.annotations.iter().map(|x| PseudoLabel { label: x.class_id, confidence: 1.0 }).collect(),
        };
        let mut rng = stream(cfg.train.seed, Purpose::Preview, i as u64);
        let mixed = match aim_mix(s, t, &pseudo, &mut rng, &mix_cfg) {
            Ok(m) => m,
            Err(MixError::NoInstances) => continue,
            Err(e @ (MixError::DimMismatch(..) | MixError::MaskMismatch(..))) => return Err(data_err(e)),
            Err(e) => return Err(runtime_err(e)),
        };
        let id = format!("mix_{i:05}");
        write_clip(&mixed.clip, &clip_dir.join(format!("{id}.clp"))).map_err(runtime_err)?;
        let mut confs = mixed.kept_target_confidences.iter();
        for ann in &mixed.annotations {
            let rec = CsvRecord::from_annotation(&id, ann, mixed.clip.width, mixed.clip.height);
            let line = write_annotation_csv(std::slice::from_ref(&rec));
            let row = line.lines().nth(1).unwrap_or_default();
            let conf = match ann.origin {
                Origin::Target => format!("{:.6}", confs.next().copied().unwrap_or(f64::NAN)),
                _ => String::new(),
            };
            csv.push_str(&format!("{row},{},{conf}\n", ann.origin.as_str()));
        }
        written += 1;
    }
    write_file(&a.out.join("mixed.csv"), csv)?;
    println!("wrote {written} mixed clips");
    Ok(())
}

/// Split `<sequence>@<frame>` (or a bare frame number) into its parts.
fn split_frame_id(id: &str, line: usize) -> CliResult<(String, usize)> {
    let (seq, frame) = match id.rsplit_once('@') {
        Some((s, f)) => (s, f),
        None => ("", id),
    };
    let frame = frame
        .parse()
        .map_err(|_| data_err(anyhow!("bad frame id {id:?} in record {line}")))?;
    Ok((seq.to_string(), frame))
}

fn frame_id(seq: &str, frame: usize) -> String {
    if seq.is_empty() {
        frame.to_string()
    } else {
        format!("{seq}@{frame}")
    }
}

fn read_records(path: &Path) -> CliResult<Vec<CsvRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display())).map_err(data_err)?;
    Ok(parse_annotation_csv(BufReader::new(file))?)
}

type SequenceFrames = (BTreeMap<usize, Vec<Annotation>>, BTreeMap<usize, Vec<BBox>>);

fn propagate_cmd(a: PropagateArgs) -> CliResult<()> {
    // Boxes stay in normalized coordinates; IoU does not depend on the frame size.
    let mut seqs: BTreeMap<String, SequenceFrames> = BTreeMap::new();
    for (i, rec) in read_records(&a.keyframes)?.iter().enumerate() {
        let (seq, frame) = split_frame_id(&rec.sample_id, i + 1)?;
        let ann = rec.to_annotation(1, 1, Origin::Target)?;
        seqs.entry(seq).or_default().0.entry(frame).or_default().push(ann);
    }
    for (i, rec) in read_records(&a.detections)?.iter().enumerate() {
        let (seq, frame) = split_frame_id(&rec.sample_id, i + 1)?;
        seqs.entry(seq).or_default().1.entry(frame).or_default().push(rec.pixel_box(1, 1));
    }
    let dense: Vec<(String, BTreeMap<usize, Vec<Annotation>>)> = seqs
        .into_par_iter()
        .map(|(seq, (keys, dets))| {
            let dets: Vec<FrameDetections> =
                dets.into_iter().map(|(frame_index, boxes)| FrameDetections { frame_index, boxes }).collect();
            propagate_annotations(&keys, &dets, a.iou_min)
                .map(|out| (seq.clone(), out))
                .map_err(|e| anyhow!("sequence {seq:?}: {e}"))
        })
        .collect::<Result<_, _>>()
        .map_err(data_err)?;
    let records: Vec<CsvRecord> = dense
        .iter()
        .flat_map(|(seq, frames)| {
            frames.iter().flat_map(move |(&f, anns)| {
                let id = frame_id(seq, f);
                anns.iter().map(move |ann| CsvRecord::from_annotation(&id, ann, 1, 1))
            })
        })
        .collect();
    write_file(&a.out, write_annotation_csv(&records))?;
    println!("wrote {} annotations", records.len());
    Ok(())
}

#[derive(Serialize)]
struct DatasetStats {
    samples: usize,
    annotations: usize,
    frames: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    channels: Option<usize>,
    classes: BTreeMap<String, usize>,
}

fn stats(a: StatsArgs) -> CliResult<()> {
    let ds = load(&a.data, DomainTag::Source)?;
    let first = ds.samples().first().map(|s| &s.clip);
    let st = DatasetStats {
        samples: ds.len(),
        annotations: ds.num_annotations(),
        frames: first.map(|c| c.frames),
        height: first.map(|c| c.height),
        width: first.map(|c| c.width),
        channels: first.map(|c| c.channels),
        classes: ds.class_names().iter().cloned().zip(ds.histogram().iter().copied()).collect(),
    };
    let json = serde_json::to_string_pretty(&st).map_err(runtime_err)?;
    match a.out {
        Some(p) => write_file(&p, json),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{json}").map_err(runtime_err)
        }
    }
}
