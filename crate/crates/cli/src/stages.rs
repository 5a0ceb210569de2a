//! Stage implementations behind the zeroseg subcommands. Every stage reads
//! its inputs from disk, runs the corresponding core routines, writes its
//! outputs, and returns a manifest record of what it consumed and produced.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ndarray::{s, Array2};

use zeroseg_core::dpgmm::{self, DpgmmConfig};
use zeroseg_core::eval::abx::{self, SpeakerCondition};
use zeroseg_core::eval::{self, reports};
use zeroseg_core::features::{self, CmnScope, FeatureArchive, FeatureMatrix};
use zeroseg_core::labeling::{self, LabelSequence, Token, Transcription};
use zeroseg_core::mtlnet::train::{
    train_adversarial, train_mtl, AdversarialConfig, AdversarialData, TaskData, TrainConfig,
    TrainReport,
};
use zeroseg_core::mtlnet::{MtlNetwork, TaskSpec};
use zeroseg_core::segclust;
use zeroseg_core::segmentation::{
    self, boundaries_to_segmentation, concat_posteriors, fuse_boundaries, segment_posteriorgram,
    BoundarySet, Posteriorgram, Segmentation,
};
use zeroseg_core::syncorpus::{generate, CorpusSpec};
use zeroseg_core::{Error, Result};

use crate::config::Config;
use crate::manifest::{Manifest, StageRecord};

/// Parse an inclusive "lo:hi" range.
fn parse_range(text: &str) -> Result<(usize, usize)> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("range must be lo:hi, got {text}")))?;
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad range start in {text}")))?;
    let hi: usize = hi
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad range end in {text}")))?;
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!(
            "range must satisfy 1 <= lo <= hi, got {text}"
        )));
    }
    Ok((lo, hi))
}

/// Parse a comma list of layer widths.
fn parse_widths(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer width {w:?}")))
        })
        .collect()
}

/// Parse a comma list of phone ids; empty input gives the empty set.
fn parse_phone_set(text: &str) -> Result<BTreeSet<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad phone id {t:?}")))
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Output directory for the corpus files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub phones: usize,
    #[arg(long, default_value_t = 4)]
    pub speakers: usize,
    #[arg(long, default_value_t = 40)]
    pub utterances: usize,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Inclusive lo:hi range of phones per utterance.
    #[arg(long, default_value = "4:7")]
    pub phones_per_utt: String,
    /// Inclusive lo:hi range of frames per phone occurrence.
    #[arg(long, default_value = "6:14")]
    pub frames_per_phone: String,
    /// Number of pseudo-recognizer posteriorgram sets to emit.
    #[arg(long, default_value_t = 2)]
    pub recognizers: usize,
    /// Standard deviation of each pseudo-recognizer's mean perturbation.
    #[arg(long, default_value_t = 0.5)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gen_corpus(args: &GenCorpusArgs) -> Result<StageRecord> {
    let mut spec = CorpusSpec::separated(
        args.phones,
        args.speakers,
        args.utterances,
        args.dim,
        args.seed,
    )?;
    spec.phones_per_utterance = parse_range(&args.phones_per_utt)?;
    spec.frames_per_phone = parse_range(&args.frames_per_phone)?;
    spec.n_recognizers = args.recognizers;
    spec.model_jitter = args.jitter;
    let corpus = generate(&spec)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut record = StageRecord::new("gen-corpus");
    record
        .param("phones", args.phones)
        .param("speakers", args.speakers)
        .param("utterances", args.utterances)
        .param("dim", args.dim)
        .param("phones_per_utt", &args.phones_per_utt)
        .param("frames_per_phone", &args.frames_per_phone)
        .param("recognizers", args.recognizers)
        .param("jitter", args.jitter)
        .param("seed", args.seed);

    let features_path = args.out.join("features.feat");
    features::write_archive(&corpus.features, &features_path)?;
    record.output(&features_path)?;

    let alignment_path = args.out.join("alignment.txt");
    eval::write_alignment(&corpus.alignment, &alignment_path)?;
    record.output(&alignment_path)?;

    let speakers_path = args.out.join("speakers.tsv");
    features::write_speaker_map(&corpus.speakers, &speakers_path)?;
    record.output(&speakers_path)?;

    let items_path = args.out.join("items.txt");
    abx::write_items(&corpus.items, &items_path)?;
    record.output(&items_path)?;

    for (r, per_utt) in corpus.recognizer_posteriors.iter().enumerate() {
        let mut archive = FeatureArchive::new();
        for m in corpus.features.iter() {
            let rows = per_utt.get(&m.utterance_id).cloned().ok_or_else(|| {
                Error::Consistency(format!(
                    "recognizer {r} has no posteriors for utterance {}",
                    m.utterance_id
                ))
            })?;
            archive.push(FeatureMatrix::new(m.utterance_id.clone(), rows)?)?;
        }
        let path = args.out.join(format!("post_r{r}.feat"));
        features::write_archive(&archive, &path)?;
        record.output(&path)?;
    }
    log::info!(
        "generated {} utterances, {} frames",
        corpus.features.len(),
        corpus.features.total_frames()
    );
    Ok(record)
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum CmnMode {
    /// Subtract each utterance's own mean.
    Utterance,
    /// Subtract the pooled mean of each speaker's utterances.
    Speaker,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Input feature archive.
    #[arg(long)]
    pub features: PathBuf,
    /// Output feature archive.
    #[arg(long)]
    pub out: PathBuf,
    /// Mean-normalization scope.
    #[arg(long, value_enum)]
    pub cmn: Option<CmnMode>,
    /// Speaker map, required for --cmn speaker.
    #[arg(long)]
    pub speakers: Option<PathBuf>,
    /// Append first and second time differences.
    #[arg(long)]
    pub deltas: bool,
    /// Stack this many neighbor frames on each side onto every frame.
    #[arg(long)]
    pub splice: Option<usize>,
}

pub fn features_stage(args: &FeaturesArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("features");
    record.input(&args.features)?;
    let mut archive = features::load_archive(&args.features)?;
    if let Some(mode) = args.cmn {
        let scope = match mode {
            CmnMode::Utterance => CmnScope::Utterance,
            CmnMode::Speaker => {
                let path = args
                    .speakers
                    .as_ref()
                    .ok_or_else(|| Error::Config("--cmn speaker needs --speakers".into()))?;
                record.input(path)?;
                let map = features::load_speaker_map(path)?;
                archive.attach_speakers(&map);
                CmnScope::SpeakerGroup
            }
        };
        archive = features::apply_cmn_archive(&archive, scope)?;
    }
    if args.deltas || args.splice.is_some() {
        let mut out = FeatureArchive::new();
        for m in archive.iter() {
            let mut m2 = m.clone();
            if args.deltas {
                m2 = features::append_deltas(&m2);
            }
            if let Some(context) = args.splice {
                m2 = features::splice(&m2, context);
            }
            out.push(m2)?;
        }
        archive = out;
    }
    features::write_archive(&archive, &args.out)?;
    record
        .param(
            "cmn",
            match args.cmn {
                None => "none",
                Some(CmnMode::Utterance) => "utterance",
                Some(CmnMode::Speaker) => "speaker",
            },
        )
        .param("deltas", args.deltas)
        .param(
            "splice",
            args.splice.map_or_else(|| "none".into(), |c| c.to_string()),
        );
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct DpgmmArgs {
    /// Input feature archive.
    #[arg(long)]
    pub features: PathBuf,
    /// Output mixture model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Output frame label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Concentration of the Dirichlet process.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn dpgmm_stage(args: &DpgmmArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("dpgmm");
    record
        .param("alpha", args.alpha)
        .param("iterations", args.iterations)
        .param("seed", args.seed);
    record.input(&args.features)?;
    let archive = features::load_archive(&args.features)?;
    let config = DpgmmConfig {
        alpha: args.alpha,
        prior: None,
        iterations: args.iterations,
        seed: args.seed,
    };
    let (state, labels) = dpgmm::run(&archive, &config)?;
    log::info!("mixture settled on {} components", state.num_components());
    dpgmm::save_model(&state, &args.model)?;
    labeling::write_labels(&labels, &args.labels)?;
    record.output(&args.model)?;
    record.output(&args.labels)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct FilterLabelsArgs {
    /// Input frame label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output frame label file with infrequent clusters masked.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep the fewest clusters covering at least this frame share.
    #[arg(long, default_value_t = 0.95)]
    pub retain: f64,
}

pub fn filter_labels_stage(args: &FilterLabelsArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("filter-labels");
    record.param("retain", args.retain);
    record.input(&args.labels)?;
    let mut seqs = labeling::load_labels(&args.labels)?;
    let kept = labeling::filter_labels(&mut seqs, args.retain)?;
    log::info!("kept {} clusters", kept.len());
    labeling::write_labels(&seqs, &args.out)?;
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct CollapseArgs {
    /// Input frame label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output transcription file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn collapse_stage(args: &CollapseArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("collapse");
    record.input(&args.labels)?;
    let seqs = labeling::load_labels(&args.labels)?;
    let ts: Vec<Transcription> = seqs
        .iter()
        .map(labeling::collapse_to_transcription)
        .collect();
    labeling::write_transcriptions(&ts, &args.out)?;
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct FuseBoundsArgs {
    /// Boundary files to fuse; may repeat.
    #[arg(long = "bounds", required = true)]
    pub bounds: Vec<PathBuf>,
    /// Output fused boundary file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub frame_shift_ms: u32,
    /// Minimum duration between surviving boundaries.
    #[arg(long, default_value_t = 30)]
    pub min_dur_ms: u32,
}

pub fn fuse_bounds_stage(args: &FuseBoundsArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("fuse-bounds");
    record
        .param("frame_shift_ms", args.frame_shift_ms)
        .param("min_dur_ms", args.min_dur_ms);
    let mut grouped: BTreeMap<String, Vec<BoundarySet>> = BTreeMap::new();
    for path in &args.bounds {
        record.input(path)?;
        for set in segmentation::load_boundaries(path)? {
            grouped
                .entry(set.utterance_id.clone())
                .or_default()
                .push(set);
        }
    }
    if grouped.is_empty() {
        return Err(Error::Input("no boundaries in any source".into()));
    }
    let fused: Vec<BoundarySet> = grouped
        .values()
        .map(|sets| fuse_boundaries(sets, args.frame_shift_ms, args.min_dur_ms))
        .collect::<Result<_>>()?;
    segmentation::write_boundaries(&fused, &args.out)?;
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct SegclustArgs {
    /// Per-recognizer posteriorgram archives; may repeat.
    #[arg(long = "posteriors", required = true)]
    pub posteriors: Vec<PathBuf>,
    /// Fused boundary file; utterances absent from it stay unsplit.
    #[arg(long)]
    pub bounds: PathBuf,
    /// Number of subword units to form.
    #[arg(long)]
    pub units: usize,
    #[arg(long, default_value_t = 10)]
    pub frame_shift_ms: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output unit transcription file.
    #[arg(long)]
    pub transcriptions: PathBuf,
    /// Output frame-level unit label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output phone-to-unit assignment file.
    #[arg(long)]
    pub assignment: PathBuf,
}

pub fn segclust_stage(args: &SegclustArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("segclust");
    record
        .param("units", args.units)
        .param("frame_shift_ms", args.frame_shift_ms)
        .param("seed", args.seed);
    let mut archives = Vec::with_capacity(args.posteriors.len());
    for path in &args.posteriors {
        record.input(path)?;
        archives.push(features::load_archive(path)?);
    }
    record.input(&args.bounds)?;
    let bounds: BTreeMap<String, BoundarySet> = segmentation::load_boundaries(&args.bounds)?
        .into_iter()
        .map(|b| (b.utterance_id.clone(), b))
        .collect();

    let first = &archives[0];
    if first.is_empty() {
        return Err(Error::Input("empty posterior archive".into()));
    }
    let mut per_utt: Vec<(String, Segmentation)> = Vec::with_capacity(first.len());
    let mut blocks: Vec<Array2<f64>> = Vec::with_capacity(first.len());
    let mut spans: Option<Vec<Range<usize>>> = None;
    for m in first.iter() {
        let utt = &m.utterance_id;
        let mut sources = Vec::with_capacity(archives.len());
        for (i, archive) in archives.iter().enumerate() {
            let pm = archive.get(utt).ok_or_else(|| {
                Error::Consistency(format!(
                    "utterance {utt} missing from {}",
                    args.posteriors[i].display()
                ))
            })?;
            if pm.num_frames() != m.num_frames() {
                return Err(Error::Alignment(format!(
                    "utterance {utt}: {} frames in {} but {} in {}",
                    pm.num_frames(),
                    args.posteriors[i].display(),
                    m.num_frames(),
                    args.posteriors[0].display()
                )));
            }
            sources.push(Posteriorgram::single_source(pm.frames.clone())?);
        }
        let frames = concat_posteriors(&sources)?;
        let unsplit = BoundarySet::new(utt.clone(), Vec::new());
        let b = bounds.get(utt.as_str()).unwrap_or(&unsplit);
        let seg = boundaries_to_segmentation(b, m.num_frames(), args.frame_shift_ms)?;
        let gram = segment_posteriorgram(&frames, &seg)?;
        if spans.is_none() {
            spans = Some(gram.source_spans.clone());
        }
        blocks.push(gram.rows);
        per_utt.push((utt.clone(), seg));
    }

    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let ncols = blocks[0].ncols();
    let mut rows = Array2::<f64>::zeros((total, ncols));
    let mut at = 0;
    for block in &blocks {
        rows.slice_mut(s![at..at + block.nrows(), ..]).assign(block);
        at += block.nrows();
    }
    let corpus = Posteriorgram {
        rows,
        source_spans: spans.expect("at least one utterance"),
    };

    let assignment = segclust::spectral_cluster(&corpus, args.units, args.seed)?;
    if !assignment.isolated_phones.is_empty() {
        log::info!(
            "{} phones had zero affinity everywhere",
            assignment.isolated_phones.len()
        );
    }
    let unit_of_segment = segclust::label_segments(&corpus, &assignment)?;

    let mut ts = Vec::with_capacity(per_utt.len());
    let mut offset = 0;
    for (utt, seg) in &per_utt {
        let tokens: Vec<Token> = seg
            .segments
            .iter()
            .enumerate()
            .map(|(k, &(b, e))| Token {
                label: unit_of_segment[offset + k],
                start_frame: b,
                end_frame: e,
            })
            .collect();
        offset += seg.num_segments();
        ts.push(Transcription {
            utterance_id: utt.clone(),
            tokens,
        });
    }
    labeling::write_transcriptions(&ts, &args.transcriptions)?;
    let seqs: Vec<LabelSequence> = ts.iter().map(labeling::expand_transcription).collect();
    labeling::write_labels(&seqs, &args.labels)?;
    segclust::write_assignment(&assignment, &args.assignment)?;
    record.output(&args.transcriptions)?;
    record.output(&args.labels)?;
    record.output(&args.assignment)?;
    Ok(record)
}

/// Rows, dense labels, and utterance names for every unmasked labeled frame.
struct FrameRows {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    utterances: Vec<String>,
    classes: usize,
}

fn labeled_rows(archive: &FeatureArchive, seqs: &[LabelSequence]) -> Result<FrameRows> {
    let dim = archive
        .dim()
        .ok_or_else(|| Error::Input("empty feature archive".into()))?;
    let mut flat: Vec<f64> = Vec::new();
    let mut raw: Vec<usize> = Vec::new();
    let mut utterances: Vec<String> = Vec::new();
    for seq in seqs {
        let m = archive.get(&seq.utterance_id).ok_or_else(|| {
            Error::Consistency(format!(
                "utterance {} has labels but no features",
                seq.utterance_id
            ))
        })?;
        if seq.len() > m.num_frames() {
            return Err(Error::Alignment(format!(
                "utterance {}: {} labeled frames but {} feature frames",
                seq.utterance_id,
                seq.len(),
                m.num_frames()
            )));
        }
        for (f, (&label, &masked)) in seq.labels.iter().zip(&seq.removed_mask).enumerate() {
            if masked {
                continue;
            }
            flat.extend(m.frames.row(f).iter());
            raw.push(label);
            utterances.push(seq.utterance_id.clone());
        }
    }
    if raw.is_empty() {
        return Err(Error::Input("no labeled frames".into()));
    }
    let class_set: BTreeSet<usize> = raw.iter().copied().collect();
    let dense: BTreeMap<usize, usize> =
        class_set.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels = raw.iter().map(|c| dense[c]).collect();
    let inputs =
        Array2::from_shape_vec((utterances.len(), dim), flat).expect("row count times dim matches");
    Ok(FrameRows {
        inputs,
        labels,
        utterances,
        classes: class_set.len(),
    })
}

fn log_training(name: &str, report: &TrainReport) {
    log::info!(
        "{name}: {} epochs, train loss {:.4}, cv loss {}, final rate {:.6}, {} halvings",
        report.epochs_run,
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        report
            .cv_loss
            .last()
            .map_or_else(|| "n/a".into(), |l| format!("{l:.4}")),
        report.final_learning_rate,
        report.halvings
    );
}

#[derive(Args, Debug)]
pub struct MtlTrainArgs {
    /// Task spec "name:features.feat:labels.tsv[:weight]"; may repeat.
    #[arg(long = "task", required = true)]
    pub tasks: Vec<String>,
    /// Comma list of shared layer widths.
    #[arg(long, default_value = "32,12,32")]
    pub widths: String,
    /// Index of the linear bottleneck layer; defaults to the middle.
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Held-out improvement below this halves the learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub halving_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output network file.
    #[arg(long)]
    pub out: PathBuf,
}

struct ParsedTask {
    name: String,
    features: PathBuf,
    labels: PathBuf,
    weight: f64,
}

fn parse_task(text: &str) -> Result<ParsedTask> {
    let parts: Vec<&str> = text.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(Error::Config(format!(
            "task must be name:features:labels[:weight], got {text}"
        )));
    }
    let weight = if parts.len() == 4 {
        parts[3]
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad task weight in {text}")))?
    } else {
        1.0
    };
    Ok(ParsedTask {
        name: parts[0].to_string(),
        features: PathBuf::from(parts[1]),
        labels: PathBuf::from(parts[2]),
        weight,
    })
}

fn train_config(args: &MtlTrainArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
        improvement_threshold: args.halving_threshold,
        seed: args.seed,
    }
}

pub fn mtl_train_stage(args: &MtlTrainArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("mtl-train");
    record
        .param("widths", &args.widths)
        .param("learning_rate", args.learning_rate)
        .param("batch_size", args.batch_size)
        .param("epochs", args.epochs)
        .param("halving_threshold", args.halving_threshold)
        .param("seed", args.seed);

    let widths = parse_widths(&args.widths)?;
    let bottleneck = args.bottleneck.unwrap_or(widths.len() / 2);
    record.param("bottleneck", bottleneck);

    let mut specs = Vec::with_capacity(args.tasks.len());
    let mut data = Vec::with_capacity(args.tasks.len());
    let mut input_dim = None;
    for text in &args.tasks {
        let task = parse_task(text)?;
        record.input(&task.features)?;
        record.input(&task.labels)?;
        let archive = features::load_archive(&task.features)?;
        let seqs = labeling::load_labels(&task.labels)?;
        let rows = labeled_rows(&archive, &seqs)?;
        let dim = rows.inputs.ncols();
        match input_dim {
            None => input_dim = Some(dim),
            Some(d) if d != dim => {
                return Err(Error::Shape(format!(
                    "task {} has {dim}-dim features, another task has {d}",
                    task.name
                )))
            }
            Some(_) => {}
        }
        specs.push(TaskSpec {
            name: task.name.clone(),
            classes: rows.classes,
            weight: task.weight,
        });
        data.push(TaskData {
            name: task.name,
            inputs: rows.inputs,
            labels: rows.labels,
            utterances: rows.utterances,
        });
    }

    let dim = input_dim.expect("at least one task");
    let mut net = MtlNetwork::new(dim, &widths, bottleneck, &specs, args.seed)?;
    let report = train_mtl(&mut net, &data, &train_config(args))?;
    log_training("mtl", &report);
    net.save(&args.out)?;
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct AdvTrainArgs {
    /// Input feature archive.
    #[arg(long)]
    pub features: PathBuf,
    /// Subword label file; its frames define the training set.
    #[arg(long)]
    pub labels: PathBuf,
    /// Speaker map giving the adversary's targets.
    #[arg(long)]
    pub speakers: PathBuf,
    /// Weight of the subtracted speaker gradient.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[command(flatten)]
    pub train: AdvTrainShape,
    /// Output network file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Network and schedule flags shared with plain training.
#[derive(Args, Debug)]
pub struct AdvTrainShape {
    /// Comma list of shared layer widths.
    #[arg(long, default_value = "32,12,32")]
    pub widths: String,
    /// Index of the linear bottleneck layer; defaults to the middle.
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Held-out improvement below this halves the learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub halving_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn adv_train_stage(args: &AdvTrainArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("adv-train");
    record
        .param("lambda", args.lambda)
        .param("widths", &args.train.widths)
        .param("learning_rate", args.train.learning_rate)
        .param("batch_size", args.train.batch_size)
        .param("epochs", args.train.epochs)
        .param("halving_threshold", args.train.halving_threshold)
        .param("seed", args.train.seed);
    record.input(&args.features)?;
    record.input(&args.labels)?;
    record.input(&args.speakers)?;

    let archive = features::load_archive(&args.features)?;
    let seqs = labeling::load_labels(&args.labels)?;
    let rows = labeled_rows(&archive, &seqs)?;
    let speaker_map = features::load_speaker_map(&args.speakers)?;

    let mut speaker_names: BTreeSet<&str> = BTreeSet::new();
    for utt in &rows.utterances {
        let speaker = speaker_map
            .get(utt)
            .ok_or_else(|| Error::Metadata(format!("utterance {utt} has no speaker")))?;
        speaker_names.insert(speaker);
    }
    let dense: BTreeMap<&str, usize> = speaker_names
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    let speaker_labels: Vec<usize> = rows
        .utterances
        .iter()
        .map(|utt| dense[speaker_map[utt].as_str()])
        .collect();

    let widths = parse_widths(&args.train.widths)?;
    let bottleneck = args.train.bottleneck.unwrap_or(widths.len() / 2);
    record.param("bottleneck", bottleneck);
    let specs = [
        TaskSpec {
            name: "units".into(),
            classes: rows.classes,
            weight: 1.0,
        },
        TaskSpec {
            name: "speaker".into(),
            classes: dense.len(),
            weight: 1.0,
        },
    ];
    let mut net = MtlNetwork::new(
        rows.inputs.ncols(),
        &widths,
        bottleneck,
        &specs,
        args.train.seed,
    )?;
    let data = AdversarialData {
        inputs: rows.inputs,
        subword_labels: rows.labels,
        speaker_labels,
        utterances: rows.utterances,
    };
    let adv = AdversarialConfig {
        lambda: args.lambda,
        subword_head: 0,
        speaker_head: 1,
    };
    let config = TrainConfig {
        learning_rate: args.train.learning_rate,
        batch_size: args.train.batch_size,
        epochs: args.train.epochs,
        improvement_threshold: args.train.halving_threshold,
        seed: args.train.seed,
    };
    let report = train_adversarial(&mut net, &data, &adv, &config)?;
    log_training("adv", &report);
    net.save(&args.out)?;
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct ExtractBnfArgs {
    /// Trained network file.
    #[arg(long)]
    pub model: PathBuf,
    /// Input feature archive.
    #[arg(long)]
    pub features: PathBuf,
    /// Output bottleneck feature archive.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn extract_bnf_stage(args: &ExtractBnfArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("extract-bnf");
    record.input(&args.model)?;
    record.input(&args.features)?;
    let net = MtlNetwork::load(&args.model)?;
    let archive = features::load_archive(&args.features)?;
    let bnf = net.extract_bnf(&archive)?;
    features::write_archive(&bnf, &args.out)?;
    record.output(&args.out)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct EvalPurityArgs {
    /// Frame label file to score.
    #[arg(long)]
    pub labels: PathBuf,
    /// Reference alignment file.
    #[arg(long)]
    pub alignment: PathBuf,
    /// Comma list of phone ids to exclude as silence.
    #[arg(long, default_value = "")]
    pub silence: String,
    /// Output report file.
    #[arg(long)]
    pub report: PathBuf,
}

pub fn eval_purity_stage(args: &EvalPurityArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("eval-purity");
    record.param(
        "silence",
        if args.silence.is_empty() {
            "none"
        } else {
            &args.silence
        },
    );
    record.input(&args.labels)?;
    record.input(&args.alignment)?;
    let silence = parse_phone_set(&args.silence)?;
    let alignment = eval::load_alignment(&args.alignment, &silence)?;
    let labels = labeling::load_labels(&args.labels)?;
    let report = eval::purity(&labels, &alignment)?;
    reports::write_purity_report(&report, &args.report)?;
    println!("overall_purity = {:.6}", report.overall);
    record.output(&args.report)?;
    Ok(record)
}

#[derive(Args, Debug)]
pub struct EvalKlArgs {
    /// Frame posteriorgram archive the distances are measured in.
    #[arg(long)]
    pub posteriors: PathBuf,
    /// Frame-level unit label file.
    #[arg(long)]
    pub units: PathBuf,
    /// Reference alignment file.
    #[arg(long)]
    pub alignment: PathBuf,
    /// Comma list of phone ids to exclude as silence.
    #[arg(long, default_value = "")]
    pub silence: String,
    /// Output report file.
    #[arg(long)]
    pub report: PathBuf,
}

pub fn eval_kl_stage(args: &EvalKlArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("eval-kl");
    record.param(
        "silence",
        if args.silence.is_empty() {
            "none"
        } else {
            &args.silence
        },
    );
    record.input(&args.posteriors)?;
    record.input(&args.units)?;
    record.input(&args.alignment)?;

    let archive = features::load_archive(&args.posteriors)?;
    let unit_seqs = labeling::load_labels(&args.units)?;
    let by_utt: BTreeMap<&str, &LabelSequence> = unit_seqs
        .iter()
        .map(|s| (s.utterance_id.as_str(), s))
        .collect();
    let silence = parse_phone_set(&args.silence)?;
    let alignment = eval::load_alignment(&args.alignment, &silence)?;

    let order: Vec<(String, usize)> = archive
        .iter()
        .map(|m| (m.utterance_id.clone(), m.num_frames()))
        .collect();
    let phones = eval::frame_phone_map(&order, &alignment)?;

    let dim = archive
        .dim()
        .ok_or_else(|| Error::Input("empty posterior archive".into()))?;
    let mut rows = Array2::<f64>::zeros((archive.total_frames(), dim));
    let mut units: Vec<Option<usize>> = Vec::with_capacity(rows.nrows());
    let mut at = 0;
    for m in archive.iter() {
        rows.slice_mut(s![at..at + m.num_frames(), ..])
            .assign(&m.frames);
        let seq = by_utt.get(m.utterance_id.as_str());
        for f in 0..m.num_frames() {
            units.push(seq.and_then(|s| (f < s.len() && !s.removed_mask[f]).then(|| s.labels[f])));
        }
        at += m.num_frames();
    }

    let inventory: BTreeSet<usize> = phones.iter().flatten().copied().collect();
    let centroids = eval::phone_centroids(&rows.view(), &phones, &inventory)?;
    let matrix = eval::unit_phone_distances(&rows.view(), &units, &phones, &centroids)?;
    let report = eval::relevance_summary(&matrix, &rows.view(), &phones, &centroids)?;
    reports::write_relevance_report(&report, &args.report)?;
    println!("mean_d_star = {:.6}", report.mean_d_star);
    if let Some(delta) = report.mean_delta {
        println!("mean_delta = {:.6}", delta);
    }
    record.output(&args.report)?;
    Ok(record)
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ConditionArg {
    /// A, B and X all from one speaker.
    Within,
    /// A and B share a speaker, X comes from a different one.
    Across,
}

#[derive(Args, Debug)]
pub struct EvalAbxArgs {
    /// Feature archive the discrimination runs over.
    #[arg(long)]
    pub features: PathBuf,
    /// Item file listing phone occurrences in context.
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long, value_enum, default_value_t = ConditionArg::Within)]
    pub condition: ConditionArg,
    /// Output report file.
    #[arg(long)]
    pub report: PathBuf,
}

pub fn eval_abx_stage(args: &EvalAbxArgs) -> Result<StageRecord> {
    let mut record = StageRecord::new("eval-abx");
    let condition = match args.condition {
        ConditionArg::Within => SpeakerCondition::Within,
        ConditionArg::Across => SpeakerCondition::Across,
    };
    record.param("condition", condition);
    record.input(&args.features)?;
    record.input(&args.items)?;
    let archive = features::load_archive(&args.features)?;
    let items = abx::load_items(&args.items)?;
    let report = abx::abx_error(&items, &archive, condition)?;
    reports::write_abx_report(&report, &args.report)?;
    match report.aggregate {
        Some(e) => println!("abx_error = {e:.6}"),
        None => println!("abx_error = -"),
    }
    record.output(&args.report)?;
    Ok(record)
}

/// Boundary evidence from a token transcription: a boundary wherever a
/// token starts, except at the utterance edge.
fn transcription_boundaries(ts: &[Transcription], frame_shift_ms: u32) -> Vec<BoundarySet> {
    ts.iter()
        .map(|t| {
            let bounds = t
                .tokens
                .iter()
                .map(|tok| tok.start_frame as u32 * frame_shift_ms)
                .filter(|&ms| ms > 0)
                .collect();
            BoundarySet::new(t.utterance_id.clone(), bounds)
        })
        .collect()
}

/// Boundary evidence from a posteriorgram: a boundary wherever the argmax
/// class changes between consecutive frames.
fn posterior_boundaries(archive: &FeatureArchive, frame_shift_ms: u32) -> Vec<BoundarySet> {
    archive
        .iter()
        .map(|m| {
            let mut bounds = Vec::new();
            let mut prev: Option<usize> = None;
            for (f, row) in m.frames.outer_iter().enumerate() {
                let mut best = 0usize;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                if prev.is_some_and(|p| p != best) {
                    bounds.push(f as u32 * frame_shift_ms);
                }
                prev = Some(best);
            }
            BoundarySet::new(m.utterance_id.clone(), bounds)
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Pipeline configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for every stage.
    #[arg(long)]
    pub out: PathBuf,
}

const CANONICAL_STAGES: [&str; 13] = [
    "gen-corpus",
    "features",
    "dpgmm",
    "filter-labels",
    "collapse",
    "fuse-bounds",
    "segclust",
    "mtl-train",
    "adv-train",
    "extract-bnf",
    "eval-purity",
    "eval-kl",
    "eval-abx",
];

/// Run the configured stages in canonical order, wiring each stage's outputs
/// into the next stage's inputs inside one directory, and write a combined
/// manifest at the end.
pub fn pipeline(args: &PipelineArgs) -> Result<()> {
    let config = Config::load(&args.config)?;
    let stage_list = config.list("pipeline", "stages");
    let requested: BTreeSet<String> = stage_list.iter().cloned().collect();
    if requested.is_empty() {
        return Err(Error::Config("no stages listed in [pipeline]".into()));
    }
    for name in &requested {
        if !CANONICAL_STAGES.contains(&name.as_str()) {
            return Err(Error::Config(format!("unknown stage {name} in [pipeline]")));
        }
    }
    let frame_shift_ms: u32 = config.get_or("pipeline", "frame_shift_ms", 10)?;
    let n_recognizers: usize = config.get_or("corpus", "recognizers", 2)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let dir = &args.out;
    let mut manifest = Manifest::new("pipeline");
    let mut head = StageRecord::new("config");
    head.param("stages", stage_list.join(","));
    head.input(&args.config)?;
    manifest.push(head);

    // Current feature archive; the features stage redirects it.
    let mut current_features = dir.join("features.feat");
    let posterior_paths: Vec<PathBuf> = (0..n_recognizers)
        .map(|r| dir.join(format!("post_r{r}.feat")))
        .collect();

    let run = |name: &str, result: Result<StageRecord>| -> Result<StageRecord> {
        result.map_err(|e| Error::Config(format!("{name}: {e}")))
    };

    for &name in CANONICAL_STAGES.iter().filter(|s| requested.contains(**s)) {
        log::info!("stage {name}");
        let record = match name {
            "gen-corpus" => run(
                name,
                gen_corpus(&GenCorpusArgs {
                    out: dir.clone(),
                    phones: config.get_or("corpus", "phones", 5)?,
                    speakers: config.get_or("corpus", "speakers", 4)?,
                    utterances: config.get_or("corpus", "utterances", 40)?,
                    dim: config.get_or("corpus", "dim", 4)?,
                    phones_per_utt: config
                        .get("corpus", "phones_per_utt")
                        .unwrap_or("4:7")
                        .to_string(),
                    frames_per_phone: config
                        .get("corpus", "frames_per_phone")
                        .unwrap_or("6:14")
                        .to_string(),
                    recognizers: n_recognizers,
                    jitter: config.get_or("corpus", "jitter", 0.5)?,
                    seed: config.get_or("corpus", "seed", 0)?,
                }),
            )?,
            "features" => {
                let out = dir.join("feats_proc.feat");
                let cmn = match config.get("features", "cmn").unwrap_or("none") {
                    "none" => None,
                    "utterance" => Some(CmnMode::Utterance),
                    "speaker" => Some(CmnMode::Speaker),
                    other => {
                        return Err(Error::Config(format!(
                            "bad cmn scope {other} in [features]"
                        )))
                    }
                };
                let splice: usize = config.get_or("features", "splice", 0)?;
                let record = run(
                    name,
                    features_stage(&FeaturesArgs {
                        features: current_features.clone(),
                        out: out.clone(),
                        cmn,
                        speakers: Some(dir.join("speakers.tsv")),
                        deltas: config.get_or("features", "deltas", false)?,
                        splice: (splice > 0).then_some(splice),
                    }),
                )?;
                current_features = out;
                record
            }
            "dpgmm" => run(
                name,
                dpgmm_stage(&DpgmmArgs {
                    features: current_features.clone(),
                    model: dir.join("model.dpgm"),
                    labels: dir.join("labels_raw.tsv"),
                    alpha: config.get_or("dpgmm", "alpha", 1.0)?,
                    iterations: config.get_or("dpgmm", "iterations", 100)?,
                    seed: config.get_or("dpgmm", "seed", 0)?,
                }),
            )?,
            "filter-labels" => run(
                name,
                filter_labels_stage(&FilterLabelsArgs {
                    labels: dir.join("labels_raw.tsv"),
                    out: dir.join("labels_filtered.tsv"),
                    retain: config.get_or("filter", "retain", 0.95)?,
                }),
            )?,
            "collapse" => run(
                name,
                collapse_stage(&CollapseArgs {
                    labels: dir.join("labels_filtered.tsv"),
                    out: dir.join("trans_dpgmm.tsv"),
                }),
            )?,
            "fuse-bounds" => {
                // Derive one boundary source per evidence stream first.
                let mut derive = StageRecord::new("derive-bounds");
                let trans_path = dir.join("trans_dpgmm.tsv");
                derive.input(&trans_path)?;
                let ts = labeling::load_transcriptions(&trans_path)?;
                let mut sources = vec![dir.join("bounds_src_trans.tsv")];
                segmentation::write_boundaries(
                    &transcription_boundaries(&ts, frame_shift_ms),
                    &sources[0],
                )?;
                for (r, path) in posterior_paths.iter().enumerate() {
                    derive.input(path)?;
                    let archive = features::load_archive(path)?;
                    let out = dir.join(format!("bounds_src_post{r}.tsv"));
                    segmentation::write_boundaries(
                        &posterior_boundaries(&archive, frame_shift_ms),
                        &out,
                    )?;
                    sources.push(out);
                }
                for path in &sources {
                    derive.output(path)?;
                }
                manifest.push(derive);
                run(
                    name,
                    fuse_bounds_stage(&FuseBoundsArgs {
                        bounds: sources,
                        out: dir.join("bounds_fused.tsv"),
                        frame_shift_ms,
                        min_dur_ms: config.get_or("bounds", "min_dur_ms", 30)?,
                    }),
                )?
            }
            "segclust" => run(
                name,
                segclust_stage(&SegclustArgs {
                    posteriors: posterior_paths.clone(),
                    bounds: dir.join("bounds_fused.tsv"),
                    units: config
                        .require("segclust", "units")?
                        .parse()
                        .map_err(|_| Error::Config("bad units count in [segclust]".into()))?,
                    frame_shift_ms,
                    seed: config.get_or("segclust", "seed", 0)?,
                    transcriptions: dir.join("units.tsv"),
                    labels: dir.join("unit_labels.tsv"),
                    assignment: dir.join("assignment.tsv"),
                }),
            )?,
            "mtl-train" => {
                let mut task_names = config.list("mtl", "tasks");
                if task_names.is_empty() {
                    task_names = vec!["units".into()];
                }
                let mut tasks = Vec::new();
                for task in task_names {
                    let labels = match task.as_str() {
                        "units" => dir.join("unit_labels.tsv"),
                        "dpgmm" => dir.join("labels_filtered.tsv"),
                        other => {
                            return Err(Error::Config(format!(
                                "unknown mtl task {other}, expected units or dpgmm"
                            )))
                        }
                    };
                    tasks.push(format!(
                        "{task}:{}:{}",
                        current_features.display(),
                        labels.display()
                    ));
                }
                run(
                    name,
                    mtl_train_stage(&MtlTrainArgs {
                        tasks,
                        widths: config
                            .get("mtl", "widths")
                            .unwrap_or("32,12,32")
                            .to_string(),
                        bottleneck: None,
                        learning_rate: config.get_or("mtl", "learning_rate", 0.02)?,
                        batch_size: config.get_or("mtl", "batch_size", 32)?,
                        epochs: config.get_or("mtl", "epochs", 30)?,
                        halving_threshold: config.get_or("mtl", "halving_threshold", 1e-4)?,
                        seed: config.get_or("mtl", "seed", 0)?,
                        out: dir.join("mtl.mtln"),
                    }),
                )?
            }
            "adv-train" => run(
                name,
                adv_train_stage(&AdvTrainArgs {
                    features: current_features.clone(),
                    labels: dir.join("unit_labels.tsv"),
                    speakers: dir.join("speakers.tsv"),
                    lambda: config.get_or("adv", "lambda", 0.1)?,
                    train: AdvTrainShape {
                        widths: config
                            .get("adv", "widths")
                            .unwrap_or("32,12,32")
                            .to_string(),
                        bottleneck: None,
                        learning_rate: config.get_or("adv", "learning_rate", 0.02)?,
                        batch_size: config.get_or("adv", "batch_size", 32)?,
                        epochs: config.get_or("adv", "epochs", 30)?,
                        halving_threshold: config.get_or("adv", "halving_threshold", 1e-4)?,
                        seed: config.get_or("adv", "seed", 0)?,
                    },
                    out: dir.join("adv.mtln"),
                }),
            )?,
            "extract-bnf" => {
                let model = if requested.contains("adv-train") {
                    dir.join("adv.mtln")
                } else {
                    dir.join("mtl.mtln")
                };
                run(
                    name,
                    extract_bnf_stage(&ExtractBnfArgs {
                        model,
                        features: current_features.clone(),
                        out: dir.join("bnf.feat"),
                    }),
                )?
            }
            "eval-purity" => run(
                name,
                eval_purity_stage(&EvalPurityArgs {
                    labels: dir.join("unit_labels.tsv"),
                    alignment: dir.join("alignment.txt"),
                    silence: config.get("eval", "silence").unwrap_or("").to_string(),
                    report: dir.join("purity.report"),
                }),
            )?,
            "eval-kl" => run(
                name,
                eval_kl_stage(&EvalKlArgs {
                    posteriors: posterior_paths
                        .first()
                        .cloned()
                        .ok_or_else(|| Error::Config("eval-kl needs recognizers >= 1".into()))?,
                    units: dir.join("unit_labels.tsv"),
                    alignment: dir.join("alignment.txt"),
                    silence: config.get("eval", "silence").unwrap_or("").to_string(),
                    report: dir.join("relevance.report"),
                }),
            )?,
            "eval-abx" => {
                let features = match config.get("eval", "abx_features").unwrap_or("bnf") {
                    "bnf" if requested.contains("extract-bnf") => dir.join("bnf.feat"),
                    "bnf" | "raw" => current_features.clone(),
                    other => {
                        return Err(Error::Config(format!(
                            "bad abx_features {other}, expected bnf or raw"
                        )))
                    }
                };
                let condition = match config.get("eval", "abx_condition").unwrap_or("within") {
                    "within" => ConditionArg::Within,
                    "across" => ConditionArg::Across,
                    other => {
                        return Err(Error::Config(format!(
                            "bad abx_condition {other}, expected within or across"
                        )))
                    }
                };
                run(
                    name,
                    eval_abx_stage(&EvalAbxArgs {
                        features,
                        items: dir.join("items.txt"),
                        condition,
                        report: dir.join("abx.report"),
                    }),
                )?
            }
            _ => unreachable!("stage list is validated above"),
        };
        manifest.push(record);
    }
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(())
}
