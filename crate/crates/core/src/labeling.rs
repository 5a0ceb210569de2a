//! Post-processing of frame labels: histogram-based filtering of infrequent
//! clusters and collapsing of label runs into pseudo-phone transcriptions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Per-utterance frame labels plus a mask of filtered-out frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub utterance_id: String,
    pub labels: Vec<usize>,
    pub removed_mask: Vec<bool>,
}

impl LabelSequence {
    pub fn new(utterance_id: impl Into<String>, labels: Vec<usize>) -> Self {
        let mask = vec![false; labels.len()];
        LabelSequence {
            utterance_id: utterance_id.into(),
            labels,
            removed_mask: mask,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cluster occupancy counts with a deterministic non-increasing sorted view.
/// Ties in count are ordered by ascending cluster id.
#[derive(Debug, Clone, Default)]
pub struct ClusterHistogram {
    pub counts: BTreeMap<usize, u64>,
    /// (cluster id, count) pairs, count non-increasing.
    pub sorted: Vec<(usize, u64)>,
    pub total_frames: u64,
}

/// Tally frame labels over all sequences. Masked frames count too; the
/// histogram describes the labeler's raw output.
pub fn cluster_counts(seqs: &[LabelSequence]) -> ClusterHistogram {
    let counts = seqs
        .par_iter()
        .fold(BTreeMap::<usize, u64>::new, |mut acc, seq| {
            for &l in &seq.labels {
                *acc.entry(l).or_insert(0) += 1;
            }
            acc
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    let total_frames = counts.values().sum();
    let mut sorted: Vec<(usize, u64)> = counts.iter().map(|(&k, &v)| (k, v)).collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ClusterHistogram {
        counts,
        sorted,
        total_frames,
    }
}

/// Mask frames whose cluster falls outside the smallest dominant set whose
/// cumulative share of frames reaches `p`. Returns the retained cluster set.
/// The retained frame fraction is always >= p; p = 1 removes nothing.
pub fn filter_labels(seqs: &mut [LabelSequence], p: f64) -> Result<BTreeSet<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!(
            "label filter fraction must lie in (0, 1], got {p}"
        )));
    }
    let hist = cluster_counts(seqs);
    let n = hist.total_frames as f64;
    let mut retained = BTreeSet::new();
    let mut cum = 0u64;
    for &(cluster, count) in &hist.sorted {
        retained.insert(cluster);
        cum += count;
        if n == 0.0 || cum as f64 / n >= p {
            break;
        }
    }
    for seq in seqs.iter_mut() {
        for (label, masked) in seq.labels.iter().zip(seq.removed_mask.iter_mut()) {
            *masked = !retained.contains(label);
        }
    }
    Ok(retained)
}

/// One pseudo-phone token covering an inclusive frame span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcription {
    pub utterance_id: String,
    pub tokens: Vec<Token>,
}

/// Collapse maximal runs of identical retained labels into tokens. Removed
/// frames are transparent: equal labels separated only by removed frames
/// merge into one token whose span absorbs the gap.
pub fn collapse_to_transcription(seq: &LabelSequence) -> Transcription {
    let mut tokens: Vec<Token> = Vec::new();
    for (i, (&label, &masked)) in seq.labels.iter().zip(&seq.removed_mask).enumerate() {
        if masked {
            continue;
        }
        match tokens.last_mut() {
            Some(t) if t.label == label => t.end_frame = i,
            _ => tokens.push(Token {
                label,
                start_frame: i,
                end_frame: i,
            }),
        }
    }
    Transcription {
        utterance_id: seq.utterance_id.clone(),
        tokens,
    }
}

/// Expand a transcription back to one label per frame over the token spans.
/// Frames outside every span (possible after filtering) are masked.
pub fn expand_transcription(t: &Transcription) -> LabelSequence {
    let len = t.tokens.last().map_or(0, |tok| tok.end_frame + 1);
    let mut labels = vec![0usize; len];
    let mut mask = vec![true; len];
    for tok in &t.tokens {
        for i in tok.start_frame..=tok.end_frame {
            labels[i] = tok.label;
            mask[i] = false;
        }
    }
    LabelSequence {
        utterance_id: t.utterance_id.clone(),
        labels,
        removed_mask: mask,
    }
}

/// Write label files: one "utterance_id<TAB>frame_index<TAB>label" line per
/// retained frame. Masked frames are omitted.
pub fn write_labels(seqs: &[LabelSequence], path: &Path) -> Result<()> {
    let mut out = String::new();
    for seq in seqs {
        for (i, (&label, &masked)) in seq.labels.iter().zip(&seq.removed_mask).enumerate() {
            if !masked {
                out.push_str(&format!("{}\t{}\t{}\n", seq.utterance_id, i, label));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a label file. Utterances keep file order; frame indices missing from
/// the file (filtered frames) come back masked with label 0.
pub fn load_labels(path: &Path) -> Result<Vec<LabelSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut frames: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (utt, frame, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(f), Some(l)) => (u, f, l),
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: ln as u64 + 1,
                    reason: "expected utterance_id<TAB>frame_index<TAB>label".into(),
                })
            }
        };
        let frame: usize = frame.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: ln as u64 + 1,
            reason: format!("bad frame index {frame:?}"),
        })?;
        let label: usize = label.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: ln as u64 + 1,
            reason: format!("bad label {label:?}"),
        })?;
        if !frames.contains_key(utt) {
            order.push(utt.to_string());
        }
        frames
            .entry(utt.to_string())
            .or_default()
            .push((frame, label));
    }
    let mut seqs = Vec::with_capacity(order.len());
    for utt in order {
        let entries = &frames[&utt];
        let len = entries.iter().map(|&(f, _)| f).max().map_or(0, |m| m + 1);
        let mut labels = vec![0usize; len];
        let mut mask = vec![true; len];
        for &(f, l) in entries {
            labels[f] = l;
            mask[f] = false;
        }
        seqs.push(LabelSequence {
            utterance_id: utt,
            labels,
            removed_mask: mask,
        });
    }
    Ok(seqs)
}

/// Write transcriptions: "utterance_id<TAB>start_frame<TAB>end_frame<TAB>label".
pub fn write_transcriptions(ts: &[Transcription], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in ts {
        for tok in &t.tokens {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                t.utterance_id, tok.start_frame, tok.end_frame, tok.label
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_transcriptions(path: &Path) -> Result<Vec<Transcription>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<Token>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |what: &str| Error::Format {
            path: path.to_path_buf(),
            offset: ln as u64 + 1,
            reason: what.to_string(),
        };
        if fields.len() != 4 {
            return Err(parse_err(
                "expected utterance_id<TAB>start_frame<TAB>end_frame<TAB>label",
            ));
        }
        let start_frame: usize = fields[1]
            .parse()
            .map_err(|_| parse_err("bad start frame"))?;
        let end_frame: usize = fields[2].parse().map_err(|_| parse_err("bad end frame"))?;
        let label: usize = fields[3].parse().map_err(|_| parse_err("bad label"))?;
        if end_frame < start_frame {
            return Err(parse_err("end frame precedes start frame"));
        }
        if !map.contains_key(fields[0]) {
            order.push(fields[0].to_string());
        }
        map.entry(fields[0].to_string()).or_default().push(Token {
            label,
            start_frame,
            end_frame,
        });
    }
    Ok(order
        .into_iter()
        .map(|utt| {
            let tokens = map.remove(&utt).unwrap();
            Transcription {
                utterance_id: utt,
                tokens,
            }
        })
        .collect())
}
