//! Fusion of phone-boundary hypotheses from multiple recognizers and
//! construction of frame- and segment-level posteriorgrams.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Sorted phone-boundary times for one utterance, in milliseconds on the
/// frame grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySet {
    pub utterance_id: String,
    pub boundaries_ms: Vec<u32>,
}

impl BoundarySet {
    pub fn new(utterance_id: impl Into<String>, boundaries_ms: Vec<u32>) -> Self {
        BoundarySet {
            utterance_id: utterance_id.into(),
            boundaries_ms,
        }
    }

    /// Boundaries must be strictly increasing and multiples of the frame shift.
    pub fn validate(&self, frame_shift_ms: u32) -> Result<()> {
        for w in self.boundaries_ms.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Input(format!(
                    "utterance {}: boundaries not strictly increasing ({} then {})",
                    self.utterance_id, w[0], w[1]
                )));
            }
        }
        if let Some(b) = self
            .boundaries_ms
            .iter()
            .find(|&&b| b % frame_shift_ms != 0)
        {
            return Err(Error::Input(format!(
                "utterance {}: boundary {}ms off the {}ms frame grid",
                self.utterance_id, b, frame_shift_ms
            )));
        }
        Ok(())
    }
}

/// Merge boundary hypotheses: concatenate, sort, de-duplicate, then scan
/// left to right closing short gaps. A gap of at most one frame shift drops
/// the later boundary; a gap below `min_dur_ms` replaces the pair by their
/// midpoint rounded to the frame grid (ties toward the earlier frame), and
/// the scan re-checks subsequent gaps against the replacement. The output
/// has every consecutive gap >= min_dur_ms.
pub fn fuse_boundaries(
    sets: &[BoundarySet],
    frame_shift_ms: u32,
    min_dur_ms: u32,
) -> Result<BoundarySet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Input("no boundary sets to fuse".into()))?;
    let utterance_id = first.utterance_id.clone();
    for s in sets {
        if s.utterance_id != utterance_id {
            return Err(Error::Consistency(format!(
                "fusing boundaries of different utterances: {} vs {}",
                utterance_id, s.utterance_id
            )));
        }
        s.validate(frame_shift_ms)?;
    }
    let mut pool: Vec<u32> = sets
        .iter()
        .flat_map(|s| s.boundaries_ms.iter().copied())
        .collect();
    pool.sort_unstable();
    pool.dedup();

    let mut fused: Vec<u32> = Vec::with_capacity(pool.len());
    for b in pool {
        let mut current = b;
        loop {
            let Some(&prev) = fused.last() else {
                fused.push(current);
                break;
            };
            let gap = current - prev;
            if gap == 0 {
                break; // duplicate created by midpoint rounding
            } else if gap <= frame_shift_ms {
                break; // too close, keep the earlier boundary
            } else if gap < min_dur_ms {
                fused.pop();
                current =
                    round_to_grid_half_down(prev + current, 2 * frame_shift_ms) * frame_shift_ms;
                // re-check the midpoint against what now precedes it
            } else {
                fused.push(current);
                break;
            }
        }
    }
    Ok(BoundarySet::new(utterance_id, fused))
}

/// Nearest multiple of `denom` to `num`/`denom`, halves rounding down.
fn round_to_grid_half_down(num: u32, denom: u32) -> u32 {
    let q = num / denom;
    let r = num % denom;
    if 2 * r > denom {
        q + 1
    } else {
        q
    }
}

/// Rows of class posteriors with the column block of each source recognizer.
/// Every block row sums to 1; a concatenated row sums to the source count.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    pub rows: Array2<f64>,
    pub source_spans: Vec<Range<usize>>,
}

impl Posteriorgram {
    pub fn single_source(rows: Array2<f64>) -> Result<Self> {
        let cols = rows.ncols();
        let p = Posteriorgram {
            rows,
            source_spans: vec![0..cols],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.ncols()
    }

    pub fn num_sources(&self) -> usize {
        self.source_spans.len()
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.source_spans.iter().map(|s| s.len()).sum();
        if total != self.rows.ncols() {
            return Err(Error::Consistency(format!(
                "source spans cover {total} columns, matrix has {}",
                self.rows.ncols()
            )));
        }
        if self.rows.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Input(
                "posteriorgram entries must be finite and >= 0".into(),
            ));
        }
        for (r, row) in self.rows.axis_iter(Axis(0)).enumerate() {
            for span in &self.source_spans {
                let s: f64 = row.slice(ndarray::s![span.clone()]).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Consistency(format!(
                        "row {r}: source block {span:?} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows rescaled so the whole row sums to 1 (divide by the source count).
    pub fn normalized_rows(&self) -> Array2<f64> {
        &self.rows / self.num_sources() as f64
    }
}

/// Concatenate per-recognizer posteriorgrams column-wise, preserving source
/// order. All sources must share the row count.
pub fn concat_posteriors(sources: &[Posteriorgram]) -> Result<Posteriorgram> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Input("no posteriorgrams to concatenate".into()))?;
    let t = first.num_rows();
    for (i, s) in sources.iter().enumerate() {
        if s.num_rows() != t {
            return Err(Error::Alignment(format!(
                "source {i} has {} rows, source 0 has {t}",
                s.num_rows()
            )));
        }
    }
    let total_cols: usize = sources.iter().map(|s| s.num_classes()).sum();
    let mut rows = Array2::<f64>::zeros((t, total_cols));
    let mut spans = Vec::new();
    let mut at = 0usize;
    for s in sources {
        let w = s.num_classes();
        rows.slice_mut(ndarray::s![.., at..at + w]).assign(&s.rows);
        for span in &s.source_spans {
            spans.push(at + span.start..at + span.end);
        }
        at += w;
    }
    let p = Posteriorgram {
        rows,
        source_spans: spans,
    };
    p.validate()?;
    Ok(p)
}

/// Contiguous, non-overlapping inclusive frame spans tiling one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub utterance_id: String,
    pub segments: Vec<(usize, usize)>,
}

impl Segmentation {
    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }
}

/// Convert fused boundaries into a tiling segmentation. A boundary at time
/// t starts a new segment at frame t / frame_shift; boundaries at the
/// utterance edges coincide with the implicit edge splits and are ignored.
pub fn boundaries_to_segmentation(
    b: &BoundarySet,
    utterance_length_frames: usize,
    frame_shift_ms: u32,
) -> Result<Segmentation> {
    if utterance_length_frames == 0 {
        return Err(Error::Input(format!(
            "utterance {}: zero length",
            b.utterance_id
        )));
    }
    b.validate(frame_shift_ms)?;
    let mut cuts = vec![0usize];
    for &ms in &b.boundaries_ms {
        let f = (ms / frame_shift_ms) as usize;
        if f > utterance_length_frames {
            return Err(Error::Bounds(format!(
                "utterance {}: boundary {}ms beyond utterance end ({} frames)",
                b.utterance_id, ms, utterance_length_frames
            )));
        }
        if f > 0 && f < utterance_length_frames {
            cuts.push(f);
        }
    }
    cuts.push(utterance_length_frames);
    cuts.dedup();
    let segments = cuts.windows(2).map(|w| (w[0], w[1] - 1)).collect();
    Ok(Segmentation {
        utterance_id: b.utterance_id.clone(),
        segments,
    })
}

/// Average frame posterior rows over each segment span.
pub fn segment_posteriorgram(frames: &Posteriorgram, seg: &Segmentation) -> Result<Posteriorgram> {
    let t = frames.num_rows();
    let mut rows = Array2::<f64>::zeros((seg.num_segments(), frames.num_classes()));
    for (k, &(b, e)) in seg.segments.iter().enumerate() {
        if e < b || e >= t {
            return Err(Error::Bounds(format!(
                "utterance {}: segment ({b}, {e}) outside 0..{t}",
                seg.utterance_id
            )));
        }
        let span = frames.rows.slice(ndarray::s![b..=e, ..]);
        let mean = span.mean_axis(Axis(0)).expect("non-empty span");
        rows.row_mut(k).assign(&mean);
    }
    Ok(Posteriorgram {
        rows,
        source_spans: frames.source_spans.clone(),
    })
}

/// Write boundary files: "utterance_id<TAB>time_ms" lines.
pub fn write_boundaries(sets: &[BoundarySet], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in sets {
        for &b in &s.boundaries_ms {
            out.push_str(&format!("{}\t{}\n", s.utterance_id, b));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a boundary file, grouping lines by utterance in file order. Validity
/// (sortedness, grid alignment) is checked by the consumer.
pub fn load_boundaries(path: &Path) -> Result<Vec<BoundarySet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (utt, ms) = match (parts.next(), parts.next()) {
            (Some(u), Some(m)) => (u, m),
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: ln as u64 + 1,
                    reason: "expected utterance_id<TAB>time_ms".into(),
                })
            }
        };
        let ms: u32 = ms.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: ln as u64 + 1,
            reason: format!("bad time {ms:?}"),
        })?;
        if !map.contains_key(utt) {
            order.push(utt.to_string());
        }
        map.entry(utt.to_string()).or_default().push(ms);
    }
    Ok(order
        .into_iter()
        .map(|utt| {
            let boundaries_ms = map.remove(&utt).unwrap();
            BoundarySet {
                utterance_id: utt,
                boundaries_ms,
            }
        })
        .collect())
}
