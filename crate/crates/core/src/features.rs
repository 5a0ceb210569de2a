//! Frame-level feature matrices and the preprocessing steps applied before
//! clustering and network training: cepstral mean normalization, delta /
//! delta-delta augmentation and contextual splicing.
//!
//! Arithmetic is carried out in f64; the FEAT1 archive stores f32.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub const FEAT1_MAGIC: &[u8; 6] = b"FEAT1\0";
pub const DEFAULT_FRAME_SHIFT_MS: u32 = 10;

/// One utterance's frames-by-dimensions feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub frames: Array2<f64>,
    pub frame_shift_ms: u32,
    pub speaker_id: Option<String>,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, frames: Array2<f64>) -> Result<Self> {
        let m = FeatureMatrix {
            utterance_id: utterance_id.into(),
            frames,
            frame_shift_ms: DEFAULT_FRAME_SHIFT_MS,
            speaker_id: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.num_frames() == 0 || self.dim() == 0 {
            return Err(Error::Input(format!(
                "utterance {}: empty feature matrix",
                self.utterance_id
            )));
        }
        if self.frame_shift_ms == 0 {
            return Err(Error::Parameter(format!(
                "utterance {}: frame_shift_ms must be positive",
                self.utterance_id
            )));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "utterance {}: non-finite feature value",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

/// Ordered collection of utterances sharing one feature dimension.
#[derive(Debug, Clone, Default)]
pub struct FeatureArchive {
    utterances: Vec<FeatureMatrix>,
    index: HashMap<String, usize>,
}

impl FeatureArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: FeatureMatrix) -> Result<()> {
        m.validate()?;
        if self.index.contains_key(&m.utterance_id) {
            return Err(Error::Consistency(format!(
                "duplicate utterance id {}",
                m.utterance_id
            )));
        }
        if let Some(d) = self.dim() {
            if d != m.dim() {
                return Err(Error::Consistency(format!(
                    "utterance {} has dimension {}, archive has {}",
                    m.utterance_id,
                    m.dim(),
                    d
                )));
            }
        }
        self.index
            .insert(m.utterance_id.clone(), self.utterances.len());
        self.utterances.push(m);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Shared feature dimension; `None` until the first utterance is added.
    pub fn dim(&self) -> Option<usize> {
        self.utterances.first().map(|m| m.dim())
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|m| m.num_frames()).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FeatureMatrix> {
        self.utterances.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, FeatureMatrix> {
        self.utterances.iter_mut()
    }

    pub fn get(&self, utterance_id: &str) -> Option<&FeatureMatrix> {
        self.index.get(utterance_id).map(|&i| &self.utterances[i])
    }

    /// Attach speaker ids from a speaker map; unknown utterances in the map
    /// are ignored, archive utterances missing from the map keep `None`.
    pub fn attach_speakers(&mut self, map: &HashMap<String, String>) {
        for m in self.utterances.iter_mut() {
            if let Some(s) = map.get(&m.utterance_id) {
                m.speaker_id = Some(s.clone());
            }
        }
    }
}

impl<'a> IntoIterator for &'a FeatureArchive {
    type Item = &'a FeatureMatrix;
    type IntoIter = std::slice::Iter<'a, FeatureMatrix>;
    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}

/// CMN scope: per-utterance or pooled over each speaker's utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmnScope {
    Utterance,
    SpeakerGroup,
}

/// Subtract the per-dimension mean computed over the utterance.
pub fn apply_cmn(m: &FeatureMatrix) -> FeatureMatrix {
    let mean = m.frames.mean_axis(Axis(0)).expect("T >= 1");
    let mut out = m.clone();
    out.frames -= &mean;
    out
}

/// Apply CMN to every utterance of the archive at the requested scope.
/// Speaker-group scope pools the mean over all utterances of one speaker.
pub fn apply_cmn_archive(archive: &FeatureArchive, scope: CmnScope) -> Result<FeatureArchive> {
    let mut out = FeatureArchive::new();
    match scope {
        CmnScope::Utterance => {
            for m in archive {
                out.push(apply_cmn(m))?;
            }
        }
        CmnScope::SpeakerGroup => {
            let d = archive.dim().unwrap_or(0);
            let mut sums: HashMap<&str, (ndarray::Array1<f64>, f64)> = HashMap::new();
            for m in archive {
                let spk = m.speaker_id.as_deref().ok_or_else(|| {
                    Error::Metadata(format!(
                        "utterance {} has no speaker id; required for speaker-group CMN",
                        m.utterance_id
                    ))
                })?;
                let entry = sums
                    .entry(spk)
                    .or_insert_with(|| (ndarray::Array1::zeros(d), 0.0));
                entry.0 += &m.frames.sum_axis(Axis(0));
                entry.1 += m.num_frames() as f64;
            }
            let means: HashMap<String, ndarray::Array1<f64>> = sums
                .into_iter()
                .map(|(k, (s, n))| (k.to_string(), s / n))
                .collect();
            for m in archive {
                let mean = &means[m.speaker_id.as_deref().unwrap()];
                let mut c = m.clone();
                c.frames -= mean;
                out.push(c)?;
            }
        }
    }
    Ok(out)
}

/// Append delta and delta-delta columns computed by the regression formula
/// d_t = sum_{n=1..2} n (x_{t+n} - x_{t-n}) / (2 sum_{n=1..2} n^2)
/// with edge frames replicated. Output has 3D columns.
pub fn append_deltas(m: &FeatureMatrix) -> FeatureMatrix {
    let statics = &m.frames;
    let deltas = regression_delta(statics);
    let ddeltas = regression_delta(&deltas);
    let t = statics.nrows();
    let d = statics.ncols();
    let mut out = Array2::<f64>::zeros((t, 3 * d));
    out.slice_mut(ndarray::s![.., 0..d]).assign(statics);
    out.slice_mut(ndarray::s![.., d..2 * d]).assign(&deltas);
    out.slice_mut(ndarray::s![.., 2 * d..3 * d])
        .assign(&ddeltas);
    FeatureMatrix {
        utterance_id: m.utterance_id.clone(),
        frames: out,
        frame_shift_ms: m.frame_shift_ms,
        speaker_id: m.speaker_id.clone(),
    }
}

fn regression_delta(x: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows() as isize;
    let d = x.ncols();
    let denom = 2.0 * (1.0 + 4.0); // 2 * sum n^2, n = 1..2
    let clamp = |i: isize| i.clamp(0, t - 1) as usize;
    let mut out = Array2::<f64>::zeros((t as usize, d));
    for ti in 0..t {
        for di in 0..d {
            let mut acc = 0.0;
            for n in 1..=2isize {
                acc += n as f64 * (x[[clamp(ti + n), di]] - x[[clamp(ti - n), di]]);
            }
            out[[ti as usize, di]] = acc / denom;
        }
    }
    out
}

/// Concatenate each frame with its +-context neighbours, replicating edge
/// frames. Output has (2*context+1)*D columns.
pub fn splice(m: &FeatureMatrix, context: usize) -> FeatureMatrix {
    let t = m.num_frames() as isize;
    let d = m.dim();
    let width = 2 * context + 1;
    let clamp = |i: isize| i.clamp(0, t - 1) as usize;
    let mut out = Array2::<f64>::zeros((t as usize, width * d));
    for ti in 0..t {
        for (slot, off) in (-(context as isize)..=context as isize).enumerate() {
            let src = m.frames.row(clamp(ti + off));
            out.slice_mut(ndarray::s![ti as usize, slot * d..(slot + 1) * d])
                .assign(&src);
        }
    }
    FeatureMatrix {
        utterance_id: m.utterance_id.clone(),
        frames: out,
        frame_shift_ms: m.frame_shift_ms,
        speaker_id: m.speaker_id.clone(),
    }
}

/// Write a FEAT1 archive: magic, u32 utterance count, then per utterance
/// u32 id length, id bytes, u32 T, u32 D, T*D f32 little-endian row-major.
pub fn write_archive(archive: &FeatureArchive, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(FEAT1_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(archive.len() as u32)
        .map_err(io_err)?;
    for m in archive {
        let id = m.utterance_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32)
            .map_err(io_err)?;
        w.write_all(id).map_err(io_err)?;
        w.write_u32::<LittleEndian>(m.num_frames() as u32)
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(m.dim() as u32)
            .map_err(io_err)?;
        for v in m.frames.iter() {
            w.write_f32::<LittleEndian>(*v as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a FEAT1 archive. Reports the byte offset of the first malformed
/// field on failure and rejects dimension drift across utterances.
pub fn load_archive(path: &Path) -> Result<FeatureArchive> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, 0, "truncated magic"))?;
    if &magic != FEAT1_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected FEAT1\\0"));
    }
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path, r.offset, "truncated utterance count"))?;

    let mut archive = FeatureArchive::new();
    for u in 0..count {
        let at = r.offset;
        let id_len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path, at, format!("truncated id length (utterance {u})")))?;
        let mut id_bytes = vec![0u8; id_len as usize];
        let at = r.offset;
        r.read_exact(&mut id_bytes)
            .map_err(|_| Error::format(path, at, format!("truncated id (utterance {u})")))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::format(path, at, format!("id is not UTF-8 (utterance {u})")))?;
        let at = r.offset;
        let t = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path, at, format!("truncated frame count ({id})")))?;
        let at = r.offset;
        let d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path, at, format!("truncated dimension ({id})")))?;
        if t == 0 || d == 0 {
            return Err(Error::format(
                path,
                at,
                format!("utterance {id}: zero frame count or dimension"),
            ));
        }
        let mut values = Vec::with_capacity(t as usize * d as usize);
        for _ in 0..t * d {
            let at = r.offset;
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::format(path, at, format!("truncated values ({id})")))?;
            values.push(v as f64);
        }
        let frames = Array2::from_shape_vec((t as usize, d as usize), values)
            .expect("shape matches read loop");
        archive.push(FeatureMatrix::new(id, frames)?)?;
    }
    Ok(archive)
}

/// Read a speaker map: UTF-8 lines "utterance_id<TAB>speaker_id".
pub fn load_speaker_map(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let utt = parts.next().unwrap_or("");
        let spk = parts.next().ok_or_else(|| {
            Error::Metadata(format!(
                "{}:{}: expected utterance<TAB>speaker",
                path.display(),
                ln + 1
            ))
        })?;
        map.insert(utt.to_string(), spk.trim().to_string());
    }
    Ok(map)
}

pub fn write_speaker_map(map: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (utt, spk) in map {
        out.push_str(utt);
        out.push('\t');
        out.push_str(spk);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}
