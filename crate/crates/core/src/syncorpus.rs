//! Deterministic synthetic corpora with known ground truth: Gaussian phone
//! clouds with per-speaker offsets, reference alignments, pseudo-recognizer
//! posteriorgrams, and ABX item lists.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::abx::AbxItem;
use crate::eval::{PhoneSpan, ReferenceAlignment};
use crate::features::{FeatureArchive, FeatureMatrix};
use crate::rng::derive_seed;

const TAG_UTTERANCE: u64 = 0x7574_7465;
const TAG_MODEL: u64 = 0x6d6f_6465;

/// Distance between derived phone means, in multiples of the unit scale.
const MEAN_SPACING: f64 = 10.0;
/// Magnitude of derived speaker offset vectors.
const OFFSET_MAGNITUDE: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_phones: usize,
    pub n_speakers: usize,
    pub n_utterances: usize,
    /// Inclusive range of phones per utterance; a one-phone inventory
    /// collapses every utterance to a single span.
    pub phones_per_utterance: (usize, usize),
    /// Inclusive range of frames per phone occurrence.
    pub frames_per_phone: (usize, usize),
    pub dim: usize,
    pub phone_means: Vec<Array1<f64>>,
    /// Isotropic standard deviation per phone.
    pub phone_scales: Vec<f64>,
    pub speaker_offsets: Vec<Array1<f64>>,
    /// Pseudo-recognizers emitting softmax posteriorgrams.
    pub n_recognizers: usize,
    /// Standard deviation of the mean perturbation in each pseudo-recognizer.
    pub model_jitter: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// Spec with derived means on scaled coordinate axes and derived speaker
    /// offsets (zero, then +/- unit axes), guaranteeing the separation
    /// invariant.
    pub fn separated(
        n_phones: usize,
        n_speakers: usize,
        n_utterances: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("feature dim must be positive".into()));
        }
        if n_speakers > 2 * dim + 1 {
            return Err(Error::Config(format!(
                "cannot derive {n_speakers} distinct speaker offsets in dimension {dim}"
            )));
        }
        let phone_means = (0..n_phones)
            .map(|k| {
                let mut m = Array1::zeros(dim);
                m[k % dim] = MEAN_SPACING * (k / dim + 1) as f64;
                m
            })
            .collect();
        let speaker_offsets = (0..n_speakers)
            .map(|s| {
                let mut v = Array1::zeros(dim);
                if s > 0 {
                    let axis = (s - 1) / 2;
                    let sign = if s % 2 == 1 { 1.0 } else { -1.0 };
                    v[axis] = sign * OFFSET_MAGNITUDE;
                }
                v
            })
            .collect();
        let spec = CorpusSpec {
            n_phones,
            n_speakers,
            n_utterances,
            phones_per_utterance: (3, 8),
            frames_per_phone: (5, 15),
            dim,
            phone_means,
            phone_scales: vec![1.0; n_phones],
            speaker_offsets,
            n_recognizers: 2,
            model_jitter: 0.5,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_phones == 0 || self.n_speakers == 0 || self.n_utterances == 0 {
            return Err(Error::Parameter(
                "phone, speaker, and utterance counts must be positive".into(),
            ));
        }
        if self.dim == 0 || self.n_recognizers == 0 {
            return Err(Error::Parameter(
                "dimension and recognizer count must be positive".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("phones per utterance", self.phones_per_utterance),
            ("frames per phone", self.frames_per_phone),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Parameter(format!("bad {name} range {lo}..={hi}")));
            }
        }
        if self.phone_means.len() != self.n_phones || self.phone_scales.len() != self.n_phones {
            return Err(Error::Config(format!(
                "{} phones but {} means and {} scales",
                self.n_phones,
                self.phone_means.len(),
                self.phone_scales.len()
            )));
        }
        if self.speaker_offsets.len() != self.n_speakers {
            return Err(Error::Config(format!(
                "{} speakers but {} offsets",
                self.n_speakers,
                self.speaker_offsets.len()
            )));
        }
        for v in self.phone_means.iter().chain(self.speaker_offsets.iter()) {
            if v.len() != self.dim {
                return Err(Error::Shape(format!(
                    "vector of dim {} in a dim-{} spec",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parameter("non-finite spec vector".into()));
            }
        }
        let max_scale = self.phone_scales.iter().fold(0.0f64, |acc, &s| acc.max(s));
        if self
            .phone_scales
            .iter()
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::Parameter("phone scales must be positive".into()));
        }
        for i in 0..self.n_phones {
            for j in i + 1..self.n_phones {
                let d = (&self.phone_means[i] - &self.phone_means[j])
                    .mapv(|x| x * x)
                    .sum()
                    .sqrt();
                if d < 4.0 * max_scale {
                    return Err(Error::Parameter(format!(
                        "phone means {i} and {j} separated by {d:.3}, need {}",
                        4.0 * max_scale
                    )));
                }
            }
        }
        if !(self.model_jitter >= 0.0) || !self.model_jitter.is_finite() {
            return Err(Error::Parameter("model jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub features: FeatureArchive,
    pub alignment: ReferenceAlignment,
    /// (utterance id, speaker id) in generation order.
    pub speakers: Vec<(String, String)>,
    /// Per recognizer, per utterance: frames x phones softmax rows.
    pub recognizer_posteriors: Vec<BTreeMap<String, Array2<f64>>>,
    /// One item per phone occurrence with both neighbors present.
    pub items: Vec<AbxItem>,
}

/// Phone sequence without immediate repeats.
fn draw_sequence(rng: &mut ChaCha8Rng, n_phones: usize, len: usize) -> Vec<usize> {
    if n_phones == 1 {
        return vec![0];
    }
    let mut seq = Vec::with_capacity(len);
    let mut prev = usize::MAX;
    for _ in 0..len {
        let phone = if prev == usize::MAX {
            rng.gen_range(0..n_phones)
        } else {
            let r = rng.gen_range(0..n_phones - 1);
            r + usize::from(r >= prev)
        };
        seq.push(phone);
        prev = phone;
    }
    seq
}

/// Perturbed phone means for one pseudo-recognizer.
fn jittered_means(spec: &CorpusSpec, recognizer: usize) -> Vec<Array1<f64>> {
    (0..spec.n_phones)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                spec.seed,
                TAG_MODEL,
                recognizer as u64,
                k as u64,
            ]));
            let noise = Array1::from_shape_fn(spec.dim, |_| {
                spec.model_jitter * rng.sample::<f64, _>(StandardNormal)
            });
            &spec.phone_means[k] + &noise
        })
        .collect()
}

/// Softmax responsibilities of one frame under isotropic Gaussian models.
fn responsibilities(frame: &Array1<f64>, means: &[Array1<f64>], scales: &[f64]) -> Array1<f64> {
    let mut logs = Array1::zeros(means.len());
    for (k, mean) in means.iter().enumerate() {
        let sq = (frame - mean).mapv(|x| x * x).sum();
        let var = scales[k] * scales[k];
        logs[k] = -0.5 * sq / var - frame.len() as f64 * scales[k].ln();
    }
    let max = logs.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs = logs.mapv(|l| (l - max).exp());
    probs /= probs.sum();
    probs
}

pub fn generate(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut features = FeatureArchive::new();
    let mut utterances = BTreeMap::new();
    let mut speakers = Vec::with_capacity(spec.n_utterances);
    let mut items = Vec::new();
    for u in 0..spec.n_utterances {
        let utt_id = format!("utt{u:04}");
        let speaker = u % spec.n_speakers;
        let speaker_id = format!("spk{speaker:02}");
        let offset = &spec.speaker_offsets[speaker];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, TAG_UTTERANCE, u as u64]));
        let (plo, phi) = spec.phones_per_utterance;
        let len = rng.gen_range(plo..=phi);
        let seq = draw_sequence(&mut rng, spec.n_phones, len);
        let (flo, fhi) = spec.frames_per_phone;
        let mut spans = Vec::with_capacity(seq.len());
        let mut rows: Vec<Array1<f64>> = Vec::new();
        for &phone in &seq {
            let n = rng.gen_range(flo..=fhi);
            let start = rows.len();
            for _ in 0..n {
                let noise = Array1::from_shape_fn(spec.dim, |_| {
                    spec.phone_scales[phone] * rng.sample::<f64, _>(StandardNormal)
                });
                rows.push(&spec.phone_means[phone] + offset + &noise);
            }
            spans.push(PhoneSpan {
                start_frame: start,
                end_frame: rows.len() - 1,
                phone,
            });
        }
        let mut frames = Array2::zeros((rows.len(), spec.dim));
        for (i, row) in rows.iter().enumerate() {
            frames.row_mut(i).assign(row);
        }
        let mut matrix = FeatureMatrix::new(utt_id.clone(), frames)?;
        matrix.speaker_id = Some(speaker_id.clone());
        features.push(matrix)?;
        for i in 1..seq.len().saturating_sub(1) {
            items.push(AbxItem {
                utterance_id: utt_id.clone(),
                onset_frame: spans[i].start_frame,
                offset_frame: spans[i].end_frame,
                center: seq[i],
                left: seq[i - 1],
                right: seq[i + 1],
                speaker_id: speaker_id.clone(),
            });
        }
        utterances.insert(utt_id.clone(), spans);
        speakers.push((utt_id, speaker_id));
    }
    let alignment = ReferenceAlignment {
        utterances,
        inventory: (0..spec.n_phones).collect(),
        silence_phones: Default::default(),
    };
    alignment.validate()?;

    let mut recognizer_posteriors = Vec::with_capacity(spec.n_recognizers);
    for r in 0..spec.n_recognizers {
        let means = jittered_means(spec, r);
        let mut per_utt = BTreeMap::new();
        for m in features.iter() {
            let mut post = Array2::zeros((m.num_frames(), spec.n_phones));
            for (i, frame) in m.frames.outer_iter().enumerate() {
                let probs = responsibilities(&frame.to_owned(), &means, &spec.phone_scales);
                post.row_mut(i).assign(&probs);
            }
            per_utt.insert(m.utterance_id.clone(), post);
        }
        recognizer_posteriors.push(per_utt);
    }
    Ok(SyntheticCorpus {
        features,
        alignment,
        speakers,
        recognizer_posteriors,
        items,
    })
}
