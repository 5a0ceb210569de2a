//! Evaluation suite: cluster purity against a reference alignment, the
//! symmetric-KL relevance metrics over posteriorgram frames, and ABX
//! discriminability with DTW over cosine frame distances.

pub mod abx;
pub mod dtw;
pub mod reports;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labeling::LabelSequence;

/// Probabilities below this are floored before the log-ratio terms; both
/// vectors are renormalized afterwards.
pub const KL_FLOOR: f64 = 1e-10;

/// Time-aligned ground-truth phone spans per utterance, frame indices
/// inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhoneSpan {
    pub start_frame: usize,
    pub end_frame: usize,
    pub phone: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceAlignment {
    pub utterances: BTreeMap<String, Vec<PhoneSpan>>,
    pub inventory: BTreeSet<usize>,
    pub silence_phones: BTreeSet<usize>,
}

impl ReferenceAlignment {
    pub fn validate(&self) -> Result<()> {
        for (utt, spans) in &self.utterances {
            let mut prev_end: Option<usize> = None;
            for s in spans {
                if s.end_frame < s.start_frame {
                    return Err(Error::Consistency(format!(
                        "utterance {utt}: span {}..{} inverted",
                        s.start_frame, s.end_frame
                    )));
                }
                if let Some(p) = prev_end {
                    if s.start_frame <= p {
                        return Err(Error::Consistency(format!(
                            "utterance {utt}: spans overlap or are unsorted at frame {}",
                            s.start_frame
                        )));
                    }
                }
                if !self.inventory.contains(&s.phone) {
                    return Err(Error::Consistency(format!(
                        "utterance {utt}: phone {} missing from inventory",
                        s.phone
                    )));
                }
                prev_end = Some(s.end_frame);
            }
        }
        Ok(())
    }

    /// Ground-truth phone of a frame, None outside every span.
    pub fn phone_at(&self, utterance_id: &str, frame: usize) -> Option<usize> {
        let spans = self.utterances.get(utterance_id)?;
        let idx = spans.partition_point(|s| s.end_frame < frame);
        spans
            .get(idx)
            .and_then(|s| (s.start_frame <= frame && frame <= s.end_frame).then_some(s.phone))
    }

    pub fn num_frames(&self, utterance_id: &str) -> usize {
        self.utterances
            .get(utterance_id)
            .and_then(|s| s.last())
            .map_or(0, |s| s.end_frame + 1)
    }
}

/// Per-frame ground-truth phones for a stack of utterances laid out in the
/// given order. Silence frames and frames outside every span map to None.
pub fn frame_phone_map(
    order: &[(String, usize)],
    alignment: &ReferenceAlignment,
) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(order.iter().map(|(_, n)| n).sum());
    for (utt, frames) in order {
        let spans = alignment
            .utterances
            .get(utt)
            .ok_or_else(|| Error::Alignment(format!("no alignment for utterance {utt}")))?;
        if let Some(last) = spans.last() {
            if last.end_frame >= *frames {
                return Err(Error::Alignment(format!(
                    "utterance {utt}: alignment reaches frame {} but only {} frames exist",
                    last.end_frame, frames
                )));
            }
        }
        for f in 0..*frames {
            let phone = alignment
                .phone_at(utt, f)
                .filter(|p| !alignment.silence_phones.contains(p));
            out.push(phone);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPurity {
    pub cluster: usize,
    pub purity: f64,
    pub frames: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    pub per_cluster: Vec<ClusterPurity>,
    pub overall: f64,
    pub scored_frames: u64,
}

/// Frame-level purity of a clustering against the reference phones.
/// Silence frames, frames without coverage, and removed frames are
/// excluded before counting.
pub fn purity(labels: &[LabelSequence], alignment: &ReferenceAlignment) -> Result<PurityReport> {
    let mut counts: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    for seq in labels {
        let spans = alignment.utterances.get(&seq.utterance_id).ok_or_else(|| {
            Error::Alignment(format!("no alignment for utterance {}", seq.utterance_id))
        })?;
        if let Some(last) = spans.last() {
            if last.end_frame >= seq.labels.len() {
                return Err(Error::Alignment(format!(
                    "utterance {}: alignment reaches frame {} but labels stop at {}",
                    seq.utterance_id,
                    last.end_frame,
                    seq.labels.len()
                )));
            }
        }
        for (frame, (&label, &removed)) in
            seq.labels.iter().zip(seq.removed_mask.iter()).enumerate()
        {
            if removed {
                continue;
            }
            let Some(phone) = alignment.phone_at(&seq.utterance_id, frame) else {
                continue;
            };
            if alignment.silence_phones.contains(&phone) {
                continue;
            }
            *counts.entry(label).or_default().entry(phone).or_insert(0) += 1;
        }
    }
    let mut per_cluster = Vec::with_capacity(counts.len());
    let mut hits = 0u64;
    let mut total = 0u64;
    for (cluster, phones) in &counts {
        let best = phones.values().copied().max().unwrap_or(0);
        let sum: u64 = phones.values().sum();
        per_cluster.push(ClusterPurity {
            cluster: *cluster,
            purity: best as f64 / sum as f64,
            frames: sum,
        });
        hits += best;
        total += sum;
    }
    if total == 0 {
        return Err(Error::Input(
            "no scorable frames after silence removal".into(),
        ));
    }
    Ok(PurityReport {
        per_cluster,
        overall: hits as f64 / total as f64,
        scored_frames: total,
    })
}

fn floored(p: &ArrayView1<f64>) -> Array1<f64> {
    let mut q = p.mapv(|v| v.max(KL_FLOOR));
    let sum = q.sum();
    q /= sum;
    q
}

/// Symmetric KL divergence Σᵢ (P(i) − Q(i))·ln(P(i)/Q(i)) with flooring.
pub fn symmetric_kl(p: &ArrayView1<f64>, q: &ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for v in p.iter().chain(q.iter()) {
        if !(*v >= 0.0) {
            return Err(Error::Input(format!("negative or NaN probability {v}")));
        }
    }
    if (p.sum() - 1.0).abs() > 1e-6 || (q.sum() - 1.0).abs() > 1e-6 {
        return Err(Error::Input("probabilities must sum to 1".into()));
    }
    Ok(sym_kl_floored(p, q))
}

/// Core of symmetric_kl without the precondition checks; inputs are
/// floored and renormalized here.
pub(crate) fn sym_kl_floored(p: &ArrayView1<f64>, q: &ArrayView1<f64>) -> f64 {
    let pf = floored(p);
    let qf = floored(q);
    // ln a − ln b rather than ln(a/b): negation is exact, so swapping the
    // arguments reproduces every term bit for bit
    pf.iter()
        .zip(qf.iter())
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum()
}

#[derive(Debug, Clone)]
pub struct CentroidSet {
    /// Mean posterior row per phone.
    pub centroids: BTreeMap<usize, Array1<f64>>,
    /// Inventory phones with no scorable frames.
    pub missing_phones: Vec<usize>,
}

/// Mean posterior vector of each phone's frames.
pub fn phone_centroids(
    rows: &ArrayView2<f64>,
    phones: &[Option<usize>],
    inventory: &BTreeSet<usize>,
) -> Result<CentroidSet> {
    if rows.nrows() != phones.len() {
        return Err(Error::Alignment(format!(
            "{} posterior rows but {} frame phones",
            rows.nrows(),
            phones.len()
        )));
    }
    let mut sums: BTreeMap<usize, (Array1<f64>, u64)> = BTreeMap::new();
    for (row, phone) in rows.axis_iter(Axis(0)).zip(phones.iter()) {
        let Some(k) = phone else { continue };
        let entry = sums
            .entry(*k)
            .or_insert_with(|| (Array1::zeros(rows.ncols()), 0));
        entry.0 += &row;
        entry.1 += 1;
    }
    let centroids: BTreeMap<usize, Array1<f64>> = sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();
    let missing_phones: Vec<usize> = inventory
        .iter()
        .filter(|k| !centroids.contains_key(k))
        .copied()
        .collect();
    if !missing_phones.is_empty() {
        log::debug!("phones without frames: {missing_phones:?}");
    }
    Ok(CentroidSet {
        centroids,
        missing_phones,
    })
}

#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    /// Unit ids, row order of `values`.
    pub units: Vec<usize>,
    /// Phone ids, column order of `values`.
    pub phones: Vec<usize>,
    pub values: Array2<f64>,
    /// Units whose every frame was excluded.
    pub empty_units: Vec<usize>,
}

/// D(u_r, g_k): mean symmetric KL from the unit's frames to each phone
/// centroid. Frames without a unit or without a scorable phone are skipped.
pub fn unit_phone_distances(
    rows: &ArrayView2<f64>,
    units_per_frame: &[Option<usize>],
    phones: &[Option<usize>],
    centroids: &CentroidSet,
) -> Result<DistanceMatrix> {
    if rows.nrows() != units_per_frame.len() || rows.nrows() != phones.len() {
        return Err(Error::Alignment(format!(
            "{} rows, {} unit labels, {} frame phones",
            rows.nrows(),
            units_per_frame.len(),
            phones.len()
        )));
    }
    let mut frames_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut empty_units: BTreeSet<usize> = BTreeSet::new();
    for (i, (unit, phone)) in units_per_frame.iter().zip(phones.iter()).enumerate() {
        let Some(u) = unit else { continue };
        if phone.is_some() {
            frames_of.entry(*u).or_default().push(i);
            empty_units.remove(u);
        } else if !frames_of.contains_key(u) {
            empty_units.insert(*u);
        }
    }
    if !empty_units.is_empty() {
        log::debug!("units with no scorable frames: {empty_units:?}");
    }
    let units: Vec<usize> = frames_of.keys().copied().collect();
    let phone_ids: Vec<usize> = centroids.centroids.keys().copied().collect();
    let cents: Vec<&Array1<f64>> = phone_ids.iter().map(|k| &centroids.centroids[k]).collect();
    let rows_per_unit: Vec<&Vec<usize>> = units.iter().map(|u| &frames_of[u]).collect();
    let flat: Vec<f64> = rows_per_unit
        .par_iter()
        .flat_map_iter(|frames| {
            let mut acc = vec![0.0f64; cents.len()];
            for &i in frames.iter() {
                let row = rows.row(i);
                for (j, c) in cents.iter().enumerate() {
                    acc[j] += sym_kl_floored(&row, &c.view());
                }
            }
            let n = frames.len() as f64;
            acc.into_iter().map(move |v| v / n)
        })
        .collect();
    let values = Array2::from_shape_vec((units.len(), phone_ids.len()), flat)
        .expect("row-major distance layout");
    Ok(DistanceMatrix {
        units,
        phones: phone_ids,
        values,
        empty_units: empty_units.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRelevance {
    pub unit: usize,
    /// Closest phone g*, ties to the lowest phone id.
    pub best_phone: usize,
    pub d_star: f64,
    /// Second-closest phone g**, absent with fewer than 2 phones.
    pub second_phone: Option<usize>,
    pub d_second: Option<f64>,
    /// |D** − D*|.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DistanceReport {
    pub units: Vec<UnitRelevance>,
    /// D̃(g_k): mean symmetric KL of a phone's frames to its own centroid.
    pub phone_variability: BTreeMap<usize, f64>,
    pub mean_d_star: f64,
    pub mean_d_second: Option<f64>,
    /// |mean D** − mean D*|.
    pub mean_delta: Option<f64>,
    pub mean_variability: f64,
    /// Phones never selected as any unit's closest phone.
    pub uncovered_phones: Vec<usize>,
}

/// Per-unit closest phones, inherent phone variability, corpus averages,
/// and the phone coverage list.
pub fn relevance_summary(
    matrix: &DistanceMatrix,
    rows: &ArrayView2<f64>,
    phones: &[Option<usize>],
    centroids: &CentroidSet,
) -> Result<DistanceReport> {
    if matrix.units.is_empty() || matrix.phones.is_empty() {
        return Err(Error::Input("empty distance matrix".into()));
    }
    let mut units = Vec::with_capacity(matrix.units.len());
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for (r, &unit) in matrix.units.iter().enumerate() {
        let row = matrix.values.row(r);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] < row[best] {
                best = j;
            }
        }
        let mut second: Option<usize> = None;
        for j in 0..row.len() {
            if j == best {
                continue;
            }
            if second.is_none_or(|s| row[j] < row[s]) {
                second = Some(j);
            }
        }
        covered.insert(matrix.phones[best]);
        units.push(UnitRelevance {
            unit,
            best_phone: matrix.phones[best],
            d_star: row[best],
            second_phone: second.map(|s| matrix.phones[s]),
            d_second: second.map(|s| row[s]),
            delta: second.map(|s| (row[s] - row[best]).abs()),
        });
    }
    let mut variability = BTreeMap::new();
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for (row, phone) in rows.axis_iter(Axis(0)).zip(phones.iter()) {
        let Some(k) = phone else { continue };
        let Some(c) = centroids.centroids.get(k) else {
            continue;
        };
        *variability.entry(*k).or_insert(0.0) += sym_kl_floored(&row, &c.view());
        *counts.entry(*k).or_insert(0) += 1;
    }
    for (k, v) in variability.iter_mut() {
        *v /= counts[k] as f64;
    }
    let r = units.len() as f64;
    let mean_d_star = units.iter().map(|u| u.d_star).sum::<f64>() / r;
    let mean_d_second = units
        .iter()
        .map(|u| u.d_second)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / r);
    let mean_delta = mean_d_second.map(|m| (m - mean_d_star).abs());
    let mean_variability = if variability.is_empty() {
        0.0
    } else {
        variability.values().sum::<f64>() / variability.len() as f64
    };
    let uncovered_phones = matrix
        .phones
        .iter()
        .filter(|k| !covered.contains(k))
        .copied()
        .collect();
    Ok(DistanceReport {
        units,
        phone_variability: variability,
        mean_d_star,
        mean_d_second,
        mean_delta,
        mean_variability,
        uncovered_phones,
    })
}

/// Write alignment spans: "utterance_id start_frame end_frame phone_id".
pub fn write_alignment(alignment: &ReferenceAlignment, path: &Path) -> Result<()> {
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (utt, spans) in &alignment.utterances {
        for s in spans {
            writeln!(out, "{utt} {} {} {}", s.start_frame, s.end_frame, s.phone)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_alignment(path: &Path, silence_phones: &BTreeSet<usize>) -> Result<ReferenceAlignment> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut alignment = ReferenceAlignment {
        silence_phones: silence_phones.clone(),
        ..ReferenceAlignment::default()
    };
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: &str| Error::format(path, lineno as u64 + 1, reason);
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 4 {
            return Err(parse_err("expected utterance_id start end phone"));
        }
        let start_frame = fields[1]
            .parse()
            .map_err(|_| parse_err("bad start frame"))?;
        let end_frame = fields[2].parse().map_err(|_| parse_err("bad end frame"))?;
        let phone = fields[3].parse().map_err(|_| parse_err("bad phone id"))?;
        alignment.inventory.insert(phone);
        alignment
            .utterances
            .entry(fields[0].to_string())
            .or_default()
            .push(PhoneSpan {
                start_frame,
                end_frame,
                phone,
            });
    }
    alignment.validate()?;
    Ok(alignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(utt: &str, labels: Vec<usize>) -> LabelSequence {
        let removed_mask = vec![false; labels.len()];
        LabelSequence {
            utterance_id: utt.into(),
            labels,
            removed_mask,
        }
    }

    fn alignment(
        utt: &str,
        spans: &[(usize, usize, usize)],
        silence: &[usize],
    ) -> ReferenceAlignment {
        let mut a = ReferenceAlignment::default();
        a.utterances.insert(
            utt.into(),
            spans
                .iter()
                .map(|&(start_frame, end_frame, phone)| PhoneSpan {
                    start_frame,
                    end_frame,
                    phone,
                })
                .collect(),
        );
        for &(_, _, p) in spans {
            a.inventory.insert(p);
        }
        a.silence_phones = silence.iter().copied().collect();
        a.validate().unwrap();
        a
    }

    #[test]
    fn purity_of_matching_partition_is_one() {
        let labels = vec![seq("u", vec![5, 5, 5, 9, 9, 9])];
        let a = alignment("u", &[(0, 2, 1), (3, 5, 2)], &[]);
        let report = purity(&labels, &a).unwrap();
        assert_eq!(report.overall, 1.0);
        assert!(report.per_cluster.iter().all(|c| c.purity == 1.0));
    }

    #[test]
    fn purity_of_even_split_cluster_is_half() {
        let labels = vec![seq("u", vec![1, 1, 1, 1])];
        let a = alignment("u", &[(0, 1, 7), (2, 3, 8)], &[]);
        let report = purity(&labels, &a).unwrap();
        assert_eq!(report.per_cluster[0].purity, 0.5);
    }

    #[test]
    fn purity_matches_hand_count() {
        // cluster 1 sees phones (3,1), cluster 2 sees (0,4)
        let labels = vec![seq("u", vec![1, 1, 1, 1, 2, 2, 2, 2])];
        let a = alignment("u", &[(0, 2, 10), (3, 7, 11)], &[]);
        let report = purity(&labels, &a).unwrap();
        assert_eq!(report.overall, 0.875);
    }

    #[test]
    fn purity_excludes_silence_frames() {
        let labels = vec![seq("u", vec![1, 1, 1, 1])];
        let a = alignment("u", &[(0, 1, 0), (2, 3, 5)], &[0]);
        let report = purity(&labels, &a).unwrap();
        assert_eq!(report.scored_frames, 2);
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn purity_skips_removed_frames() {
        let mut s = seq("u", vec![1, 2, 1, 1]);
        s.removed_mask[1] = true;
        let a = alignment("u", &[(0, 3, 5)], &[]);
        let report = purity(&[s], &a).unwrap();
        assert_eq!(report.scored_frames, 3);
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn purity_rejects_short_label_sequence() {
        let labels = vec![seq("u", vec![1, 1])];
        let a = alignment("u", &[(0, 3, 5)], &[]);
        assert!(matches!(purity(&labels, &a), Err(Error::Alignment(_))));
    }

    #[test]
    fn purity_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = 200;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let phones: Vec<usize> = (0..n).map(|_| rng.gen_range(1..5)).collect();
            let spans: Vec<(usize, usize, usize)> =
                phones.iter().enumerate().map(|(i, &p)| (i, i, p)).collect();
            let a = alignment("u", &spans, &[]);
            let report = purity(&[seq("u", labels.clone())], &a).unwrap();
            // independent tally
            let mut table = std::collections::HashMap::new();
            for (&l, &p) in labels.iter().zip(phones.iter()) {
                *table.entry((l, p)).or_insert(0u64) += 1;
            }
            let clusters: BTreeSet<usize> = labels.iter().copied().collect();
            let hits: u64 = clusters
                .iter()
                .map(|&c| {
                    (1..5)
                        .map(|p| table.get(&(c, p)).copied().unwrap_or(0))
                        .max()
                        .unwrap()
                })
                .sum();
            assert_eq!(report.overall, hits as f64 / n as f64);
        }
    }

    #[test]
    fn symmetric_kl_of_identical_is_zero() {
        let p = array![0.3, 0.5, 0.2];
        assert!(symmetric_kl(&p.view(), &p.view()).unwrap() <= 1e-12);
    }

    #[test]
    fn symmetric_kl_is_symmetric_exactly() {
        let p = array![0.5, 0.5];
        let q = array![0.25, 0.75];
        assert_eq!(
            symmetric_kl(&p.view(), &q.view()).unwrap(),
            symmetric_kl(&q.view(), &p.view()).unwrap()
        );
    }

    #[test]
    fn symmetric_kl_matches_direct_evaluation() {
        let p = array![0.5, 0.5];
        let q = array![0.25, 0.75];
        let expected = (0.5 - 0.25) * (0.5f64 / 0.25).ln() + (0.5 - 0.75) * (0.5f64 / 0.75).ln();
        assert_abs_diff_eq!(
            symmetric_kl(&p.view(), &q.view()).unwrap(),
            expected,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(expected, 0.2747, epsilon = 5e-5);
    }

    #[test]
    fn symmetric_kl_handles_exact_zeros() {
        let p = array![1.0, 0.0];
        let q = array![0.0, 1.0];
        let d = symmetric_kl(&p.view(), &q.view()).unwrap();
        assert!(d.is_finite() && d > 0.0);
    }

    #[test]
    fn symmetric_kl_rejects_length_mismatch() {
        let p = array![1.0];
        let q = array![0.5, 0.5];
        assert!(matches!(
            symmetric_kl(&p.view(), &q.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn symmetric_kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let draw = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                Array1::from(v)
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            assert!(symmetric_kl(&p.view(), &q.view()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn centroid_of_single_frame_is_that_row() {
        let rows = array![[0.2, 0.8]];
        let phones = vec![Some(3)];
        let inv: BTreeSet<usize> = [3].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        assert_eq!(c.centroids[&3], array![0.2, 0.8]);
    }

    #[test]
    fn centroid_averages_two_opposite_rows() {
        let rows = array![[1.0, 0.0], [0.0, 1.0]];
        let phones = vec![Some(1), Some(1)];
        let inv: BTreeSet<usize> = [1].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        assert_eq!(c.centroids[&1], array![0.5, 0.5]);
    }

    #[test]
    fn centroid_matches_second_pass_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = Array2::from_shape_fn((50, 4), |_| rng.gen_range(0.0..1.0));
        let phones: Vec<Option<usize>> = vec![Some(2); 50];
        let inv: BTreeSet<usize> = [2].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        let mean = rows.mean_axis(Axis(0)).unwrap();
        for (a, b) in c.centroids[&2].iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn centroid_lists_phones_without_frames() {
        let rows = array![[1.0, 0.0]];
        let phones = vec![Some(1)];
        let inv: BTreeSet<usize> = [1, 2, 3].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        assert_eq!(c.missing_phones, vec![2, 3]);
    }

    #[test]
    fn unit_matching_centroid_has_zero_distance() {
        let rows = array![[0.5, 0.5], [0.5, 0.5]];
        let phones = vec![Some(1), Some(1)];
        let units = vec![Some(0), Some(0)];
        let inv: BTreeSet<usize> = [1].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        let m = unit_phone_distances(&rows.view(), &units, &phones, &c).unwrap();
        assert!(m.values[[0, 0]] <= 1e-12);
    }

    #[test]
    fn single_frame_unit_distance_is_one_kl_call() {
        let rows = array![[0.9, 0.1], [0.5, 0.5]];
        let phones = vec![Some(1), Some(1)];
        let units = vec![Some(0), Some(1)];
        let inv: BTreeSet<usize> = [1].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        let m = unit_phone_distances(&rows.view(), &units, &phones, &c).unwrap();
        let expected = symmetric_kl(&rows.row(0), &c.centroids[&1].view()).unwrap();
        assert_abs_diff_eq!(m.values[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn distance_matrix_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut rows = Array2::from_shape_fn((20, 5), |_| rng.gen_range(0.01..1.0));
        for mut r in rows.axis_iter_mut(Axis(0)) {
            let s = r.sum();
            r /= s;
        }
        let phones: Vec<Option<usize>> = (0..20).map(|i| Some(i % 3)).collect();
        let units: Vec<Option<usize>> = vec![Some(7); 20];
        let inv: BTreeSet<usize> = [0, 1, 2].into();
        let c = phone_centroids(&rows.view(), &phones, &inv).unwrap();
        let m = unit_phone_distances(&rows.view(), &units, &phones, &c).unwrap();
        for (j, k) in m.phones.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..20 {
                acc += symmetric_kl(&rows.row(i), &c.centroids[k].view()).unwrap();
            }
            assert_abs_diff_eq!(m.values[[0, j]], acc / 20.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn relevance_breaks_ties_to_lower_phone_id() {
        let matrix = DistanceMatrix {
            units: vec![0],
            phones: vec![3, 5],
            values: array![[0.4, 0.4]],
            empty_units: vec![],
        };
        let rows = array![[0.5, 0.5]];
        let phones = vec![Some(3)];
        let c = CentroidSet {
            centroids: [(3, array![0.5, 0.5]), (5, array![0.5, 0.5])].into(),
            missing_phones: vec![],
        };
        let report = relevance_summary(&matrix, &rows.view(), &phones, &c).unwrap();
        assert_eq!(report.units[0].best_phone, 3);
        assert_eq!(report.units[0].second_phone, Some(5));
        assert_eq!(report.units[0].delta, Some(0.0));
    }

    #[test]
    fn relevance_reports_coverage_and_positive_deltas() {
        let matrix = DistanceMatrix {
            units: vec![0, 1],
            phones: vec![1, 2],
            values: array![[0.1, 2.0], [1.5, 0.2]],
            empty_units: vec![],
        };
        let rows = array![[0.9, 0.1], [0.1, 0.9]];
        let phones = vec![Some(1), Some(2)];
        let c = CentroidSet {
            centroids: [(1, array![0.9, 0.1]), (2, array![0.1, 0.9])].into(),
            missing_phones: vec![],
        };
        let report = relevance_summary(&matrix, &rows.view(), &phones, &c).unwrap();
        assert!(report.uncovered_phones.is_empty());
        assert!(report.units.iter().all(|u| u.delta.unwrap() > 0.0));
        assert_abs_diff_eq!(report.mean_d_star, 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_d_second.unwrap(), 1.75, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_delta.unwrap(), 1.6, epsilon = 1e-12);
    }

    #[test]
    fn relevance_with_single_phone_has_no_second() {
        let matrix = DistanceMatrix {
            units: vec![0],
            phones: vec![1],
            values: array![[0.3]],
            empty_units: vec![],
        };
        let rows = array![[1.0]];
        let phones = vec![Some(1)];
        let c = CentroidSet {
            centroids: [(1, array![1.0])].into(),
            missing_phones: vec![],
        };
        let report = relevance_summary(&matrix, &rows.view(), &phones, &c).unwrap();
        assert_eq!(report.units[0].second_phone, None);
        assert_eq!(report.mean_delta, None);
    }

    #[test]
    fn frame_phone_map_masks_silence_and_gaps() {
        let a = alignment("u", &[(0, 1, 0), (2, 3, 7)], &[0]);
        let map = frame_phone_map(&[("u".into(), 5)], &a).unwrap();
        assert_eq!(map, vec![None, None, Some(7), Some(7), None]);
    }

    #[test]
    fn frame_phone_map_rejects_overlong_alignment() {
        let a = alignment("u", &[(0, 9, 1)], &[]);
        assert!(frame_phone_map(&[("u".into(), 5)], &a).is_err());
    }

    #[test]
    fn alignment_round_trips_through_file() {
        let a = alignment("u1", &[(0, 4, 1), (5, 9, 2)], &[1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.txt");
        write_alignment(&a, &path).unwrap();
        let b = load_alignment(&path, &[1usize].into()).unwrap();
        assert_eq!(a.utterances, b.utterances);
        assert_eq!(b.silence_phones, [1usize].into());
    }

    #[test]
    fn alignment_rejects_overlapping_spans() {
        let mut a = ReferenceAlignment::default();
        a.inventory.insert(1);
        a.utterances.insert(
            "u".into(),
            vec![
                PhoneSpan {
                    start_frame: 0,
                    end_frame: 5,
                    phone: 1,
                },
                PhoneSpan {
                    start_frame: 3,
                    end_frame: 8,
                    phone: 1,
                },
            ],
        );
        assert!(a.validate().is_err());
    }
}
