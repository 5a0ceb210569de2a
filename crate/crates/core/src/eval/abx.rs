//! ABX discriminability over triphone minimal pairs: the probability that
//! a same-category item lies farther from X than a different-category item
//! does, with ties counted half.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::dtw::dtw_distance;
use crate::features::FeatureArchive;

/// (left context, center, right context) phone ids.
pub type Triphone = (usize, usize, usize);

/// One occurrence of a triphone, frame span inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbxItem {
    pub utterance_id: String,
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub center: usize,
    pub left: usize,
    pub right: usize,
    pub speaker_id: String,
}

impl AbxItem {
    pub fn triphone(&self) -> Triphone {
        (self.left, self.center, self.right)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offset_frame < self.onset_frame {
            return Err(Error::Consistency(format!(
                "item span {}..{} inverted",
                self.onset_frame, self.offset_frame
            )));
        }
        if self.speaker_id.is_empty() {
            return Err(Error::Metadata(format!(
                "item in {} has no speaker",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerCondition {
    /// A, B and X all from one speaker.
    Within,
    /// A and B share a speaker, X comes from a different one.
    Across,
}

impl std::fmt::Display for SpeakerCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpeakerCondition::Within => write!(f, "within-speaker"),
            SpeakerCondition::Across => write!(f, "across-speaker"),
        }
    }
}

/// Symmetrized error of one minimal pair inside one speaker context.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub context: String,
    pub x: Triphone,
    pub y: Triphone,
    pub error: f64,
    pub triples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSummary {
    pub context: String,
    pub mean_error: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct AbxReport {
    pub condition: SpeakerCondition,
    pub pairs: Vec<PairOutcome>,
    /// Mean over pairs per speaker context; the aggregate averages these.
    pub contexts: Vec<ContextSummary>,
    pub skipped: Vec<String>,
    pub aggregate: Option<f64>,
    pub total_triples: usize,
}

/// Directed error: fraction of triples (A, B, X) with A from `a_pool`,
/// X from `x_pool` (A ≠ X), B from `b_pool` where d(A,X) > d(B,X), ties
/// counted half. None when no triple exists.
pub fn directed_error<F>(
    dist: &F,
    a_pool: &[usize],
    x_pool: &[usize],
    b_pool: &[usize],
) -> Option<(f64, usize)>
where
    F: Fn(usize, usize) -> f64,
{
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &a in a_pool {
        for &x in x_pool {
            if a == x {
                continue;
            }
            let dax = dist(a, x);
            for &b in b_pool {
                let dbx = dist(b, x);
                if dax > dbx {
                    sum += 1.0;
                } else if dax == dbx {
                    sum += 0.5;
                }
                count += 1;
            }
        }
    }
    (count > 0).then(|| (sum / count as f64, count))
}

struct Pools<'a> {
    /// item indices per (triphone, speaker)
    by_cat_speaker: BTreeMap<(Triphone, &'a str), Vec<usize>>,
    speakers: BTreeSet<&'a str>,
    categories: BTreeSet<Triphone>,
}

fn build_pools(items: &[AbxItem]) -> Pools<'_> {
    let mut by_cat_speaker: BTreeMap<(Triphone, &str), Vec<usize>> = BTreeMap::new();
    let mut speakers = BTreeSet::new();
    let mut categories = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        by_cat_speaker
            .entry((item.triphone(), item.speaker_id.as_str()))
            .or_default()
            .push(i);
        speakers.insert(item.speaker_id.as_str());
        categories.insert(item.triphone());
    }
    Pools {
        by_cat_speaker,
        speakers,
        categories,
    }
}

/// Minimal pairs: same contexts, different center.
fn minimal_pairs(categories: &BTreeSet<Triphone>) -> Vec<(Triphone, Triphone)> {
    let cats: Vec<Triphone> = categories.iter().copied().collect();
    let mut pairs = Vec::new();
    for i in 0..cats.len() {
        for j in i + 1..cats.len() {
            let (x, y) = (cats[i], cats[j]);
            if x.0 == y.0 && x.2 == y.2 && x.1 != y.1 {
                pairs.push((x, y));
            }
        }
    }
    pairs
}

/// ABX error rates for every evaluable minimal pair under the speaker
/// condition. Aggregation: unweighted mean over pairs within each speaker
/// context, then unweighted mean over contexts.
pub fn abx_error(
    items: &[AbxItem],
    features: &FeatureArchive,
    condition: SpeakerCondition,
) -> Result<AbxReport> {
    for item in items {
        item.validate()?;
    }
    let slices = item_slices(items, features)?;
    let pools = build_pools(items);
    let pairs = minimal_pairs(&pools.categories);

    // (context key, x, y, a_pool, x_pool, b_pool) per direction
    struct Direction<'a> {
        context: String,
        x: Triphone,
        y: Triphone,
        a_pool: &'a [usize],
        x_pool: &'a [usize],
        b_pool: &'a [usize],
    }
    let empty: Vec<usize> = Vec::new();
    fn lookup<'a, 'b>(
        pools: &'b Pools<'a>,
        empty: &'b [usize],
        cat: Triphone,
        spk: &'a str,
    ) -> &'b [usize] {
        pools
            .by_cat_speaker
            .get(&(cat, spk))
            .map_or(empty, |v| v.as_slice())
    }
    let mut directions: Vec<Direction> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    fn push_pair<'a>(
        directions: &mut Vec<Direction<'a>>,
        skipped: &mut Vec<String>,
        context: String,
        x: Triphone,
        y: Triphone,
        fwd: (&'a [usize], &'a [usize], &'a [usize]),
        rev: (&'a [usize], &'a [usize], &'a [usize]),
    ) {
        let fwd_ok = fwd.0.iter().any(|a| fwd.1.iter().any(|b| a != b)) && !fwd.2.is_empty();
        let rev_ok = rev.0.iter().any(|a| rev.1.iter().any(|b| a != b)) && !rev.2.is_empty();
        if fwd_ok && rev_ok {
            directions.push(Direction {
                context: context.clone(),
                x,
                y,
                a_pool: fwd.0,
                x_pool: fwd.1,
                b_pool: fwd.2,
            });
            directions.push(Direction {
                context,
                x: y,
                y: x,
                a_pool: rev.0,
                x_pool: rev.1,
                b_pool: rev.2,
            });
        } else {
            skipped.push(format!(
                "{context}: {x:?} vs {y:?} lacks items for both directions"
            ));
        }
    }
    match condition {
        SpeakerCondition::Within => {
            for &spk in &pools.speakers {
                for &(x, y) in &pairs {
                    let sx = lookup(&pools, &empty, x, spk);
                    let sy = lookup(&pools, &empty, y, spk);
                    push_pair(
                        &mut directions,
                        &mut skipped,
                        spk.to_string(),
                        x,
                        y,
                        (sx, sx, sy),
                        (sy, sy, sx),
                    );
                }
            }
        }
        SpeakerCondition::Across => {
            for &sab in &pools.speakers {
                for &sx in &pools.speakers {
                    if sab == sx {
                        continue;
                    }
                    let context = format!("{sab}|{sx}");
                    for &(x, y) in &pairs {
                        push_pair(
                            &mut directions,
                            &mut skipped,
                            context.clone(),
                            x,
                            y,
                            (
                                lookup(&pools, &empty, x, sab),
                                lookup(&pools, &empty, x, sx),
                                lookup(&pools, &empty, y, sab),
                            ),
                            (
                                lookup(&pools, &empty, y, sab),
                                lookup(&pools, &empty, y, sx),
                                lookup(&pools, &empty, x, sab),
                            ),
                        );
                    }
                }
            }
        }
    }

    // distances actually needed, computed once in parallel
    let mut needed: BTreeSet<(usize, usize)> = BTreeSet::new();
    for d in &directions {
        for &a in d.a_pool {
            for &x in d.x_pool {
                if a != x {
                    needed.insert((a.min(x), a.max(x)));
                }
            }
        }
        for &b in d.b_pool {
            for &x in d.x_pool {
                if b != x {
                    needed.insert((b.min(x), b.max(x)));
                }
            }
        }
    }
    let needed: Vec<(usize, usize)> = needed.into_iter().collect();
    let computed: Vec<f64> = needed
        .par_iter()
        .map(|&(i, j)| dtw_distance(&slices[i].view(), &slices[j].view()))
        .collect::<Result<_>>()?;
    let table: HashMap<(usize, usize), f64> = needed.into_iter().zip(computed).collect();
    let dist = |i: usize, j: usize| -> f64 {
        if i == j {
            0.0
        } else {
            table[&(i.min(j), i.max(j))]
        }
    };

    // directions come in fwd/rev pairs; fold them back together
    let mut outcomes: Vec<PairOutcome> = Vec::new();
    let mut total_triples = 0usize;
    for chunk in directions.chunks(2) {
        let fwd = &chunk[0];
        let rev = &chunk[1];
        let (e1, n1) = directed_error(&dist, fwd.a_pool, fwd.x_pool, fwd.b_pool)
            .expect("direction validated non-empty");
        let (e2, n2) = directed_error(&dist, rev.a_pool, rev.x_pool, rev.b_pool)
            .expect("direction validated non-empty");
        total_triples += n1 + n2;
        outcomes.push(PairOutcome {
            context: fwd.context.clone(),
            x: fwd.x,
            y: fwd.y,
            error: 0.5 * (e1 + e2),
            triples: n1 + n2,
        });
    }
    let mut by_context: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in &outcomes {
        by_context
            .entry(o.context.clone())
            .or_default()
            .push(o.error);
    }
    let contexts: Vec<ContextSummary> = by_context
        .into_iter()
        .map(|(context, errs)| ContextSummary {
            mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
            pairs: errs.len(),
            context,
        })
        .collect();
    let aggregate = (!contexts.is_empty())
        .then(|| contexts.iter().map(|c| c.mean_error).sum::<f64>() / contexts.len() as f64);
    Ok(AbxReport {
        condition,
        pairs: outcomes,
        contexts,
        skipped,
        aggregate,
        total_triples,
    })
}

fn item_slices(items: &[AbxItem], features: &FeatureArchive) -> Result<Vec<Array2<f64>>> {
    items
        .iter()
        .map(|item| {
            let m = features.get(&item.utterance_id).ok_or_else(|| {
                Error::Metadata(format!("no features for utterance {}", item.utterance_id))
            })?;
            if item.offset_frame >= m.num_frames() {
                return Err(Error::Bounds(format!(
                    "item ends at frame {} but {} has {} frames",
                    item.offset_frame,
                    item.utterance_id,
                    m.num_frames()
                )));
            }
            Ok(m.frames
                .slice(s![item.onset_frame..=item.offset_frame, ..])
                .to_owned())
        })
        .collect()
}

const ITEM_HEADER: &str =
    "utterance_id onset_frame offset_frame center_phone left_context right_context speaker_id";

/// Write the item list with its header line.
pub fn write_items(items: &[AbxItem], path: &Path) -> Result<()> {
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "{ITEM_HEADER}").map_err(|e| Error::io(path, e))?;
    for i in items {
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            i.utterance_id, i.onset_frame, i.offset_frame, i.center, i.left, i.right, i.speaker_id
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_items(path: &Path) -> Result<Vec<AbxItem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 || line.is_empty() {
            continue; // header
        }
        let parse_err = |reason: &str| Error::format(path, lineno as u64 + 1, reason);
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 7 {
            return Err(parse_err("expected 7 space-separated fields"));
        }
        let item = AbxItem {
            utterance_id: fields[0].to_string(),
            onset_frame: fields[1].parse().map_err(|_| parse_err("bad onset"))?,
            offset_frame: fields[2].parse().map_err(|_| parse_err("bad offset"))?,
            center: fields[3]
                .parse()
                .map_err(|_| parse_err("bad center phone"))?,
            left: fields[4]
                .parse()
                .map_err(|_| parse_err("bad left context"))?,
            right: fields[5]
                .parse()
                .map_err(|_| parse_err("bad right context"))?,
            speaker_id: fields[6].to_string(),
        };
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}
