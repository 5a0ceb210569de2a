//! Spectral clustering of phone classes from a segment posteriorgram and
//! labeling of segments by discovered cluster.
//!
//! Pipeline: affinity A = X X^T over phones (X = transposed segment
//! posteriorgram), normalized Laplacian L = I - D^{-1/2} A D^{-1/2}, the R
//! eigenvectors of the smallest eigenvalues, row normalization, then
//! seeded k-means over the phone rows.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::derive_seed;
use crate::segmentation::Posteriorgram;

/// Mapping from each phone class to one of R clusters, with the anomalies
/// encountered while building it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub phone_to_cluster: Vec<usize>,
    pub num_clusters: usize,
    /// Clusters no phone was assigned to.
    pub empty_clusters: Vec<usize>,
    /// Phones with zero affinity to every other phone.
    pub isolated_phones: Vec<usize>,
}

impl ClusterAssignment {
    /// Boolean co-membership over phone pairs; the label-permutation
    /// invariant view of the assignment.
    pub fn co_membership(&self) -> Array2<bool> {
        let m = self.phone_to_cluster.len();
        Array2::from_shape_fn((m, m), |(i, j)| {
            self.phone_to_cluster[i] == self.phone_to_cluster[j]
        })
    }
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub empty_clusters: Vec<usize>,
}

/// Lloyd's iterations with distance-proportional seeding, run to centroid
/// movement below 1e-9 or 300 iterations. Deterministic given the seed.
pub fn kmeans(rows: &ArrayView2<f64>, r: usize, seed: u64) -> Result<KmeansResult> {
    let n = rows.nrows();
    if r == 0 || r > n {
        return Err(Error::Parameter(format!(
            "cluster count {r} out of range for {n} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6b6d_6561_6e73]));

    // distance-proportional seeding
    let mut centroids = Array2::<f64>::zeros((r, rows.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&rows.row(first));
    let mut min_sq = vec![f64::INFINITY; n];
    for c in 1..r {
        for i in 0..n {
            let d = sq_dist(&rows.row(i), &centroids.row(c - 1));
            if d < min_sq[i] {
                min_sq[i] = d;
            }
        }
        let total: f64 = min_sq.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_sq.iter().enumerate() {
                t -= w;
                if t <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&rows.row(pick));
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..300 {
        let cref = &centroids;
        assignments = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..r {
                    let d = sq_dist(&rows.row(i), &cref.row(c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect();
        let mut sums = Array2::<f64>::zeros((r, rows.ncols()));
        let mut counts = vec![0usize; r];
        for (i, &a) in assignments.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &rows.row(i);
            counts[a] += 1;
        }
        let mut movement = 0.0f64;
        for c in 0..r {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let new = &sums.row(c) / counts[c] as f64;
            let delta = (&new - &centroids.row(c)).mapv(|v| v * v).sum().sqrt();
            movement = movement.max(delta);
            centroids.row_mut(c).assign(&new);
        }
        if movement < 1e-9 {
            break;
        }
    }
    let mut seen = vec![false; r];
    for &a in &assignments {
        seen[a] = true;
    }
    let empty_clusters: Vec<usize> = (0..r).filter(|&c| !seen[c]).collect();
    if !empty_clusters.is_empty() {
        log::debug!("k-means left clusters {empty_clusters:?} empty");
    }
    Ok(KmeansResult {
        assignments,
        centroids,
        empty_clusters,
    })
}

fn sq_dist(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The normalized Laplacian of the phone affinity graph. Isolated phones
/// (zero degree) get a zero entry in D^{-1/2}.
pub fn phone_laplacian(segments: &Posteriorgram) -> (Array2<f64>, Vec<usize>) {
    let x = segments.rows.t(); // phones x segments
    let m = x.nrows();
    let mut affinity = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            let v = x.row(i).dot(&x.row(j));
            affinity[[i, j]] = v;
            affinity[[j, i]] = v;
        }
    }
    let degrees = affinity.sum_axis(Axis(1));
    let isolated: Vec<usize> = degrees
        .iter()
        .enumerate()
        .filter(|(_, &d)| d <= 0.0)
        .map(|(i, _)| i)
        .collect();
    let d_inv_sqrt: Array1<f64> = degrees.mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let mut l = Array2::<f64>::eye(m);
    for i in 0..m {
        for j in 0..m {
            l[[i, j]] -= d_inv_sqrt[i] * affinity[[i, j]] * d_inv_sqrt[j];
        }
    }
    (l, isolated)
}

/// Cluster the phone classes of a segment posteriorgram into R groups.
pub fn spectral_cluster(
    segments: &Posteriorgram,
    r: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let m = segments.num_classes();
    if r == 0 || r > m {
        return Err(Error::Parameter(format!(
            "cluster count {r} out of range for {m} phone classes"
        )));
    }
    let (l, isolated) = phone_laplacian(segments);
    let (_, vecs) = linalg::jacobi_eigen(&l.view());
    let mut y = vecs.slice(ndarray::s![.., 0..r]).to_owned();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let km = kmeans(&y.view(), r, seed)?;
    let mut assignment = ClusterAssignment {
        phone_to_cluster: km.assignments,
        num_clusters: r,
        empty_clusters: km.empty_clusters,
        isolated_phones: isolated,
    };
    resolve_isolated(&mut assignment);
    Ok(assignment)
}

/// An isolated phone gets its own cluster when one is free, otherwise it
/// joins the largest cluster.
fn resolve_isolated(assignment: &mut ClusterAssignment) {
    if assignment.isolated_phones.is_empty() {
        return;
    }
    let isolated = assignment.isolated_phones.clone();
    for phone in isolated {
        let mut counts = vec![0usize; assignment.num_clusters];
        for (p, &c) in assignment.phone_to_cluster.iter().enumerate() {
            if p != phone {
                counts[c] += 1;
            }
        }
        if let Some(free) = counts.iter().position(|&c| c == 0) {
            log::debug!("isolated phone {phone} gets free cluster {free}");
            assignment.phone_to_cluster[phone] = free;
        } else {
            let largest = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .expect("num_clusters >= 1");
            log::debug!("isolated phone {phone} merged into largest cluster {largest}");
            assignment.phone_to_cluster[phone] = largest;
        }
    }
    let mut seen = vec![false; assignment.num_clusters];
    for &c in &assignment.phone_to_cluster {
        seen[c] = true;
    }
    assignment.empty_clusters = (0..assignment.num_clusters).filter(|&c| !seen[c]).collect();
}

/// Label each segment with the cluster holding the largest share of its
/// posterior mass; ties go to the lowest cluster id.
pub fn label_segments(
    segments: &Posteriorgram,
    assignment: &ClusterAssignment,
) -> Result<Vec<usize>> {
    if segments.num_classes() != assignment.phone_to_cluster.len() {
        return Err(Error::Shape(format!(
            "posteriorgram has {} phone classes, assignment covers {}",
            segments.num_classes(),
            assignment.phone_to_cluster.len()
        )));
    }
    Ok(segments
        .rows
        .axis_iter(Axis(0))
        .map(|row| {
            let mut scores = vec![0.0f64; assignment.num_clusters];
            for (p, &v) in row.iter().enumerate() {
                scores[assignment.phone_to_cluster[p]] += v;
            }
            let mut best = 0usize;
            for c in 1..scores.len() {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Write "phone_index<TAB>cluster_id" lines.
pub fn write_assignment(assignment: &ClusterAssignment, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for (p, &c) in assignment.phone_to_cluster.iter().enumerate() {
        out.push_str(&format!("{p}\t{c}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
