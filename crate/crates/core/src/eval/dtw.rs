//! Dynamic time warping over cosine frame distances, normalized by the
//! warping-path length.

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// 1 − (a·b)/(‖a‖‖b‖). A zero-norm frame is at distance 1 from everything
/// except another zero-norm frame; identical frames are at distance 0.
pub fn cosine_distance(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    if a == b {
        return 0.0;
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == 0.0 && nb == 0.0 { 0.0 } else { 1.0 };
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    1.0 - cos
}

/// (cost, cells) pairs ordered by cost, then by path length.
fn lex_min(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Minimum accumulated cosine distance over all monotone alignments with
/// steps {(1,0),(0,1),(1,1)}, divided by the number of cells on the
/// optimal path. Ties in cost prefer the shorter path.
pub fn dtw_distance(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Input("empty sequence in dtw".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "frame dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let m = b.nrows();
    let mut prev = vec![(f64::INFINITY, u64::MAX); m];
    let mut curr = prev.clone();
    for i in 0..a.nrows() {
        for j in 0..m {
            let c = cosine_distance(&a.row(i), &b.row(j));
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, u64::MAX);
                if i > 0 {
                    best = lex_min(best, prev[j]);
                }
                if j > 0 {
                    best = lex_min(best, curr[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = lex_min(best, prev[j - 1]);
                }
                best
            };
            curr[j] = (best.0 + c, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let (cost, cells) = prev[m - 1];
    Ok(cost / cells as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Every monotone path through an n x m cost grid, reported as
    /// (cost, cells) of the lexicographic minimum.
    fn brute_force(costs: &Array2<f64>) -> (f64, u64) {
        fn walk(
            costs: &Array2<f64>,
            i: usize,
            j: usize,
            acc: f64,
            cells: u64,
            best: &mut (f64, u64),
        ) {
            let acc = acc + costs[[i, j]];
            let cells = cells + 1;
            if i + 1 == costs.nrows() && j + 1 == costs.ncols() {
                *best = lex_min(*best, (acc, cells));
                return;
            }
            if i + 1 < costs.nrows() {
                walk(costs, i + 1, j, acc, cells, best);
            }
            if j + 1 < costs.ncols() {
                walk(costs, i, j + 1, acc, cells, best);
            }
            if i + 1 < costs.nrows() && j + 1 < costs.ncols() {
                walk(costs, i + 1, j + 1, acc, cells, best);
            }
        }
        let mut best = (f64::INFINITY, u64::MAX);
        walk(costs, 0, 0, 0.0, 0, &mut best);
        best
    }

    #[test]
    fn identical_sequences_have_zero_distance() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [0.5, 0.1]];
        assert_eq!(dtw_distance(&a.view(), &a.view()).unwrap(), 0.0);
    }

    #[test]
    fn single_orthogonal_frames_give_one() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert_abs_diff_eq!(
            dtw_distance(&a.view(), &b.view()).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn matches_exhaustive_enumeration_on_small_case() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let costs = Array2::from_shape_fn((2, 3), |(i, j)| cosine_distance(&a.row(i), &b.row(j)));
        let (cost, cells) = brute_force(&costs);
        let expected = cost / cells as f64;
        assert_abs_diff_eq!(
            dtw_distance(&a.view(), &b.view()).unwrap(),
            expected,
            epsilon = 1e-15
        );
        assert_eq!(expected, 0.0);
    }

    #[test]
    fn matches_exhaustive_enumeration_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.gen_range(1..5);
            let m = rng.gen_range(1..5);
            let a = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((m, 3), |_| rng.gen_range(-1.0..1.0));
            let costs =
                Array2::from_shape_fn((n, m), |(i, j)| cosine_distance(&a.row(i), &b.row(j)));
            let (cost, cells) = brute_force(&costs);
            assert_abs_diff_eq!(
                dtw_distance(&a.view(), &b.view()).unwrap(),
                cost / cells as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((rng.gen_range(1..6), 2), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((rng.gen_range(1..6), 2), |_| rng.gen_range(-1.0..1.0));
            assert_abs_diff_eq!(
                dtw_distance(&a.view(), &b.view()).unwrap(),
                dtw_distance(&b.view(), &a.view()).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rejects_empty_sequences() {
        let a = Array2::<f64>::zeros((0, 2));
        let b = array![[1.0, 0.0]];
        assert!(matches!(
            dtw_distance(&a.view(), &b.view()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_norm_frame_rules() {
        let z = array![0.0, 0.0];
        let v = array![1.0, 0.0];
        assert_eq!(cosine_distance(&z.view(), &v.view()), 1.0);
        assert_eq!(cosine_distance(&z.view(), &z.view()), 0.0);
    }
}
