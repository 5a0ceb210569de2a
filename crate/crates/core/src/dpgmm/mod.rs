//! Dirichlet-process Gaussian mixture clustering of feature frames with the
//! parallelizable sub-cluster split/merge sampler. Each iteration runs a
//! restricted Gibbs sweep over the instantiated components, a sub-cluster
//! sweep maintaining a two-way split of every component, and one
//! Metropolis-Hastings split or merge proposal.
//!
//! All per-frame draws come from counter-keyed streams, so the worker count
//! never changes the sampled chain.

pub mod niw;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::features::FeatureArchive;
use crate::labeling::LabelSequence;
use crate::linalg;
use crate::rng::{derive_seed, frame_rng, sample_categorical_log, sample_dirichlet, Phase};

pub use niw::{NiwParams, SuffStats};

pub const DPGM1_MAGIC: &[u8; 6] = b"DPGM1\0";

const LN_2PI: f64 = 1.8378770664093453;

// Master-stream tags for the sequential draws of one iteration.
const TAG_WEIGHTS: u64 = 0x1001;
const TAG_PARAMS: u64 = 0x1002;
const TAG_SUBPARAMS: u64 = 0x1003;
const TAG_MOVE: u64 = 0x1004;

fn iteration_rng(seed: u64, iteration: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, iteration, tag]))
}

/// One Gaussian with a cached Cholesky factor for density evaluation.
#[derive(Debug, Clone)]
pub struct SubComponent {
    pub weight: f64,
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    chol: Array2<f64>,
}

impl SubComponent {
    fn new(weight: f64, mu: Array1<f64>, sigma: Array2<f64>, floor: f64) -> Self {
        let (sigma, chol) = factor_spd(sigma, floor);
        SubComponent {
            weight,
            mu,
            sigma,
            chol,
        }
    }

    pub fn log_density(&self, x: &ArrayView1<f64>) -> f64 {
        log_gaussian(&self.chol, &self.mu, x)
    }
}

/// Mixture component with its two maintained sub-clusters.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub count: usize,
    pub sub: [SubComponent; 2],
    pub sub_counts: [usize; 2],
    chol: Array2<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mu: Array1<f64>, sigma: Array2<f64>, floor: f64) -> Self {
        let (sigma, chol) = factor_spd(sigma, floor);
        let half = SubComponent {
            weight: 0.5,
            mu: mu.clone(),
            sigma: sigma.clone(),
            chol: chol.clone(),
        };
        GaussianComponent {
            weight,
            mu,
            sigma,
            count: 0,
            sub: [half.clone(), half],
            sub_counts: [0, 0],
            chol,
        }
    }

    pub fn log_density(&self, x: &ArrayView1<f64>) -> f64 {
        log_gaussian(&self.chol, &self.mu, x)
    }

    fn set_params(&mut self, mu: Array1<f64>, sigma: Array2<f64>, floor: f64) {
        let (sigma, chol) = factor_spd(sigma, floor);
        self.mu = mu;
        self.sigma = sigma;
        self.chol = chol;
    }

    fn set_sub_params(
        &mut self,
        side: usize,
        weight: f64,
        mu: Array1<f64>,
        sigma: Array2<f64>,
        floor: f64,
    ) {
        self.sub[side] = SubComponent::new(weight, mu, sigma, floor);
    }
}

/// Floor the eigenvalues and factor; a ridge retry covers rounding on the
/// floored reconstruction.
fn factor_spd(sigma: Array2<f64>, floor: f64) -> (Array2<f64>, Array2<f64>) {
    let d = sigma.nrows();
    let mean_diag = (0..d).map(|i| sigma[[i, i]].abs()).sum::<f64>() / d as f64;
    let eff = floor.max(1e-12 * mean_diag).max(f64::MIN_POSITIVE);
    let mut fixed = linalg::floor_eigenvalues(&sigma, eff);
    loop {
        if let Some(chol) = linalg::cholesky(&fixed.view()) {
            return (fixed, chol);
        }
        log::debug!("covariance factorization failed after flooring; adding ridge {eff:e}");
        for i in 0..d {
            fixed[[i, i]] += eff;
        }
    }
}

fn log_gaussian(chol: &Array2<f64>, mu: &Array1<f64>, x: &ArrayView1<f64>) -> f64 {
    let diff = x - mu;
    let (quad, logdet) = linalg::quad_form_and_logdet(&chol.view(), &diff.view());
    -0.5 * (mu.len() as f64 * LN_2PI + logdet + quad)
}

/// Split/merge bookkeeping over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveCounts {
    pub splits_proposed: usize,
    pub splits_accepted: usize,
    pub merges_proposed: usize,
    pub merges_accepted: usize,
}

#[derive(Debug, Clone)]
pub struct DpgmmConfig {
    pub alpha: f64,
    /// `None` derives the weakly informative default from the data.
    pub prior: Option<NiwParams>,
    pub iterations: usize,
    pub seed: u64,
}

impl DpgmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be >= 1".into()));
        }
        if let Some(p) = &self.prior {
            p.validate()?;
        }
        Ok(())
    }
}

/// Full sampler state: concentration, prior, components and the frame and
/// sub-cluster assignments.
#[derive(Debug, Clone)]
pub struct DpgmmState {
    pub alpha: f64,
    pub prior: NiwParams,
    pub variance_floor: f64,
    pub components: Vec<GaussianComponent>,
    pub z: Vec<usize>,
    pub z_tilde: Vec<u8>,
    pub seed: u64,
    pub moves: MoveCounts,
}

impl DpgmmState {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    fn recount(&mut self) {
        for c in self.components.iter_mut() {
            c.count = 0;
            c.sub_counts = [0, 0];
        }
        for (&zi, &ti) in self.z.iter().zip(&self.z_tilde) {
            self.components[zi].count += 1;
            self.components[zi].sub_counts[ti as usize] += 1;
        }
    }

    /// Drop empty components and remap assignments onto the survivors.
    fn prune_empty(&mut self) {
        if self.components.iter().all(|c| c.count > 0) {
            return;
        }
        let mut remap = vec![usize::MAX; self.components.len()];
        let mut kept = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.drain(..).enumerate() {
            if c.count > 0 {
                remap[i] = kept.len();
                kept.push(c);
            } else {
                log::debug!("deleting emptied component {i}");
            }
        }
        self.components = kept;
        for zi in self.z.iter_mut() {
            *zi = remap[*zi];
        }
    }
}

/// Flattened corpus view: all frames stacked in utterance order.
struct FrameTable {
    data: Array2<f64>,
}

impl FrameTable {
    fn from_archive(archive: &FeatureArchive) -> Result<FrameTable> {
        let d = archive
            .dim()
            .ok_or_else(|| Error::Input("empty feature archive".into()))?;
        let n = archive.total_frames();
        let mut data = Array2::<f64>::zeros((n, d));
        let mut at = 0usize;
        for m in archive {
            let t = m.num_frames();
            data.slice_mut(ndarray::s![at..at + t, ..])
                .assign(&m.frames);
            at += t;
        }
        Ok(FrameTable { data })
    }

    fn len(&self) -> usize {
        self.data.nrows()
    }

    fn rows_for(&self, idx: &[usize]) -> Array2<f64> {
        self.data.select(Axis(0), idx)
    }

    fn stats_for(&self, idx: &[usize]) -> SuffStats {
        if idx.is_empty() {
            return SuffStats::empty(self.data.ncols());
        }
        SuffStats::from_rows(&self.rows_for(idx).view())
    }
}

/// Weakly informative default prior: the data mean, the data covariance
/// scaled by the dimension, kappa 1 and nu D + 3.
pub fn default_prior(data: &ArrayView2<f64>) -> NiwParams {
    let d = data.ncols();
    let stats = SuffStats::from_rows(data);
    let n = stats.n.max(1) as f64;
    let cov = &stats.scatter / n;
    let floor = 1e-8 * (0..d).map(|i| cov[[i, i]]).sum::<f64>() / d as f64;
    let s = linalg::floor_eigenvalues(&(&cov * d as f64), floor.max(1e-10));
    NiwParams {
        m: stats.mean,
        s,
        kappa: 1.0,
        nu: d as f64 + 3.0,
    }
}

/// Eigenvalue floor applied to every sampled covariance.
pub fn variance_floor(data: &ArrayView2<f64>) -> f64 {
    let d = data.ncols();
    let stats = SuffStats::from_rows(data);
    let n = stats.n.max(1) as f64;
    let mean_var = (0..d).map(|i| stats.scatter[[i, i]] / n).sum::<f64>() / d as f64;
    1e-6 * mean_var
}

/// Start from a single component holding every frame, moments set from the
/// data, sub-labels uniform at random.
pub fn init_state(
    archive: &FeatureArchive,
    alpha: f64,
    prior: NiwParams,
    seed: u64,
) -> Result<DpgmmState> {
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    prior.validate()?;
    let table = FrameTable::from_archive(archive)?;
    init_state_table(&table, alpha, prior, seed)
}

fn init_state_table(
    table: &FrameTable,
    alpha: f64,
    prior: NiwParams,
    seed: u64,
) -> Result<DpgmmState> {
    let n = table.len();
    let d = table.data.ncols();
    if prior.dim() != d {
        return Err(Error::Shape(format!(
            "prior dimension {} does not match data dimension {d}",
            prior.dim()
        )));
    }
    let floor = variance_floor(&table.data.view());
    let stats = SuffStats::from_rows(&table.data.view());
    let cov = &stats.scatter / n as f64;
    let mut comp = GaussianComponent::new(n as f64 / (n as f64 + alpha), stats.mean, cov, floor);
    let z = vec![0usize; n];
    let z_tilde: Vec<u8> = (0..n)
        .into_par_iter()
        .map(|i| frame_rng(seed, 0, Phase::Init, i).gen_range(0..2u8))
        .collect();

    let sides = split_indices(&z, &z_tilde, 0);
    for (side, idx) in sides.iter().enumerate() {
        let s = table.stats_for(idx);
        let weight = (idx.len() as f64 + alpha / 2.0) / (n as f64 + alpha);
        let (mu, sigma) = if s.n > 0 {
            (s.mean.clone(), &s.scatter / s.n as f64)
        } else {
            (prior.m.clone(), prior.s.clone() / prior.nu)
        };
        comp.set_sub_params(side, weight, mu, sigma, floor);
    }
    comp.count = n;
    comp.sub_counts = [sides[0].len(), sides[1].len()];

    Ok(DpgmmState {
        alpha,
        prior,
        variance_floor: floor,
        components: vec![comp],
        z,
        z_tilde,
        seed,
        moves: MoveCounts::default(),
    })
}

fn group_indices(z: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &zi) in z.iter().enumerate() {
        groups[zi].push(i);
    }
    groups
}

fn split_indices(z: &[usize], z_tilde: &[u8], comp: usize) -> [Vec<usize>; 2] {
    let mut sides = [Vec::new(), Vec::new()];
    for (i, (&zi, &ti)) in z.iter().zip(z_tilde).enumerate() {
        if zi == comp {
            sides[ti as usize].push(i);
        }
    }
    sides
}

/// One restricted Gibbs sweep: weights from Dir(N_1..N_K, alpha), component
/// parameters from their NIW posteriors, then every frame reassigned among
/// the existing components. Emptied components are deleted afterwards.
pub fn restricted_gibbs_sweep(
    state: &mut DpgmmState,
    archive: &FeatureArchive,
    iteration: u64,
) -> Result<()> {
    let table = FrameTable::from_archive(archive)?;
    gibbs_sweep_table(state, &table, iteration);
    Ok(())
}

fn gibbs_sweep_table(state: &mut DpgmmState, table: &FrameTable, iteration: u64) {
    let k = state.components.len();

    let mut wrng = iteration_rng(state.seed, iteration, TAG_WEIGHTS);
    let mut alphas: Vec<f64> = state.components.iter().map(|c| c.count as f64).collect();
    alphas.push(state.alpha);
    let weights = sample_dirichlet(&mut wrng, &alphas);
    for (c, &w) in state.components.iter_mut().zip(&weights) {
        c.weight = w;
    }

    let mut prng = iteration_rng(state.seed, iteration, TAG_PARAMS);
    let groups = group_indices(&state.z, k);
    for (ki, idx) in groups.iter().enumerate() {
        let post = niw::posterior(&state.prior, &table.stats_for(idx));
        let (mu, sigma) = niw::sample_gaussian(&post, &mut prng);
        state.components[ki].set_params(mu, sigma, state.variance_floor);
    }

    let comps = &state.components;
    let seed = state.seed;
    let new_z: Vec<usize> = (0..table.len())
        .into_par_iter()
        .map(|i| {
            let x = table.data.row(i);
            let logw: Vec<f64> = comps
                .iter()
                .map(|c| c.weight.ln() + c.log_density(&x))
                .collect();
            sample_categorical_log(&mut frame_rng(seed, iteration, Phase::Assign, i), &logw)
        })
        .collect();
    state.z = new_z;
    state.recount();
    state.prune_empty();
}

/// One sub-cluster sweep: per component, sub-weights from
/// Dir(N_kl + alpha/2, N_kr + alpha/2), sub-parameters from their NIW
/// posteriors (the prior when a side is empty), then per-frame sub-labels.
pub fn sample_subclusters(
    state: &mut DpgmmState,
    archive: &FeatureArchive,
    iteration: u64,
) -> Result<()> {
    let table = FrameTable::from_archive(archive)?;
    subcluster_sweep_table(state, &table, iteration);
    Ok(())
}

fn sub_weight_alphas(n_l: usize, n_r: usize, alpha: f64) -> [f64; 2] {
    [n_l as f64 + 0.5 * alpha, n_r as f64 + 0.5 * alpha]
}

fn subcluster_sweep_table(state: &mut DpgmmState, table: &FrameTable, iteration: u64) {
    let k = state.components.len();
    let mut srng = iteration_rng(state.seed, iteration, TAG_SUBPARAMS);
    for ki in 0..k {
        let sides = split_indices(&state.z, &state.z_tilde, ki);
        let alphas = sub_weight_alphas(sides[0].len(), sides[1].len(), state.alpha);
        let w = sample_dirichlet(&mut srng, &alphas);
        for (side, idx) in sides.iter().enumerate() {
            let post = niw::posterior(&state.prior, &table.stats_for(idx));
            let (mu, sigma) = niw::sample_gaussian(&post, &mut srng);
            state.components[ki].set_sub_params(side, w[side], mu, sigma, state.variance_floor);
        }
    }

    let comps = &state.components;
    let seed = state.seed;
    let z = &state.z;
    let new_zt: Vec<u8> = (0..table.len())
        .into_par_iter()
        .map(|i| {
            let x = table.data.row(i);
            let c = &comps[z[i]];
            let logw = [
                c.sub[0].weight.ln() + c.sub[0].log_density(&x),
                c.sub[1].weight.ln() + c.sub[1].log_density(&x),
            ];
            sample_categorical_log(&mut frame_rng(seed, iteration, Phase::SubAssign, i), &logw)
                as u8
        })
        .collect();
    state.z_tilde = new_zt;
    state.recount();
}

/// Outcome of one split/merge proposal round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveOutcome {
    SplitAccepted(usize),
    MergeAccepted(usize, usize),
    Rejected,
}

/// Propose one split or merge move (coin flip) and accept it with
/// probability min{1, H}.
///
/// The Hastings ratio follows the sub-cluster split/merge construction the
/// sampler is built on: with f(Y) the NIW marginal likelihood of frame set
/// Y and N counts,
///   log H_split = log alpha + lnG(N_l) + log f(x_l) + lnG(N_r) + log f(x_r)
///                 - lnG(N) - log f(x)
///   log H_merge = -log H_split + lnG(alpha) - 2 lnG(alpha/2)
///                 - lnG(N + alpha) + lnG(N_l + alpha/2) + lnG(N_r + alpha/2)
/// where lnG is the log gamma function. A split whose sub-clusters do not
/// both hold frames is counted as rejected.
pub fn propose_split_merge(
    state: &mut DpgmmState,
    archive: &FeatureArchive,
    iteration: u64,
) -> Result<MoveOutcome> {
    let table = FrameTable::from_archive(archive)?;
    Ok(split_merge_round(state, &table, iteration))
}

fn split_merge_round(state: &mut DpgmmState, table: &FrameTable, iteration: u64) -> MoveOutcome {
    let mut mrng = iteration_rng(state.seed, iteration, TAG_MOVE);
    if mrng.gen_bool(0.5) {
        let c = mrng.gen_range(0..state.components.len());
        propose_split(state, table, iteration, c, &mut mrng)
    } else {
        propose_merge_random(state, table, &mut mrng)
    }
}

fn propose_split(
    state: &mut DpgmmState,
    table: &FrameTable,
    iteration: u64,
    c: usize,
    mrng: &mut ChaCha8Rng,
) -> MoveOutcome {
    state.moves.splits_proposed += 1;
    let sides = split_indices(&state.z, &state.z_tilde, c);
    let (n_l, n_r) = (sides[0].len(), sides[1].len());
    if n_l == 0 || n_r == 0 {
        return MoveOutcome::Rejected;
    }
    let stats_l = table.stats_for(&sides[0]);
    let stats_r = table.stats_for(&sides[1]);
    let stats_all = stats_l.merged(&stats_r);
    let log_h = state.alpha.ln()
        + ln_gamma(n_l as f64)
        + niw::marginal_log_likelihood(&state.prior, &stats_l)
        + ln_gamma(n_r as f64)
        + niw::marginal_log_likelihood(&state.prior, &stats_r)
        - ln_gamma(stats_all.n as f64)
        - niw::marginal_log_likelihood(&state.prior, &stats_all);
    if mrng.gen::<f64>().ln() >= log_h {
        return MoveOutcome::Rejected;
    }
    state.moves.splits_accepted += 1;
    apply_split(state, table, iteration, c, sides, [stats_l, stats_r], mrng);
    MoveOutcome::SplitAccepted(c)
}

fn propose_merge_random(
    state: &mut DpgmmState,
    table: &FrameTable,
    mrng: &mut ChaCha8Rng,
) -> MoveOutcome {
    state.moves.merges_proposed += 1;
    let k = state.components.len();
    if k < 2 {
        return MoveOutcome::Rejected;
    }
    let a = mrng.gen_range(0..k);
    let mut b = mrng.gen_range(0..k - 1);
    if b >= a {
        b += 1;
    }
    let (m, n) = (a.min(b), a.max(b));
    propose_merge(state, table, m, n, mrng)
}

fn propose_merge(
    state: &mut DpgmmState,
    table: &FrameTable,
    m: usize,
    n: usize,
    mrng: &mut ChaCha8Rng,
) -> MoveOutcome {
    let groups = group_indices(&state.z, state.components.len());
    let stats_m = table.stats_for(&groups[m]);
    let stats_n = table.stats_for(&groups[n]);
    let stats_all = stats_m.merged(&stats_n);
    let (n_m, n_n, n_all) = (stats_m.n as f64, stats_n.n as f64, stats_all.n as f64);
    let alpha = state.alpha;
    let log_h_split = alpha.ln()
        + ln_gamma(n_m)
        + niw::marginal_log_likelihood(&state.prior, &stats_m)
        + ln_gamma(n_n)
        + niw::marginal_log_likelihood(&state.prior, &stats_n)
        - ln_gamma(n_all)
        - niw::marginal_log_likelihood(&state.prior, &stats_all);
    let log_h =
        -log_h_split + ln_gamma(alpha) - 2.0 * ln_gamma(0.5 * alpha) - ln_gamma(n_all + alpha)
            + ln_gamma(n_m + 0.5 * alpha)
            + ln_gamma(n_n + 0.5 * alpha);
    if mrng.gen::<f64>().ln() >= log_h {
        return MoveOutcome::Rejected;
    }
    state.moves.merges_accepted += 1;
    apply_merge(state, m, n, &stats_all, mrng);
    MoveOutcome::MergeAccepted(m, n)
}

/// Replace component c by its two sub-clusters. Child weights scale the
/// parent weight by a Dirichlet draw over the sub-counts; child parameters
/// come from their NIW posteriors; child sub-labels restart uniformly.
fn apply_split(
    state: &mut DpgmmState,
    table: &FrameTable,
    iteration: u64,
    c: usize,
    sides: [Vec<usize>; 2],
    stats: [SuffStats; 2],
    mrng: &mut ChaCha8Rng,
) {
    let parent_weight = state.components[c].weight;
    let floor = state.variance_floor;
    let v = sample_dirichlet(mrng, &[stats[0].n as f64, stats[1].n as f64]);
    let new_index = state.components.len();

    let mut children: Vec<GaussianComponent> = Vec::with_capacity(2);
    for side in 0..2 {
        let post = niw::posterior(&state.prior, &stats[side]);
        let (mu, sigma) = niw::sample_gaussian(&post, mrng);
        let mut child = GaussianComponent::new(parent_weight * v[side], mu, sigma, floor);
        child.count = stats[side].n;
        children.push(child);
    }
    let right = children.pop().expect("two children");
    state.components[c] = children.pop().expect("two children");
    state.components.push(right);
    for &i in &sides[1] {
        state.z[i] = new_index;
    }
    for side_idx in sides.iter() {
        for &i in side_idx {
            state.z_tilde[i] = frame_rng(state.seed, iteration, Phase::Init, i).gen_range(0..2u8);
        }
    }
    for comp_index in [c, new_index] {
        let child_sides = split_indices(&state.z, &state.z_tilde, comp_index);
        let alphas = sub_weight_alphas(child_sides[0].len(), child_sides[1].len(), state.alpha);
        let w = sample_dirichlet(mrng, &alphas);
        for (side, idx) in child_sides.iter().enumerate() {
            let post = niw::posterior(&state.prior, &table.stats_for(idx));
            let (mu, sigma) = niw::sample_gaussian(&post, mrng);
            state.components[comp_index].set_sub_params(side, w[side], mu, sigma, floor);
        }
    }
    state.recount();
}

/// Merge components m and n into m: weights add, parameters come from the
/// pooled NIW posterior, and the old components become the sub-clusters so
/// a later split can undo the move.
fn apply_merge(
    state: &mut DpgmmState,
    m: usize,
    n: usize,
    stats_all: &SuffStats,
    mrng: &mut ChaCha8Rng,
) {
    let floor = state.variance_floor;
    let old_m = state.components[m].clone();
    let old_n = state.components[n].clone();
    let weight = old_m.weight + old_n.weight;
    let post = niw::posterior(&state.prior, stats_all);
    let (mu, sigma) = niw::sample_gaussian(&post, mrng);

    let mut merged = GaussianComponent::new(weight, mu, sigma, floor);
    let total = (old_m.weight + old_n.weight).max(f64::MIN_POSITIVE);
    merged.set_sub_params(0, old_m.weight / total, old_m.mu, old_m.sigma, floor);
    merged.set_sub_params(1, old_n.weight / total, old_n.mu, old_n.sigma, floor);
    state.components[m] = merged;
    state.components.remove(n);
    for (zi, ti) in state.z.iter_mut().zip(state.z_tilde.iter_mut()) {
        if *zi == m {
            *ti = 0;
        } else if *zi == n {
            *zi = m;
            *ti = 1;
        } else if *zi > n {
            *zi -= 1;
        }
    }
    state.recount();
}

/// Run the sampler: init, then per iteration one restricted sweep, one
/// sub-cluster sweep and one split/merge proposal; final labels by argmax
/// posterior.
pub fn run(
    archive: &FeatureArchive,
    config: &DpgmmConfig,
) -> Result<(DpgmmState, Vec<LabelSequence>)> {
    config.validate()?;
    let table = FrameTable::from_archive(archive)?;
    let prior = match &config.prior {
        Some(p) => p.clone(),
        None => default_prior(&table.data.view()),
    };
    let mut state = init_state_table(&table, config.alpha, prior, config.seed)?;
    for iteration in 1..=config.iterations as u64 {
        gibbs_sweep_table(&mut state, &table, iteration);
        subcluster_sweep_table(&mut state, &table, iteration);
        split_merge_round(&mut state, &table, iteration);
        if iteration % 10 == 0 {
            log::debug!(
                "iteration {iteration}: K={} moves={:?}",
                state.components.len(),
                state.moves
            );
        }
    }
    let labels = label_frames(&state, archive)?;
    Ok((state, labels))
}

/// Posterior component probabilities of one frame, computed in the log
/// domain so underflow cannot produce NaN.
pub fn posterior(state: &DpgmmState, frame: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if frame.len() != state.prior.dim() {
        return Err(Error::Shape(format!(
            "frame has dimension {}, model expects {}",
            frame.len(),
            state.prior.dim()
        )));
    }
    let logp: Vec<f64> = state
        .components
        .iter()
        .map(|c| c.weight.ln() + c.log_density(frame))
        .collect();
    Ok(normalize_log(&logp))
}

fn normalize_log(logp: &[f64]) -> Array1<f64> {
    let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Array1::from_elem(logp.len(), 1.0 / logp.len() as f64);
    }
    let mut p: Array1<f64> = logp.iter().map(|&l| (l - mx).exp()).collect();
    let s = p.sum();
    p /= s;
    p
}

/// Label every frame with its argmax-posterior component, ties to the
/// lowest index.
pub fn label_frames(state: &DpgmmState, archive: &FeatureArchive) -> Result<Vec<LabelSequence>> {
    if archive.dim().unwrap_or(0) != state.prior.dim() {
        return Err(Error::Shape(format!(
            "archive dimension {:?} does not match model dimension {}",
            archive.dim(),
            state.prior.dim()
        )));
    }
    let mut out = Vec::with_capacity(archive.len());
    for m in archive {
        let labels: Vec<usize> = (0..m.num_frames())
            .into_par_iter()
            .map(|t| {
                let x = m.frames.row(t);
                let mut best = 0usize;
                let mut best_lp = f64::NEG_INFINITY;
                for (k, c) in state.components.iter().enumerate() {
                    let lp = c.weight.ln() + c.log_density(&x);
                    if lp > best_lp {
                        best_lp = lp;
                        best = k;
                    }
                }
                best
            })
            .collect();
        out.push(LabelSequence::new(m.utterance_id.clone(), labels));
    }
    Ok(out)
}

/// Write a model dump: alpha, prior, then per component weight, mean and
/// covariance, all binary64 little-endian.
pub fn save_model(state: &DpgmmState, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(DPGM1_MAGIC).map_err(io_err)?;
    w.write_f64::<LittleEndian>(state.alpha).map_err(io_err)?;
    let d = state.prior.dim();
    w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
    for v in state.prior.m.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
    }
    for v in state.prior.s.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
    }
    w.write_f64::<LittleEndian>(state.prior.kappa)
        .map_err(io_err)?;
    w.write_f64::<LittleEndian>(state.prior.nu)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(state.components.len() as u32)
        .map_err(io_err)?;
    for c in &state.components {
        w.write_f64::<LittleEndian>(c.weight).map_err(io_err)?;
        for v in c.mu.iter() {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
        for v in c.sigma.iter() {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a model dump back into a state suitable for posterior evaluation
/// and labeling (assignments empty).
pub fn load_model(path: &Path) -> Result<DpgmmState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, 0, "truncated magic"))?;
    if &magic != DPGM1_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected DPGM1\\0"));
    }
    offset += 6;
    let f64_at = |r: &mut BufReader<File>, offset: &mut u64, what: &str| -> Result<f64> {
        let v = r
            .read_f64::<LittleEndian>()
            .map_err(|_| Error::format(path, *offset, format!("truncated {what}")))?;
        *offset += 8;
        Ok(v)
    };
    let alpha = f64_at(&mut r, &mut offset, "alpha")?;
    let d = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path, offset, "truncated dimension"))? as usize;
    offset += 4;
    if d == 0 {
        return Err(Error::format(path, offset - 4, "zero dimension"));
    }
    let read_vec =
        |r: &mut BufReader<File>, offset: &mut u64, len: usize, what: &str| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(f64_at(r, offset, what)?);
            }
            Ok(v)
        };
    let m = Array1::from(read_vec(&mut r, &mut offset, d, "prior mean")?);
    let s = Array2::from_shape_vec((d, d), read_vec(&mut r, &mut offset, d * d, "prior scale")?)
        .expect("shape matches");
    let kappa = f64_at(&mut r, &mut offset, "prior kappa")?;
    let nu = f64_at(&mut r, &mut offset, "prior nu")?;
    let prior = NiwParams { m, s, kappa, nu };
    prior.validate()?;
    let k = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path, offset, "truncated component count"))?
        as usize;
    offset += 4;
    let mut components = Vec::with_capacity(k);
    for ci in 0..k {
        let weight = f64_at(&mut r, &mut offset, &format!("component {ci} weight"))?;
        let mu = Array1::from(read_vec(&mut r, &mut offset, d, "component mean")?);
        let sigma = Array2::from_shape_vec(
            (d, d),
            read_vec(&mut r, &mut offset, d * d, "component covariance")?,
        )
        .expect("shape matches");
        components.push(GaussianComponent::new(weight, mu, sigma, 0.0));
    }
    Ok(DpgmmState {
        alpha,
        prior,
        variance_floor: 0.0,
        components,
        z: Vec::new(),
        z_tilde: Vec::new(),
        seed: 0,
        moves: MoveCounts::default(),
    })
}
