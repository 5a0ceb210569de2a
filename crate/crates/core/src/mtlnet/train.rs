//! SGD training loops: multi-task round-robin batching, learning-rate
//! halving on a held-out split, and the adversarial speaker variant.

use std::collections::VecDeque;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mtlnet::MtlNetwork;
use crate::rng::derive_seed;

const TAG_EPOCH: u64 = 0x6570_6f63;

/// Frames of one task. Utterance ids drive the cross-validation split, so
/// frames of an utterance never straddle it.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub utterances: Vec<String>,
}

impl TaskData {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.nrows() == 0 {
            return Err(Error::Config(format!("task {} has no frames", self.name)));
        }
        if self.labels.len() != self.inputs.nrows() || self.utterances.len() != self.inputs.nrows()
        {
            return Err(Error::Alignment(format!(
                "task {}: {} frames, {} labels, {} utterance tags",
                self.name,
                self.inputs.nrows(),
                self.labels.len(),
                self.utterances.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Held-out loss must improve by at least this much per epoch, else the
    /// learning rate halves.
    pub improvement_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 20,
            improvement_threshold: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Summed weighted training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Summed weighted held-out loss per epoch; empty without a CV split.
    pub cv_loss: Vec<f64>,
    pub final_learning_rate: f64,
    pub halvings: usize,
}

/// FNV-1a over the utterance id, reduced to a decile.
fn utterance_bucket(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h % 10
}

/// Frames of utterances hashing into the last decile are held out.
fn split_rows(utterances: &[String]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut cv = Vec::new();
    for (i, utt) in utterances.iter().enumerate() {
        if utterance_bucket(utt) == 9 {
            cv.push(i);
        } else {
            train.push(i);
        }
    }
    (train, cv)
}

/// Shuffled batches of one task for one epoch, drawn without replacement.
fn epoch_batches(
    rows: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    task_ordinal: usize,
) -> VecDeque<Vec<usize>> {
    let mut order = rows.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        TAG_EPOCH,
        epoch as u64,
        task_ordinal as u64,
    ]));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn gather(inputs: &Array2<f64>, labels: &[usize], rows: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let x = inputs.select(Axis(0), rows);
    let y = rows.iter().map(|&i| labels[i]).collect();
    (x, y)
}

/// Multi-task SGD: round-robin over tasks, each batch updating the shared
/// stack and its own head only. Deterministic given the seed.
pub fn train_mtl(
    net: &mut MtlNetwork,
    tasks: &[TaskData],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    let mut heads = Vec::with_capacity(tasks.len());
    for task in tasks {
        task.validate()?;
        if task.inputs.ncols() != net.input_dim() {
            return Err(Error::Shape(format!(
                "task {} has dim {}, network expects {}",
                task.name,
                task.inputs.ncols(),
                net.input_dim()
            )));
        }
        let head = net
            .head_index(&task.name)
            .ok_or_else(|| Error::Metadata(format!("no head named {}", task.name)))?;
        if heads.contains(&head) {
            return Err(Error::Config(format!(
                "two datasets target head {}",
                task.name
            )));
        }
        heads.push(head);
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> =
        tasks.iter().map(|t| split_rows(&t.utterances)).collect();
    for (task, (train, _)) in tasks.iter().zip(splits.iter()) {
        if train.is_empty() {
            return Err(Error::Config(format!(
                "every frame of task {} fell into the held-out split",
                task.name
            )));
        }
    }
    let has_cv = splits.iter().any(|(_, cv)| !cv.is_empty());
    if !has_cv {
        log::debug!("no held-out frames; learning rate stays fixed");
    }

    let mut report = TrainReport {
        final_learning_rate: config.learning_rate,
        ..TrainReport::default()
    };
    let mut lr = config.learning_rate;
    let mut best_cv = f64::INFINITY;
    for epoch in 0..config.epochs {
        let mut queues: Vec<VecDeque<Vec<usize>>> = splits
            .iter()
            .enumerate()
            .map(|(t, (train, _))| epoch_batches(train, config.batch_size, config.seed, epoch, t))
            .collect();
        let mut epoch_loss = 0.0;
        loop {
            let mut drew = false;
            for (t, queue) in queues.iter_mut().enumerate() {
                let Some(batch) = queue.pop_front() else {
                    continue;
                };
                drew = true;
                let (x, y) = gather(&tasks[t].inputs, &tasks[t].labels, &batch);
                epoch_loss += net.apply_task_batch(heads[t], &x.view(), &y, lr)?;
            }
            if !drew {
                break;
            }
        }
        report.train_loss.push(epoch_loss);
        if has_cv {
            let mut cv_total = 0.0;
            for (t, (_, cv)) in splits.iter().enumerate() {
                if cv.is_empty() {
                    continue;
                }
                let (x, y) = gather(&tasks[t].inputs, &tasks[t].labels, cv);
                cv_total += net.task_loss(heads[t], &x.view(), &y)?;
            }
            report.cv_loss.push(cv_total);
            if best_cv - cv_total < config.improvement_threshold {
                lr /= 2.0;
                report.halvings += 1;
                log::debug!("epoch {epoch}: no improvement, rate now {lr}");
            }
            best_cv = best_cv.min(cv_total);
        }
        report.epochs_run = epoch + 1;
    }
    report.final_learning_rate = lr;
    Ok(report)
}

/// Frames carrying both a subword label and a speaker label.
#[derive(Debug, Clone)]
pub struct AdversarialData {
    pub inputs: Array2<f64>,
    pub subword_labels: Vec<usize>,
    pub speaker_labels: Vec<usize>,
    pub utterances: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AdversarialConfig {
    /// Weight of the reversed speaker gradient in the shared update.
    pub lambda: f64,
    pub subword_head: usize,
    pub speaker_head: usize,
}

/// Adversarial training: both heads descend their own losses; the shared
/// stack descends the subword gradient minus λ times the speaker gradient.
/// Halving follows the held-out subword loss. With λ = 0 the shared and
/// subword-head trajectories match train_mtl on the subword task alone.
pub fn train_adversarial(
    net: &mut MtlNetwork,
    data: &AdversarialData,
    adv: &AdversarialConfig,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if !(adv.lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "adversarial weight {} must be non-negative",
            adv.lambda
        )));
    }
    if adv.subword_head == adv.speaker_head
        || adv.subword_head >= net.heads.len()
        || adv.speaker_head >= net.heads.len()
    {
        return Err(Error::Config(format!(
            "head indices {} and {} invalid for {} heads",
            adv.subword_head,
            adv.speaker_head,
            net.heads.len()
        )));
    }
    let n = data.inputs.nrows();
    if n == 0 {
        return Err(Error::Config("no adversarial training frames".into()));
    }
    if data.speaker_labels.len() != n {
        return Err(Error::Metadata(format!(
            "{} frames but {} speaker labels",
            n,
            data.speaker_labels.len()
        )));
    }
    if data.subword_labels.len() != n || data.utterances.len() != n {
        return Err(Error::Alignment(format!(
            "{} frames, {} subword labels, {} utterance tags",
            n,
            data.subword_labels.len(),
            data.utterances.len()
        )));
    }
    let (train, cv) = split_rows(&data.utterances);
    if train.is_empty() {
        return Err(Error::Config(
            "every frame fell into the held-out split".into(),
        ));
    }
    if cv.is_empty() {
        log::debug!("no held-out frames; learning rate stays fixed");
    }

    let mut report = TrainReport {
        final_learning_rate: config.learning_rate,
        ..TrainReport::default()
    };
    let mut lr = config.learning_rate;
    let mut best_cv = f64::INFINITY;
    for epoch in 0..config.epochs {
        let mut queue = epoch_batches(&train, config.batch_size, config.seed, epoch, 0);
        let mut epoch_loss = 0.0;
        while let Some(batch) = queue.pop_front() {
            let (x, yp) = gather(&data.inputs, &data.subword_labels, &batch);
            let ys: Vec<usize> = batch.iter().map(|&i| data.speaker_labels[i]).collect();
            let (gp, loss_p) = net.task_gradients(adv.subword_head, &x.view(), &yp)?;
            let (gs, _) = net.task_gradients(adv.speaker_head, &x.view(), &ys)?;
            let combined: Vec<_> = gp
                .shared
                .iter()
                .zip(gs.shared.iter())
                .map(|((wp, bp), (ws, bs))| (wp - &(adv.lambda * ws), bp - &(adv.lambda * bs)))
                .collect();
            net.step_shared(&combined, lr);
            net.step_head(adv.subword_head, &gp.head, lr);
            net.step_head(adv.speaker_head, &gs.head, lr);
            epoch_loss += loss_p;
        }
        report.train_loss.push(epoch_loss);
        if !cv.is_empty() {
            let (x, yp) = gather(&data.inputs, &data.subword_labels, &cv);
            let cv_total = net.task_loss(adv.subword_head, &x.view(), &yp)?;
            report.cv_loss.push(cv_total);
            if best_cv - cv_total < config.improvement_threshold {
                lr /= 2.0;
                report.halvings += 1;
            }
            best_cv = best_cv.min(cv_total);
        }
        report.epochs_run = epoch + 1;
    }
    report.final_learning_rate = lr;
    Ok(report)
}
