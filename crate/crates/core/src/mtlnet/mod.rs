//! Multi-task feed-forward network with one linear bottleneck layer in the
//! sigmoid shared stack and per-task softmax heads. Losses are weighted
//! summed cross-entropies; training is plain SGD.

pub mod train;

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureArchive, FeatureMatrix};
use crate::rng::derive_seed;

pub const MTLN1_MAGIC: &[u8; 6] = b"MTLN1\0";
/// Bottleneck width used when a config does not override it.
pub const DEFAULT_BOTTLENECK_DIM: usize = 40;

const TAG_SHARED: u64 = 0x6c61_7965;
const TAG_HEAD: u64 = 0x6865_6164;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out x in.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Uniform ±√(6/(fan_in+fan_out)) weights, zero biases.
    fn init(out_dim: usize, in_dim: usize, activation: Activation, seed: u64) -> Layer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-limit..limit));
        Layer {
            w,
            b: Array1::zeros(out_dim),
            activation,
        }
    }

    /// Rows of `a` are examples.
    fn forward_batch(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.w.t());
        z += &self.b;
        if self.activation == Activation::Sigmoid {
            z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub name: String,
    pub layer: Layer,
    /// Loss weight ω of this task.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlNetwork {
    pub shared: Vec<Layer>,
    /// Index of the linear bottleneck within the shared stack.
    pub bottleneck: usize,
    pub heads: Vec<TaskHead>,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    pub weight: f64,
}

impl MtlNetwork {
    /// Sigmoid shared stack with `shared_widths`, the layer at
    /// `bottleneck_index` linear, and one softmax head per task.
    pub fn new(
        input_dim: usize,
        shared_widths: &[usize],
        bottleneck_index: usize,
        tasks: &[TaskSpec],
        seed: u64,
    ) -> Result<MtlNetwork> {
        if input_dim == 0 || shared_widths.is_empty() || shared_widths.contains(&0) {
            return Err(Error::Config("empty layer in network shape".into()));
        }
        if bottleneck_index >= shared_widths.len() {
            return Err(Error::Config(format!(
                "bottleneck index {bottleneck_index} outside {} shared layers",
                shared_widths.len()
            )));
        }
        if tasks.is_empty() {
            return Err(Error::Config("network needs at least one task".into()));
        }
        let mut shared = Vec::with_capacity(shared_widths.len());
        let mut fan_in = input_dim;
        for (i, &width) in shared_widths.iter().enumerate() {
            let activation = if i == bottleneck_index {
                Activation::Linear
            } else {
                Activation::Sigmoid
            };
            shared.push(Layer::init(
                width,
                fan_in,
                activation,
                derive_seed(&[seed, TAG_SHARED, i as u64]),
            ));
            fan_in = width;
        }
        let mut heads = Vec::with_capacity(tasks.len());
        for (t, spec) in tasks.iter().enumerate() {
            if spec.classes == 0 {
                return Err(Error::Config(format!("task {} has no classes", spec.name)));
            }
            if !(spec.weight >= 0.0) {
                return Err(Error::Config(format!(
                    "task {} has invalid weight {}",
                    spec.name, spec.weight
                )));
            }
            heads.push(TaskHead {
                name: spec.name.clone(),
                layer: Layer::init(
                    spec.classes,
                    fan_in,
                    Activation::Linear,
                    derive_seed(&[seed, TAG_HEAD, 1000 + t as u64]),
                ),
                weight: spec.weight,
            });
        }
        let net = MtlNetwork {
            shared,
            bottleneck: bottleneck_index,
            heads,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let linear: Vec<usize> = self
            .shared
            .iter()
            .enumerate()
            .filter(|(_, l)| l.activation == Activation::Linear)
            .map(|(i, _)| i)
            .collect();
        if linear != [self.bottleneck] {
            return Err(Error::Config(format!(
                "expected exactly one linear shared layer at {}, found {linear:?}",
                self.bottleneck
            )));
        }
        let mut dim = self.input_dim();
        for l in &self.shared {
            if l.in_dim() != dim || l.b.len() != l.out_dim() {
                return Err(Error::Shape("shared layer dimensions disagree".into()));
            }
            dim = l.out_dim();
        }
        for h in &self.heads {
            if h.layer.in_dim() != dim || h.layer.b.len() != h.layer.out_dim() {
                return Err(Error::Shape(format!(
                    "head {} does not attach to the top shared layer",
                    h.name
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.shared[0].in_dim()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.shared[self.bottleneck].out_dim()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    /// Activations through the shared stack; index 0 is the input batch.
    fn shared_activations(&self, x: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.shared.len() + 1);
        acts.push(x.to_owned());
        for l in &self.shared {
            let a = l.forward_batch(&acts.last().expect("seeded with input").view());
            acts.push(a);
        }
        acts
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::Shape(format!(
                "input dim {dim} does not match network input {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Per-task softmax outputs and the bottleneck activation for one frame.
    pub fn forward(&self, x: &ArrayView1<f64>) -> Result<(Vec<Array1<f64>>, Array1<f64>)> {
        self.check_input(x.len())?;
        let batch = x.view().insert_axis(Axis(0));
        let acts = self.shared_activations(&batch);
        let top = acts.last().expect("non-empty stack");
        let probs = self
            .heads
            .iter()
            .map(|h| {
                let mut z = h.layer.forward_batch(&top.view());
                softmax_rows(&mut z);
                z.row(0).to_owned()
            })
            .collect();
        Ok((probs, acts[self.bottleneck + 1].row(0).to_owned()))
    }

    /// Softmax outputs of one task for a batch of frames.
    pub fn task_probs(&self, task: usize, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::Parameter(format!("task index {task} out of range")))?;
        let acts = self.shared_activations(inputs);
        let mut z = head
            .layer
            .forward_batch(&acts.last().expect("non-empty stack").view());
        softmax_rows(&mut z);
        Ok(z)
    }

    /// ω·Σₙ −ln p(labelₙ): the task's weighted summed cross-entropy.
    pub fn task_loss(
        &self,
        task: usize,
        inputs: &ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<f64> {
        let probs = self.task_probs(task, inputs)?;
        nll_sum(&probs.view(), labels, self.heads[task].weight)
    }

    /// Weighted summed cross-entropy and its gradients for one task batch.
    pub fn task_gradients(
        &self,
        task: usize,
        inputs: &ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(Gradients, f64)> {
        self.check_input(inputs.ncols())?;
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::Parameter(format!("task index {task} out of range")))?;
        let acts = self.shared_activations(inputs);
        let top = acts.last().expect("non-empty stack");
        let mut probs = head.layer.forward_batch(&top.view());
        softmax_rows(&mut probs);
        let loss = nll_sum(&probs.view(), labels, head.weight)?;
        // d(summed NLL)/d(logits) = softmax − onehot, scaled by ω
        let mut dlogits = probs;
        for (i, &y) in labels.iter().enumerate() {
            dlogits[[i, y]] -= 1.0;
        }
        dlogits *= head.weight;
        let head_grad = (dlogits.t().dot(top), dlogits.sum_axis(Axis(0)));
        let mut delta = dlogits.dot(&head.layer.w);
        let mut shared = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); self.shared.len()];
        for (l, layer) in self.shared.iter().enumerate().rev() {
            if layer.activation == Activation::Sigmoid {
                let a = &acts[l + 1];
                delta = delta * a * (1.0 - a);
            }
            shared[l] = (delta.t().dot(&acts[l]), delta.sum_axis(Axis(0)));
            if l > 0 {
                delta = delta.dot(&layer.w);
            }
        }
        Ok((
            Gradients {
                shared,
                head: head_grad,
            },
            loss,
        ))
    }

    /// One SGD step on a batch of one task: shared layers and that task's
    /// head move, every other head stays fixed. Returns the batch loss.
    pub fn apply_task_batch(
        &mut self,
        task: usize,
        inputs: &ArrayView2<f64>,
        labels: &[usize],
        learning_rate: f64,
    ) -> Result<f64> {
        let (grads, loss) = self.task_gradients(task, inputs, labels)?;
        self.step_shared(&grads.shared, learning_rate);
        self.step_head(task, &grads.head, learning_rate);
        Ok(loss)
    }

    pub(crate) fn step_shared(&mut self, grads: &[(Array2<f64>, Array1<f64>)], lr: f64) {
        for (layer, (gw, gb)) in self.shared.iter_mut().zip(grads) {
            layer.w.scaled_add(-lr, gw);
            layer.b.scaled_add(-lr, gb);
        }
    }

    pub(crate) fn step_head(&mut self, task: usize, grad: &(Array2<f64>, Array1<f64>), lr: f64) {
        let layer = &mut self.heads[task].layer;
        layer.w.scaled_add(-lr, &grad.0);
        layer.b.scaled_add(-lr, &grad.1);
    }

    /// Bottleneck activations for every utterance; ids, frame shift and
    /// speakers carry over.
    pub fn extract_bnf(&self, archive: &FeatureArchive) -> Result<FeatureArchive> {
        let mut out = FeatureArchive::new();
        for m in archive.iter() {
            self.check_input(m.dim())?;
            let mut a = m.frames.clone();
            for l in &self.shared[..=self.bottleneck] {
                a = l.forward_batch(&a.view());
            }
            let mut bnf = FeatureMatrix::new(m.utterance_id.clone(), a)?;
            bnf.frame_shift_ms = m.frame_shift_ms;
            bnf.speaker_id = m.speaker_id.clone();
            out.push(bnf)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MTLN1_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(self.input_dim() as u32)
            .map_err(io)?;
        w.write_u32::<LittleEndian>(self.shared.len() as u32)
            .map_err(io)?;
        w.write_u32::<LittleEndian>(self.bottleneck as u32)
            .map_err(io)?;
        for l in &self.shared {
            w.write_u32::<LittleEndian>(l.out_dim() as u32)
                .map_err(io)?;
        }
        w.write_u32::<LittleEndian>(self.heads.len() as u32)
            .map_err(io)?;
        for h in &self.heads {
            let name = h.name.as_bytes();
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name).map_err(io)?;
            w.write_u32::<LittleEndian>(h.layer.out_dim() as u32)
                .map_err(io)?;
            w.write_f64::<LittleEndian>(h.weight).map_err(io)?;
        }
        let mut dump = |l: &Layer| -> Result<()> {
            for v in l.w.iter() {
                w.write_f64::<LittleEndian>(*v).map_err(io)?;
            }
            for v in l.b.iter() {
                w.write_f64::<LittleEndian>(*v).map_err(io)?;
            }
            Ok(())
        };
        for l in &self.shared {
            dump(l)?;
        }
        for h in &self.heads {
            dump(&h.layer)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MtlNetwork> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::Cursor::new(bytes.as_slice());
        let fail =
            |r: &std::io::Cursor<&[u8]>, reason: &str| Error::format(path, r.position(), reason);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| fail(&r, "truncated header"))?;
        if &magic != MTLN1_MAGIC {
            return Err(fail(&r, "bad magic, expected MTLN1"));
        }
        let input_dim = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fail(&r, "truncated"))? as usize;
        let n_shared = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fail(&r, "truncated"))? as usize;
        let bottleneck = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fail(&r, "truncated"))? as usize;
        if n_shared == 0 || bottleneck >= n_shared {
            return Err(fail(&r, "bottleneck index outside shared stack"));
        }
        let mut widths = Vec::with_capacity(n_shared);
        for _ in 0..n_shared {
            widths.push(
                r.read_u32::<LittleEndian>()
                    .map_err(|_| fail(&r, "truncated"))? as usize,
            );
        }
        let n_heads = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fail(&r, "truncated"))? as usize;
        let mut head_meta = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let len = r
                .read_u32::<LittleEndian>()
                .map_err(|_| fail(&r, "truncated"))? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)
                .map_err(|_| fail(&r, "truncated name"))?;
            let name = String::from_utf8(buf).map_err(|_| fail(&r, "head name not UTF-8"))?;
            let classes = r
                .read_u32::<LittleEndian>()
                .map_err(|_| fail(&r, "truncated"))? as usize;
            let weight = r
                .read_f64::<LittleEndian>()
                .map_err(|_| fail(&r, "truncated"))?;
            head_meta.push((name, classes, weight));
        }
        let mut read_layer =
            |out_dim: usize, in_dim: usize, activation: Activation| -> Result<Layer> {
                let mut w = Array2::zeros((out_dim, in_dim));
                for v in w.iter_mut() {
                    *v = r
                        .read_f64::<LittleEndian>()
                        .map_err(|_| Error::format(path, 0, "truncated parameters"))?;
                }
                let mut b = Array1::zeros(out_dim);
                for v in b.iter_mut() {
                    *v = r
                        .read_f64::<LittleEndian>()
                        .map_err(|_| Error::format(path, 0, "truncated parameters"))?;
                }
                Ok(Layer { w, b, activation })
            };
        let mut shared = Vec::with_capacity(n_shared);
        let mut fan_in = input_dim;
        for (i, &width) in widths.iter().enumerate() {
            let activation = if i == bottleneck {
                Activation::Linear
            } else {
                Activation::Sigmoid
            };
            shared.push(read_layer(width, fan_in, activation)?);
            fan_in = width;
        }
        let mut heads = Vec::with_capacity(n_heads);
        for (name, classes, weight) in head_meta {
            heads.push(TaskHead {
                name,
                layer: read_layer(classes, fan_in, Activation::Linear)?,
                weight,
            });
        }
        let net = MtlNetwork {
            shared,
            bottleneck,
            heads,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Per-layer weight and bias gradients of one task batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub shared: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: (Array2<f64>, Array1<f64>),
}

/// In-place row-wise softmax with max shift.
pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn nll_sum(probs: &ArrayView2<f64>, labels: &[usize], weight: f64) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    for (row, &y) in probs.axis_iter(Axis(0)).zip(labels.iter()) {
        if y >= row.len() {
            return Err(Error::Bounds(format!(
                "label {y} outside {}-way output",
                row.len()
            )));
        }
        loss -= row[y].ln();
    }
    Ok(weight * loss)
}
