//! Student head, optimizer, and the distillation loop.
//!
//! The student is a small trainable head (affine, or affine-ReLU-affine) on
//! top of fixed raw inputs; its outputs are l2-normalized into embedding
//! space. Each training batch is mixed `r_iters` times; every round draws a
//! fresh coefficient and partner assignment, labels the joint batch from
//! teacher similarities, and scores the student's joint similarities with
//! the quantized-AP loss. The batch gradient is the average over rounds, and
//! one Adam step is taken per batch with decoupled weight decay and an
//! exponentially decaying learning rate.
//!
//! Teacher embeddings are extracted exactly once per training sample before
//! the first epoch; epochs reuse the cached matrix, keeping the teacher
//! query budget at the size of the training set.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::ap_loss::{ApLossConfig, BackwardInputs, GradMode, ap_loss_backward, ap_loss_forward};
use crate::config::{HeadConfig, RunConfig};
use crate::embed::{EmbeddingMatrix, Role};
use crate::error::{Error, Result};
use crate::labeling::{build_label_matrix, mixup_labelling, similarity_labelling};
use crate::mixup::{augment_pair, sample_lambda};
use crate::world::TeacherSource;

/// Learning rate after `epoch` completed epochs: `base * exp(-0.01 epoch)`.
///
/// The first epoch trains at `base` (epoch index 0).
pub fn lr_at_epoch(base: f64, epoch: usize) -> f64 {
    base * (-0.01 * epoch as f64).exp()
}

#[derive(Debug, Clone, PartialEq)]
struct LinearLayer {
    /// `out x in`.
    weight: DMatrix<f64>,
    /// `out x 1`, added to every column.
    bias: DMatrix<f64>,
}

impl LinearLayer {
    fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = DMatrix::from_fn(output, input, |_, _| rng.random_range(-limit..limit));
        Self {
            weight,
            bias: DMatrix::zeros(output, 1),
        }
    }

    fn apply(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.weight * input;
        let bias = self.bias.column(0);
        for mut column in out.column_iter_mut() {
            column += bias;
        }
        out
    }
}

/// Trainable map from raw student inputs to pre-normalization embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentHead {
    layers: Vec<LinearLayer>,
    input_dim: usize,
    output_dim: usize,
}

/// Activations retained by [`StudentHead::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    /// Pre-normalization outputs, `output_dim x n`.
    pub prenorm: DMatrix<f64>,
    layer_inputs: Vec<DMatrix<f64>>,
    hidden_preacts: Vec<DMatrix<f64>>,
}

impl StudentHead {
    /// Single affine layer, Xavier-uniform weights, zero bias.
    pub fn linear<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![LinearLayer::xavier(input_dim, output_dim, rng)],
            input_dim,
            output_dim,
        }
    }

    /// Two affine layers with a ReLU between them.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: vec![
                LinearLayer::xavier(input_dim, hidden, rng),
                LinearLayer::xavier(hidden, output_dim, rng),
            ],
            input_dim,
            output_dim,
        }
    }

    pub fn from_config<R: Rng + ?Sized>(
        head: &HeadConfig,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        match *head {
            HeadConfig::Linear => Self::linear(input_dim, output_dim, rng),
            HeadConfig::Mlp { hidden } => Self::mlp(input_dim, hidden, output_dim, rng),
        }
    }

    /// Rebuilds a head from stored parameter tensors, alternating weight
    /// and bias per layer (2 tensors: affine head; 4: affine-ReLU-affine).
    pub fn from_tensors(tensors: Vec<DMatrix<f64>>) -> Result<Self> {
        if tensors.len() != 2 && tensors.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: format!("a head has 2 or 4 parameter tensors, got {}", tensors.len()),
            });
        }
        let mut layers = Vec::with_capacity(tensors.len() / 2);
        let mut expected_input: Option<usize> = None;
        let mut tensors = tensors.into_iter();
        while let (Some(weight), Some(bias)) = (tensors.next(), tensors.next()) {
            if bias.ncols() != 1 || bias.nrows() != weight.nrows() {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "bias {:?} does not match weight {:?}",
                        bias.shape(),
                        weight.shape()
                    ),
                });
            }
            if let Some(expected) = expected_input
                && weight.ncols() != expected
            {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "layer expects {expected} inputs but weight is {:?}",
                        weight.shape()
                    ),
                });
            }
            expected_input = Some(weight.nrows());
            layers.push(LinearLayer { weight, bias });
        }
        let input_dim = layers[0].weight.ncols();
        let output_dim = layers[layers.len() - 1].weight.nrows();
        Ok(Self {
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Number of affine layers (1 or 2).
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Maps raw inputs (`input_dim x n`) to pre-normalization outputs,
    /// retaining per-layer activations.
    pub fn forward(&self, raw: &DMatrix<f64>) -> Result<HeadForward> {
        if raw.nrows() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: raw.nrows(),
            });
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_preacts = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut activation = raw.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(activation.clone());
            let preact = layer.apply(&activation);
            if i + 1 < self.layers.len() {
                activation = preact.map(|v| v.max(0.0));
                hidden_preacts.push(preact);
            } else {
                activation = preact;
            }
        }
        Ok(HeadForward {
            prenorm: activation,
            layer_inputs,
            hidden_preacts,
        })
    }

    /// Forward pass plus l2 normalization: the student's embeddings.
    pub fn embed(&self, raw: &DMatrix<f64>) -> Result<EmbeddingMatrix> {
        let forward = self.forward(raw)?;
        EmbeddingMatrix::normalize_columns(forward.prenorm, Role::Student)
    }

    /// Gradients of every parameter given `dL/dprenorm`, in
    /// [`StudentHead::parameters`] order.
    pub fn backward(
        &self,
        forward: &HeadForward,
        grad_prenorm: &DMatrix<f64>,
    ) -> Result<Vec<DMatrix<f64>>> {
        if grad_prenorm.nrows() != self.output_dim
            || grad_prenorm.ncols() != forward.prenorm.ncols()
        {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "upstream gradient is {}x{}, expected {}x{}",
                    grad_prenorm.nrows(),
                    grad_prenorm.ncols(),
                    self.output_dim,
                    forward.prenorm.ncols()
                ),
            });
        }
        let mut grads = vec![DMatrix::zeros(0, 0); self.layers.len() * 2];
        let mut delta = grad_prenorm.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &forward.layer_inputs[i];
            let grad_w = &delta * input.transpose();
            let ones = DMatrix::from_element(delta.ncols(), 1, 1.0);
            let grad_b = &delta * ones;
            grads[2 * i] = grad_w;
            grads[2 * i + 1] = grad_b;
            if i > 0 {
                let mut upstream = self.layers[i].weight.tr_mul(&delta);
                upstream.zip_apply(&forward.hidden_preacts[i - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = upstream;
            }
        }
        Ok(grads)
    }

    /// Parameter tensors in a fixed order: weight then bias, layer by layer.
    pub fn parameters(&self) -> Vec<&DMatrix<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Replaces all parameters; shapes must match exactly.
    pub fn set_parameters(&mut self, tensors: &[DMatrix<f64>]) -> Result<()> {
        let current = self.parameters();
        if tensors.len() != current.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "{} tensors provided, head has {}",
                    tensors.len(),
                    current.len()
                ),
            });
        }
        for (have, want) in current.iter().zip(tensors) {
            if have.shape() != want.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("tensor {:?} replaced by {:?}", have.shape(), want.shape()),
                });
            }
        }
        for (param, tensor) in self.parameters_mut().into_iter().zip(tensors) {
            param.copy_from(tensor);
        }
        Ok(())
    }

    /// Clones the current parameters, tagged with the (1-based) epoch they
    /// were taken after.
    pub fn snapshot(&self, epoch: usize) -> WeightSnapshot {
        WeightSnapshot {
            epoch,
            tensors: self.parameters().into_iter().cloned().collect(),
        }
    }
}

/// Parameters captured after a given epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub epoch: usize,
    pub tensors: Vec<DMatrix<f64>>,
}

/// Element-wise mean of the snapshots' parameters.
pub fn weight_average(snapshots: &[WeightSnapshot]) -> Result<Vec<DMatrix<f64>>> {
    let Some(first) = snapshots.first() else {
        return Err(Error::EmptyInput {
            context: "weight averaging needs at least one snapshot",
        });
    };
    let mut sums = first.tensors.clone();
    for snap in &snapshots[1..] {
        if snap.tensors.len() != sums.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "snapshot at epoch {} has {} tensors, expected {}",
                    snap.epoch,
                    snap.tensors.len(),
                    sums.len()
                ),
            });
        }
        for (sum, tensor) in sums.iter_mut().zip(&snap.tensors) {
            if sum.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "snapshot at epoch {} holds a {:?} tensor, expected {:?}",
                        snap.epoch,
                        tensor.shape(),
                        sum.shape()
                    ),
                });
            }
            *sum += tensor;
        }
    }
    let scale = 1.0 / snapshots.len() as f64;
    for sum in &mut sums {
        *sum *= scale;
    }
    Ok(sums)
}

/// Adam hyper-parameters. Weight decay is decoupled: applied directly to
/// the parameters before the adaptive update, never entering the moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state over a head's parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new(head: &StudentHead, config: AdamConfig) -> Self {
        let zeros: Vec<DMatrix<f64>> = head
            .parameters()
            .into_iter()
            .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
            .collect();
        Self {
            config,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over all parameters with bias-corrected moments.
    pub fn step(&mut self, head: &mut StudentHead, grads: &[DMatrix<f64>], lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::NonFinite {
                context: "learning rate",
            });
        }
        let params = head.parameters_mut();
        if grads.len() != params.len() || params.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "{} gradients for {} parameters ({} moment slots)",
                    grads.len(),
                    params.len(),
                    self.first.len()
                ),
            });
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.steps as i32);
        let correction2 = 1.0 - beta2.powi(self.steps as i32);
        for (((param, grad), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "gradient {:?} for parameter {:?}",
                        grad.shape(),
                        param.shape()
                    ),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: "parameter gradient",
                });
            }
            if weight_decay > 0.0 {
                *param *= 1.0 - lr * weight_decay;
            }
            for ((p, &g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Settings of the per-batch loss computation.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub tau: f64,
    pub alpha: f64,
    pub r_iters: usize,
    pub loss_config: ApLossConfig,
    /// When false, batches are scored once without virtual samples.
    pub augment: bool,
    /// When false, virtual samples keep only their similarity labels.
    pub mixup_labels: bool,
    pub mode: GradMode,
}

impl LossSettings {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            tau: config.tau,
            alpha: config.alpha,
            r_iters: config.r_iters,
            loss_config: ApLossConfig::new(config.bins)?,
            augment: !config.no_aug,
            mixup_labels: !config.no_ml,
            mode: if config.all_grad {
                GradMode::AllGrad
            } else {
                GradMode::StopGrad
            },
        })
    }
}

/// Loss and gradient of one batch, averaged over the mixing rounds.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    /// Mean of the per-round losses.
    pub loss: f64,
    /// One entry per mixing round (a single entry without augmentation).
    pub per_iteration: Vec<f64>,
    /// Side length of the similarity matrices each round scored.
    pub similarity_sizes: Vec<usize>,
    /// `dL/d(pre-normalization outputs)` of the original columns, averaged
    /// over rounds; `output_dim x batch`.
    pub grad_prenorm: DMatrix<f64>,
}

/// Scores one batch: `r_iters` independent mixing rounds, each labelled from
/// the teacher and scored on the student, gradients averaged.
///
/// `student` holds the normalized embeddings of the batch's original
/// samples and `prenorm` the matching pre-normalization head outputs.
/// Returns [`Error::AllQueriesEmpty`] if any round produces no positive
/// pair; callers treat that as a skipped batch.
pub fn batch_loss<R: Rng + ?Sized>(
    teacher_batch: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
    prenorm: &DMatrix<f64>,
    settings: &LossSettings,
    rng: &mut R,
) -> Result<BatchEvaluation> {
    let b = teacher_batch.len();
    if student.len() != b {
        return Err(Error::LengthMismatch {
            left: b,
            right: student.len(),
            context: "teacher batch vs student batch",
        });
    }
    if prenorm.ncols() != b {
        return Err(Error::LengthMismatch {
            left: b,
            right: prenorm.ncols(),
            context: "batch vs pre-normalization columns",
        });
    }

    let rounds = if settings.augment {
        settings.r_iters
    } else {
        1
    };
    let mut per_iteration = Vec::with_capacity(rounds);
    let mut similarity_sizes = Vec::with_capacity(rounds);
    let mut grad_acc = DMatrix::zeros(prenorm.nrows(), b);

    for _ in 0..rounds {
        let (loss, grad) = if settings.augment {
            let lambda = sample_lambda(settings.alpha, rng)?;
            let mixed = augment_pair(teacher_batch, student, lambda, rng)?;
            let teacher_sim = mixed.teacher.similarity();
            let mut sets = similarity_labelling(&teacher_sim, settings.tau)?;
            if settings.mixup_labels {
                sets = mixup_labelling(&sets, &mixed.record)?;
            }
            let labels = build_label_matrix(&sets)?;
            let student_sim = mixed.student.similarity();
            similarity_sizes.push(student_sim.len());
            let forward = ap_loss_forward(&student_sim, &labels, &settings.loss_config)?;
            let grads = ap_loss_backward(
                &forward,
                &BackwardInputs {
                    similarity: &student_sim,
                    labels: &labels,
                    student: &mixed.student,
                    prenorm,
                    mix: Some(&mixed.record),
                    mode: settings.mode,
                },
            )?;
            (forward.loss(), grads.embeddings.columns(0, b).clone_owned())
        } else {
            let teacher_sim = teacher_batch.similarity();
            let sets = similarity_labelling(&teacher_sim, settings.tau)?;
            let labels = build_label_matrix(&sets)?;
            let student_sim = student.similarity();
            similarity_sizes.push(student_sim.len());
            let forward = ap_loss_forward(&student_sim, &labels, &settings.loss_config)?;
            let grads = ap_loss_backward(
                &forward,
                &BackwardInputs {
                    similarity: &student_sim,
                    labels: &labels,
                    student,
                    prenorm,
                    mix: None,
                    mode: settings.mode,
                },
            )?;
            (forward.loss(), grads.embeddings)
        };
        per_iteration.push(loss);
        grad_acc += grad;
    }

    let scale = 1.0 / rounds as f64;
    grad_acc *= scale;
    Ok(BatchEvaluation {
        loss: per_iteration.iter().sum::<f64>() * scale,
        per_iteration,
        similarity_sizes,
        grad_prenorm: grad_acc,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean batch loss over the epoch's scored batches; NaN if every batch
    /// was skipped.
    pub loss: f64,
    pub lr: f64,
    /// Cumulative distinct teacher embeddings extracted so far.
    pub teacher_queries: usize,
    pub skipped_batches: usize,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub snapshots: Vec<WeightSnapshot>,
    /// Head with snapshot-averaged parameters.
    pub head: StudentHead,
    /// Distinct teacher embeddings extracted over the whole run.
    pub teacher_queries: usize,
}

/// Runs the full distillation recipe.
///
/// `student_raw` holds one raw input column per training sample, aligned
/// with the teacher's indexing. When `config.d_size` is set, only the first
/// `d_size` samples are used.
pub fn train(
    config: &RunConfig,
    teacher: &mut dyn TeacherSource,
    student_raw: &DMatrix<f64>,
) -> Result<TrainReport> {
    config.validate()?;
    if teacher.len() != student_raw.ncols() {
        return Err(Error::LengthMismatch {
            left: teacher.len(),
            right: student_raw.ncols(),
            context: "teacher samples vs raw student inputs",
        });
    }
    let available = student_raw.ncols();
    let n = match config.d_size {
        Some(d) => {
            if d > available {
                return Err(Error::InvalidConfig(format!(
                    "d_size {d} exceeds the {available} available training samples"
                )));
            }
            d
        }
        None => available,
    };
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 training samples, have {n}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut head = StudentHead::from_config(
        &config.head,
        student_raw.nrows(),
        config.embed_dim,
        &mut rng,
    );
    let mut adam = Adam::new(
        &head,
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let settings = LossSettings::from_config(config)?;

    // The teacher is consulted exactly once per training sample, up front.
    let mut teacher_columns = DMatrix::zeros(teacher.dim(), n);
    for i in 0..n {
        let column = teacher.fetch(i)?;
        if column.len() != teacher.dim() {
            return Err(Error::DimensionMismatch {
                expected: teacher.dim(),
                got: column.len(),
            });
        }
        teacher_columns.set_column(i, &column);
    }
    let teacher_all = EmbeddingMatrix::from_unit_columns(teacher_columns, Role::Teacher)?;
    let teacher_queries = n;

    let snapshot_epochs = config.normalized_snapshot_epochs();
    let mut snapshots: Vec<WeightSnapshot> = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch_index in 0..config.epochs {
        let lr = lr_at_epoch(config.base_lr, epoch_index);
        indices.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut skipped = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            if chunk.len() < 2 {
                // A lone sample cannot form any pair; drop the tail batch.
                continue;
            }
            let teacher_batch = teacher_all.gather(chunk)?;
            let raw_batch = student_raw.select_columns(chunk.iter());
            let forward = head.forward(&raw_batch)?;
            let student =
                EmbeddingMatrix::normalize_columns(forward.prenorm.clone(), Role::Student)?;
            match batch_loss(
                &teacher_batch,
                &student,
                &forward.prenorm,
                &settings,
                &mut rng,
            ) {
                Ok(evaluation) => {
                    let grads = head.backward(&forward, &evaluation.grad_prenorm)?;
                    adam.step(&mut head, &grads, lr)?;
                    losses.push(evaluation.loss);
                }
                Err(Error::AllQueriesEmpty) => {
                    skipped += 1;
                    log::warn!(
                        "epoch {}: batch of {} had no positive pairs, skipped",
                        epoch_index + 1,
                        chunk.len()
                    );
                }
                Err(other) => return Err(other),
            }
        }
        let loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        epochs.push(EpochRow {
            epoch: epoch_index + 1,
            loss,
            lr,
            teacher_queries,
            skipped_batches: skipped,
        });
        if snapshot_epochs.contains(&(epoch_index + 1)) {
            snapshots.push(head.snapshot(epoch_index + 1));
        }
    }

    if snapshots.is_empty() {
        log::warn!(
            "no configured snapshot epoch within {} epochs; averaging the final weights only",
            config.epochs
        );
        snapshots.push(head.snapshot(config.epochs));
    }
    let averaged = weight_average(&snapshots)?;
    let mut final_head = head.clone();
    final_head.set_parameters(&averaged)?;

    Ok(TrainReport {
        epochs,
        snapshots,
        head: final_head,
        teacher_queries,
    })
}
