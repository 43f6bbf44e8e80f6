//! Toy-scale supervised training: AdamW with decoupled weight decay, cosine
//! learning-rate schedule with linear warmup, a synthetic Gaussian-template
//! classification task, and the training/evaluation loops.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CvtError, Result};
use crate::float::Float;
use crate::layers::Mode;
use crate::model::CvtModel;
use crate::tensor::{cross_entropy, Tensor};

/// AdamW optimizer state: per-parameter first/second moments keyed by
/// parameter name, so the update is invariant to iteration order.
pub struct AdamW<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

/// Norm affines and the cls token are excluded from weight decay.
fn decay_exempt(name: &str) -> bool {
    name == "cls_token" || name.ends_with(".gamma") || name.ends_with(".beta")
}

impl<T: Float> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One decoupled-weight-decay update over every model parameter, reading
    /// the accumulated gradients (absent gradients count as zero).
    pub fn step(&mut self, model: &mut CvtModel<T>, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(CvtError::Config(format!("learning rate {lr} must be >= 0")));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_minus_b1 = T::from_f64(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        let wd = self.weight_decay;
        model.visit_params_mut(&mut |name, t| {
            let n = t.numel();
            let grad = t.grad().unwrap_or_else(|| vec![T::ZERO; n]);
            // Decoupled decay: multiplicative shrink, separate from the
            // adaptive gradient term.
            let decay_factor = if wd > 0.0 && !decay_exempt(&name) {
                T::from_f64(1.0 - lr * wd)
            } else {
                T::ONE
            };
            let m = m_map.entry(name.clone()).or_insert_with(|| vec![T::ZERO; n]);
            let v = v_map.entry(name).or_insert_with(|| vec![T::ZERO; n]);
            let mut data = t.data().to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + one_minus_b1 * grad[i];
                v[i] = b2 * v[i] + one_minus_b2 * grad[i] * grad[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                data[i] = data[i] * decay_factor - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            *t = Tensor::param(data, t.shape()).unwrap();
        });
        Ok(())
    }
}

/// Piecewise schedule: linear warmup to `base_lr` over `warmup_steps`, then
/// cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// K Gaussian class templates plus per-sample noise: learnable by
/// construction, deterministic from the seed.
pub struct SyntheticDataset<T: Float> {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    templates: Vec<Vec<T>>,
}

/// Minimum pairwise template distance the constructor guarantees.
pub const TEMPLATE_MARGIN: f64 = 1.0;

impl<T: Float> SyntheticDataset<T> {
    pub fn new(seed: u64, num_classes: usize, image_size: usize, noise: f64) -> Result<Self> {
        let channels = 3;
        let dim = channels * image_size * image_size;
        let mut rng = StdRng::seed_from_u64(seed);
        let templates: Vec<Vec<T>> = (0..num_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| T::from_f64(StandardNormal.sample(&mut rng)))
                    .collect()
            })
            .collect();
        for i in 0..num_classes {
            for j in i + 1..num_classes {
                let dist: f64 = templates[i]
                    .iter()
                    .zip(&templates[j])
                    .map(|(&a, &b)| {
                        let d = a.to_f64() - b.to_f64();
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                if dist <= TEMPLATE_MARGIN {
                    return Err(CvtError::Config(format!(
                        "templates {i} and {j} are too close (L2 {dist:.3})"
                    )));
                }
            }
        }
        Ok(SyntheticDataset {
            num_classes,
            image_size,
            channels,
            noise,
            templates,
        })
    }

    fn sample_into(&self, rng: &mut StdRng, label: usize, out: &mut Vec<T>) {
        let noise = T::from_f64(self.noise);
        for &v in &self.templates[label] {
            let n: f64 = StandardNormal.sample(rng);
            out.push(v + noise * T::from_f64(n));
        }
    }

    /// Batch with uniformly random labels.
    pub fn batch(&self, rng: &mut StdRng, n: usize) -> (Tensor<T>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.num_classes)).collect();
        (self.batch_for(rng, &labels), labels)
    }

    /// Batch with labels cycling through the classes (exactly balanced when
    /// `n` is a multiple of the class count).
    pub fn balanced_batch(&self, rng: &mut StdRng, n: usize) -> (Tensor<T>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        (self.batch_for(rng, &labels), labels)
    }

    fn batch_for(&self, rng: &mut StdRng, labels: &[usize]) -> Tensor<T> {
        let dim = self.channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(labels.len() * dim);
        for &label in labels {
            self.sample_into(rng, label, &mut data);
        }
        Tensor::from_vec(
            data,
            &[labels.len(), self.channels, self.image_size, self.image_size],
        )
        .unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    /// Line-delimited records: `step<TAB>lr<TAB>loss<TAB>grad_norm`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{:.8e}\t{:.8e}\t{:.8e}\n", e.step, e.lr, e.loss, e.grad_norm));
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_lines().as_bytes())?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Control mode: shuffle the batch labels each step, destroying the
    /// image→label signal while keeping the marginals.
    pub shuffle_labels: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            steps: 300,
            batch_size: 32,
            base_lr: 3e-3,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            shuffle_labels: false,
        }
    }
}

/// Deterministic training loop; aborts with the step index if the loss goes
/// non-finite.
pub fn train<T: Float>(
    model: &mut CvtModel<T>,
    dataset: &SyntheticDataset<T>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainingLog> {
    model.set_mode(Mode::Train);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut opt = AdamW::new(hyper.weight_decay);
    let warmup = (hyper.steps as f64 * hyper.warmup_frac).round() as usize;
    let mut log = TrainingLog::default();
    for step in 0..hyper.steps {
        let (images, mut labels) = dataset.batch(&mut rng, hyper.batch_size);
        if hyper.shuffle_labels {
            // Fixed-point-free permutation: every image gets another sample's
            // label. A uniform shuffle would leave ~1/batch of the pairs
            // intact and leak a faint but exploitable training signal.
            labels.rotate_left(1);
        }
        let logits = model.forward(&images)?;
        let loss = cross_entropy(&logits, &labels)?;
        let loss_val = loss.item().to_f64();
        if !loss_val.is_finite() {
            return Err(CvtError::NonFiniteLoss { step });
        }
        model.zero_grads();
        loss.backward()?;
        let mut sq_norm = 0.0f64;
        model.visit_params(&mut |_, t| {
            if let Some(g) = t.grad() {
                sq_norm += g.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
            }
        });
        let lr = cosine_lr(step, hyper.steps, hyper.base_lr, warmup);
        opt.step(model, lr)?;
        log.entries.push(LogEntry {
            step,
            lr,
            loss: loss_val,
            grad_norm: sq_norm.sqrt(),
        });
    }
    Ok(log)
}

/// Argmax matches per row of `B×K` logits.
pub fn count_correct<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(bi, &label)| {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Accuracy and mean loss over `num_samples` class-balanced samples, in eval
/// mode (running batch-norm statistics, no mutation).
pub fn evaluate<T: Float>(
    model: &CvtModel<T>,
    dataset: &SyntheticDataset<T>,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let batch = 32usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    while total < num_samples {
        let n = batch.min(num_samples - total);
        let (images, labels) = dataset.balanced_batch(&mut rng, n);
        let logits = model.forward_mode(&images, Mode::Eval)?;
        let loss = cross_entropy(&logits, &labels)?;
        loss_sum += loss.item().to_f64();
        batches += 1;
        correct += count_correct(&logits, &labels);
        total += n;
    }
    Ok((correct as f64 / total as f64, loss_sum / batches as f64))
}
