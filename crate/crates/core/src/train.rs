//! Mini-batch training of the Siamese pipeline.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::matching::{SinkhornConfig, StaircaseConfig};
use crate::params::ModelParams;
use crate::pipeline::{pair_forward, PipelineOptions};
use crate::rng::{derive_seed, seeded};
use crate::shuffle::{
    global_patch_shuffle, local_patch_shuffle_grouped, BlockGrouping, ShuffleConfig,
};
use crate::tensor::{Tape, Tensor};

const STREAM_ORDER: u64 = 0x6f72_6465_72;
const STREAM_SHUFFLE: u64 = 0x7368_7566;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub seed: u64,
    pub use_local_shuffle: bool,
    pub use_global_shuffle: bool,
    pub use_matching: bool,
    pub use_across: bool,
    pub grouping: BlockGrouping,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            lr: 1e-2,
            epochs: 30,
            batch_size: 16,
            eta: 0.5,
            mu: 1.0,
            epsilon: 0.1,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-6,
            seed: 0,
            use_local_shuffle: true,
            use_global_shuffle: false,
            use_matching: true,
            use_across: false,
            grouping: BlockGrouping::Spatial,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.use_local_shuffle && self.use_global_shuffle {
            return Err(Error::Config(
                "local and global shuffle are mutually exclusive".into(),
            ));
        }
        if self.sinkhorn_iters == 0 || !(self.epsilon > 0.0) {
            return Err(Error::Config(
                "Sinkhorn needs epsilon > 0 and at least one iteration".into(),
            ));
        }
        ShuffleConfig::new(1, self.eta, 0)?;
        StaircaseConfig::new(self.mu)?;
        Ok(())
    }

    pub fn pipeline(&self) -> Result<PipelineOptions> {
        Ok(PipelineOptions {
            use_matching: self.use_matching,
            use_across: self.use_across,
            staircase: StaircaseConfig::new(self.mu)?,
            sinkhorn: SinkhornConfig {
                epsilon: self.epsilon,
                max_iters: self.sinkhorn_iters,
                tol: self.sinkhorn_tol,
            },
            lambda: self.lambda,
        })
    }

    /// Builds the second view of `image` for sample `index` in `epoch`;
    /// `None` when no shuffle is configured.
    pub fn shuffled_view(
        &self,
        image: &Tensor,
        patch: usize,
        epoch: usize,
        index: usize,
    ) -> Result<Option<Tensor>> {
        let seed = derive_seed(self.seed, STREAM_SHUFFLE ^ epoch as u64, index as u64);
        let cfg = ShuffleConfig::new(patch, self.eta, seed)?;
        if self.use_local_shuffle {
            Ok(Some(
                local_patch_shuffle_grouped(image, &cfg, self.grouping)?.0,
            ))
        } else if self.use_global_shuffle {
            Ok(Some(global_patch_shuffle(image, &cfg)?.0))
        } else {
            Ok(None)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; `grads` follow the parameter order.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.iter_mut().zip(grads) {
                    *p = Tensor::new(
                        p.dims(),
                        p.data()
                            .iter()
                            .zip(g.data())
                            .map(|(w, d)| w - lr * d)
                            .collect(),
                    )?;
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                weight_decay,
            } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.dims())).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for (((_, p), g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let nm: Vec<f64> = m
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(m, g)| beta1 * m + (1.0 - beta1) * g)
                        .collect();
                    let nv: Vec<f64> = v
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, g)| beta2 * v + (1.0 - beta2) * g * g)
                        .collect();
                    let np = p
                        .data()
                        .iter()
                        .zip(nm.iter().zip(&nv))
                        .map(|(w, (m, v))| {
                            w - lr * ((m / c1) / ((v / c2).sqrt() + 1e-8) + weight_decay * w)
                        })
                        .collect();
                    *m = Tensor::new(g.dims(), nm)?;
                    *v = Tensor::new(g.dims(), nv)?;
                    *p = Tensor::new(p.dims(), np)?;
                }
            }
        }
        Ok(())
    }
}

/// Loss and gradients of one pair, gradients in parameter order.
pub fn sample_gradients(
    params: &ModelParams,
    opts: &PipelineOptions,
    primal: &Tensor,
    shuffled: Option<&Tensor>,
    label: usize,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = pair_forward(
        &mut tape,
        &bound,
        params.config(),
        opts,
        primal,
        shuffled,
        label,
        None,
    )?;
    if let Some(term) = fwd.breakdown.diverged_term() {
        return Err(Error::Diverged(format!(
            "{term} is not finite: {:?}",
            fwd.breakdown
        )));
    }
    let mut grads = tape.backward(fwd.loss)?;
    let out = bound
        .iter()
        .map(|(name, v)| {
            grads
                .take(v)
                .ok_or_else(|| Error::Invalid(format!("no gradient for {name}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some((name, _)) = bound
        .iter()
        .zip(&out)
        .find(|(_, g)| !g.is_finite())
        .map(|(p, g)| (p.0, g))
    {
        return Err(Error::Diverged(format!("gradient of {name} is not finite")));
    }
    Ok((fwd.breakdown, out))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let avg_opt = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
        parts
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    LossBreakdown {
        l_cls: avg(&|b| b.l_cls),
        l_er: avg(&|b| b.l_er),
        l_total: avg(&|b| b.l_total),
        ce_f_p: avg(&|b| b.ce_f_p),
        ce_f_h: avg(&|b| b.ce_f_h),
        ce_t_p: avg_opt(&|b| b.ce_t_p),
        ce_t_h: avg_opt(&|b| b.ce_t_h),
    }
}

/// One optimizer step on a batch of `(primal, shuffled, label)` triples.
/// Gradients are averaged over the batch in index order.
pub fn train_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    opts: &PipelineOptions,
    batch: &[(Tensor, Option<Tensor>, usize)],
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total: Option<Vec<Tensor>> = None;
    let mut parts = Vec::with_capacity(batch.len());
    for (primal, shuffled, label) in batch {
        let (b, g) = sample_gradients(params, opts, primal, shuffled.as_ref(), *label)?;
        parts.push(b);
        total = Some(match total {
            None => g,
            Some(acc) => acc
                .into_iter()
                .zip(g)
                .map(|(a, g)| crate::tensor::ops::add(&a, &g))
                .collect::<std::result::Result<_, _>>()?,
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let grads: Vec<Tensor> = total
        .expect("non-empty batch")
        .into_iter()
        .map(|g| g.map(|v| v * scale))
        .collect();
    optimizer.apply(params, &grads)?;
    Ok(mean_breakdown(&parts))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
}

impl StepLog {
    /// `step l_cls l_er l_total`.
    pub fn line(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{} {:.6} {:.6} {:.6}",
            self.step, b.l_cls, b.l_er, b.l_total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Batch loss of the first step, before any update.
    pub initial_loss: f64,
    /// Mean batch loss over the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains for `cfg.epochs` passes over `data` in a seeded order per epoch.
pub fn train<F: FnMut(&StepLog)>(
    params: &mut ModelParams,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let opts = cfg.pipeline()?;
    let patch = params.config().patch_size;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut step = 0;
    let mut initial = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(derive_seed(
            cfg.seed,
            STREAM_ORDER,
            epoch as u64,
        )));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    Ok((
                        s.image.clone(),
                        cfg.shuffled_view(&s.image, patch, epoch, i)?,
                        s.label,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let breakdown = train_step(params, &mut optimizer, &opts, &batch)?;
            initial.get_or_insert(breakdown.l_total);
            sum += breakdown.l_total;
            batches += 1;
            on_step(&StepLog {
                step,
                epoch,
                breakdown,
            });
            step += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(TrainSummary {
        steps: step,
        initial_loss: initial.unwrap_or(f64::NAN),
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
    })
}
