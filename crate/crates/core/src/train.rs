//! Mini-batch training over user sequences with Adam, projection onto the
//! sign constraints, optional clipping, and early stopping on a plateau.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{epoch_order, Corpus};
use crate::error::{Error, Result};
use crate::model::{batch_grads, sequence_loss, ModelConfig, ModelParams, SeqRef};
use crate::numkit::ParamSet;
use crate::optim::{adam_step, clip_global_norm, project, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Epochs without sufficient improvement before stopping.
    pub patience: usize,
    /// Minimum relative decrease of the epoch loss that counts as progress.
    pub rel_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 10,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// User sequences per mini-batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Compute per-sequence gradients on the rayon pool.
    pub parallel: bool,
    pub early_stop: Option<EarlyStop>,
    /// Tensors whose gradients are zeroed, so they keep their initial values.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 10,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
            parallel: false,
            early_stop: None,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub batches: usize,
    /// Largest pre-clip gradient norm seen this epoch.
    pub max_grad_norm: f64,
    /// Largest constrained entry after any projection this epoch.
    pub constraint_max: Option<f64>,
}

/// State of the batch that produced a non-finite loss or gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub epoch: usize,
    pub batch: usize,
    pub users: Vec<String>,
    pub sequence_losses: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_completed: usize,
    best_loss: f64,
    stale_epochs: usize,
}

impl TrainState {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(model, &mut rng);
        Ok(Self::from_params(params, cfg.adam))
    }

    pub fn from_params(params: ModelParams, adam: AdamConfig) -> Self {
        let adam = AdamState::new(&params, adam);
        TrainState {
            params,
            adam,
            epochs_completed: 0,
            best_loss: f64::INFINITY,
            stale_epochs: 0,
        }
    }

    /// Resumes from a checkpoint that carries optimizer state.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let adam = ck
            .optimizer
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Ok(TrainState {
            params: ck.params,
            adam,
            epochs_completed: ck.epochs_completed as usize,
            best_loss: f64::INFINITY,
            stale_epochs: 0,
        })
    }

    pub fn checkpoint(&self, model: &ModelConfig, seed: u64) -> Checkpoint {
        Checkpoint {
            config: *model,
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
            epochs_completed: self.epochs_completed as u64,
            seed,
        }
    }
}

fn zero_frozen(grads: &mut ModelParams, frozen: &[String]) -> Result<()> {
    let mut tensors = grads.tensors_mut();
    for name in frozen {
        let t = tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("cannot freeze unknown tensor `{name}`")))?;
        t.data.fill(0.0);
    }
    Ok(())
}

/// Runs one epoch: users shuffled by `(seed, epoch)`, cut into batches,
/// one optimizer step per batch.
pub fn run_epoch(state: &mut TrainState, model: &ModelConfig, cfg: &TrainConfig, corpus: &Corpus) -> Result<EpochLog> {
    state.params.check_config(model)?;
    let constraints = model.constraints();
    let epoch = state.epochs_completed + 1;
    let order: Vec<usize> = epoch_order(corpus.users.len(), cfg.seed, epoch as u64)
        .into_iter()
        .filter(|&u| !corpus.users[u].train_triples().is_empty())
        .collect();
    if order.is_empty() {
        return Err(Error::Precondition("corpus has no training transitions".into()));
    }

    let mut log = EpochLog {
        epoch,
        mean_loss: 0.0,
        steps: 0,
        batches: 0,
        max_grad_norm: 0.0,
        constraint_max: None,
    };
    let mut loss_sum = 0.0;
    for (b, users) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<SeqRef<'_>> = users
            .iter()
            .map(|&u| SeqRef {
                inputs: corpus.users[u].train_triples(),
                targets: corpus.users[u].train_targets(),
            })
            .collect();
        let diverged = |grad_norm: f64| {
            let sequence_losses = batch
                .iter()
                .map(|s| sequence_loss(&state.params, s.inputs, s.targets, model).unwrap_or(f64::NAN))
                .collect();
            Error::Diverged(Box::new(DivergenceReport {
                epoch,
                batch: b,
                users: users.iter().map(|&u| corpus.users[u].user.clone()).collect(),
                sequence_losses,
                grad_norm,
            }))
        };
        let mut bg = match batch_grads(&state.params, &batch, model, cfg.parallel) {
            Ok(bg) => bg,
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        zero_frozen(&mut bg.grads, &cfg.frozen)?;
        let norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut bg.grads, c),
            None => bg.grads.l2_norm(),
        };
        if !bg.loss_sum.is_finite() || !norm.is_finite() {
            return Err(diverged(norm));
        }
        adam_step(&mut state.params, &bg.grads, &mut state.adam)?;
        project(&mut state.params, &constraints)?;
        if let Some(m) = constraints.max_entry(&state.params)? {
            if m > 0.0 {
                return Err(Error::Precondition(format!(
                    "constrained entry {m} > 0 after projection"
                )));
            }
            log.constraint_max = Some(log.constraint_max.map_or(m, |x: f64| x.max(m)));
        }
        loss_sum += bg.loss_sum;
        log.steps += bg.steps;
        log.batches += 1;
        log.max_grad_norm = log.max_grad_norm.max(norm);
    }
    log.mean_loss = loss_sum / log.steps as f64;
    state.epochs_completed = epoch;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Trains until `cfg.epochs` epochs have completed (counting any already in
/// `state`) or the early-stop rule fires. `on_epoch` runs after every epoch,
/// e.g. to write a checkpoint.
pub fn train<F>(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &EpochLog) -> Result<()>,
{
    cfg.validate()?;
    model.validate()?;
    if corpus.n_pois() != model.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary {} does not match model vocabulary {}",
            corpus.n_pois(),
            model.vocab
        )));
    }
    let mut out = TrainOutcome {
        logs: Vec::new(),
        stopped_early: false,
    };
    while state.epochs_completed < cfg.epochs {
        let log = run_epoch(state, model, cfg, corpus)?;
        log::info!(
            "epoch {} loss {:.6} steps {} grad-norm {:.4}",
            log.epoch,
            log.mean_loss,
            log.steps,
            log.max_grad_norm
        );
        on_epoch(state, &log)?;
        let loss = log.mean_loss;
        out.logs.push(log);
        if let Some(es) = cfg.early_stop {
            if loss < state.best_loss * (1.0 - es.rel_tol) {
                state.best_loss = loss;
                state.stale_epochs = 0;
            } else {
                state.stale_epochs += 1;
                if state.stale_epochs >= es.patience {
                    out.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Variant;
    use crate::data::{synth_corpus, SynthConfig};

    fn small() -> (Corpus, ModelConfig, TrainConfig) {
        let corpus = synth_corpus(&SynthConfig::periodic(1, 12, 12, 3));
        let model = ModelConfig::new(Variant::StClstm, 12).with_sizes(6, 8);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            seed: 5,
            ..TrainConfig::default()
        };
        (corpus, model, cfg)
    }

    #[test]
    fn defaults() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.clip_norm), (100, 10, Some(5.0)));
    }

    #[test]
    fn training_is_deterministic_and_parallel_agrees() {
        let (corpus, model, cfg) = small();
        let run = |parallel: bool| {
            let cfg = TrainConfig {
                parallel,
                ..cfg.clone()
            };
            let mut st = TrainState::new(&model, &cfg).unwrap();
            let out = train(&mut st, &model, &cfg, &corpus, |_, _| Ok(())).unwrap();
            (st, out)
        };
        let (a, la) = run(false);
        let (b, lb) = run(false);
        let (c, _) = run(true);
        assert_eq!(a.params, b.params);
        assert_eq!(la, lb);
        assert_eq!(a.params, c.params);
        assert_eq!(la.logs.len(), 3);
        assert!(la.logs.iter().all(|l| l.constraint_max.unwrap() <= 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (corpus, model, cfg) = small();
        let mut full = TrainState::new(&model, &cfg).unwrap();
        train(&mut full, &model, &cfg, &corpus, |_, _| Ok(())).unwrap();

        let mut first = TrainState::new(&model, &cfg).unwrap();
        let two = TrainConfig {
            epochs: 2,
            ..cfg.clone()
        };
        train(&mut first, &model, &two, &corpus, |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint(&model, cfg.seed).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let mut resumed = TrainState::from_checkpoint(ck).unwrap();
        let out = train(&mut resumed, &model, &cfg, &corpus, |_, _| Ok(())).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.adam, full.adam);
    }

    #[test]
    fn frozen_tensors_stay_put() {
        let (corpus, model, mut cfg) = small();
        cfg.frozen = vec!["W_to".into(), "embedding".into()];
        let mut st = TrainState::new(&model, &cfg).unwrap();
        let before = st.params.clone();
        train(&mut st, &model, &cfg, &corpus, |_, _| Ok(())).unwrap();
        assert_eq!(st.params.embedding, before.embedding);
        assert_eq!(
            st.params.cell.interval.as_ref().unwrap().w_to,
            before.cell.interval.as_ref().unwrap().w_to
        );
        assert_ne!(st.params.w_out, before.w_out);

        cfg.frozen = vec!["nope".into()];
        let mut st = TrainState::new(&model, &cfg).unwrap();
        assert!(matches!(
            train(&mut st, &model, &cfg, &corpus, |_, _| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (corpus, model, cfg) = small();
        let mut st = TrainState::new(&model, &cfg).unwrap();
        st.params.w_out.data_mut()[0] = f64::NAN;
        match run_epoch(&mut st, &model, &cfg, &corpus) {
            Err(Error::Diverged(r)) => {
                assert_eq!((r.epoch, r.batch), (1, 0));
                assert_eq!(r.users.len(), 4);
                assert!(r.sequence_losses.iter().all(|l| l.is_nan()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_fires_on_plateau() {
        let (corpus, model, mut cfg) = small();
        cfg.epochs = 50;
        cfg.adam.lr = 1e-12;
        cfg.early_stop = Some(EarlyStop {
            patience: 3,
            rel_tol: 1e-4,
        });
        let mut st = TrainState::new(&model, &cfg).unwrap();
        let out = train(&mut st, &model, &cfg, &corpus, |_, _| Ok(())).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.logs.len(), 4);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let (corpus, mut model, cfg) = small();
        model.vocab = 13;
        let mut st = TrainState::new(&model, &cfg).unwrap();
        assert!(matches!(
            train(&mut st, &model, &cfg, &corpus, |_, _| Ok(())),
            Err(Error::Config(_))
        ));
    }
}
