//! The full next-POI network: embedding lookup, a recurrent cell unrolled
//! over a user's transition triples, and a softmax over all POIs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{CellParams, CellState, ConstraintTarget, GateAblation, StepCache, StepInput, Variant};
use crate::data::{IntervalScaling, TransitionTriple};
use crate::error::{Error, Result};
use crate::numkit::{softmax_xent, Matrix, ParamSet, TensorMut, TensorRef, Vector};
use crate::optim::ConstraintSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding size.
    pub n_i: usize,
    /// Cell and hidden state size.
    pub n_c: usize,
    /// Number of POIs.
    pub vocab: usize,
    pub ablation: GateAblation,
    /// Longest span gradients flow back through; `None` is full BPTT.
    pub bptt_cap: Option<usize>,
    pub constraint_target: ConstraintTarget,
    pub scaling: IntervalScaling,
    /// Drop POIs already in the history from recommendations.
    pub exclude_visited: bool,
}

impl ModelConfig {
    pub const DEFAULT_CELL: usize = 128;
    pub const DEFAULT_EMBED: usize = 128;

    pub fn new(variant: Variant, vocab: usize) -> Self {
        ModelConfig {
            variant,
            n_i: Self::DEFAULT_EMBED,
            n_c: Self::DEFAULT_CELL,
            vocab,
            ablation: GateAblation::NONE,
            bptt_cap: None,
            constraint_target: ConstraintTarget::Interval,
            scaling: IntervalScaling::default(),
            exclude_visited: false,
        }
    }

    pub fn with_sizes(mut self, n_i: usize, n_c: usize) -> Self {
        self.n_i = n_i;
        self.n_c = n_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_i == 0 || self.n_c == 0 || self.vocab == 0 {
            return Err(Error::Config(format!(
                "sizes must be positive (n_i={}, n_c={}, vocab={})",
                self.n_i, self.n_c, self.vocab
            )));
        }
        if self.bptt_cap == Some(0) {
            return Err(Error::Config("bptt_cap must be at least 1".into()));
        }
        if !self.variant.has_intervals() && self.ablation != GateAblation::NONE {
            return Err(Error::Config(format!(
                "gate ablation needs an interval variant, not {}",
                self.variant
            )));
        }
        Ok(())
    }

    /// Tensors kept non-positive during training; empty for LSTM.
    pub fn constraints(&self) -> ConstraintSet {
        if self.variant.has_intervals() {
            ConstraintSet::new(self.constraint_target.tensor_names())
        } else {
            ConstraintSet::new(Vec::<String>::new())
        }
    }
}

/// All trainable tensors. Doubles as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub cell: CellParams,
    pub w_out: Matrix,
    pub b_out: Vector,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            embedding: Matrix::zeros(cfg.vocab, cfg.n_i),
            cell: CellParams::zeros(cfg.variant, cfg.n_i, cfg.n_c),
            w_out: Matrix::zeros(cfg.vocab, cfg.n_c),
            b_out: Vector::zeros(cfg.vocab),
        }
    }

    /// Embedding and output weights uniform in `±1/√n_i` and `±1/√n_c`,
    /// output bias zero; the cell draws its own weights.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let cell = CellParams::init(cfg.variant, cfg.n_i, cfg.n_c, cfg.constraint_target, rng);
        let mut p = ModelParams {
            cell,
            ..ModelParams::zeros(cfg)
        };
        let be = 1.0 / (cfg.n_i as f64).sqrt();
        for v in p.embedding.data_mut() {
            *v = rng.gen_range(-be..be);
        }
        let bo = 1.0 / (cfg.n_c as f64).sqrt();
        for v in p.w_out.data_mut() {
            *v = rng.gen_range(-bo..bo);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            cell: self.cell.zeros_like(),
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: Vector::zeros(self.b_out.len()),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = self.cell.variant() == cfg.variant
            && self.cell.n_i() == cfg.n_i
            && self.cell.n_c() == cfg.n_c
            && self.embedding.rows() == cfg.vocab
            && self.embedding.cols() == cfg.n_i
            && self.w_out.rows() == cfg.vocab
            && self.w_out.cols() == cfg.n_c
            && self.b_out.len() == cfg.vocab;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "parameters ({} n_i={} n_c={} vocab={}) do not match config ({} n_i={} n_c={} vocab={})",
                self.cell.variant(),
                self.cell.n_i(),
                self.cell.n_c(),
                self.vocab(),
                cfg.variant,
                cfg.n_i,
                cfg.n_c,
                cfg.vocab
            )))
        }
    }

    /// Output logits `W_out·h + b_out`.
    pub fn logits(&self, h: &[f64]) -> Vector {
        self.w_out.mul_vec_bias(h, &self.b_out)
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef::matrix("embedding", &self.embedding)];
        out.extend(self.cell.tensors());
        out.push(TensorRef::matrix("W_out", &self.w_out));
        out.push(TensorRef::vector("b_out", &self.b_out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![TensorMut::matrix("embedding", &mut self.embedding)];
        out.extend(self.cell.tensors_mut());
        out.push(TensorMut::matrix("W_out", &mut self.w_out));
        out.push(TensorMut::vector("b_out", &mut self.b_out));
        out
    }
}

fn step_input<'a>(p: &'a ModelParams, cfg: &ModelConfig, t: &TransitionTriple) -> Result<StepInput<'a>> {
    if t.poi >= p.vocab() {
        return Err(Error::Index {
            what: "POI vocabulary",
            index: t.poi,
            len: p.vocab(),
        });
    }
    let (dt, dd) = cfg.scaling.apply(t.dt, t.dd);
    Ok(StepInput {
        x: p.embedding.row(t.poi),
        dt,
        dd,
    })
}

pub struct SequenceForward {
    pub logits: Vec<Vector>,
    pub final_state: CellState,
    pub caches: Vec<StepCache>,
}

/// Unrolls the cell from a zero state, emitting logits at every step.
pub fn forward_sequence(p: &ModelParams, seq: &[TransitionTriple], cfg: &ModelConfig) -> Result<SequenceForward> {
    if seq.is_empty() {
        return Err(Error::Precondition("sequence must have at least one step".into()));
    }
    let mut state = CellState::zeros(cfg.n_c);
    let mut logits = Vec::with_capacity(seq.len());
    let mut caches = Vec::with_capacity(seq.len());
    for t in seq {
        let (next, cache) = p.cell.step(&step_input(p, cfg, t)?, &state, cfg.ablation)?;
        logits.push(p.logits(&next.h));
        caches.push(cache);
        state = next;
    }
    Ok(SequenceForward {
        logits,
        final_state: state,
        caches,
    })
}

/// Hidden state after every step, starting from zeros. Cheaper than
/// [`forward_sequence`] when only a few steps need logits.
pub fn hidden_states(p: &ModelParams, seq: &[TransitionTriple], cfg: &ModelConfig) -> Result<Vec<Vector>> {
    let mut state = CellState::zeros(cfg.n_c);
    let mut out = Vec::with_capacity(seq.len());
    for t in seq {
        let (next, _) = p.cell.step(&step_input(p, cfg, t)?, &state, cfg.ablation)?;
        out.push(next.h.clone());
        state = next;
    }
    Ok(out)
}

/// Adds the gradient of the summed per-step cross-entropy into `grads` and
/// returns that sum. Gradients flow back at most `cfg.bptt_cap` steps: the
/// sequence is cut into consecutive windows and the state entering a window
/// is treated as a constant.
pub fn accumulate_sequence_grads(
    p: &ModelParams,
    seq: &[TransitionTriple],
    targets: &[usize],
    cfg: &ModelConfig,
    grads: &mut ModelParams,
) -> Result<f64> {
    if seq.len() != targets.len() {
        return Err(Error::dim("loss_and_grads targets", seq.len(), targets.len()));
    }
    if seq.is_empty() {
        return Err(Error::Precondition("sequence must have at least one step".into()));
    }
    let n_c = cfg.n_c;
    let window = cfg.bptt_cap.unwrap_or(seq.len()).max(1);
    let mut state = CellState::zeros(n_c);
    let mut total = 0.0;

    for (chunk, chunk_targets) in seq.chunks(window).zip(targets.chunks(window)) {
        let mut caches = Vec::with_capacity(chunk.len());
        let mut hs = Vec::with_capacity(chunk.len());
        let mut dlogits = Vec::with_capacity(chunk.len());
        for (t, &target) in chunk.iter().zip(chunk_targets) {
            let (next, cache) = p.cell.step(&step_input(p, cfg, t)?, &state, cfg.ablation)?;
            let (loss, dl) = softmax_xent(&p.logits(&next.h), target)?;
            total += loss;
            hs.push(next.h.clone());
            dlogits.push(dl);
            caches.push(cache);
            state = next;
        }

        let mut dh_next = vec![0.0; n_c];
        let mut dc_next = vec![0.0; n_c];
        for k in (0..chunk.len()).rev() {
            let dl = &dlogits[k];
            grads.w_out.add_outer(dl, &hs[k]);
            grads.b_out.axpy(1.0, dl);
            let mut dh = dh_next;
            p.w_out.tmul_vec_acc(dl, &mut dh);
            let ig = p.cell.backward_into(&caches[k], &dh, &dc_next, &mut grads.cell)?;
            let row = grads.embedding.row_mut(chunk[k].poi);
            for (g, d) in row.iter_mut().zip(ig.x.iter()) {
                *g += d;
            }
            dh_next = ig.h_prev.into_inner();
            dc_next = ig.c_prev.into_inner();
        }
    }
    Ok(total)
}

/// Mean per-step cross-entropy of one sequence and its gradient.
pub fn loss_and_grads(
    p: &ModelParams,
    seq: &[TransitionTriple],
    targets: &[usize],
    cfg: &ModelConfig,
) -> Result<(f64, ModelParams)> {
    let mut grads = p.zeros_like();
    let sum = accumulate_sequence_grads(p, seq, targets, cfg, &mut grads)?;
    let n = seq.len() as f64;
    grads.scale(1.0 / n);
    Ok((sum / n, grads))
}

/// Mean cross-entropy of one sequence, no gradients.
pub fn sequence_loss(p: &ModelParams, seq: &[TransitionTriple], targets: &[usize], cfg: &ModelConfig) -> Result<f64> {
    if seq.len() != targets.len() {
        return Err(Error::dim("sequence_loss targets", seq.len(), targets.len()));
    }
    let fwd = forward_sequence(p, seq, cfg)?;
    let mut sum = 0.0;
    for (l, &t) in fwd.logits.iter().zip(targets) {
        sum += softmax_xent(l, t)?.0;
    }
    Ok(sum / seq.len() as f64)
}

/// One training sequence with its next-POI targets.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a> {
    pub inputs: &'a [TransitionTriple],
    pub targets: &'a [usize],
}

pub struct BatchGrads {
    /// Gradient of the mean loss over every step in the batch.
    pub grads: ModelParams,
    /// Unscaled sum of per-sequence gradients.
    pub loss_sum: f64,
    pub steps: usize,
}

impl BatchGrads {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.steps as f64
    }
}

/// Summed gradient of a batch of independent sequences (state reset per
/// sequence), scaled to the mean over all steps. Per-sequence gradients are
/// computed separately and added in batch order, so the result does not
/// depend on `parallel`.
pub fn batch_grads(p: &ModelParams, batch: &[SeqRef<'_>], cfg: &ModelConfig, parallel: bool) -> Result<BatchGrads> {
    let batch: Vec<&SeqRef<'_>> = batch.iter().filter(|s| !s.inputs.is_empty()).collect();
    let steps: usize = batch.iter().map(|s| s.inputs.len()).sum();
    let mut total = p.zeros_like();
    let mut loss_sum = 0.0;
    if parallel {
        let per_seq: Vec<Result<(f64, ModelParams)>> = batch
            .par_iter()
            .map(|s| {
                let mut g = p.zeros_like();
                accumulate_sequence_grads(p, s.inputs, s.targets, cfg, &mut g).map(|l| (l, g))
            })
            .collect();
        for r in per_seq {
            let (l, g) = r?;
            loss_sum += l;
            total.add_scaled(&g, 1.0);
        }
    } else {
        let mut g = p.zeros_like();
        for s in &batch {
            g.fill(0.0);
            loss_sum += accumulate_sequence_grads(p, s.inputs, s.targets, cfg, &mut g)?;
            total.add_scaled(&g, 1.0);
        }
    }
    if steps > 0 {
        total.scale(1.0 / steps as f64);
    }
    Ok(BatchGrads {
        grads: total,
        loss_sum,
        steps,
    })
}

/// Orders POI ids by logit descending, ties by ascending id.
pub fn rank_pois(logits: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids
}

/// Top-k POIs after running over `history`. With `exclude_visited` set,
/// POIs appearing in the history are skipped.
pub fn predict_topk(p: &ModelParams, history: &[TransitionTriple], k: usize, cfg: &ModelConfig) -> Result<Vec<usize>> {
    if history.is_empty() {
        return Err(Error::Precondition("history must not be empty".into()));
    }
    if k > p.vocab() {
        return Err(Error::Precondition(format!(
            "k={k} exceeds vocabulary size {}",
            p.vocab()
        )));
    }
    let hs = hidden_states(p, history, cfg)?;
    let logits = p.logits(hs.last().expect("non-empty history"));
    let mut visited = vec![false; p.vocab()];
    if cfg.exclude_visited {
        for t in history {
            visited[t.poi] = true;
        }
    }
    Ok(rank_pois(&logits)
        .into_iter()
        .filter(|&id| !visited[id])
        .take(k)
        .collect())
}
