//! Recurrent cells: plain LSTM, the spatio-temporal ST-LSTM with two time
//! gates and two distance gates, and the coupled-gate ST-CLSTM.
//!
//! All three variants share [`CellParams`]. The interval block (time gates,
//! distance gates and the output-gate interval weights) is present only for
//! the spatio-temporal variants; the forget gate is absent in ST-CLSTM.
//!
//! The spatio-temporal cells keep two cell states per step. `c_hat` is the
//! short-term state: it is gated by `T1 ⊙ D1` and feeds only `h_t`. `c` is
//! the long-term state: it is gated by `T2 ⊙ D2` and is the recurrent carry.
//! Each interval gate applies the sigmoid twice, as in
//! `T1 = σ(W_xt1·x + σ(Δt·w_t1) + b_t1)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sigmoid_scalar, Matrix, ParamSet, TensorMut, TensorRef, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Lstm,
    StLstm,
    StClstm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Lstm, Variant::StLstm, Variant::StClstm];

    pub fn has_intervals(self) -> bool {
        !matches!(self, Variant::Lstm)
    }

    pub fn has_forget_gate(self) -> bool {
        !matches!(self, Variant::StClstm)
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Lstm => 0,
            Variant::StLstm => 1,
            Variant::StClstm => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::StLstm => "st-lstm",
            Variant::StClstm => "st-clstm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(Variant::Lstm),
            "st-lstm" | "stlstm" => Ok(Variant::StLstm),
            "st-clstm" | "stclstm" => Ok(Variant::StClstm),
            other => Err(Error::Config(format!("unknown cell variant `{other}`"))),
        }
    }
}

/// Gates forced to the all-ones vector. Ablated gates carry no gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateAblation {
    pub fix_t1: bool,
    pub fix_t2: bool,
    pub fix_d1: bool,
    pub fix_d2: bool,
}

impl GateAblation {
    pub const NONE: GateAblation = GateAblation::from_bits(0);
    pub const ALL: GateAblation = GateAblation::from_bits(0b1111);
    /// Distance gates closed; only time intervals are modelled.
    pub const TIME_ONLY: GateAblation = GateAblation::from_bits(0b1100);
    /// Time gates closed; only distance intervals are modelled.
    pub const DISTANCE_ONLY: GateAblation = GateAblation::from_bits(0b0011);
    /// Long-term gates (T2, D2) closed.
    pub const SHORT_TERM_ONLY: GateAblation = GateAblation::from_bits(0b1010);
    /// Short-term gates (T1, D1) closed.
    pub const LONG_TERM_ONLY: GateAblation = GateAblation::from_bits(0b0101);

    /// The named configurations used in gate ablation studies.
    pub const NAMED: [(&'static str, GateAblation); 5] = [
        ("full", GateAblation::NONE),
        ("time-only", GateAblation::TIME_ONLY),
        ("distance-only", GateAblation::DISTANCE_ONLY),
        ("short-term-only", GateAblation::SHORT_TERM_ONLY),
        ("long-term-only", GateAblation::LONG_TERM_ONLY),
    ];

    /// bit 0: T1, bit 1: T2, bit 2: D1, bit 3: D2
    pub const fn from_bits(bits: u8) -> Self {
        GateAblation {
            fix_t1: bits & 1 != 0,
            fix_t2: bits & 2 != 0,
            fix_d1: bits & 4 != 0,
            fix_d2: bits & 8 != 0,
        }
    }

    pub fn bits(self) -> u8 {
        self.fix_t1 as u8 | (self.fix_t2 as u8) << 1 | (self.fix_d1 as u8) << 2 | (self.fix_d2 as u8) << 3
    }

    pub fn label(self) -> String {
        if let Some((name, _)) = Self::NAMED.iter().find(|(_, a)| *a == self) {
            return (*name).to_string();
        }
        let fixed: Vec<&str> = [
            (self.fix_t1, "T1"),
            (self.fix_t2, "T2"),
            (self.fix_d1, "D1"),
            (self.fix_d2, "D2"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        format!("fix-{}", fixed.join("-"))
    }

    fn fixed(self, gate: IntervalGateKind) -> bool {
        match gate {
            IntervalGateKind::T1 => self.fix_t1,
            IntervalGateKind::T2 => self.fix_t2,
            IntervalGateKind::D1 => self.fix_d1,
            IntervalGateKind::D2 => self.fix_d2,
        }
    }
}

impl FromStr for GateAblation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::NAMED
            .iter()
            .find(|(name, _)| *name == s)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Which tensors the non-positivity projection applies to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintTarget {
    /// `W_t1` and `W_d1`, the weights multiplying Δt and Δd in T1 and D1.
    #[default]
    Interval,
    /// `W_xt1` and `W_xd1`, the input weights of T1 and D1.
    Input,
}

impl ConstraintTarget {
    pub fn tensor_names(self) -> [&'static str; 2] {
        match self {
            ConstraintTarget::Interval => ["W_t1", "W_d1"],
            ConstraintTarget::Input => ["W_xt1", "W_xd1"],
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ConstraintTarget::Interval => 0,
            ConstraintTarget::Input => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ConstraintTarget::Interval),
            1 => Some(ConstraintTarget::Input),
            _ => None,
        }
    }
}

impl FromStr for ConstraintTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interval" | "interval-weights" => Ok(ConstraintTarget::Interval),
            "input" | "input-weights" => Ok(ConstraintTarget::Input),
            other => Err(Error::Config(format!("unknown constraint target `{other}`"))),
        }
    }
}

/// Affine gate over the concatenation `[h_{t-1}, x_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateBlock {
    pub w: Matrix,
    pub b: Vector,
}

impl GateBlock {
    fn zeros(n_c: usize, n_in: usize) -> Self {
        GateBlock {
            w: Matrix::zeros(n_c, n_in),
            b: Vector::zeros(n_c),
        }
    }
}

/// `σ(W_x·x + σ(τ·w_interval) + b)` for τ a scalar interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalGate {
    pub w_x: Matrix,
    pub w_interval: Vector,
    pub b: Vector,
}

impl IntervalGate {
    fn zeros(n_c: usize, n_i: usize) -> Self {
        IntervalGate {
            w_x: Matrix::zeros(n_c, n_i),
            w_interval: Vector::zeros(n_c),
            b: Vector::zeros(n_c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IntervalGateKind {
    T1,
    T2,
    D1,
    D2,
}

const GATE_KINDS: [IntervalGateKind; 4] = [
    IntervalGateKind::T1,
    IntervalGateKind::T2,
    IntervalGateKind::D1,
    IntervalGateKind::D2,
];

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalParams {
    pub t1: IntervalGate,
    pub t2: IntervalGate,
    pub d1: IntervalGate,
    pub d2: IntervalGate,
    /// Δt weight in the output gate.
    pub w_to: Vector,
    /// Δd weight in the output gate.
    pub w_do: Vector,
}

impl IntervalParams {
    fn zeros(n_c: usize, n_i: usize) -> Self {
        IntervalParams {
            t1: IntervalGate::zeros(n_c, n_i),
            t2: IntervalGate::zeros(n_c, n_i),
            d1: IntervalGate::zeros(n_c, n_i),
            d2: IntervalGate::zeros(n_c, n_i),
            w_to: Vector::zeros(n_c),
            w_do: Vector::zeros(n_c),
        }
    }

    fn gate(&self, kind: IntervalGateKind) -> &IntervalGate {
        match kind {
            IntervalGateKind::T1 => &self.t1,
            IntervalGateKind::T2 => &self.t2,
            IntervalGateKind::D1 => &self.d1,
            IntervalGateKind::D2 => &self.d2,
        }
    }

    fn gate_mut(&mut self, kind: IntervalGateKind) -> &mut IntervalGate {
        match kind {
            IntervalGateKind::T1 => &mut self.t1,
            IntervalGateKind::T2 => &mut self.t2,
            IntervalGateKind::D1 => &mut self.d1,
            IntervalGateKind::D2 => &mut self.d2,
        }
    }
}

/// Weights and biases of one recurrent cell. Also used as the gradient
/// buffer for the same cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    variant: Variant,
    n_i: usize,
    n_c: usize,
    pub input: GateBlock,
    pub forget: Option<GateBlock>,
    pub candidate: GateBlock,
    pub output: GateBlock,
    pub interval: Option<IntervalParams>,
}

impl CellParams {
    pub fn zeros(variant: Variant, n_i: usize, n_c: usize) -> Self {
        let n_in = n_c + n_i;
        CellParams {
            variant,
            n_i,
            n_c,
            input: GateBlock::zeros(n_c, n_in),
            forget: variant.has_forget_gate().then(|| GateBlock::zeros(n_c, n_in)),
            candidate: GateBlock::zeros(n_c, n_in),
            output: GateBlock::zeros(n_c, n_in),
            interval: variant.has_intervals().then(|| IntervalParams::zeros(n_c, n_i)),
        }
    }

    /// Weights uniform in `±1/√n_c`, biases zero, constrained tensors
    /// clamped to be non-positive after drawing.
    pub fn init<R: Rng + ?Sized>(
        variant: Variant,
        n_i: usize,
        n_c: usize,
        constraint: ConstraintTarget,
        rng: &mut R,
    ) -> Self {
        let mut p = CellParams::zeros(variant, n_i, n_c);
        let bound = 1.0 / (n_c as f64).sqrt();
        let constrained = constraint.tensor_names();
        for t in p.tensors_mut() {
            if t.name.starts_with("b_") {
                continue;
            }
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            if constrained.contains(&t.name) {
                for v in t.data.iter_mut() {
                    *v = v.min(0.0);
                }
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        CellParams::zeros(self.variant, self.n_i, self.n_c)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_i(&self) -> usize {
        self.n_i
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    /// Plain LSTM parameters sharing the input, forget, candidate and output
    /// blocks of a cell that has a forget gate.
    pub fn lstm_subset(&self) -> Result<CellParams> {
        let forget = self
            .forget
            .clone()
            .ok_or_else(|| Error::Usage(format!("{} has no forget gate to share with an LSTM", self.variant)))?;
        Ok(CellParams {
            variant: Variant::Lstm,
            n_i: self.n_i,
            n_c: self.n_c,
            input: self.input.clone(),
            forget: Some(forget),
            candidate: self.candidate.clone(),
            output: self.output.clone(),
            interval: None,
        })
    }

    /// The short-term time gate T1.
    pub fn time_gate_1(&self) -> Option<&IntervalGate> {
        self.interval.as_ref().map(|p| &p.t1)
    }

    pub fn distance_gate_1(&self) -> Option<&IntervalGate> {
        self.interval.as_ref().map(|p| &p.d1)
    }

    /// Runs one step of whichever variant these parameters belong to.
    pub fn step(
        &self,
        input: &StepInput<'_>,
        prev: &CellState,
        ablation: GateAblation,
    ) -> Result<(CellState, StepCache)> {
        self.check_step(input, prev)?;
        let n_c = self.n_c;
        let z = Vector::concat(&prev.h, input.x);

        let sig = |v: Vector| -> Vector { v.iter().map(|&a| sigmoid_scalar(a)).collect() };
        let i = sig(self.input.w.mul_vec_bias(&z, &self.input.b));
        let f = self.forget.as_ref().map(|g| sig(g.w.mul_vec_bias(&z, &g.b)));
        let g: Vector = self
            .candidate
            .w
            .mul_vec_bias(&z, &self.candidate.b)
            .iter()
            .map(|a| a.tanh())
            .collect();
        let mut o_pre = self.output.w.mul_vec_bias(&z, &self.output.b);

        let mut gates = None;
        if let Some(ip) = &self.interval {
            o_pre.axpy(input.dt, &ip.w_to);
            o_pre.axpy(input.dd, &ip.w_do);
            let mut values: [Vector; 4] = Default::default();
            let mut inner: [Option<Vector>; 4] = Default::default();
            for (k, kind) in GATE_KINDS.into_iter().enumerate() {
                if ablation.fixed(kind) {
                    values[k] = Vector::ones(n_c);
                    continue;
                }
                let gate = ip.gate(kind);
                let tau = interval_of(kind, input);
                let s: Vector = gate.w_interval.iter().map(|&w| sigmoid_scalar(tau * w)).collect();
                let mut pre = gate.w_x.mul_vec_bias(input.x, &gate.b);
                pre.axpy(1.0, &s);
                values[k] = sig(pre);
                inner[k] = Some(s);
            }
            gates = Some(IntervalCache { values, inner });
        }
        let o = sig(o_pre);

        let mut c_hat = Vector::zeros(n_c);
        let mut c = Vector::zeros(n_c);
        match self.variant {
            Variant::Lstm => {
                let f = f.as_ref().expect("lstm has a forget gate");
                for j in 0..n_c {
                    c[j] = f[j] * prev.c[j] + i[j] * g[j];
                }
                c_hat.copy_from_slice(&c);
            }
            Variant::StLstm => {
                let f = f.as_ref().expect("st-lstm has a forget gate");
                let gc = gates.as_ref().expect("interval gates");
                for j in 0..n_c {
                    let k1 = gc.values[0][j] * gc.values[2][j];
                    let k2 = gc.values[1][j] * gc.values[3][j];
                    c_hat[j] = f[j] * prev.c[j] + i[j] * k1 * g[j];
                    c[j] = f[j] * prev.c[j] + i[j] * k2 * g[j];
                }
            }
            Variant::StClstm => {
                let gc = gates.as_ref().expect("interval gates");
                for j in 0..n_c {
                    let ik1 = i[j] * gc.values[0][j] * gc.values[2][j];
                    let k2 = gc.values[1][j] * gc.values[3][j];
                    c_hat[j] = (1.0 - ik1) * prev.c[j] + ik1 * g[j];
                    c[j] = (1.0 - i[j]) * prev.c[j] + i[j] * k2 * g[j];
                }
            }
        }
        let tanh_c_hat: Vector = c_hat.iter().map(|v| v.tanh()).collect();
        let h: Vector = o.iter().zip(tanh_c_hat.iter()).map(|(a, b)| a * b).collect();
        if !h.is_finite() || !c.is_finite() {
            return Err(Error::NonFinite("cell step"));
        }

        let state = CellState {
            c: c.clone(),
            h,
            c_hat: c_hat.clone(),
        };
        let cache = StepCache {
            variant: self.variant,
            ablation,
            z,
            c_prev: prev.c.clone(),
            dt: input.dt,
            dd: input.dd,
            i,
            f,
            g,
            o,
            gates,
            c_hat,
            tanh_c_hat,
        };
        Ok((state, cache))
    }

    fn check_step(&self, input: &StepInput<'_>, prev: &CellState) -> Result<()> {
        if input.x.len() != self.n_i {
            return Err(Error::dim("cell input x", self.n_i, input.x.len()));
        }
        if prev.h.len() != self.n_c || prev.c.len() != self.n_c {
            return Err(Error::dim(
                "cell state",
                self.n_c,
                format!("h={}, c={}", prev.h.len(), prev.c.len()),
            ));
        }
        if self.variant.has_intervals() {
            if !(input.dt.is_finite() && input.dt >= 0.0) {
                return Err(Error::Precondition(format!(
                    "Δt must be finite and ≥ 0, got {}",
                    input.dt
                )));
            }
            if !(input.dd.is_finite() && input.dd >= 0.0) {
                return Err(Error::Precondition(format!(
                    "Δd must be finite and ≥ 0, got {}",
                    input.dd
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode step: accumulates parameter gradients into `grads` and
    /// returns gradients with respect to the step inputs.
    ///
    /// `grad_h` is the upstream gradient at `h_t`; `grad_c` the upstream
    /// gradient at the carried state `c_t` (which for the spatio-temporal
    /// variants is distinct from `c_hat`).
    pub fn backward_into(
        &self,
        cache: &StepCache,
        grad_h: &[f64],
        grad_c: &[f64],
        grads: &mut CellParams,
    ) -> Result<InputGrads> {
        if cache.variant != self.variant || grads.variant != self.variant {
            return Err(Error::Usage(format!(
                "cache from {} used with {} parameters",
                cache.variant, self.variant
            )));
        }
        let n_c = self.n_c;
        if grad_h.len() != n_c || grad_c.len() != n_c {
            return Err(Error::dim(
                "cell upstream gradient",
                n_c,
                format!("{}/{}", grad_h.len(), grad_c.len()),
            ));
        }
        let i = &cache.i;
        let g = &cache.g;
        let o = &cache.o;
        let c_prev = &cache.c_prev;

        let mut d_o = Vector::zeros(n_c);
        let mut d_chat = Vector::zeros(n_c);
        for j in 0..n_c {
            let t = cache.tanh_c_hat[j];
            d_o[j] = grad_h[j] * t;
            d_chat[j] = grad_h[j] * o[j] * (1.0 - t * t);
        }

        let mut d_i = Vector::zeros(n_c);
        let mut d_f = Vector::zeros(n_c);
        let mut d_g = Vector::zeros(n_c);
        let mut d_c_prev = Vector::zeros(n_c);
        let mut d_k1 = Vector::zeros(n_c);
        let mut d_k2 = Vector::zeros(n_c);

        match self.variant {
            Variant::Lstm => {
                let f = cache.f.as_ref().expect("forget gate");
                for j in 0..n_c {
                    let dc = grad_c[j] + d_chat[j];
                    d_i[j] = dc * g[j];
                    d_f[j] = dc * c_prev[j];
                    d_g[j] = dc * i[j];
                    d_c_prev[j] = dc * f[j];
                }
            }
            Variant::StLstm => {
                let f = cache.f.as_ref().expect("forget gate");
                let gv = &cache.gates.as_ref().expect("interval gates").values;
                for j in 0..n_c {
                    let k1 = gv[0][j] * gv[2][j];
                    let k2 = gv[1][j] * gv[3][j];
                    let (dh_, dc) = (d_chat[j], grad_c[j]);
                    d_f[j] = (dh_ + dc) * c_prev[j];
                    d_c_prev[j] = (dh_ + dc) * f[j];
                    d_i[j] = dh_ * k1 * g[j] + dc * k2 * g[j];
                    d_k1[j] = dh_ * i[j] * g[j];
                    d_k2[j] = dc * i[j] * g[j];
                    d_g[j] = dh_ * i[j] * k1 + dc * i[j] * k2;
                }
            }
            Variant::StClstm => {
                let gv = &cache.gates.as_ref().expect("interval gates").values;
                for j in 0..n_c {
                    let k1 = gv[0][j] * gv[2][j];
                    let k2 = gv[1][j] * gv[3][j];
                    let (dh_, dc) = (d_chat[j], grad_c[j]);
                    let u = g[j] - c_prev[j];
                    d_c_prev[j] = dh_ * (1.0 - i[j] * k1) + dc * (1.0 - i[j]);
                    d_i[j] = dh_ * k1 * u + dc * (k2 * g[j] - c_prev[j]);
                    d_k1[j] = dh_ * i[j] * u;
                    d_k2[j] = dc * i[j] * g[j];
                    d_g[j] = dh_ * i[j] * k1 + dc * i[j] * k2;
                }
            }
        }

        // pre-activation gradients
        let sig_back =
            |d: &Vector, y: &Vector| -> Vector { d.iter().zip(y.iter()).map(|(d, y)| d * y * (1.0 - y)).collect() };
        let da_i = sig_back(&d_i, i);
        let da_o = sig_back(&d_o, o);
        let da_g: Vector = d_g.iter().zip(g.iter()).map(|(d, y)| d * (1.0 - y * y)).collect();

        let n_in = cache.z.len();
        let mut d_z = Vector::zeros(n_in);
        let mut blocks: Vec<(&GateBlock, &mut GateBlock, Vector)> = Vec::with_capacity(4);
        let CellParams {
            input: gi,
            forget: gf,
            candidate: gcand,
            output: go,
            interval: gint,
            ..
        } = grads;
        blocks.push((&self.input, gi, da_i));
        if let (Some(p), Some(gr), Some(f)) = (self.forget.as_ref(), gf.as_mut(), cache.f.as_ref()) {
            blocks.push((p, gr, sig_back(&d_f, f)));
        }
        blocks.push((&self.candidate, gcand, da_g));
        blocks.push((&self.output, go, da_o.clone()));
        for (p, gr, da) in blocks {
            gr.w.add_outer(&da, &cache.z);
            gr.b.axpy(1.0, &da);
            p.w.tmul_vec_acc(&da, &mut d_z);
        }

        let mut d_x = Vector::from(&d_z[n_c..]);
        let d_h_prev = Vector::from(&d_z[..n_c]);
        let mut d_dt = 0.0;
        let mut d_dd = 0.0;

        if let (Some(ip), Some(gip), Some(gc)) = (self.interval.as_ref(), gint.as_mut(), cache.gates.as_ref()) {
            gip.w_to.axpy(cache.dt, &da_o);
            gip.w_do.axpy(cache.dd, &da_o);
            d_dt += da_o.dot(&ip.w_to);
            d_dd += da_o.dot(&ip.w_do);

            let x = &cache.z[n_c..];
            for (k, kind) in GATE_KINDS.into_iter().enumerate() {
                let Some(s) = gc.inner[k].as_ref() else {
                    continue;
                };
                // dK = d(k1 or k2) times the partner gate
                let (d_pair, partner) = match kind {
                    IntervalGateKind::T1 => (&d_k1, &gc.values[2]),
                    IntervalGateKind::D1 => (&d_k1, &gc.values[0]),
                    IntervalGateKind::T2 => (&d_k2, &gc.values[3]),
                    IntervalGateKind::D2 => (&d_k2, &gc.values[1]),
                };
                let value = &gc.values[k];
                let da: Vector = (0..n_c)
                    .map(|j| d_pair[j] * partner[j] * value[j] * (1.0 - value[j]))
                    .collect();
                let d_inner: Vector = (0..n_c).map(|j| da[j] * s[j] * (1.0 - s[j])).collect();
                let tau = match kind {
                    IntervalGateKind::T1 | IntervalGateKind::T2 => cache.dt,
                    IntervalGateKind::D1 | IntervalGateKind::D2 => cache.dd,
                };
                let gate = ip.gate(kind);
                let ggate = gip.gate_mut(kind);
                ggate.w_x.add_outer(&da, x);
                ggate.b.axpy(1.0, &da);
                ggate.w_interval.axpy(tau, &d_inner);
                gate.w_x.tmul_vec_acc(&da, &mut d_x);
                let d_tau = d_inner.dot(&gate.w_interval);
                match kind {
                    IntervalGateKind::T1 | IntervalGateKind::T2 => d_dt += d_tau,
                    IntervalGateKind::D1 | IntervalGateKind::D2 => d_dd += d_tau,
                }
            }
        }

        Ok(InputGrads {
            h_prev: d_h_prev,
            c_prev: d_c_prev,
            x: d_x,
            dt: d_dt,
            dd: d_dd,
        })
    }
}

fn interval_of(kind: IntervalGateKind, input: &StepInput<'_>) -> f64 {
    match kind {
        IntervalGateKind::T1 | IntervalGateKind::T2 => input.dt,
        IntervalGateKind::D1 | IntervalGateKind::D2 => input.dd,
    }
}

impl ParamSet for CellParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            TensorRef::matrix("W_i", &self.input.w),
            TensorRef::vector("b_i", &self.input.b),
        ];
        if let Some(f) = &self.forget {
            out.push(TensorRef::matrix("W_f", &f.w));
            out.push(TensorRef::vector("b_f", &f.b));
        }
        out.push(TensorRef::matrix("W_c", &self.candidate.w));
        out.push(TensorRef::vector("b_c", &self.candidate.b));
        out.push(TensorRef::matrix("W_o", &self.output.w));
        out.push(TensorRef::vector("b_o", &self.output.b));
        if let Some(ip) = &self.interval {
            let names = [
                ("W_xt1", "W_t1", "b_t1"),
                ("W_xt2", "W_t2", "b_t2"),
                ("W_xd1", "W_d1", "b_d1"),
                ("W_xd2", "W_d2", "b_d2"),
            ];
            for (kind, (wx, wi, b)) in GATE_KINDS.into_iter().zip(names) {
                let gate = ip.gate(kind);
                out.push(TensorRef::matrix(wx, &gate.w_x));
                out.push(TensorRef::vector(wi, &gate.w_interval));
                out.push(TensorRef::vector(b, &gate.b));
            }
            out.push(TensorRef::vector("W_to", &ip.w_to));
            out.push(TensorRef::vector("W_do", &ip.w_do));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            TensorMut::matrix("W_i", &mut self.input.w),
            TensorMut::vector("b_i", &mut self.input.b),
        ];
        if let Some(f) = &mut self.forget {
            out.push(TensorMut::matrix("W_f", &mut f.w));
            out.push(TensorMut::vector("b_f", &mut f.b));
        }
        out.push(TensorMut::matrix("W_c", &mut self.candidate.w));
        out.push(TensorMut::vector("b_c", &mut self.candidate.b));
        out.push(TensorMut::matrix("W_o", &mut self.output.w));
        out.push(TensorMut::vector("b_o", &mut self.output.b));
        if let Some(ip) = &mut self.interval {
            let IntervalParams {
                t1,
                t2,
                d1,
                d2,
                w_to,
                w_do,
            } = ip;
            let names = [
                ("W_xt1", "W_t1", "b_t1"),
                ("W_xt2", "W_t2", "b_t2"),
                ("W_xd1", "W_d1", "b_d1"),
                ("W_xd2", "W_d2", "b_d2"),
            ];
            for (gate, (wx, wi, b)) in [t1, t2, d1, d2].into_iter().zip(names) {
                out.push(TensorMut::matrix(wx, &mut gate.w_x));
                out.push(TensorMut::vector(wi, &mut gate.w_interval));
                out.push(TensorMut::vector(b, &mut gate.b));
            }
            out.push(TensorMut::vector("W_to", w_to));
            out.push(TensorMut::vector("W_do", w_do));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Embedded POI.
    pub x: &'a [f64],
    /// Time interval to the next check-in, in hours.
    pub dt: f64,
    /// Distance to the next check-in, in kilometres.
    pub dd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    /// Long-term cell state; the recurrent carry.
    pub c: Vector,
    pub h: Vector,
    /// Short-term cell state of the current step. Equal to `c` for LSTM.
    pub c_hat: Vector,
}

impl CellState {
    pub fn zeros(n_c: usize) -> Self {
        CellState {
            c: Vector::zeros(n_c),
            h: Vector::zeros(n_c),
            c_hat: Vector::zeros(n_c),
        }
    }
}

#[derive(Debug, Clone)]
struct IntervalCache {
    /// T1, T2, D1, D2 (ones when ablated)
    values: [Vector; 4],
    /// inner σ(τ·w) per gate; `None` when ablated
    inner: [Option<Vector>; 4],
}

/// Intermediates of one forward step, consumed by the backward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    variant: Variant,
    ablation: GateAblation,
    z: Vector,
    c_prev: Vector,
    dt: f64,
    dd: f64,
    i: Vector,
    f: Option<Vector>,
    g: Vector,
    o: Vector,
    gates: Option<IntervalCache>,
    c_hat: Vector,
    tanh_c_hat: Vector,
}

/// Gate activations recorded during a forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateValues {
    pub i: Vector,
    pub f: Option<Vector>,
    pub o: Vector,
    pub candidate: Vector,
    pub t1: Option<Vector>,
    pub t2: Option<Vector>,
    pub d1: Option<Vector>,
    pub d2: Option<Vector>,
}

impl StepCache {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn ablation(&self) -> GateAblation {
        self.ablation
    }

    pub fn c_hat(&self) -> &Vector {
        &self.c_hat
    }

    pub fn gates(&self) -> GateValues {
        let gate = |k: usize| self.gates.as_ref().map(|g| g.values[k].clone());
        GateValues {
            i: self.i.clone(),
            f: self.f.clone(),
            o: self.o.clone(),
            candidate: self.g.clone(),
            t1: gate(0),
            t2: gate(1),
            d1: gate(2),
            d2: gate(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub x: Vector,
    pub dt: f64,
    pub dd: f64,
}

fn expect_variant(p: &CellParams, v: Variant) -> Result<()> {
    if p.variant != v {
        return Err(Error::Usage(format!("{v} step called with {} parameters", p.variant)));
    }
    Ok(())
}

pub fn lstm_forward(p: &CellParams, x: &[f64], prev: &CellState) -> Result<(CellState, StepCache)> {
    expect_variant(p, Variant::Lstm)?;
    p.step(&StepInput { x, dt: 0.0, dd: 0.0 }, prev, GateAblation::NONE)
}

pub fn stlstm_forward(
    p: &CellParams,
    input: &StepInput<'_>,
    prev: &CellState,
    ablation: GateAblation,
) -> Result<(CellState, StepCache)> {
    expect_variant(p, Variant::StLstm)?;
    p.step(input, prev, ablation)
}

pub fn stclstm_forward(
    p: &CellParams,
    input: &StepInput<'_>,
    prev: &CellState,
    ablation: GateAblation,
) -> Result<(CellState, StepCache)> {
    expect_variant(p, Variant::StClstm)?;
    p.step(input, prev, ablation)
}

/// Backward step returning a fresh gradient buffer.
pub fn cell_backward(
    p: &CellParams,
    cache: &StepCache,
    grad_h: &[f64],
    grad_c: &[f64],
) -> Result<(CellParams, InputGrads)> {
    let mut grads = p.zeros_like();
    let inputs = p.backward_into(cache, grad_h, grad_c, &mut grads)?;
    Ok((grads, inputs))
}

/// Parameter counts for a cell plus a softmax output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Scalars in the recurrent cell, counted by enumerating its tensors.
    pub cell: usize,
    /// Output projection `n_o × n_c` plus its bias.
    pub output: usize,
    /// Conventional closed-form count
    /// (`4n_c² + 4n_i·n_c + n_c·n_o + 3n_c` for LSTM,
    /// `5n_c² + 8n_i·n_c + n_c·n_o + 9n_c` for ST-LSTM). None for ST-CLSTM.
    pub reported_formula: Option<usize>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.cell + self.output
    }
}

pub fn count_params(variant: Variant, n_i: usize, n_c: usize, n_o: usize) -> ParamCount {
    let cell = CellParams::zeros(variant, n_i, n_c).num_params();
    let reported_formula = match variant {
        Variant::Lstm => Some(n_c * n_c * 4 + n_i * n_c * 4 + n_c * n_o + n_c * 3),
        Variant::StLstm => Some(n_c * n_c * 5 + n_i * n_c * 8 + n_c * n_o + n_c * 9),
        Variant::StClstm => None,
    };
    ParamCount {
        cell,
        output: n_o * n_c + n_o,
        reported_formula,
    }
}
