use serde::{Deserialize, Serialize};

use super::init::{glorot, InitRng};
use super::{Activation, DenseLayer};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Srnn,
    Gru,
    Lstm,
}

impl CellKind {
    fn gate_count(self) -> usize {
        match self {
            CellKind::Srnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Srnn => &["h"],
            CellKind::Gru => &["z", "r", "h"],
            CellKind::Lstm => &["i", "f", "o", "c"],
        }
    }
}

/// Input weights `W: [in×H]`, recurrent weights `U: [H×H]`, bias `b: [H]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gate {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// One recurrent cell.
///
/// Gate order: LSTM `[i, f, o, c̃]`, GRU `[z, r, h̃]`, SRNN `[h]`. The SRNN
/// cell also owns the output map `y = act(W_y·h + b_y)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    pub gates: Vec<Gate>,
    /// SRNN state and output activation.
    pub activation: Activation,
    pub output: Option<(ParamId, ParamId)>,
}

impl RecurrentCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        kind: CellKind,
        input_size: usize,
        hidden_size: usize,
    ) -> Self {
        let h = hidden_size;
        let gates = kind
            .gate_names()
            .iter()
            .map(|g| Gate {
                w: store.add(
                    format!("{name}.W_{g}"),
                    ParamKind::Weight,
                    glorot(rng, &[input_size, h], input_size, h),
                ),
                u: store.add(format!("{name}.U_{g}"), ParamKind::Weight, glorot(rng, &[h, h], h, h)),
                b: store.add(format!("{name}.b_{g}"), ParamKind::Bias, Tensor::zeros(&[h])),
            })
            .collect();
        let output = (kind == CellKind::Srnn).then(|| {
            (
                store.add(format!("{name}.W_y"), ParamKind::Weight, glorot(rng, &[h, h], h, h)),
                store.add(format!("{name}.b_y"), ParamKind::Bias, Tensor::zeros(&[h])),
            )
        });
        RecurrentCell {
            kind,
            input_size,
            hidden_size,
            gates,
            activation: Activation::Tanh,
            output,
        }
    }

    /// Overwrites every weight and bias with zero.
    pub fn zero_params(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            let n = store.get(id).numel();
            store.set_data(id, &vec![0.0; n]).expect("same size");
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.gates.iter().flat_map(|g| [g.w, g.u, g.b]).collect();
        if let Some((w, b)) = self.output {
            ids.extend([w, b]);
        }
        ids
    }

    fn check(&self, tape: &Tape, x: Var, h: Var) -> Result<()> {
        let (sx, sh) = (tape.shape(x), tape.shape(h));
        if sx.len() != 2 || sx[1] != self.input_size || sh.len() != 2 || sh[1] != self.hidden_size || sx[0] != sh[0] {
            return Err(Error::dim(format!(
                "{:?} cell ({}→{}) got input {sx:?} and state {sh:?}",
                self.kind, self.input_size, self.hidden_size
            )));
        }
        Ok(())
    }

    /// `x·W + h·U + b` for one gate.
    fn preact(&self, tape: &mut Tape, store: &ParamStore, gate: usize, x: Var, h: Var) -> Result<Var> {
        let g = &self.gates[gate];
        let (w, u, b) = (tape.param(store, g.w), tape.param(store, g.u), tape.param(store, g.b));
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    }

    fn expect(&self, kind: CellKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "{kind:?} step called on a {:?} cell",
                self.kind
            )));
        }
        Ok(())
    }

    /// Simple recurrent step: `h_t = σ(x W_x + h_prev W_h + b_h)`,
    /// `y_t = σ(h_t W_y + b_y)`. Returns `(h_t, y_t)`.
    pub fn srnn_step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var) -> Result<(Var, Var)> {
        self.expect(CellKind::Srnn)?;
        self.check(tape, x, h_prev)?;
        let act = self.activation.unary();
        let z = self.preact(tape, store, 0, x, h_prev)?;
        let h = tape.unary(act, z)?;
        let (wy, by) = self.output.expect("srnn output weights");
        let (wy, by) = (tape.param(store, wy), tape.param(store, by));
        let zy = tape.matmul(h, wy)?;
        let zy = tape.add(zy, by)?;
        let y = tape.unary(act, zy)?;
        Ok((h, y))
    }

    /// LSTM step. Returns `(h_t, c_t)` with
    /// `c_t = f ⊙ c_prev + i ⊙ c̃` and `h_t = o ⊙ tanh(c_t)`.
    pub fn lstm_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        self.expect(CellKind::Lstm)?;
        self.check(tape, x, h_prev)?;
        if tape.shape(c_prev) != tape.shape(h_prev) {
            return Err(Error::dim(format!(
                "cell state {:?} does not match hidden state {:?}",
                tape.shape(c_prev),
                tape.shape(h_prev)
            )));
        }
        let zi = self.preact(tape, store, 0, x, h_prev)?;
        let i = tape.sigmoid(zi)?;
        let zf = self.preact(tape, store, 1, x, h_prev)?;
        let f = tape.sigmoid(zf)?;
        let zo = self.preact(tape, store, 2, x, h_prev)?;
        let o = tape.sigmoid(zo)?;
        let zc = self.preact(tape, store, 3, x, h_prev)?;
        let cand = tape.tanh(zc)?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, cand)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// GRU step: `h_t = (1 − z) ⊙ h_prev + z ⊙ h̃` with
    /// `h̃ = tanh(x W_h + (r ⊙ h_prev) U_h + b_h)`.
    pub fn gru_step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        self.expect(CellKind::Gru)?;
        self.check(tape, x, h_prev)?;
        let zz = self.preact(tape, store, 0, x, h_prev)?;
        let z = tape.sigmoid(zz)?;
        let zr = self.preact(tape, store, 1, x, h_prev)?;
        let r = tape.sigmoid(zr)?;
        let rh = tape.mul(r, h_prev)?;
        let zh = self.preact(tape, store, 2, x, rh)?;
        let cand = tape.tanh(zh)?;
        let one_minus_z = tape.one_minus(z)?;
        let keep = tape.mul(one_minus_z, h_prev)?;
        let write = tape.mul(z, cand)?;
        tape.add(keep, write)
    }

    /// Runs the cell over `seq: [B×T×in]` from zero state and returns the
    /// per-timestep outputs in time order. With `reverse`, the cell reads
    /// the sequence right to left; outputs are still indexed by original
    /// timestep.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, seq: Var, reverse: bool) -> Result<Vec<Var>> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input_size {
            return Err(Error::dim(format!(
                "{:?} layer expects [B×T×{}] input, got {s:?}",
                self.kind, self.input_size
            )));
        }
        let (b, t) = (s[0], s[1]);
        let zeros = Tensor::zeros(&[b, self.hidden_size]);
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in order {
            let x = tape.select_time(seq, step)?;
            let out = match self.kind {
                CellKind::Srnn => {
                    let (hn, y) = self.srnn_step(tape, store, x, h)?;
                    h = hn;
                    y
                }
                CellKind::Lstm => {
                    let (hn, cn) = self.lstm_step(tape, store, x, h, c)?;
                    h = hn;
                    c = cn;
                    hn
                }
                CellKind::Gru => {
                    h = self.gru_step(tape, store, x, h)?;
                    h
                }
            };
            outs[step] = Some(out);
        }
        Ok(outs.into_iter().map(|o| o.expect("every step visited")).collect())
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_size;
        let gates = self.kind.gate_count() * (self.input_size * h + h * h + h);
        gates + if self.output.is_some() { h * h + h } else { 0 }
    }
}

/// Bidirectional LSTM with the output merge
/// `y_t = W_f·h→_t + W_b·h←_t + b_y`, stored as one dense layer over the
/// concatenated states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: RecurrentCell,
    pub bwd: RecurrentCell,
    pub merge: DenseLayer,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        out_dim: usize,
    ) -> Self {
        let fwd = RecurrentCell::new(
            store,
            rng,
            &format!("{name}.fwd"),
            CellKind::Lstm,
            input_size,
            hidden_size,
        );
        let bwd = RecurrentCell::new(
            store,
            rng,
            &format!("{name}.bwd"),
            CellKind::Lstm,
            input_size,
            hidden_size,
        );
        let merge = DenseLayer::new(
            store,
            rng,
            &format!("{name}.merge"),
            2 * hidden_size,
            out_dim,
            Activation::Identity,
        );
        BiLstm { fwd, bwd, merge }
    }

    pub fn from_parts(fwd: RecurrentCell, bwd: RecurrentCell, merge: DenseLayer) -> Result<Self> {
        if fwd.kind != CellKind::Lstm || bwd.kind != CellKind::Lstm {
            return Err(Error::Contract("bidirectional layer needs two LSTM cells".into()));
        }
        if fwd.hidden_size != bwd.hidden_size || fwd.input_size != bwd.input_size {
            return Err(Error::dim(format!(
                "forward cell {}→{} and backward cell {}→{} differ",
                fwd.input_size, fwd.hidden_size, bwd.input_size, bwd.hidden_size
            )));
        }
        if merge.in_dim != 2 * fwd.hidden_size {
            return Err(Error::dim(format!(
                "merge layer takes {} inputs, expected {}",
                merge.in_dim,
                2 * fwd.hidden_size
            )));
        }
        Ok(BiLstm { fwd, bwd, merge })
    }

    /// Both directions' hidden states per timestep, in time order.
    pub fn states(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let f = self.fwd.run(tape, store, seq, false)?;
        let b = self.bwd.run(tape, store, seq, true)?;
        Ok((f, b))
    }

    /// Merged output sequence `[B×T×out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let (f, b) = self.states(tape, store, seq)?;
        let mut ys = Vec::with_capacity(f.len());
        for (hf, hb) in f.into_iter().zip(b) {
            let cat = tape.concat_last(&[hf, hb])?;
            ys.push(self.merge.forward(tape, store, cat)?);
        }
        tape.stack_time(&ys)
    }

    /// Merge of each direction's final state: `h→_T` and `h←_1`.
    pub fn forward_last(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let (f, b) = self.states(tape, store, seq)?;
        let cat = tape.concat_last(&[*f.last().expect("T ≥ 1"), b[0]])?;
        self.merge.forward(tape, store, cat)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fwd.param_ids();
        ids.extend(self.bwd.param_ids());
        ids.extend(self.merge.param_ids());
        ids
    }
}
