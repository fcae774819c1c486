//! LSTM cell and the three recurrent modules: the plain two-layer stack, the
//! stack of three residual blocks, and the densely connected block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{msra_init, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Residual,
    Dense,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::Residual, Variant::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Residual => "residual",
            Variant::Dense => "dense",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Variant::Plain),
            "residual" => Ok(Variant::Residual),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Desk,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale {other:?}"))),
        }
    }
}

/// Desk widths are the full-scale widths divided by this factor.
pub const DESK_DIVISOR: usize = 8;

/// What the dense block hands to the regression head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseOutput {
    /// All four hidden vectors, concatenated.
    #[default]
    Concat,
    /// Only the last layer's hidden vector.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentModuleConfig {
    pub variant: Variant,
    /// Width of the extractor output fed to the module.
    pub feature_width: usize,
    /// Units per LSTM; for the dense variant this is the growth width.
    pub hidden: usize,
    #[serde(default)]
    pub dense_output: DenseOutput,
}

impl RecurrentModuleConfig {
    pub fn full(variant: Variant) -> Self {
        let (feature_width, hidden) = match variant {
            Variant::Plain => (1024, 1024),
            Variant::Residual => (768, 768),
            Variant::Dense => (900, 512),
        };
        Self {
            variant,
            feature_width,
            hidden,
            dense_output: DenseOutput::Concat,
        }
    }

    pub fn desk(variant: Variant) -> Self {
        let full = Self::full(variant);
        Self {
            feature_width: full.feature_width / DESK_DIVISOR,
            hidden: full.hidden / DESK_DIVISOR,
            ..full
        }
    }

    pub fn for_scale(variant: Variant, scale: Scale) -> Self {
        match scale {
            Scale::Full => Self::full(variant),
            Scale::Desk => Self::desk(variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.hidden == 0 {
            return Err(Error::Config("recurrent widths must be positive".into()));
        }
        if self.variant == Variant::Residual && self.feature_width != self.hidden {
            return Err(Error::Config(format!(
                "residual merge needs feature width == hidden width, got {} and {}",
                self.feature_width, self.hidden
            )));
        }
        Ok(())
    }

    /// `(input, hidden)` for every LSTM in execution order.
    pub fn lstm_shapes(&self) -> Vec<(usize, usize)> {
        let (f, h) = (self.feature_width, self.hidden);
        match self.variant {
            Variant::Plain => vec![(f, h), (f + h, h)],
            Variant::Residual => vec![(f, h); 6],
            Variant::Dense => (0..4).map(|k| (f + k * h, h)).collect(),
        }
    }

    pub fn output_width(&self) -> usize {
        match (self.variant, self.dense_output) {
            (Variant::Dense, DenseOutput::Concat) => 4 * self.hidden,
            _ => self.hidden,
        }
    }

    /// Exact parameter total of the module, without instantiating it.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(self
            .lstm_shapes()
            .iter()
            .map(|&(d, h)| lstm_param_count(d, h))
            .sum())
    }
}

/// `4·((d + h)·h + h)`: combined input/recurrent weights plus biases for the
/// four gates.
pub fn lstm_param_count(input: usize, hidden: usize) -> usize {
    4 * ((input + hidden) * hidden + hidden)
}

/// Hidden and cell vectors of one LSTM, `[batch × hidden]` each.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One LSTM layer. Weight layout is `[(d + h) × 4h]` with gate column blocks
/// ordered input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = input + hidden;
        let w = msra_init(&[fan_in, 4 * hidden], fan_in, rng)?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
        Ok(Self {
            input,
            hidden,
            weight: store.add_trainable(format!("{prefix}.w"), w)?,
            bias: store.add_trainable(format!("{prefix}.b"), b)?,
        })
    }

    pub fn param_count(&self) -> usize {
        lstm_param_count(self.input, self.hidden)
    }

    /// `i,f,o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.input {
            return Err(Error::Shape {
                op: "lstm_cell input",
                lhs: xs,
                rhs: vec![self.input],
            });
        }
        let hs = g.value(state.h).shape().to_vec();
        if hs != [xs[0], self.hidden] || g.value(state.c).shape() != hs.as_slice() {
            return Err(Error::Shape {
                op: "lstm_cell state",
                lhs: hs,
                rhs: vec![xs[0], self.hidden],
            });
        }
        let h = self.hidden;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let z = g.concat(&[x, state.h], 1)?;
        let pre = g.matmul(z, w)?;
        let pre = g.add_bias(pre, b)?;
        let i = g.slice(pre, 1, 0, h)?;
        let f = g.slice(pre, 1, h, h)?;
        let o = g.slice(pre, 1, 2 * h, h)?;
        let cand = g.slice(pre, 1, 3 * h, h)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h_new = g.mul(o, tc)?;
        Ok(LstmState { h: h_new, c })
    }
}

/// Recurrent state as plain values, for carrying across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl RecurrentState {
    pub fn zeros(config: &RecurrentModuleConfig, batch: usize) -> Self {
        let layers = config
            .lstm_shapes()
            .iter()
            .map(|&(_, h)| (Tensor::zeros(&[batch, h]), Tensor::zeros(&[batch, h])))
            .collect();
        Self { layers }
    }

    /// Zeroes every hidden and cell vector.
    pub fn reset(&mut self) {
        for (h, c) in &mut self.layers {
            h.data_mut().fill(0.0);
            c.data_mut().fill(0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(h, c)| h.data().iter().chain(c.data()).all(|&v| v == 0.0))
    }

    pub fn to_graph(&self, g: &mut Graph) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|(h, c)| LstmState {
                h: g.constant(h.clone()),
                c: g.constant(c.clone()),
            })
            .collect()
    }

    pub fn from_graph(g: &Graph, states: &[LstmState]) -> Self {
        Self {
            layers: states
                .iter()
                .map(|s| (g.value(s.h).clone(), g.value(s.c).clone()))
                .collect(),
        }
    }
}

/// Instantiated recurrent module of any variant.
#[derive(Clone, Debug)]
pub struct RecurrentModule {
    pub config: RecurrentModuleConfig,
    pub lstms: Vec<Lstm>,
}

impl RecurrentModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: RecurrentModuleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.lstm_shapes();
        let mut lstms = Vec::with_capacity(shapes.len());
        for (k, &(d, h)) in shapes.iter().enumerate() {
            let prefix = match config.variant {
                Variant::Plain => format!("rnn.plain.l{}", k + 1),
                Variant::Residual => format!("rnn.residual.b{}.l{}", k / 2 + 1, k % 2 + 1),
                Variant::Dense => format!("rnn.dense.l{}", k + 1),
            };
            lstms.push(Lstm::new(store, &prefix, d, h, rng)?);
        }
        let m = Self { config, lstms };
        m.check_dense_width_law()?;
        Ok(m)
    }

    fn check_dense_width_law(&self) -> Result<()> {
        if self.config.variant == Variant::Dense {
            let (w, g) = (self.config.feature_width, self.config.hidden);
            for (k, l) in self.lstms.iter().enumerate() {
                if l.input != w + k * g {
                    return Err(Error::Config(format!(
                        "dense layer {} input width {} != {} + {}·{}",
                        k + 1,
                        l.input,
                        w,
                        k,
                        g
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.lstms.iter().map(Lstm::param_count).sum()
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState::zeros(&self.config, batch)
    }

    /// Advances every LSTM by one time step on `x [batch × feature_width]`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        states: &[LstmState],
    ) -> Result<(Var, Vec<LstmState>)> {
        if states.len() != self.lstms.len() {
            return Err(Error::invalid(format!(
                "{} states supplied for {} LSTMs",
                states.len(),
                self.lstms.len()
            )));
        }
        match self.config.variant {
            Variant::Plain => self.plain_step(g, store, x, states),
            Variant::Residual => self.residual_stack_step(g, store, x, states),
            Variant::Dense => self.dense_block_step(g, store, x, states),
        }
    }

    /// Layer 1 reads the features; layer 2 reads `[features, h₁]`.
    fn plain_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        states: &[LstmState],
    ) -> Result<(Var, Vec<LstmState>)> {
        let s1 = self.lstms[0].step(g, store, x, states[0])?;
        let in2 = g.concat(&[x, s1.h], 1)?;
        let s2 = self.lstms[1].step(g, store, in2, states[1])?;
        ensure_finite(g, s2.h, "plain stack output")?;
        Ok((s2.h, vec![s1, s2]))
    }

    /// `y = x + LSTM₂(LSTM₁(x))` for block `block` (0-based).
    pub fn residual_block_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        x: Var,
        states: &[LstmState],
    ) -> Result<(Var, [LstmState; 2])> {
        let (l1, l2) = (&self.lstms[2 * block], &self.lstms[2 * block + 1]);
        let s1 = l1.step(g, store, x, states[2 * block])?;
        let s2 = l2.step(g, store, s1.h, states[2 * block + 1])?;
        let y = g.add(x, s2.h)?;
        ensure_finite(g, y, &format!("residual block {}", block + 1))?;
        Ok((y, [s1, s2]))
    }

    fn residual_stack_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        states: &[LstmState],
    ) -> Result<(Var, Vec<LstmState>)> {
        let mut y = x;
        let mut next = Vec::with_capacity(states.len());
        for block in 0..self.lstms.len() / 2 {
            let (out, s) = self.residual_block_step(g, store, block, y, states)?;
            next.extend(s);
            y = out;
        }
        Ok((y, next))
    }

    /// Layer k reads `[x, h₁, …, h_{k−1}]`.
    fn dense_block_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        states: &[LstmState],
    ) -> Result<(Var, Vec<LstmState>)> {
        let mut inputs = vec![x];
        let mut hiddens = Vec::with_capacity(4);
        let mut next = Vec::with_capacity(4);
        for (k, lstm) in self.lstms.iter().enumerate() {
            let layer_in = g.concat(&inputs, 1)?;
            let expected = self.config.feature_width + k * self.config.hidden;
            if g.value(layer_in).shape()[1] != expected {
                return Err(Error::Shape {
                    op: "dense layer input",
                    lhs: g.value(layer_in).shape().to_vec(),
                    rhs: vec![expected],
                });
            }
            let s = lstm.step(g, store, layer_in, states[k])?;
            inputs.push(s.h);
            hiddens.push(s.h);
            next.push(s);
        }
        let y = match self.config.dense_output {
            DenseOutput::Concat => g.concat(&hiddens, 1)?,
            DenseOutput::Last => hiddens[3],
        };
        ensure_finite(g, y, "dense block output")?;
        Ok((y, next))
    }
}

fn ensure_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
