//! Parameter bundles for the layers the network is assembled from.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer, `x · w + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        let w = store.add_init(
            format!("{name}.w"),
            &[n_in, n_out],
            Init::Glorot {
                fan_in: n_in,
                fan_out: n_out,
            },
            rng,
        );
        let b = store.add_init(format!("{name}.b"), &[n_out], Init::Zeros, rng);
        Dense { w, b, n_in, n_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.affine(x, w, Some(b))
    }
}

/// Long short-term memory cell with gate order input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    /// Forget-gate bias starts at 1.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.add_init(
            format!("{name}.wx"),
            &[input, 4 * hidden],
            Init::Glorot {
                fan_in: input,
                fan_out: 4 * hidden,
            },
            rng,
        );
        let wh = store.add_init(
            format!("{name}.wh"),
            &[hidden, 4 * hidden],
            Init::Recurrent { n: hidden },
            rng,
        );
        let mut bias = vec![T::zero(); 4 * hidden];
        bias[hidden..2 * hidden].fill(T::one());
        let b = store.add(format!("{name}.b"), Tensor::vector(bias));
        Lstm {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<'_, T>) -> (Var, Var) {
        let h = g.input(Tensor::zeros(&[self.hidden]));
        let c = g.input(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    /// One recurrence step; returns `(h, c)`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(x) != [self.input] {
            return Err(Error::shape(
                "lstm",
                format!("input {:?}, expected [{}]", g.shape(x), self.input),
            ));
        }
        let (wx, wh, b) = (g.param(self.wx), g.param(self.wh), g.param(self.b));
        let xw = g.matmul(x, wx)?;
        let hw = g.matmul(h_prev, wh)?;
        let pre = g.add(xw, hw)?;
        let gates = g.add_row(pre, b)?;
        let n = self.hidden;
        let i = g.slice(gates, 0, n)?;
        let f = g.slice(gates, n, n)?;
        let cand = g.slice(gates, 2 * n, n)?;
        let o = g.slice(gates, 3 * n, n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs over a sequence from a zero state; returns every hidden state and
    /// the final cell state.
    pub fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: &[Var]) -> Result<(Vec<Var>, Var)> {
        let (mut h, mut c) = self.zero_state(g);
        let mut hs = Vec::with_capacity(xs.len());
        for &x in xs {
            (h, c) = self.step(g, x, h, c)?;
            hs.push(h);
        }
        Ok((hs, c))
    }
}

/// Bidirectional LSTM; position `i` of the output is `h_fwd_i ‖ h_bwd_i`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        BiLstm {
            fwd: Lstm::new(store, rng, &format!("{name}.fwd"), input, hidden),
            bwd: Lstm::new(store, rng, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::shape("bilstm", "empty sequence"));
        }
        let (fwd, _) = self.fwd.run(g, xs)?;
        let reversed: Vec<Var> = xs.iter().rev().copied().collect();
        let (mut bwd, _) = self.bwd.run(g, &reversed)?;
        bwd.reverse();
        fwd.iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat(&[f, b]))
            .collect()
    }
}

/// Additive attention: `score_j = v · tanh(W_s·s + W_m·M_j)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w_state: ParamId,
    pub w_memory: ParamId,
    pub v: ParamId,
    pub size: usize,
}

/// Memory rows with their state-independent projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    pub memory: Var,
    pub projected: Var,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        state_dim: usize,
        memory_dim: usize,
        size: usize,
    ) -> Self {
        let w_state = store.add_init(
            format!("{name}.w_state"),
            &[state_dim, size],
            Init::Glorot {
                fan_in: state_dim,
                fan_out: size,
            },
            rng,
        );
        let w_memory = store.add_init(
            format!("{name}.w_memory"),
            &[memory_dim, size],
            Init::Glorot {
                fan_in: memory_dim,
                fan_out: size,
            },
            rng,
        );
        let v = store.add_init(
            format!("{name}.v"),
            &[size],
            Init::Glorot {
                fan_in: size,
                fan_out: 1,
            },
            rng,
        );
        Attention {
            w_state,
            w_memory,
            v,
            size,
        }
    }

    pub fn prepare<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var) -> Result<AttentionMemory> {
        let wm = g.param(self.w_memory);
        let projected = g.matmul(memory, wm)?;
        Ok(AttentionMemory { memory, projected })
    }

    /// Returns `(context, weights)`. Rows whose mask entry is `false` get zero
    /// weight; an all-false mask is an error.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        mem: &AttentionMemory,
        state: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let (ws, v) = (g.param(self.w_state), g.param(self.v));
        let sp = g.matmul(state, ws)?;
        let pre = g.add_row(mem.projected, sp)?;
        let t = g.tanh(pre);
        let scores = g.matvec(t, v)?;
        let weights = g.softmax(scores, mask)?;
        let context = g.matmul(weights, mem.memory)?;
        Ok((context, weights))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        state: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let mem = self.prepare(g, memory)?;
        self.attend(g, &mem, state, mask)
    }
}
