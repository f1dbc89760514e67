//! Layers shared by the ASR, TTS and speaker models.
//!
//! Every layer only holds [`ParamId`]s into the owning model's
//! [`ParamStore`]; evaluation goes through a [`Graph`] binding.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bind, Graph, Var, GATHER_ZERO};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), in_dim, out_dim, in_dim, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    /// Same as [`Linear::new`] but with weights scaled by `gain`.
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layer = Self::new(store, name, in_dim, out_dim, true, rng);
        store.get_mut(layer.w).scale_in_place(gain);
        layer
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward(&self, g: &mut Graph, b: Bind, x: Var) -> Var {
        let w = g.param(b, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(bias) => {
                let bias = g.param(b, bias);
                g.add_row(y, bias)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add_uniform(format!("{name}.table"), vocab, dim, 1, rng);
        Self { table, dim }
    }

    pub fn forward(&self, g: &mut Graph, b: Bind, ids: &[usize]) -> Var {
        let table = g.param(b, self.table);
        let d = self.dim;
        let idx = ids
            .iter()
            .flat_map(|&id| (0..d).map(move |j| (id * d + j) as u32))
            .collect();
        g.gather(table, ids.len(), d, idx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct Lstm {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = store.add_uniform(format!("{name}.wx"), in_dim, 4 * hidden, hidden, rng);
        let wh = store.add_uniform(format!("{name}.wh"), hidden, 4 * hidden, hidden, rng);
        let mut b = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.data_mut()[j] = 1.0;
        }
        let bias = store.add(format!("{name}.b"), b);
        Self {
            wx,
            wh,
            bias,
            in_dim,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState {
            h: g.input(Tensor::zeros(1, self.hidden)),
            c: g.input(Tensor::zeros(1, self.hidden)),
        }
    }

    /// Input projection `x·Wx + b` for one or many rows.
    pub fn project(&self, g: &mut Graph, b: Bind, x: Var) -> Var {
        let wx = g.param(b, self.wx);
        let bias = g.param(b, self.bias);
        let p = g.matmul(x, wx);
        g.add_row(p, bias)
    }

    /// One step given an already projected input row.
    pub fn step_projected(&self, g: &mut Graph, b: Bind, xp: Var, s: LstmState) -> LstmState {
        let wh = g.param(b, self.wh);
        let rec = g.matmul(s.h, wh);
        let gates = g.add(xp, rec);
        let hc = g.lstm_cell(gates, s.c);
        let h = g.slice_cols(hc, 0, self.hidden);
        let c = g.slice_cols(hc, self.hidden, 2 * self.hidden);
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, b: Bind, x: Var, s: LstmState) -> LstmState {
        let xp = self.project(g, b, x);
        self.step_projected(g, b, xp, s)
    }

    /// Runs over all rows of `xs` (`T×in`), optionally right to left;
    /// returns hidden states in time order (`T×H`).
    pub fn sequence(&self, g: &mut Graph, b: Bind, xs: Var, reverse: bool) -> Var {
        let t = g.shape(xs).0;
        let xp = self.project(g, b, xs);
        let mut s = self.zero_state(g);
        let mut hs = vec![s.h; t];
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for i in order {
            let row = g.row(xp, i);
            s = self.step_projected(g, b, row, s);
            hs[i] = s.h;
        }
        g.vcat(&hs)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, g: &mut Graph, b: Bind, xs: Var) -> Var {
        let f = self.fwd.sequence(g, b, xs, false);
        let r = self.bwd.sequence(g, b, xs, true);
        g.hcat(&[f, r])
    }
}

/// Same-padded 1-D convolution over time: `T×Cin → T×Cout`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    lin: Linear,
    kernel: usize,
    in_ch: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            lin: Linear::new(store, name, kernel * in_ch, out_ch, bias, rng),
            kernel,
            in_ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: Bind, x: Var) -> Var {
        let cols = im2col_1d(g, x, self.kernel);
        debug_assert_eq!(g.shape(x).1, self.in_ch);
        self.lin.forward(g, b, cols)
    }
}

/// `T×C → T×(K·C)` patches with zero padding of `K/2` on both ends.
pub fn im2col_1d(g: &mut Graph, x: Var, kernel: usize) -> Var {
    let (t, c) = g.shape(x);
    let half = kernel / 2;
    let mut idx = Vec::with_capacity(t * kernel * c);
    for row in 0..t {
        for k in 0..kernel {
            let src = row as isize + k as isize - half as isize;
            for ch in 0..c {
                if src < 0 || src >= t as isize {
                    idx.push(GATHER_ZERO);
                } else {
                    idx.push((src as usize * c + ch) as u32);
                }
            }
        }
    }
    g.gather(x, t, kernel * c, idx)
}

/// 3×3 same-padded 2-D convolution over a `(time, freq, channel)` volume
/// stored as a `(T·F)×C` matrix.
#[derive(Clone, Debug)]
pub struct Conv2d {
    lin: Linear,
    in_ch: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin: Linear::new(store, name, 9 * in_ch, out_ch, true, rng),
            in_ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: Bind, x: Var, time: usize, freq: usize) -> Var {
        let (rows, c) = g.shape(x);
        assert_eq!(rows, time * freq);
        assert_eq!(c, self.in_ch);
        let mut idx = Vec::with_capacity(rows * 9 * c);
        for t in 0..time as isize {
            for f in 0..freq as isize {
                for dt in -1..=1isize {
                    for df in -1..=1isize {
                        let (st, sf) = (t + dt, f + df);
                        let inside = st >= 0 && st < time as isize && sf >= 0 && sf < freq as isize;
                        for ch in 0..c {
                            if inside {
                                idx.push(((st as usize * freq + sf as usize) * c + ch) as u32);
                            } else {
                                idx.push(GATHER_ZERO);
                            }
                        }
                    }
                }
            }
        }
        let cols = g.gather(x, rows, 9 * c, idx);
        self.lin.forward(g, b, cols)
    }
}

/// 2×2 max pooling (ceil mode) over a `(T·F)×C` volume; returns the pooled
/// node and its `(time, freq)` extent.
pub fn max_pool_2x2(g: &mut Graph, x: Var, time: usize, freq: usize) -> (Var, usize, usize) {
    let (rows, c) = g.shape(x);
    assert_eq!(rows, time * freq);
    let (ot, of) = (time.div_ceil(2), freq.div_ceil(2));
    let v = g.value(x).data();
    let mut idx = Vec::with_capacity(ot * of * c);
    for t in 0..ot {
        for f in 0..of {
            for ch in 0..c {
                let mut best: Option<(usize, f64)> = None;
                for st in 2 * t..(2 * t + 2).min(time) {
                    for sf in 2 * f..(2 * f + 2).min(freq) {
                        let i = (st * freq + sf) * c + ch;
                        if best.is_none_or(|(_, bv)| v[i] > bv) {
                            best = Some((i, v[i]));
                        }
                    }
                }
                idx.push(best.unwrap().0 as u32);
            }
        }
    }
    (g.gather(x, ot * of, c, idx), ot, of)
}

/// Location-aware content attention: the previous alignment is convolved
/// and added to the query/key energy before the softmax.
#[derive(Clone, Debug)]
pub struct LocationAttention {
    query: Linear,
    key: Linear,
    loc_conv: ParamId,
    loc_proj: Linear,
    score: ParamId,
    kernel: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionKeys {
    pub keys: Var,
    pub values: Var,
}

impl LocationAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        value_dim: usize,
        att_dim: usize,
        loc_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd location kernel only");
        Self {
            query: Linear::new(store, &format!("{name}.query"), query_dim, att_dim, false, rng),
            key: Linear::new(store, &format!("{name}.key"), value_dim, att_dim, true, rng),
            loc_conv: store.add_uniform(format!("{name}.loc_conv"), kernel, loc_channels, kernel, rng),
            loc_proj: Linear::new(store, &format!("{name}.loc_proj"), loc_channels, att_dim, false, rng),
            score: store.add_uniform(format!("{name}.score"), att_dim, 1, att_dim, rng),
            kernel,
        }
    }

    /// Precomputes the key projection of the encoder states (`N×D`).
    pub fn prepare(&self, g: &mut Graph, b: Bind, values: Var) -> AttentionKeys {
        let keys = self.key.forward(g, b, values);
        AttentionKeys { keys, values }
    }

    /// One attention step; `prev` is a `1×N` distribution. Returns
    /// `(context 1×D, weights 1×N)`.
    pub fn step(&self, g: &mut Graph, b: Bind, query: Var, mem: AttentionKeys, prev: Var) -> (Var, Var) {
        let n = g.shape(mem.keys).0;
        assert_eq!(g.shape(prev), (1, n), "previous alignment length mismatch");
        let q = self.query.forward(g, b, query);
        let prev_col = g.reshape(prev, n, 1);
        let patches = im2col_1d(g, prev_col, self.kernel);
        let conv = g.param(b, self.loc_conv);
        let loc = g.matmul(patches, conv);
        let loc = self.loc_proj.forward(g, b, loc);
        let e = g.add(mem.keys, loc);
        let e = g.add_row(e, q);
        let e = g.tanh(e);
        let score = g.param(b, self.score);
        let energies = g.matmul(e, score);
        let energies = g.reshape(energies, 1, n);
        let weights = g.softmax_rows(energies);
        let context = g.matmul(weights, mem.values);
        (context, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pool_ceil_lengths() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(5 * 3, 1, (0..15).map(f64::from).collect()));
        let (p, t, f) = max_pool_2x2(&mut g, x, 5, 3);
        assert_eq!((t, f), (3, 2));
        // rows (0..2)x(0..2) -> max at (1,1) = 4; last time row alone.
        assert_eq!(g.value(p).data(), &[4.0, 5.0, 10.0, 11.0, 13.0, 14.0]);
    }

    #[test]
    fn im2col_pads_with_zeros() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let p = im2col_1d(&mut g, x, 3);
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn bilstm_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = BiLstm::new(&mut store, "b", 3, 4, &mut rng);
        let mut g = Graph::new();
        let bind = g.bind(&store, true);
        let x = g.input(Tensor::filled(6, 3, 0.5));
        let y = l.forward(&mut g, bind, x);
        assert_eq!(g.shape(y), (6, 8));
    }
}
