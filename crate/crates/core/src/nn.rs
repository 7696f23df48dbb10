//! Small layers shared by the path policy and the interval model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{Graph, ParamId, ParamStore, Result, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.init_matrix(&format!("{name}.w"), in_dim, out_dim, rng)?;
        let b = store.init_constant(&format!("{name}.b"), vec![1, out_dim], 0.0)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// `x W + b` for `x` of shape `r x in_dim`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    Gru,
    Lstm,
}

/// Recurrent state: hidden vector plus the LSTM cell (unused by the GRU).
#[derive(Debug, Clone, Copy)]
pub struct RecState {
    pub h: Var,
    pub c: Option<Var>,
}

/// Single-layer gated recurrent cell over `1 x in_dim` inputs.
#[derive(Debug, Clone)]
pub struct Recurrent {
    kind: RecurrentKind,
    x_proj: Linear,
    h_proj: ParamId,
    hidden: usize,
}

impl Recurrent {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: RecurrentKind,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = match kind {
            RecurrentKind::Gru => 3,
            RecurrentKind::Lstm => 4,
        };
        let x_proj = Linear::new(store, &format!("{name}.x"), in_dim, gates * hidden, rng)?;
        let h_proj = store.init_matrix(&format!("{name}.h"), hidden, gates * hidden, rng)?;
        if kind == RecurrentKind::Lstm {
            // forget-gate bias of 1
            let b = store.value_mut(x_proj.b);
            b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        }
        Ok(Self {
            kind,
            x_proj,
            h_proj,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, g: &mut Graph) -> RecState {
        let h = g.row(vec![0.0; self.hidden]);
        let c = match self.kind {
            RecurrentKind::Gru => None,
            RecurrentKind::Lstm => Some(g.row(vec![0.0; self.hidden])),
        };
        RecState { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: Var, s: RecState) -> Result<RecState> {
        let n = self.hidden;
        let gx = self.x_proj.forward(g, x)?;
        let u = g.param(self.h_proj);
        let gh = g.matmul(s.h, u)?;
        match self.kind {
            RecurrentKind::Gru => {
                // z, r, candidate
                let xz = g.slice_cols(gx, 0, n)?;
                let hz = g.slice_cols(gh, 0, n)?;
                let xr = g.slice_cols(gx, n, n)?;
                let hr = g.slice_cols(gh, n, n)?;
                let xn = g.slice_cols(gx, 2 * n, n)?;
                let hn = g.slice_cols(gh, 2 * n, n)?;
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z);
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r);
                let rh = g.mul(r, hn)?;
                let cand = g.add(xn, rh)?;
                let cand = g.tanh(cand);
                // h' = cand + z * (h - cand)
                let diff = g.sub(s.h, cand)?;
                let zd = g.mul(z, diff)?;
                let h = g.add(cand, zd)?;
                Ok(RecState { h, c: None })
            }
            RecurrentKind::Lstm => {
                let pre = g.add(gx, gh)?;
                let i = g.slice_cols(pre, 0, n)?;
                let f = g.slice_cols(pre, n, n)?;
                let gg = g.slice_cols(pre, 2 * n, n)?;
                let o = g.slice_cols(pre, 3 * n, n)?;
                let i = g.sigmoid(i);
                let f = g.sigmoid(f);
                let gg = g.tanh(gg);
                let o = g.sigmoid(o);
                let c_prev = s.c.expect("LSTM state carries a cell vector");
                let fc = g.mul(f, c_prev)?;
                let ig = g.mul(i, gg)?;
                let c = g.add(fc, ig)?;
                let tc = g.tanh(c);
                let h = g.mul(o, tc)?;
                Ok(RecState { h, c: Some(c) })
            }
        }
    }
}
