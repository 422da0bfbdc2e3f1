//! Building blocks shared by the enhancer, the cross talker, and the decoder.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{masked_attention, scaled_dot_attention, Matrix, ParamId, ParamStore, Tape, Var};

pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

/// Low-rank additive delta `(alpha / rank) · B · A` on a frozen base weight.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f64,
}

/// `x · W (+ b)`, optionally with an attached adapter.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<Adapter>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), glorot(inputs, outputs, rng));
        let bias = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, outputs)));
        Linear {
            weight,
            bias,
            adapter: None,
        }
    }

    /// A weight-only projection; `zero` selects zero initialization.
    pub fn projection<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, h: usize, zero: bool, rng: &mut R) -> Self {
        let value = if zero { Matrix::zeros(h, h) } else { glorot(h, h, rng) };
        Linear {
            weight: store.add(format!("{name}.w"), value),
            bias: None,
            adapter: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x, w)?;
        if let Some(ad) = &self.adapter {
            let b = tape.param(store, ad.b);
            let a = tape.param(store, ad.a);
            let xb = tape.matmul(x, b)?;
            let xba = tape.matmul(xb, a)?;
            let delta = tape.scale(xba, ad.scaling);
            y = tape.add(y, delta)?;
        }
        if let Some(bias) = self.bias {
            let b = tape.param(store, bias);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some(a) = &self.adapter {
            v.push(a.a);
            v.push(a.b);
        }
        v
    }
}

/// Single-head attention with query/key/value/output projections. Returns
/// the out-projected attention (no residual).
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, h: usize, rng: &mut R) -> Self {
        AttentionBlock {
            wq: Linear::projection(store, &format!("{name}.wq"), h, false, rng),
            wk: Linear::projection(store, &format!("{name}.wk"), h, false, rng),
            wv: Linear::projection(store, &format!("{name}.wv"), h, false, rng),
            wo: Linear::projection(store, &format!("{name}.wo"), h, false, rng),
            dim: h,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let q = self.wq.forward(tape, store, query)?;
        let k = self.wk.forward(tape, store, context)?;
        let v = self.wv.forward(tape, store, context)?;
        let (att, _) = scaled_dot_attention(tape, q, k, v, self.dim)?;
        self.wo.forward(tape, store, att)
    }

    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        context: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let q = self.wq.forward(tape, store, query)?;
        let k = self.wk.forward(tape, store, context)?;
        let v = self.wv.forward(tape, store, context)?;
        let (att, _) = masked_attention(tape, q, k, v, self.dim, mask)?;
        self.wo.forward(tape, store, att)
    }

    /// `query + out(attn(query, context))`.
    pub fn residual(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let a = self.forward(tape, store, query, context)?;
        tape.add(query, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.wq, self.wk, self.wv, self.wo]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Two-layer GELU feed-forward network `H → 4H → H`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, h: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), h, 4 * h, true, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * h, h, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let u = self.up.forward(tape, store, x)?;
        let a = tape.gelu(u);
        self.down.forward(tape, store, a)
    }

    /// `x + FFN(x)`.
    pub fn residual(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.forward(tape, store, x)?;
        tape.add(x, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v
    }

    /// Parameters of the second layer (zeroing them makes the block the
    /// identity on its residual stream).
    pub fn output_params(&self) -> Vec<ParamId> {
        self.down.params()
    }
}

/// Zeroes the given parameters in place.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}
