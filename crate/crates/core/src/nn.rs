//! Dense building blocks with explicit forward caches and backward passes.
//!
//! Only activations, LoRA matrices and the conditioning tokens ever need
//! gradients, so the backward functions never produce base-weight gradients.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::lora::LoraAdapter;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Rounds to the nearest `f32` so every stored parameter survives a 32-bit
/// container round-trip bit-exactly.
pub(crate) fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// A dense layer `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub(crate) id: String,
    pub(crate) weight: Array2<f64>,
    pub(crate) bias: Option<Array1<f64>>,
}

impl Linear {
    pub(crate) fn init<R: Rng + ?Sized>(
        id: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            to_f32_grid(std * rng.sample::<f64, _>(StandardNormal))
        });
        Self {
            id: id.into(),
            weight,
            bias: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn weight_id(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub(crate) fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Projection with an optional low-rank residual path. Returns the output
    /// and, when the residual path is active, the rank-space activation `x·Aᵀ`.
    pub(crate) fn forward_lora(
        &self,
        x: ArrayView2<'_, f64>,
        adapter: Option<&LoraAdapter>,
        lora_scale: f64,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut y = self.forward(x);
        match adapter {
            Some(a) if lora_scale != 0.0 => {
                let u = x.dot(&a.a.t());
                y.scaled_add(lora_scale, &u.dot(&a.b.t()));
                (y, Some(u))
            }
            _ => (y, None),
        }
    }

    pub(crate) fn backward_input(&self, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        dy.dot(&self.weight)
    }

    /// Backward through [`Self::forward_lora`]: returns `dx` and accumulates
    /// the adapter gradients into `grad`.
    pub(crate) fn backward_lora(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        adapter: Option<&LoraAdapter>,
        lora_scale: f64,
        rank_act: Option<&Array2<f64>>,
        grad: Option<&mut LoraGrad>,
    ) -> Array2<f64> {
        let mut dx = self.backward_input(dy);
        if let (Some(a), Some(u)) = (adapter, rank_act) {
            let du = dy.dot(&a.b) * lora_scale;
            dx += &du.dot(&a.a);
            if let Some(g) = grad {
                g.b.scaled_add(lora_scale, &dy.t().dot(u));
                g.a += &du.t().dot(&x);
            }
        }
        dx
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        f(&format!("{}.weight", self.id), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.id), b.view().into_dyn());
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{}.weight", self.id), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.id), b.view_mut().into_dyn());
        }
    }
}

/// Gradient of one adapter's `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraGrad {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            a: Array2::zeros(adapter.a.raw_dim()),
            b: Array2::zeros(adapter.b.raw_dim()),
        }
    }
}

/// Row-wise layer norm without affine parameters. Returns `(y, inv_std)`.
pub(crate) fn layer_norm(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in y.axis_iter_mut(Axis(0)).zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * *inv_std);
    }
    (y, inv)
}

pub(crate) fn layer_norm_backward(
    y: ArrayView2<'_, f64>,
    inv_std: &Array1<f64>,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = Array2::zeros(y.raw_dim());
    for (((mut dx_row, y_row), dy_row), &s) in dx
        .axis_iter_mut(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .zip(dy.axis_iter(Axis(0)))
        .zip(inv_std.iter())
    {
        let mean_dy = dy_row.sum() / d;
        let mean_dy_y = dy_row.dot(&y_row) / d;
        for ((o, &g), &yv) in dx_row.iter_mut().zip(dy_row.iter()).zip(y_row.iter()) {
            *o = s * (g - mean_dy - yv * mean_dy_y);
        }
    }
    dx
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Standard sinusoidal embedding of a scalar position.
pub(crate) fn sinusoid(position: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Softmax attention over one sequence. `p` holds the row-stochastic weights.
pub(crate) struct AttentionCore {
    pub p: Array2<f64>,
    pub o: Array2<f64>,
}

pub(crate) fn attend(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> AttentionCore {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut p = q.dot(&k.t()) * scale;
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    let o = p.dot(&v);
    AttentionCore { p, o }
}

/// Returns `(dq, dk, dv)` given the upstream `do`.
pub(crate) fn attend_backward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    d_o: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = p.t().dot(&d_o);
    let dp = d_o.dot(&v.t());
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut ds_row, p_row), dp_row) in ds
        .axis_iter_mut(Axis(0))
        .zip(p.axis_iter(Axis(0)))
        .zip(dp.axis_iter(Axis(0)))
    {
        let inner = p_row.dot(&dp_row);
        for ((o, &pv), &g) in ds_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *o = pv * (g - inner) * scale;
        }
    }
    let dq = ds.dot(&k);
    let dk = ds.t().dot(&q);
    (dq, dk, dv)
}

/// How token rows are partitioned into independent attention sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Grouping {
    /// `count` consecutive runs of `len` rows (spatial attention within a frame).
    Contiguous { len: usize },
    /// Rows `{j, j + stride, j + 2·stride, …}` for each `j < stride` (temporal attention).
    Strided { stride: usize },
    /// All query rows attend to the same external context.
    Shared,
}

impl Grouping {
    pub(crate) fn groups(&self, rows: usize) -> Vec<Vec<usize>> {
        match *self {
            Grouping::Contiguous { len } => (0..rows / len)
                .map(|g| (g * len..(g + 1) * len).collect())
                .collect(),
            Grouping::Strided { stride } => (0..stride)
                .map(|j| (j..rows).step_by(stride).collect())
                .collect(),
            Grouping::Shared => vec![(0..rows).collect()],
        }
    }
}

pub(crate) fn gather(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

pub(crate) fn scatter_add(dst: &mut Array2<f64>, rows: &[usize], src: ArrayView2<'_, f64>) {
    for (i, &r) in rows.iter().enumerate() {
        let mut row = dst.row_mut(r);
        row += &src.row(i);
    }
}

pub(crate) fn scatter(dst: &mut Array2<f64>, rows: &[usize], src: ArrayView2<'_, f64>) {
    for (i, &r) in rows.iter().enumerate() {
        dst.row_mut(r).assign(&src.row(i));
    }
}

pub(crate) fn contiguous(rows: &[usize]) -> Option<(usize, usize)> {
    let first = *rows.first()?;
    rows.iter()
        .enumerate()
        .all(|(i, &r)| r == first + i)
        .then(|| (first, first + rows.len()))
}

pub(crate) fn rows_view<'a>(x: &'a Array2<f64>, rows: &[usize]) -> std::borrow::Cow<'a, Array2<f64>> {
    match contiguous(rows) {
        Some((a, b)) if a == 0 && b == x.nrows() => std::borrow::Cow::Borrowed(x),
        Some((a, b)) => std::borrow::Cow::Owned(x.slice(s![a..b, ..]).to_owned()),
        None => std::borrow::Cow::Owned(gather(x.view(), rows)),
    }
}
