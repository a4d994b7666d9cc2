//! Dense building blocks with hand-written backward passes. Activations are
//! row-major `rows × features` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::real::Real;

const LN_EPS: f64 = 1e-5;

pub fn linear<F: Real>(x: ArrayView2<F>, w: &Array2<F>, bias: Option<&Array2<F>>) -> Array2<F> {
    let mut y = x.dot(w);
    if let Some(b) = bias {
        y += &b.row(0);
    }
    y
}

/// Returns `dx`, and `dW`/`db` when requested.
pub fn linear_backward<F: Real>(
    x: ArrayView2<F>,
    w: &Array2<F>,
    dy: ArrayView2<F>,
    want_weight: bool,
    want_bias: bool,
) -> (Array2<F>, Option<Array2<F>>, Option<Array2<F>>) {
    let dx = dy.dot(&w.t());
    let dw = want_weight.then(|| x.t().dot(&dy));
    let db = want_bias.then(|| dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
    (dx, dw, db)
}

/// Parameter-free layer norm over each row. Returns the normalized rows and
/// the per-row inverse standard deviation.
pub fn layer_norm<F: Real>(x: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let cols = F::lit(x.ncols() as f64);
    let eps = F::lit(LN_EPS);
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in y.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / cols;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<F>() / cols;
        let r = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        *inv_std = r;
    }
    (y, inv)
}

pub fn layer_norm_backward<F: Real>(
    y: ArrayView2<F>,
    inv_std: &Array1<F>,
    dy: ArrayView2<F>,
) -> Array2<F> {
    let cols = F::lit(y.ncols() as f64);
    let mut dx = Array2::zeros(y.raw_dim());
    for (((mut dxr, yr), dyr), r) in dx
        .rows_mut()
        .into_iter()
        .zip(y.rows())
        .zip(dy.rows())
        .zip(inv_std.iter())
    {
        let mean_dy = dyr.sum() / cols;
        let mean_dyy = dyr.iter().zip(yr.iter()).map(|(a, b)| *a * *b).sum::<F>() / cols;
        Zip::from(&mut dxr)
            .and(&yr)
            .and(&dyr)
            .for_each(|o, &yv, &dv| *o = *r * (dv - mean_dy - yv * mean_dyy));
    }
    dx
}

pub fn silu<F: Real>(x: ArrayView2<F>) -> Array2<F> {
    x.mapv(|v| v / (F::one() + (-v).exp()))
}

pub fn silu_backward<F: Real>(x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    Zip::from(&x).and(&dy).map_collect(|&v, &d| {
        let sig = F::one() / (F::one() + (-v).exp());
        d * sig * (F::one() + v * (F::one() - sig))
    })
}

/// Softmax attention probabilities for every `(sample, head)` pair.
pub struct AttentionCache<F> {
    probs: Vec<Array2<F>>,
}

/// Multi-head self-attention over `tokens` rows per sample. `q`, `k`, `v`
/// are `(batch·tokens) × dim` with heads laid out as contiguous column blocks.
pub fn attention<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    tokens: usize,
    heads: usize,
) -> (Array2<F>, AttentionCache<F>) {
    let (rows, dim) = q.dim();
    let batch = rows / tokens;
    let dh = dim / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut out = Array2::zeros((rows, dim));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let r = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            let mut p = qs.dot(&ks.t());
            for mut row in p.rows_mut() {
                let max = row.fold(F::neg_infinity(), |m, x| m.max(*x));
                row.mapv_inplace(|x| ((x - max) * scale).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (out, AttentionCache { probs })
}

pub fn attention_backward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    cache: &AttentionCache<F>,
    dout: ArrayView2<F>,
    tokens: usize,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (rows, dim) = q.dim();
    let batch = rows / tokens;
    let dh = dim / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut dq = Array2::zeros((rows, dim));
    let mut dk = Array2::zeros((rows, dim));
    let mut dv = Array2::zeros((rows, dim));
    for b in 0..batch {
        let r = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            let p = &cache.probs[b * heads + h];
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            let dos = dout.slice(s![r.clone(), c.clone()]);
            dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&dos));
            let mut ds = dos.dot(&vs.t());
            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = dsr.iter().zip(pr.iter()).map(|(a, b)| *a * *b).sum::<F>();
                Zip::from(&mut dsr)
                    .and(&pr)
                    .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            }
            dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

/// Geometry of a feature map stored as `(batch·height·width) × channels`,
/// rows ordered by sample, then row, then column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn per_sample(&self) -> usize {
        self.height * self.width
    }

    pub fn half(&self) -> Grid {
        Grid {
            height: self.height / 2,
            width: self.width / 2,
            ..*self
        }
    }

    pub fn double(&self) -> Grid {
        Grid {
            height: self.height * 2,
            width: self.width * 2,
            ..*self
        }
    }

    /// Source row of tap `(ky, kx)` around output row `(b, y, x)`, or `None`
    /// in the zero padding.
    fn tap(&self, b: usize, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let sy = (y + ky).checked_sub(1).filter(|&v| v < self.height)?;
        let sx = (x + kx).checked_sub(1).filter(|&v| v < self.width)?;
        Some((b * self.height + sy) * self.width + sx)
    }
}

/// Writes the zero-padded 3×3 neighbourhoods of `x` (`g.rows() × c`,
/// row-major) into `out` as `g.rows() × (9·c)`, tap-major
/// (`(ky·3 + kx)·c + channel`).
fn im2col_into<F: Real>(x: &[F], g: Grid, c: usize, out: &mut [F]) {
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = ((b * g.height + y) * g.width + xx) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let dst = &mut out[row + (ky * 3 + kx) * c..][..c];
                        match g.tap(b, y, xx, ky, kx) {
                            Some(src) => dst.copy_from_slice(&x[src * c..(src + 1) * c]),
                            None => dst.fill(F::zero()),
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-adds every tap onto its source row.
fn col2im_add<F: Real>(col: &[F], g: Grid, c: usize, out: &mut [F]) {
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = ((b * g.height + y) * g.width + xx) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(dst) = g.tap(b, y, xx, ky, kx) {
                            let src = &col[row + (ky * 3 + kx) * c..][..c];
                            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                                *o += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 3×3 neighbourhoods: `rows × (9·c)`.
pub fn im2col<F: Real>(x: ArrayView2<F>, g: Grid) -> Array2<F> {
    let c = x.ncols();
    let x = x.as_standard_layout();
    let mut out = Array2::zeros((g.rows(), 9 * c));
    im2col_into(x.as_slice().expect("standard layout"), g, c, out.as_slice_mut().expect("fresh"));
    out
}

fn single(g: Grid) -> Grid {
    Grid { batch: 1, ..g }
}

/// Same-size 3×3 convolution; `w` is `(9·c_in) × c_out`. Works one sample
/// at a time so the column buffer stays small and reused.
pub fn conv3x3<F: Real>(x: ArrayView2<F>, g: Grid, w: &Array2<F>, bias: Option<&Array2<F>>) -> Array2<F> {
    let c = x.ncols();
    let n = g.per_sample();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut y = Array2::zeros((g.rows(), w.ncols()));
    let mut col = Array2::zeros((n, 9 * c));
    for b in 0..g.batch {
        im2col_into(&xs[b * n * c..(b + 1) * n * c], single(g), c, col.as_slice_mut().expect("fresh"));
        let mut yb = y.slice_mut(s![b * n..(b + 1) * n, ..]);
        general_mat_mul(F::one(), &col, w, F::zero(), &mut yb);
    }
    if let Some(bias) = bias {
        y += &bias.row(0);
    }
    y
}

pub fn conv3x3_backward<F: Real>(
    x: ArrayView2<F>,
    g: Grid,
    w: &Array2<F>,
    dy: ArrayView2<F>,
    want_weight: bool,
    want_bias: bool,
) -> (Array2<F>, Option<Array2<F>>, Option<Array2<F>>) {
    let c = x.ncols();
    let n = g.per_sample();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut dx = Array2::zeros((g.rows(), c));
    let mut dw = want_weight.then(|| Array2::zeros(w.raw_dim()));
    let mut col = Array2::zeros((n, 9 * c));
    let mut dcol = Array2::zeros((n, 9 * c));
    for b in 0..g.batch {
        let dyb = dy.slice(s![b * n..(b + 1) * n, ..]);
        general_mat_mul(F::one(), &dyb, &w.t(), F::zero(), &mut dcol);
        let dxs = dx.as_slice_mut().expect("fresh");
        col2im_add(dcol.as_slice().expect("fresh"), single(g), c, &mut dxs[b * n * c..(b + 1) * n * c]);
        if let Some(dw) = dw.as_mut() {
            im2col_into(&xs[b * n * c..(b + 1) * n * c], single(g), c, col.as_slice_mut().expect("fresh"));
            general_mat_mul(F::one(), &col.t(), &dyb, F::one(), dw);
        }
    }
    let db = want_bias.then(|| dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
    (dx, dw, db)
}

/// 2×2 mean pooling of a map on grid `g`.
pub fn avg_pool2<F: Real>(x: ArrayView2<F>, g: Grid) -> Array2<F> {
    let h = g.half();
    let quarter = F::lit(0.25);
    let mut out = Array2::zeros((h.rows(), x.ncols()));
    for b in 0..g.batch {
        for y in 0..h.height {
            for xx in 0..h.width {
                let mut row = out.row_mut((b * h.height + y) * h.width + xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    row += &x.row((b * g.height + 2 * y + dy) * g.width + 2 * xx + dx);
                }
                row.mapv_inplace(|v| v * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Real>(dy: ArrayView2<F>, g: Grid) -> Array2<F> {
    upsample2(dy, g.half()).mapv(|v| v * F::lit(0.25))
}

/// Nearest-neighbour 2× upsampling of a map on grid `g`.
pub fn upsample2<F: Real>(x: ArrayView2<F>, g: Grid) -> Array2<F> {
    let big = g.double();
    let mut out = Array2::zeros((big.rows(), x.ncols()));
    for b in 0..big.batch {
        for y in 0..big.height {
            for xx in 0..big.width {
                out.row_mut((b * big.height + y) * big.width + xx)
                    .assign(&x.row((b * g.height + y / 2) * g.width + xx / 2));
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dy: ArrayView2<F>, g: Grid) -> Array2<F> {
    avg_pool2(dy, g.double()).mapv(|v| v * F::lit(4.0))
}
