//! Differentiable operators.
//!
//! Every operator builds its output eagerly, then (only when some input
//! requires gradients) registers a closure implementing the chain rule.
//! Feature maps are `[C, H, W]`, channel vectors `[C]`, scalars `[1]`.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, Ix1, Ix3, IxDyn};

use super::{GradSink, Scalar, Tensor};

/// Stride / padding / dilation of a square-kernel convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec { stride: 1, pad: 0, dilation: 1 }
    }

    /// "Same"-style spec for a given kernel: output side == input side at
    /// stride 1.
    pub fn same(kernel: usize) -> Self {
        ConvSpec { stride: 1, pad: kernel / 2, dilation: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        // Keep the "same" property for stride-1 dilated kernels.
        self.pad *= dilation;
        self
    }

    fn out_side(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        assert!(padded >= span, "kernel span {span} exceeds padded input {padded}");
        (padded - span) / self.stride + 1
    }
}

fn view3<S: Scalar>(a: &ArrayD<S>) -> ArrayView3<'_, S> {
    a.view().into_dimensionality::<Ix3>().expect("expected [C, H, W] tensor")
}

fn dims3<S: Scalar>(a: &ArrayD<S>) -> (usize, usize, usize) {
    let v = a.shape();
    assert_eq!(v.len(), 3, "expected [C, H, W] tensor, got {v:?}");
    (v[0], v[1], v[2])
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

fn binary_prep<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) {
    assert!(a.same_tape(b), "operands must live on the same tape");
    assert_eq!(a.value().shape(), b.value().shape(), "operand shapes must match");
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    binary_prep(a, b);
    let out = &*a.value() + &*b.value();
    let needs = a.needs_grad() || b.needs_grad();
    let (ia, ib, na, nb) = (a.id, b.id, a.needs_grad(), b.needs_grad());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            if na {
                sink.add(ia, g.clone());
            }
            if nb {
                sink.add(ib, g.clone());
            }
        }) as _
    });
    a.tape.push(out, needs, backward)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    binary_prep(a, b);
    let out = &*a.value() - &*b.value();
    let needs = a.needs_grad() || b.needs_grad();
    let (ia, ib, na, nb) = (a.id, b.id, a.needs_grad(), b.needs_grad());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            if na {
                sink.add(ia, g.clone());
            }
            if nb {
                sink.add(ib, g.mapv(|v| -v));
            }
        }) as _
    });
    a.tape.push(out, needs, backward)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    binary_prep(a, b);
    let out = &*a.value() * &*b.value();
    let needs = a.needs_grad() || b.needs_grad();
    let (ia, ib, na, nb) = (a.id, b.id, a.needs_grad(), b.needs_grad());
    let (va, vb) = (a.value(), b.value());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            if na {
                sink.add(ia, g * &*vb);
            }
            if nb {
                sink.add(ib, g * &*va);
            }
        }) as _
    });
    a.tape.push(out, needs, backward)
}

pub fn scale<S: Scalar>(a: &Tensor<S>, factor: f64) -> Tensor<S> {
    let c = S::from_f64(factor);
    let out = a.value().mapv(|v| v * c);
    let needs = a.needs_grad();
    let ia = a.id;
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            sink.add(ia, g.mapv(|v| v * c));
        }) as _
    });
    a.tape.push(out, needs, backward)
}

/// Add a `[C]` bias vector to every spatial position of a `[C, H, W]` map.
pub fn bias_add<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    assert!(x.same_tape(bias));
    let (c, h, w) = dims3(&x.value());
    let bv = bias.value();
    let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias must be [C]");
    assert_eq!(b1.len(), c, "bias length must match channels");
    let mut out = x.to_array();
    {
        let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
        for ci in 0..c {
            let b = b1[ci];
            o3.index_axis_mut(ndarray::Axis(0), ci).mapv_inplace(|v| v + b);
        }
    }
    let needs = x.needs_grad() || bias.needs_grad();
    let (ix, ibias, nx, nb) = (x.id, bias.id, x.needs_grad(), bias.needs_grad());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            if nx {
                sink.add(ix, g.clone());
            }
            if nb {
                let g3 = view3(g);
                let mut gb = Array1::<S>::zeros(c);
                for ci in 0..c {
                    gb[ci] = g3.index_axis(ndarray::Axis(0), ci).iter().fold(S::zero(), |a, &v| a + v);
                }
                sink.add(ibias, gb.into_dyn());
            }
        }) as _
    });
    let _ = (h, w);
    x.tape.push(out, needs, backward)
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let out = x.value().mapv(|v| if v > S::zero() { v } else { S::zero() });
    let needs = x.needs_grad();
    let (ix, vx) = (x.id, x.value());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vx, |gv, &xv| {
                if xv <= S::zero() {
                    *gv = S::zero();
                }
            });
            sink.add(ix, gx);
        }) as _
    });
    x.tape.push(out, needs, backward)
}

fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let out = Rc::new(x.value().mapv(|v| S::from_f64(sigmoid_f64(v.as_f64()))));
    let needs = x.needs_grad();
    let (ix, vy) = (x.id, Rc::clone(&out));
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vy, |gv, &yv| {
                let y = yv.as_f64();
                *gv = S::from_f64(gv.as_f64() * y * (1.0 - y));
            });
            sink.add(ix, gx);
        }) as _
    });
    x.tape.push_rc(out, needs, backward)
}

/// Numerically stable `ln(1 + e^x)`; derivative is the sigmoid.
pub fn softplus<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let out = x.value().mapv(|v| {
        let v = v.as_f64();
        S::from_f64(v.max(0.0) + (-v.abs()).exp().ln_1p())
    });
    let needs = x.needs_grad();
    let (ix, vx) = (x.id, x.value());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vx, |gv, &xv| {
                *gv = S::from_f64(gv.as_f64() * sigmoid_f64(xv.as_f64()));
            });
            sink.add(ix, gx);
        }) as _
    });
    x.tape.push(out, needs, backward)
}

/// Natural logarithm (inputs must be positive; clamp first where needed).
pub fn ln<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let out = x.value().mapv(|v| S::from_f64(v.as_f64().ln()));
    let needs = x.needs_grad();
    let (ix, vx) = (x.id, x.value());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vx, |gv, &xv| *gv = *gv / xv);
            sink.add(ix, gx);
        }) as _
    });
    x.tape.push(out, needs, backward)
}

/// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
pub fn clamp<S: Scalar>(x: &Tensor<S>, lo: f64, hi: f64) -> Tensor<S> {
    let (slo, shi) = (S::from_f64(lo), S::from_f64(hi));
    let out = x.value().mapv(|v| {
        if v < slo {
            slo
        } else if v > shi {
            shi
        } else {
            v
        }
    });
    let needs = x.needs_grad();
    let (ix, vx) = (x.id, x.value());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vx, |gv, &xv| {
                if xv <= slo || xv >= shi {
                    *gv = S::zero();
                }
            });
            sink.add(ix, gx);
        }) as _
    });
    x.tape.push(out, needs, backward)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Unfold `[C, H, W]` into `[C*k*k, OH*OW]` patch columns.
fn im2col<S: Scalar>(
    x: ArrayView3<'_, S>,
    kernel: usize,
    spec: ConvSpec,
) -> (Array2<S>, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = spec.out_side(h, kernel);
    let ow = spec.out_side(w, kernel);
    let mut cols = Array2::<S>::zeros((c * kernel * kernel, oh * ow));
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let mut cols_row = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols_row[base + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Fold patch-column gradients back onto the input (adjoint of [`im2col`]).
fn col2im<S: Scalar>(
    cols: &Array2<S>,
    input_dims: (usize, usize, usize),
    kernel: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Array3<S> {
    let (c, h, w) = input_dims;
    let mut x = Array3::<S>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let cols_row = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += cols_row[base + ox];
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution: `x: [Cin, H, W]`, `weight: [Cout, Cin, k, k]`,
/// optional `bias: [Cout]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Tensor<S> {
    assert!(x.same_tape(weight));
    let xv = x.value();
    let wv = weight.value();
    let x3 = view3(&xv);
    let wsh = wv.shape().to_vec();
    assert_eq!(wsh.len(), 4, "weight must be [Cout, Cin, k, k]");
    let (cout, cin, k) = (wsh[0], wsh[1], wsh[2]);
    assert_eq!(wsh[2], wsh[3], "kernels are square");
    assert_eq!(x3.shape()[0], cin, "input channels must match weight");

    let (cols, oh, ow) = im2col(x3, k, spec);
    let w_mat = wv
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("weight is contiguous");
    let mut out_mat = Array2::<S>::zeros((cout, oh * ow));
    general_mat_mul(S::one(), &w_mat, &cols, S::zero(), &mut out_mat);
    if let Some(b) = bias {
        assert!(x.same_tape(b));
        let bv = b.value();
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias must be [Cout]");
        for (mut row, &bc) in out_mat.rows_mut().into_iter().zip(b1.iter()) {
            row.mapv_inplace(|v| v + bc);
        }
    }
    let out = out_mat
        .into_shape_with_order((cout, oh, ow))
        .expect("reshape to [Cout, OH, OW]")
        .into_dyn();

    let nx = x.needs_grad();
    let nw = weight.needs_grad();
    let nb = bias.map(|b| b.needs_grad()).unwrap_or(false);
    let needs = nx || nw || nb;
    let backward = needs.then(|| {
        let cols = Rc::new(cols);
        let wv = Rc::clone(&wv);
        let input_dims = (cin, x3.shape()[1], x3.shape()[2]);
        let ids = (x.id, weight.id, bias.map(|b| b.id));
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g_mat = g
                .view()
                .into_shape_with_order((cout, oh * ow))
                .expect("grad is contiguous");
            if nw {
                let mut gw = Array2::<S>::zeros((cout, cin * k * k));
                general_mat_mul(S::one(), &g_mat, &cols.t(), S::zero(), &mut gw);
                let gw = gw.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn();
                sink.add(ids.1, gw);
            }
            if nb {
                let mut gb = Array1::<S>::zeros(cout);
                for (gc, row) in gb.iter_mut().zip(g_mat.rows()) {
                    *gc = row.iter().fold(S::zero(), |a, &v| a + v);
                }
                sink.add(ids.2.expect("bias id"), gb.into_dyn());
            }
            if nx {
                let w_mat = wv
                    .view()
                    .into_shape_with_order((cout, cin * k * k))
                    .expect("weight is contiguous");
                let mut g_cols = Array2::<S>::zeros((cin * k * k, oh * ow));
                general_mat_mul(S::one(), &w_mat.t(), &g_mat, S::zero(), &mut g_cols);
                let gx = col2im(&g_cols, input_dims, k, spec, oh, ow);
                sink.add(ids.0, gx.into_dyn());
            }
        }) as _
    });
    x.tape.push(out, needs, backward)
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2 (input sides must be even).
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let xv = x.value();
    let (c, h, w) = dims3(&xv);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let x3 = view3(&xv);
    let quarter = S::from_f64(0.25);
    let mut out = Array3::<S>::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let s = x3[[ci, 2 * oy, 2 * ox]]
                    + x3[[ci, 2 * oy, 2 * ox + 1]]
                    + x3[[ci, 2 * oy + 1, 2 * ox]]
                    + x3[[ci, 2 * oy + 1, 2 * ox + 1]];
                out[[ci, oy, ox]] = s * quarter;
            }
        }
    }
    let needs = x.needs_grad();
    let ix = x.id;
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g3 = view3(g);
            let mut gx = Array3::<S>::zeros((c, h, w));
            for ci in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let gv = g3[[ci, oy, ox]] * quarter;
                        gx[[ci, 2 * oy, 2 * ox]] += gv;
                        gx[[ci, 2 * oy, 2 * ox + 1]] += gv;
                        gx[[ci, 2 * oy + 1, 2 * ox]] += gv;
                        gx[[ci, 2 * oy + 1, 2 * ox + 1]] += gv;
                    }
                }
            }
            sink.add(ix, gx.into_dyn());
        }) as _
    });
    x.tape.push(out.into_dyn(), needs, backward)
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Ties route the gradient to the first maximum in scan order.
pub fn max_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let xv = x.value();
    let (c, h, w) = dims3(&xv);
    let (oh, ow) = (h / 2, w / 2);
    assert!(oh > 0 && ow > 0, "max_pool2 needs sides >= 2, got {h}x{w}");
    let x3 = view3(&xv);
    let mut out = Array3::<S>::zeros((c, oh, ow));
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x3[[ci, 2 * oy, 2 * ox]];
                let mut best_at = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x3[[ci, 2 * oy + dy, 2 * ox + dx]];
                    if v > best {
                        best = v;
                        best_at = (2 * oy + dy) * w + 2 * ox + dx;
                    }
                }
                out[[ci, oy, ox]] = best;
                argmax[(ci * oh + oy) * ow + ox] = best_at as u32;
            }
        }
    }
    let needs = x.needs_grad();
    let ix = x.id;
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g3 = view3(g);
            let mut gx = Array3::<S>::zeros((c, h, w));
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let at = argmax[(ci * oh + oy) * ow + ox] as usize;
                        gx[[ci, at / w, at % w]] += g3[[ci, oy, ox]];
                    }
                }
            }
            sink.add(ix, gx.into_dyn());
        }) as _
    });
    x.tape.push(out.into_dyn(), needs, backward)
}

/// Nearest-neighbour source row/column lookup tables for a resize.
fn nearest_index_map(n_out: usize, n_in: usize) -> Vec<usize> {
    (0..n_out).map(|i| (i * n_in / n_out).min(n_in - 1)).collect()
}

/// Nearest-neighbour resize of the raw array (shared by the tape op, mask
/// preparation and report rendering).
pub fn resize_nearest_raw<S: Scalar>(x: ArrayView3<'_, S>, oh: usize, ow: usize) -> Array3<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = nearest_index_map(oh, h);
    let cols = nearest_index_map(ow, w);
    let mut out = Array3::<S>::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[[ci, oy, ox]] = x[[ci, rows[oy], cols[ox]]];
            }
        }
    }
    out
}

/// Nearest-neighbour resize to an explicit `(oh, ow)`. The gradient of each
/// output pixel accumulates onto its source pixel.
pub fn resize_nearest<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let xv = x.value();
    let (c, h, w) = dims3(&xv);
    let out = resize_nearest_raw(view3(&xv), oh, ow);
    let needs = x.needs_grad();
    let ix = x.id;
    let backward = needs.then(|| {
        let rows = nearest_index_map(oh, h);
        let cols = nearest_index_map(ow, w);
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g3 = view3(g);
            let mut gx = Array3::<S>::zeros((c, h, w));
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[[ci, rows[oy], cols[ox]]] += g3[[ci, oy, ox]];
                    }
                }
            }
            sink.add(ix, gx.into_dyn());
        }) as _
    });
    x.tape.push(out.into_dyn(), needs, backward)
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (_, h, w) = dims3(&x.value());
    resize_nearest(x, 2 * h, 2 * w)
}

// ---------------------------------------------------------------------------
// Channel wiring
// ---------------------------------------------------------------------------

/// Concatenate along the channel axis.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty());
    let first = parts[0];
    let (_, h, w) = dims3(&first.value());
    let mut total_c = 0;
    for p in parts {
        assert!(first.same_tape(p));
        let (pc, ph, pw) = dims3(&p.value());
        assert_eq!((ph, pw), (h, w), "spatial dims must match for concat");
        total_c += pc;
    }
    let mut out = Array3::<S>::zeros((total_c, h, w));
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let pv = p.value();
        let pc = pv.shape()[0];
        out.slice_mut(ndarray::s![offset..offset + pc, .., ..]).assign(&view3(&pv));
        spans.push((p.id, p.needs_grad(), offset, pc));
        offset += pc;
    }
    let needs = parts.iter().any(|p| p.needs_grad());
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g3 = view3(g);
            for &(id, ng, off, pc) in &spans {
                if ng {
                    let gp = g3.slice(ndarray::s![off..off + pc, .., ..]).to_owned();
                    sink.add(id, gp.into_dyn());
                }
            }
        }) as _
    });
    first.tape.push(out.into_dyn(), needs, backward)
}

/// Copy of a channel range `[from, to)`.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, from: usize, to: usize) -> Tensor<S> {
    let xv = x.value();
    let (c, h, w) = dims3(&xv);
    assert!(from < to && to <= c, "invalid channel slice {from}..{to} of {c}");
    let out = view3(&xv).slice(ndarray::s![from..to, .., ..]).to_owned();
    let needs = x.needs_grad();
    let ix = x.id;
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let mut gx = Array3::<S>::zeros((c, h, w));
            gx.slice_mut(ndarray::s![from..to, .., ..]).assign(&view3(g));
            sink.add(ix, gx.into_dyn());
        }) as _
    });
    x.tape.push(out.into_dyn(), needs, backward)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let total = x.value().iter().fold(S::zero(), |a, &v| a + v);
    let out = ArrayD::from_elem(IxDyn(&[1]), total);
    let needs = x.needs_grad();
    let ix = x.id;
    let shape = x.value().raw_dim();
    let backward = needs.then(|| {
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let gv = g[[0]];
            sink.add(ix, ArrayD::from_elem(shape.clone(), gv));
        }) as _
    });
    x.tape.push(out, needs, backward)
}

pub fn mean_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = x.value().len();
    scale(&sum_all(x), 1.0 / n as f64)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

fn channel_stats<S: Scalar>(x3: ArrayView3<'_, S>) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let area = (h * w) as f64;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ci in 0..c {
        let ch = x3.index_axis(ndarray::Axis(0), ci);
        let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / area;
        let var = ch.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / area;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

struct NormCore<S: Scalar> {
    y: Rc<ArrayD<S>>,
    xhat: Rc<Array3<f64>>,
    inv_std: Vec<f64>,
}

/// Shared forward of batch/instance normalization over spatial statistics.
fn normalize_spatial<S: Scalar>(
    xv: &ArrayD<S>,
    gamma: &ArrayD<S>,
    beta: &ArrayD<S>,
    means: &[f64],
    vars: &[f64],
    eps: f64,
) -> NormCore<S> {
    let x3 = view3(xv);
    let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let mut xhat = Array3::<f64>::zeros((c, h, w));
    let mut y = Array3::<S>::zeros((c, h, w));
    let mut inv_std = Vec::with_capacity(c);
    for ci in 0..c {
        let is = 1.0 / (vars[ci] + eps).sqrt();
        inv_std.push(is);
        let g = gamma[[ci]].as_f64();
        let b = beta[[ci]].as_f64();
        for yy in 0..h {
            for xx in 0..w {
                let xh = (x3[[ci, yy, xx]].as_f64() - means[ci]) * is;
                xhat[[ci, yy, xx]] = xh;
                y[[ci, yy, xx]] = S::from_f64(g * xh + b);
            }
        }
    }
    NormCore { y: Rc::new(y.into_dyn()), xhat: Rc::new(xhat), inv_std }
}

/// Normalize per channel using the batch's own spatial statistics; returns the
/// output plus the `(mean, var)` the caller folds into its running estimates.
pub fn batch_norm_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> (Tensor<S>, Vec<f64>, Vec<f64>) {
    assert!(x.same_tape(gamma) && x.same_tape(beta));
    let xv = x.value();
    let (means, vars) = channel_stats(view3(&xv));
    let core = normalize_spatial(&xv, &gamma.value(), &beta.value(), &means, &vars, eps);
    let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    let ids = (x.id, gamma.id, beta.id);
    let flags = (x.needs_grad(), gamma.needs_grad(), beta.needs_grad());
    let backward = needs.then(|| {
        let xhat = Rc::clone(&core.xhat);
        let inv_std = core.inv_std.clone();
        let gv = gamma.value();
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g3 = view3(g);
            let (c, h, w) = (g3.shape()[0], g3.shape()[1], g3.shape()[2]);
            let area = (h * w) as f64;
            let mut ggamma = Array1::<S>::zeros(c);
            let mut gbeta = Array1::<S>::zeros(c);
            let mut gx = Array3::<S>::zeros((c, h, w));
            for ci in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        let gvv = g3[[ci, yy, xx]].as_f64();
                        sum_g += gvv;
                        sum_gx += gvv * xhat[[ci, yy, xx]];
                    }
                }
                ggamma[ci] = S::from_f64(sum_gx);
                gbeta[ci] = S::from_f64(sum_g);
                if flags.0 {
                    let scale = gv[[ci]].as_f64() * inv_std[ci];
                    let mean_g = sum_g / area;
                    let mean_gx = sum_gx / area;
                    for yy in 0..h {
                        for xx in 0..w {
                            let gvv = g3[[ci, yy, xx]].as_f64();
                            let xh = xhat[[ci, yy, xx]];
                            gx[[ci, yy, xx]] = S::from_f64(scale * (gvv - mean_g - xh * mean_gx));
                        }
                    }
                }
            }
            if flags.0 {
                sink.add(ids.0, gx.into_dyn());
            }
            if flags.1 {
                sink.add(ids.1, ggamma.into_dyn());
            }
            if flags.2 {
                sink.add(ids.2, gbeta.into_dyn());
            }
        }) as _
    });
    let out = x.tape.push_rc(core.y, needs, backward);
    (out, means, vars)
}

/// Normalize with fixed (running) statistics, as used at inference time.
pub fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    means: &[f64],
    vars: &[f64],
    eps: f64,
) -> Tensor<S> {
    assert!(x.same_tape(gamma) && x.same_tape(beta));
    let xv = x.value();
    let core = normalize_spatial(&xv, &gamma.value(), &beta.value(), means, vars, eps);
    let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    let ids = (x.id, gamma.id, beta.id);
    let flags = (x.needs_grad(), gamma.needs_grad(), beta.needs_grad());
    let backward = needs.then(|| {
        let xhat = Rc::clone(&core.xhat);
        let inv_std = core.inv_std.clone();
        let gv = gamma.value();
        Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
            let g3 = view3(g);
            let (c, h, w) = (g3.shape()[0], g3.shape()[1], g3.shape()[2]);
            let mut ggamma = Array1::<S>::zeros(c);
            let mut gbeta = Array1::<S>::zeros(c);
            let mut gx = Array3::<S>::zeros((c, h, w));
            for ci in 0..c {
                let scale = gv[[ci]].as_f64() * inv_std[ci];
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        let gvv = g3[[ci, yy, xx]].as_f64();
                        sum_g += gvv;
                        sum_gx += gvv * xhat[[ci, yy, xx]];
                        gx[[ci, yy, xx]] = S::from_f64(gvv * scale);
                    }
                }
                ggamma[ci] = S::from_f64(sum_gx);
                gbeta[ci] = S::from_f64(sum_g);
            }
            if flags.0 {
                sink.add(ids.0, gx.into_dyn());
            }
            if flags.1 {
                sink.add(ids.1, ggamma.into_dyn());
            }
            if flags.2 {
                sink.add(ids.2, gbeta.into_dyn());
            }
        }) as _
    });
    x.tape.push_rc(core.y, needs, backward)
}

/// Instance normalization (spatial statistics, no running state).
///
/// Degenerate 1x1 maps carry no spatial statistics; they pass through the
/// affine transform unnormalized so late discriminator stages stay informative
/// at small image sides.
pub fn instance_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Tensor<S> {
    let xv = x.value();
    let (_, h, w) = dims3(&xv);
    if h * w <= 1 {
        // y = gamma * x + beta, channelwise.
        assert!(x.same_tape(gamma) && x.same_tape(beta));
        let x3 = view3(&xv);
        let gv = gamma.value();
        let bv = beta.value();
        let c = x3.shape()[0];
        let mut y = Array3::<S>::zeros((c, h, w));
        for ci in 0..c {
            y[[ci, 0, 0]] = gv[[ci]] * x3[[ci, 0, 0]] + bv[[ci]];
        }
        let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let ids = (x.id, gamma.id, beta.id);
        let flags = (x.needs_grad(), gamma.needs_grad(), beta.needs_grad());
        let gv2 = Rc::clone(&gv);
        let xv2 = Rc::clone(&xv);
        let backward = needs.then(|| {
            Box::new(move |g: &ArrayD<S>, sink: &mut GradSink<S>| {
                let g3 = view3(g);
                let c = g3.shape()[0];
                if flags.0 {
                    let mut gx = Array3::<S>::zeros((c, 1, 1));
                    for ci in 0..c {
                        gx[[ci, 0, 0]] = g3[[ci, 0, 0]] * gv2[[ci]];
                    }
                    sink.add(ids.0, gx.into_dyn());
                }
                if flags.1 {
                    let x3 = view3(&xv2);
                    let mut gg = Array1::<S>::zeros(c);
                    for ci in 0..c {
                        gg[ci] = g3[[ci, 0, 0]] * x3[[ci, 0, 0]];
                    }
                    sink.add(ids.1, gg.into_dyn());
                }
                if flags.2 {
                    let mut gb = Array1::<S>::zeros(c);
                    for ci in 0..c {
                        gb[ci] = g3[[ci, 0, 0]];
                    }
                    sink.add(ids.2, gb.into_dyn());
                }
            }) as _
        });
        return x.tape.push(y.into_dyn(), needs, backward);
    }
    // Statistically identical to batch-norm training mode; instance norm just
    // never maintains running estimates.
    batch_norm_train(x, gamma, beta, eps).0
}

// ---------------------------------------------------------------------------
// Method sugar
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn add_t(&self, o: &Tensor<S>) -> Tensor<S> {
        add(self, o)
    }
    pub fn sub_t(&self, o: &Tensor<S>) -> Tensor<S> {
        sub(self, o)
    }
    pub fn mul_t(&self, o: &Tensor<S>) -> Tensor<S> {
        mul(self, o)
    }
    pub fn scale_t(&self, f: f64) -> Tensor<S> {
        scale(self, f)
    }
    pub fn relu_t(&self) -> Tensor<S> {
        relu(self)
    }
    pub fn sigmoid_t(&self) -> Tensor<S> {
        sigmoid(self)
    }
    pub fn softplus_t(&self) -> Tensor<S> {
        softplus(self)
    }
    pub fn mean_all_t(&self) -> Tensor<S> {
        mean_all(self)
    }
    pub fn sum_all_t(&self) -> Tensor<S> {
        sum_all(self)
    }
    /// Mean of elementwise squared differences.
    pub fn mse(&self, o: &Tensor<S>) -> Tensor<S> {
        let d = sub(self, o);
        mean_all(&mul(&d, &d))
    }
    /// Sum of elementwise squared differences.
    pub fn sum_sq_diff(&self, o: &Tensor<S>) -> Tensor<S> {
        let d = sub(self, o);
        sum_all(&mul(&d, &d))
    }
}
