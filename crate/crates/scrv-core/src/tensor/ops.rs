//! Differentiable tensor operations.
//!
//! Binary arithmetic broadcasts trailing dimensions (an extent-1 dimension
//! stretches against any extent; shapes align at the right edge). Reductions
//! send gradient back in the original input shape, so every rule here returns
//! a contribution whose length equals its input's element count.

use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{RuleIo, Tensor};

// ---------------------------------------------------------------------------
// Shape and broadcast machinery
// ---------------------------------------------------------------------------

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Element strides of `shape` viewed inside `out_rank` dimensions: left-padded
/// with zeros, and zero wherever the extent is 1 (the dimension repeats).
fn aligned_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out_rank - shape.len();
    let mut strides = vec![0usize; out_rank];
    for d in 0..shape.len() {
        strides[pad + d] = if shape[d] == 1 { 0 } else { own[d] };
    }
    strides
}

fn broadcast_out_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for d in 0..rank {
        let ea = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let eb = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if ea == eb || ea == 1 || eb == 1 {
            out[d] = ea.max(eb);
        } else {
            return Err(Error::ShapeMismatch {
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Whether `from` broadcasts to exactly `to` under trailing alignment.
fn broadcastable_to(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let pad = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(d, &e)| e == to[pad + d] || e == 1)
}

/// Iterate `f(out_offset, a_offset, b_offset, run)` over an output of shape
/// `out`, where both operands advance by 0 or 1 per element inside a fused
/// trailing run and by their aligned strides outside it. The fused run is the
/// longest trailing block over which each operand is either fully present
/// (contiguous) or fully absent (broadcast).
fn for_each_bcast(
    out: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, bool, bool),
) {
    let out = if out.is_empty() { &[1][..] } else { out };
    let rank = out.len();
    let sa = aligned_strides(a_shape, rank);
    let sb = aligned_strides(b_shape, rank);

    // Longest trailing block where each operand is uniformly var or const.
    let mut fused = 0usize;
    let mut a_var_all = true;
    let mut a_const_all = true;
    let mut b_var_all = true;
    let mut b_const_all = true;
    for d in (0..rank).rev() {
        let av = sa[d] != 0 || out[d] == 1;
        let ac = sa[d] == 0;
        let bv = sb[d] != 0 || out[d] == 1;
        let bc = sb[d] == 0;
        let na_var = a_var_all && av;
        let na_const = a_const_all && ac;
        let nb_var = b_var_all && bv;
        let nb_const = b_const_all && bc;
        if (na_var || na_const) && (nb_var || nb_const) {
            a_var_all = na_var;
            a_const_all = na_const;
            b_var_all = nb_var;
            b_const_all = nb_const;
            fused += 1;
        } else {
            break;
        }
    }
    debug_assert!(fused >= 1);
    let run: usize = out[rank - fused..].iter().product();
    let a_step = a_var_all && !a_const_all;
    let b_step = b_var_all && !b_const_all;

    let outer_dims = rank - fused;
    let mut idx = vec![0usize; outer_dims];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    let mut out_off = 0usize;
    loop {
        f(out_off, a_off, b_off, run, a_step, b_step);
        out_off += run;
        // Odometer over the outer dimensions.
        let mut d = outer_dims;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            a_off += sa[d];
            b_off += sb[d];
            if idx[d] < out[d] {
                break;
            }
            a_off -= sa[d] * out[d];
            b_off -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise `f` over the broadcast of two buffers.
fn bcast_map<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T + Copy,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    for_each_bcast(out_shape, a_shape, b_shape, |o, ao, bo, run, astep, bstep| {
        let dst = &mut out[o..o + run];
        match (astep, bstep) {
            (true, true) => {
                for (i, slot) in dst.iter_mut().enumerate() {
                    *slot = f(a[ao + i], b[bo + i]);
                }
            }
            (true, false) => {
                let bv = b[bo];
                for (i, slot) in dst.iter_mut().enumerate() {
                    *slot = f(a[ao + i], bv);
                }
            }
            (false, true) => {
                let av = a[ao];
                for (i, slot) in dst.iter_mut().enumerate() {
                    *slot = f(av, b[bo + i]);
                }
            }
            (false, false) => {
                let v = f(a[ao], b[bo]);
                for slot in dst.iter_mut() {
                    *slot = v;
                }
            }
        }
    });
    out
}

/// Sum a buffer of shape `from` down to shape `to` (the broadcast inverse).
pub(crate) fn reduce_to_shape<T: Scalar>(g: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return g.to_vec();
    }
    let numel: usize = to.iter().product::<usize>().max(1);
    let mut out = vec![T::zero(); numel];
    for_each_bcast(from, to, &[], |o, t_off, _, run, t_step, _| {
        if t_step {
            for i in 0..run {
                out[t_off + i] += g[o + i];
            }
        } else {
            let mut acc = T::zero();
            for &v in &g[o..o + run] {
                acc += v;
            }
            out[t_off] += acc;
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Binary arithmetic
// ---------------------------------------------------------------------------

macro_rules! same_tape {
    ($a:expr, $b:expr) => {
        $a.check_same_tape($b)?
    };
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        rhs: &Tensor<T>,
        forward: impl Fn(T, T) -> T + Copy + 'static,
        backward: impl Fn(&RuleIo<'_, T>) -> (Option<Vec<T>>, Option<Vec<T>>) + 'static,
    ) -> Result<Tensor<T>> {
        same_tape!(self, rhs);
        let out_shape = broadcast_out_shape(&self.shape, &rhs.shape)?;
        let data = {
            let inner = self.tape().inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            bcast_map(&a.data, &a.shape, &b.data, &b.shape, &out_shape, forward)
        };
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            let (ga, gb) = backward(io);
            vec![ga, gb]
        });
        Ok(self
            .tape()
            .push_result(data, out_shape, smallvec![self.id, rhs.id], rule))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, |x, y| x + y, |io| {
            let ga = io.inputs[0]
                .needs
                .then(|| reduce_to_shape(io.gout, io.out_shape, io.inputs[0].shape));
            let gb = io.inputs[1]
                .needs
                .then(|| reduce_to_shape(io.gout, io.out_shape, io.inputs[1].shape));
            (ga, gb)
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, |x, y| x - y, |io| {
            let ga = io.inputs[0]
                .needs
                .then(|| reduce_to_shape(io.gout, io.out_shape, io.inputs[0].shape));
            let gb = io.inputs[1].needs.then(|| {
                let neg: Vec<T> = io.gout.iter().map(|&g| -g).collect();
                reduce_to_shape(&neg, io.out_shape, io.inputs[1].shape)
            });
            (ga, gb)
        })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, |x, y| x * y, |io| {
            let ga = io.inputs[0].needs.then(|| {
                let full = bcast_map(
                    io.gout,
                    io.out_shape,
                    io.inputs[1].data,
                    io.inputs[1].shape,
                    io.out_shape,
                    |g, y| g * y,
                );
                reduce_to_shape(&full, io.out_shape, io.inputs[0].shape)
            });
            let gb = io.inputs[1].needs.then(|| {
                let full = bcast_map(
                    io.gout,
                    io.out_shape,
                    io.inputs[0].data,
                    io.inputs[0].shape,
                    io.out_shape,
                    |g, x| g * x,
                );
                reduce_to_shape(&full, io.out_shape, io.inputs[1].shape)
            });
            (ga, gb)
        })
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, |x, y| x / y, |io| {
            let ga = io.inputs[0].needs.then(|| {
                let full = bcast_map(
                    io.gout,
                    io.out_shape,
                    io.inputs[1].data,
                    io.inputs[1].shape,
                    io.out_shape,
                    |g, y| g / y,
                );
                reduce_to_shape(&full, io.out_shape, io.inputs[0].shape)
            });
            let gb = io.inputs[1].needs.then(|| {
                // d(x/y)/dy = -x/y^2 = -out/y
                let gy_full: Vec<T> = io
                    .gout
                    .iter()
                    .zip(io.out_data)
                    .map(|(&g, &o)| g * o)
                    .collect();
                let full = bcast_map(
                    &gy_full,
                    io.out_shape,
                    io.inputs[1].data,
                    io.inputs[1].shape,
                    io.out_shape,
                    |go, y| -(go / y),
                );
                reduce_to_shape(&full, io.out_shape, io.inputs[1].shape)
            });
            (ga, gb)
        })
    }

    // -----------------------------------------------------------------------
    // Scalar and unary maps
    // -----------------------------------------------------------------------

    fn unary(
        &self,
        forward: impl Fn(T) -> T,
        backward: impl Fn(&[T], &[T], &[T]) -> Vec<T> + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.with_data(|d| d.iter().map(|&x| forward(x)).collect());
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if io.inputs[0].needs {
                vec![Some(backward(io.gout, io.inputs[0].data, io.out_data))]
            } else {
                vec![None]
            }
        });
        self.tape()
            .push_result(data, self.shape.clone(), smallvec![self.id], rule)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x + c, |g, _, _| g.to_vec())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(
            move |x| x * c,
            move |g, _, _| g.iter().map(|&v| v * c).collect(),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    /// max(0, x); the subgradient at the kink is 0.
    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |g, x, _| {
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect()
            },
        )
    }

    /// x * clamp(x + 3, 0, 6) / 6.
    pub fn hardswish(&self) -> Tensor<T> {
        let three = T::from_f64c(3.0);
        let six = T::from_f64c(6.0);
        self.unary(
            move |x| x * (x + three).max(T::zero()).min(six) / six,
            move |g, x, _| {
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let slope = if x <= -three {
                            T::zero()
                        } else if x >= three {
                            T::one()
                        } else {
                            (x + x + three) / six
                        };
                        g * slope
                    })
                    .collect()
            },
        )
    }

    /// Square root; callers keep inputs strictly positive (e.g. via an added
    /// epsilon) so the derivative 1/(2*sqrt(x)) stays finite.
    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::from_f64c(0.5);
        self.unary(
            |x| x.sqrt(),
            move |g, _, out| {
                g.iter()
                    .zip(out)
                    .map(|(&g, &o)| g * half / o)
                    .collect()
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::from_f64c(2.0);
        self.unary(
            |x| x * x,
            move |g, x, _| g.iter().zip(x).map(|(&g, &x)| g * two * x).collect(),
        )
    }

    // -----------------------------------------------------------------------
    // Normalization along an axis
    // -----------------------------------------------------------------------

    /// Softmax along `axis`, computed with a per-slice max shift.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.split_at_axis(axis)?;
        let data = self.with_data(|x| {
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = T::neg_infinity();
                    for l in 0..len {
                        mx = mx.max(x[base + l * inner]);
                    }
                    let mut denom = T::zero();
                    for l in 0..len {
                        let e = (x[base + l * inner] - mx).exp();
                        out[base + l * inner] = e;
                        denom += e;
                    }
                    for l in 0..len {
                        out[base + l * inner] /= denom;
                    }
                }
            }
            out
        });
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if !io.inputs[0].needs {
                return vec![None];
            }
            let s = io.out_data;
            let g = io.gout;
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for l in 0..len {
                        let k = base + l * inner;
                        dot += g[k] * s[k];
                    }
                    for l in 0..len {
                        let k = base + l * inner;
                        dx[k] = s[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(self
            .tape()
            .push_result(data, self.shape.clone(), smallvec![self.id], rule))
    }

    /// Zero-mean unit-variance normalization along `axis` (no affine part).
    pub fn layer_norm(&self, axis: usize, eps: T) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.split_at_axis(axis)?;
        let inv_len = T::one() / T::from_f64c(len as f64);
        let mut inv_std = vec![T::zero(); outer * inner];
        let data = self.with_data(|x| {
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mean = T::zero();
                    for l in 0..len {
                        mean += x[base + l * inner];
                    }
                    mean *= inv_len;
                    let mut var = T::zero();
                    for l in 0..len {
                        let d = x[base + l * inner] - mean;
                        var += d * d;
                    }
                    var *= inv_len;
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std[o * inner + i] = inv;
                    for l in 0..len {
                        out[base + l * inner] = (x[base + l * inner] - mean) * inv;
                    }
                }
            }
            out
        });
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if !io.inputs[0].needs {
                return vec![None];
            }
            let y = io.out_data;
            let g = io.gout;
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for l in 0..len {
                        let k = base + l * inner;
                        m1 += g[k];
                        m2 += g[k] * y[k];
                    }
                    m1 *= inv_len;
                    m2 *= inv_len;
                    let inv = inv_std[o * inner + i];
                    for l in 0..len {
                        let k = base + l * inner;
                        dx[k] = (g[k] - m1 - y[k] * m2) * inv;
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(self
            .tape()
            .push_result(data, self.shape.clone(), smallvec![self.id], rule))
    }

    /// Per-channel normalization of a [N, C, H, W] batch using statistics
    /// gathered over N, H and W.
    pub fn batch_stat_norm(&self, eps: T) -> Result<Tensor<T>> {
        if self.shape.len() != 4 {
            return Err(Error::InvalidOp(format!(
                "batch_stat_norm expects rank 4, got {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let count = T::from_f64c((n * hw) as f64);
        let mut inv_std = vec![T::zero(); c];
        let data = self.with_data(|x| {
            let mut out = vec![T::zero(); x.len()];
            for ch in 0..c {
                let mut mean = T::zero();
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for v in &x[base..base + hw] {
                        mean += *v;
                    }
                }
                mean /= count;
                let mut var = T::zero();
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for v in &x[base..base + hw] {
                        let d = *v - mean;
                        var += d * d;
                    }
                }
                var /= count;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[ch] = inv;
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for k in base..base + hw {
                        out[k] = (x[k] - mean) * inv;
                    }
                }
            }
            out
        });
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if !io.inputs[0].needs {
                return vec![None];
            }
            let y = io.out_data;
            let g = io.gout;
            let mut dx = vec![T::zero(); g.len()];
            for ch in 0..c {
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for k in base..base + hw {
                        m1 += g[k];
                        m2 += g[k] * y[k];
                    }
                }
                m1 /= count;
                m2 /= count;
                let inv = inv_std[ch];
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for k in base..base + hw {
                        dx[k] = (g[k] - m1 - y[k] * m2) * inv;
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(self
            .tape()
            .push_result(data, self.shape.clone(), smallvec![self.id], rule))
    }

    fn split_at_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidOp(format!(
                "axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.with_data(|d| {
            let mut acc = T::zero();
            for &v in d {
                acc += v;
            }
            acc
        });
        let len = self.numel();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if io.inputs[0].needs {
                vec![Some(vec![io.gout[0]; len])]
            } else {
                vec![None]
            }
        });
        self.tape()
            .push_result(vec![total], vec![], smallvec![self.id], rule)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let scale = T::one() / T::from_f64c(self.numel() as f64);
        self.sum_all().mul_scalar(scale)
    }

    /// Sum over `axes`. With `keepdim` the reduced extents stay as 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let rank = self.shape.len();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidOp(format!(
                    "axis {} out of range for shape {:?}",
                    a, self.shape
                )));
            }
            reduce[a] = true;
        }
        // Compute on the keepdim shape; it shares data with the squeezed one.
        let kd_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(d, &e)| if reduce[d] { 1 } else { e })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kd_shape.clone()
        } else {
            self.shape
                .iter()
                .enumerate()
                .filter(|&(d, _)| !reduce[d])
                .map(|(_, &e)| e)
                .collect()
        };
        let data = self.with_data(|x| reduce_to_shape(x, &self.shape, &kd_shape));
        let in_shape = self.shape.clone();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if !io.inputs[0].needs {
                return vec![None];
            }
            // Broadcast the (keepdim-shaped) gradient back over the input.
            let mut dx = vec![T::zero(); io.inputs[0].data.len()];
            for_each_bcast(&in_shape, &kd_shape, &[], |o, koff, _, run, kstep, _| {
                if kstep {
                    dx[o..o + run].copy_from_slice(&io.gout[koff..koff + run]);
                } else {
                    let v = io.gout[koff];
                    for slot in &mut dx[o..o + run] {
                        *slot = v;
                    }
                }
            });
            vec![Some(dx)]
        });
        Ok(self
            .tape()
            .push_result(data, out_shape, smallvec![self.id], rule))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let mut count = 1usize;
        for &a in axes {
            count *= self.shape.get(a).copied().unwrap_or(1);
        }
        let scale = T::one() / T::from_f64c(count as f64);
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(scale))
    }

    /// [N, C, H, W] -> [N, C] spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 4 {
            return Err(Error::InvalidOp(format!(
                "global_avg_pool expects rank 4, got {:?}",
                self.shape
            )));
        }
        self.mean_axes(&[2, 3], false)
    }

    // -----------------------------------------------------------------------
    // Matrix multiplication
    // -----------------------------------------------------------------------

    /// 2-d or batched matrix product: [..., m, k] x [..., k, n] -> [..., m, n].
    /// Leading (batch) dimensions must match exactly.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_tape!(self, rhs);
        let ra = self.shape.len();
        let rb = rhs.shape.len();
        if ra < 2 || rb < 2 || ra != rb || self.shape[..ra - 2] != rhs.shape[..rb - 2] {
            return Err(Error::InnerDimMismatch {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let m = self.shape[ra - 2];
        let k = self.shape[ra - 1];
        let k2 = rhs.shape[rb - 2];
        let n = rhs.shape[rb - 1];
        if k != k2 {
            return Err(Error::InnerDimMismatch {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let batch: usize = self.shape[..ra - 2].iter().product();
        let mut out_shape = self.shape[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let data = {
            let inner = self.tape().inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[rhs.id].data;
            let mut out = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                unsafe {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        a.as_ptr().add(s * m * k),
                        k as isize,
                        1,
                        b.as_ptr().add(s * k * n),
                        n as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(s * m * n),
                        n as isize,
                        1,
                    );
                }
            }
            out
        };
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            let a = io.inputs[0].data;
            let b = io.inputs[1].data;
            let g = io.gout;
            let ga = io.inputs[0].needs.then(|| {
                let mut da = vec![T::zero(); a.len()];
                for s in 0..batch {
                    // dA = G * B^T
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.as_ptr().add(s * m * n),
                            n as isize,
                            1,
                            b.as_ptr().add(s * k * n),
                            1,
                            n as isize,
                            T::zero(),
                            da.as_mut_ptr().add(s * m * k),
                            k as isize,
                            1,
                        );
                    }
                }
                da
            });
            let gb = io.inputs[1].needs.then(|| {
                let mut db = vec![T::zero(); b.len()];
                for s in 0..batch {
                    // dB = A^T * G
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            a.as_ptr().add(s * m * k),
                            1,
                            k as isize,
                            g.as_ptr().add(s * m * n),
                            n as isize,
                            1,
                            T::zero(),
                            db.as_mut_ptr().add(s * k * n),
                            n as isize,
                            1,
                        );
                    }
                }
                db
            });
            vec![ga, gb]
        });
        Ok(self
            .tape()
            .push_result(data, out_shape, smallvec![self.id, rhs.id], rule))
    }

    // -----------------------------------------------------------------------
    // Shape manipulation
    // -----------------------------------------------------------------------

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidOp(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, new_shape
            )));
        }
        let data = self.value();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if io.inputs[0].needs {
                vec![Some(io.gout.to_vec())]
            } else {
                vec![None]
            }
        });
        Ok(self
            .tape()
            .push_result(data, new_shape.to_vec(), smallvec![self.id], rule))
    }

    /// Reorder dimensions; `perm` is a permutation of 0..rank.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidOp(format!(
                "permutation {:?} invalid for shape {:?}",
                perm, self.shape
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let data = self.with_data(|x| permute_copy(x, &self.shape, perm));
        let mut inverse = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        let out_shape_rule = out_shape.clone();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if io.inputs[0].needs {
                vec![Some(permute_copy(io.gout, &out_shape_rule, &inverse))]
            } else {
                vec![None]
            }
        });
        Ok(self
            .tape()
            .push_result(data, out_shape, smallvec![self.id], rule))
    }

    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor<T>> {
        let rank = self.shape.len();
        if d0 >= rank || d1 >= rank {
            return Err(Error::InvalidOp(format!(
                "transpose axes ({}, {}) out of range for shape {:?}",
                d0, d1, self.shape
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(&perm)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (outer, extent, inner) = self.split_at_axis(axis)?;
        if start + len > extent {
            return Err(Error::InvalidOp(format!(
                "narrow {}..{} exceeds extent {} on axis {}",
                start,
                start + len,
                extent,
                axis
            )));
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
            out
        });
        let in_len = self.numel();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if !io.inputs[0].needs {
                return vec![None];
            }
            let mut dx = vec![T::zero(); in_len];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * extent + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&io.gout[src..src + len * inner]);
            }
            vec![Some(dx)]
        });
        Ok(self
            .tape()
            .push_result(data, out_shape, smallvec![self.id], rule))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidOp("concat of zero tensors".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::InvalidOp(format!(
                "axis {} out of range for shape {:?}",
                axis, first.shape
            )));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_same_tape(p)?;
            if p.shape.len() != rank
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first.shape[d])
            {
                return Err(Error::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            lens.push(p.shape[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();

        let mut data = vec![T::zero(); outer * total * inner];
        for (pi, p) in parts.iter().enumerate() {
            let offset: usize = lens[..pi].iter().sum();
            let len = lens[pi];
            p.with_data(|x| {
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * total + offset) * inner;
                    data[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
                }
            });
        }
        let ids: SmallVec<[usize; 4]> = parts.iter().map(|p| p.id).collect();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            let mut grads = Vec::with_capacity(lens.len());
            for (pi, inp) in io.inputs.iter().enumerate() {
                if !inp.needs {
                    grads.push(None);
                    continue;
                }
                let offset: usize = lens[..pi].iter().sum();
                let len = lens[pi];
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * len * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&io.gout[src..src + len * inner]);
                }
                grads.push(Some(dx));
            }
            grads
        });
        Ok(first.tape().push_result(data, out_shape, ids, rule))
    }

    /// Materialize this tensor broadcast to `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        if !broadcastable_to(&self.shape, target) {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: target.to_vec(),
            });
        }
        let numel: usize = target.iter().product();
        let mut data = vec![T::zero(); numel];
        self.with_data(|x| {
            for_each_bcast(target, &self.shape, &[], |o, xoff, _, run, xstep, _| {
                if xstep {
                    data[o..o + run].copy_from_slice(&x[xoff..xoff + run]);
                } else {
                    let v = x[xoff];
                    for slot in &mut data[o..o + run] {
                        *slot = v;
                    }
                }
            });
        });
        let in_shape = self.shape.clone();
        let target_v = target.to_vec();
        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            if io.inputs[0].needs {
                vec![Some(reduce_to_shape(io.gout, &target_v, &in_shape))]
            } else {
                vec![None]
            }
        });
        Ok(self
            .tape()
            .push_result(data, target.to_vec(), smallvec![self.id], rule))
    }
}

fn permute_copy<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return x.to_vec();
    }
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_stride[last];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&x[src..src + inner_len]);
        } else {
            for i in 0..inner_len {
                out.push(x[src + i * inner_stride]);
            }
        }
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            src += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
