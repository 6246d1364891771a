//! Stateless tensor kernels with hand-written adjoints: same-padding
//! convolution via im2col, 2x max pooling, 2x (bi/tri)linear upsampling,
//! ReLU and channel concatenation.
//!
//! 2D tensors are treated as volumes with depth 1.

use crate::error::{Error, Result};
use crate::tensor::{Grid, Real, Tensor};

fn feature_grid<T: Real>(x: &Tensor<T>) -> Result<Grid> {
    if x.ndim() < 4 {
        return Err(Error::Shape(format!(
            "expected (batch, channels, *spatial), got {:?}",
            x.shape()
        )));
    }
    Grid::from_spatial(x.spatial())
}

fn kernel_grid<T: Real>(w: &Tensor<T>) -> Result<Grid> {
    Grid::from_spatial(&w.shape()[2..])
}

fn im2col<T: Real>(x: &[T], cin: usize, g: Grid, k: Grid, col: &mut [T]) {
    let p = g.len();
    let (pd, ph, pw) = ((k.d / 2) as isize, (k.h / 2) as isize, (k.w / 2) as isize);
    let w = g.w as isize;
    for ci in 0..cin {
        let plane = &x[ci * p..(ci + 1) * p];
        for kz in 0..k.d {
            for ky in 0..k.h {
                for kx in 0..k.w {
                    let row = ((ci * k.d + kz) * k.h + ky) * k.w + kx;
                    let out = &mut col[row * p..(row + 1) * p];
                    let dx = kx as isize - pw;
                    let lo = (-dx).clamp(0, w) as usize;
                    let hi = (w - dx).clamp(0, w) as usize;
                    for z in 0..g.d {
                        let sz = z as isize + kz as isize - pd;
                        for y in 0..g.h {
                            let sy = y as isize + ky as isize - ph;
                            let o = &mut out[(z * g.h + y) * g.w..][..g.w];
                            if sz < 0 || sz >= g.d as isize || sy < 0 || sy >= g.h as isize || lo >= hi {
                                o.fill(T::zero());
                                continue;
                            }
                            let src = &plane[(sz as usize * g.h + sy as usize) * g.w..][..g.w];
                            o[..lo].fill(T::zero());
                            o[hi..].fill(T::zero());
                            let s0 = (lo as isize + dx) as usize;
                            o[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], cin: usize, g: Grid, k: Grid, x: &mut [T]) {
    let p = g.len();
    let (pd, ph, pw) = ((k.d / 2) as isize, (k.h / 2) as isize, (k.w / 2) as isize);
    let w = g.w as isize;
    for ci in 0..cin {
        let plane = &mut x[ci * p..(ci + 1) * p];
        for kz in 0..k.d {
            for ky in 0..k.h {
                for kx in 0..k.w {
                    let row = ((ci * k.d + kz) * k.h + ky) * k.w + kx;
                    let src_row = &col[row * p..(row + 1) * p];
                    let dx = kx as isize - pw;
                    let lo = (-dx).clamp(0, w) as usize;
                    let hi = (w - dx).clamp(0, w) as usize;
                    if lo >= hi {
                        continue;
                    }
                    for z in 0..g.d {
                        let sz = z as isize + kz as isize - pd;
                        if sz < 0 || sz >= g.d as isize {
                            continue;
                        }
                        for y in 0..g.h {
                            let sy = y as isize + ky as isize - ph;
                            if sy < 0 || sy >= g.h as isize {
                                continue;
                            }
                            let c = &src_row[(z * g.h + y) * g.w..][..g.w];
                            let dst = &mut plane[(sz as usize * g.h + sy as usize) * g.w..][..g.w];
                            let s0 = (lo as isize + dx) as usize;
                            for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&c[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(Grid, Grid)> {
    let g = feature_grid(x)?;
    if weight.ndim() != x.ndim() || weight.shape()[1] != x.channels() {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let k = kernel_grid(weight)?;
    if k.d % 2 == 0 || k.h % 2 == 0 || k.w % 2 == 0 {
        return Err(Error::Shape("same-padding conv needs odd kernels".into()));
    }
    Ok((g, k))
}

/// Stride-1 same-padding convolution. `weight` is `(cout, cin, *kernel)`.
pub(crate) fn conv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let (g, k) = check_conv(x, weight)?;
    let (n, cin, cout) = (x.batch(), x.channels(), weight.shape()[0]);
    let p = g.len();
    let kk = cin * k.len();
    let mut shape = x.shape().to_vec();
    shape[1] = cout;
    let mut out = Tensor::zeros(&shape);
    let pointwise = k.len() == 1;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    for i in 0..n {
        let xi = x.item(i);
        let src: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, cin, g, k, &mut col);
            &col
        };
        let oi = out.item_mut(i);
        if let Some(b) = bias {
            for (row, &bv) in oi.chunks_mut(p).zip(b) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm_raw(cout, kk, p, weight.data(), kk, 1, src, p, 1, beta, oi, p, 1);
    }
    Ok(out)
}

/// Adjoint of [`conv`]. Accumulates into `dweight`/`dbias` and returns `dx`.
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: Option<&mut [T]>,
) -> Tensor<T> {
    let (g, k) = check_conv(x, weight).expect("conv trace shapes are consistent");
    let (n, cin, cout) = (x.batch(), x.channels(), weight.shape()[0]);
    let p = g.len();
    let kk = cin * k.len();
    let pointwise = k.len() == 1;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcol = vec![T::zero(); kk * p];
    let mut dx = Tensor::zeros(x.shape());
    let mut dbias = dbias;
    for i in 0..n {
        let xi = x.item(i);
        let src: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, cin, g, k, &mut col);
            &col
        };
        let dyi = dy.item(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (b, row) in db.iter_mut().zip(dyi.chunks(p)) {
                *b += row.iter().copied().sum::<T>();
            }
        }
        // dW (cout x kk) += dy (cout x p) . col^T (p x kk)
        T::gemm_raw(cout, p, kk, dyi, p, 1, src, 1, p, T::one(), dweight.data_mut(), kk, 1);
        // dcol (kk x p) = W^T (kk x cout) . dy (cout x p)
        if pointwise {
            T::gemm_raw(kk, cout, p, weight.data(), 1, kk, dyi, p, 1, T::zero(), dx.item_mut(i), p, 1);
        } else {
            T::gemm_raw(kk, cout, p, weight.data(), 1, kk, dyi, p, 1, T::zero(), &mut dcol, p, 1);
            col2im(&dcol, cin, g, k, dx.item_mut(i));
        }
    }
    dx
}

/// Pooling window: `(1, 2, 2)` for images, `(2, 2, 2)` for volumes.
fn pool_window(spatial_dims: usize) -> Grid {
    Grid {
        d: if spatial_dims == 3 { 2 } else { 1 },
        h: 2,
        w: 2,
    }
}

/// 2x max pooling; also returns the flat argmax index per output element.
pub(crate) fn max_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let g = feature_grid(x)?;
    let win = pool_window(x.spatial().len());
    if g.d % win.d != 0 || g.h % 2 != 0 || g.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pool needs even spatial dims, got {:?}",
            x.spatial()
        )));
    }
    let og = Grid {
        d: g.d / win.d,
        h: g.h / 2,
        w: g.w / 2,
    };
    let mut shape = x.shape().to_vec();
    for (s, v) in shape[2..].iter_mut().zip(if x.spatial().len() == 3 {
        vec![og.d, og.h, og.w]
    } else {
        vec![og.h, og.w]
    }) {
        *s = v;
    }
    let planes = x.batch() * x.channels();
    let mut out = Vec::with_capacity(planes * og.len());
    let mut arg = Vec::with_capacity(planes * og.len());
    for plane in x.data().chunks(g.len()) {
        for z in 0..og.d {
            for y in 0..og.h {
                for xx in 0..og.w {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dz in 0..win.d {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((z * win.d + dz) * g.h + y * 2 + dy) * g.w + xx * 2 + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    Ok((Tensor::new(shape, out)?, arg))
}

pub(crate) fn max_pool_backward<T: Real>(input_shape: &[usize], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let plane_in: usize = input_shape[2..].iter().product();
    let plane_out = dy.spatial_len();
    for (p, (dplane, aplane)) in dy.data().chunks(plane_out).zip(argmax.chunks(plane_out)).enumerate() {
        let dst = &mut dx.data_mut()[p * plane_in..(p + 1) * plane_in];
        for (&d, &a) in dplane.iter().zip(aplane) {
            dst[a as usize] += d;
        }
    }
    dx
}

/// Source taps for output position `j` of a 2x linear upsampling of a
/// length-`len` axis (half-pixel centers, edge clamped).
fn up_taps<T: Real>(j: usize, len: usize) -> [(usize, T); 2] {
    let i = j / 2;
    if j % 2 == 0 {
        if i == 0 {
            [(0, T::one()), (0, T::zero())]
        } else {
            [(i - 1, T::of(0.25)), (i, T::of(0.75))]
        }
    } else if i + 1 >= len {
        [(i, T::one()), (i, T::zero())]
    } else {
        [(i, T::of(0.75)), (i + 1, T::of(0.25))]
    }
}

fn up_axis<T: Real>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let s = &src[o * len * inner..(o + 1) * len * inner];
        let d = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for j in 0..2 * len {
            let dst = &mut d[j * inner..(j + 1) * inner];
            for (i, wgt) in up_taps::<T>(j, len) {
                if wgt == T::zero() {
                    continue;
                }
                for (a, &b) in dst.iter_mut().zip(&s[i * inner..(i + 1) * inner]) {
                    *a += wgt * b;
                }
            }
        }
    }
    out
}

fn up_axis_adjoint<T: Real>(dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let g = &dy[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let d = &mut out[o * len * inner..(o + 1) * len * inner];
        for j in 0..2 * len {
            let src = &g[j * inner..(j + 1) * inner];
            for (i, wgt) in up_taps::<T>(j, len) {
                if wgt == T::zero() {
                    continue;
                }
                for (a, &b) in d[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                    *a += wgt * b;
                }
            }
        }
    }
    out
}

/// 2x bilinear (2D) or trilinear (3D) upsampling.
pub(crate) fn upsample<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    feature_grid(x)?;
    let mut shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    let nd = shape.len();
    // innermost axis first
    for axis in (2..nd).rev() {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        data = up_axis(&data, outer, shape[axis], inner);
        shape[axis] *= 2;
    }
    Tensor::new(shape, data)
}

pub(crate) fn upsample_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut shape = dy.shape().to_vec();
    let mut data = dy.data().to_vec();
    let nd = shape.len();
    for axis in 2..nd {
        shape[axis] = input_shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        data = up_axis_adjoint(&data, outer, shape[axis], inner);
    }
    Tensor::new(shape, data).expect("adjoint restores input shape")
}

pub(crate) fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub(crate) fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &d)| if o > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// Concatenates along the channel axis.
pub(crate) fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.channels();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.batch() {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::new(shape, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub(crate) fn split<T: Real>(d: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let s = d.spatial_len();
    let (n, c) = (d.batch(), d.channels());
    let mut sa = d.shape().to_vec();
    sa[1] = first;
    let mut sb = d.shape().to_vec();
    sb[1] = c - first;
    let mut a = Vec::with_capacity(n * first * s);
    let mut b = Vec::with_capacity(n * (c - first) * s);
    for i in 0..n {
        let item = d.item(i);
        a.extend_from_slice(&item[..first * s]);
        b.extend_from_slice(&item[first * s..]);
    }
    (
        Tensor::new(sa, a).expect("split shape"),
        Tensor::new(sb, b).expect("split shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct-summation convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let g = Grid::from_spatial(x.spatial()).unwrap();
        let k = Grid::from_spatial(&w.shape()[2..]).unwrap();
        let (n, cin, cout) = (x.batch(), x.channels(), w.shape()[0]);
        let mut shape = x.shape().to_vec();
        shape[1] = cout;
        let mut out = Tensor::zeros(&shape);
        for i in 0..n {
            for co in 0..cout {
                for z in 0..g.d {
                    for y in 0..g.h {
                        for xx in 0..g.w {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for kz in 0..k.d {
                                    for ky in 0..k.h {
                                        for kx in 0..k.w {
                                            let sz = z as isize + kz as isize - (k.d / 2) as isize;
                                            let sy = y as isize + ky as isize - (k.h / 2) as isize;
                                            let sx = xx as isize + kx as isize - (k.w / 2) as isize;
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= g.d as isize || sy >= g.h as isize || sx >= g.w as isize {
                                                continue;
                                            }
                                            let xv = x.data()[((i * cin + ci) * g.d + sz as usize) * g.h * g.w + sy as usize * g.w + sx as usize];
                                            let wv = w.data()[((co * cin + ci) * k.d + kz) * k.h * k.w + ky * k.w + kx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[((i * cout + co) * g.d + z) * g.h * g.w + y * g.w + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation_2d_and_3d() {
        let x = rand_tensor(&[2, 3, 5, 4], 1);
        let w = rand_tensor(&[4, 3, 3, 3], 2);
        let b = [0.1, 0.2, -0.3, 0.0];
        let got = conv(&x, &w, Some(&b)).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &b)) < 1e-12);

        let x = rand_tensor(&[1, 2, 3, 4, 2], 3);
        let w = rand_tensor(&[2, 2, 3, 3, 3], 4);
        let got = conv(&x, &w, None).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &[0.0, 0.0])) < 1e-12);

        let w = rand_tensor(&[3, 2, 1, 1, 1], 5);
        let got = conv(&x, &w, Some(&[1.0, 2.0, 3.0])).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &[1.0, 2.0, 3.0])) < 1e-12);
    }

    // <dy, A x> == <A^T dy, x> for every linear kernel and its adjoint.
    #[test]
    fn conv_adjoint_identity() {
        for (xs, ws) in [
            (vec![2, 3, 6, 5], vec![2, 3, 3, 3]),
            (vec![1, 2, 4, 4, 4], vec![3, 2, 3, 3, 3]),
            (vec![2, 4, 3, 3], vec![2, 4, 1, 1]),
        ] {
            let x = rand_tensor(&xs, 10);
            let w = rand_tensor(&ws, 11);
            let y = conv(&x, &w, None).unwrap();
            let dy = rand_tensor(y.shape(), 12);
            let mut dw = Tensor::zeros(w.shape());
            let dx = conv_backward(&x, &w, &dy, &mut dw, None);
            assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-9);
            // conv is also linear in w
            assert!((dot(&dy, &y) - dot(&dw, &w)).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_adjoint_identity() {
        for shape in [vec![2, 3, 4, 5], vec![1, 2, 3, 2, 4], vec![1, 1, 1, 1]] {
            let x = rand_tensor(&shape, 20);
            let y = upsample(&x).unwrap();
            let dy = rand_tensor(y.shape(), 21);
            let dx = upsample_backward(x.shape(), &dy);
            assert_eq!(dx.shape(), x.shape());
            assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_interpolates() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 0.4);
        let y = upsample(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = upsample(&x).unwrap();
        assert_eq!(y.data()[..4], [0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = Tensor::<f64>::new(
            vec![1, 1, 2, 4],
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0],
        )
        .unwrap();
        let (y, arg) = max_pool(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let dx = max_pool_backward(x.shape(), &arg, &Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(max_pool(&odd).is_err());
        let vol = rand_tensor(&[1, 2, 4, 4, 4], 3);
        assert_eq!(max_pool(&vol).unwrap().0.shape(), &[1, 2, 2, 2, 2]);
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = rand_tensor(&[2, 2, 3, 3], 1);
        let b = rand_tensor(&[2, 3, 3, 3], 2);
        let c = concat(&a, &b).unwrap();
        let (a2, b2) = split(&c, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
