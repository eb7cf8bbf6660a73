//! Primitive layers with explicit forward caches and backward passes.
//!
//! Layers never own their weights: they hold [`ParamId`]s into a
//! [`ParamSet`], so the same layer graph serves parameters and gradients.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{ParamId, ParamSet, Real};

fn uniform_init<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> ndarray::ArrayD<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    ndarray::ArrayD::from_shape_simple_fn(shape, || T::from_f64(dist.sample(rng)))
}

/// 2-D convolution over `N x C x H x W` tensors, computed as im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

pub struct ConvCache<T> {
    cols: Array2<T>,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        // He-uniform for ReLU networks.
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform_init(rng, &[out_channels, in_channels, kernel, kernel], bound),
        );
        let bias = params.add(format!("{name}.bias"), ndarray::ArrayD::zeros(vec![out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix<'a, T: Real>(&self, params: &'a ParamSet<T>) -> ArrayView2<'a, T> {
        params
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x, ho, wo);
        let out2 = self.weight_matrix(params).dot(&cols);
        let bias = params.get(self.bias);
        let plane = ho * wo;
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        {
            let src = out2.as_slice().expect("gemm output is contiguous");
            let dst = out.as_slice_mut().expect("fresh array");
            for co in 0..self.out_channels {
                let b = bias[co];
                let row = &src[co * n * plane..(co + 1) * n * plane];
                for s in 0..n {
                    let d = &mut dst[(s * self.out_channels + co) * plane..][..plane];
                    for (o, v) in d.iter_mut().zip(&row[s * plane..(s + 1) * plane]) {
                        *o = *v + b;
                    }
                }
            }
        }
        (
            out,
            ConvCache {
                cols,
                input_dim: (n, c, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        grads: &mut ParamSet<T>,
    ) -> Array4<T> {
        let (n, _, _, _) = cache.input_dim;
        let (ho, wo) = cache.out_hw;
        let plane = ho * wo;
        let mut dy2 = Array2::zeros((self.out_channels, n * plane));
        {
            let src = dy.as_standard_layout();
            let src = src.as_slice().expect("standard layout");
            let dst = dy2.as_slice_mut().expect("fresh array");
            for s in 0..n {
                for co in 0..self.out_channels {
                    dst[co * n * plane + s * plane..][..plane]
                        .copy_from_slice(&src[(s * self.out_channels + co) * plane..][..plane]);
                }
            }
        }
        let dw = dy2.dot(&cache.cols.t());
        {
            let gw = grads.get_mut(self.weight);
            let mut gw2 = gw
                .view_mut()
                .into_shape_with_order(dw.raw_dim())
                .expect("contiguous weight grad");
            gw2 += &dw;
        }
        {
            let gb = grads.get_mut(self.bias);
            let db = dy2.sum_axis(Axis(1));
            let mut gb1 = gb.view_mut().into_dimensionality::<Ix1>().expect("bias is 1-D");
            gb1 += &db;
        }
        let dcols = self.weight_matrix(params).t().dot(&dy2);
        self.col2im(&dcols, cache.input_dim, cache.out_hw)
    }

    fn im2col<T: Real>(&self, x: &Array4<T>, ho: usize, wo: usize) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let plane = ho * wo;
        let mut cols = Array2::zeros((c * k * k, n * plane));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("fresh array");
        let row_len = n * plane;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let out_row = &mut dst[row * row_len..(row + 1) * row_len];
                    for s in 0..n {
                        let img = &src[(s * c + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let base = s * plane + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    out_row[base + ox] = img[iy * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(
        &self,
        dcols: &Array2<T>,
        (n, c, h, w): (usize, usize, usize, usize),
        (ho, wo): (usize, usize),
    ) -> Array4<T> {
        let k = self.kernel;
        let plane = ho * wo;
        let mut dx = Array4::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        let row_len = n * plane;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let in_row = &src[row * row_len..(row + 1) * row_len];
                    for s in 0..n {
                        let img = &mut dxs[(s * c + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let base = s * plane + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    img[iy * w + ix as usize] += in_row[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer on `batch x in` matrices; weight stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform_init(rng, &[in_dim, out_dim], bound));
        let bias = params.add(format!("{name}.bias"), uniform_init(rng, &[out_dim], bound));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_dim, "linear input width mismatch");
        let w = params.get(self.weight).view().into_dimensionality::<Ix2>().expect("2-D weight");
        let b = params.get(self.bias).view().into_dimensionality::<Ix1>().expect("1-D bias");
        x.dot(&w) + &b
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        grads: &mut ParamSet<T>,
    ) -> Array2<T> {
        {
            let mut gw = grads
                .get_mut(self.weight)
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-D weight");
            gw += &x.t().dot(&dy);
        }
        {
            let mut gb = grads
                .get_mut(self.bias)
                .view_mut()
                .into_dimensionality::<Ix1>()
                .expect("1-D bias");
            gb += &dy.sum_axis(Axis(0));
        }
        let w = params.get(self.weight).view().into_dimensionality::<Ix2>().expect("2-D weight");
        dy.dot(&w.t())
    }
}

pub fn relu<T: Real, D: ndarray::Dimension>(x: ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real, D: ndarray::Dimension>(
    out: &ndarray::Array<T, D>,
    dy: ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy;
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Mean over spatial positions: `N x C x H x W -> N x C`.
pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for s in 0..n {
        for ch in 0..c {
            out[[s, ch]] = x.slice(s![s, ch, .., ..]).sum() * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dy: ArrayView2<T>, (h, w): (usize, usize)) -> Array4<T> {
    let (n, c) = dy.dim();
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            dx.slice_mut(s![s, ch, .., ..]).fill(dy[[s, ch]] * scale);
        }
    }
    dx
}

/// Max pooling; the cache stores the flat argmax index of every output.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn forward<T: Real>(&self, x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("standard layout");
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for (plane_idx, dst) in out
            .as_slice_mut()
            .expect("fresh array")
            .chunks_mut(ho * wo)
            .enumerate()
        {
            let base = plane_idx * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dst[oy * wo + ox] = best;
                    argmax.push(best_idx);
                }
            }
        }
        (
            out,
            MaxPoolCache {
                argmax,
                input_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward<T: Real>(&self, cache: &MaxPoolCache, dy: &Array4<T>) -> Array4<T> {
        let mut dx = Array4::zeros(cache.input_dim);
        let dst = dx.as_slice_mut().expect("fresh array");
        let dys = dy.as_standard_layout();
        for (g, &idx) in dys.iter().zip(&cache.argmax) {
            dst[idx] += *g;
        }
        dx
    }
}

/// Row-wise L2 normalization returning the norms for the backward pass.
pub fn l2_normalize_rows<T: Real>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let eps = T::from_f64(1e-12);
    let norms: Array1<T> = x
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(eps))
        .collect();
    let z = x / &norms.view().insert_axis(Axis(1));
    (z, norms)
}

/// `dL/dx = (g - z (z . g)) / |x|` for each row.
pub fn l2_normalize_rows_backward<T: Real>(z: &Array2<T>, norms: &Array1<T>, g: ArrayView2<T>) -> Array2<T> {
    let mut dx = Array2::zeros(z.raw_dim());
    for (i, mut row) in dx.outer_iter_mut().enumerate() {
        let zi = z.row(i);
        let gi = g.row(i);
        let proj = zi.dot(&gi);
        let inv = T::one() / norms[i];
        row.zip_mut_with(&gi, |d, &gv| *d = gv);
        row.zip_mut_with(&zi, |d, &zv| *d = (*d - zv * proj) * inv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let d = Uniform::new(-1.0, 1.0).unwrap();
        Array4::from_shape_simple_fn(shape, || d.sample(rng))
    }

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn naive_conv(
        x: &Array4<f64>,
        w: &ndarray::ArrayD<f64>,
        b: &ndarray::ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Array4::zeros((n, co, ho, wo));
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[[o]];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[[o, ci, ki, kj]] * x[[s, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[s, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 3, 7), (2, 0, 1)] {
            let mut p = ParamSet::<f64>::new();
            let conv = Conv2d::new(&mut p, "c", 3, 5, k, stride, pad, &mut rng);
            let bias = p.find("c.bias").unwrap();
            p.replace(bias, ndarray::ArrayD::from_shape_fn(vec![5], |i| i[0] as f64 * 0.1));
            let x = rand_tensor(&mut rng, (2, 3, 9, 8));
            let (y, _) = conv.forward(&p, &x);
            let expected = naive_conv(&x, p.get(conv.weight), p.get(bias), stride, pad);
            assert_eq!(y.dim(), expected.dim());
            for (a, b) in y.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::<f64>::new();
        let conv = Conv2d::new(&mut p, "c", 2, 3, 3, 2, 1, &mut rng);
        let x = rand_tensor(&mut rng, (2, 2, 6, 5));
        let (y, cache) = conv.forward(&p, &x);
        let upstream = rand_tensor(&mut rng, y.dim());
        let loss = |p: &ParamSet<f64>, x: &Array4<f64>| (conv.forward(p, x).0 * &upstream).sum();
        let mut g = p.zeros_like();
        let dx = conv.backward(&p, &cache, &upstream, &mut g);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 5, 4], [0, 1, 3, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        for (id, _, t) in p.iter() {
            for flat in [0, t.len() / 2, t.len() - 1] {
                let mut pp = p.clone();
                pp.get_mut(id).as_slice_mut().unwrap()[flat] += h;
                let mut pm = p.clone();
                pm.get_mut(id).as_slice_mut().unwrap()[flat] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                let an = g.get(id).as_slice().unwrap()[flat];
                assert!((fd - an).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let pool = MaxPool2d { kernel: 3, stride: 2, padding: 1 };
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dx = pool.backward(&cache, &Array4::<f64>::ones(y.dim()));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
    }
}
