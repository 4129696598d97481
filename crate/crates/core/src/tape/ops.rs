//! The fixed operation set recorded on a [`Tape`]: convolution, activations,
//! resampling, channel concatenation and the scalar arithmetic losses are
//! assembled from.

use super::{NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::{gemm, Layout, Real};

/// Convolution parameters. The kernel node holds a `kH×kW×(Cin·Cout)` grid laid
/// out as `[ky][kx][ci][co]`; the bias node holds a `1×1×Cout` grid.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: NodeId,
    pub bias: NodeId,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels_out(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 kernel, stride 1, no padding: the input itself is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geometry<T: Real>(input: &Grid<T>, kernel: &Grid<T>, bias: &Grid<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, cin) = input.shape();
    let (kh, kw, kc) = kernel.shape();
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must have odd sides")));
    }
    if cin == 0 || kc % cin != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel channel count {kc} is not a multiple of input channels {cin}"),
        ));
    }
    let cout = kc / cin;
    if bias.shape() != (1, 1, cout) {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected (1, 1, {cout})", bias.shape()),
        ));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("input {h}x{w} with padding {pad} is smaller than kernel {kh}x{kw}"),
        ));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Patch matrix with one row per output pixel and `kH·kW·Cin` columns.
fn im2col<T: Real>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let cols = g.patch_len();
    let mut out = vec![T::zero(); g.pixels_out() * cols];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut out[(oy * g.wo + ox) * cols..][..cols];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    out
}

/// Scatter-add a patch-matrix gradient back onto the input layout.
fn col2im<T: Real>(g: &ConvGeom, cols_grad: &[T], input_grad: &mut [T]) {
    let cols = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols_grad[(oy * g.wo + ox) * cols..][..cols];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for (d, &s) in input_grad[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: ConvGeom,
}

impl<T: Real> Op<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let g = &self.geom;
        let (input, kernel) = (inputs[0], inputs[1]);
        let go = grad_out.as_slice();
        let (m, kk, n) = (g.pixels_out(), g.patch_len(), g.cout);

        let grad_bias = needs[2].then(|| {
            let mut b = Grid::zeros(1, 1, n);
            let bs = b.as_mut_slice();
            for row in go.chunks_exact(n) {
                for (acc, &v) in bs.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            b
        });

        let grad_kernel = needs[1].then(|| {
            let mut gk = Grid::zeros(g.kh, g.kw, g.cin * g.cout);
            if g.is_pointwise() {
                gemm(kk, m, n, input.as_slice(), Layout::Transposed, go, Layout::RowMajor, T::zero(), gk.as_mut_slice());
            } else {
                let cols = im2col(g, input.as_slice());
                gemm(kk, m, n, &cols, Layout::Transposed, go, Layout::RowMajor, T::zero(), gk.as_mut_slice());
            }
            gk
        });

        let grad_input = needs[0].then(|| {
            let mut gi = Grid::zeros(g.h, g.w, g.cin);
            if g.is_pointwise() {
                gemm(m, n, kk, go, Layout::RowMajor, kernel.as_slice(), Layout::Transposed, T::zero(), gi.as_mut_slice());
            } else {
                let mut cols = vec![T::zero(); m * kk];
                gemm(m, n, kk, go, Layout::RowMajor, kernel.as_slice(), Layout::Transposed, T::zero(), &mut cols);
                col2im(g, &cols, gi.as_mut_slice());
            }
            gi
        });

        vec![grad_input, grad_kernel, grad_bias]
    }
}

/// 2-D cross-correlation with zero padding: `out[y,x,co] = b[co] + Σ k[ky,kx,ci,co]·in[y·s+ky−p, x·s+kx−p, ci]`.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, input: NodeId, spec: &ConvSpec) -> Result<NodeId> {
    let x = tape.value(input);
    let k = tape.value(spec.kernel);
    let b = tape.value(spec.bias);
    let geom = conv_geometry(x, k, b, spec.stride, spec.padding)?;
    let (m, kk, n) = (geom.pixels_out(), geom.patch_len(), geom.cout);

    let mut out = vec![T::zero(); m * n];
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(b.as_slice());
    }
    if geom.is_pointwise() {
        gemm(m, kk, n, x.as_slice(), Layout::RowMajor, k.as_slice(), Layout::RowMajor, T::one(), &mut out);
    } else {
        let cols = im2col(&geom, x.as_slice());
        gemm(m, kk, n, &cols, Layout::RowMajor, k.as_slice(), Layout::RowMajor, T::one(), &mut out);
    }
    let value = Grid::from_vec(geom.ho, geom.wo, n, out).map_err(|_| Error::shape("conv2d", "non-finite output"))?;
    Ok(tape.record(Box::new(Conv2d { geom }), vec![input, spec.kernel, spec.bias], value))
}

struct Relu;

impl<T: Real> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let mut g = grad_out.clone();
        for (gv, &x) in g.as_mut_slice().iter_mut().zip(inputs[0].as_slice()) {
            if x <= T::zero() {
                *gv = T::zero();
            }
        }
        vec![Some(g)]
    }

    fn kink_margin(&self, inputs: &[&Grid<T>]) -> Option<T> {
        inputs[0].as_slice().iter().map(|v| v.abs()).reduce(T::min)
    }
}

/// Elementwise `max(0, x)`; the subgradient at 0 is taken as 0.
pub fn relu<T: Real>(tape: &mut Tape<T>, input: NodeId) -> NodeId {
    let value = tape.value(input).map(|v| v.max(T::zero()));
    tape.record(Box::new(Relu), vec![input], value)
}

struct Sigmoid;

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Op<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _inputs: &[&Grid<T>], output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let mut g = grad_out.clone();
        for (gv, &y) in g.as_mut_slice().iter_mut().zip(output.as_slice()) {
            *gv *= y * (T::one() - y);
        }
        vec![Some(g)]
    }
}

/// Elementwise logistic function.
pub fn sigmoid<T: Real>(tape: &mut Tape<T>, input: NodeId) -> NodeId {
    let value = tape.value(input).map(sigmoid_scalar);
    tape.record(Box::new(Sigmoid), vec![input], value)
}

struct MaxPool2;

/// Row-major index inside the 2×2 block of the maximum (first wins on ties),
/// plus the gap between the largest and second largest value.
fn pool_block<T: Real>(x: &Grid<T>, oy: usize, ox: usize, c: usize) -> ((usize, usize), T, T) {
    let mut best = (2 * oy, 2 * ox);
    let mut best_v = x.get(best.0, best.1, c);
    let mut second = T::neg_infinity();
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
        let v = x.get(y, xx, c);
        if v > best_v {
            second = best_v;
            best_v = v;
            best = (y, xx);
        } else if v > second {
            second = v;
        }
    }
    (best, best_v, best_v - second)
}

impl<T: Real> Op<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(&self, inputs: &[&Grid<T>], output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let x = inputs[0];
        let mut g = Grid::zeros(x.height(), x.width(), x.channels());
        for oy in 0..output.height() {
            for ox in 0..output.width() {
                for c in 0..output.channels() {
                    let ((y, xx), _, _) = pool_block(x, oy, ox, c);
                    let i = g.index(y, xx, c);
                    g.as_mut_slice()[i] += grad_out.get(oy, ox, c);
                }
            }
        }
        vec![Some(g)]
    }

    fn kink_margin(&self, inputs: &[&Grid<T>]) -> Option<T> {
        let x = inputs[0];
        let mut margin = T::infinity();
        for oy in 0..x.height() / 2 {
            for ox in 0..x.width() / 2 {
                for c in 0..x.channels() {
                    // All-zero windows come from saturated ReLUs; their kink is the ReLU's.
                    let (_, best, gap) = pool_block(x, oy, ox, c);
                    if best != T::zero() {
                        margin = margin.min(gap);
                    }
                }
            }
        }
        Some(margin)
    }
}

/// 2×2 max-pooling with stride 2. Height and width must be even.
pub fn maxpool2<T: Real>(tape: &mut Tape<T>, input: NodeId) -> Result<NodeId> {
    let x = tape.value(input);
    let (h, w, c) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("input {h}x{w} must have even sides")));
    }
    let value = Grid::from_fn(h / 2, w / 2, c, |oy, ox, ch| pool_block(x, oy, ox, ch).1);
    Ok(tape.record(Box::new(MaxPool2), vec![input], value))
}

struct UpsampleNearest;

impl<T: Real> Op<T> for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let (h, w, c) = inputs[0].shape();
        let mut g = Grid::zeros(h, w, c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                for ch in 0..c {
                    let i = g.index(y / 2, x / 2, ch);
                    g.as_mut_slice()[i] += grad_out.get(y, x, ch);
                }
            }
        }
        vec![Some(g)]
    }
}

/// 2× nearest-neighbour upsampling.
pub fn upsample_nearest<T: Real>(tape: &mut Tape<T>, input: NodeId) -> NodeId {
    let x = tape.value(input);
    let (h, w, c) = x.shape();
    let value = Grid::from_fn(2 * h, 2 * w, c, |y, xx, ch| x.get(y / 2, xx / 2, ch));
    tape.record(Box::new(UpsampleNearest), vec![input], value)
}

struct ConcatChannels {
    ca: usize,
    cb: usize,
}

impl<T: Real> Op<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _inputs: &[&Grid<T>], output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let (h, w, _) = output.shape();
        let c = self.ca + self.cb;
        let split = |off: usize, n: usize| {
            let mut data = Vec::with_capacity(h * w * n);
            for px in grad_out.as_slice().chunks_exact(c) {
                data.extend_from_slice(&px[off..off + n]);
            }
            Grid::from_vec(h, w, n, data).expect("gradient split shape")
        };
        vec![needs[0].then(|| split(0, self.ca)), needs[1].then(|| split(self.ca, self.cb))]
    }
}

/// Concatenate along the channel axis; spatial sizes must agree.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ga, gb) = (tape.value(a), tape.value(b));
    if (ga.height(), ga.width()) != (gb.height(), gb.width()) {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial sizes differ: {:?} vs {:?}", ga.shape(), gb.shape()),
        ));
    }
    let (h, w, ca) = ga.shape();
    let cb = gb.channels();
    let mut data = Vec::with_capacity(h * w * (ca + cb));
    for i in 0..h * w {
        data.extend_from_slice(&ga.as_slice()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&gb.as_slice()[i * cb..(i + 1) * cb]);
    }
    let value = Grid::from_vec(h, w, ca + cb, data)?;
    Ok(tape.record(Box::new(ConcatChannels { ca, cb }), vec![a, b], value))
}

struct Add;

impl<T: Real> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        vec![needs[0].then(|| grad_out.clone()), needs[1].then(|| grad_out.clone())]
    }
}

/// Elementwise `a + b`.
pub fn add<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ga, gb) = (tape.value(a), tape.value(b));
    if !ga.same_shape(gb) {
        return Err(Error::shape("add", format!("{:?} vs {:?}", ga.shape(), gb.shape())));
    }
    let mut value = ga.clone();
    value.add_assign(gb);
    Ok(tape.record(Box::new(Add), vec![a, b], value))
}

struct Mul;

impl<T: Real> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let times = |other: &Grid<T>| {
            let mut g = grad_out.clone();
            for (gv, &o) in g.as_mut_slice().iter_mut().zip(other.as_slice()) {
                *gv *= o;
            }
            g
        };
        vec![needs[0].then(|| times(inputs[1])), needs[1].then(|| times(inputs[0]))]
    }
}

/// Elementwise `a · b`.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ga, gb) = (tape.value(a), tape.value(b));
    if !ga.same_shape(gb) {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", ga.shape(), gb.shape())));
    }
    let mut value = ga.clone();
    for (v, &o) in value.as_mut_slice().iter_mut().zip(gb.as_slice()) {
        *v *= o;
    }
    Ok(tape.record(Box::new(Mul), vec![a, b], value))
}

struct Affine<T> {
    scale: T,
}

impl<T: Real> Op<T> for Affine<T> {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, _inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let mut g = grad_out.clone();
        g.scale(self.scale);
        vec![Some(g)]
    }
}

/// Elementwise `scale·x + shift`.
pub fn affine<T: Real>(tape: &mut Tape<T>, input: NodeId, scale: T, shift: T) -> NodeId {
    let value = tape.value(input).map(|v| scale * v + shift);
    tape.record(Box::new(Affine { scale }), vec![input], value)
}

struct Sum;

impl<T: Real> Op<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let (h, w, c) = inputs[0].shape();
        vec![Some(Grid::filled(h, w, c, grad_out.item()))]
    }
}

/// Sum of all elements, as a `1×1×1` node.
pub fn sum<T: Real>(tape: &mut Tape<T>, input: NodeId) -> NodeId {
    let value = Grid::scalar(tape.value(input).sum());
    tape.record(Box::new(Sum), vec![input], value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_once(input: Grid<f64>, kernel: Grid<f64>, bias: Grid<f64>, stride: usize, padding: usize) -> Result<Grid<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let k = tape.param(kernel);
        let b = tape.param(bias);
        let y = conv2d(&mut tape, x, &ConvSpec { kernel: k, bias: b, stride, padding })?;
        Ok(tape.value(y).clone())
    }

    /// Direct nested-loop cross-correlation, independent of the im2col path.
    fn conv_reference(x: &Grid<f64>, k: &Grid<f64>, b: &[f64], stride: usize, pad: usize) -> Grid<f64> {
        let (h, w, cin) = x.shape();
        let (kh, kw, kc) = k.shape();
        let cout = kc / cin;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Grid::from_fn(ho, wo, cout, |oy, ox, co| {
            let mut acc = b[co];
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += k.get(ky, kx, ci * cout + co) * x.get(iy as usize, ix as usize, ci);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_scalar_identity_scale() {
        let out = conv_once(Grid::scalar(3.0), Grid::scalar(2.0), Grid::scalar(0.0), 1, 0).unwrap();
        assert_eq!(out.item(), 6.0);
    }

    #[test]
    fn conv_zero_kernel_yields_bias() {
        let x = Grid::from_fn(5, 6, 2, |y, x, c| (y * 7 + x * 3 + c) as f64);
        let out = conv_once(x, Grid::zeros(3, 3, 2 * 3), Grid::from_vec(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap(), 1, 1).unwrap();
        assert_eq!(out.shape(), (5, 6, 3));
        for px in out.as_slice().chunks(3) {
            assert_eq!(px, [0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        for k in [1usize, 3, 5] {
            let x = Grid::from_fn(6, 7, 1, |y, x, _| ((y * 31 + x * 17) % 11) as f64 - 5.0);
            let mut kernel = Grid::zeros(k, k, 1);
            kernel.set(k / 2, k / 2, 0, 1.0);
            let out = conv_once(x.clone(), kernel, Grid::scalar(0.0), 1, (k - 1) / 2).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn conv_matches_reference_with_stride_and_channels() {
        let x = Grid::from_fn(7, 9, 3, |y, x, c| ((y * 13 + x * 7 + c * 5) % 17) as f64 / 17.0 - 0.4);
        let k = Grid::from_fn(3, 3, 3 * 4, |y, x, c| ((y * 5 + x * 3 + c) % 7) as f64 / 7.0 - 0.5);
        let b = [0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let got = conv_once(x.clone(), k.clone(), Grid::from_vec(1, 1, 4, b.to_vec()).unwrap(), stride, pad).unwrap();
            let want = conv_reference(&x, &k, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_shape_errors() {
        let x = Grid::<f64>::zeros(4, 4, 2);
        let err = conv_once(x.clone(), Grid::zeros(3, 3, 3), Grid::zeros(1, 1, 1), 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
        assert!(conv_once(x.clone(), Grid::zeros(2, 2, 2), Grid::zeros(1, 1, 1), 1, 0).is_err());
        assert!(conv_once(x.clone(), Grid::zeros(3, 3, 4), Grid::zeros(1, 1, 1), 1, 1).is_err());
        assert!(conv_once(x, Grid::zeros(7, 7, 2), Grid::zeros(1, 1, 1), 1, 0).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Grid::from_vec(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap());
        let y = relu(&mut tape, x);
        assert_eq!(tape.value(y).as_slice(), [0.0, 0.0, 2.0]);
        let p = tape.constant(Grid::filled(2, 2, 1, 0.7));
        let q = relu(&mut tape, p);
        assert_eq!(tape.value(q), tape.value(p));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Grid::from_vec(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap());
        let y = relu(&mut tape, x);
        let s = sum(&mut tape, y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Grid::from_vec(1, 3, 1, vec![0.0, -50.0, 50.0]).unwrap());
        let y = sigmoid(&mut tape, x);
        let v = tape.value(y).as_slice();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] < 1e-20);
        assert!(v[2] <= 1.0 && v[2] > 1.0 - 1e-15);
    }

    #[test]
    fn maxpool_values_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Grid::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = maxpool2(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).as_slice(), [4.0]);
        let c = tape.constant(Grid::filled(4, 6, 2, 1.5));
        let pc = maxpool2(&mut tape, c).unwrap();
        assert_eq!(tape.value(pc), &Grid::filled(2, 3, 2, 1.5));
        let odd = tape.constant(Grid::zeros(3, 4, 1));
        assert!(maxpool2(&mut tape, odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_row_major() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Grid::filled(2, 2, 1, 1.0));
        let y = maxpool2(&mut tape, x).unwrap();
        let s = sum(&mut tape, y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Grid::scalar(7.0));
        let y = upsample_nearest(&mut tape, x);
        assert_eq!(tape.value(y), &Grid::filled(2, 2, 1, 7.0));
        let z = tape.constant(Grid::zeros(3, 5, 2));
        let u = upsample_nearest(&mut tape, z);
        assert_eq!(tape.value(u).shape(), (6, 10, 2));
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Grid::from_fn(3, 4, 2, |y, x, c| (y * 10 + x + c) as f64));
        let b = tape.constant(Grid::zeros(3, 4, 3));
        let ab = concat_channels(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(ab).shape(), (3, 4, 5));
        let e = tape.constant(Grid::zeros(3, 4, 0));
        let ae = concat_channels(&mut tape, a, e).unwrap();
        assert_eq!(tape.value(ae), tape.value(a));
        let bad = tape.constant(Grid::zeros(3, 5, 1));
        assert!(concat_channels(&mut tape, a, bad).is_err());
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let build = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Grid::from_fn(8, 8, 3, |y, x, c| ((y * 7 + x * 5 + c * 3) % 13) as f64 * 0.1));
            let k = tape.param(Grid::from_fn(3, 3, 12, |y, x, c| ((y + 2 * x + c) % 5) as f64 * 0.07 - 0.1));
            let b = tape.param(Grid::filled(1, 1, 4, 0.01));
            let c = conv2d(&mut tape, x, &ConvSpec { kernel: k, bias: b, stride: 1, padding: 1 }).unwrap();
            let r = relu(&mut tape, c);
            let p = maxpool2(&mut tape, r).unwrap();
            let s = sum(&mut tape, p);
            let g = tape.backward(s).unwrap();
            (tape.value(p).to_hm01_bytes(), g.get(k).unwrap().to_hm01_bytes())
        };
        assert_eq!(build(), build());
    }
}
