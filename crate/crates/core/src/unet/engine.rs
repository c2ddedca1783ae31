//! Feature-map kernels with hand-written backward passes.
//!
//! Maps are stored channels-last on a zero-padded grid of
//! `(h + 2) x (w + 2)` pixels plus two trailing pixels. With that layout a
//! same-padded 3x3 convolution is three GEMMs over shifted, contiguous views
//! of the input: tap `(ky, kx)` reads pixel `r + ky * (w + 2) + kx` for
//! output row `r`, and the output row lands at pixel `r + w + 3`. Rows that
//! fall on padding columns are garbage and get zeroed afterwards. The input
//! gradient is the same correlation run on the output gradient with mirrored
//! taps.

use std::borrow::Cow;

use num_traits::Float;

/// Element type of the engine. `f32` for training, `f64` for gradient checks.
pub(crate) trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` on raw strided views.
    ///
    /// # Safety
    /// Every strided access of the three views must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

/// Channels-last feature map on a padded grid.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Map<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Map<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); ((h + 2) * (w + 2) + 2) * c] }
    }

    /// Padded row pitch in pixels.
    #[inline]
    pub fn pitch(&self) -> usize {
        self.w + 2
    }

    /// Padded pixel index of interior `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> usize {
        (y + 1) * self.pitch() + x + 1
    }

    pub fn from_interleaved(c: usize, h: usize, w: usize, values: &[T]) -> Self {
        debug_assert_eq!(values.len(), c * h * w);
        let mut m = Self::zeros(c, h, w);
        for y in 0..h {
            let dst = m.pixel(y, 0) * c;
            m.data[dst..dst + w * c].copy_from_slice(&values[y * w * c..(y + 1) * w * c]);
        }
        m
    }

    /// Interior values, channels last, row-major.
    #[cfg(test)]
    pub fn interior(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.c * self.h * self.w);
        for y in 0..self.h {
            let src = self.pixel(y, 0) * self.c;
            out.extend_from_slice(&self.data[src..src + self.w * self.c]);
        }
        out
    }

    pub fn clear_padding(&mut self) {
        let (c, p, h) = (self.c, self.pitch(), self.h);
        self.data[..(p + 1) * c].fill(T::zero());
        for y in 1..=h {
            let right = (y * p + p - 1) * c;
            // Right pad of row y and left pad of row y + 1 are adjacent.
            self.data[right..right + 2 * c].fill(T::zero());
        }
        let tail = ((h + 1) * p + 1) * c;
        self.data[tail..].fill(T::zero());
    }

    fn add_assign(&mut self, other: &Map<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// `out += ` same-padded 3x3 correlation of `inp` with `w`, laid out
/// `[ky][kx][in_channel][out_channel]`.
///
/// The three taps of one kernel row read overlapping, contiguous windows, so
/// each row is a single GEMM with `3 * in_channels` inner dimension.
fn correlate_into<T: Scalar>(inp: &Map<T>, w: &[T], out: &mut Map<T>) {
    let (ci, co, p) = (inp.c, out.c, inp.pitch());
    assert_eq!((inp.h, inp.w), (out.h, out.w));
    assert_eq!(w.len(), 9 * ci * co);
    let rows = inp.h * p;
    let out_off = (p + 1) * co;
    for ky in 0..3 {
        let a_off = ky * p * ci;
        debug_assert!(a_off + (rows - 1) * ci + 3 * ci <= inp.data.len());
        // SAFETY: row r of the A view covers pixels r + ky * p .. r + ky * p + 3,
        // which for the last row ends exactly at the padded buffer length when
        // ky = 2. B is a (3 ci) x co block of w. C spans rows * co elements
        // from out_off, inside out.data.
        unsafe {
            T::gemm(
                rows,
                3 * ci,
                co,
                inp.data.as_ptr().add(a_off),
                ci as isize,
                1,
                w.as_ptr().add(ky * 3 * ci * co),
                co as isize,
                1,
                out.data.as_mut_ptr().add(out_off),
                co as isize,
                1,
            );
        }
    }
}

/// The `[ky][kx][c][co]` slab of input group `base..base + ci` of a weight
/// laid out over `cin_total` input channels. Borrows when the group is the
/// whole input.
fn group_weight<T: Scalar>(weight: &[T], base: usize, ci: usize, cin_total: usize, cout: usize) -> Cow<'_, [T]> {
    if ci == cin_total {
        return Cow::Borrowed(weight);
    }
    let mut out = Vec::with_capacity(9 * ci * cout);
    for tap in 0..9 {
        let start = (tap * cin_total + base) * cout;
        out.extend_from_slice(&weight[start..start + ci * cout]);
    }
    Cow::Owned(out)
}

/// Weight of the adjoint correlation: taps mirrored, channel roles swapped,
/// so that correlating `dz` with it yields the input gradient.
fn adjoint_weight<T: Scalar>(weight: &[T], base: usize, ci: usize, cin_total: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 9 * ci * cout];
    for tap in 0..9 {
        let src_tap = 8 - tap;
        for c in 0..ci {
            let src = (src_tap * cin_total + base + c) * cout;
            for o in 0..cout {
                out[(tap * cout + o) * ci + c] = weight[src + o];
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution over the channel concatenation of `inputs`,
/// followed by bias and optional ReLU.
///
/// `weight` is laid out `[tap][in_channel][out_channel]` with taps row-major.
pub(crate) fn conv3x3<T: Scalar>(inputs: &[&Map<T>], weight: &[T], bias: &[T], cout: usize, relu: bool) -> Map<T> {
    let (h, w) = (inputs[0].h, inputs[0].w);
    let cin_total: usize = inputs.iter().map(|m| m.c).sum();
    assert_eq!(weight.len(), 9 * cin_total * cout);
    assert_eq!(bias.len(), cout);
    let mut out = Map::<T>::zeros(cout, h, w);
    let mut base = 0;
    for inp in inputs {
        correlate_into(inp, &group_weight(weight, base, inp.c, cin_total, cout), &mut out);
        base += inp.c;
    }
    out.clear_padding();
    for y in 0..h {
        let start = out.pixel(y, 0) * cout;
        for px in out.data[start..start + w * cout].chunks_exact_mut(cout) {
            for (v, b) in px.iter_mut().zip(bias) {
                let z = *v + *b;
                *v = if relu && z < T::zero() { T::zero() } else { z };
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3`] given the pre-activation gradient `dz`
/// (padding must be zero). Accumulates into `dweight` and `dbias`; fills an
/// input gradient for each `want_input` entry that is true.
pub(crate) fn conv3x3_backward<T: Scalar>(
    inputs: &[&Map<T>],
    weight: &[T],
    dz: &Map<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    want_input: &[bool],
) -> Vec<Option<Map<T>>> {
    let cout = dz.c;
    let (h, w) = (dz.h, dz.w);
    let cin_total: usize = inputs.iter().map(|m| m.c).sum();
    let p = dz.pitch();
    let rows = h * p;
    let dz_off = (p + 1) * cout;

    for px in dz.data.chunks_exact(cout) {
        for (db, g) in dbias.iter_mut().zip(px) {
            *db = *db + *g;
        }
    }

    let mut grads = Vec::with_capacity(inputs.len());
    let mut base = 0;
    for (inp, &want) in inputs.iter().zip(want_input) {
        let ci = inp.c;
        // dW[ky] ((3 ci) x cout) = A_ky^T . dZ, with A_ky the forward view.
        let mut dw = vec![T::zero(); 9 * ci * cout];
        for ky in 0..3 {
            // SAFETY: the transposed A view touches the same elements as the
            // forward view of correlate_into; dZ spans rows * cout elements
            // from dz_off; C is a (3 ci) x cout block of dw.
            unsafe {
                T::gemm(
                    3 * ci,
                    rows,
                    cout,
                    inp.data.as_ptr().add(ky * p * ci),
                    1,
                    ci as isize,
                    dz.data.as_ptr().add(dz_off),
                    cout as isize,
                    1,
                    dw.as_mut_ptr().add(ky * 3 * ci * cout),
                    cout as isize,
                    1,
                );
            }
        }
        for tap in 0..9 {
            let dst = (tap * cin_total + base) * cout;
            for (d, g) in dweight[dst..dst + ci * cout].iter_mut().zip(&dw[tap * ci * cout..(tap + 1) * ci * cout]) {
                *d = *d + *g;
            }
        }
        let din = want.then(|| {
            let mut d = Map::<T>::zeros(ci, h, w);
            correlate_into(dz, &adjoint_weight(weight, base, ci, cin_total, cout), &mut d);
            d.clear_padding();
            d
        });
        grads.push(din);
        base += ci;
    }
    grads
}

/// `grad * (out > 0)`, the ReLU derivative expressed through its output.
pub(crate) fn relu_backward<T: Scalar>(mut grad: Map<T>, out: &Map<T>) -> Map<T> {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}

/// 2x2 max pooling. Returns the pooled map and the winning quadrant
/// (0..4, row-major in the window) for each output element.
pub(crate) fn maxpool2<T: Scalar>(inp: &Map<T>) -> (Map<T>, Vec<u8>) {
    let (c, oh, ow) = (inp.c, inp.h / 2, inp.w / 2);
    let mut out = Map::zeros(c, oh, ow);
    let mut arg = vec![0u8; c * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let src = [
                inp.pixel(2 * y, 2 * x),
                inp.pixel(2 * y, 2 * x + 1),
                inp.pixel(2 * y + 1, 2 * x),
                inp.pixel(2 * y + 1, 2 * x + 1),
            ];
            let dst = out.pixel(y, x) * c;
            let a = (y * ow + x) * c;
            for ch in 0..c {
                let mut best = inp.data[src[0] * c + ch];
                let mut which = 0u8;
                for (q, &s) in src.iter().enumerate().skip(1) {
                    let v = inp.data[s * c + ch];
                    if v > best {
                        best = v;
                        which = q as u8;
                    }
                }
                out.data[dst + ch] = best;
                arg[a + ch] = which;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(dout: &Map<T>, arg: &[u8], h: usize, w: usize) -> Map<T> {
    let c = dout.c;
    let mut din = Map::zeros(c, h, w);
    for y in 0..dout.h {
        for x in 0..dout.w {
            let src = dout.pixel(y, x) * c;
            let a = (y * dout.w + x) * c;
            for ch in 0..c {
                let q = arg[a + ch] as usize;
                let dst = din.pixel(2 * y + q / 2, 2 * x + q % 2) * c + ch;
                din.data[dst] = dout.data[src + ch];
            }
        }
    }
    din
}

/// 2x nearest-neighbor upsampling.
pub(crate) fn upsample2<T: Scalar>(inp: &Map<T>) -> Map<T> {
    let c = inp.c;
    let mut out = Map::zeros(c, inp.h * 2, inp.w * 2);
    for y in 0..out.h {
        for x in 0..out.w {
            let src = inp.pixel(y / 2, x / 2) * c;
            let dst = out.pixel(y, x) * c;
            out.data[dst..dst + c].copy_from_slice(&inp.data[src..src + c]);
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dout: &Map<T>) -> Map<T> {
    let c = dout.c;
    let mut din = Map::zeros(c, dout.h / 2, dout.w / 2);
    for y in 0..dout.h {
        for x in 0..dout.w {
            let src = dout.pixel(y, x) * c;
            let dst = din.pixel(y / 2, x / 2) * c;
            for ch in 0..c {
                din.data[dst + ch] = din.data[dst + ch] + dout.data[src + ch];
            }
        }
    }
    din
}

/// 1x1 convolution to a single logit per pixel, row-major interior.
pub(crate) fn head_logits<T: Scalar>(inp: &Map<T>, weight: &[T], bias: T) -> Vec<T> {
    let c = inp.c;
    let mut out = Vec::with_capacity(inp.h * inp.w);
    for y in 0..inp.h {
        let start = inp.pixel(y, 0) * c;
        for px in inp.data[start..start + inp.w * c].chunks_exact(c) {
            let z = px.iter().zip(weight).fold(bias, |acc, (a, b)| acc + *a * *b);
            out.push(z);
        }
    }
    out
}

/// Backward of [`head_logits`]: returns the input gradient and accumulates
/// weight and bias gradients.
pub(crate) fn head_backward<T: Scalar>(
    inp: &Map<T>,
    weight: &[T],
    dlogits: &[T],
    dweight: &mut [T],
    dbias: &mut T,
) -> Map<T> {
    let c = inp.c;
    let mut din = Map::zeros(c, inp.h, inp.w);
    for y in 0..inp.h {
        for x in 0..inp.w {
            let g = dlogits[y * inp.w + x];
            *dbias = *dbias + g;
            let p = inp.pixel(y, x) * c;
            for ch in 0..c {
                dweight[ch] = dweight[ch] + inp.data[p + ch] * g;
                din.data[p + ch] = weight[ch] * g;
            }
        }
    }
    din
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub(crate) fn accumulate<T: Scalar>(into: &mut Map<T>, other: &Map<T>) {
    into.add_assign(other);
}
