//! Forward and backward passes for one sample.

use super::engine::{self, Map, Scalar};
use super::UNetConfig;

/// Clamp applied to probabilities before taking logs.
pub(crate) const PROB_EPS: f64 = 1e-7;

/// Index of the conv whose weight/bias live at `2 * idx` / `2 * idx + 1`.
struct Convs {
    depth: usize,
}

impl Convs {
    fn enc(&self, level: usize, j: usize) -> usize {
        2 * level + j
    }
    fn bottleneck(&self, j: usize) -> usize {
        2 * self.depth + j
    }
    fn dec(&self, level: usize, j: usize) -> usize {
        2 * self.depth + 2 + 3 * (self.depth - 1 - level) + j
    }
    fn head(&self) -> usize {
        5 * self.depth + 2
    }
}

/// Activations kept for the backward pass. Per-level vectors are indexed
/// by level.
pub(crate) struct Tape<T> {
    input: Map<T>,
    enc1: Vec<Map<T>>,
    enc2: Vec<Map<T>>,
    pooled: Vec<Map<T>>,
    argmax: Vec<Vec<u8>>,
    bott1: Map<T>,
    bott2: Map<T>,
    up: Vec<Map<T>>,
    upc: Vec<Map<T>>,
    dec1: Vec<Map<T>>,
    dec2: Vec<Map<T>>,
    pub logits: Vec<T>,
}

fn conv<T: Scalar>(params: &[&[T]], idx: usize, inputs: &[&Map<T>], relu: bool) -> Map<T> {
    let bias = params[2 * idx + 1];
    engine::conv3x3(inputs, params[2 * idx], bias, bias.len(), relu)
}

pub(crate) fn forward_tape<T: Scalar>(cfg: &UNetConfig, params: &[&[T]], input: &[T]) -> Tape<T> {
    let d = cfg.depth;
    let ix = Convs { depth: d };
    let n = cfg.input_size;
    let x = Map::from_interleaved(cfg.input_channels, n, n, input);

    let (mut enc1, mut enc2, mut pooled, mut argmax) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for l in 0..d {
        let src = if l == 0 { &x } else { &pooled[l - 1] };
        let a = conv(params, ix.enc(l, 0), &[src], true);
        let b = conv(params, ix.enc(l, 1), &[&a], true);
        let (p, am) = engine::maxpool2(&b);
        enc1.push(a);
        enc2.push(b);
        pooled.push(p);
        argmax.push(am);
    }
    let bott1 = conv(params, ix.bottleneck(0), &[&pooled[d - 1]], true);
    let bott2 = conv(params, ix.bottleneck(1), &[&bott1], true);

    let (mut up, mut upc, mut dec1, mut dec2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for l in (0..d).rev() {
        let below: &Map<T> = if l == d - 1 { &bott2 } else { dec2.last().expect("deeper level done") };
        let u = engine::upsample2(below);
        let uc = conv(params, ix.dec(l, 0), &[&u], true);
        let d1 = conv(params, ix.dec(l, 1), &[&enc2[l], &uc], true);
        let d2 = conv(params, ix.dec(l, 2), &[&d1], true);
        up.push(u);
        upc.push(uc);
        dec1.push(d1);
        dec2.push(d2);
    }
    for v in [&mut up, &mut upc, &mut dec1, &mut dec2] {
        v.reverse();
    }
    let h = ix.head();
    let logits = engine::head_logits(&dec2[0], params[2 * h], params[2 * h + 1][0]);
    Tape { input: x, enc1, enc2, pooled, argmax, bott1, bott2, up, upc, dec1, dec2, logits }
}

/// Gradients of every parameter tensor given `dL/dlogit` per pixel.
pub(crate) fn backward<T: Scalar>(cfg: &UNetConfig, params: &[&[T]], tape: &Tape<T>, dlogits: &[T]) -> Vec<Vec<T>> {
    let d = cfg.depth;
    let ix = Convs { depth: d };
    let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();

    let conv_back = |grads: &mut Vec<Vec<T>>, idx: usize, inputs: &[&Map<T>], dz: &Map<T>, want: &[bool]| {
        let (lo, hi) = grads.split_at_mut(2 * idx + 1);
        engine::conv3x3_backward(inputs, params[2 * idx], dz, &mut lo[2 * idx], &mut hi[0], want)
    };

    let h = ix.head();
    let mut dbias = T::zero();
    let mut dcur = {
        let (lo, hi) = grads.split_at_mut(2 * h + 1);
        let g = engine::head_backward(&tape.dec2[0], params[2 * h], dlogits, &mut lo[2 * h], &mut dbias);
        hi[0][0] = dbias;
        g
    };

    let mut dskip: Vec<Option<Map<T>>> = (0..d).map(|_| None).collect();
    for l in 0..d {
        let dz = engine::relu_backward(dcur, &tape.dec2[l]);
        let dd1 = conv_back(&mut grads, ix.dec(l, 2), &[&tape.dec1[l]], &dz, &[true]).remove(0).unwrap();
        let dz = engine::relu_backward(dd1, &tape.dec1[l]);
        let mut g = conv_back(&mut grads, ix.dec(l, 1), &[&tape.enc2[l], &tape.upc[l]], &dz, &[true, true]);
        let dupc = g.pop().unwrap().unwrap();
        dskip[l] = g.pop().unwrap();
        let dz = engine::relu_backward(dupc, &tape.upc[l]);
        let dup = conv_back(&mut grads, ix.dec(l, 0), &[&tape.up[l]], &dz, &[true]).remove(0).unwrap();
        dcur = engine::upsample2_backward(&dup);
    }

    let dz = engine::relu_backward(dcur, &tape.bott2);
    let db1 = conv_back(&mut grads, ix.bottleneck(1), &[&tape.bott1], &dz, &[true]).remove(0).unwrap();
    let dz = engine::relu_backward(db1, &tape.bott1);
    let mut dpool = conv_back(&mut grads, ix.bottleneck(0), &[&tape.pooled[d - 1]], &dz, &[true]).remove(0).unwrap();

    for l in (0..d).rev() {
        let n = tape.enc2[l].h;
        let mut de2 = engine::maxpool2_backward(&dpool, &tape.argmax[l], n, n);
        if let Some(s) = dskip[l].take() {
            engine::accumulate(&mut de2, &s);
        }
        let dz = engine::relu_backward(de2, &tape.enc2[l]);
        let de1 = conv_back(&mut grads, ix.enc(l, 1), &[&tape.enc1[l]], &dz, &[true]).remove(0).unwrap();
        let dz = engine::relu_backward(de1, &tape.enc1[l]);
        let src = if l == 0 { &tape.input } else { &tape.pooled[l - 1] };
        let mut g = conv_back(&mut grads, ix.enc(l, 0), &[src], &dz, &[l > 0]);
        if l > 0 {
            dpool = g.remove(0).unwrap();
        }
    }
    grads
}

/// Probabilities clamped like the loss clamps them, so saturated logits
/// still map strictly inside (0, 1).
pub(crate) fn predict<T: Scalar>(cfg: &UNetConfig, params: &[&[T]], input: &[T]) -> Vec<T> {
    let (lo, hi) = (T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
    forward_tape(cfg, params, input).logits.into_iter().map(|z| engine::sigmoid(z).max(lo).min(hi)).collect()
}

/// Clamped binary cross-entropy of one pixel.
pub(crate) fn bce_pixel(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Summed BCE over one sample and the parameter gradients of
/// `scale * summed BCE`.
pub(crate) fn loss_and_grad<T: Scalar>(
    cfg: &UNetConfig,
    params: &[&[T]],
    input: &[T],
    target: &[u8],
    scale: f64,
) -> (f64, Vec<Vec<T>>) {
    let tape = forward_tape(cfg, params, input);
    let mut loss = 0.0;
    let dlogits: Vec<T> = tape
        .logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let p = engine::sigmoid(z).as_f64();
            let t = t as f64;
            loss += bce_pixel(p, t);
            T::of((p - t) * scale)
        })
        .collect();
    let grads = backward(cfg, params, &tape, &dlogits);
    (loss, grads)
}

/// Summed BCE over one sample, no gradients.
#[cfg(test)]
pub(crate) fn loss_only<T: Scalar>(cfg: &UNetConfig, params: &[&[T]], input: &[T], target: &[u8]) -> (f64, Vec<T>) {
    let probs = predict(cfg, params, input);
    let loss = probs.iter().zip(target).map(|(&p, &t)| bce_pixel(p.as_f64(), t as f64)).sum();
    (loss, probs)
}
