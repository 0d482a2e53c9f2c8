use super::{PhaseIndex, Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride-1 zero-padded 2-D cross-correlation.
///
/// `x` is `C_in×H×W`, `weight` is `C_out×C_in×k×k`, `bias` has `C_out` entries.
pub fn conv2d_s1<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (c_in, h, w) = x.dims3()?;
    let (c_out, wc_in, kh, kw) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Shape(format!(
                "conv weight must be C_out×C_in×k×k, got {:?}",
                weight.shape()
            )))
        }
    };
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if kh != kw || kh == 0 {
        return Err(Error::Shape(format!("conv kernel must be square and non-empty, got {kh}×{kw}")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv bias must have {c_out} entries, got shape {:?}",
            bias.shape()
        )));
    }
    let k = kh;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if hp < k || wp < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {hp}×{wp}"
        )));
    }
    let (oh, ow) = (hp - k + 1, wp - k + 1);

    let padded = if pad == 0 {
        x.data().to_vec()
    } else {
        let mut buf = vec![T::zero(); c_in * hp * wp];
        for c in 0..c_in {
            for y in 0..h {
                let src = &x.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let start = (c * hp + y + pad) * wp + pad;
                buf[start..start + w].copy_from_slice(src);
            }
        }
        buf
    };

    // accumulate in f64 and round once, so the result is the correctly
    // rounded value of the exact sum in all but pathological cases
    let padded: Vec<f64> = padded.into_iter().map(Scalar::as_f64).collect();
    let wd = weight.data();
    let mut out = Vec::with_capacity(c_out * oh * ow);
    let mut plane = vec![0f64; oh * ow];
    for co in 0..c_out {
        plane.iter_mut().for_each(|v| *v = bias.data()[co].as_f64());
        for ci in 0..c_in {
            let src = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * c_in + ci) * k + ky) * k + kx].as_f64();
                    for oy in 0..oh {
                        let row = &src[(oy + ky) * wp + kx..(oy + ky) * wp + kx + ow];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (d, &s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        out.extend(plane.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Size-preserving `k×k` max filter anchored at the top-left of each
/// window, with edge replication past the bottom and right borders.
///
/// Followed by `subsample_phase` at phase 0 this is a standard max pool.
pub fn sliding_max<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if k == 0 {
        return Err(Error::Shape("max filter window must be at least 1".into()));
    }
    if k > h || k > w {
        return Err(Error::Shape(format!(
            "max filter window {k} larger than the {h}×{w} map"
        )));
    }
    // separable: rows first, then columns
    let mut rows = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut rows[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xi, d) in dst.iter_mut().enumerate() {
                let mut m = src[xi];
                for dx in 1..k {
                    m = m.max(src[(xi + dx).min(w - 1)]);
                }
                *d = m;
            }
        }
    }
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xi in 0..w {
                let mut m = rows[(ch * h + y) * w + xi];
                for dy in 1..k {
                    m = m.max(rows[(ch * h + (y + dy).min(h - 1)) * w + xi]);
                }
                out[(ch * h + y) * w + xi] = m;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Keeps one phase of a subsampled grid:
/// `out[c, n, m] = x[c, rate_h·n + s_h, rate_w·m + s_w]`.
///
/// The output is always `⌊H/rate_h⌋ × ⌊W/rate_w⌋`; reads past the last
/// row or column are clamped to it, so every phase yields the same shape.
pub fn subsample_phase<T: Scalar>(x: &Tensor<T>, p: PhaseIndex) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = subsampled_extent(h, w, p.rate_h, p.rate_w)?;
    if p.s_h >= p.rate_h || p.s_w >= p.rate_w {
        return Err(Error::Range(format!("phase {p:?} outside its rate")));
    }
    let cols: Vec<usize> = (0..ow).map(|m| (p.rate_w * m + p.s_w).min(w - 1)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for n in 0..oh {
            let y = (p.rate_h * n + p.s_h).min(h - 1);
            let row = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend(cols.iter().map(|&xi| row[xi]));
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Every phase of a subsampling layer at once (a pixel unshuffle), in
/// row-major phase order: index `s_h·rate_w + s_w`.
pub fn subsample_all_phases<T: Scalar>(x: &Tensor<T>, rate_h: usize, rate_w: usize) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = subsampled_extent(h, w, rate_h, rate_w)?;
    let mut outs: Vec<Vec<T>> = (0..rate_h * rate_w).map(|_| Vec::with_capacity(c * oh * ow)).collect();
    for ch in 0..c {
        for n in 0..oh {
            for s_h in 0..rate_h {
                let y = (rate_h * n + s_h).min(h - 1);
                let row = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                for m in 0..ow {
                    for s_w in 0..rate_w {
                        outs[s_h * rate_w + s_w].push(row[(rate_w * m + s_w).min(w - 1)]);
                    }
                }
            }
        }
    }
    outs.into_iter()
        .map(|d| Tensor::new(vec![c, oh, ow], d))
        .collect()
}

pub(crate) fn subsampled_extent(h: usize, w: usize, rate_h: usize, rate_w: usize) -> Result<(usize, usize)> {
    if rate_h == 0 || rate_w == 0 {
        return Err(Error::Range(format!(
            "subsampling rate must be at least 1, got ({rate_h}, {rate_w})"
        )));
    }
    let (oh, ow) = (h / rate_h, w / rate_w);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!(
            "subsampling a {h}×{w} map by ({rate_h}, {rate_w}) leaves nothing"
        )));
    }
    Ok((oh, ow))
}

/// Nearest-neighbour resampling with `src = ⌊dst · src_extent / dst_extent⌋`.
pub fn nearest_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {h}×{w} to {out_h}×{out_w}"
        )));
    }
    let cols: Vec<usize> = (0..out_w).map(|j| j * w / out_w).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for i in 0..out_h {
            let y = i * h / out_h;
            let row = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend(cols.iter().map(|&xi| row[xi]));
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// `out[c, i, j] = x[c, clamp(i + dy), clamp(j + dx)]`, same shape.
pub fn translate_clamp<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if dy.unsigned_abs() >= h || dx.unsigned_abs() >= w {
        return Err(Error::Shape(format!(
            "shift ({dy}, {dx}) not smaller than the {h}×{w} map"
        )));
    }
    let clamp = |i: usize, d: isize, n: usize| (i as isize + d).clamp(0, n as isize - 1) as usize;
    let cols: Vec<usize> = (0..w).map(|j| clamp(j, dx, w)).collect();
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for i in 0..h {
            let y = clamp(i, dy, h);
            let row = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend(cols.iter().map(|&xi| row[xi]));
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Fully connected layer: `weight · x + bias`, `weight` is `K×d`.
///
/// `x` may have any shape with `d` elements in total.
pub fn dense_head<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, d) = match weight.shape()[..] {
        [k, d] => (k, d),
        _ => {
            return Err(Error::Shape(format!(
                "dense weight must be K×d, got {:?}",
                weight.shape()
            )))
        }
    };
    if x.len() != d {
        return Err(Error::Shape(format!(
            "dense layer expects {d} inputs, got {} (shape {:?})",
            x.len(),
            x.shape()
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::Shape(format!(
            "dense bias must have {k} entries, got shape {:?}",
            bias.shape()
        )));
    }
    let out = (0..k)
        .map(|row| {
            let wr = &weight.data()[row * d..(row + 1) * d];
            let acc: f64 = wr
                .iter()
                .zip(x.data())
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            T::from_f64(acc + bias.data()[row].as_f64())
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Numerically stable softmax over all elements.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let probs = softmax_f64(z.data());
    Tensor {
        shape: z.shape.clone(),
        data: probs.into_iter().map(T::from_f64).collect(),
    }
}

pub(crate) fn softmax_f64<T: Scalar>(z: &[T]) -> Vec<f64> {
    let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-channel spatial mean of a `C×H×W` tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("global average pool over an empty map".into()));
    }
    let n = (h * w) as f64;
    let out = x
        .data()
        .chunks(h * w)
        .take(c)
        .map(|plane| T::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / n))
        .collect();
    Ok(Tensor::vector(out))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::vector(x.data().to_vec())
}

/// Mirrors a `C×H×W` tensor left to right.
pub fn hflip<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    Ok(Tensor::from_fn3(c, h, w, |ch, y, xi| x.at3(ch, y, w - 1 - xi)))
}
