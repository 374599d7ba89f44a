//! Raw numeric kernels behind the tape operations.
//!
//! Every kernel writes each output element from exactly one task with a
//! fixed sequential inner loop, so results are bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use super::ndarray::NdArray;
use crate::error::{Result, SdgError};

/// Validated dimensions of a same-padded 3D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dDims {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub r: usize,
}

pub fn conv3d_dims(input_shape: &[usize], kernel_shape: &[usize]) -> Result<Conv3dDims> {
    if input_shape.len() != 5 {
        return Err(SdgError::contract(format!(
            "conv3d input must be [B,Cin,D,H,W], got {input_shape:?}"
        )));
    }
    if kernel_shape.len() != 5 {
        return Err(SdgError::contract(format!(
            "conv3d kernels must be [Cout,Cin,k,k,k], got {kernel_shape:?}"
        )));
    }
    let (b, cin, d, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let (cout, kcin, k) = (kernel_shape[0], kernel_shape[1], kernel_shape[2]);
    if kernel_shape[3] != k || kernel_shape[4] != k {
        return Err(SdgError::contract(format!(
            "conv3d kernels must be cubic, got {kernel_shape:?}"
        )));
    }
    if k % 2 == 0 || k == 0 {
        return Err(SdgError::contract(format!(
            "conv3d kernel size must be odd, got {k}"
        )));
    }
    if kcin != cin {
        return Err(SdgError::contract(format!(
            "conv3d channel mismatch: input has {cin}, kernels expect {kcin}"
        )));
    }
    if d == 0 || h == 0 || w == 0 {
        return Err(SdgError::contract("conv3d spatial extents must be >= 1"));
    }
    Ok(Conv3dDims {
        b,
        cin,
        cout,
        d,
        h,
        w,
        k,
        r: (k - 1) / 2,
    })
}

/// Same-padded cross-correlation. Out-of-bounds taps read `pad`.
///
/// Implemented as a zero-padded correlation of `input - pad` plus the
/// constant `pad * sum(kernel)` per output channel, which keeps the inner
/// loops free of boundary tests.
pub fn conv3d_forward(
    input: &NdArray,
    kernels: &NdArray,
    bias: Option<&NdArray>,
    pad: f64,
    dims: &Conv3dDims,
) -> NdArray {
    let &Conv3dDims {
        b,
        cin,
        cout,
        d,
        h,
        w,
        k,
        r,
    } = dims;
    let spatial = d * h * w;
    let kvol = k * k * k;

    let shifted_storage;
    let xin: &[f64] = if pad != 0.0 {
        shifted_storage = input.data().iter().map(|&v| v - pad).collect::<Vec<f64>>();
        &shifted_storage
    } else {
        input.data()
    };
    let kdata = kernels.data();

    // Per-channel base value: bias + pad * sum of kernel weights.
    let base: Vec<f64> = (0..cout)
        .map(|co| {
            let mut v = bias.map_or(0.0, |bv| bv.data()[co]);
            if pad != 0.0 {
                v += pad * kdata[co * cin * kvol..(co + 1) * cin * kvol].iter().sum::<f64>();
            }
            v
        })
        .collect();

    let mut out = vec![0.0; b * cout * spatial];
    let work = b * cout * spatial * cin * kvol;

    let plane = |chunk: &mut [f64], idx: usize| {
        let bi = idx / cout;
        let co = idx % cout;
        chunk.fill(base[co]);
        for ci in 0..cin {
            let in_plane = &xin[(bi * cin + ci) * spatial..(bi * cin + ci + 1) * spatial];
            let kplane = &kdata[(co * cin + ci) * kvol..(co * cin + ci + 1) * kvol];
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = kplane[(dz * k + dy) * k + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let x0 = r.saturating_sub(dx);
                        let x1 = (w + r).saturating_sub(dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        for z in r.saturating_sub(dz)..(d + r).saturating_sub(dz).min(d) {
                            let zi = z + dz - r;
                            for y in r.saturating_sub(dy)..(h + r).saturating_sub(dy).min(h) {
                                let yi = y + dy - r;
                                let src = &in_plane[(zi * h + yi) * w + x0 + dx - r..];
                                let dst = &mut chunk[(z * h + y) * w + x0..(z * h + y) * w + x1];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if work > 1 << 17 {
        out.par_chunks_mut(spatial)
            .enumerate()
            .for_each(|(idx, chunk)| plane(chunk, idx));
    } else {
        for (idx, chunk) in out.chunks_mut(spatial).enumerate() {
            plane(chunk, idx);
        }
    }

    NdArray::new(vec![b, cout, d, h, w], out).expect("conv3d output shape")
}

/// Gradient of the convolution with respect to its input.
pub fn conv3d_backward_input(gout: &NdArray, kernels: &NdArray, dims: &Conv3dDims) -> NdArray {
    let &Conv3dDims {
        b,
        cin,
        cout,
        d,
        h,
        w,
        k,
        r,
    } = dims;
    let spatial = d * h * w;
    let kvol = k * k * k;
    let gdata = gout.data();
    let kdata = kernels.data();

    let mut gin = vec![0.0; b * cin * spatial];
    let work = b * cout * spatial * cin * kvol;

    let plane = |chunk: &mut [f64], idx: usize| {
        let bi = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let gplane = &gdata[(bi * cout + co) * spatial..(bi * cout + co + 1) * spatial];
            let kplane = &kdata[(co * cin + ci) * kvol..(co * cin + ci + 1) * kvol];
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = kplane[(dz * k + dy) * k + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        // out position (z,y,x) reads input (z+dz-r, ...), so
                        // input (zi,yi,xi) feeds out (zi-dz+r, ...).
                        let xi0 = dx.saturating_sub(r);
                        let xi1 = (w + dx).saturating_sub(r).min(w);
                        if xi0 >= xi1 {
                            continue;
                        }
                        for zi in dz.saturating_sub(r)..(d + dz).saturating_sub(r).min(d) {
                            let z = zi + r - dz;
                            for yi in dy.saturating_sub(r)..(h + dy).saturating_sub(r).min(h) {
                                let y = yi + r - dy;
                                let src = &gplane[(z * h + y) * w + xi0 + r - dx..];
                                let dst =
                                    &mut chunk[(zi * h + yi) * w + xi0..(zi * h + yi) * w + xi1];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if work > 1 << 17 {
        gin.par_chunks_mut(spatial)
            .enumerate()
            .for_each(|(idx, chunk)| plane(chunk, idx));
    } else {
        for (idx, chunk) in gin.chunks_mut(spatial).enumerate() {
            plane(chunk, idx);
        }
    }

    NdArray::new(vec![b, cin, d, h, w], gin).expect("conv3d input-gradient shape")
}

/// Gradient with respect to the kernel weights. `pad` must match forward.
pub fn conv3d_backward_kernels(
    input: &NdArray,
    gout: &NdArray,
    pad: f64,
    dims: &Conv3dDims,
) -> NdArray {
    let &Conv3dDims {
        b,
        cin,
        cout,
        d,
        h,
        w,
        k,
        r,
    } = dims;
    let spatial = d * h * w;
    let kvol = k * k * k;
    let gdata = gout.data();

    let shifted_storage;
    let xin: &[f64] = if pad != 0.0 {
        shifted_storage = input.data().iter().map(|&v| v - pad).collect::<Vec<f64>>();
        &shifted_storage
    } else {
        input.data()
    };

    let mut gw = vec![0.0; cout * cin * kvol];
    let work = b * cout * spatial * cin * kvol;

    let per_cout = |chunk: &mut [f64], co: usize| {
        for ci in 0..cin {
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let x0 = r.saturating_sub(dx);
                        let x1 = (w + r).saturating_sub(dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for bi in 0..b {
                            let gplane =
                                &gdata[(bi * cout + co) * spatial..(bi * cout + co + 1) * spatial];
                            let in_plane =
                                &xin[(bi * cin + ci) * spatial..(bi * cin + ci + 1) * spatial];
                            for z in r.saturating_sub(dz)..(d + r).saturating_sub(dz).min(d) {
                                let zi = z + dz - r;
                                for y in r.saturating_sub(dy)..(h + r).saturating_sub(dy).min(h) {
                                    let yi = y + dy - r;
                                    let g = &gplane[(z * h + y) * w + x0..(z * h + y) * w + x1];
                                    let s = &in_plane[(zi * h + yi) * w + x0 + dx - r..];
                                    acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                        chunk[(ci * k * k + dz * k + dy) * k + dx] = acc;
                    }
                }
            }
        }
    };

    if work > 1 << 17 {
        gw.par_chunks_mut(cin * kvol)
            .enumerate()
            .for_each(|(co, chunk)| per_cout(chunk, co));
    } else {
        for (co, chunk) in gw.chunks_mut(cin * kvol).enumerate() {
            per_cout(chunk, co);
        }
    }

    NdArray::new(vec![cout, cin, k, k, k], gw).expect("conv3d kernel-gradient shape")
}

pub fn conv3d_backward_bias(gout: &NdArray, dims: &Conv3dDims) -> NdArray {
    let &Conv3dDims {
        b, cout, d, h, w, ..
    } = dims;
    let spatial = d * h * w;
    let gdata = gout.data();
    let mut gb = vec![0.0; cout];
    for bi in 0..b {
        for (co, slot) in gb.iter_mut().enumerate() {
            *slot += gdata[(bi * cout + co) * spatial..(bi * cout + co + 1) * spatial]
                .iter()
                .sum::<f64>();
        }
    }
    NdArray::from_vec(gb)
}

/// Gradient with respect to the padding value: the sum over output
/// positions of the kernel mass falling outside the volume.
pub fn conv3d_backward_pad(gout: &NdArray, kernels: &NdArray, dims: &Conv3dDims) -> f64 {
    let &Conv3dDims {
        b,
        cin,
        cout,
        d,
        h,
        w,
        k,
        r,
    } = dims;
    let spatial = d * h * w;
    let kvol = k * k * k;
    let gdata = gout.data();
    let kdata = kernels.data();

    let mut grad = 0.0;
    for co in 0..cout {
        // Inclusive 3D prefix sums of this channel's kernel summed over Cin,
        // so the in-bounds tap mass at any position is one box lookup.
        let mut ksum = vec![0.0; kvol];
        for ci in 0..cin {
            for (s, &v) in ksum
                .iter_mut()
                .zip(&kdata[(co * cin + ci) * kvol..(co * cin + ci + 1) * kvol])
            {
                *s += v;
            }
        }
        let total: f64 = ksum.iter().sum();
        let mut prefix = ksum;
        for dz in 0..k {
            for dy in 0..k {
                for dx in 1..k {
                    prefix[(dz * k + dy) * k + dx] += prefix[(dz * k + dy) * k + dx - 1];
                }
            }
        }
        for dz in 0..k {
            for dy in 1..k {
                for dx in 0..k {
                    prefix[(dz * k + dy) * k + dx] += prefix[(dz * k + dy - 1) * k + dx];
                }
            }
        }
        for dz in 1..k {
            for dy in 0..k {
                for dx in 0..k {
                    prefix[(dz * k + dy) * k + dx] += prefix[((dz - 1) * k + dy) * k + dx];
                }
            }
        }
        let boxed = |z0: usize, z1: usize, y0: usize, y1: usize, x0: usize, x1: usize| -> f64 {
            // inclusive box [z0..=z1] x [y0..=y1] x [x0..=x1]
            let p = |z: isize, y: isize, x: isize| -> f64 {
                if z < 0 || y < 0 || x < 0 {
                    0.0
                } else {
                    prefix[((z as usize * k) + y as usize) * k + x as usize]
                }
            };
            let (z0, y0, x0) = (z0 as isize - 1, y0 as isize - 1, x0 as isize - 1);
            let (z1, y1, x1) = (z1 as isize, y1 as isize, x1 as isize);
            p(z1, y1, x1) - p(z0, y1, x1) - p(z1, y0, x1) - p(z1, y1, x0)
                + p(z0, y0, x1)
                + p(z0, y1, x0)
                + p(z1, y0, x0)
                - p(z0, y0, x0)
        };

        for bi in 0..b {
            let gplane = &gdata[(bi * cout + co) * spatial..(bi * cout + co + 1) * spatial];
            for z in 0..d {
                let (z0, z1) = (r.saturating_sub(z), (d - 1 - z + r).min(k - 1));
                for y in 0..h {
                    let (y0, y1) = (r.saturating_sub(y), (h - 1 - y + r).min(k - 1));
                    for x in 0..w {
                        // interior positions see the whole kernel
                        let (x0, x1) = (r.saturating_sub(x), (w - 1 - x + r).min(k - 1));
                        let inb = if z0 == 0
                            && y0 == 0
                            && x0 == 0
                            && z1 == k - 1
                            && y1 == k - 1
                            && x1 == k - 1
                        {
                            total
                        } else {
                            boxed(z0, z1, y0, y1, x0, x1)
                        };
                        grad += gplane[(z * h + y) * w + x] * (total - inb);
                    }
                }
            }
        }
    }
    grad
}

/// Extreme reduction along one axis. Returns the reduced array (axis
/// removed) and the winning in-axis index per reduction group; ties go to
/// the lowest index.
pub fn reduce_extreme(
    input: &NdArray,
    axis: usize,
    take_max: bool,
) -> Result<(NdArray, Vec<u32>)> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(SdgError::contract(format!(
            "reduce axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(SdgError::contract("reduce over an empty axis"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let data = input.data();

    let mut out = vec![0.0; outer * inner];
    let mut winners = vec![0u32; outer * inner];
    for o in 0..outer {
        let base = o * n * inner;
        // start from j = 0, replace only on strict improvement
        out[o * inner..(o + 1) * inner].copy_from_slice(&data[base..base + inner]);
        for j in 1..n {
            let row = &data[base + j * inner..base + (j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            let win = &mut winners[o * inner..(o + 1) * inner];
            for i in 0..inner {
                let better = if take_max {
                    row[i] > dst[i]
                } else {
                    row[i] < dst[i]
                };
                if better {
                    dst[i] = row[i];
                    win[i] = j as u32;
                }
            }
        }
    }

    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Ok((NdArray::new(out_shape, out)?, winners))
}

pub fn reduce_extreme_backward(
    gout: &NdArray,
    winners: &[u32],
    input_shape: &[usize],
    axis: usize,
) -> NdArray {
    let n = input_shape[axis];
    let outer: usize = input_shape[..axis].iter().product();
    let inner: usize = input_shape[axis + 1..].iter().product();
    let mut gin = NdArray::zeros(input_shape);
    let g = gout.data();
    let gd = gin.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let j = winners[o * inner + i] as usize;
            debug_assert!(j < n);
            gd[o * n * inner + j * inner + i] += g[o * inner + i];
        }
    }
    gin
}

/// 2x2x2 max pooling with stride 2. Ties go to the lowest flat input index.
pub fn max_pool2(input: &NdArray) -> Result<(NdArray, Vec<u32>)> {
    let shape = input.shape();
    if shape.len() != 5 {
        return Err(SdgError::contract(format!(
            "max_pool2 input must be [B,C,D,H,W], got {shape:?}"
        )));
    }
    let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(SdgError::contract(format!(
            "max_pool2 requires even spatial extents, got {d}x{h}x{w}"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let data = input.data();
    let mut out = vec![0.0; b * c * od * oh * ow];
    let mut winners = vec![0u32; out.len()];
    let spatial = d * h * w;
    for bc in 0..b * c {
        let plane = &data[bc * spatial..(bc + 1) * spatial];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = bc * od * oh * ow + (z * oh + y) * ow + x;
                    out[o] = best;
                    winners[o] = (bc * spatial + best_idx) as u32;
                }
            }
        }
    }
    Ok((NdArray::new(vec![b, c, od, oh, ow], out)?, winners))
}

pub fn max_pool2_backward(gout: &NdArray, winners: &[u32], input_shape: &[usize]) -> NdArray {
    let mut gin = NdArray::zeros(input_shape);
    let gd = gin.data_mut();
    for (g, &wi) in gout.data().iter().zip(winners) {
        gd[wi as usize] += g;
    }
    gin
}

/// Mean over the spatial axes of a [B,C,D,H,W] array.
pub fn global_avg_pool(input: &NdArray) -> Result<NdArray> {
    let shape = input.shape();
    if shape.len() != 5 {
        return Err(SdgError::contract(format!(
            "global_avg_pool input must be [B,C,D,H,W], got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    if spatial == 0 {
        return Err(SdgError::contract("global_avg_pool over empty volume"));
    }
    let data = input.data();
    let mut out = vec![0.0; b * c];
    for (bc, slot) in out.iter_mut().enumerate() {
        *slot = data[bc * spatial..(bc + 1) * spatial].iter().sum::<f64>() / spatial as f64;
    }
    NdArray::new(vec![b, c], out)
}

pub fn global_avg_pool_backward(gout: &NdArray, input_shape: &[usize]) -> NdArray {
    let spatial: usize = input_shape[2..].iter().product();
    let scale = 1.0 / spatial as f64;
    let mut gin = NdArray::zeros(input_shape);
    let gd = gin.data_mut();
    for (bc, &g) in gout.data().iter().enumerate() {
        let v = g * scale;
        for slot in &mut gd[bc * spatial..(bc + 1) * spatial] {
            *slot += v;
        }
    }
    gin
}

/// `features [B,F] x weights [K,F]^T + bias [K] -> [B,K]`.
pub fn matvec_affine(features: &NdArray, weights: &NdArray, bias: &NdArray) -> Result<NdArray> {
    let fs = features.shape();
    let ws = weights.shape();
    if fs.len() != 2 || ws.len() != 2 || bias.rank() != 1 {
        return Err(SdgError::contract(format!(
            "matvec_affine expects features [B,F], weights [K,F], bias [K]; got {fs:?}, {ws:?}, {:?}",
            bias.shape()
        )));
    }
    let (b, f) = (fs[0], fs[1]);
    let (kk, wf) = (ws[0], ws[1]);
    if wf != f || bias.len() != kk {
        return Err(SdgError::contract(format!(
            "matvec_affine shape mismatch: features [.,{f}], weights [{kk},{wf}], bias [{}]",
            bias.len()
        )));
    }
    let fd = features.data();
    let wd = weights.data();
    let bd = bias.data();
    let mut out = vec![0.0; b * kk];
    for bi in 0..b {
        let frow = &fd[bi * f..(bi + 1) * f];
        for ki in 0..kk {
            let wrow = &wd[ki * f..(ki + 1) * f];
            out[bi * kk + ki] =
                bd[ki] + frow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    NdArray::new(vec![b, kk], out)
}

pub fn matvec_affine_backward(
    features: &NdArray,
    weights: &NdArray,
    gout: &NdArray,
) -> (NdArray, NdArray, NdArray) {
    let (b, f) = (features.shape()[0], features.shape()[1]);
    let kk = weights.shape()[0];
    let fd = features.data();
    let wd = weights.data();
    let gd = gout.data();

    let mut gfeat = vec![0.0; b * f];
    let mut gw = vec![0.0; kk * f];
    let mut gb = vec![0.0; kk];
    for bi in 0..b {
        let grow = &gd[bi * kk..(bi + 1) * kk];
        let frow = &fd[bi * f..(bi + 1) * f];
        for ki in 0..kk {
            let g = grow[ki];
            gb[ki] += g;
            let wrow = &wd[ki * f..(ki + 1) * f];
            for fi in 0..f {
                gfeat[bi * f + fi] += g * wrow[fi];
                gw[ki * f + fi] += g * frow[fi];
            }
        }
    }
    (
        NdArray::new(vec![b, f], gfeat).expect("matvec feature-gradient shape"),
        NdArray::new(vec![kk, f], gw).expect("matvec weight-gradient shape"),
        NdArray::from_vec(gb),
    )
}
