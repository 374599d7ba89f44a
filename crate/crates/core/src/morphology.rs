//! Exact flat grayscale morphology on 3D volumes.
//!
//! Two implementations are provided on purpose: a brute-force neighborhood
//! scan that serves as the oracle, and a separable sliding-window path used
//! everywhere else. Both ignore out-of-bounds voxels (conceptually padding
//! with -inf for dilation and +inf for erosion), which keeps the duality
//! `erode(v) == -dilate(-v)` exact.

use crate::error::{Result, SdgError};
use crate::tensor::NdArray;

/// Cubic structuring element of odd side length `k`, origin at its center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    k: usize,
}

impl StructuringElement {
    pub fn cube(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(SdgError::contract(format!(
                "structuring element side must be odd and positive, got {k}"
            )));
        }
        Ok(StructuringElement { k })
    }

    pub fn side(&self) -> usize {
        self.k
    }

    pub fn radius(&self) -> usize {
        (self.k - 1) / 2
    }
}

fn check_volume(volume: &NdArray, se: StructuringElement) -> Result<(usize, usize, usize)> {
    let shape = volume.shape();
    if shape.len() != 3 {
        return Err(SdgError::contract(format!(
            "morphology expects a [D,H,W] volume, got {shape:?}"
        )));
    }
    let min_dim = *shape.iter().min().expect("rank 3");
    if se.side() > 2 * min_dim - 1 {
        return Err(SdgError::contract(format!(
            "structuring element side {} too large for volume {shape:?}",
            se.side()
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn scan_extreme(volume: &NdArray, se: StructuringElement, take_max: bool) -> Result<NdArray> {
    let (d, h, w) = check_volume(volume, se)?;
    let r = se.radius();
    let data = volume.data();
    let mut out = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut best = if take_max {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                };
                for zi in z.saturating_sub(r)..(z + r + 1).min(d) {
                    for yi in y.saturating_sub(r)..(y + r + 1).min(h) {
                        for xi in x.saturating_sub(r)..(x + r + 1).min(w) {
                            let v = data[(zi * h + yi) * w + xi];
                            if (take_max && v > best) || (!take_max && v < best) {
                                best = v;
                            }
                        }
                    }
                }
                out[(z * h + y) * w + x] = best;
            }
        }
    }
    NdArray::new(vec![d, h, w], out)
}

/// Brute-force dilation: neighborhood maximum. This is the oracle.
pub fn dilate_flat_scan(volume: &NdArray, se: StructuringElement) -> Result<NdArray> {
    scan_extreme(volume, se, true)
}

/// Brute-force erosion: neighborhood minimum. This is the oracle.
pub fn erode_flat_scan(volume: &NdArray, se: StructuringElement) -> Result<NdArray> {
    scan_extreme(volume, se, false)
}

/// One-dimensional sliding-window extreme over a strided line, windows
/// clipped at the boundaries. Monotonic-deque algorithm, O(n) per line.
fn line_extreme(
    data: &[f64],
    out: &mut [f64],
    start: usize,
    stride: usize,
    n: usize,
    r: usize,
    take_max: bool,
    deque: &mut Vec<usize>,
) {
    deque.clear();
    let at = |i: usize| data[start + i * stride];
    let dominates = |a: f64, b: f64| if take_max { a >= b } else { a <= b };

    // indices [0, r) enter the window before the first output
    for j in 0..r.min(n) {
        while let Some(&back) = deque.last() {
            if dominates(at(j), at(back)) {
                deque.pop();
            } else {
                break;
            }
        }
        deque.push(j);
    }
    for i in 0..n {
        let incoming = i + r;
        if incoming < n {
            while let Some(&back) = deque.last() {
                if dominates(at(incoming), at(back)) {
                    deque.pop();
                } else {
                    break;
                }
            }
            deque.push(incoming);
        }
        while let Some(&front) = deque.first() {
            if front + r < i {
                deque.remove(0);
            } else {
                break;
            }
        }
        out[start + i * stride] = at(*deque.first().expect("window never empty"));
    }
}

fn separable_extreme(volume: &NdArray, se: StructuringElement, take_max: bool) -> Result<NdArray> {
    let (d, h, w) = check_volume(volume, se)?;
    let r = se.radius();
    if r == 0 {
        return Ok(volume.clone());
    }
    let mut cur = volume.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    let mut deque = Vec::with_capacity(se.side());

    // pass along x
    for z in 0..d {
        for y in 0..h {
            line_extreme(&cur, &mut next, (z * h + y) * w, 1, w, r, take_max, &mut deque);
        }
    }
    std::mem::swap(&mut cur, &mut next);
    // pass along y
    for z in 0..d {
        for x in 0..w {
            line_extreme(&cur, &mut next, z * h * w + x, w, h, r, take_max, &mut deque);
        }
    }
    std::mem::swap(&mut cur, &mut next);
    // pass along z
    for y in 0..h {
        for x in 0..w {
            line_extreme(&cur, &mut next, y * w + x, h * w, d, r, take_max, &mut deque);
        }
    }
    NdArray::new(vec![d, h, w], next)
}

/// Separable dilation: three 1-D sliding-window maximum passes.
pub fn dilate_flat(volume: &NdArray, se: StructuringElement) -> Result<NdArray> {
    separable_extreme(volume, se, true)
}

/// Separable erosion: three 1-D sliding-window minimum passes.
pub fn erode_flat(volume: &NdArray, se: StructuringElement) -> Result<NdArray> {
    separable_extreme(volume, se, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_volume(dims: (usize, usize, usize), rng: &mut SplitMix64) -> NdArray {
        let (d, h, w) = dims;
        // integer-valued volumes in [0, 255], mirroring the imaging range
        let data = (0..d * h * w)
            .map(|_| rng.uniform_int(0, 255) as f64)
            .collect();
        NdArray::new(vec![d, h, w], data).unwrap()
    }

    #[test]
    fn constant_volume_is_fixed_point() {
        let v = NdArray::filled(&[4, 5, 6], 42.0);
        let se = StructuringElement::cube(3).unwrap();
        assert_eq!(dilate_flat(&v, se).unwrap().data(), v.data());
        assert_eq!(erode_flat(&v, se).unwrap().data(), v.data());
    }

    #[test]
    fn k1_is_identity() {
        let mut rng = SplitMix64::new(1);
        let v = random_volume((5, 4, 3), &mut rng);
        let se = StructuringElement::cube(1).unwrap();
        assert_eq!(dilate_flat(&v, se).unwrap().data(), v.data());
        assert_eq!(dilate_flat_scan(&v, se).unwrap().data(), v.data());
    }

    #[test]
    fn even_side_rejected() {
        assert!(StructuringElement::cube(2).is_err());
        assert!(StructuringElement::cube(0).is_err());
    }

    #[test]
    fn single_bright_voxel_fills_cube() {
        let mut v = NdArray::zeros(&[3, 3, 3]);
        let off = v.offset(&[1, 1, 1]);
        v.data_mut()[off] = 5.0;
        let se = StructuringElement::cube(3).unwrap();
        let out = dilate_flat_scan(&v, se).unwrap();
        assert!(out.data().iter().all(|&x| x == 5.0));
        assert_eq!(dilate_flat(&v, se).unwrap().data(), out.data());
    }

    #[test]
    fn single_dark_voxel_erodes_cube() {
        let mut v = NdArray::filled(&[3, 3, 3], 5.0);
        let off = v.offset(&[1, 1, 1]);
        v.data_mut()[off] = 0.0;
        let se = StructuringElement::cube(3).unwrap();
        let out = erode_flat_scan(&v, se).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert_eq!(erode_flat(&v, se).unwrap().data(), out.data());
    }

    #[test]
    fn separable_equals_scan_on_random_volumes() {
        let mut rng = SplitMix64::new(2);
        for trial in 0..60 {
            let dims = (
                rng.uniform_int(1, 12) as usize,
                rng.uniform_int(1, 12) as usize,
                rng.uniform_int(1, 12) as usize,
            );
            let v = random_volume(dims, &mut rng);
            for k in [1, 3, 5] {
                if k > 2 * dims.0.min(dims.1).min(dims.2) - 1 {
                    continue;
                }
                let se = StructuringElement::cube(k).unwrap();
                assert_eq!(
                    dilate_flat(&v, se).unwrap().data(),
                    dilate_flat_scan(&v, se).unwrap().data(),
                    "dilation mismatch, trial {trial}, k {k}, dims {dims:?}"
                );
                assert_eq!(
                    erode_flat(&v, se).unwrap().data(),
                    erode_flat_scan(&v, se).unwrap().data(),
                    "erosion mismatch, trial {trial}, k {k}, dims {dims:?}"
                );
            }
        }
    }

    #[test]
    fn duality_extensivity_and_ordering() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..30 {
            let v = random_volume((6, 7, 5), &mut rng);
            let neg = v.map(|x| -x);
            for k in [1, 3, 5] {
                let se = StructuringElement::cube(k).unwrap();
                let dil = dilate_flat(&v, se).unwrap();
                let ero = erode_flat(&v, se).unwrap();
                // duality is exact
                let dual = dilate_flat(&neg, se).unwrap().map(|x| -x);
                assert_eq!(ero.data(), dual.data());
                // extensivity / anti-extensivity
                for ((&lo, &mid), &hi) in ero.data().iter().zip(v.data()).zip(dil.data()) {
                    assert!(lo <= mid && mid <= hi);
                }
            }
            // ordering in k
            let d3 = dilate_flat(&v, StructuringElement::cube(3).unwrap()).unwrap();
            let d5 = dilate_flat(&v, StructuringElement::cube(5).unwrap()).unwrap();
            let e3 = erode_flat(&v, StructuringElement::cube(3).unwrap()).unwrap();
            let e5 = erode_flat(&v, StructuringElement::cube(5).unwrap()).unwrap();
            for (a, b) in d3.data().iter().zip(d5.data()) {
                assert!(a <= b);
            }
            for (a, b) in e3.data().iter().zip(e5.data()) {
                assert!(a >= b);
            }
        }
    }

    #[test]
    fn oversized_element_rejected() {
        let v = NdArray::zeros(&[2, 8, 8]);
        let se = StructuringElement::cube(5).unwrap();
        assert!(dilate_flat(&v, se).is_err());
    }
}
