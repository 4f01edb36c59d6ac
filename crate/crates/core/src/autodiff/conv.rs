//! Convolution kernels shared by the forward and backward passes.
//!
//! Both directions use a patch map: for every output pixel of a convolution
//! and every kernel tap `(c, ky, kx)` it stores the flat index of the image
//! element under that tap, or `PAD` when the tap falls in the zero padding.
//! A transposed convolution uses the same map with the roles of image and
//! output swapped.

pub(crate) const PAD: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, op: usize) -> Self {
        self.output_padding = op;
        self
    }

    /// Output length of a convolution along one axis.
    pub fn conv_out(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= k && self.stride > 0).then(|| (padded - k) / self.stride + 1)
    }

    /// Output length of a transposed convolution along one axis.
    pub fn transpose_out(&self, input: usize, k: usize) -> Option<usize> {
        let full = input.checked_sub(1)? * self.stride + k + self.output_padding;
        full.checked_sub(2 * self.padding).filter(|&n| n > 0)
    }
}

/// Image dimensions `(channels, height, width)`.
pub(crate) type Chw = (usize, usize, usize);

pub(crate) fn patch_map(
    image: Chw,
    k: (usize, usize),
    centers: (usize, usize),
    g: ConvGeom,
) -> Vec<u32> {
    let (c, h, w) = image;
    let (kh, kw) = k;
    let (oh, ow) = centers;
    let q = c * kh * kw;
    let mut map = vec![PAD; oh * ow * q];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut map[(oy * ow + ox) * q..(oy * ow + ox + 1) * q];
            for ci in 0..c {
                for ky in 0..kh {
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        row[(ci * kh + ky) * kw + kx] =
                            (ci * h * w) as u32 + (y as usize * w + x as usize) as u32;
                    }
                }
            }
        }
    }
    map
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x: [n, c, h, w]`, `k: [o, c, kh, kw]` -> `[n, o, oh, ow]`.
pub(crate) fn conv_forward(
    x: &[f64],
    n: usize,
    img: Chw,
    k: &[f64],
    o: usize,
    map: &[u32],
    pix: usize,
) -> Vec<f64> {
    let img_len = img.0 * img.1 * img.2;
    let q = map.len() / pix;
    let mut out = vec![0.0; n * o * pix];
    let mut col = vec![0.0; q];
    for b in 0..n {
        let xb = &x[b * img_len..(b + 1) * img_len];
        for p in 0..pix {
            for (c, &m) in col.iter_mut().zip(&map[p * q..(p + 1) * q]) {
                *c = if m == PAD { 0.0 } else { xb[m as usize] };
            }
            for oc in 0..o {
                out[(b * o + oc) * pix + p] = dot(&col, &k[oc * q..(oc + 1) * q]);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`] w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    img: Chw,
    k: &[f64],
    o: usize,
    map: &[u32],
    pix: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let img_len = img.0 * img.1 * img.2;
    let q = map.len() / pix;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let mut col = vec![0.0; q];
    let mut dcol = vec![0.0; q];
    for b in 0..n {
        let xb = &x[b * img_len..(b + 1) * img_len];
        for p in 0..pix {
            let m = &map[p * q..(p + 1) * q];
            if let Some(dk) = dk.as_mut() {
                for (c, &mi) in col.iter_mut().zip(m) {
                    *c = if mi == PAD { 0.0 } else { xb[mi as usize] };
                }
                for oc in 0..o {
                    let g = dy[(b * o + oc) * pix + p];
                    if g != 0.0 {
                        axpy(&mut dk[oc * q..(oc + 1) * q], g, &col);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                dcol.iter_mut().for_each(|d| *d = 0.0);
                for oc in 0..o {
                    let g = dy[(b * o + oc) * pix + p];
                    if g != 0.0 {
                        axpy(&mut dcol, g, &k[oc * q..(oc + 1) * q]);
                    }
                }
                let dxb = &mut dx[b * img_len..(b + 1) * img_len];
                for (&mi, &d) in m.iter().zip(&dcol) {
                    if mi != PAD {
                        dxb[mi as usize] += d;
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// `x: [n, ci, h, w]`, `k: [ci, co, kh, kw]` -> `[n, co, oh, ow]` where the
/// map was built with the output as image and the input grid as centers.
pub(crate) fn conv_t_forward(
    x: &[f64],
    n: usize,
    ci: usize,
    pix: usize,
    k: &[f64],
    out_img: Chw,
    map: &[u32],
) -> Vec<f64> {
    let out_len = out_img.0 * out_img.1 * out_img.2;
    let q = map.len() / pix;
    let mut out = vec![0.0; n * out_len];
    let mut tcol = vec![0.0; q];
    for b in 0..n {
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        for p in 0..pix {
            tcol.iter_mut().for_each(|t| *t = 0.0);
            for c in 0..ci {
                let v = x[(b * ci + c) * pix + p];
                if v != 0.0 {
                    axpy(&mut tcol, v, &k[c * q..(c + 1) * q]);
                }
            }
            for (&mi, &t) in map[p * q..(p + 1) * q].iter().zip(&tcol) {
                if mi != PAD {
                    ob[mi as usize] += t;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    ci: usize,
    pix: usize,
    k: &[f64],
    out_img: Chw,
    map: &[u32],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let out_len = out_img.0 * out_img.1 * out_img.2;
    let q = map.len() / pix;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let mut dcol = vec![0.0; q];
    for b in 0..n {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        for p in 0..pix {
            for (d, &mi) in dcol.iter_mut().zip(&map[p * q..(p + 1) * q]) {
                *d = if mi == PAD { 0.0 } else { dyb[mi as usize] };
            }
            for c in 0..ci {
                if let Some(dx) = dx.as_mut() {
                    dx[(b * ci + c) * pix + p] = dot(&dcol, &k[c * q..(c + 1) * q]);
                }
                if let Some(dk) = dk.as_mut() {
                    let v = x[(b * ci + c) * pix + p];
                    if v != 0.0 {
                        axpy(&mut dk[c * q..(c + 1) * q], v, &dcol);
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// `a: [m, k]`, `b: [k, n]` -> `[m, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(row, av, &b[kk * n..(kk + 1) * n]);
            }
        }
    }
    out
}

/// `dy: [m, n]`, `b: [k, n]` -> `dy b^T: [m, k]`.
pub(crate) fn matmul_nt(dy: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g = &dy[i * n..(i + 1) * n];
        for kk in 0..k {
            out[i * k + kk] = dot(g, &b[kk * n..(kk + 1) * n]);
        }
    }
    out
}

/// `a: [m, k]`, `dy: [m, n]` -> `a^T dy: [k, n]`.
pub(crate) fn matmul_tn(a: &[f64], dy: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g = &dy[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(&mut out[kk * n..(kk + 1) * n], av, g);
            }
        }
    }
    out
}
