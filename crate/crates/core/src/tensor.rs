//! Dense `f64` tensors (row-major, NCHW for images) and the convolution
//! kernels shared by the generator, discriminator, segmenter and the
//! perceptual backbone.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(n, c, h, w)`; panics on non-4D tensors.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the leading (batch) axis.
    pub fn cat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Slice of batch item `i` for a tensor whose first axis is the batch.
    pub fn batch_item(&self, i: usize) -> &[f64] {
        let per = self.numel() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };
    pub const POINT: ConvGeom = ConvGeom { stride: 1, pad: 0 };

    pub fn out_size(&self, size: usize, k: usize) -> usize {
        (size + 2 * self.pad - k) / self.stride + 1
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C (m×n) = alpha·A (m×k) · B (k×n) + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    // SAFETY: callers pass slices whose extents cover every strided access
    // implied by (m, k, n) and the strides; all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn check_conv(input: &Tensor, weight: &Tensor) -> Result<()> {
    if input.shape.len() != 4 || weight.shape.len() != 4 || input.shape[1] != weight.shape[1] {
        return Err(Error::Shape(format!(
            "conv input {:?} with weight {:?}",
            input.shape, weight.shape
        )));
    }
    Ok(())
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    check_conv(input, weight)?;
    let (n, cin, h, w) = input.dims4();
    let (cout, _, kh, kw) = weight.dims4();
    let (oh, ow) = (geom.out_size(h, kh), geom.out_size(w, kw));
    let kk = cin * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![0.0; n * cout * ohw];
    let mut col = vec![0.0; kk * ohw];
    for s in 0..n {
        let x = input.batch_item(s);
        im2col(x, cin, h, w, kh, kw, geom, oh, ow, &mut col);
        let o = &mut out[s * cout * ohw..(s + 1) * cout * ohw];
        if let Some(b) = bias {
            for (co, &bv) in b.data.iter().enumerate() {
                o[co * ohw..(co + 1) * ohw].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(cout, kk, ohw, &weight.data, kk as isize, 1, &col, ohw as isize, 1, beta, o, ohw as isize, 1);
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let (n, cin, h, w) = input.dims4();
    let (cout, _, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let kk = cin * kh * kw;
    let ohw = oh * ow;
    let mut dx = want_input.then(|| vec![0.0; input.numel()]);
    let mut dw = want_weight.then(|| vec![0.0; weight.numel()]);
    let mut db = want_bias.then(|| vec![0.0; cout]);
    let mut col = vec![0.0; kk * ohw];
    for s in 0..n {
        let go = grad_out.batch_item(s);
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                db[co] += go[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(input.batch_item(s), cin, h, w, kh, kw, geom, oh, ow, &mut col);
            gemm(cout, ohw, kk, go, ohw as isize, 1, &col, 1, ohw as isize, 1.0, dw, kk as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, cout, ohw, &weight.data, 1, kk as isize, go, ohw as isize, 1, 0.0, &mut col, ohw as isize, 1);
            let per = cin * h * w;
            col2im(&col, cin, h, w, kh, kw, geom, oh, ow, &mut dx[s * per..(s + 1) * per]);
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor { shape: input.shape.clone(), data: d }),
        weight: dw.map(|d| Tensor { shape: weight.shape.clone(), data: d }),
        bias: db.map(|d| Tensor { shape: vec![cout], data: d }),
    }
}

/// Nearest-neighbour resampling of a 4-D tensor to `(oh, ow)`.
pub fn resize_nearest(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = input.dims4();
    if (oh, ow) == (h, w) {
        return input.clone();
    }
    let rows: Vec<usize> = (0..oh).map(|i| crate::scene::nearest_index(i, h, oh)).collect();
    let cols: Vec<usize> = (0..ow).map(|j| crate::scene::nearest_index(j, w, ow)).collect();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data.chunks_exact(h * w) {
        for &r in &rows {
            out.extend(cols.iter().map(|&cc| plane[r * w + cc]));
        }
    }
    Tensor { shape: vec![n, c, oh, ow], data: out }
}

pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data.chunks_exact(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let s = plane[2 * i * w + 2 * j]
                    + plane[2 * i * w + 2 * j + 1]
                    + plane[(2 * i + 1) * w + 2 * j]
                    + plane[(2 * i + 1) * w + 2 * j + 1];
                out.push(0.25 * s);
            }
        }
    }
    Tensor { shape: vec![n, c, oh, ow], data: out }
}
