use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayViewMut3, Axis, Ix4, Zip};
use rand_chacha::ChaCha8Rng;

use super::{kaiming_uniform, Layer, Param};

/// Lowers one image `(C, H, W)` into a `(C*kh*kw, OH*OW)` patch matrix with
/// zero padding. `(oh, ow)` is the conv output grid.
fn im2col_one(
    x: &ArrayView3<f64>,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut Array2<f64>,
) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c * kh * kw, oh * ow));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for i in 0..oh {
                    let yi = (i * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        for j in 0..ow {
                            cols[(row, i * ow + j)] = 0.0;
                        }
                        continue;
                    }
                    for j in 0..ow {
                        let xj = (j * stride + kj) as isize - pad as isize;
                        cols[(row, i * ow + j)] = if xj < 0 || xj >= w as isize {
                            0.0
                        } else {
                            x[(ch, yi as usize, xj as usize)]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_one`]: scatter-adds the patch matrix back into an image.
fn col2im_one(
    cols: &Array2<f64>,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    img: &mut ArrayViewMut3<f64>,
) {
    let (c, h, w) = img.dim();
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for i in 0..oh {
                    let yi = (i * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xj = (j * stride + kj) as isize - pad as isize;
                        if xj >= 0 && xj < w as isize {
                            img[(ch, yi as usize, xj as usize)] += cols[(row, i * ow + j)];
                        }
                    }
                }
            }
        }
    }
}

/// Batched im2col, public because the tests compare it against a naive oracle.
pub fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array3::zeros((b, c * kh * kw, oh * ow));
    Zip::from(cols.outer_iter_mut()).and(x.outer_iter()).par_for_each(|mut cb, xb| {
        let mut tmp = Array2::zeros((c * kh * kw, oh * ow));
        im2col_one(&xb, (kh, kw), stride, pad, (oh, ow), &mut tmp);
        cb.assign(&tmp);
    });
    cols
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// 2-D convolution (cross-correlation), zero padding.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Param, // (Cout, Cin, kh, kw)
    pub bias: Param,   // (Cout,)
    pub stride: usize,
    pub pad: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            weight: Param::new(kaiming_uniform(&[cout, cin, k, k], fan_in, rng)),
            bias: Param::new(ArrayD::zeros(ndarray::IxDyn(&[cout]))),
            stride,
            pad,
            cache: None,
        }
    }

    fn kdims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2], s[3])
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let x = x.into_dimensionality::<Ix4>().expect("conv input must be (B,C,H,W)");
        let (b, _c, h, w) = x.dim();
        let (cout, cin, kh, kw) = self.kdims();
        let oh = conv_out(h, kh, self.stride, self.pad);
        let ow = conv_out(w, kw, self.stride, self.pad);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array4::zeros((b, cout, oh, ow));
        Zip::from(y.outer_iter_mut()).and(x.outer_iter()).par_for_each(|mut yb, xb| {
            let mut cols = Array2::zeros((cin * kh * kw, oh * ow));
            im2col_one(&xb, (kh, kw), self.stride, self.pad, (oh, ow), &mut cols);
            let out = w2.dot(&cols); // (Cout, L)
            let mut out = out.into_shape_with_order((cout, oh, ow)).unwrap();
            for (mut ch, bv) in out.outer_iter_mut().zip(bias.iter()) {
                ch += *bv;
            }
            yb.assign(&out);
        });
        self.cache = Some(x);
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let gy = gy.into_dimensionality::<Ix4>().unwrap();
        let x = self.cache.take().expect("backward before forward");
        let (b, _c, _h, _w) = x.dim();
        let (cout, cin, kh, kw) = self.kdims();
        let (_, _, oh, ow) = gy.dim();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();

        let mut dw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
        let mut db = Array1::<f64>::zeros(cout);
        let mut dx = Array4::zeros(x.raw_dim());
        // dx is per-sample independent: parallel. dW/db accumulate: sequential.
        Zip::from(dx.outer_iter_mut()).and(gy.outer_iter()).par_for_each(|mut dxb, gyb| {
            let gy2 = gyb.into_shape_with_order((cout, oh * ow)).unwrap();
            let dcols = w2.t().dot(&gy2);
            col2im_one(&dcols, (kh, kw), self.stride, self.pad, (oh, ow), &mut dxb);
        });
        for bi in 0..b {
            let gy2 = gy.index_axis(Axis(0), bi).into_shape_with_order((cout, oh * ow)).unwrap();
            let mut cols = Array2::zeros((cin * kh * kw, oh * ow));
            im2col_one(&x.index_axis(Axis(0), bi), (kh, kw), self.stride, self.pad, (oh, ow), &mut cols);
            dw2 += &gy2.dot(&cols.t());
            db += &gy2.sum_axis(Axis(1));
        }
        let dw = dw2.into_shape_with_order((cout, cin, kh, kw)).unwrap();
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        dx.into_dyn()
    }

    fn params(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Transposed 2-D convolution (the gradient of [`Conv2d`] w.r.t. its input).
#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Param, // (Cin, Cout, kh, kw)
    pub bias: Param,   // (Cout,)
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    cache: Option<Array4<f64>>,
}

impl ConvTranspose2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(output_pad < stride, "output_pad must be < stride");
        let fan_in = cin * k * k;
        ConvTranspose2d {
            weight: Param::new(kaiming_uniform(&[cin, cout, k, k], fan_in, rng)),
            bias: Param::new(ArrayD::zeros(ndarray::IxDyn(&[cout]))),
            stride,
            pad,
            output_pad,
            cache: None,
        }
    }

    fn kdims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn out_size(&self, h: usize) -> usize {
        let (_, _, kh, _) = self.kdims();
        (h - 1) * self.stride + kh + self.output_pad - 2 * self.pad
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let x = x.into_dimensionality::<Ix4>().expect("convT input must be (B,C,H,W)");
        let (b, _c, h, w) = x.dim();
        let (cin, cout, kh, kw) = self.kdims();
        let oh = self.out_size(h);
        let ow = (w - 1) * self.stride + kw + self.output_pad - 2 * self.pad;
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((cin, cout * kh * kw))
            .unwrap()
            .to_owned();
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array4::zeros((b, cout, oh, ow));
        Zip::from(y.outer_iter_mut()).and(x.outer_iter()).par_for_each(|mut yb, xb| {
            let x2 = xb.into_shape_with_order((cin, h * w)).unwrap();
            let cols = w2.t().dot(&x2); // (Cout*kh*kw, H*W)
            col2im_one(&cols, (kh, kw), self.stride, self.pad, (h, w), &mut yb);
            for (mut ch, bv) in yb.outer_iter_mut().zip(bias.iter()) {
                ch += *bv;
            }
        });
        self.cache = Some(x);
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let gy = gy.into_dimensionality::<Ix4>().unwrap();
        let x = self.cache.take().expect("backward before forward");
        let (b, _c, h, w) = x.dim();
        let (cin, cout, kh, kw) = self.kdims();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((cin, cout * kh * kw))
            .unwrap()
            .to_owned();

        let mut dw2 = Array2::<f64>::zeros((cin, cout * kh * kw));
        let mut db = Array1::<f64>::zeros(cout);
        let mut dx = Array4::zeros(x.raw_dim());
        Zip::from(dx.outer_iter_mut()).and(gy.outer_iter()).par_for_each(|mut dxb, gyb| {
            let mut dcols = Array2::zeros((cout * kh * kw, h * w));
            im2col_one(&gyb, (kh, kw), self.stride, self.pad, (h, w), &mut dcols);
            let dxf = w2.dot(&dcols); // (Cin, H*W)
            dxb.assign(&dxf.into_shape_with_order((cin, h, w)).unwrap());
        });
        for bi in 0..b {
            let gyb = gy.index_axis(Axis(0), bi);
            let mut dcols = Array2::zeros((cout * kh * kw, h * w));
            im2col_one(&gyb, (kh, kw), self.stride, self.pad, (h, w), &mut dcols);
            let x2 = x.index_axis(Axis(0), bi).into_shape_with_order((cin, h * w)).unwrap();
            dw2 += &x2.dot(&dcols.t());
            db += &gyb.sum_axis(Axis(2)).sum_axis(Axis(1));
        }
        let dw = dw2.into_shape_with_order((cin, cout, kh, kw)).unwrap();
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        dx.into_dyn()
    }

    fn params(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn kind(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Max pooling, no padding. Ties resolve to the first (row-major) maximum.
#[derive(Clone)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    cache: Option<(Array4<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize) -> Self {
        MaxPool2d { k, stride, cache: None }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let x = x.into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = x.dim();
        let oh = (h - self.k) / self.stride + 1;
        let ow = (w - self.k) / self.stride + 1;
        let mut y = Array4::zeros((b, c, oh, ow));
        let mut arg = Array4::<usize>::zeros((b, c, oh, ow));
        Zip::from(y.outer_iter_mut())
            .and(arg.outer_iter_mut())
            .and(x.outer_iter())
            .par_for_each(|mut yb, mut ab, xb| {
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let (mut best, mut bidx) = (f64::NEG_INFINITY, 0);
                            for ki in 0..self.k {
                                for kj in 0..self.k {
                                    let (yi, xj) = (i * self.stride + ki, j * self.stride + kj);
                                    let v = xb[(ch, yi, xj)];
                                    if v > best {
                                        best = v;
                                        bidx = yi * w + xj;
                                    }
                                }
                            }
                            yb[(ch, i, j)] = best;
                            ab[(ch, i, j)] = bidx;
                        }
                    }
                }
            });
        self.cache = Some((arg, (b, c, h, w)));
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let gy = gy.into_dimensionality::<Ix4>().unwrap();
        let (arg, (b, c, h, w)) = self.cache.take().expect("backward before forward");
        let mut dx = Array4::zeros((b, c, h, w));
        Zip::from(dx.outer_iter_mut())
            .and(gy.outer_iter())
            .and(arg.outer_iter())
            .par_for_each(|mut dxb, gyb, ab| {
                let (oc, oh, ow) = gyb.dim();
                for ch in 0..oc {
                    for i in 0..oh {
                        for j in 0..ow {
                            let idx = ab[(ch, i, j)];
                            dxb[(ch, idx / w, idx % w)] += gyb[(ch, i, j)];
                        }
                    }
                }
            });
        dx.into_dyn()
    }

    fn kind(&self) -> &'static str {
        "maxpool2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}
