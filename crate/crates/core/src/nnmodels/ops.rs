//! Differentiable primitives with explicit reverse-mode rules.
//!
//! Activations are flat `f64` buffers in channel-major (`C × H × W`) layout.
//! Every backward function *accumulates* parameter gradients into the
//! caller's buffers and returns the gradient with respect to its input.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

/// Geometry of a "same"-padded convolution: output extent `ceil(in / stride)`,
/// padding split evenly with the odd pixel at the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn same(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        let out_height = height.div_ceil(stride);
        let out_width = width.div_ceil(stride);
        let pad_h = ((out_height - 1) * stride + kernel).saturating_sub(height);
        let pad_w = ((out_width - 1) * stride + kernel).saturating_sub(width);
        ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_height,
            out_width,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds `x` into a `(C·k·k) × (OH·OW)` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    debug_assert_eq!(x.len(), g.in_len());
    let k = g.kernel;
    let npix = g.out_pixels();
    let mut cols = Array2::<f64>::zeros((g.patch_len(), npix));
    let buf = cols.as_slice_mut().expect("standard layout");
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut buf[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds patch columns back onto the image.
pub fn col2im(cols: ArrayView2<f64>, g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let npix = g.out_pixels();
    let mut x = vec![0.0; g.in_len()];
    let cols = cols.as_standard_layout();
    let buf = cols.as_slice().expect("standard layout");
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &buf[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn view<'a>(data: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer matches shape")
}

fn view_mut<'a>(data: &'a mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer matches shape")
}

/// Convolution. `weight` is `cout × (cin·k·k)`, `bias` has `cout` entries.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let npix = g.out_pixels();
    let mut y = vec![0.0; cout * npix];
    for (o, &b) in bias.iter().enumerate() {
        y[o * npix..(o + 1) * npix].fill(b);
    }
    general_mat_mul(
        1.0,
        &view(weight, cout, g.patch_len()),
        &cols,
        1.0,
        &mut view_mut(&mut y, cout, npix),
    );
    y
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    cout: usize,
    g: &ConvGeom,
    gy: &[f64],
    gweight: &mut [f64],
    gbias: &mut [f64],
) -> Vec<f64> {
    let npix = g.out_pixels();
    let cols = im2col(x, g);
    let gyv = view(gy, cout, npix);
    general_mat_mul(1.0, &gyv, &cols.t(), 1.0, &mut view_mut(gweight, cout, g.patch_len()));
    for (o, gb) in gbias.iter_mut().enumerate() {
        *gb += gy[o * npix..(o + 1) * npix].iter().sum::<f64>();
    }
    let mut gcols = Array2::<f64>::zeros((g.patch_len(), npix));
    general_mat_mul(1.0, &view(weight, cout, g.patch_len()).t(), &gyv, 0.0, &mut gcols);
    col2im(gcols.view(), g)
}

/// Transposed convolution: the adjoint of a "same" convolution whose input
/// geometry is `g` (so the output here is `g.channels × g.height × g.width`
/// and the input is `cin × g.out_height × g.out_width`). `weight` is
/// `cin × (cout·k·k)` with `cout = g.channels`.
pub fn conv_transpose2d_forward(x: &[f64], weight: &[f64], bias: &[f64], cin: usize, g: &ConvGeom) -> Vec<f64> {
    let npix = g.out_pixels();
    let mut cols = Array2::<f64>::zeros((g.patch_len(), npix));
    general_mat_mul(
        1.0,
        &view(weight, cin, g.patch_len()).t(),
        &view(x, cin, npix),
        0.0,
        &mut cols,
    );
    let mut y = col2im(cols.view(), g);
    let plane = g.height * g.width;
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut y[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
    y
}

pub fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    cin: usize,
    g: &ConvGeom,
    gy: &[f64],
    gweight: &mut [f64],
    gbias: &mut [f64],
) -> Vec<f64> {
    let npix = g.out_pixels();
    let plane = g.height * g.width;
    for (c, gb) in gbias.iter_mut().enumerate() {
        *gb += gy[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
    let gcols = im2col(gy, g);
    general_mat_mul(1.0, &view(x, cin, npix), &gcols.t(), 1.0, &mut view_mut(gweight, cin, g.patch_len()));
    let mut gx = vec![0.0; cin * npix];
    general_mat_mul(1.0, &view(weight, cin, g.patch_len()), &gcols, 0.0, &mut view_mut(&mut gx, cin, npix));
    gx
}

/// Fully connected map `y = W x + b` with `W` stored `out × in`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, out: usize) -> Vec<f64> {
    let inp = x.len();
    let mut y = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; out],
    };
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &weight[o * inp..(o + 1) * inp];
        *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
    y
}

pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    gy: &[f64],
    gweight: &mut [f64],
    gbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let inp = x.len();
    let mut gx = vec![0.0; inp];
    for (o, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight[o * inp..(o + 1) * inp];
        let grow = &mut gweight[o * inp..(o + 1) * inp];
        for i in 0..inp {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    if let Some(gb) = gbias {
        for (b, &g) in gb.iter_mut().zip(gy) {
            *b += g;
        }
    }
    gx
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect()
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(gy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradient of the logistic function given its *output*.
pub fn sigmoid_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    y.iter().zip(gy).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Tiles a latent vector over an `h × w` grid and appends two coordinate
/// channels (x then y) spanning `[-1, 1]` linearly.
pub fn spatial_broadcast(z: &[f64], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; (z.len() + 2) * plane];
    for (c, &v) in z.iter().enumerate() {
        out[c * plane..(c + 1) * plane].fill(v);
    }
    let lin = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let base = z.len() * plane;
    for y in 0..h {
        for x in 0..w {
            out[base + y * w + x] = lin(x, w);
            out[base + plane + y * w + x] = lin(y, h);
        }
    }
    out
}

/// Gradient of [`spatial_broadcast`] with respect to the latent vector; the
/// coordinate channels are constants.
pub fn spatial_broadcast_backward(gy: &[f64], latent: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    (0..latent)
        .map(|c| gy[c * plane..(c + 1) * plane].iter().sum())
        .collect()
}

/// Reparameterized Gaussian sample `μ + exp(½·logσ²)·ε`.
pub fn reparameterize(mean: &[f64], log_variance: &[f64], eps: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_variance)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Returns `(∂/∂μ, ∂/∂logσ²)` given the gradient with respect to the sample.
pub fn reparameterize_backward(log_variance: &[f64], eps: &[f64], gz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gmean = gz.to_vec();
    let glv = log_variance
        .iter()
        .zip(eps)
        .zip(gz)
        .map(|((&lv, &e), &g)| g * e * 0.5 * (0.5 * lv).exp())
        .collect();
    (gmean, glv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rand_vec(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Central-difference directional check of `f` at `x` along each
    /// coordinate, against `grad`. Returns the max relative error.
    fn fd_check(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            let num = (up - down) / (2.0 * h);
            let denom = num.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max((num - grad[i]).abs() / denom);
        }
        worst
    }

    #[test]
    fn same_geometry() {
        let g = ConvGeom::same(1, 64, 64, 4, 2);
        assert_eq!((g.out_height, g.pad_top), (32, 1));
        let g = ConvGeom::same(1, 32, 32, 5, 1);
        assert_eq!((g.out_height, g.pad_top), (32, 2));
        let g = ConvGeom::same(1, 5, 5, 4, 2);
        assert_eq!((g.out_height, g.pad_top), (3, 1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        for &(c, h, k, s) in &[(2, 7, 3, 2), (1, 8, 4, 2), (3, 6, 5, 1)] {
            let g = ConvGeom::same(c, h, h, k, s);
            let x = rand_vec(&mut rng, g.in_len());
            let y = Array2::from_shape_vec((g.patch_len(), g.out_pixels()), rand_vec(&mut rng, g.patch_len() * g.out_pixels())).unwrap();
            let lhs = dot(im2col(&x, &g).as_slice().unwrap(), y.as_slice().unwrap());
            let rhs = dot(&x, &col2im(y.view(), &g));
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let (cin, cout, h, k, s) = (2, 3, 6, 4, 2);
        let g = ConvGeom::same(cin, h, h, k, s);
        let x = rand_vec(&mut rng, g.in_len());
        let w = rand_vec(&mut rng, cout * g.patch_len());
        let b = rand_vec(&mut rng, cout);
        let y = conv2d_forward(&x, &w, &b, cout, &g);
        for o in 0..cout {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - g.pad_top as isize;
                                let ix = (ox * s + kx) as isize - g.pad_left as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < h {
                                    acc += w[o * g.patch_len() + (c * k + ky) * k + kx]
                                        * x[(c * h + iy as usize) * h + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - y[(o * g.out_height + oy) * g.out_width + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let (cin, cout) = (2, 3);
        let g = ConvGeom::same(cin, 6, 6, 4, 2);
        let x = rand_vec(&mut rng, g.in_len());
        let w = rand_vec(&mut rng, cout * g.patch_len());
        let b = rand_vec(&mut rng, cout);
        let r = rand_vec(&mut rng, cout * g.out_pixels());
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = conv2d_backward(&x, &w, cout, &g, &r, &mut gw, &mut gb);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&conv2d_forward(x, w, b, cout, &g), &r);
        assert!(fd_check(&x, &gx, |v| loss(v, &w, &b)) < 1e-4);
        assert!(fd_check(&w, &gw, |v| loss(&x, v, &b)) < 1e-4);
        assert!(fd_check(&b, &gb, |v| loss(&x, &w, v)) < 1e-4);
    }

    #[test]
    fn conv_transpose_gradients_and_shape() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let (cin, cout) = (3, 2);
        // output 8x8, input 4x4
        let g = ConvGeom::same(cout, 8, 8, 4, 2);
        assert_eq!(g.out_height, 4);
        let x = rand_vec(&mut rng, cin * g.out_pixels());
        let w = rand_vec(&mut rng, cin * g.patch_len());
        let b = rand_vec(&mut rng, cout);
        let y = conv_transpose2d_forward(&x, &w, &b, cin, &g);
        assert_eq!(y.len(), cout * 64);
        let r = rand_vec(&mut rng, y.len());
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = conv_transpose2d_backward(&x, &w, cin, &g, &r, &mut gw, &mut gb);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&conv_transpose2d_forward(x, w, b, cin, &g), &r);
        assert!(fd_check(&x, &gx, |v| loss(v, &w, &b)) < 1e-4);
        assert!(fd_check(&w, &gw, |v| loss(&x, v, &b)) < 1e-4);
        assert!(fd_check(&b, &gb, |v| loss(&x, &w, v)) < 1e-4);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let (inp, out) = (7, 4);
        let x = rand_vec(&mut rng, inp);
        let w = rand_vec(&mut rng, inp * out);
        let b = rand_vec(&mut rng, out);
        let r = rand_vec(&mut rng, out);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = linear_backward(&x, &w, &r, &mut gw, Some(&mut gb));
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear_forward(x, w, Some(b), out), &r);
        assert!(fd_check(&x, &gx, |v| loss(v, &w, &b)) < 1e-4);
        assert!(fd_check(&w, &gw, |v| loss(&x, v, &b)) < 1e-4);
        assert!(fd_check(&b, &gb, |v| loss(&x, &w, v)) < 1e-4);
    }

    #[test]
    fn pointwise_gradients() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        // keep away from the ReLU kink
        let x: Vec<f64> = rand_vec(&mut rng, 20)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { 0.3 } else { v })
            .collect();
        let r = rand_vec(&mut rng, 20);
        let gx = relu_backward(&relu_forward(&x), &r);
        assert!(fd_check(&x, &gx, |v| dot(&relu_forward(v), &r)) < 1e-4);
        let sig = |v: &[f64]| v.iter().map(|&a| sigmoid(a)).collect::<Vec<_>>();
        let gx = sigmoid_backward(&sig(&x), &r);
        assert!(fd_check(&x, &gx, |v| dot(&sig(v), &r)) < 1e-4);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(relu_forward(&[f64::NAN])[0].is_nan());
    }

    #[test]
    fn broadcast_layout_and_gradient() {
        let z = [0.5, -2.0];
        let out = spatial_broadcast(&z, 3, 4);
        assert_eq!(out.len(), 4 * 12);
        assert!(out[..12].iter().all(|&v| v == 0.5));
        // x coordinate channel varies along columns
        for (got, want) in out[24..28].iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        // y coordinate channel varies along rows
        assert_eq!(out[36], -1.0);
        assert_eq!(out[36 + 4], 0.0);
        assert_eq!(out[36 + 8], 1.0);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let r = rand_vec(&mut rng, out.len());
        let gz = spatial_broadcast_backward(&r, 2, 3, 4);
        assert!(fd_check(&z, &gz, |v| dot(&spatial_broadcast(v, 3, 4), &r)) < 1e-4);
    }

    #[test]
    fn reparameterization_gradients() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let m = rand_vec(&mut rng, 5);
        let lv = rand_vec(&mut rng, 5);
        let eps = rand_vec(&mut rng, 5);
        let r = rand_vec(&mut rng, 5);
        let (gm, glv) = reparameterize_backward(&lv, &eps, &r);
        assert!(fd_check(&m, &gm, |v| dot(&reparameterize(v, &lv, &eps), &r)) < 1e-4);
        assert!(fd_check(&lv, &glv, |v| dot(&reparameterize(&m, v, &eps), &r)) < 1e-4);
        assert_eq!(reparameterize(&[1.0], &[0.0], &[0.5]), vec![1.5]);
    }
}
