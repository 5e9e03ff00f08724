use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom};
use super::params::{ParamStore, Slot};
use crate::error::{Error, Result};

/// Activation shape: an image-like `C × H × W` block or a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { cout: usize, geom: ConvGeom, w: Slot, b: Slot },
    ConvTranspose { cin: usize, geom: ConvGeom, w: Slot, b: Slot },
    Linear { inp: usize, out: usize, w: Slot, b: Slot },
    Relu,
    Broadcast { latent: usize, height: usize, width: usize },
}

impl Layer {
    fn fan_in(&self) -> Option<(usize, Slot, Slot)> {
        match *self {
            Layer::Conv { geom, w, b, .. } => Some((geom.patch_len(), w, b)),
            Layer::ConvTranspose { cin, geom, w, b } => {
                let taps = (geom.kernel * geom.kernel).div_ceil(geom.stride * geom.stride);
                Some((cin * taps.max(1), w, b))
            }
            Layer::Linear { inp, w, b, .. } => Some((inp, w, b)),
            _ => None,
        }
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            Layer::Conv { cout, ref geom, w, b } => ops::conv2d_forward(x, w.get(p), b.get(p), cout, geom),
            Layer::ConvTranspose { cin, ref geom, w, b } => {
                ops::conv_transpose2d_forward(x, w.get(p), b.get(p), cin, geom)
            }
            Layer::Linear { out, w, b, .. } => ops::linear_forward(x, w.get(p), Some(b.get(p)), out),
            Layer::Relu => ops::relu_forward(x),
            Layer::Broadcast { height, width, .. } => ops::spatial_broadcast(x, height, width),
        }
    }

    fn backward(&self, p: &[f64], x: &[f64], y: &[f64], gy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        match *self {
            Layer::Conv { cout, ref geom, w, b } => {
                let (gw, gb) = split_grads(grads, w, b);
                ops::conv2d_backward(x, w.get(p), cout, geom, gy, gw, gb)
            }
            Layer::ConvTranspose { cin, ref geom, w, b } => {
                let (gw, gb) = split_grads(grads, w, b);
                ops::conv_transpose2d_backward(x, w.get(p), cin, geom, gy, gw, gb)
            }
            Layer::Linear { w, b, .. } => {
                let (gw, gb) = split_grads(grads, w, b);
                ops::linear_backward(x, w.get(p), gy, gw, Some(gb))
            }
            Layer::Relu => ops::relu_backward(y, gy),
            Layer::Broadcast { latent, height, width } => {
                ops::spatial_broadcast_backward(gy, latent, height, width)
            }
        }
    }
}

/// Disjoint mutable views of a weight slot and the bias slot allocated right after it.
fn split_grads(grads: &mut [f64], w: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.offset + w.len, b.offset);
    let (gw, rest) = grads[w.offset..].split_at_mut(w.len);
    (gw, &mut rest[..b.len])
}

/// Recorded activations of one forward pass: `acts[0]` is the input and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds the input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("tape holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    input: Shape,
    output: Shape,
}

impl Sequential {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Tape {
        assert_eq!(x.len(), self.input.len(), "input length");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let y = layer.forward(p, acts.last().expect("nonempty"));
            acts.push(y);
        }
        Tape { acts }
    }

    pub fn infer(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input.len(), "input length");
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(p, &cur);
        }
        cur
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `input_grad` is set.
    pub fn backward(
        &self,
        p: &[f64],
        tape: &Tape,
        gy: Vec<f64>,
        grads: &mut [f64],
        input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut g = gy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i == 0 && !input_grad && !matches!(layer, Layer::Relu | Layer::Broadcast { .. }) {
                backward_params_only(layer, p, &tape.acts[0], &g, grads);
                return None;
            }
            g = layer.backward(p, &tape.acts[i], &tape.acts[i + 1], &g, grads);
        }
        input_grad.then_some(g)
    }

    /// Initializes every weight from a fan-in scaled uniform distribution:
    /// bound `sqrt(6 / fan_in)` when a ReLU follows, `sqrt(3 / fan_in)`
    /// otherwise. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((fan_in, w, b)) = layer.fan_in() {
                let relu_next = matches!(self.layers.get(i + 1), Some(Layer::Relu));
                let gain: f64 = if relu_next { 6.0 } else { 3.0 };
                store.init_uniform(w, (gain / fan_in as f64).sqrt(), rng);
                store.init_uniform(b, 0.0, rng);
            }
        }
    }
}

fn backward_params_only(layer: &Layer, p: &[f64], x: &[f64], gy: &[f64], grads: &mut [f64]) {
    match *layer {
        Layer::Conv { cout, ref geom, w, b } => {
            let (gw, gb) = split_grads(grads, w, b);
            let npix = geom.out_pixels();
            let cols = ops::im2col(x, geom);
            let gyv = ndarray::ArrayView2::from_shape((cout, npix), gy).expect("shape");
            let mut gwv = ndarray::ArrayViewMut2::from_shape((cout, geom.patch_len()), gw).expect("shape");
            ndarray::linalg::general_mat_mul(1.0, &gyv, &cols.t(), 1.0, &mut gwv);
            for (o, g) in gb.iter_mut().enumerate() {
                *g += gy[o * npix..(o + 1) * npix].iter().sum::<f64>();
            }
        }
        _ => {
            layer.backward(p, x, &[], gy, grads);
        }
    }
}

/// Incrementally assembles a [`Sequential`], allocating parameters in `store`.
pub struct SeqBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    layers: Vec<Layer>,
    input: Shape,
    shape: Shape,
}

impl<'a> SeqBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: impl Into<String>, input: Shape) -> Self {
        SeqBuilder {
            store,
            prefix: prefix.into(),
            layers: Vec::new(),
            input,
            shape: input,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    fn name(&self, what: &str) -> String {
        format!("{}.{}.{}", self.prefix, self.layers.len(), what)
    }

    fn chw(&self, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape {
            Shape::Chw(c, h, w) => Ok((c, h, w)),
            Shape::Flat(_) => Err(Error::shape(format!("{op} needs a spatial input in {}", self.prefix))),
        }
    }

    pub fn conv(mut self, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let (c, h, w) = self.chw("convolution")?;
        let geom = ConvGeom::same(c, h, w, kernel, stride);
        let ws = self.store.alloc(self.name("weight"), &[cout, c, kernel, kernel]);
        let bs = self.store.alloc(self.name("bias"), &[cout]);
        self.layers.push(Layer::Conv { cout, geom, w: ws, b: bs });
        self.shape = Shape::Chw(cout, geom.out_height, geom.out_width);
        Ok(self)
    }

    /// Transposed convolution that multiplies the spatial extent by `stride`.
    pub fn conv_transpose(mut self, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let (cin, h, w) = self.chw("transposed convolution")?;
        let geom = ConvGeom::same(cout, h * stride, w * stride, kernel, stride);
        debug_assert_eq!((geom.out_height, geom.out_width), (h, w));
        let ws = self.store.alloc(self.name("weight"), &[cin, cout, kernel, kernel]);
        let bs = self.store.alloc(self.name("bias"), &[cout]);
        self.layers.push(Layer::ConvTranspose { cin, geom, w: ws, b: bs });
        self.shape = Shape::Chw(cout, h * stride, w * stride);
        Ok(self)
    }

    pub fn linear(mut self, out: usize) -> Result<Self> {
        let inp = self.shape.len();
        let ws = self.store.alloc(self.name("weight"), &[out, inp]);
        let bs = self.store.alloc(self.name("bias"), &[out]);
        self.layers.push(Layer::Linear { inp, out, w: ws, b: bs });
        self.shape = Shape::Flat(out);
        Ok(self)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn broadcast(mut self, height: usize, width: usize) -> Result<Self> {
        let Shape::Flat(latent) = self.shape else {
            return Err(Error::shape("spatial broadcast needs a flat input"));
        };
        self.layers.push(Layer::Broadcast { latent, height, width });
        self.shape = Shape::Chw(latent + 2, height, width);
        Ok(self)
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn finish(self) -> Sequential {
        Sequential {
            layers: self.layers,
            input: self.input,
            output: self.shape,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn net(store: &mut ParamStore) -> Sequential {
        SeqBuilder::new(store, "n", Shape::Chw(2, 8, 8))
            .conv(3, 4, 2)
            .unwrap()
            .relu()
            .conv_transpose(2, 4, 2)
            .unwrap()
            .relu()
            .linear(5)
            .unwrap()
            .relu()
            .broadcast(3, 3)
            .unwrap()
            .conv(2, 3, 1)
            .unwrap()
            .finish()
    }

    #[test]
    fn shapes_and_allocation() {
        let mut store = ParamStore::new();
        let n = net(&mut store);
        assert_eq!(n.output_shape(), Shape::Chw(2, 3, 3));
        let expected = (3 * 2 * 16 + 3) + (3 * 2 * 16 + 2) + (128 * 5 + 5) + (2 * 7 * 9 + 2);
        assert_eq!(store.len(), expected);
        assert_eq!(store.entries()[0].name, "n.0.weight");
        assert!(SeqBuilder::new(&mut store, "x", Shape::Flat(3)).conv(1, 3, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        let n = net(&mut store);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        n.init(&mut store, &mut rng);
        for b in store.values.iter_mut() {
            *b += rng.random_range(-0.05..0.05);
        }
        let x: Vec<f64> = (0..128).map(|_| rng.random_range(0.0..1.0)).collect();
        let r: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| -> f64 { n.infer(p, x).iter().zip(&r).map(|(a, b)| a * b).sum() };
        let p = store.values.clone();
        let tape = n.forward(&p, &x);
        assert_eq!(tape.output(), n.infer(&p, &x).as_slice());
        let mut grads = store.zeros_like();
        let gx = n.backward(&p, &tape, r.clone(), &mut grads, true).unwrap();
        let mut grads2 = store.zeros_like();
        assert!(n.backward(&p, &tape, r.clone(), &mut grads2, false).is_none());
        assert_eq!(grads, grads2);
        let h = 1e-6;
        let mut pp = p.clone();
        for i in (0..p.len()).step_by(7) {
            pp[i] = p[i] + h;
            let up = loss(&pp, &x);
            pp[i] = p[i] - h;
            let down = loss(&pp, &x);
            pp[i] = p[i];
            let num = (up - down) / (2.0 * h);
            assert!((num - grads[i]).abs() <= 1e-6 * num.abs().max(1.0), "param {i}: {num} vs {}", grads[i]);
        }
        let mut xx = x.clone();
        for i in 0..x.len() {
            xx[i] = x[i] + h;
            let up = loss(&p, &xx);
            xx[i] = x[i] - h;
            let down = loss(&p, &xx);
            xx[i] = x[i];
            let num = (up - down) / (2.0 * h);
            assert!((num - gx[i]).abs() <= 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = ParamStore::new();
        let n = net(&mut a);
        let mut b = a.clone();
        n.init(&mut a, &mut Xoshiro256PlusPlus::seed_from_u64(1));
        n.init(&mut b, &mut Xoshiro256PlusPlus::seed_from_u64(1));
        assert_eq!(a, b);
        let first = &a.entries()[0];
        let bound = (6.0f64 / 32.0).sqrt();
        assert!(first.slot().get(&a.values).iter().all(|v| v.abs() <= bound));
        let bias = &a.entries()[1];
        assert!(bias.slot().get(&a.values).iter().all(|&v| v == 0.0));
    }
}
