//! The executor abstraction the networks are written against.
//!
//! A forward pass is expressed once as calls on [`Exec`]; running it through
//! [`Eager`] computes values, through [`crate::nn::Tape`] records a graph for
//! reverse-mode differentiation, and through [`MacCounter`] only propagates
//! shapes and tallies multiply-accumulates.

use std::sync::Arc;

use crate::nn::kernels;
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

pub trait Exec<T: Real> {
    type V: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V;
    fn shape(&self, v: &Self::V) -> Shape;

    fn zeros(&mut self, shape: Shape) -> Self::V {
        self.constant(Tensor::zeros(shape))
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, stride: usize, pad: usize) -> Self::V;
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, stride: usize, pad: usize)
        -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn concat(&mut self, xs: &[&Self::V]) -> Self::V;
    fn avg_pool(&mut self, x: &Self::V, k: usize) -> Self::V;
    fn pad_reflect(&mut self, x: &Self::V, pads: [usize; 4]) -> Self::V;
    fn crop(&mut self, x: &Self::V, top: usize, left: usize, h: usize, w: usize) -> Self::V;
}

/// Direct evaluation; intermediate tensors are dropped as soon as they go out of scope.
#[derive(Default)]
pub struct Eager;

impl<T: Real> Exec<T> for Eager {
    type V = Arc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        Arc::new(t)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V {
        store.get(id).clone()
    }

    fn shape(&self, v: &Self::V) -> Shape {
        v.shape()
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, stride: usize, pad: usize) -> Self::V {
        Arc::new(kernels::conv2d(x, w, b.map(|b| b.as_ref()), stride, pad))
    }

    fn conv_transpose2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
    ) -> Self::V {
        Arc::new(kernels::conv_transpose2d(x, w, b.map(|b| b.as_ref()), stride, pad))
    }

    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V {
        Arc::new(kernels::leaky_relu(x, T::lit(slope)))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Arc::new(a.zip_map(b, |x, y| x + y))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Arc::new(a.zip_map(b, |x, y| x * y))
    }

    fn concat(&mut self, xs: &[&Self::V]) -> Self::V {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|t| t.as_ref()).collect();
        Arc::new(kernels::concat(&refs))
    }

    fn avg_pool(&mut self, x: &Self::V, k: usize) -> Self::V {
        Arc::new(kernels::avg_pool(x, k))
    }

    fn pad_reflect(&mut self, x: &Self::V, pads: [usize; 4]) -> Self::V {
        Arc::new(kernels::pad_reflect(x, pads))
    }

    fn crop(&mut self, x: &Self::V, top: usize, left: usize, h: usize, w: usize) -> Self::V {
        Arc::new(x.crop(top, left, h, w))
    }
}

/// Shape-only executor that counts multiply-accumulates of every convolution.
///
/// One MAC per multiply-add in standard, transposed and pointwise convolutions;
/// activations, additions, pooling and padding are free.
#[derive(Default, Debug)]
pub struct MacCounter {
    pub macs: u128,
}

impl<T: Real> Exec<T> for MacCounter {
    type V = Shape;

    fn constant(&mut self, t: Tensor<T>) -> Shape {
        t.shape()
    }

    fn zeros(&mut self, shape: Shape) -> Shape {
        shape
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Shape {
        store.get(id).shape()
    }

    fn shape(&self, v: &Shape) -> Shape {
        *v
    }

    fn conv2d(&mut self, x: &Shape, w: &Shape, _b: Option<&Shape>, stride: usize, pad: usize) -> Shape {
        let ho = kernels::conv_out_size(x.h, w.h, stride, pad);
        let wo = kernels::conv_out_size(x.w, w.w, stride, pad);
        self.macs += (x.n * ho * wo * w.n * w.c * w.h * w.w) as u128;
        Shape::new(x.n, w.n, ho, wo)
    }

    fn conv_transpose2d(&mut self, x: &Shape, w: &Shape, _b: Option<&Shape>, stride: usize, pad: usize) -> Shape {
        self.macs += (x.n * x.h * x.w * w.n * w.c * w.h * w.w) as u128;
        Shape::new(
            x.n,
            w.c,
            kernels::conv_transpose_out_size(x.h, w.h, stride, pad),
            kernels::conv_transpose_out_size(x.w, w.w, stride, pad),
        )
    }

    fn leaky_relu(&mut self, x: &Shape, _slope: f64) -> Shape {
        *x
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Shape {
        assert_eq!(a, b, "add shape mismatch");
        *a
    }

    fn mul(&mut self, a: &Shape, b: &Shape) -> Shape {
        assert_eq!(a, b, "mul shape mismatch");
        *a
    }

    fn concat(&mut self, xs: &[&Shape]) -> Shape {
        let c = xs.iter().map(|s| s.c).sum();
        xs[0].with_c(c)
    }

    fn avg_pool(&mut self, x: &Shape, k: usize) -> Shape {
        x.with_hw(x.h / k, x.w / k)
    }

    fn pad_reflect(&mut self, x: &Shape, pads: [usize; 4]) -> Shape {
        x.with_hw(x.h + pads[0] + pads[1], x.w + pads[2] + pads[3])
    }

    fn crop(&mut self, x: &Shape, _top: usize, _left: usize, h: usize, w: usize) -> Shape {
        x.with_hw(h, w)
    }
}
