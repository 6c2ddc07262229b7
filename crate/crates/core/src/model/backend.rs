//! The network is written once against [`Backend`] and run either eagerly
//! (inference, intermediates freed as soon as they die) or on a [`Graph`]
//! (training, everything retained for the backward sweep).

use std::marker::PhantomData;
use std::rc::Rc;

use crate::tensor::{self, ConvSpec, Graph, Real, Result, Tensor, Var};

pub(crate) trait Backend {
    type V: Clone;

    fn conv(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, spec: &ConvSpec) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn dup(&mut self, x: &Self::V) -> Result<Self::V>;
}

pub(crate) struct Eager<T>(PhantomData<T>);

impl<T> Eager<T> {
    pub(crate) fn new() -> Self {
        Self(PhantomData)
    }
}

impl<T: Real> Backend for Eager<T> {
    type V = Rc<Tensor<T>>;

    fn conv(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, spec: &ConvSpec) -> Result<Self::V> {
        tensor::conv2d(x, spec, w, Some(b)).map(Rc::new)
    }

    fn upsample(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        tensor::upsample2(x, w, Some(b)).map(Rc::new)
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(tensor::relu(x))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        tensor::add(a, b).map(Rc::new)
    }

    fn pool(&mut self, x: &Self::V) -> Result<Self::V> {
        tensor::max_pool2(x).map(Rc::new)
    }

    fn dup(&mut self, x: &Self::V) -> Result<Self::V> {
        tensor::dup_channels(x).map(Rc::new)
    }
}

impl<T: Real> Backend for Graph<T> {
    type V = Var;

    fn conv(&mut self, x: &Var, w: &Var, b: &Var, spec: &ConvSpec) -> Result<Var> {
        self.conv2d(*x, *w, Some(*b), *spec)
    }

    fn upsample(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.upsample2(*x, *w, Some(*b))
    }

    fn relu(&mut self, x: &Var) -> Var {
        Graph::relu(self, *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }

    fn pool(&mut self, x: &Var) -> Result<Var> {
        self.max_pool2(*x)
    }

    fn dup(&mut self, x: &Var) -> Result<Var> {
        self.dup_channels(*x)
    }
}
