use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array4, ArrayView2, ArrayView3, ArrayView4};

use super::{Backbone, BackboneOutput, QueryEmbeddings, Refiner};
use crate::error::Result;

/// Wraps a backbone/refiner and counts calls to each contract.
#[derive(Debug, Default)]
pub struct Counting<T> {
    inner: T,
    encodes: AtomicUsize,
    adapts: AtomicUsize,
    refines: AtomicUsize,
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            encodes: AtomicUsize::new(0),
            adapts: AtomicUsize::new(0),
            refines: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    pub fn encodes(&self) -> usize {
        self.encodes.load(Ordering::Relaxed)
    }

    pub fn adapts(&self) -> usize {
        self.adapts.load(Ordering::Relaxed)
    }

    pub fn refines(&self) -> usize {
        self.refines.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encodes.store(0, Ordering::Relaxed);
        self.adapts.store(0, Ordering::Relaxed);
        self.refines.store(0, Ordering::Relaxed);
    }
}

impl<T: Backbone> Backbone for Counting<T> {
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn text_dim(&self) -> usize {
        self.inner.text_dim()
    }

    fn encode(&self, image: ArrayView3<f32>, s_f: ArrayView3<f32>) -> Result<BackboneOutput> {
        self.encodes.fetch_add(1, Ordering::Relaxed);
        self.inner.encode(image, s_f)
    }

    fn adapt_queries(&self, v: ArrayView4<f32>, z: ArrayView2<f32>) -> Result<QueryEmbeddings> {
        self.adapts.fetch_add(1, Ordering::Relaxed);
        self.inner.adapt_queries(v, z)
    }
}

impl<T: Refiner> Refiner for Counting<T> {
    fn refine(&self, f: ArrayView4<f32>, f_a: ArrayView4<f32>) -> Result<Array4<f32>> {
        self.refines.fetch_add(1, Ordering::Relaxed);
        self.inner.refine(f, f_a)
    }
}
