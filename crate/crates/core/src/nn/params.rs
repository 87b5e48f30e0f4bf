use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Real, Shape, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter store, used by the tape to decide which leaves are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        Self(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
pub struct ParamStore<T> {
    id: StoreId,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    /// A clone is an independent set of parameters and gets its own identity.
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { id: StoreId::fresh(), names: Vec::new(), index: HashMap::new(), tensors: Vec::new() }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t.as_ref()))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Same layout in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            id: StoreId::fresh(),
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        for t in &mut self.tensors {
            let t = Arc::make_mut(t);
            for x in t.data_mut() {
                *x = v;
            }
        }
    }

    /// Replace values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        if other.names != self.names {
            return Err("parameter layouts differ".into());
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err("parameter shapes differ".into());
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// How convolution weights are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightInit {
    /// `±1/sqrt(fan_in)`; keeps deep recurrent stacks from blowing up.
    #[default]
    Uniform,
    /// He-uniform for leaky ReLU; keeps gradients alive through deep feed-forward encoders.
    He,
}

/// Registers layer parameters under a name prefix and draws their initial values.
pub struct ParamBuilder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
    init: WeightInit,
}

impl<'a, T: Real, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new(), init: WeightInit::default() }
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    /// Convolution weight drawn with the builder's [`WeightInit`].
    pub fn weight(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        match self.init {
            WeightInit::Uniform => self.uniform(name, shape, fan_in),
            WeightInit::He => self.he_uniform(name, shape, fan_in),
        }
    }

    pub fn scoped<F, O>(&mut self, name: &str, f: F) -> O
    where
        F: FnOnce(&mut ParamBuilder<'_, T, R>) -> O,
    {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix, init: self.init };
        f(&mut inner)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_, _, _, _| T::lit(self.rng.random_range(-bound..bound)));
        self.add(name, t)
    }

    /// He-uniform initialisation for leaky-ReLU layers: `±sqrt(6 / ((1 + slope²)·fan_in))`.
    pub fn he_uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let bound = (6.0 / ((1.0 + super::LEAKY_SLOPE * super::LEAKY_SLOPE) * fan_in as f64)).sqrt();
        let t = Tensor::from_fn(shape, |_, _, _, _| T::lit(self.rng.random_range(-bound..bound)));
        self.add(name, t)
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scoped_names_and_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        b.scoped("enc", |b| {
            b.uniform("w", Shape::new(4, 3, 3, 3), 27);
            b.scoped("inner", |b| b.uniform("b", Shape::new(1, 1, 1, 4), 27));
        });
        assert_eq!(store.len(), 2);
        assert!(store.find("enc.inner.b").is_some());
        assert_eq!(store.num_scalars(), 108 + 4);
        let bound = 1.0 / 27f32.sqrt();
        assert!(store.get(ParamId(0)).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn clones_get_new_identity() {
        let s = ParamStore::<f64>::new();
        assert_ne!(s.id(), s.clone().id());
    }
}
