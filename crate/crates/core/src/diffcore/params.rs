use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::{Real, Tensor};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Handle to one trainable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u32,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns the trainable arrays of one model together with their gradient
/// accumulators. A frozen store rejects every mutation of parameter values.
/// Clones share the tag of the original, so handles stay valid on a copy.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u32,
    params: Vec<Param>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub(crate) fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        assert!(!self.frozen, "cannot register parameters on a frozen store");
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId {
            store: self.tag,
            index: self.params.len() - 1,
        }
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) initialisation.
    pub fn uniform_fan_in<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as Real).sqrt();
        self.uniform(name, shape, bound, rng)
    }

    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: Real,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-bound..=bound))
            .collect::<Vec<Real>>();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.tag, "parameter handle from another store");
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.check(id);
        &self.params[id.index].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        self.check(id);
        &self.params[id.index].grad
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.check(id);
        assert!(
            !self.frozen,
            "attempt to mutate parameter {} of a frozen store",
            self.params[id.index].name
        );
        &mut self.params[id.index].value
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.check(id);
        self.params[id.index].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            store: self.tag,
            index,
        })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|index| ParamId {
                store: self.tag,
                index,
            })
    }

    /// Mutable access to value and gradient together, for optimizers.
    pub fn params_mut(&mut self) -> &mut [Param] {
        assert!(!self.frozen, "attempt to update a frozen parameter store");
        &mut self.params
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert!(!self.frozen, "attempt to overwrite a frozen parameter store");
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            a.value = b.value.clone();
        }
    }

    /// Order-sensitive FNV-1a digest of every name, shape and value bit.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for d in p.value.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}
