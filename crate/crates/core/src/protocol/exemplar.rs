use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AnnotatedInstance;
use crate::seed::derive_seed;
use crate::topology::Label;

/// Bounded per-class replay memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore {
    capacity: usize,
    buffers: BTreeMap<usize, Vec<AnnotatedInstance>>,
}

impl ExemplarStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            buffers: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn buffer(&self, class: usize) -> Option<&[AnnotatedInstance]> {
        self.buffers.get(&class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.buffers.keys().copied()
    }

    pub fn total(&self) -> usize {
        self.buffers.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// All stored instances, class by class.
    pub fn iter(&self) -> impl Iterator<Item = &AnnotatedInstance> {
        self.buffers.values().flatten()
    }

    /// Samples up to `capacity` instances, uniformly without replacement, for
    /// each class in `new_classes`. Buffers of other classes are untouched.
    pub fn update(&mut self, task_data: &[AnnotatedInstance], new_classes: &[usize], seed: u64) {
        for &class in new_classes {
            let pool: Vec<&AnnotatedInstance> = task_data
                .iter()
                .filter(|inst| inst.label == Label::Class(class))
                .collect();
            let take = pool.len().min(self.capacity);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
            picked.sort_unstable();
            self.buffers
                .insert(class, picked.into_iter().map(|i| pool[i].clone()).collect());
        }
    }
}

/// Functional form of [`ExemplarStore::update`].
pub fn update_exemplars(
    mut store: ExemplarStore,
    task_data: &[AnnotatedInstance],
    new_classes: &[usize],
    seed: u64,
) -> ExemplarStore {
    store.update(task_data, new_classes, seed);
    store
}
