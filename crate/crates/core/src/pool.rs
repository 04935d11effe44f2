//! History buffer of generated samples shown to the discriminators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fixed-capacity pool of past generator outputs.
///
/// While filling, every query is stored and returned as-is. Once full, a
/// query returns a random stored entry (replacing it with the input) with
/// probability `swap_prob`, otherwise the input itself.
#[derive(Clone, Debug)]
pub struct ImagePool<T> {
    capacity: usize,
    buffer: Vec<T>,
    rng: ChaCha8Rng,
    swap_prob: f64,
}

impl<T: Clone> ImagePool<T> {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity >= 1, "pool capacity must be positive");
        Self { capacity, buffer: Vec::with_capacity(capacity), rng, swap_prob: 0.5 }
    }

    /// Restore a pool from saved parts.
    pub fn from_parts(capacity: usize, buffer: Vec<T>, rng: ChaCha8Rng) -> Self {
        assert!(buffer.len() <= capacity);
        Self { capacity, buffer, rng, swap_prob: 0.5 }
    }

    /// Override the swap probability. Intended for tests.
    pub fn with_swap_prob(mut self, p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p));
        self.swap_prob = p;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn buffer(&self) -> &[T] {
        &self.buffer
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn query(&mut self, item: T) -> T {
        if self.buffer.len() < self.capacity {
            self.buffer.push(item.clone());
            return item;
        }
        if self.rng.random::<f64>() < self.swap_prob {
            let i = self.rng.random_range(0..self.capacity);
            std::mem::replace(&mut self.buffer[i], item)
        } else {
            item
        }
    }
}
