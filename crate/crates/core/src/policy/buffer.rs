use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ranking::ClassRanking;
use crate::error::{Error, Result};
use crate::statecodec::HighDimState;

/// One agent step. The raw states are kept alongside the key features so an
/// update can recompute the policy's logits through the encoder and SKFEN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: HighDimState,
    pub z_key: Vec<f64>,
    pub ranking: ClassRanking,
    /// Affine-mapped rewards in `[0, 1]`.
    pub reward: Vec<f64>,
    pub next_state: HighDimState,
    pub z_key_next: Vec<f64>,
}

/// Fixed-capacity FIFO ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ring<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T: Clone> Ring<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer", "capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<T>> {
        if batch == 0 || self.items.len() < batch {
            return Err(Error::invalid(
                "buffer.sample",
                format!("batch {batch} from {} entries", self.items.len()),
            ));
        }
        Ok((0..batch)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub transitions: Ring<TransitionRecord>,
    pub states: Ring<HighDimState>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_capacity: usize) -> Result<Self> {
        Ok(Self {
            transitions: Ring::new(capacity)?,
            states: Ring::new(state_capacity)?,
        })
    }
}
