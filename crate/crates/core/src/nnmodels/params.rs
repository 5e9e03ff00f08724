use rand::Rng;
use serde::{Deserialize, Serialize};

/// A contiguous range of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn get<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.range()]
    }

    pub fn get_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.range()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self) -> Slot {
        Slot {
            offset: self.offset,
            len: self.len(),
        }
    }
}

/// Every learnable tensor of a model, stored back to back in allocation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> Slot {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.values.len(),
        };
        let slot = entry.slot();
        self.values.resize(self.values.len() + slot.len, 0.0);
        self.entries.push(entry);
        slot
    }

    /// Fills `slot` with draws from `U(-bound, bound)`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, slot: Slot, bound: f64, rng: &mut R) {
        for v in slot.get_mut(&mut self.values) {
            *v = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}
