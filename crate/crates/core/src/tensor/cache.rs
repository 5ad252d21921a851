use std::collections::HashMap;
use std::rc::Rc;

use super::Element;

struct Entry<T> {
    buffer: Rc<[T]>,
    consumers: usize,
}

/// Memoizes layer inputs saved for backward so that every layer reading the
/// same activation shares one stored copy.
///
/// Entries are keyed by the bit pattern of the input's 32-bit mean. Inputs
/// whose means collide are chained in the same bucket and told apart by
/// exact elementwise comparison.
pub struct SharedInputCache<T> {
    table: HashMap<u32, Vec<Entry<T>>>,
}

impl<T> Default for SharedInputCache<T> {
    fn default() -> Self {
        Self {
            table: HashMap::new(),
        }
    }
}

impl<T: Element> SharedInputCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(input: &[T]) -> u32 {
        if input.is_empty() {
            return 0f32.to_bits();
        }
        let sum: f64 = input.iter().map(|v| v.as_f64()).sum();
        ((sum / input.len() as f64) as f32).to_bits()
    }

    /// Returns the stored copy for `input`, saving one if none exists yet.
    pub fn register(&mut self, input: &[T]) -> Rc<[T]> {
        let bucket = self.table.entry(Self::key(input)).or_default();
        if let Some(entry) = bucket.iter_mut().find(|e| *e.buffer == *input) {
            entry.consumers += 1;
            return Rc::clone(&entry.buffer);
        }
        let buffer: Rc<[T]> = Rc::from(input);
        bucket.push(Entry {
            buffer: Rc::clone(&buffer),
            consumers: 1,
        });
        buffer
    }

    /// Number of stored input copies.
    pub fn len(&self) -> usize {
        self.table.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Number of distinct keys (buckets).
    pub fn bucket_count(&self) -> usize {
        self.table.len()
    }

    /// Length of the chain stored under `key`.
    pub fn chain_len(&self, key: u32) -> usize {
        self.table.get(&key).map_or(0, Vec::len)
    }

    /// Consumer count of the stored copy equal to `input`, if any.
    pub fn consumers(&self, input: &[T]) -> Option<usize> {
        self.table
            .get(&Self::key(input))?
            .iter()
            .find(|e| *e.buffer == *input)
            .map(|e| e.consumers)
    }

    pub fn clear(&mut self) {
        self.table.clear();
    }
}
