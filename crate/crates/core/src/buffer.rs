//! Fixed-capacity ring store of transitions with oldest-first eviction.

use rand::Rng;

use crate::envs::{Source, Transition};

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            data: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Storage order, not insertion order.
    pub fn as_slice(&self) -> &[Transition] {
        &self.data
    }

    /// Oldest first.
    pub fn chronological(&self) -> Vec<Transition> {
        let mut out = Vec::with_capacity(self.data.len());
        out.extend_from_slice(&self.data[self.cursor..]);
        out.extend_from_slice(&self.data[..self.cursor]);
        out
    }

    /// Up to `n` most recent transitions, oldest first.
    pub fn recent(&self, n: usize) -> Vec<Transition> {
        let all = self.chronological();
        let skip = all.len().saturating_sub(n);
        all[skip..].to_vec()
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        (!self.data.is_empty()).then(|| rng.gen_range(0..self.data.len()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Transition> {
        self.sample_index(rng).map(|i| &self.data[i])
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.cursor = 0;
    }

    /// Change capacity, keeping the newest entries.
    pub fn set_capacity(&mut self, capacity: usize) {
        let capacity = capacity.max(1);
        if capacity == self.capacity {
            return;
        }
        let mut all = self.chronological();
        if all.len() > capacity {
            all.drain(..all.len() - capacity);
        }
        self.data = all;
        self.capacity = capacity;
        self.cursor = 0;
    }
}

/// D_env: real transitions.
pub type ReplayBuffer = TransitionBuffer;

/// D_model: imaginary transitions only. Pushing retags the source.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBuffer(TransitionBuffer);

impl ModelBuffer {
    pub fn new(capacity: usize) -> Self {
        Self(TransitionBuffer::new(capacity))
    }

    pub fn push(&mut self, mut t: Transition) {
        t.source = Source::Imaginary;
        self.0.push(t);
    }

    pub fn inner(&self) -> &TransitionBuffer {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.0.capacity()
    }

    pub fn clear(&mut self) {
        self.0.clear()
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.0.set_capacity(capacity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(x: f64) -> Transition {
        Transition {
            s: vec![x],
            a: vec![0.0],
            r: x,
            s2: vec![x],
            done: false,
            source: Source::Real,
            behavior_log_prob: None,
        }
    }

    #[test]
    fn evicts_oldest() {
        let mut b = TransitionBuffer::new(3);
        for i in 0..5 {
            b.push(t(i as f64));
        }
        assert_eq!(b.len(), 3);
        let r: Vec<f64> = b.chronological().iter().map(|x| x.r).collect();
        assert_eq!(r, vec![2.0, 3.0, 4.0]);
        assert_eq!(b.recent(2).iter().map(|x| x.r).collect::<Vec<_>>(), vec![3.0, 4.0]);
    }

    #[test]
    fn shrink_keeps_newest() {
        let mut b = TransitionBuffer::new(5);
        for i in 0..7 {
            b.push(t(i as f64));
        }
        b.set_capacity(2);
        assert_eq!(b.chronological().iter().map(|x| x.r).collect::<Vec<_>>(), vec![5.0, 6.0]);
        b.push(t(7.0));
        assert_eq!(b.chronological().iter().map(|x| x.r).collect::<Vec<_>>(), vec![6.0, 7.0]);
    }

    #[test]
    fn model_buffer_retags() {
        let mut m = ModelBuffer::new(4);
        m.push(t(1.0));
        assert_eq!(m.inner().as_slice()[0].source, Source::Imaginary);
    }
}
