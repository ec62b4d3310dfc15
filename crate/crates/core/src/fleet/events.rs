use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Time-ordered event queue; equal times pop in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<(u64, u64, Slot<E>)>>,
    now: u64,
    seq: u64,
}

/// Payload wrapper that opts out of the ordering.
#[derive(Debug)]
struct Slot<E>(E);

impl<E> PartialEq for Slot<E> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<E> Eq for Slot<E> {}

impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Slot<E> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: 0,
            seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at_ns: u64, event: E) -> Result<u64> {
        if at_ns < self.now {
            return Err(Error::Precondition(format!("event at {at_ns} ns is before now ({} ns)", self.now)));
        }
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse((at_ns, seq, Slot(event))));
        Ok(seq)
    }

    /// Next event as `(time, sequence number, event)`; advances the clock.
    pub fn pop(&mut self) -> Option<(u64, u64, E)> {
        let Reverse((t, seq, Slot(e))) = self.heap.pop()?;
        self.now = t;
        Some((t, seq, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn past_events_are_refused() {
        let mut q = EventQueue::new();
        q.schedule(10, 'a').unwrap();
        q.pop();
        assert!(q.schedule(9, 'b').is_err());
        assert!(q.schedule(10, 'c').is_ok());
    }

    proptest! {
        #[test]
        fn pops_in_time_then_insertion_order(times in proptest::collection::vec(0u64..20, 1..100)) {
            let mut q = EventQueue::new();
            for (i, &t) in times.iter().enumerate() {
                q.schedule(t, i).unwrap();
            }
            let mut expect: Vec<(u64, usize)> = times.iter().copied().zip(0..).collect();
            expect.sort();
            let got: Vec<(u64, usize)> = std::iter::from_fn(|| q.pop().map(|(t, _, e)| (t, e))).collect();
            prop_assert_eq!(got, expect);
        }
    }
}
