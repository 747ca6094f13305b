//! Bounded single-producer/single-consumer ring carrying series from a flow
//! manager to its analytics manager.
//!
//! Neither side ever blocks: a push into a full ring is refused and counted,
//! a drain of an empty ring returns nothing. The same storage backs two
//! front-ends. [`CRing`] is owned by one execution context (the simulator);
//! [`CRing::split`] turns it into a [`Producer`]/[`Consumer`] pair that can
//! live on different threads.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

pub const DEFAULT_RING_CAPACITY: usize = 4096;

#[repr(align(64))]
struct Padded<T>(T);

struct Inner<T> {
    slots: Box<[UnsafeCell<MaybeUninit<T>>]>,
    mask: usize,
    /// Next index to read; written by the consumer only.
    head: Padded<AtomicUsize>,
    /// Next index to write; written by the producer only.
    tail: Padded<AtomicUsize>,
    dropped: AtomicU64,
}

// Slots are handed from producer to consumer through the release/acquire
// pair on `tail`, and back through `head`.
unsafe impl<T: Send> Send for Inner<T> {}
unsafe impl<T: Send> Sync for Inner<T> {}

impl<T> Inner<T> {
    fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        let capacity = capacity.next_power_of_two();
        let slots = (0..capacity)
            .map(|_| UnsafeCell::new(MaybeUninit::uninit()))
            .collect::<Vec<_>>()
            .into_boxed_slice();
        Self {
            slots,
            mask: capacity - 1,
            head: Padded(AtomicUsize::new(0)),
            tail: Padded(AtomicUsize::new(0)),
            dropped: AtomicU64::new(0),
        }
    }

    fn capacity(&self) -> usize {
        self.mask + 1
    }

    fn len(&self) -> usize {
        let head = self.head.0.load(Ordering::Acquire);
        let tail = self.tail.0.load(Ordering::Acquire);
        tail.wrapping_sub(head)
    }

    /// Producer side only.
    unsafe fn try_push(&self, value: T) -> Result<(), T> {
        let tail = self.tail.0.load(Ordering::Relaxed);
        let head = self.head.0.load(Ordering::Acquire);
        if tail.wrapping_sub(head) == self.capacity() {
            return Err(value);
        }
        (*self.slots[tail & self.mask].get()).write(value);
        self.tail.0.store(tail.wrapping_add(1), Ordering::Release);
        Ok(())
    }

    unsafe fn push(&self, value: T) -> bool {
        match self.try_push(value) {
            Ok(()) => true,
            Err(_) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    /// Consumer side only.
    unsafe fn drain_up_to(&self, n: usize) -> Vec<T> {
        let head = self.head.0.load(Ordering::Relaxed);
        let tail = self.tail.0.load(Ordering::Acquire);
        let count = n.min(tail.wrapping_sub(head));
        let out = (0..count)
            .map(|i| (*self.slots[head.wrapping_add(i) & self.mask].get()).assume_init_read())
            .collect();
        self.head.0.store(head.wrapping_add(count), Ordering::Release);
        out
    }

    /// Consumer side only. Removes every pending element matching `pred`,
    /// keeping the others in FIFO order.
    unsafe fn extract_if<F: FnMut(&T) -> bool>(&self, mut pred: F) -> Vec<T> {
        let head = self.head.0.load(Ordering::Relaxed);
        let tail = self.tail.0.load(Ordering::Acquire);
        let pending = tail.wrapping_sub(head);
        let mut kept = Vec::with_capacity(pending);
        let mut taken = Vec::new();
        for i in 0..pending {
            let v = (*self.slots[head.wrapping_add(i) & self.mask].get()).assume_init_read();
            if pred(&v) {
                taken.push(v);
            } else {
                kept.push(v);
            }
        }
        // Survivors move to the newest end of the pending window; the
        // producer never writes inside [head, tail).
        let new_head = tail.wrapping_sub(kept.len());
        for (i, v) in kept.into_iter().enumerate() {
            (*self.slots[new_head.wrapping_add(i) & self.mask].get()).write(v);
        }
        self.head.0.store(new_head, Ordering::Release);
        taken
    }
}

impl<T> Drop for Inner<T> {
    fn drop(&mut self) {
        let head = *self.head.0.get_mut();
        let tail = *self.tail.0.get_mut();
        for i in 0..tail.wrapping_sub(head) {
            unsafe { self.slots[head.wrapping_add(i) & self.mask].get_mut().assume_init_drop() };
        }
    }
}

/// Consumer-side operations shared by both ring front-ends.
pub trait RingReader<T> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Removes and returns the `min(n, len)` oldest elements.
    fn drain_up_to(&mut self, n: usize) -> Vec<T>;
    /// Removes the elements matching `pred`, oldest first.
    fn extract_if<F: FnMut(&T) -> bool>(&mut self, pred: F) -> Vec<T>;
}

/// A ring owned by a single execution context.
pub struct CRing<T> {
    inner: Inner<T>,
}

impl<T> CRing<T> {
    /// Creates a ring; `capacity` is rounded up to a power of two.
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Inner::new(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    /// Enqueues `value`, or drops it and returns false when the ring is full.
    pub fn push(&mut self, value: T) -> bool {
        unsafe { self.inner.push(value) }
    }

    /// Pushes refused because the ring was full.
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    pub fn split(self) -> (Producer<T>, Consumer<T>) {
        let inner = Arc::new(self.inner);
        (
            Producer {
                inner: Arc::clone(&inner),
            },
            Consumer { inner },
        )
    }
}

impl<T> RingReader<T> for CRing<T> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn drain_up_to(&mut self, n: usize) -> Vec<T> {
        unsafe { self.inner.drain_up_to(n) }
    }

    fn extract_if<F: FnMut(&T) -> bool>(&mut self, pred: F) -> Vec<T> {
        unsafe { self.inner.extract_if(pred) }
    }
}

/// Writing end of a split ring.
pub struct Producer<T> {
    inner: Arc<Inner<T>>,
}

impl<T> Producer<T> {
    pub fn push(&mut self, value: T) -> bool {
        unsafe { self.inner.push(value) }
    }

    pub fn try_push(&mut self, value: T) -> Result<(), T> {
        unsafe { self.inner.try_push(value) }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }
}

/// Reading end of a split ring. `len` may lag the producer.
pub struct Consumer<T> {
    inner: Arc<Inner<T>>,
}

impl<T> Consumer<T> {
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }
}

impl<T> RingReader<T> for Consumer<T> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn drain_up_to(&mut self, n: usize) -> Vec<T> {
        unsafe { self.inner.drain_up_to(n) }
    }

    fn extract_if<F: FnMut(&T) -> bool>(&mut self, pred: F) -> Vec<T> {
        unsafe { self.inner.extract_if(pred) }
    }
}

// Producer and Consumer are deliberately not Clone: one of each per ring.
unsafe impl<T: Send> Send for Producer<T> {}
unsafe impl<T: Send> Send for Consumer<T> {}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn push_and_len() {
        let mut r = CRing::new(4);
        assert_eq!(r.len(), 0);
        assert!(r.push(1));
        assert_eq!(r.len(), 1);
        r.push(2);
        r.push(3);
        assert_eq!(r.len(), 3);
        r.drain_up_to(1);
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn full_ring_refuses_and_counts() {
        let mut r = CRing::new(4);
        for i in 0..4 {
            assert!(r.push(i));
        }
        assert!(!r.push(99));
        assert_eq!(r.dropped(), 1);
        assert_eq!(r.drain_up_to(10), vec![0, 1, 2, 3]);
    }

    #[test]
    fn capacity_rounds_up() {
        assert_eq!(CRing::<u8>::new(5).capacity(), 8);
        assert_eq!(CRing::<u8>::new(DEFAULT_RING_CAPACITY).capacity(), 4096);
    }

    #[test]
    fn drain_partial() {
        let mut r = CRing::new(128);
        for i in 0..100 {
            r.push(i);
        }
        let got = r.drain_up_to(64);
        assert_eq!(got, (0..64).collect::<Vec<_>>());
        assert_eq!(r.len(), 36);
        assert!(r.drain_up_to(0).is_empty());
        assert_eq!(r.len(), 36);
        assert_eq!(r.drain_up_to(50), (64..100).collect::<Vec<_>>());
    }

    #[test]
    fn extract_keeps_fifo_order_across_wrap() {
        let mut r = CRing::new(8);
        for i in 0..6 {
            r.push(i);
        }
        r.drain_up_to(5);
        for i in 6..13 {
            assert!(r.push(i));
        }
        let evens = r.extract_if(|v| v % 2 == 0);
        assert_eq!(evens, vec![6, 8, 10, 12]);
        assert_eq!(r.len(), 4);
        assert!(r.push(13));
        assert_eq!(r.drain_up_to(100), vec![5, 7, 9, 11, 13]);
    }

    #[test]
    fn drops_pending_elements() {
        let marker = Arc::new(());
        {
            let mut r = CRing::new(4);
            r.push(Arc::clone(&marker));
            r.push(Arc::clone(&marker));
            assert_eq!(Arc::strong_count(&marker), 3);
        }
        assert_eq!(Arc::strong_count(&marker), 1);
    }

    #[test]
    fn threaded_fifo_without_loss() {
        let (mut tx, mut rx) = CRing::new(64).split();
        let n = 200_000u64;
        let producer = thread::spawn(move || {
            let mut i = 0;
            while i < n {
                if tx.try_push(i).is_ok() {
                    i += 1;
                } else {
                    std::hint::spin_loop();
                }
            }
        });
        let mut next = 0;
        let mut turn = 0u64;
        while next < n {
            turn += 1;
            let batch = if turn % 3 == 0 {
                rx.extract_if(|v| v % 1000 == 7)
                    .into_iter()
                    .chain(rx.drain_up_to(usize::MAX))
                    .collect::<Vec<_>>()
            } else {
                rx.drain_up_to((turn % 17) as usize + 1)
            };
            let mut batch = batch;
            batch.sort_unstable();
            for v in batch {
                assert_eq!(v, next);
                next += 1;
            }
        }
        producer.join().unwrap();
        assert_eq!(rx.len(), 0);
    }
}
