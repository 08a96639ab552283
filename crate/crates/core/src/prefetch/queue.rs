//! Bounded lock-free ring used as the helper-thread job queue.
//!
//! Classic sequence-stamped design: each cell carries an atomic stamp,
//! producers and consumers claim positions with compare-and-exchange on the
//! head/tail counters, and the stamp publishes the cell's state. One
//! producer, any number of consumers; full queues reject instead of
//! blocking. Every successfully enqueued element is dequeued exactly once.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Pad to a cache line so head and tail do not false-share.
#[repr(align(64))]
struct Aligned<T>(T);

struct Cell<T> {
    stamp: AtomicUsize,
    value: UnsafeCell<MaybeUninit<T>>,
}

pub struct JobQueue<T> {
    cells: Box<[Cell<T>]>,
    mask: usize,
    head: Aligned<AtomicUsize>,
    tail: Aligned<AtomicUsize>,
    enqueued: AtomicUsize,
    dequeued: AtomicUsize,
    rejected: AtomicUsize,
}

unsafe impl<T: Send> Send for JobQueue<T> {}
unsafe impl<T: Send> Sync for JobQueue<T> {}

/// Lifetime counters of one queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueCounters {
    pub enqueued: u64,
    pub dequeued: u64,
    pub rejected: u64,
}

impl<T> JobQueue<T> {
    /// Capacity is rounded up to a power of two. Zero is invalid.
    pub fn with_capacity(capacity: usize) -> Option<JobQueue<T>> {
        if capacity == 0 {
            return None;
        }
        let cap = capacity.next_power_of_two();
        let cells = (0..cap)
            .map(|i| Cell {
                stamp: AtomicUsize::new(i),
                value: UnsafeCell::new(MaybeUninit::uninit()),
            })
            .collect();
        Some(JobQueue {
            cells,
            mask: cap - 1,
            head: Aligned(AtomicUsize::new(0)),
            tail: Aligned(AtomicUsize::new(0)),
            enqueued: AtomicUsize::new(0),
            dequeued: AtomicUsize::new(0),
            rejected: AtomicUsize::new(0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.cells.len()
    }

    /// Occupancy estimate; exact when no operation is in flight.
    pub fn len(&self) -> usize {
        let head = self.head.0.load(Ordering::Acquire);
        let tail = self.tail.0.load(Ordering::Acquire);
        head.saturating_sub(tail)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counters(&self) -> QueueCounters {
        QueueCounters {
            enqueued: self.enqueued.load(Ordering::Relaxed) as u64,
            dequeued: self.dequeued.load(Ordering::Relaxed) as u64,
            rejected: self.rejected.load(Ordering::Relaxed) as u64,
        }
    }

    /// Non-blocking enqueue; gives the value back when the ring is full.
    pub fn try_enqueue(&self, value: T) -> Result<(), T> {
        let mut pos = self.head.0.load(Ordering::Relaxed);
        loop {
            let cell = &self.cells[pos & self.mask];
            let stamp = cell.stamp.load(Ordering::Acquire);
            let diff = stamp as isize - pos as isize;
            if diff == 0 {
                match self.head.0.compare_exchange_weak(
                    pos,
                    pos + 1,
                    Ordering::Relaxed,
                    Ordering::Relaxed,
                ) {
                    Ok(_) => {
                        unsafe { (*cell.value.get()).write(value) };
                        cell.stamp.store(pos + 1, Ordering::Release);
                        self.enqueued.fetch_add(1, Ordering::Relaxed);
                        return Ok(());
                    }
                    Err(cur) => pos = cur,
                }
            } else if diff < 0 {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(value);
            } else {
                pos = self.head.0.load(Ordering::Relaxed);
            }
        }
    }

    /// Non-blocking dequeue.
    pub fn try_dequeue(&self) -> Option<T> {
        let mut pos = self.tail.0.load(Ordering::Relaxed);
        loop {
            let cell = &self.cells[pos & self.mask];
            let stamp = cell.stamp.load(Ordering::Acquire);
            let diff = stamp as isize - (pos + 1) as isize;
            if diff == 0 {
                match self.tail.0.compare_exchange_weak(
                    pos,
                    pos + 1,
                    Ordering::Relaxed,
                    Ordering::Relaxed,
                ) {
                    Ok(_) => {
                        let value = unsafe { (*cell.value.get()).assume_init_read() };
                        cell.stamp
                            .store(pos + self.mask + 1, Ordering::Release);
                        self.dequeued.fetch_add(1, Ordering::Relaxed);
                        return Some(value);
                    }
                    Err(cur) => pos = cur,
                }
            } else if diff < 0 {
                return None;
            } else {
                pos = self.tail.0.load(Ordering::Relaxed);
            }
        }
    }
}

impl<T> Drop for JobQueue<T> {
    fn drop(&mut self) {
        while self.try_dequeue().is_some() {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU64;
    use std::sync::Arc;

    #[test]
    fn zero_capacity_invalid() {
        assert!(JobQueue::<u64>::with_capacity(0).is_none());
    }

    #[test]
    fn capacity_rounds_to_power_of_two() {
        let q = JobQueue::<u64>::with_capacity(100).unwrap();
        assert_eq!(q.capacity(), 128);
    }

    #[test]
    fn fifo_and_bounded() {
        let q = JobQueue::with_capacity(4).unwrap();
        for i in 0..4u64 {
            q.try_enqueue(i).unwrap();
        }
        assert_eq!(q.try_enqueue(99), Err(99), "ring is full");
        assert_eq!(q.counters().rejected, 1);
        for i in 0..4u64 {
            assert_eq!(q.try_dequeue(), Some(i));
        }
        assert_eq!(q.try_dequeue(), None);
        let c = q.counters();
        assert_eq!((c.enqueued, c.dequeued), (4, 4));
    }

    #[test]
    fn occupancy_bound_holds() {
        let q = JobQueue::with_capacity(8).unwrap();
        for round in 0..100u64 {
            for i in 0..(round % 9) {
                let _ = q.try_enqueue(i);
            }
            assert!(q.len() <= q.capacity());
            while q.try_dequeue().is_some() {}
        }
    }

    /// Single producer, multiple consumers: every element delivered exactly
    /// once, verified with an ownership bitmap.
    #[test]
    fn spmc_exactly_once() {
        const N: u64 = 200_000;
        const CONSUMERS: usize = 3;
        let q = Arc::new(JobQueue::with_capacity(64).unwrap());
        let seen: Arc<Vec<AtomicU64>> = Arc::new(
            (0..(N as usize).div_ceil(64))
                .map(|_| AtomicU64::new(0))
                .collect(),
        );
        let done = Arc::new(std::sync::atomic::AtomicBool::new(false));

        let consumers: Vec<_> = (0..CONSUMERS)
            .map(|_| {
                let q = Arc::clone(&q);
                let seen = Arc::clone(&seen);
                let done = Arc::clone(&done);
                std::thread::spawn(move || {
                    let mut got = 0u64;
                    loop {
                        if let Some(v) = q.try_dequeue() {
                            let w = (v / 64) as usize;
                            let bit = 1u64 << (v % 64);
                            let prev = seen[w].fetch_or(bit, Ordering::Relaxed);
                            assert_eq!(prev & bit, 0, "duplicate delivery of {v}");
                            got += 1;
                        } else if done.load(Ordering::Acquire) && q.is_empty() {
                            return got;
                        } else {
                            std::hint::spin_loop();
                        }
                    }
                })
            })
            .collect();

        let mut accepted = 0u64;
        let mut v = 0u64;
        while v < N {
            if q.try_enqueue(v).is_ok() {
                accepted += 1;
                v += 1;
            }
        }
        done.store(true, Ordering::Release);
        let total: u64 = consumers.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(accepted, N);
        assert_eq!(total, N, "every accepted job consumed exactly once");
        for (w, word) in seen.iter().enumerate() {
            let expect = if (w + 1) * 64 <= N as usize {
                u64::MAX
            } else {
                (1u64 << (N as usize - w * 64)) - 1
            };
            assert_eq!(word.load(Ordering::Relaxed), expect, "word {w}");
        }
    }
}
