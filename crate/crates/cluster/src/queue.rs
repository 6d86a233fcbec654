//! Bounded blocking FIFO of tensor tuples.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use flowhpc_core::{StateError, Tensor};

pub const DEFAULT_CAPACITY: usize = 32;

struct Inner {
    items: VecDeque<Vec<Tensor>>,
    closed: bool,
    enqueued: u64,
    dequeued: u64,
}

/// Elements are ordered by the time their enqueue acquired the queue lock.
pub struct FifoQueue {
    name: String,
    capacity: usize,
    inner: Mutex<Inner>,
    not_empty: Condvar,
    not_full: Condvar,
}

fn deadline(timeout: Duration) -> Option<Instant> {
    Instant::now().checked_add(timeout)
}

impl FifoQueue {
    pub fn new(name: impl Into<String>, capacity: usize) -> FifoQueue {
        FifoQueue {
            name: name.into(),
            capacity: capacity.max(1),
            inner: Mutex::new(Inner { items: VecDeque::new(), closed: false, enqueued: 0, dequeued: 0 }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    /// Lifetime `(enqueued, dequeued)` element counts.
    pub fn counts(&self) -> (u64, u64) {
        let g = self.inner.lock().unwrap();
        (g.enqueued, g.dequeued)
    }

    /// Blocks while full. Fails immediately once the queue is closed.
    pub fn enqueue(&self, element: Vec<Tensor>, timeout: Duration) -> Result<(), StateError> {
        let until = deadline(timeout);
        let mut g = self.inner.lock().unwrap();
        loop {
            if g.closed {
                return Err(StateError::QueueClosed(self.name.clone()));
            }
            if g.items.len() < self.capacity {
                break;
            }
            g = match until {
                None => self.not_full.wait(g).unwrap(),
                Some(until) => {
                    let left = until.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(StateError::Timeout(self.name.clone()));
                    }
                    self.not_full.wait_timeout(g, left).unwrap().0
                }
            };
        }
        g.items.push_back(element);
        g.enqueued += 1;
        drop(g);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Blocks while empty. A closed queue still drains its remaining
    /// elements before reporting `QueueClosed`.
    pub fn dequeue(&self, timeout: Duration) -> Result<Vec<Tensor>, StateError> {
        let until = deadline(timeout);
        let mut g = self.inner.lock().unwrap();
        loop {
            if let Some(e) = g.items.pop_front() {
                g.dequeued += 1;
                drop(g);
                self.not_full.notify_one();
                return Ok(e);
            }
            if g.closed {
                return Err(StateError::QueueClosed(self.name.clone()));
            }
            g = match until {
                None => self.not_empty.wait(g).unwrap(),
                Some(until) => {
                    let left = until.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(StateError::Timeout(self.name.clone()));
                    }
                    self.not_empty.wait_timeout(g, left).unwrap().0
                }
            };
        }
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }
}
