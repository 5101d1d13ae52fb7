//! Counting admission gate shared by backend ports (which reject
//! over-admission) and the orchestrator (which waits for a slot).

use std::sync::{Arc, Condvar, Mutex};

#[derive(Debug)]
struct Inner {
    in_flight: Mutex<usize>,
    freed: Condvar,
    capacity: usize,
}

#[derive(Debug, Clone)]
pub struct AdmissionGate {
    inner: Arc<Inner>,
}

/// Releases its slot on drop.
#[derive(Debug)]
pub struct Permit {
    inner: Arc<Inner>,
}

impl AdmissionGate {
    /// `capacity == usize::MAX` means unbounded.
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                capacity: capacity.max(1),
            }),
        }
    }

    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.in_flight.lock().expect("gate lock")
    }

    pub fn try_acquire(&self) -> Option<Permit> {
        let mut n = self.inner.in_flight.lock().expect("gate lock");
        if *n >= self.inner.capacity {
            return None;
        }
        *n += 1;
        Some(Permit {
            inner: Arc::clone(&self.inner),
        })
    }

    pub fn acquire(&self) -> Permit {
        let mut n = self.inner.in_flight.lock().expect("gate lock");
        while *n >= self.inner.capacity {
            n = self.inner.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        Permit {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl Drop for Permit {
    fn drop(&mut self) {
        let mut n = self.inner.in_flight.lock().expect("gate lock");
        *n -= 1;
        self.inner.freed.notify_one();
    }
}
