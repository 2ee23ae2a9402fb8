//! Thread-local recycling of large value buffers.
//!
//! Full-batch training allocates and frees the same handful of very large
//! buffers every epoch; returning them to the OS each time costs a page-fault
//! storm on the next pass. [`PoolVec`] parks big retired buffers in a
//! thread-local pool keyed by capacity and hands them back on the next
//! matching request. Small buffers bypass the pool entirely.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

/// Buffers below this many elements go straight to the system allocator.
const MIN_POOLED_LEN: usize = 1 << 17;
/// Upper bound on parked memory per thread.
const MAX_POOLED_BYTES: usize = 4 << 30;

#[derive(Default)]
struct Pool {
    buckets: BTreeMap<usize, Vec<Vec<f64>>>,
    held_bytes: usize,
}

thread_local! {
    static POOL: RefCell<Pool> = RefCell::new(Pool::default());
}

/// A `Vec<f64>` whose backing allocation returns to the thread-local pool on
/// drop (when large enough and the pool has room).
pub struct PoolVec {
    inner: Vec<f64>,
}

impl PoolVec {
    fn acquire(capacity: usize) -> Vec<f64> {
        if capacity < MIN_POOLED_LEN {
            return Vec::with_capacity(capacity);
        }
        POOL.with(|pool| {
            let mut pool = pool.borrow_mut();
            if let Some(bucket) = pool.buckets.get_mut(&capacity) {
                if let Some(mut v) = bucket.pop() {
                    pool.held_bytes -= capacity * 8;
                    v.clear();
                    return v;
                }
            }
            Vec::with_capacity(capacity)
        })
    }

    /// Empty buffer with at least the given capacity, for append-style fills.
    pub fn with_capacity(capacity: usize) -> Self {
        PoolVec { inner: Self::acquire(capacity) }
    }

    /// Zero-filled buffer of the given length.
    pub fn zeroed(len: usize) -> Self {
        let mut v = Self::acquire(len);
        v.resize(len, 0.0);
        PoolVec { inner: v }
    }

    pub fn from_vec(inner: Vec<f64>) -> Self {
        PoolVec { inner }
    }

    pub fn take(mut self) -> Vec<f64> {
        std::mem::take(&mut self.inner)
    }
}

impl From<Vec<f64>> for PoolVec {
    fn from(inner: Vec<f64>) -> Self {
        PoolVec { inner }
    }
}

impl Deref for PoolVec {
    type Target = Vec<f64>;

    fn deref(&self) -> &Vec<f64> {
        &self.inner
    }
}

impl DerefMut for PoolVec {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.inner
    }
}

impl Drop for PoolVec {
    fn drop(&mut self) {
        let capacity = self.inner.capacity();
        if capacity < MIN_POOLED_LEN {
            return;
        }
        let retired = std::mem::take(&mut self.inner);
        POOL.with(|pool| {
            let mut pool = pool.borrow_mut();
            if pool.held_bytes + capacity * 8 <= MAX_POOLED_BYTES {
                pool.held_bytes += capacity * 8;
                pool.buckets.entry(capacity).or_default().push(retired);
            }
            // Otherwise let it free normally.
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_buffers_are_recycled() {
        let len = MIN_POOLED_LEN;
        let ptr = {
            let v = PoolVec::zeroed(len);
            v.as_ptr() as usize
        };
        let again = PoolVec::zeroed(len);
        assert_eq!(again.as_ptr() as usize, ptr);
        assert!(again.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn small_buffers_bypass_the_pool() {
        let v = PoolVec::zeroed(8);
        assert_eq!(v.len(), 8);
        drop(v);
        POOL.with(|pool| {
            assert!(pool.borrow().buckets.get(&8).is_none());
        });
    }
}
