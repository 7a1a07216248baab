//! Tiny scoped worker pool. Work is distributed over indices but results are
//! always assembled in input order, so output never depends on thread count.
//! `ESUPP_THREADS` caps the pool.

use std::sync::atomic::{AtomicUsize, Ordering};

pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    cap_workers(available, std::env::var("ESUPP_THREADS").ok().as_deref())
}

fn cap_workers(available: usize, env: Option<&str>) -> usize {
    let cap = env.and_then(|s| s.trim().parse::<usize>().ok()).unwrap_or(usize::MAX);
    available.min(cap).max(1)
}

pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = worker_count().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    {
        let chunks = split_slots(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let out = f(i, &items[i]);
                    // each index is claimed exactly once
                    unsafe { chunks.write(i, out) };
                });
            }
        });
    }
    slots.into_iter().map(|s| s.expect("every index was processed")).collect()
}

/// Shared mutable access to disjoint slots, each written by exactly one claimant.
struct SlotWriter<R> {
    ptr: *mut Option<R>,
}

unsafe impl<R: Send> Sync for SlotWriter<R> {}

impl<R> SlotWriter<R> {
    /// Caller must hold the unique claim on index `i`; the slot starts `None`
    /// so the overwrite drops nothing.
    unsafe fn write(&self, i: usize, value: R) {
        unsafe { self.ptr.add(i).write(Some(value)) };
    }
}

fn split_slots<R>(slots: &mut [Option<R>]) -> SlotWriter<R> {
    SlotWriter { ptr: slots.as_mut_ptr() }
}
