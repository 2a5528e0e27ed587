use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use warp_core::fewshot::Runner;

/// Runs jobs on a fixed number of scoped threads. Each job's result lands
/// in its own slot, so the output order (and content) does not depend on
/// scheduling.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self { threads: threads.max(1) }
    }

    /// One thread per available core.
    pub fn available() -> Self {
        Self::new(std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

impl Runner for Threaded {
    fn run_all<R: Send>(&self, n: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        if self.threads == 1 || n <= 1 {
            return (0..n).map(job).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.threads.min(n) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let r = job(i);
                    *slots[i].lock().expect("no job panicked while holding a slot") = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every job ran")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_job_order() {
        for threads in [1, 3, 8] {
            let out = Threaded::new(threads).run_all(20, &|i| i * i);
            assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(Threaded::new(4).run_all(0, &|i| i).is_empty());
    }
}
