//! Sequential or rayon-backed execution of independent work items.
//!
//! With the `parallel` feature disabled every policy runs sequentially, so
//! callers never need their own `cfg` switches.

/// How a batch of independent items is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    #[default]
    Sequential,
    /// Run on a dedicated pool of `threads` workers (`0` = rayon's global pool).
    Parallel { threads: usize },
}

impl ExecPolicy {
    /// `1` means sequential; anything larger bounds the worker count.
    pub fn from_concurrency(limit: usize) -> Self {
        if limit <= 1 {
            ExecPolicy::Sequential
        } else {
            ExecPolicy::Parallel { threads: limit }
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, ExecPolicy::Parallel { .. })
    }

    /// Maps `f` over `items`, preserving input order in the output.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            ExecPolicy::Sequential => items.iter().map(f).collect(),
            ExecPolicy::Parallel { threads } => par_map(items, f, *threads),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F, threads: usize) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if threads == 0 {
        return items.par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("falling back to sequential execution: {e}");
            items.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F, _threads: usize) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_under_every_policy() {
        let items: Vec<u64> = (0..1000).collect();
        for policy in [ExecPolicy::Sequential, ExecPolicy::Parallel { threads: 4 }, ExecPolicy::Parallel { threads: 0 }] {
            let out = policy.map(&items, |x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn concurrency_one_is_sequential() {
        assert_eq!(ExecPolicy::from_concurrency(1), ExecPolicy::Sequential);
        assert_eq!(ExecPolicy::from_concurrency(0), ExecPolicy::Sequential);
        assert_eq!(ExecPolicy::from_concurrency(3), ExecPolicy::Parallel { threads: 3 });
    }
}
