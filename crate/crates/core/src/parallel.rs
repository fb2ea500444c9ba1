//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature and more than one thread, items run on a
//! dedicated rayon pool; otherwise they run in order on the calling thread.
//! Either way results come back in input order, and callers only reduce them
//! sequentially, so outputs do not depend on the thread count.

#[cfg(feature = "parallel")]
use std::sync::Arc;

use crate::error::{FclError, Result};

#[derive(Clone)]
pub struct Parallelism {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parallelism")
            .field("threads", &self.threads)
            .finish()
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::sequential()
    }
}

impl Parallelism {
    pub fn sequential() -> Self {
        Parallelism {
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(FclError::config("threads", "must be ≥ 1"));
        }
        if threads == 1 {
            return Ok(Parallelism::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .thread_name(|i| format!("fedcl-worker-{i}"))
                .build()
                .map_err(|e| FclError::config("threads", e.to_string()))?;
            Ok(Parallelism {
                threads,
                pool: Some(Arc::new(pool)),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::warn!("built without the `parallel` feature; running {threads}-thread request sequentially");
            Ok(Parallelism { threads: 1 })
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter_mut().map(&f).collect());
        }
        items.iter_mut().map(f).collect()
    }
}
