//! Deterministic in-process parallel map over independent tasks.
//!
//! Used for the per-choice subproblems of one distributed step and for
//! bootstrap or Monte-Carlo replicates. Results always come back in task
//! order, so the output never depends on the worker count.

use rayon::prelude::*;

use crate::error::{IdmrError, Result};

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "IDMR_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutorConfig {
    pub worker_count: usize,
    /// Minimum number of tasks handed to a worker at once.
    pub chunking: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            worker_count: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            chunking: 1,
        }
    }
}

impl ExecutorConfig {
    pub fn with_workers(worker_count: usize) -> Self {
        Self {
            worker_count,
            chunking: 1,
        }
    }

    /// Applies `IDMR_THREADS` when set; an invalid value is an error.
    pub fn from_env_or(self) -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Ok(raw) => {
                let workers = parse_threads(&raw)?;
                Ok(Self {
                    worker_count: workers,
                    ..self
                })
            }
            Err(_) => Ok(self),
        }
    }
}

pub fn parse_threads(raw: &str) -> Result<usize> {
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(IdmrError::InvalidInput(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))),
    }
}

/// Owns a worker pool. A single worker runs everything on the caller's thread.
pub struct Executor {
    config: ExecutorConfig,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("config", &self.config)
            .finish()
    }
}

impl Executor {
    pub fn new(config: ExecutorConfig) -> Result<Self> {
        if config.worker_count == 0 {
            return Err(IdmrError::InvalidInput(
                "worker_count must be at least 1".into(),
            ));
        }
        let pool = if config.worker_count > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.worker_count)
                    .thread_name(|i| format!("idmr-worker-{i}"))
                    .build()
                    .map_err(|e| IdmrError::InvalidInput(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { config, pool })
    }

    pub fn sequential() -> Self {
        Self {
            config: ExecutorConfig::with_workers(1),
            pool: None,
        }
    }

    pub fn config(&self) -> ExecutorConfig {
        self.config
    }

    pub fn worker_count(&self) -> usize {
        self.config.worker_count
    }

    /// Applies `f` to every task. `results[i] == f(&tasks[i])`; on failure the
    /// error of the lowest failing task index is returned. Calls made from
    /// inside a worker run inline on that worker.
    pub fn parallel_map<T, R, E, F>(&self, tasks: &[T], f: F) -> std::result::Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> std::result::Result<R, E> + Sync + Send,
    {
        let nested = rayon::current_thread_index().is_some();
        match &self.pool {
            Some(pool) if !nested && tasks.len() > 1 => {
                let min_len = self.config.chunking.max(1);
                let results: Vec<std::result::Result<R, E>> =
                    pool.install(|| tasks.par_iter().with_min_len(min_len).map(&f).collect());
                results.into_iter().collect()
            }
            _ => tasks.iter().map(f).collect(),
        }
    }

    /// `parallel_map` over the indices `0..count`.
    pub fn map_indices<R, E, F>(&self, count: usize, f: F) -> std::result::Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> std::result::Result<R, E> + Sync + Send,
    {
        let tasks: Vec<usize> = (0..count).collect();
        self.parallel_map(&tasks, |&i| f(i))
    }
}
