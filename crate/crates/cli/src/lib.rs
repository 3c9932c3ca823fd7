//! Commands behind the `hydra-na` binary. Each module returns data and
//! [`CliError`]s; the binary only parses flags and maps errors to exit codes.

pub mod bench;
pub mod configs;
mod error;
pub mod frechet;
pub mod gradsuite;
pub mod rollout;
pub mod toy;

pub use error::CliError;

/// Runs `f` on a dedicated rayon pool of `threads` workers, or the default
/// size (one per core) when `None`.
pub fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Failure(format!("cannot start thread pool: {e}")))?;
    Ok(pool.install(f))
}
