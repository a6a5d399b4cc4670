//! Pipeline orchestration for the `xfer` command: configuration, synthetic
//! data, run directories with checksummed manifests, and one function per
//! pipeline stage.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod synth;

pub use config::{LoadedConfig, RunConfig};
pub use error::{CliError, ErrorKind};
pub use run::Run;

/// Seeds selected by `--seed` / `--seeds`: an explicit seed, the first `k`
/// configured seeds (continuing past the list's maximum when it is too
/// short), or every configured seed.
pub fn select_seeds(configured: &[u64], seed: Option<u64>, k: Option<usize>) -> Result<Vec<u64>, CliError> {
    match (seed, k) {
        (Some(_), Some(_)) => Err(CliError::validation("--seed and --seeds are mutually exclusive")),
        (Some(s), None) => Ok(vec![s]),
        (None, Some(0)) => Err(CliError::validation("--seeds must be >= 1")),
        (None, Some(k)) => {
            let mut out: Vec<u64> = configured.iter().copied().take(k).collect();
            let mut next = configured.iter().max().map_or(0, |m| m + 1);
            while out.len() < k {
                out.push(next);
                next += 1;
            }
            Ok(out)
        }
        (None, None) => Ok(configured.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_selection() {
        assert_eq!(select_seeds(&[3, 4], None, None).unwrap(), vec![3, 4]);
        assert_eq!(select_seeds(&[3, 4], Some(9), None).unwrap(), vec![9]);
        assert_eq!(select_seeds(&[3, 4], None, Some(1)).unwrap(), vec![3]);
        assert_eq!(select_seeds(&[3, 4], None, Some(4)).unwrap(), vec![3, 4, 5, 6]);
        assert!(select_seeds(&[0], Some(1), Some(1)).is_err());
    }
}
