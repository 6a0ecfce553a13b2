//! Loading the seed files a server starts from.

use std::path::{Path, PathBuf};

use pharmafind_core::auth::{parse_token_table, AuthError};
use pharmafind_core::catalog::{load_catalog, CatalogError};
use pharmafind_core::geo::{parse_pharmacy_seed, RegistryError};
use pharmafind_core::Seed;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Catalog { path: PathBuf, source: CatalogError },
    #[error("{path}: {source}")]
    Pharmacies { path: PathBuf, source: RegistryError },
    #[error("{path}: {source}")]
    Tokens { path: PathBuf, source: AuthError },
}

fn read(path: &Path) -> Result<String, WorldError> {
    std::fs::read_to_string(path).map_err(|source| WorldError::Read {
        path: path.to_owned(),
        source,
    })
}

/// Paths of the three seed files; any of them may be absent.
#[derive(Debug, Clone, Default)]
pub struct SeedFiles {
    pub catalog: Option<PathBuf>,
    pub pharmacies: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
}

impl SeedFiles {
    pub fn load(&self) -> Result<Seed, WorldError> {
        let mut seed = Seed::default();
        if let Some(path) = &self.catalog {
            seed.medicines = load_catalog(&read(path)?)
                .map_err(|source| WorldError::Catalog {
                    path: path.clone(),
                    source,
                })?
                .medicines()
                .to_vec();
        }
        if let Some(path) = &self.pharmacies {
            seed.pharmacies = parse_pharmacy_seed(&read(path)?).map_err(|source| WorldError::Pharmacies {
                path: path.clone(),
                source,
            })?;
        }
        if let Some(path) = &self.tokens {
            seed.users = parse_token_table(&read(path)?).map_err(|source| WorldError::Tokens {
                path: path.clone(),
                source,
            })?;
        }
        Ok(seed)
    }
}
