//! Pharmacy registry with radius and nearest-k queries.
//!
//! Queries are a linear scan over the current snapshot. Results are ordered
//! by distance, ties by pharmacy id, and only registered pharmacies appear.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{haversine_distance, DomainError, GeoPoint, Pharmacy, PharmacyId};
use crate::records::records;

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("pharmacy {0} is already registered with different details")]
    Conflict(PharmacyId),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Nearby {
    pub pharmacy: Pharmacy,
    pub distance_km: f64,
}

/// Immutable view of the registry at one version.
#[derive(Debug, Clone, Default)]
pub struct RegistrySnapshot {
    pharmacies: BTreeMap<PharmacyId, Pharmacy>,
    version: u64,
}

impl RegistrySnapshot {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.pharmacies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pharmacies.is_empty()
    }

    pub fn get(&self, id: &PharmacyId) -> Option<&Pharmacy> {
        self.pharmacies.get(id)
    }

    pub fn pharmacies(&self) -> impl Iterator<Item = &Pharmacy> {
        self.pharmacies.values()
    }

    /// Returns a new snapshot containing `p`. Re-registering identical details is a no-op
    /// that leaves the version untouched.
    pub fn with_pharmacy(&self, p: Pharmacy) -> Result<Self, RegistryError> {
        match self.pharmacies.get(&p.id) {
            Some(existing) if *existing == p => Ok(self.clone()),
            Some(_) => Err(RegistryError::Conflict(p.id)),
            None => {
                let mut next = self.clone();
                next.pharmacies.insert(p.id.clone(), p);
                next.version += 1;
                Ok(next)
            }
        }
    }

    fn ranked(&self, origin: GeoPoint) -> Vec<Nearby> {
        let mut out: Vec<Nearby> = self
            .pharmacies
            .values()
            .filter(|p| p.registered)
            .map(|p| Nearby {
                distance_km: haversine_distance(origin, p.location),
                pharmacy: p.clone(),
            })
            .collect();
        out.sort_by(|a, b| {
            a.distance_km
                .total_cmp(&b.distance_km)
                .then_with(|| a.pharmacy.id.cmp(&b.pharmacy.id))
        });
        out
    }

    /// Registered pharmacies with distance ≤ `radius_km` (inclusive).
    pub fn within_radius(&self, origin: GeoPoint, radius_km: f64) -> Vec<Nearby> {
        let mut ranked = self.ranked(origin);
        ranked.retain(|n| n.distance_km <= radius_km);
        ranked
    }

    pub fn nearest(&self, origin: GeoPoint, k: usize) -> Vec<Nearby> {
        let mut ranked = self.ranked(origin);
        ranked.truncate(k);
        ranked
    }
}

/// Shared registry: many readers, serialized writers. Readers hold an `Arc` to a
/// snapshot, so a mutation never tears an in-flight query.
#[derive(Debug, Default)]
pub struct GeoRegistry {
    current: RwLock<Arc<RegistrySnapshot>>,
}

impl GeoRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pharmacies(
        pharmacies: impl IntoIterator<Item = Pharmacy>,
    ) -> Result<Self, RegistryError> {
        let reg = Self::new();
        for p in pharmacies {
            reg.register_pharmacy(p)?;
        }
        Ok(reg)
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        self.current.read().expect("registry lock poisoned").clone()
    }

    pub fn register_pharmacy(&self, p: Pharmacy) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        let mut guard = self.current.write().expect("registry lock poisoned");
        let next = Arc::new(guard.with_pharmacy(p)?);
        *guard = next.clone();
        Ok(next)
    }

    pub fn within_radius(&self, origin: GeoPoint, radius_km: f64) -> Vec<Nearby> {
        self.snapshot().within_radius(origin, radius_km)
    }

    pub fn nearest(&self, origin: GeoPoint, k: usize) -> Vec<Nearby> {
        self.snapshot().nearest(origin, k)
    }
}

#[derive(Debug, Deserialize)]
struct SeedRecord {
    id: String,
    name: String,
    latitude: f64,
    longitude: f64,
    contact: String,
    registered: String,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Parses a pharmacy seed file: comma-separated `id,name,latitude,longitude,contact,registered`,
/// no header, `#` starts a comment line.
pub fn parse_pharmacy_seed(text: &str) -> Result<Vec<Pharmacy>, RegistryError> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for rec in records::<SeedRecord>(text) {
        let (line, raw) = rec.map_err(|e| RegistryError::Parse {
            line: e.line,
            message: e.message,
        })?;
        let err = |message: String| RegistryError::Parse { line, message };
        if raw.id.is_empty() {
            return Err(err("empty pharmacy id".into()));
        }
        let location = GeoPoint::new(raw.latitude, raw.longitude)
            .map_err(|e: DomainError| err(format!("pharmacy {}: {e}", raw.id)))?;
        let registered = parse_flag(&raw.registered)
            .ok_or_else(|| err(format!("registered flag {:?} is not a boolean", raw.registered)))?;
        if let Some(first) = seen.insert(raw.id.clone(), line) {
            return Err(err(format!("duplicate pharmacy id {} (first on line {first})", raw.id)));
        }
        out.push(Pharmacy {
            id: PharmacyId(raw.id),
            name: raw.name,
            location,
            contact: raw.contact,
            registered,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_pharmacy_seed`].
pub fn format_pharmacy_seed(pharmacies: &[Pharmacy]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        // Quoting every field keeps a leading `#` or unusual whitespace from
        // changing meaning when the file is read back.
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(Vec::new());
    for p in pharmacies {
        w.write_record([
            p.id.as_str(),
            &p.name,
            &p.location.lat().to_string(),
            &p.location.lon().to_string(),
            &p.contact,
            if p.registered { "true" } else { "false" },
        ])
        .expect("writing to a Vec cannot fail");
    }
    String::from_utf8(w.into_inner().expect("flush to Vec")).expect("csv output is utf-8")
}
