//! Entity types shared by every module: identifiers, locations, medicines,
//! prescriptions, pharmacies and pharmacist responses.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

/// Mean Earth radius used for every distance computation.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Catalog identifier of a medicine.
    MedicineId
);
string_id!(PharmacyId);
string_id!(PrescriptionId);
string_id!(RequestId);
string_id!(
    /// A patient or pharmacist principal.
    UserId
);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("medicine name must not be empty (id {0})")]
    EmptyMedicineName(MedicineId),
    #[error("quantity for {0} must be at least 1")]
    ZeroQuantity(MedicineId),
    #[error("prescription has no lines")]
    EmptyPrescription,
    #[error("medicine {0} appears on more than one line")]
    DuplicateLine(MedicineId),
    #[error("medicine {0} was not part of the request")]
    UnrequestedMedicine(MedicineId),
    #[error("verdict {verdict} does not match the available set")]
    VerdictMismatch { verdict: Verdict },
}

/// A validated WGS84-style coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, DomainError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(DomainError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(DomainError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(d)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

/// Great-circle distance in kilometres on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // rounding can push h a hair above 1 for antipodal points
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Medicine {
    pub id: MedicineId,
    pub name: String,
    pub dosage: String,
    pub package: String,
}

impl Medicine {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.name.trim().is_empty() {
            return Err(DomainError::EmptyMedicineName(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrescriptionLine {
    pub medicine_id: MedicineId,
    pub quantity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrescriptionStatus {
    Draft,
    Submitted,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prescription {
    pub id: PrescriptionId,
    pub patient_id: UserId,
    pub lines: Vec<PrescriptionLine>,
    pub status: PrescriptionStatus,
}

impl Prescription {
    /// Builds a submitted prescription, rejecting empty or duplicated lines.
    pub fn submitted(
        id: PrescriptionId,
        patient_id: UserId,
        lines: Vec<PrescriptionLine>,
    ) -> Result<Self, DomainError> {
        let p = Self {
            id,
            patient_id,
            lines,
            status: PrescriptionStatus::Submitted,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.status == PrescriptionStatus::Submitted && self.lines.is_empty() {
            return Err(DomainError::EmptyPrescription);
        }
        let mut seen = BTreeSet::new();
        for line in &self.lines {
            if line.quantity == 0 {
                return Err(DomainError::ZeroQuantity(line.medicine_id.clone()));
            }
            if !seen.insert(&line.medicine_id) {
                return Err(DomainError::DuplicateLine(line.medicine_id.clone()));
            }
        }
        Ok(())
    }

    pub fn medicine_ids(&self) -> BTreeSet<MedicineId> {
        self.lines.iter().map(|l| l.medicine_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pharmacy {
    pub id: PharmacyId,
    pub name: String,
    pub location: GeoPoint,
    pub contact: String,
    pub registered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    None,
    Partial,
    Full,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Full => "full",
            Verdict::Partial => "partial",
            Verdict::None => "none",
        })
    }
}

/// Classifies a pharmacist's checkbox selection against the requested set.
pub fn classify_response(
    requested: &BTreeSet<MedicineId>,
    available: &BTreeSet<MedicineId>,
) -> Result<Verdict, DomainError> {
    if let Some(stray) = available.difference(requested).next() {
        return Err(DomainError::UnrequestedMedicine(stray.clone()));
    }
    Ok(if available.is_empty() {
        Verdict::None
    } else if available.len() == requested.len() {
        Verdict::Full
    } else {
        Verdict::Partial
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PharmacyResponse {
    pub request_id: RequestId,
    pub pharmacy_id: PharmacyId,
    pub verdict: Verdict,
    pub available_medicine_ids: BTreeSet<MedicineId>,
    pub responded_at: Timestamp,
}

impl PharmacyResponse {
    /// Builds a response from the checkbox form, deriving the verdict.
    pub fn from_available(
        request_id: RequestId,
        pharmacy_id: PharmacyId,
        requested: &BTreeSet<MedicineId>,
        available: BTreeSet<MedicineId>,
        responded_at: Timestamp,
    ) -> Result<Self, DomainError> {
        let verdict = classify_response(requested, &available)?;
        Ok(Self {
            request_id,
            pharmacy_id,
            verdict,
            available_medicine_ids: available,
            responded_at,
        })
    }

    /// Builds a quick-button response: `Full` covers every requested medicine, `None` is empty.
    pub fn quick(
        request_id: RequestId,
        pharmacy_id: PharmacyId,
        requested: &BTreeSet<MedicineId>,
        verdict: Verdict,
        responded_at: Timestamp,
    ) -> Result<Self, DomainError> {
        let available = match verdict {
            Verdict::Full => requested.clone(),
            Verdict::None => BTreeSet::new(),
            Verdict::Partial => return Err(DomainError::VerdictMismatch { verdict }),
        };
        Self::from_available(request_id, pharmacy_id, requested, available, responded_at)
    }

    /// Checks the verdict/available-set agreement against the requested set.
    pub fn validate(&self, requested: &BTreeSet<MedicineId>) -> Result<(), DomainError> {
        let derived = classify_response(requested, &self.available_medicine_ids)?;
        if derived != self.verdict {
            return Err(DomainError::VerdictMismatch {
                verdict: self.verdict,
            });
        }
        Ok(())
    }
}
