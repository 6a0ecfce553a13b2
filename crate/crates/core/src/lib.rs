//! Core of the pharmafind medicine-availability broker.
//!
//! Patients submit prescriptions; an availability request is fanned out to
//! registered pharmacies near the patient and widened on timeout until a
//! pharmacy answers with the full prescription, the round settles on a partial
//! answer, or the search radius reaches its cap. The [`stats`] module holds the
//! chi-square and tabulation routines used to analyse the survey counts
//! shipped in `fixtures/`.

pub mod auth;
pub mod broker;
pub mod catalog;
pub mod clock;
pub mod domain;
pub mod engine;
pub mod geo;
pub mod notifier;
mod records;
pub mod stats;
pub mod store;

pub use broker::{Broker, BrokerError, ConfigOverrides, ResponseForm, Seed};
pub use domain::{
    classify_response, haversine_distance, GeoPoint, Medicine, MedicineId, Pharmacy, PharmacyId,
    PharmacyResponse, Prescription, PrescriptionId, PrescriptionLine, RequestId, UserId, Verdict,
};
pub use engine::{AvailabilityRequest, RequestConfig, RequestState};
