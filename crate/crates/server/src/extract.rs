//! Request extractors: bearer-token sessions and JSON/query parsing that
//! reports malformed input as 400 in the common error shape.

use axum::extract::{FromRequest, FromRequestParts, Query, Request};
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::Json;
use pharmafind_core::auth::{ApiSession, Role};
use pharmafind_core::{PharmacyId, UserId};
use serde::de::DeserializeOwned;

use crate::error::ApiError;
use crate::AppState;

/// Any authenticated caller.
pub struct Session(pub ApiSession);

pub struct Patient(pub UserId);

pub struct Pharmacist(pub PharmacyId);

fn bearer(parts: &Parts) -> Option<&str> {
    let value = parts.headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

impl FromRequestParts<AppState> for Session {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let token = bearer(parts).ok_or(ApiError::Unauthorized)?;
        state
            .broker
            .tokens()
            .authenticate(token)
            .cloned()
            .map(Session)
            .ok_or(ApiError::Unauthorized)
    }
}

impl FromRequestParts<AppState> for Patient {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let Session(s) = Session::from_request_parts(parts, state).await?;
        match s.role {
            Role::Patient => Ok(Patient(s.principal)),
            Role::Pharmacist => Err(ApiError::Forbidden("patient token required".into())),
        }
    }
}

impl FromRequestParts<AppState> for Pharmacist {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let Session(s) = Session::from_request_parts(parts, state).await?;
        s.pharmacy_id()
            .map(Pharmacist)
            .ok_or_else(|| ApiError::Forbidden("pharmacist token required".into()))
    }
}

/// JSON body; any rejection becomes a 400.
pub struct Body<T>(pub T);

impl<T, S> FromRequest<S> for Body<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e| ApiError::BadRequest(e.body_text()))
    }
}

/// Query string; any rejection becomes a 400.
pub struct Params<T>(pub T);

impl<T, S> FromRequestParts<S> for Params<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| Params(v))
            .map_err(|e| ApiError::BadRequest(e.body_text()))
    }
}
