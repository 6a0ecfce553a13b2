//! Static bearer-token table.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PharmacyId, UserId};
use crate::records::records;
use crate::store::{Entity, EntityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patient,
    Pharmacist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub token: String,
    pub principal: String,
    pub role: Role,
}

impl Entity for UserRecord {
    const KIND: EntityKind = EntityKind::Users;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiSession {
    pub token: String,
    pub principal: UserId,
    pub role: Role,
}

impl ApiSession {
    /// The pharmacy a pharmacist session acts for.
    pub fn pharmacy_id(&self) -> Option<PharmacyId> {
        (self.role == Role::Pharmacist).then(|| PharmacyId(self.principal.0.clone()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AuthError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    sessions: HashMap<String, ApiSession>,
}

impl TokenTable {
    pub fn new(records: &[UserRecord]) -> Self {
        let sessions = records
            .iter()
            .map(|r| {
                (
                    r.token.clone(),
                    ApiSession {
                        token: r.token.clone(),
                        principal: UserId(r.principal.clone()),
                        role: r.role,
                    },
                )
            })
            .collect();
        Self { sessions }
    }

    pub fn authenticate(&self, token: &str) -> Option<&ApiSession> {
        self.sessions.get(token)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct TokenLine {
    token: String,
    role: Role,
    principal: String,
}

/// Parses `token,role,principal` lines (no header, `#` comments). Tokens must be unique.
pub fn parse_token_table(text: &str) -> Result<Vec<UserRecord>, AuthError> {
    let mut out: Vec<UserRecord> = Vec::new();
    for rec in records::<TokenLine>(text) {
        let (line, raw) = rec.map_err(|e| AuthError::Parse {
            line: e.line,
            message: e.message,
        })?;
        let err = |message: String| AuthError::Parse { line, message };
        if raw.token.is_empty() || raw.principal.is_empty() {
            return Err(err("token and principal must not be empty".into()));
        }
        if out.iter().any(|u| u.token == raw.token) {
            return Err(err("duplicate token".into()));
        }
        out.push(UserRecord {
            token: raw.token,
            principal: raw.principal,
            role: raw.role,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_authenticate() {
        let recs = parse_token_table("# token,role,principal\npt-alice,patient,alice\nph-p1,pharmacist,P1\n")
            .unwrap();
        let table = TokenTable::new(&recs);
        let alice = table.authenticate("pt-alice").unwrap();
        assert_eq!(alice.role, Role::Patient);
        assert_eq!(alice.pharmacy_id(), None);
        let p1 = table.authenticate("ph-p1").unwrap();
        assert_eq!(p1.pharmacy_id(), Some("P1".into()));
        assert!(table.authenticate("nope").is_none());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            parse_token_table("a,admin,x\n"),
            Err(AuthError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_token_table("a,patient,x\na,patient,y\n"),
            Err(AuthError::Parse { line: 2, .. })
        ));
        assert!(parse_token_table("a,patient\n").is_err());
    }
}
