//! Read-only medicine catalog with case-insensitive prefix autocomplete.

use std::collections::HashMap;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{Medicine, MedicineId};
use crate::records::records;

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: duplicate medicine id {id} (first on line {first})")]
    DuplicateId { line: u64, id: MedicineId, first: u64 },
}

impl CatalogError {
    pub fn line(&self) -> u64 {
        match self {
            CatalogError::Parse { line, .. } | CatalogError::DuplicateId { line, .. } => *line,
        }
    }
}

/// Lowercases with Unicode case mapping; no accent stripping.
pub fn fold(s: &str) -> String {
    s.to_lowercase()
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    /// Ordered by (name, id); this is the autocomplete output order.
    medicines: Vec<Medicine>,
    by_id: HashMap<MedicineId, usize>,
    /// (folded name, position in `medicines`), sorted by folded name for range scans.
    index: Vec<(String, usize)>,
}

impl Catalog {
    pub fn new(medicines: Vec<Medicine>) -> Result<Self, CatalogError> {
        let mut first_seen: HashMap<MedicineId, u64> = HashMap::new();
        for (i, m) in medicines.iter().enumerate() {
            let line = i as u64 + 1;
            m.validate().map_err(|e| CatalogError::Parse {
                line,
                message: e.to_string(),
            })?;
            if let Some(first) = first_seen.insert(m.id.clone(), line) {
                return Err(CatalogError::DuplicateId {
                    line,
                    id: m.id.clone(),
                    first,
                });
            }
        }
        Ok(Self::build(medicines))
    }

    fn build(mut medicines: Vec<Medicine>) -> Self {
        medicines.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| a.id.cmp(&b.id)));
        let by_id = medicines
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), i))
            .collect();
        let mut index: Vec<(String, usize)> = medicines
            .iter()
            .enumerate()
            .map(|(i, m)| (fold(&m.name), i))
            .collect();
        index.sort();
        Self {
            medicines,
            by_id,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.medicines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.medicines.is_empty()
    }

    pub fn get(&self, id: &MedicineId) -> Option<&Medicine> {
        self.by_id.get(id).map(|&i| &self.medicines[i])
    }

    pub fn contains(&self, id: &MedicineId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn medicines(&self) -> &[Medicine] {
        &self.medicines
    }

    /// Medicines whose name starts with `prefix` (case-insensitive), ordered by name then id,
    /// at most `limit` of them. A zero limit yields nothing.
    pub fn autocomplete(&self, prefix: &str, limit: usize) -> Vec<Medicine> {
        if prefix.is_empty() {
            return self.medicines.iter().take(limit).cloned().collect();
        }
        let key = fold(prefix);
        let start = self.index.partition_point(|(name, _)| name.as_str() < key.as_str());
        let mut hits: Vec<usize> = self.index[start..]
            .iter()
            .take_while(|(name, _)| name.starts_with(&key))
            .map(|&(_, i)| i)
            .collect();
        hits.sort_unstable();
        hits.into_iter()
            .take(limit)
            .map(|i| self.medicines[i].clone())
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct MedicineRecord {
    id: String,
    name: String,
    dosage: String,
    package: String,
}

/// Parses a medicine file: UTF-8, comma-separated `id,name,dosage,package`, no header,
/// `#` starts a comment line. Errors carry the physical line number.
pub fn load_catalog(text: &str) -> Result<Catalog, CatalogError> {
    let mut medicines = Vec::new();
    let mut first_seen: HashMap<String, u64> = HashMap::new();
    for rec in records::<MedicineRecord>(text) {
        let (line, raw) = rec.map_err(|e| CatalogError::Parse {
            line: e.line,
            message: e.message,
        })?;
        if raw.id.is_empty() {
            return Err(CatalogError::Parse {
                line,
                message: "empty medicine id".into(),
            });
        }
        if let Some(first) = first_seen.insert(raw.id.clone(), line) {
            return Err(CatalogError::DuplicateId {
                line,
                id: MedicineId(raw.id),
                first,
            });
        }
        let m = Medicine {
            id: MedicineId(raw.id),
            name: raw.name,
            dosage: raw.dosage,
            package: raw.package,
        };
        m.validate().map_err(|e| CatalogError::Parse {
            line,
            message: e.to_string(),
        })?;
        medicines.push(m);
    }
    Ok(Catalog::build(medicines))
}

pub fn format_catalog(medicines: &[Medicine]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        // Quoting every field keeps a leading `#` or unusual whitespace from
        // changing meaning when the file is read back.
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(Vec::new());
    for m in medicines {
        w.write_record([m.id.as_str(), &m.name, &m.dosage, &m.package])
            .expect("writing to a Vec cannot fail");
    }
    String::from_utf8(w.into_inner().expect("flush to Vec")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn med(id: &str, name: &str) -> Medicine {
        Medicine {
            id: id.into(),
            name: name.into(),
            dosage: "500 mg".into(),
            package: "20 tablets".into(),
        }
    }

    fn names(ms: &[Medicine]) -> Vec<&str> {
        ms.iter().map(|m| m.name.as_str()).collect()
    }

    #[test]
    fn empty_file_is_empty_catalog() {
        let c = load_catalog("").unwrap();
        assert_eq!(c.len(), 0);
        assert!(c.autocomplete("", 10).is_empty());
    }

    #[test]
    fn three_records() {
        let c = load_catalog("M1,Paracetamol,500 mg,20\nM2,Parafon,250 mg,10\nM3,Ibuprofen,400 mg,20\n")
            .unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(names(&c.autocomplete("para", 10)), ["Paracetamol", "Parafon"]);
        assert!(c.autocomplete("zzz", 10).is_empty());
        assert_eq!(names(&c.autocomplete("PARA", 1)), ["Paracetamol"]);
    }

    #[test]
    fn duplicate_id_names_the_line() {
        let text = "# medicines\n\
                    M1,A,x,y\n\
                    M2,B,x,y\n\
                    M3,C,x,y\n\
                    M4,D,x,y\n\
                    M5,E,x,y\n\
                    M1,F,x,y\n";
        let err = load_catalog(text).unwrap_err();
        assert_eq!(err.line(), 7);
        assert!(err.to_string().contains("line 7"), "{err}");
    }

    #[test]
    fn malformed_rows() {
        assert_eq!(load_catalog("M1,A,x\n").unwrap_err().line(), 1);
        assert!(matches!(load_catalog("M1,,x,y\n"), Err(CatalogError::Parse { line: 1, .. })));
    }

    #[test]
    fn prefix_not_substring_and_hyphens() {
        let c = Catalog::new(vec![med("1", "Ben-u-ron"), med("2", "Paracetamol")]).unwrap();
        assert_eq!(names(&c.autocomplete("ben", 5)), ["Ben-u-ron"]);
        assert_eq!(names(&c.autocomplete("BEN-U", 5)), ["Ben-u-ron"]);
        assert!(c.autocomplete("cetamol", 5).is_empty());
    }

    #[test]
    fn unicode_case_folding() {
        let c = Catalog::new(vec![med("1", "Ácido Fólico"), med("2", "acido")]).unwrap();
        assert_eq!(names(&c.autocomplete("áci", 5)), ["Ácido Fólico"]);
        // no accent folding
        assert_eq!(names(&c.autocomplete("aci", 5)), ["acido"]);
    }

    #[test]
    fn same_name_orders_by_id() {
        let c = Catalog::new(vec![med("b", "Aspirina"), med("a", "Aspirina")]).unwrap();
        let got: Vec<_> = c.autocomplete("asp", 5).into_iter().map(|m| m.id.0).collect();
        assert_eq!(got, ["a", "b"]);
    }

    #[test]
    fn format_roundtrip() {
        let ms = vec![med("M1", "Brufen, 400"), med("M2", "Ben-u-ron")];
        let c = load_catalog(&format_catalog(&ms)).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(&"M1".into()).unwrap().name, "Brufen, 400");
    }
}
