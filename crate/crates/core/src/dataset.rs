//! JSON-lines ingestion, deterministic splitting, labeled subsampling and
//! dataset merging.
//!
//! One record per line:
//!
//! ```text
//! {"id": "JVASP-1", "lattice": [[4,0,0],[0,4,0],[0,0,4]], "species": [14, 8],
//!  "frac_coords": [[0,0,0],[0.5,0.5,0.5]], "property": 1.5, "label_kind": "real"}
//! ```
//!
//! `label_kind` is optional and defaults to `"real"`. Unknown keys are ignored.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, shuffle};
use crate::scalar::Scalar;
use crate::structure::{wrap_coords, CrystalStructure, LabelKind, PropertyRecord, MAX_ATOMIC_NUMBER};

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    lattice: [[f64; 3]; 3],
    species: Vec<i64>,
    frac_coords: Vec<[f64; 3]>,
    property: f64,
    #[serde(default)]
    label_kind: LabelKind,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    lattice: [[f64; 3]; 3],
    species: &'a [u8],
    frac_coords: Vec<[f64; 3]>,
    property: f64,
    label_kind: LabelKind,
}

/// Parses one JSON-lines record. Coordinates come back wrapped into `[0, 1)`.
///
/// The `label_kind` key is honored when present; ingestion of raw dumps
/// leaves it out and gets `real`.
pub fn parse_structure_record<T: Scalar>(line: &str) -> Result<PropertyRecord<T>> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| Error::MalformedRecord(e.to_string()))?;
    if raw.species.is_empty() {
        return Err(Error::MalformedRecord("atom count is 0".into()));
    }
    if raw.species.len() != raw.frac_coords.len() {
        return Err(Error::MalformedRecord(format!(
            "{} species but {} coordinates",
            raw.species.len(),
            raw.frac_coords.len()
        )));
    }
    let species = raw
        .species
        .iter()
        .map(|&z| {
            if (1..=MAX_ATOMIC_NUMBER as i64).contains(&z) {
                Ok(z as u8)
            } else {
                Err(Error::MalformedRecord(format!("atomic number {z} outside 1..=118")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let finite = raw.lattice.iter().flatten().chain(raw.frac_coords.iter().flatten()).all(|x| x.is_finite());
    if !finite || !raw.property.is_finite() {
        return Err(Error::MalformedRecord("non-finite number".into()));
    }
    let structure = CrystalStructure {
        id: raw.id,
        lattice: raw.lattice.map(|r| r.map(T::from_f64_lossy)),
        species,
        frac_coords: raw.frac_coords.iter().map(|f| f.map(T::from_f64_lossy)).collect(),
    };
    Ok(PropertyRecord {
        structure: wrap_coords(&structure),
        property: T::from_f64_lossy(raw.property),
        label_kind: raw.label_kind,
    })
}

pub fn serialize_record<T: Scalar>(record: &PropertyRecord<T>) -> String {
    let s = &record.structure;
    let f = |x: T| x.to_f64_lossless();
    let out = RecordOut {
        id: &s.id,
        lattice: s.lattice.map(|r| r.map(f)),
        species: &s.species,
        frac_coords: s.frac_coords.iter().map(|c| c.map(f)).collect(),
        property: f(record.property),
        label_kind: record.label_kind,
    };
    serde_json::to_string(&out).expect("record serialization is infallible")
}

/// Outcome of reading a JSON-lines file leniently.
#[derive(Debug)]
pub struct ReadOutcome<T> {
    pub records: Vec<PropertyRecord<T>>,
    /// `(1-based line number, reason)` for every rejected line.
    pub rejected: Vec<(usize, String)>,
}

/// Reads every non-blank line, keeping parse failures as rejections.
/// `check` can reject parsed records too (e.g. dataset validation).
pub fn read_jsonl<T: Scalar, R: BufRead>(
    reader: R,
    mut check: impl FnMut(&PropertyRecord<T>) -> Result<()>,
) -> Result<ReadOutcome<T>> {
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_structure_record::<T>(&line).and_then(|r| {
            check(&r)?;
            if !seen.insert(r.id().to_owned()) {
                return Err(Error::MalformedRecord(format!("duplicate id {:?}", r.id())));
            }
            Ok(r)
        });
        match parsed {
            Ok(r) => records.push(r),
            Err(e) => rejected.push((i + 1, e.to_string())),
        }
    }
    Ok(ReadOutcome { records, rejected })
}

pub fn read_jsonl_file<T: Scalar>(
    path: &std::path::Path,
    check: impl FnMut(&PropertyRecord<T>) -> Result<()>,
) -> Result<ReadOutcome<T>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file), check)
}

pub fn write_jsonl<T: Scalar, W: Write>(mut out: W, records: &[PropertyRecord<T>]) -> Result<()> {
    for r in records {
        out.write_all(serialize_record(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Scalar>(path: &std::path::Path, records: &[PropertyRecord<T>]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), records)
}

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_ids.len(), self.val_ids.len(), self.test_ids.len())
    }
}

/// Sizes `(floor(r_train·n), floor(r_val·n), remainder)`.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // The epsilon keeps e.g. 0.7 * 1000 = 699.999... from flooring to 699.
    let floor = |r: f64| (((r * n as f64) + 1e-9).floor() as usize).min(n);
    let train = floor(ratios.0);
    let val = floor(ratios.1).min(n - train);
    (train, val, n - train - val)
}

pub fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    let ok = [a, b, c].iter().all(|r| r.is_finite() && *r >= 0.0) && ((a + b + c) - 1.0).abs() < 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("split ratios ({a}, {b}, {c}) must be non-negative and sum to 1")))
    }
}

/// Shuffles ids with a seeded generator and cuts train/val/test by the floor rule.
pub fn split_dataset<T: Scalar>(
    records: &[PropertyRecord<T>],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_ratios(ratios)?;
    let mut ids: Vec<String> = records.iter().map(|r| r.id().to_owned()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::MalformedRecord(format!("duplicate id {dup:?}")));
    }
    shuffle(&mut ids, &mut seeded(seed));
    let (n_train, n_val, _) = split_sizes(ids.len(), ratios);
    let test_ids = ids.split_off(n_train + n_val);
    let val_ids = ids.split_off(n_train);
    Ok(SplitAssignment { train_ids: ids, val_ids, test_ids, seed })
}

/// Carves `max(1, floor(fraction·n))` labeled ids out of `train_ids`.
pub fn subsample_labeled(train_ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let n = train_ids.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let n_labeled = (((fraction * n as f64) + 1e-9).floor() as usize).clamp(1, n);
    let mut ids = train_ids.to_vec();
    shuffle(&mut ids, &mut seeded(seed));
    let unlabeled = ids.split_off(n_labeled);
    (ids, unlabeled)
}

pub fn merge_datasets<T: Clone>(a: &[PropertyRecord<T>], b: &[PropertyRecord<T>]) -> Vec<PropertyRecord<T>> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Records whose ids appear in `ids`, in the order of `ids`.
pub fn select_by_ids<T: Clone>(records: &[PropertyRecord<T>], ids: &[String]) -> Vec<PropertyRecord<T>> {
    let index: std::collections::HashMap<&str, usize> =
        records.iter().enumerate().map(|(i, r)| (r.structure.id.as_str(), i)).collect();
    ids.iter().filter_map(|id| index.get(id.as_str()).map(|&i| records[i].clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"id":"a","lattice":[[4,0,0],[0,4,0],[0,0,4]],"species":[14,8],"frac_coords":[[0,0,0],[1.5,-0.25,0.5]],"property":1.5}"#;

    fn records(n: usize) -> Vec<PropertyRecord<f64>> {
        let base: PropertyRecord<f64> = parse_structure_record(MINIMAL).unwrap();
        (0..n)
            .map(|i| {
                let mut r = base.clone();
                r.structure.id = format!("r{i}");
                r
            })
            .collect()
    }

    #[test]
    fn parses_minimal_record() {
        let r: PropertyRecord<f64> = parse_structure_record(MINIMAL).unwrap();
        assert_eq!(r.structure.n_atoms(), 2);
        assert_eq!(r.property, 1.5);
        assert_eq!(r.label_kind, LabelKind::Real);
        assert_eq!(r.structure.frac_coords[1], [0.5, 0.75, 0.5]);
    }

    #[test]
    fn missing_lattice_is_malformed() {
        let line = r#"{"id":"a","species":[1],"frac_coords":[[0,0,0]],"property":1.0}"#;
        let err = parse_structure_record::<f64>(line).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord(ref m) if m.contains("lattice")), "{err}");
    }

    #[test]
    fn rejects_bad_species_and_empty_structures() {
        let bad_z = MINIMAL.replace("[14,8]", "[14,119]");
        assert!(matches!(parse_structure_record::<f64>(&bad_z), Err(Error::MalformedRecord(_))));
        let empty = r#"{"id":"a","lattice":[[4,0,0],[0,4,0],[0,0,4]],"species":[],"frac_coords":[],"property":1.0}"#;
        assert!(matches!(parse_structure_record::<f64>(empty), Err(Error::MalformedRecord(_))));
        let text = MINIMAL.replace("1.5}", "\"x\"}");
        assert!(matches!(parse_structure_record::<f64>(&text), Err(Error::MalformedRecord(_))));
    }

    #[test]
    fn accepts_top_of_exfoliation_range() {
        let line = MINIMAL.replace("\"property\":1.5", "\"property\":1604.04");
        let r: PropertyRecord<f64> = parse_structure_record(&line).unwrap();
        assert_eq!(r.property, 1604.04);
    }

    #[test]
    fn optional_label_kind_is_read() {
        let line = MINIMAL.replace("1.5}", "1.5,\"label_kind\":\"synthetic\"}");
        let r: PropertyRecord<f64> = parse_structure_record(&line).unwrap();
        assert_eq!(r.label_kind, LabelKind::Synthetic);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_sizes(636, DEFAULT_SPLIT_RATIOS), (445, 95, 96));
        assert_eq!(split_sizes(1056, DEFAULT_SPLIT_RATIOS), (739, 158, 159));
        assert_eq!(split_sizes(1, DEFAULT_SPLIT_RATIOS), (0, 0, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let recs = records(50);
        let a = split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 9).unwrap();
        let b = split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 9).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_empty_and_duplicates() {
        assert!(matches!(split_dataset::<f64>(&[], DEFAULT_SPLIT_RATIOS, 0), Err(Error::EmptyDataset)));
        let mut recs = records(3);
        recs[2].structure.id = "r0".into();
        assert!(split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 0).is_err());
    }

    #[test]
    fn subsample_examples() {
        let ids: Vec<String> = (0..445).map(|i| i.to_string()).collect();
        let (l, u) = subsample_labeled(&ids, 0.10, 3);
        assert_eq!((l.len(), u.len()), (44, 401));
        assert_eq!(subsample_labeled(&ids, 0.10, 3), (l, u));
        let (all, none) = subsample_labeled(&ids, 1.0, 3);
        assert_eq!((all.len(), none.len()), (445, 0));
        let (one, _) = subsample_labeled(&ids[..3], 0.1, 3);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn merge_preserves_kinds() {
        let a = records(445);
        let mut b = records(1000);
        b.iter_mut().for_each(|r| r.label_kind = LabelKind::Synthetic);
        let m = merge_datasets(&a, &b);
        assert_eq!(m.len(), 1445);
        assert_eq!(m.iter().filter(|r| r.label_kind == LabelKind::Synthetic).count(), 1000);
        assert_eq!(merge_datasets(&a, &[]), a);
        assert!(merge_datasets::<f64>(&[], &[]).is_empty());
    }

    #[test]
    fn lenient_reader_counts_rejections() {
        let mut text = String::new();
        for i in 0..9 {
            text.push_str(&MINIMAL.replace("\"a\"", &format!("\"r{i}\"")));
            text.push('\n');
        }
        text.push_str("{not json}\n");
        let out = read_jsonl::<f64, _>(text.as_bytes(), |_| Ok(())).unwrap();
        assert_eq!(out.records.len(), 9);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].0, 10);
    }
}
