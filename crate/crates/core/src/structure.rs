//! Crystal structures, labeled records, and dataset-level bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{determinant, Mat3, Vec3};
use crate::scalar::Scalar;

pub const MAX_ATOMIC_NUMBER: u8 = 118;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure<T> {
    pub id: String,
    /// Rows are the lattice vectors, in Å.
    pub lattice: Mat3<T>,
    pub species: Vec<u8>,
    pub frac_coords: Vec<Vec3<T>>,
}

impl<T: Scalar> CrystalStructure<T> {
    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn mean_atomic_number(&self) -> T {
        let total: f64 = self.species.iter().map(|&z| z as f64).sum();
        T::from_f64_lossy(total / self.species.len().max(1) as f64)
    }

    /// Checks the structural invariants that do not depend on a dataset.
    pub fn check_invariants(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::EmptyStructure);
        }
        if self.species.len() != self.frac_coords.len() {
            return Err(Error::InvalidStructure(format!(
                "{} species but {} coordinates",
                self.species.len(),
                self.frac_coords.len()
            )));
        }
        if self.lattice.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidLattice("non-finite entry".into()));
        }
        let det = determinant(&self.lattice);
        if !(det > T::zero()) {
            return Err(Error::InvalidLattice(format!("determinant {det} is not positive")));
        }
        if let Some(z) = self.species.iter().find(|&&z| z == 0 || z > MAX_ATOMIC_NUMBER) {
            return Err(Error::InvalidStructure(format!("atomic number {z} outside 1..=118")));
        }
        for f in &self.frac_coords {
            if f.iter().any(|&x| !(x >= T::zero() && x < T::one())) {
                return Err(Error::InvalidStructure(format!(
                    "fractional coordinate {f:?} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Maps the structure into another scalar type.
    pub fn cast<U: Scalar>(&self) -> CrystalStructure<U> {
        let c = |x: T| U::from_f64_lossy(x.to_f64_lossless());
        CrystalStructure {
            id: self.id.clone(),
            lattice: self.lattice.map(|row| row.map(c)),
            species: self.species.clone(),
            frac_coords: self.frac_coords.iter().map(|f| f.map(c)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    #[default]
    Real,
    Pseudo,
    Synthetic,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Real => "real",
            LabelKind::Pseudo => "pseudo",
            LabelKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord<T> {
    pub structure: CrystalStructure<T>,
    pub property: T,
    pub label_kind: LabelKind,
}

impl<T: Scalar> PropertyRecord<T> {
    pub fn new(structure: CrystalStructure<T>, property: T, label_kind: LabelKind) -> Self {
        Self { structure, property, label_kind }
    }

    pub fn id(&self) -> &str {
        &self.structure.id
    }
}

/// Dataset-wide bounds: atom-count limit and nominal property range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub max_atoms: usize,
    pub property_range: (f64, f64),
}

impl DatasetMeta {
    pub fn new(name: impl Into<String>, max_atoms: usize, property_range: (f64, f64)) -> Result<Self> {
        let meta = Self { name: name.into(), max_atoms, property_range };
        meta.check()?;
        Ok(meta)
    }

    pub fn check(&self) -> Result<()> {
        if self.max_atoms < 1 {
            return Err(Error::Config("max_atoms must be at least 1".into()));
        }
        let (low, high) = self.property_range;
        if !(low < high) {
            return Err(Error::Config(format!("property_range ({low}, {high}) is empty")));
        }
        Ok(())
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.property_range.0 && value <= self.property_range.1
    }

    pub fn jarvis2d_exfoliation() -> Self {
        Self { name: "jarvis2d_exfoliation".into(), max_atoms: 35, property_range: (0.03, 1604.04) }
    }

    pub fn mp_poly_total() -> Self {
        Self { name: "mp_poly_total".into(), max_atoms: 20, property_range: (2.08, 277.78) }
    }
}

pub fn validate_structure<T: Scalar>(s: &CrystalStructure<T>, meta: &DatasetMeta) -> Result<()> {
    s.check_invariants()?;
    if s.n_atoms() > meta.max_atoms {
        return Err(Error::TooManyAtoms { n_atoms: s.n_atoms(), max_atoms: meta.max_atoms });
    }
    Ok(())
}

/// Maps `x` into `[0, 1)`.
#[inline]
pub fn wrap_unit<T: Scalar>(x: T) -> T {
    let w = x - x.floor();
    // x slightly below an integer can round up to exactly 1.
    if w >= T::one() {
        T::zero()
    } else {
        w
    }
}

pub fn wrap_coords<T: Scalar>(s: &CrystalStructure<T>) -> CrystalStructure<T> {
    CrystalStructure {
        frac_coords: s.frac_coords.iter().map(|f| f.map(wrap_unit)).collect(),
        ..s.clone()
    }
}
