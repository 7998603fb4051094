//! Small synthetic dataset with a known structure-property relation, used by
//! tests and the `toy` CLI subcommand.

use crate::lattice::lattice_from_parameters;
use crate::rng::{index, mix_seed, seeded, standard_normal, uniform};
use crate::scalar::{lit, Scalar};
use crate::structure::{CrystalStructure, DatasetMeta, LabelKind, PropertyRecord};

pub const TOY_SPECIES: [u8; 6] = [3, 6, 8, 26, 29, 30];
pub const TOY_MAX_ATOMS: usize = 4;
/// Noise standard deviation as a fraction of the noise-free property range.
pub const TOY_NOISE_FRACTION: f64 = 0.02;

fn noise_free_range() -> (f64, f64) {
    let lo = *TOY_SPECIES.iter().min().expect("species") as f64;
    let hi = *TOY_SPECIES.iter().max().expect("species") as f64;
    (2.0 * lo, 2.0 * hi)
}

/// Metadata matching [`toy_dataset`]; the range is widened by five noise
/// standard deviations on each side.
pub fn toy_meta() -> DatasetMeta {
    let (lo, hi) = noise_free_range();
    let pad = 5.0 * TOY_NOISE_FRACTION * (hi - lo);
    DatasetMeta { name: "toy".into(), max_atoms: TOY_MAX_ATOMS, property_range: (lo - pad, hi + pad) }
}

/// `n` records with 1 to 4 atoms drawn from [`TOY_SPECIES`] in a mildly
/// skewed cell and `property = 2 * mean atomic number + noise`.
pub fn toy_dataset<T: Scalar>(n: usize, seed: u64) -> Vec<PropertyRecord<T>> {
    let (lo, hi) = noise_free_range();
    let sigma = TOY_NOISE_FRACTION * (hi - lo);
    (0..n)
        .map(|k| {
            let mut rng = seeded(mix_seed(seed, &[k as u64]));
            let n_atoms = 1 + index(&mut rng, TOY_MAX_ATOMS);
            let params: [T; 6] = [
                uniform(&mut rng, 3.5, 5.5),
                uniform(&mut rng, 3.5, 5.5),
                uniform(&mut rng, 3.5, 5.5),
                uniform(&mut rng, 80.0, 100.0),
                uniform(&mut rng, 80.0, 100.0),
                uniform(&mut rng, 80.0, 100.0),
            ];
            let lattice = lattice_from_parameters(&params).expect("near-orthogonal cell");
            let species: Vec<u8> = (0..n_atoms).map(|_| TOY_SPECIES[index(&mut rng, TOY_SPECIES.len())]).collect();
            let frac_coords = (0..n_atoms)
                .map(|_| [uniform(&mut rng, 0.0, 1.0), uniform(&mut rng, 0.0, 1.0), uniform(&mut rng, 0.0, 1.0)])
                .collect();
            let structure = CrystalStructure { id: format!("toy-{k:05}"), lattice, species, frac_coords };
            let noise: T = standard_normal(&mut rng);
            let property = lit::<T>(2.0) * structure.mean_atomic_number() + noise * lit(sigma);
            PropertyRecord::new(structure, property, LabelKind::Real)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::validate_structure;

    #[test]
    fn records_are_valid_and_deterministic() {
        let a = toy_dataset::<f64>(50, 3);
        let b = toy_dataset::<f64>(50, 3);
        assert_eq!(a, b);
        let meta = toy_meta();
        for r in &a {
            validate_structure(&r.structure, &meta).unwrap();
            assert!(meta.contains(r.property));
        }
        assert_ne!(a, toy_dataset::<f64>(50, 4));
    }
}
