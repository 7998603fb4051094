#![allow(dead_code)]

use matwheel::flywheel::RunConfig;
use matwheel::graph::NeighborParams;
use matwheel::lattice::{frac_to_cart, lattice_from_parameters, perpendicular_widths};
use matwheel::rng::{index, seeded, uniform, SeededRng};
use matwheel::toy::toy_meta;
use matwheel::CrystalStructure;

pub fn random_structure(rng: &mut SeededRng, max_atoms: usize, id: &str) -> CrystalStructure<f64> {
    loop {
        let params = [
            uniform(rng, 3.0, 7.0),
            uniform(rng, 3.0, 7.0),
            uniform(rng, 3.0, 7.0),
            uniform(rng, 65.0, 115.0),
            uniform(rng, 65.0, 115.0),
            uniform(rng, 65.0, 115.0),
        ];
        let Some(lattice) = lattice_from_parameters(&params) else { continue };
        if perpendicular_widths(&lattice).iter().any(|&w| w < 2.0) {
            continue;
        }
        let n = 1 + index(rng, max_atoms);
        let species = (0..n).map(|_| 1 + index(rng, 100) as u8).collect();
        let frac_coords = (0..n).map(|_| [uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)]).collect();
        return CrystalStructure { id: id.to_owned(), lattice, species, frac_coords };
    }
}

pub fn random_structures(n: usize, max_atoms: usize, seed: u64) -> Vec<CrystalStructure<f64>> {
    let mut rng = seeded(seed);
    (0..n).map(|k| random_structure(&mut rng, max_atoms, &format!("rand-{k}"))).collect()
}

/// Every periodic image within the cutoff from an explicit [-3, 3]^3 supercell
/// of Cartesian positions, as `(src, dst, offset, distance)`.
pub fn brute_force_neighbors(s: &CrystalStructure<f64>, cutoff: f64) -> Vec<(usize, usize, [i32; 3], f64)> {
    let cart: Vec<[f64; 3]> = s.frac_coords.iter().map(|f| frac_to_cart(f, &s.lattice)).collect();
    let mut out = Vec::new();
    for (i, ci) in cart.iter().enumerate() {
        for (j, cj) in cart.iter().enumerate() {
            for a in -3i32..=3 {
                for b in -3i32..=3 {
                    for c in -3i32..=3 {
                        let t = frac_to_cart(&[a as f64, b as f64, c as f64], &s.lattice);
                        let p = [cj[0] + t[0] - ci[0], cj[1] + t[1] - ci[1], cj[2] + t[2] - ci[2]];
                        let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                        if d > 1e-12 && d <= cutoff {
                            out.push((i, j, [a, b, c], d));
                        }
                    }
                }
            }
        }
    }
    out
}

/// The same crystal described by a cell doubled along the first lattice vector.
pub fn double_along_a(s: &CrystalStructure<f64>) -> CrystalStructure<f64> {
    let mut lattice = s.lattice;
    lattice[0] = [2.0 * lattice[0][0], 2.0 * lattice[0][1], 2.0 * lattice[0][2]];
    let mut species = Vec::new();
    let mut frac_coords = Vec::new();
    for shift in [0.0, 1.0] {
        for (z, f) in s.species.iter().zip(&s.frac_coords) {
            species.push(*z);
            frac_coords.push([(f[0] + shift) / 2.0, f[1], f[2]]);
        }
    }
    CrystalStructure { id: format!("{}-x2", s.id), lattice, species, frac_coords }
}

/// Atoms reordered by `perm` (new position k holds old atom perm[k]).
pub fn permute(s: &CrystalStructure<f64>, perm: &[usize]) -> CrystalStructure<f64> {
    CrystalStructure {
        id: s.id.clone(),
        lattice: s.lattice,
        species: perm.iter().map(|&k| s.species[k]).collect(),
        frac_coords: perm.iter().map(|&k| s.frac_coords[k]).collect(),
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps parameters whose
/// gradient is numerically zero from dividing roundoff by roundoff.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Small but complete configuration used by the end-to-end tests.
pub fn toy_run_config(n_runs: usize, base_seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_dataset(toy_meta());
    cfg.n_runs = n_runs;
    cfg.base_seed = base_seed;
    cfg.predictor.embed_dim = 8;
    cfg.predictor.n_conv = 1;
    cfg.predictor.hidden_dim = 16;
    cfg.predictor.epochs = 40;
    cfg.predictor.patience = 15;
    cfg.predictor.learning_rate = 0.003;
    cfg.neighbor = NeighborParams { cutoff: 5.0, n_centers: 12, ..NeighborParams::default() };
    cfg
}

/// Like [`toy_run_config`] with everything shrunk further, for quick checks.
pub fn tiny_run_config(n_runs: usize, base_seed: u64) -> RunConfig {
    let mut cfg = toy_run_config(n_runs, base_seed);
    cfg.n_synthetic = 60;
    cfg.predictor.epochs = 6;
    cfg.predictor.patience = 3;
    cfg.generator.epochs = 5;
    cfg.generator.hidden_dim = 12;
    cfg.generator.latent_dim = 3;
    cfg
}
