//! Periodic neighbor graphs with Gaussian-expanded edge distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{frac_to_cart, perpendicular_widths, Vec3};
use crate::scalar::{from_usize, Scalar};
use crate::structure::CrystalStructure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Scalar"))]
pub struct NeighborParams<T> {
    /// Å.
    pub cutoff: T,
    pub max_neighbors: usize,
    pub n_centers: usize,
    /// Å.
    pub gauss_width: T,
}

impl<T: Scalar> Default for NeighborParams<T> {
    fn default() -> Self {
        Self {
            cutoff: T::from_f64_lossy(6.0),
            max_neighbors: 12,
            n_centers: 31,
            gauss_width: T::from_f64_lossy(0.5),
        }
    }
}

impl<T: Scalar> NeighborParams<T> {
    pub fn check(&self) -> Result<()> {
        if !(self.cutoff > T::zero()) || !self.cutoff.is_finite() {
            return Err(Error::Config("neighbor.cutoff must be positive".into()));
        }
        if self.max_neighbors < 1 {
            return Err(Error::Config("neighbor.max_neighbors must be at least 1".into()));
        }
        if self.n_centers < 2 {
            return Err(Error::Config("neighbor.n_centers must be at least 2".into()));
        }
        if !(self.gauss_width > T::zero()) || !self.gauss_width.is_finite() {
            return Err(Error::Config("neighbor.gauss_width must be positive".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NeighborParams<U> {
        NeighborParams {
            cutoff: U::from_f64_lossy(self.cutoff.to_f64_lossless()),
            max_neighbors: self.max_neighbors,
            n_centers: self.n_centers,
            gauss_width: U::from_f64_lossy(self.gauss_width.to_f64_lossless()),
        }
    }
}

/// One directed neighbor: atom `dst` translated by `offset` cells, seen from `src`.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub src: usize,
    pub dst: usize,
    pub offset: [i32; 3],
    pub distance: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge<T> {
    pub src: usize,
    pub dst: usize,
    pub distance: T,
    pub feature: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrystalGraph<T> {
    pub n_nodes: usize,
    pub node_species: Vec<u8>,
    /// Grouped by `src` in ascending order, ascending distance within a group.
    pub edges: Vec<Edge<T>>,
}

impl<T: Scalar> CrystalGraph<T> {
    pub fn feature_len(&self) -> Option<usize> {
        self.edges.first().map(|e| e.feature.len())
    }
}

/// Up to `max_neighbors` nearest periodic images within the cutoff for every
/// atom, self-images included and zero distances excluded.
///
/// Images are searched over offsets `|n_k| ≤ ceil(cutoff / w_k)` where `w_k`
/// is the cell's perpendicular width along axis `k`; with coordinates in
/// `[0, 1)` no image within the cutoff lies outside that box. Ties at the
/// truncation boundary resolve by (distance, offset, dst).
pub fn periodic_neighbors<T: Scalar>(
    s: &CrystalStructure<T>,
    p: &NeighborParams<T>,
) -> Result<Vec<Neighbor<T>>> {
    let widths = perpendicular_widths(&s.lattice);
    let mut reach = [0i32; 3];
    for (axis, &w) in widths.iter().enumerate() {
        if !(w > T::from_f64_lossy(1e-12)) {
            return Err(Error::DegenerateCell(w.to_f64_lossless(), axis));
        }
        reach[axis] = (p.cutoff / w).ceil().to_i32().unwrap_or(i32::MAX);
    }
    let cutoff_sq = p.cutoff * p.cutoff;
    let mut out = Vec::new();
    let mut candidates: Vec<Neighbor<T>> = Vec::new();
    for (i, fi) in s.frac_coords.iter().enumerate() {
        candidates.clear();
        for (j, fj) in s.frac_coords.iter().enumerate() {
            let base: Vec3<T> = [fj[0] - fi[0], fj[1] - fi[1], fj[2] - fi[2]];
            for na in -reach[0]..=reach[0] {
                for nb in -reach[1]..=reach[1] {
                    for nc in -reach[2]..=reach[2] {
                        let shift = [
                            base[0] + T::from_f64_lossy(na as f64),
                            base[1] + T::from_f64_lossy(nb as f64),
                            base[2] + T::from_f64_lossy(nc as f64),
                        ];
                        let d = frac_to_cart(&shift, &s.lattice);
                        let d_sq = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                        if d_sq <= cutoff_sq && d_sq > T::zero() {
                            candidates.push(Neighbor {
                                src: i,
                                dst: j,
                                offset: [na, nb, nc],
                                distance: d_sq.sqrt(),
                            });
                        }
                    }
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("finite distances")
                .then(a.offset.cmp(&b.offset))
                .then(a.dst.cmp(&b.dst))
        });
        out.extend(candidates.drain(..).take(p.max_neighbors));
    }
    Ok(out)
}

/// `exp(-(d - mu_k)^2 / width^2)` for centers `mu_k` evenly spaced on `[0, cutoff]`.
pub fn gaussian_expand<T: Scalar>(d: T, p: &NeighborParams<T>) -> Vec<T> {
    let step = p.cutoff / from_usize::<T>(p.n_centers - 1);
    let inv_w2 = T::one() / (p.gauss_width * p.gauss_width);
    (0..p.n_centers)
        .map(|k| {
            let delta = d - step * from_usize(k);
            (-(delta * delta) * inv_w2).exp()
        })
        .collect()
}

pub fn build_graph<T: Scalar>(s: &CrystalStructure<T>, p: &NeighborParams<T>) -> Result<CrystalGraph<T>> {
    let edges = periodic_neighbors(s, p)?
        .into_iter()
        .map(|n| Edge { src: n.src, dst: n.dst, distance: n.distance, feature: gaussian_expand(n.distance, p) })
        .collect();
    Ok(CrystalGraph { n_nodes: s.n_atoms(), node_species: s.species.clone(), edges })
}
