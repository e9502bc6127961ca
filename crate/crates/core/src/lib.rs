//! Gradient-driven parameter sharing.
//!
//! Turns per-task gradient snapshots into sharing decisions (task groups,
//! shared/private width ratio, energy-weighted private initialization) and
//! materializes them as a shared + per-group private feed-forward block.
//!
//! Pipeline: [`gradbundle`] → [`grouping`], [`conflict`], [`subspace`] →
//! [`decomposer`]. [`synthbench`] generates planted-conflict problems and
//! trains unified vs. specialized blocks end to end.

pub mod conflict;
pub mod decomposer;
pub mod densela;
pub mod gradbundle;
pub mod grouping;
pub mod pipeline;
pub mod subspace;
pub mod synthbench;

/// Default seed for every seeded stage.
pub const DEFAULT_SEED: u64 = 2343;

/// Serializes a dense matrix as a list of rows.
pub(crate) mod serde_mat {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(
            rows.len(),
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}
