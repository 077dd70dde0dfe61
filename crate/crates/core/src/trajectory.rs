//! Moment trajectories over an ordered hyperparameter grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{aggregated_moments_fast, ActivationMatrix, Domain, Moment, MomentVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridDirection {
    Increasing,
    Decreasing,
}

/// Ordered values `omega_0 .. omega_tau` of the swept hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterGrid {
    name: String,
    values: Vec<f64>,
    direction: GridDirection,
}

impl HyperparameterGrid {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() < 2 {
            return Err(Error::InvalidGrid(format!("`{name}` has {} value(s)", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("`{name}` has a non-finite value")));
        }
        let direction = if values[1] > values[0] {
            GridDirection::Increasing
        } else {
            GridDirection::Decreasing
        };
        let monotone = values.windows(2).all(|w| match direction {
            GridDirection::Increasing => w[1] > w[0],
            GridDirection::Decreasing => w[1] < w[0],
        });
        if !monotone {
            return Err(Error::InvalidGrid(format!("`{name}` is not strictly monotonic")));
        }
        Ok(Self {
            name,
            values,
            direction,
        })
    }

    /// Integer grid `0, 1, .., len - 1`, e.g. checkpoint indices.
    pub fn indices(name: impl Into<String>, len: usize) -> Result<Self> {
        Self::new(name, (0..len).map(|i| i as f64).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn direction(&self) -> GridDirection {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tau(&self) -> usize {
        self.values.len() - 1
    }

    fn extends_with(&self, omega: f64) -> bool {
        let last = *self.values.last().expect("grid is non-empty");
        match self.direction {
            GridDirection::Increasing => omega > last,
            GridDirection::Decreasing => omega < last,
        }
    }

    fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        Self::new(self.name.clone(), values).expect("reversal preserves strict monotonicity")
    }
}

/// Per-domain table of aggregated moments, `(tau + 1) x L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    domain: Domain,
    grid: HyperparameterGrid,
    layers: Vec<String>,
    table: Vec<Vec<MomentVector>>,
}

impl Trajectory {
    /// Assembles a trajectory from precomputed moment rows, one per grid
    /// point, each holding one entry per layer.
    pub fn from_table(
        domain: Domain,
        grid: HyperparameterGrid,
        layers: Vec<String>,
        table: Vec<Vec<MomentVector>>,
    ) -> Result<Self> {
        if table.len() != grid.len() {
            return Err(Error::GridLengthMismatch {
                grid: grid.len(),
                batches: table.len(),
            });
        }
        if layers.is_empty() {
            return Err(Error::LayerSetMismatch("trajectory has no layers".into()));
        }
        for (index, row) in table.iter().enumerate() {
            if row.len() != layers.len() {
                let layer = layers.get(row.len()).cloned().unwrap_or_default();
                return Err(Error::MissingCell { index, layer });
            }
        }
        Ok(Self {
            domain,
            grid,
            layers,
            table,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn grid(&self) -> &HyperparameterGrid {
        &self.grid
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tau(&self) -> usize {
        self.grid.tau()
    }

    pub fn cell(&self, index: usize, layer: usize) -> &MomentVector {
        &self.table[index][layer]
    }

    pub fn rows(&self) -> &[Vec<MomentVector>] {
        &self.table
    }

    /// The `(layer, moment)` series across the grid.
    pub fn series(&self, layer: usize, moment: Moment) -> Vec<f64> {
        self.table.iter().map(|row| row[layer].get(moment)).collect()
    }

    /// Extends the trajectory by one grid point.
    pub fn append_checkpoint(&self, omega: f64, layer_batches: &[ActivationMatrix]) -> Result<Self> {
        if !omega.is_finite() || !self.grid.extends_with(omega) {
            return Err(Error::NonMonotonicOmega { omega });
        }
        let row = moments_row(&self.domain, &self.layers, layer_batches, self.grid.len())?;
        let mut values = self.grid.values.clone();
        values.push(omega);
        let grid = HyperparameterGrid::new(self.grid.name.clone(), values)?;
        let mut table = self.table.clone();
        table.push(row);
        Ok(Self {
            domain: self.domain.clone(),
            grid,
            layers: self.layers.clone(),
            table,
        })
    }

    /// Same trajectory traversed from the last grid point to the first.
    pub fn reversed(&self) -> Self {
        let mut table = self.table.clone();
        table.reverse();
        Self {
            domain: self.domain.clone(),
            grid: self.grid.reversed(),
            layers: self.layers.clone(),
            table,
        }
    }

    /// Sub-trajectory over grid indices `start..=end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.tau() {
            return Err(Error::IndexOutOfRange {
                i: start,
                j: end,
                len: self.grid.len(),
            });
        }
        Ok(Self {
            domain: self.domain.clone(),
            grid: HyperparameterGrid::new(self.grid.name.clone(), self.grid.values[start..=end].to_vec())?,
            layers: self.layers.clone(),
            table: self.table[start..=end].to_vec(),
        })
    }

    /// Checks that two trajectories can be compared cell by cell.
    pub fn check_matched(&self, other: &Trajectory) -> Result<()> {
        if self.grid.values != other.grid.values {
            return Err(Error::GridMismatch);
        }
        if self.layers != other.layers {
            return Err(Error::LayerSetMismatch(format!(
                "{:?} vs {:?}",
                self.layers, other.layers
            )));
        }
        Ok(())
    }
}

fn moments_row(
    domain: &Domain,
    layers: &[String],
    batches: &[ActivationMatrix],
    index: usize,
) -> Result<Vec<MomentVector>> {
    for b in batches {
        if &b.domain != domain {
            return Err(Error::DomainMismatch {
                expected: domain.tag(),
                found: b.domain.tag(),
            });
        }
        if !layers.contains(&b.layer_id) {
            return Err(Error::LayerSetMismatch(format!(
                "unexpected layer `{}` at grid index {index}",
                b.layer_id
            )));
        }
    }
    layers
        .iter()
        .map(|layer| {
            let mut found = batches.iter().filter(|b| &b.layer_id == layer);
            let acts = found.next().ok_or_else(|| Error::MissingCell {
                index,
                layer: layer.clone(),
            })?;
            if found.next().is_some() {
                return Err(Error::LayerSetMismatch(format!(
                    "layer `{layer}` supplied twice at grid index {index}"
                )));
            }
            aggregated_moments_fast(acts)
        })
        .collect()
}

/// Builds a trajectory from per-grid-point lists of per-layer activations.
///
/// The layer order is taken from the first grid point. Every grid point
/// must supply exactly that layer set, all for the same domain.
pub fn build_trajectory(batches: &[Vec<ActivationMatrix>], grid: HyperparameterGrid) -> Result<Trajectory> {
    if batches.len() != grid.len() {
        return Err(Error::GridLengthMismatch {
            grid: grid.len(),
            batches: batches.len(),
        });
    }
    let first = &batches[0];
    let Some(head) = first.first() else {
        return Err(Error::LayerSetMismatch("no layers at grid index 0".into()));
    };
    let domain = head.domain.clone();
    let layers: Vec<String> = first.iter().map(|b| b.layer_id.clone()).collect();
    let table = batches
        .iter()
        .enumerate()
        .map(|(index, point)| moments_row(&domain, &layers, point, index))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::from_table(domain, grid, layers, table)
}
