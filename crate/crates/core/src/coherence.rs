//! Interval correlations between source and target trajectories.
//!
//! For an interval `[i, j]` of grid indices the coherence factor is
//! `d = ((j - i) / tau) * corr`, where `corr` is the Pearson correlation of
//! the two moment series restricted to that interval. A split at index `i`
//! scores `d(0, i) - d(i, tau)`: strong co-movement before `i` and strong
//! opposite movement after it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::Moment;
use crate::trajectory::Trajectory;

/// Relative spread under which a sub-series counts as constant.
const FLAT_TOLERANCE: f64 = 1e-12;

/// Pearson correlation of `a[i..=j]` against `b[i..=j]`.
///
/// Returns `Ok(None)` when either sub-series has zero variance (relative to
/// its magnitude). Population normalization is used; it cancels anyway.
pub fn pearson_interval(a: &[f64], b: &[f64], i: usize, j: usize) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if i > j || j >= a.len() {
        return Err(Error::IndexOutOfRange { i, j, len: a.len() });
    }
    if j == i {
        return Ok(None);
    }
    Ok(pearson(&a[i..=j], &b[i..=j]))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if is_flat(a, saa) || is_flat(b, sbb) {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn is_flat(xs: &[f64], sum_sq_dev: f64) -> bool {
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let std = (sum_sq_dev / xs.len() as f64).sqrt();
    std <= FLAT_TOLERANCE * scale || sum_sq_dev == 0.0
}

/// `((j - i) / tau) * corr`; an undefined correlation contributes 0.
pub fn coherence_factor(corr: Option<f64>, i: usize, j: usize, tau: usize) -> Result<f64> {
    if i >= j || j > tau {
        return Err(Error::InvalidInterval { i, j });
    }
    Ok(corr.map_or(0.0, |c| (j - i) as f64 / tau as f64 * c))
}

/// Correlations for every `(layer, moment)` cell over one interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceMatrix {
    pub interval: (usize, usize),
    pub layers: Vec<String>,
    /// `corr[l][k]`; `None` marks a zero-variance (undefined) cell.
    pub corr: Vec<[Option<f64>; 4]>,
}

impl CoherenceMatrix {
    pub fn get(&self, layer: usize, moment: Moment) -> Option<f64> {
        self.corr[layer][moment.index()]
    }

    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.corr.iter().flatten().filter_map(|c| *c)
    }

    /// CSV export: `layer,moment,i,j,corr,defined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,moment,i,j,corr,defined\n");
        for (layer, row) in self.layers.iter().zip(&self.corr) {
            for moment in Moment::ALL {
                let c = row[moment.index()];
                out.push_str(&format!(
                    "{layer},{moment},{},{},{},{}\n",
                    self.interval.0,
                    self.interval.1,
                    c.map_or_else(String::new, |c| format!("{c:.17e}")),
                    c.is_some()
                ));
            }
        }
        out
    }
}

/// Cell-wise interval correlation of two matched trajectories.
pub fn coherence_matrix(src: &Trajectory, tgt: &Trajectory, i: usize, j: usize) -> Result<CoherenceMatrix> {
    src.check_matched(tgt)?;
    if i >= j || j > src.tau() {
        return Err(Error::InvalidInterval { i, j });
    }
    let corr = (0..src.n_layers())
        .map(|l| {
            let mut row = [None; 4];
            for moment in Moment::ALL {
                let a = src.series(l, moment);
                let b = tgt.series(l, moment);
                row[moment.index()] = pearson(&a[i..=j], &b[i..=j]);
            }
            row
        })
        .collect();
    Ok(CoherenceMatrix {
        interval: (i, j),
        layers: src.layers().to_vec(),
        corr,
    })
}

/// Best split of one `(layer, moment)` series pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Split {
    pub split: usize,
    pub score: f64,
}

/// A split score annotated with its cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitScore {
    pub layer: usize,
    pub moment: Moment,
    pub split: usize,
    pub score: f64,
}

/// Coherent- and divergent-phase factors for one split candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseFactors {
    pub split: usize,
    pub coherent: f64,
    pub divergent: f64,
}

impl PhaseFactors {
    pub fn score(&self) -> f64 {
        self.coherent - self.divergent
    }
}

/// Phase factors for every admissible split `1..=tau`.
///
/// Both phases of an interior split hold at least two points. `i = tau`
/// has no divergent phase and its divergent factor is 0.
pub fn phase_factors(src: &[f64], tgt: &[f64], tau: usize) -> Result<Vec<PhaseFactors>> {
    if src.len() != tgt.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: tgt.len(),
        });
    }
    if tau < 2 {
        return Err(Error::SeriesTooShort { tau });
    }
    if src.len() != tau + 1 {
        return Err(Error::IndexOutOfRange {
            i: 0,
            j: tau,
            len: src.len(),
        });
    }
    (1..=tau)
        .map(|i| {
            let coherent = coherence_factor(pearson(&src[..=i], &tgt[..=i]), 0, i, tau)?;
            let divergent = if i < tau {
                coherence_factor(pearson(&src[i..], &tgt[i..]), i, tau, tau)?
            } else {
                0.0
            };
            Ok(PhaseFactors {
                split: i,
                coherent,
                divergent,
            })
        })
        .collect()
}

/// Split maximizing `d(0, i) - d(i, tau)`; ties go to the smallest `i`.
pub fn best_split(src: &[f64], tgt: &[f64], tau: usize) -> Result<Split> {
    let phases = phase_factors(src, tgt, tau)?;
    Ok(argmax_split(&phases))
}

pub(crate) fn argmax_split(phases: &[PhaseFactors]) -> Split {
    let mut best = Split {
        split: phases[0].split,
        score: phases[0].score(),
    };
    for p in &phases[1..] {
        if p.score() > best.score {
            best = Split {
                split: p.split,
                score: p.score(),
            };
        }
    }
    best
}
