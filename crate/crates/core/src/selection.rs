//! Checkpoint decisions from coherence split scores.
//!
//! Three rules are provided:
//!
//! - [`select_unweighted`]: the single strongest `(layer, moment, split)`
//!   cell decides. Works well for shallow networks.
//! - [`select_weighted`]: every layer proposes its own stopping index and
//!   votes with the strength of its divergent phase.
//! - [`select_two_sided`]: for hyperparameters whose optimum may lie on
//!   either side of the source optimum.

use serde::{Deserialize, Serialize};

use crate::coherence::{argmax_split, coherence_matrix, phase_factors, PhaseFactors};
use crate::error::{Error, Result};
use crate::moments::Moment;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Unweighted,
    Weighted,
    TwoSided,
}

/// How per-cell coherences are pooled into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of the defined cells.
    #[default]
    Mean,
    /// Fraction of defined cells with positive coherence.
    PositiveFraction,
}

impl Aggregation {
    /// Pools `values`; an empty set pools to 0.
    pub fn pool(self, values: impl IntoIterator<Item = f64>) -> f64 {
        let (mut n, mut sum, mut pos) = (0usize, 0.0, 0usize);
        for v in values {
            n += 1;
            sum += v;
            pos += usize::from(v > 0.0);
        }
        if n == 0 {
            return 0.0;
        }
        match self {
            Aggregation::Mean => sum / n as f64,
            Aggregation::PositiveFraction => pos as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: String,
    pub t_star_l: usize,
    pub k_star_l: Moment,
    pub nc_div_l: f64,
    pub alpha_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalCell {
    pub layer: usize,
    pub moment: Moment,
}

/// One row of the audit table: the phase factors of one split candidate
/// for one `(layer, moment)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub layer: usize,
    pub moment: Moment,
    pub split: usize,
    pub coherent: f64,
    pub divergent: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    pub chosen_index: usize,
    pub chosen_omega: f64,
    pub per_layer: Vec<LayerDecision>,
    pub critical: Option<CriticalCell>,
    pub no_divergence: bool,
    /// Weighted stopping index before rounding; absent for the other rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_index: Option<f64>,
    /// Side chosen by the two-sided rule with both side scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sides: Option<SideComparison>,
    pub diagnostics: Vec<DiagnosticRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideComparison {
    pub valid_index: usize,
    pub left_coherence: f64,
    pub right_coherence: f64,
    pub chosen_side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Phase factors of every cell, indexed `[layer][moment]`.
struct ScoreTable {
    cells: Vec<[Vec<PhaseFactors>; 4]>,
}

impl ScoreTable {
    fn new(src: &Trajectory, tgt: &Trajectory) -> Result<Self> {
        src.check_matched(tgt)?;
        let tau = src.tau();
        if tau < 2 {
            return Err(Error::SeriesTooShort { tau });
        }
        let cells = (0..src.n_layers())
            .map(|l| {
                let mut row: [Vec<PhaseFactors>; 4] = Default::default();
                for moment in Moment::ALL {
                    row[moment.index()] = phase_factors(&src.series(l, moment), &tgt.series(l, moment), tau)?;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells })
    }

    fn diagnostics(&self) -> Vec<DiagnosticRow> {
        let mut rows = Vec::new();
        for (layer, cell) in self.cells.iter().enumerate() {
            for moment in Moment::ALL {
                for p in &cell[moment.index()] {
                    rows.push(DiagnosticRow {
                        layer,
                        moment,
                        split: p.split,
                        coherent: p.coherent,
                        divergent: p.divergent,
                        score: p.score(),
                    });
                }
            }
        }
        rows
    }

    /// Per-layer stop index, critical moment and divergence strength.
    fn layer_stop(&self, layer: usize) -> (usize, Moment, f64) {
        let cell = &self.cells[layer];
        let mut best: Option<(f64, usize, Moment)> = None;
        let mut nc_div = 0.0f64;
        for moment in Moment::ALL {
            let phases = &cell[moment.index()];
            let s = argmax_split(phases);
            if best.is_none_or(|(score, _, _)| s.score > score) {
                best = Some((s.score, s.split, moment));
            }
            for p in phases {
                nc_div = nc_div.max(-p.divergent);
            }
        }
        let (_, t_star, k_star) = best.expect("four moments per layer");
        (t_star, k_star, nc_div.clamp(0.0, 1.0))
    }
}

/// Stopping index, critical moment and divergent-phase strength of one
/// layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerStop {
    pub t_star_l: usize,
    pub k_star_l: Moment,
    pub nc_div_l: f64,
}

pub fn layer_stop_and_strength(src: &Trajectory, tgt: &Trajectory, layer: usize) -> Result<LayerStop> {
    if layer >= src.n_layers() {
        return Err(Error::LayerSetMismatch(format!("no layer index {layer}")));
    }
    let table = ScoreTable::new(src, tgt)?;
    let (t_star_l, k_star_l, nc_div_l) = table.layer_stop(layer);
    Ok(LayerStop {
        t_star_l,
        k_star_l,
        nc_div_l,
    })
}

/// Global argmax over layers, moments and splits.
///
/// Ties resolve to the smallest layer, then moment, then split index.
pub fn select_unweighted(src: &Trajectory, tgt: &Trajectory) -> Result<SelectionResult> {
    let table = ScoreTable::new(src, tgt)?;
    let tau = src.tau();
    let mut best: Option<(f64, usize, Moment, usize)> = None;
    for (layer, cell) in table.cells.iter().enumerate() {
        for moment in Moment::ALL {
            let s = argmax_split(&cell[moment.index()]);
            if best.is_none_or(|(score, ..)| s.score > score) {
                best = Some((s.score, layer, moment, s.split));
            }
        }
    }
    let (_, layer, moment, chosen) = best.expect("at least one layer");
    let per_layer = (0..src.n_layers())
        .map(|l| {
            let (t, k, nc) = table.layer_stop(l);
            LayerDecision {
                layer: src.layers()[l].clone(),
                t_star_l: t,
                k_star_l: k,
                nc_div_l: nc,
                alpha_l: f64::from(u8::from(l == layer)),
            }
        })
        .collect();
    Ok(SelectionResult {
        mode: SelectionMode::Unweighted,
        chosen_index: chosen,
        chosen_omega: src.grid().values()[chosen],
        per_layer,
        critical: Some(CriticalCell { layer, moment }),
        no_divergence: chosen == tau,
        weighted_index: None,
        sides: None,
        diagnostics: table.diagnostics(),
    })
}

/// Rounds a fractional stopping index to the nearest grid index; exact
/// halves go to the earlier checkpoint.
pub fn round_to_index(t: f64, tau: usize) -> usize {
    let r = (t - 0.5 - 1e-9).ceil();
    r.clamp(0.0, tau as f64) as usize
}

/// Outcome of the divergence-weighted vote over per-layer stops.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedVote {
    pub alpha: Vec<f64>,
    /// `None` when no layer diverges.
    pub weighted_index: Option<f64>,
    pub chosen_index: usize,
}

/// `alpha_l = nc_div_l / sum(nc_div)`, chosen index the rounded
/// `sum(alpha_l * t_star_l)`. With no divergent layer every weight is 0 and
/// the last index `tau` is kept.
pub fn weighted_vote(t_star: &[usize], nc_div: &[f64], tau: usize) -> Result<WeightedVote> {
    if t_star.len() != nc_div.len() || t_star.is_empty() {
        return Err(Error::LengthMismatch { left: t_star.len(), right: nc_div.len() });
    }
    if nc_div.iter().any(|d| !(0.0..=1.0).contains(d)) || t_star.iter().any(|&t| t > tau) {
        return Err(Error::Invalid("layer stops must lie in 0..=tau with strengths in [0, 1]".into()));
    }
    let total: f64 = nc_div.iter().sum();
    if total <= 0.0 {
        return Ok(WeightedVote { alpha: vec![0.0; t_star.len()], weighted_index: None, chosen_index: tau });
    }
    let alpha: Vec<f64> = nc_div.iter().map(|d| d / total).collect();
    let t: f64 = alpha.iter().zip(t_star).map(|(a, &t)| a * t as f64).sum();
    Ok(WeightedVote { alpha, weighted_index: Some(t), chosen_index: round_to_index(t, tau) })
}

/// Divergence-weighted average of per-layer stopping indices.
pub fn select_weighted(src: &Trajectory, tgt: &Trajectory) -> Result<SelectionResult> {
    let table = ScoreTable::new(src, tgt)?;
    let tau = src.tau();
    let stops: Vec<(usize, Moment, f64)> = (0..src.n_layers()).map(|l| table.layer_stop(l)).collect();
    let t_star: Vec<usize> = stops.iter().map(|s| s.0).collect();
    let nc_div: Vec<f64> = stops.iter().map(|s| s.2).collect();
    let vote = weighted_vote(&t_star, &nc_div, tau)?;
    let no_divergence = vote.weighted_index.is_none();
    let per_layer: Vec<LayerDecision> = stops
        .iter()
        .zip(src.layers())
        .zip(&vote.alpha)
        .map(|((&(t, k, nc), name), &alpha_l)| LayerDecision {
            layer: name.clone(),
            t_star_l: t,
            k_star_l: k,
            nc_div_l: nc,
            alpha_l,
        })
        .collect();
    let (chosen, weighted) = (vote.chosen_index, vote.weighted_index);
    let critical = stops
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (l, s)| match acc {
            Some((_, best)) if s.2 <= best => acc,
            _ if s.2 > 0.0 => Some((l, s.2)),
            _ => acc,
        })
        .map(|(l, _)| CriticalCell {
            layer: l,
            moment: stops[l].1,
        });
    Ok(SelectionResult {
        mode: SelectionMode::Weighted,
        chosen_index: chosen,
        chosen_omega: src.grid().values()[chosen],
        per_layer,
        critical,
        no_divergence,
        weighted_index: weighted,
        sides: None,
        diagnostics: table.diagnostics(),
    })
}

/// Pooled full-interval coherence of one side.
fn side_coherence(src: &Trajectory, tgt: &Trajectory, agg: Aggregation) -> Result<f64> {
    let m = coherence_matrix(src, tgt, 0, src.tau())?;
    Ok(agg.pool(m.defined()))
}

/// Selection when the target optimum may lie on either side of the source
/// optimum at `valid_index`.
///
/// Each side is traversed toward `valid_index`. The side with the lower
/// pooled coherence is taken to contain the target optimum, and the
/// weighted rule runs inside it. Equal scores pick the left side.
pub fn select_two_sided(
    src: &Trajectory,
    tgt: &Trajectory,
    valid_index: usize,
    agg: Aggregation,
) -> Result<SelectionResult> {
    src.check_matched(tgt)?;
    let tau = src.tau();
    if valid_index < 2 || valid_index + 2 > tau {
        return Err(Error::SideTooShort {
            valid: valid_index,
            tau,
        });
    }
    let (src_left, tgt_left) = (src.slice(0, valid_index)?, tgt.slice(0, valid_index)?);
    let (src_right, tgt_right) = (
        src.slice(valid_index, tau)?.reversed(),
        tgt.slice(valid_index, tau)?.reversed(),
    );
    let left = side_coherence(&src_left, &tgt_left, agg)?;
    let right = side_coherence(&src_right, &tgt_right, agg)?;
    let side = if right < left { Side::Right } else { Side::Left };
    let mut result = match side {
        Side::Left => select_weighted(&src_left, &tgt_left)?,
        Side::Right => {
            let mut r = select_weighted(&src_right, &tgt_right)?;
            let to_global = |local: usize| tau - local;
            r.chosen_index = to_global(r.chosen_index);
            r.weighted_index = r.weighted_index.map(|t| tau as f64 - t);
            for d in &mut r.per_layer {
                d.t_star_l = to_global(d.t_star_l);
            }
            for row in &mut r.diagnostics {
                row.split = to_global(row.split);
            }
            r
        }
    };
    result.mode = SelectionMode::TwoSided;
    result.chosen_omega = src.grid().values()[result.chosen_index];
    result.sides = Some(SideComparison {
        valid_index,
        left_coherence: left,
        right_coherence: right,
        chosen_side: side,
    });
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{Domain, MomentVector};
    use crate::trajectory::HyperparameterGrid;

    fn traj(domain: Domain, layers: &[[Vec<f64>; 4]]) -> Trajectory {
        let len = layers[0][0].len();
        let table = (0..len)
            .map(|i| {
                layers
                    .iter()
                    .map(|l| MomentVector::new(l[0][i], l[1][i], l[2][i], l[3][i]))
                    .collect()
            })
            .collect();
        Trajectory::from_table(
            domain,
            HyperparameterGrid::indices("epoch", len).unwrap(),
            (0..layers.len()).map(|l| format!("layer{l}")).collect(),
            table,
        )
        .unwrap()
    }

    fn ramp(len: usize) -> Vec<f64> {
        (0..len).map(|t| t as f64).collect()
    }

    fn curve(len: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..len).map(|t| f(t as f64)).collect()
    }

    #[test]
    fn identical_trajectories_never_diverge() {
        let s = [ramp(9), curve(9, |t| t * t), curve(9, f64::sqrt), curve(9, |t| (t / 3.0).sin())];
        let src = traj(Domain::Source, &[s.clone(), s.clone()]);
        let tgt = traj(Domain::Target, &[s.clone(), s]);
        let u = select_unweighted(&src, &tgt).unwrap();
        assert_eq!(u.chosen_index, 8);
        assert!(u.no_divergence);
        let w = select_weighted(&src, &tgt).unwrap();
        assert_eq!(w.chosen_index, 8);
        for d in &w.per_layer {
            assert_eq!(d.t_star_l, 8);
        }
    }

    #[test]
    fn exact_anti_correlation_strength() {
        let tau = 10;
        let src = traj(Domain::Source, &[[ramp(11), ramp(11), ramp(11), ramp(11)]]);
        let neg = curve(11, |t| -t);
        let tgt = traj(Domain::Target, &[[neg.clone(), neg.clone(), neg.clone(), neg]]);
        let stop = layer_stop_and_strength(&src, &tgt, 0).unwrap();
        assert!((stop.nc_div_l - (tau - 1) as f64 / tau as f64).abs() < 1e-12);
        assert_eq!(stop.t_star_l, 1);
    }

    #[test]
    fn divergent_tail_of_minus_point_six() {
        // perfect anti-correlation over the last 6 steps of tau = 10; the
        // outlier at index 3 weakens every longer tail.
        let src = ramp(11);
        let tgt = vec![0.0, 1.0, 2.0, -10.0, 4.0, 3.0, 2.0, 1.0, 0.0, -1.0, -2.0];
        let flat = vec![1.0; 11];
        let a = traj(Domain::Source, &[[src.clone(), flat.clone(), flat.clone(), flat.clone()]]);
        let b = traj(Domain::Target, &[[tgt, flat.clone(), flat.clone(), flat]]);
        let stop = layer_stop_and_strength(&a, &b, 0).unwrap();
        assert!((stop.nc_div_l - 0.6).abs() < 1e-12);
    }

    #[test]
    fn coherent_layer_gets_zero_vote() {
        let s = [ramp(9), curve(9, |t| t * t), curve(9, f64::sqrt), curve(9, |t| t.powf(1.5))];
        let src = traj(Domain::Source, &[s.clone()]);
        let stop = layer_stop_and_strength(&src, &src, 0).unwrap();
        assert_eq!(stop.nc_div_l, 0.0);
        assert_eq!(stop.t_star_l, 8);
    }

    /// Monotone distortion: keeps every interval correlation positive but
    /// below 1, so undisturbed cells never tie a perfect split.
    fn warp(v: &[f64]) -> Vec<f64> {
        let max = v.iter().fold(1e-9f64, |m, x| m.max(x.abs()));
        v.iter().map(|x| x + 0.3 * x * x / max).collect()
    }

    fn warped(cells: &[Vec<f64>; 4]) -> [Vec<f64>; 4] {
        [warp(&cells[0]), warp(&cells[1]), warp(&cells[2]), warp(&cells[3])]
    }

    #[test]
    fn critical_cell_in_second_layer() {
        let len = 10;
        let base = [ramp(len), curve(len, |t| t * t), curve(len, f64::sqrt), curve(len, |t| t.powf(1.5))];
        let mut divergent = warped(&base);
        divergent[1] = curve(len, |t| if t <= 3.0 { t * t } else { 18.0 - t * t });
        let src = traj(Domain::Source, &[base.clone(), base.clone()]);
        let tgt = traj(Domain::Target, &[warped(&base), divergent]);
        let u = select_unweighted(&src, &tgt).unwrap();
        assert_eq!(u.chosen_index, 3);
        assert_eq!(
            u.critical,
            Some(CriticalCell {
                layer: 1,
                moment: Moment::M2
            })
        );
        assert!(!u.no_divergence);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_to_index(14.0, 39), 14);
        assert_eq!(round_to_index(0.8 * 10.0 + 0.2 * 30.0, 39), 14);
        assert_eq!(round_to_index(14.5, 39), 14);
        assert_eq!(round_to_index(14.51, 39), 15);
        assert_eq!(round_to_index(13.49, 39), 13);
        assert_eq!(round_to_index(0.2, 39), 0);
        assert_eq!(round_to_index(50.0, 39), 39);
    }

    #[test]
    fn weighted_vote_examples() {
        let v = weighted_vote(&[10, 30], &[0.8, 0.2], 40).unwrap();
        assert_eq!(v.chosen_index, 14);
        assert!((v.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let v = weighted_vote(&[3, 7], &[0.0, 0.0], 9).unwrap();
        assert_eq!((v.chosen_index, v.weighted_index, v.alpha), (9, None, vec![0.0, 0.0]));
        // 2.5 rounds down
        assert_eq!(weighted_vote(&[2, 3], &[0.5, 0.5], 9).unwrap().chosen_index, 2);
        assert!(weighted_vote(&[2], &[0.5, 0.5], 9).is_err());
        assert!(weighted_vote(&[12], &[0.5], 9).is_err());
        assert!(weighted_vote(&[2], &[1.5], 9).is_err());
    }

    #[test]
    fn weighted_single_divergent_layer() {
        let len = 13;
        let base = [ramp(len), curve(len, |t| t * t), curve(len, f64::sqrt), curve(len, |t| t.powf(1.5))];
        let mut div = warped(&base);
        div[2] = curve(len, |t| if t <= 5.0 { t.sqrt() } else { 2.0 * 5f64.sqrt() - t.sqrt() });
        let src = traj(Domain::Source, &[base.clone(), base.clone(), base.clone()]);
        let tgt = traj(Domain::Target, &[base.clone(), div, base]);
        let w = select_weighted(&src, &tgt).unwrap();
        let stop = layer_stop_and_strength(&src, &tgt, 1).unwrap();
        assert!(stop.nc_div_l > 0.0);
        assert_eq!(w.per_layer[0].nc_div_l, 0.0);
        assert_eq!(w.per_layer[2].nc_div_l, 0.0);
        assert_eq!(w.per_layer[1].alpha_l, 1.0);
        assert_eq!(w.chosen_index, stop.t_star_l);
        assert_eq!(w.chosen_index, 5);
    }

    #[test]
    fn two_sided_symmetric_coherent() {
        let s = [ramp(11), curve(11, |t| t * t), curve(11, f64::sqrt), curve(11, |t| t.powf(1.5))];
        let src = traj(Domain::Source, &[s.clone()]);
        let tgt = traj(Domain::Target, &[s]);
        let r = select_two_sided(&src, &tgt, 5, Aggregation::Mean).unwrap();
        assert_eq!(r.chosen_index, 5);
        assert!(r.no_divergence);
        assert!(matches!(
            select_two_sided(&src, &tgt, 1, Aggregation::Mean),
            Err(Error::SideTooShort { .. })
        ));
        assert!(matches!(
            select_two_sided(&src, &tgt, 9, Aggregation::Mean),
            Err(Error::SideTooShort { .. })
        ));
    }

    /// Source improves monotonically toward `valid`; the target co-moves on
    /// one side of its own optimum `opt` and opposes on the other.
    fn planted(len: usize, valid: usize, opt: usize) -> (Trajectory, Trajectory) {
        let v = valid as f64;
        let o = opt as f64;
        let src_curve = curve(len, |t| -(t - v).abs());
        let tgt_curve = curve(len, |t| -(t - o).abs());
        let s = [src_curve.clone(), curve(len, |t| 0.5 * src_curve[t as usize] + 0.1 * t), src_curve.clone(), src_curve.clone()];
        let t = [tgt_curve.clone(), curve(len, |x| 0.5 * tgt_curve[x as usize] + 0.1 * x), tgt_curve.clone(), tgt_curve];
        (traj(Domain::Source, &[s]), traj(Domain::Target, &[t]))
    }

    #[test]
    fn two_sided_planted_left() {
        let (src, tgt) = planted(21, 12, 5);
        let r = select_two_sided(&src, &tgt, 12, Aggregation::Mean).unwrap();
        assert_eq!(r.sides.as_ref().unwrap().chosen_side, Side::Left);
        assert!(r.chosen_index.abs_diff(5) <= 1, "chose {}", r.chosen_index);
    }

    #[test]
    fn two_sided_planted_right() {
        let (src, tgt) = planted(21, 8, 15);
        let r = select_two_sided(&src, &tgt, 8, Aggregation::Mean).unwrap();
        assert_eq!(r.sides.as_ref().unwrap().chosen_side, Side::Right);
        assert!(r.chosen_index.abs_diff(15) <= 1, "chose {}", r.chosen_index);
    }

    #[test]
    fn aggregation_modes() {
        assert_eq!(Aggregation::Mean.pool([0.5, -0.5, 1.0]), 1.0 / 3.0);
        assert_eq!(Aggregation::PositiveFraction.pool([0.5, -0.5, 1.0, 0.0]), 0.5);
        assert_eq!(Aggregation::Mean.pool([]), 0.0);
    }

    #[test]
    fn report_serializes_with_contract_field_names() {
        let s = [ramp(5), ramp(5), ramp(5), curve(5, |t| t * t)];
        let src = traj(Domain::Source, &[s.clone()]);
        let r = select_weighted(&src, &src).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["mode", "chosen_index", "chosen_omega", "per_layer", "critical", "no_divergence", "diagnostics"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let layer = &v["per_layer"][0];
        for key in ["layer", "t_star_l", "k_star_l", "nc_div_l", "alpha_l"] {
            assert!(layer.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["mode"], "weighted");
    }
}
