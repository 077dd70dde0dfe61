//! Choosing between candidate pre-training distributions.
//!
//! Models are trained on mixtures `omega * p_A + (1 - omega) * p_B`. Along
//! the direction toward B, the target trajectory is compared with B's; along
//! the direction toward A, with A's. The candidate whose own trajectory the
//! target follows more closely wins.

use std::collections::HashMap;

use serde::Serialize;

use crate::coherence::{coherence_matrix, CoherenceMatrix};
use crate::error::{Error, Result};
use crate::moments::{ActivationMatrix, Domain};
use crate::selection::Aggregation;
use crate::trajectory::{build_trajectory, HyperparameterGrid, Trajectory};

/// Activations of one mixture-trained model on the three probe batches.
#[derive(Debug, Clone)]
pub struct MixturePoint {
    pub a: Vec<ActivationMatrix>,
    pub b: Vec<ActivationMatrix>,
    pub target: Vec<ActivationMatrix>,
}

/// Models trained along the mixture axis between candidates A and B.
#[derive(Debug, Clone)]
pub struct MixtureGrid {
    pub name_a: String,
    pub name_b: String,
    omegas: Vec<f64>,
    trajectories: MixtureTrajectories,
}

/// Moment trajectories of A, B and the target over the mixture grid, in
/// the grid's stored order.
#[derive(Debug, Clone)]
pub struct MixtureTrajectories {
    pub a: Trajectory,
    pub b: Trajectory,
    pub target: Trajectory,
}

fn retag(batches: &[ActivationMatrix], domain: &Domain) -> Vec<ActivationMatrix> {
    batches
        .iter()
        .map(|m| ActivationMatrix {
            domain: domain.clone(),
            ..m.clone()
        })
        .collect()
}

impl MixtureGrid {
    pub fn new(
        name_a: impl Into<String>,
        name_b: impl Into<String>,
        omegas: Vec<f64>,
        points: &[MixturePoint],
    ) -> Result<Self> {
        let (name_a, name_b) = (name_a.into(), name_b.into());
        let grid = HyperparameterGrid::new("mixture_weight", omegas.clone())?;
        if omegas.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidGrid("mixture weights must lie in [0, 1]".into()));
        }
        for endpoint in [1.0, 0.0] {
            if !omegas.contains(&endpoint) {
                return Err(Error::EndpointMissing(endpoint));
            }
        }
        let (da, db) = (Domain::Candidate(name_a.clone()), Domain::Candidate(name_b.clone()));
        let collect = |pick: &dyn Fn(&MixturePoint) -> Vec<ActivationMatrix>| -> Vec<Vec<ActivationMatrix>> {
            points.iter().map(pick).collect()
        };
        let a = build_trajectory(&collect(&|p| retag(&p.a, &da)), grid.clone())?;
        let b = build_trajectory(&collect(&|p| retag(&p.b, &db)), grid.clone())?;
        let target = build_trajectory(&collect(&|p| retag(&p.target, &Domain::Target)), grid)?;
        Self::from_trajectories(name_a, name_b, MixtureTrajectories { a, b, target })
    }

    /// Builds a grid from precomputed trajectories sharing one mixture grid.
    pub fn from_trajectories(
        name_a: impl Into<String>,
        name_b: impl Into<String>,
        trajectories: MixtureTrajectories,
    ) -> Result<Self> {
        let t = &trajectories;
        t.a.check_matched(&t.target)?;
        t.b.check_matched(&t.target)?;
        let omegas = t.target.grid().values().to_vec();
        for endpoint in [1.0, 0.0] {
            if !omegas.contains(&endpoint) {
                return Err(Error::EndpointMissing(endpoint));
            }
        }
        Ok(Self {
            name_a: name_a.into(),
            name_b: name_b.into(),
            omegas,
            trajectories,
        })
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn trajectories(&self) -> &MixtureTrajectories {
        &self.trajectories
    }

    /// The same models with the candidate roles exchanged
    /// (`omega -> 1 - omega`).
    pub fn swapped(&self) -> Self {
        let flip = |t: &Trajectory| -> Trajectory {
            let grid = HyperparameterGrid::new(
                t.grid().name(),
                t.grid().values().iter().map(|w| 1.0 - w).collect(),
            )
            .expect("1 - omega preserves strict monotonicity");
            Trajectory::from_table(t.domain().clone(), grid, t.layers().to_vec(), t.rows().to_vec())
                .expect("same shape")
        };
        let t = &self.trajectories;
        Self {
            name_a: self.name_b.clone(),
            name_b: self.name_a.clone(),
            omegas: self.omegas.iter().map(|w| 1.0 - w).collect(),
            trajectories: MixtureTrajectories {
                a: flip(&t.b),
                b: flip(&t.a),
                target: flip(&t.target),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Candidate {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// `omega` decreasing from 1 to 0.
    TowardB,
    /// `omega` increasing from 0 to 1.
    TowardA,
}

/// One direction's pooled coherence with its per-cell correlations.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionalCoherence {
    pub value: f64,
    pub cells: CoherenceMatrix,
}

fn oriented(t: &Trajectory, direction: Direction) -> Trajectory {
    let increasing = t.grid().values()[1] > t.grid().values()[0];
    match (direction, increasing) {
        (Direction::TowardA, true) | (Direction::TowardB, false) => t.clone(),
        _ => t.reversed(),
    }
}

/// Full-interval coherence between the probe candidate's trajectory and
/// the target's, traversed in `direction`.
pub fn directional_coherence(
    grid: &MixtureGrid,
    probe: Candidate,
    direction: Direction,
    agg: Aggregation,
) -> Result<DirectionalCoherence> {
    let t = &grid.trajectories;
    let probe_traj = match probe {
        Candidate::A => &t.a,
        Candidate::B => &t.b,
    };
    let src = oriented(probe_traj, direction);
    let tgt = oriented(&t.target, direction);
    let cells = coherence_matrix(&src, &tgt, 0, src.tau())?;
    // over the full interval the coherence factor equals the correlation
    let value = agg.pool(cells.defined());
    Ok(DirectionalCoherence { value, cells })
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSelectionResult {
    pub winner: String,
    pub nc_ab: f64,
    pub nc_ba: f64,
    pub per_cell_ab: CoherenceMatrix,
    pub per_cell_ba: CoherenceMatrix,
}

/// B wins iff `NC(A -> B) > NC(B -> A)`; ties go to A.
pub fn select_training_distribution(grid: &MixtureGrid, agg: Aggregation) -> Result<DataSelectionResult> {
    let ab = directional_coherence(grid, Candidate::B, Direction::TowardB, agg)?;
    let ba = directional_coherence(grid, Candidate::A, Direction::TowardA, agg)?;
    let winner = if ab.value > ba.value {
        grid.name_b.clone()
    } else {
        grid.name_a.clone()
    };
    Ok(DataSelectionResult {
        winner,
        nc_ab: ab.value,
        nc_ba: ba.value,
        per_cell_ab: ab.cells,
        per_cell_ba: ba.cells,
    })
}

/// Mixture grids keyed by unordered candidate pair.
#[derive(Debug, Clone, Default)]
pub struct PairGrids {
    grids: HashMap<(String, String), MixtureGrid>,
}

impl PairGrids {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, grid: MixtureGrid) {
        self.grids.insert((grid.name_a.clone(), grid.name_b.clone()), grid);
    }

    /// Grid with `a` in the A role, swapping a stored `(b, a)` grid if needed.
    pub fn get(&self, a: &str, b: &str) -> Option<MixtureGrid> {
        if let Some(g) = self.grids.get(&(a.to_string(), b.to_string())) {
            return Some(g.clone());
        }
        self.grids.get(&(b.to_string(), a.to_string())).map(MixtureGrid::swapped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TournamentMode {
    /// Winner stays on: `c1` vs `c2`, winner vs `c3`, ...
    #[default]
    Ladder,
    /// Every pair plays; most wins takes it, ties to the earlier candidate.
    RoundRobin,
}

#[derive(Debug, Clone, Serialize)]
pub struct Match {
    pub a: String,
    pub b: String,
    pub winner: String,
    pub nc_ab: f64,
    pub nc_ba: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TournamentResult {
    pub winner: String,
    pub log: Vec<Match>,
    /// Set when an available direct comparison beats the winner, i.e. the
    /// outcome depends on the ladder order.
    pub intransitive: bool,
    /// Candidates that beat the winner head to head.
    pub beaten_by: Vec<String>,
}

fn play(grids: &PairGrids, a: &str, b: &str, agg: Aggregation) -> Result<Match> {
    let grid = grids
        .get(a, b)
        .ok_or_else(|| Error::MissingPairGrid(a.to_string(), b.to_string()))?;
    let r = select_training_distribution(&grid, agg)?;
    Ok(Match {
        a: a.to_string(),
        b: b.to_string(),
        winner: r.winner,
        nc_ab: r.nc_ab,
        nc_ba: r.nc_ba,
    })
}

/// Picks the best of several candidates by pairwise comparisons.
pub fn tournament_select(
    candidates: &[String],
    grids: &PairGrids,
    agg: Aggregation,
    mode: TournamentMode,
) -> Result<TournamentResult> {
    if candidates.len() < 2 {
        return Err(Error::Invalid("tournament needs at least 2 candidates".into()));
    }
    let mut log = Vec::new();
    let winner = match mode {
        TournamentMode::Ladder => {
            let mut champion = candidates[0].clone();
            for challenger in &candidates[1..] {
                let m = play(grids, &champion, challenger, agg)?;
                champion = m.winner.clone();
                log.push(m);
            }
            champion
        }
        TournamentMode::RoundRobin => {
            let mut wins = vec![0usize; candidates.len()];
            for i in 0..candidates.len() {
                for j in i + 1..candidates.len() {
                    let m = play(grids, &candidates[i], &candidates[j], agg)?;
                    let w = if m.winner == candidates[i] { i } else { j };
                    wins[w] += 1;
                    log.push(m);
                }
            }
            let best = (0..candidates.len()).fold(0, |b, i| if wins[i] > wins[b] { i } else { b });
            candidates[best].clone()
        }
    };
    let beaten_by: Vec<String> = candidates
        .iter()
        .filter(|c| **c != winner)
        .filter_map(|c| {
            let grid = grids.get(&winner, c)?;
            let r = select_training_distribution(&grid, agg).ok()?;
            (r.winner == *c).then(|| c.clone())
        })
        .collect();
    Ok(TournamentResult {
        winner,
        log,
        intransitive: !beaten_by.is_empty(),
        beaten_by,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::MomentVector;
    use crate::trajectory::Trajectory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const OMEGAS: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.0];

    fn traj(domain: Domain, rows: &[[f64; 4]]) -> Trajectory {
        let grid = HyperparameterGrid::new("mixture_weight", OMEGAS[..rows.len()].to_vec()).unwrap();
        let table = rows
            .iter()
            .map(|r| vec![MomentVector::new(r[0], r[1], r[2], r[3])])
            .collect();
        Trajectory::from_table(domain, grid, vec!["l0".into()], table).unwrap()
    }

    fn rows(mut f: impl FnMut(usize, usize) -> f64) -> Vec<[f64; 4]> {
        (0..OMEGAS.len()).map(|i| [f(i, 0), f(i, 1), f(i, 2), f(i, 3)]).collect::<Vec<_>>()
    }

    fn grid(a: Vec<[f64; 4]>, b: Vec<[f64; 4]>, t: Vec<[f64; 4]>) -> MixtureGrid {
        MixtureGrid::from_trajectories(
            "A",
            "B",
            MixtureTrajectories {
                a: traj(Domain::Candidate("A".into()), &a),
                b: traj(Domain::Candidate("B".into()), &b),
                target: traj(Domain::Target, &t),
            },
        )
        .unwrap()
    }

    /// Target tracks B's moments; A's moments move against the target.
    fn co_moving_with_b(rng: &mut ChaCha8Rng) -> MixtureGrid {
        let base: Vec<[f64; 4]> = rows(|i, k| (i as f64) * (1.0 + k as f64) + rng.random_range(-0.2..0.2));
        let t = base.clone();
        let b: Vec<[f64; 4]> = base.iter().map(|r| r.map(|v| 2.0 * v + 1.0)).collect();
        let a: Vec<[f64; 4]> = base.iter().map(|r| r.map(|v| 5.0 - v)).collect();
        grid(a, b, t)
    }

    #[test]
    fn target_equal_to_b_gives_full_coherence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = co_moving_with_b(&mut rng);
        let ab = directional_coherence(&g, Candidate::B, Direction::TowardB, Aggregation::Mean).unwrap();
        assert!((ab.value - 1.0).abs() < 1e-12);
        let r = select_training_distribution(&g, Aggregation::Mean).unwrap();
        assert_eq!(r.winner, "B");
        assert!(r.nc_ab > r.nc_ba);
    }

    #[test]
    fn target_equal_to_a_favours_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<[f64; 4]> = rows(|i, k| (i * i) as f64 + k as f64 + rng.random_range(-0.5..0.5));
        let b: Vec<[f64; 4]> = base.iter().map(|r| r.map(|v| -v)).collect();
        let g = grid(base.clone(), b, base);
        let ba = directional_coherence(&g, Candidate::A, Direction::TowardA, Aggregation::Mean).unwrap();
        let ab = directional_coherence(&g, Candidate::B, Direction::TowardB, Aggregation::Mean).unwrap();
        assert!((ba.value - 1.0).abs() < 1e-12);
        assert!(ab.value <= ba.value);
        assert_eq!(select_training_distribution(&g, Aggregation::Mean).unwrap().winner, "A");
    }

    #[test]
    fn directional_value_is_mean_of_cell_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = || rows(|_, _| rng.random_range(-1.0..1.0));
        let g = grid(r(), r(), r());
        let ab = directional_coherence(&g, Candidate::B, Direction::TowardB, Aggregation::Mean).unwrap();
        let t = g.trajectories();
        let mut sum = 0.0;
        for k in crate::moments::Moment::ALL {
            sum += crate::coherence::pearson_interval(&t.b.series(0, k), &t.target.series(0, k), 0, 4)
                .unwrap()
                .unwrap();
        }
        assert!((ab.value - sum / 4.0).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab.value));
    }

    #[test]
    fn tie_goes_to_a_and_swap_flips() {
        let base: Vec<[f64; 4]> = rows(|i, k| (i + k) as f64);
        let g = grid(base.clone(), base.clone(), base);
        let r = select_training_distribution(&g, Aggregation::Mean).unwrap();
        assert_eq!(r.nc_ab, r.nc_ba);
        assert_eq!(r.winner, "A");

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = co_moving_with_b(&mut rng);
            let swapped = g.swapped();
            assert_eq!(select_training_distribution(&g, Aggregation::Mean).unwrap().winner, "B");
            assert_eq!(select_training_distribution(&swapped, Aggregation::Mean).unwrap().winner, "B");
            assert_eq!(swapped.name_a, "B");
        }
    }

    #[test]
    fn missing_endpoint() {
        let t = traj(Domain::Target, &rows(|i, _| i as f64)[..4]);
        let err = MixtureGrid::from_trajectories(
            "A",
            "B",
            MixtureTrajectories {
                a: t.clone(),
                b: t.clone(),
                target: t,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::EndpointMissing(w) if w == 0.0));
    }

    #[test]
    fn builds_from_activation_batches() {
        let scaled = |layer: &str, c: f64| ActivationMatrix::new(layer, Domain::Source, 2, 3, vec![c; 6]);
        let points: Vec<MixturePoint> = OMEGAS
            .iter()
            .map(|&w| MixturePoint {
                a: vec![scaled("l0", 3.0 - w)],
                b: vec![scaled("l0", 1.0 + 2.0 * (1.0 - w))],
                target: vec![scaled("l0", 0.5 + (1.0 - w))],
            })
            .collect();
        let g = MixtureGrid::new("A", "B", OMEGAS.to_vec(), &points).unwrap();
        assert_eq!(g.trajectories().target.domain(), &Domain::Target);
        assert_eq!(select_training_distribution(&g, Aggregation::Mean).unwrap().winner, "B");
    }

    /// Pair grid in which `winner` is followed by the target.
    fn pair(a: &str, b: &str, b_wins: bool, rng: &mut ChaCha8Rng) -> MixtureGrid {
        let g = co_moving_with_b(rng);
        let g = if b_wins { g } else { g.swapped() };
        // relabel so the grid's roles are (a, b)
        let t = g.trajectories().clone();
        MixtureGrid::from_trajectories(a, b, t).unwrap()
    }

    fn permutations(items: &[String]) -> Vec<Vec<String>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head.clone());
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn dominant_candidate_wins_every_ladder_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let names: Vec<String> = ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        // strict order z > y > x > w
        let mut grids = PairGrids::new();
        for i in 0..4 {
            for j in i + 1..4 {
                grids.insert(pair(&names[i], &names[j], true, &mut rng));
            }
        }
        let orders = permutations(&names);
        assert_eq!(orders.len(), 24);
        for order in orders {
            let r = tournament_select(&order, &grids, Aggregation::Mean, TournamentMode::Ladder).unwrap();
            assert_eq!(r.winner, "z", "order {order:?}");
            assert!(!r.intransitive);
        }
        let rr = tournament_select(&names, &grids, Aggregation::Mean, TournamentMode::RoundRobin).unwrap();
        assert_eq!(rr.winner, "z");
        assert_eq!(rr.log.len(), 6);
    }

    #[test]
    fn two_candidates_match_direct_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = co_moving_with_b(&mut rng);
        let direct = select_training_distribution(&g, Aggregation::Mean).unwrap();
        let mut grids = PairGrids::new();
        grids.insert(g);
        let r = tournament_select(&["A".into(), "B".into()], &grids, Aggregation::Mean, TournamentMode::Ladder)
            .unwrap();
        assert_eq!(r.winner, direct.winner);
        assert_eq!(r.log[0].nc_ab, direct.nc_ab);
    }

    #[test]
    fn rock_paper_scissors_depends_on_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // rock < paper < scissors < rock
        let mut grids = PairGrids::new();
        grids.insert(pair("rock", "paper", true, &mut rng));
        grids.insert(pair("paper", "scissors", true, &mut rng));
        grids.insert(pair("scissors", "rock", true, &mut rng));
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let a = tournament_select(&names(&["rock", "paper", "scissors"]), &grids, Aggregation::Mean, TournamentMode::Ladder)
            .unwrap();
        let b = tournament_select(&names(&["paper", "scissors", "rock"]), &grids, Aggregation::Mean, TournamentMode::Ladder)
            .unwrap();
        assert_ne!(a.winner, b.winner);
        assert!(a.intransitive && b.intransitive);
    }

    #[test]
    fn missing_pair_grid() {
        let grids = PairGrids::new();
        let err = tournament_select(&["a".into(), "b".into()], &grids, Aggregation::Mean, TournamentMode::Ladder)
            .unwrap_err();
        assert!(matches!(err, Error::MissingPairGrid(..)));
    }
}
