//! Synthetic pre-training data selection: for every mixture weight a
//! network is trained on `omega * A + (1 - omega) * B`, then probed with
//! fixed batches from A, B and the target.

use serde::{Deserialize, Serialize};

use crate::dataselect::{MixtureGrid, MixturePoint};
use crate::error::{Error, Result};
use crate::harness::rng::{stream, Stream};
use crate::harness::task::{Dataset, MixtureSpec};
use crate::harness::train::{capture_activations, train_final, RunSpec, Tap};
use crate::moments::Domain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub name_a: String,
    pub name_b: String,
    pub a: MixtureSpec,
    pub b: MixtureSpec,
    pub target: MixtureSpec,
    /// Weights on A; must include both 1 and 0.
    pub omegas: Vec<f64>,
    pub n_train: usize,
    /// Probe sizes for the candidate batches and the target batch.
    pub n_candidate_probe: usize,
    pub n_target_probe: usize,
    pub run: RunSpec,
    pub tap: Tap,
}

const A_TRAIN: u64 = 10;
const B_TRAIN: u64 = 11;
const A_PROBE: u64 = 12;
const B_PROBE: u64 = 13;
const T_PROBE: u64 = 14;

/// Training set with `round(omega * n)` samples from A and the rest from B.
fn mixed(a: &Dataset, b: &Dataset, omega: f64, n: usize) -> Dataset {
    let na = (omega * n as f64).round() as usize;
    let mut x = a.x[..na].to_vec();
    let mut y = a.y[..na].to_vec();
    x.extend_from_slice(&b.x[..n - na]);
    y.extend_from_slice(&b.y[..n - na]);
    Dataset { x, y }
}

pub fn mixture_grid(cfg: &MixtureConfig, seed: u64) -> Result<MixtureGrid> {
    if cfg.a.n_classes != cfg.b.n_classes || cfg.a.n_classes != cfg.target.n_classes {
        return Err(Error::DegenerateSpec("candidates and target must share the class count".into()));
    }
    let draw = |spec: &MixtureSpec, n: usize, id: u64| spec.sample_n(n, &mut stream(seed, Stream::Other(id)));
    let pool_a = draw(&cfg.a, cfg.n_train, A_TRAIN)?;
    let pool_b = draw(&cfg.b, cfg.n_train, B_TRAIN)?;
    let probe_a = draw(&cfg.a, cfg.n_candidate_probe, A_PROBE)?;
    let probe_b = draw(&cfg.b, cfg.n_candidate_probe, B_PROBE)?;
    let probe_t = draw(&cfg.target, cfg.n_target_probe, T_PROBE)?;
    let (da, db) = (Domain::Candidate(cfg.name_a.clone()), Domain::Candidate(cfg.name_b.clone()));
    let spec = RunSpec { seed, ..cfg.run.clone() };
    let points = cfg
        .omegas
        .iter()
        .map(|&w| {
            let net = train_final(&mixed(&pool_a, &pool_b, w, cfg.n_train), cfg.a.n_classes, &spec)?;
            Ok(MixturePoint {
                a: capture_activations(&net, &probe_a, da.clone(), cfg.tap).layers,
                b: capture_activations(&net, &probe_b, db.clone(), cfg.tap).layers,
                target: capture_activations(&net, &probe_t, Domain::Target, cfg.tap).layers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureGrid::new(cfg.name_a.clone(), cfg.name_b.clone(), cfg.omegas.clone(), &points)
}
