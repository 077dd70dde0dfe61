//! Reference configurations for the end-to-end checks.
//!
//! Scenario A: source classes split along `x1` (wide, overlapping) and
//! along a thin, nearly noise-free `x2` offset, with 20% label noise. Once
//! `x1` is fitted the remaining loss turns the network toward `x2`, so
//! the decision direction sweeps from roughly `x1` toward `x2` during
//! training while source validation accuracy keeps creeping up.
//!
//! The target is a round class pair rotated by a small angle, with `x2`
//! attenuated. Its best direction is crossed early in the sweep, after
//! which target accuracy falls. Its logit spread also falls, because the
//! attenuated `x2` carries little variance, while the source's keeps
//! growing. That is the moment divergence NC looks for.
//!
//! A pure rotation of the source keeps the thin direction. The target's
//! best direction is then also its lowest-variance one, so its logit
//! spread has a minimum at the accuracy peak and diverges from the source
//! before the peak rather than after it.

use std::f64::consts::PI;

use crate::harness::mixture::MixtureConfig;
use crate::harness::mlp::{Activation, Init};
use crate::harness::scenario::{GridCut, ScenarioConfig};
use crate::harness::task::{Component, MixtureSpec, ShiftSpec, SplitSizes};
use crate::harness::train::{RunSpec, Tap};

pub const SCENARIO_A_ROTATION_DEG: f64 = 15.0;
pub const SCENARIO_A_X2_SCALE: f64 = 0.12;
pub const SCENARIO_A_LABEL_NOISE: f64 = 0.2;

/// Two elongated class blobs: `x1` mean `±sep` with unit spread, `x2`
/// mean `±offset` with spread `thin`.
pub fn spurious_pair(sep: f64, offset: f64, thin: f64) -> MixtureSpec {
    let cov = [[1.0, 0.0], [0.0, thin * thin]];
    MixtureSpec {
        n_classes: 2,
        components: vec![
            Component { class: 0, weight: 1.0, mean: [-sep, -offset], cov },
            Component { class: 1, weight: 1.0, mean: [sep, offset], cov },
        ],
        label_noise: 0.0,
        rotation: 0.0,
        feature_mask: [1.0, 1.0],
    }
}

/// Three hidden layers of 32 plus the output layer, all four tapped.
/// Full-batch descent, zero-initialised output layer.
pub fn reference_run() -> RunSpec {
    RunSpec {
        hidden: vec![32; 3],
        activation: Activation::Relu,
        init: Init { gain: 1.0, zero_head: true },
        lr: 0.015,
        weight_decay: 0.0,
        batch_size: 1000,
        steps_per_checkpoint: 20,
        checkpoints: 40,
        seed: 0,
    }
}

fn base_config(name: &str, shift: ShiftSpec) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        shift,
        run: reference_run(),
        tap: Tap::All,
        grid_cut: GridCut::SourceValPeak,
        min_gap: 5,
        tolerance: 0.15,
    }
}

/// Two round classes at `(±sep, 0)` with spread `sd`.
pub fn round_pair(sep: f64, sd: f64) -> MixtureSpec {
    MixtureSpec {
        n_classes: 2,
        components: vec![Component::isotropic(0, 1.0, [-sep, 0.0], sd), Component::isotropic(1, 1.0, [sep, 0.0], sd)],
        label_noise: 0.0,
        rotation: 0.0,
        feature_mask: [1.0, 1.0],
    }
}

pub fn scenario_a() -> ScenarioConfig {
    base_config(
        "scenario_a",
        ShiftSpec {
            source: spurious_pair(1.0, 0.5, 0.02).with_label_noise(SCENARIO_A_LABEL_NOISE),
            target: round_pair(1.0, 0.7)
                .with_rotation(SCENARIO_A_ROTATION_DEG.to_radians())
                .with_feature_mask([1.0, SCENARIO_A_X2_SCALE]),
            sizes: SplitSizes::default(),
        },
    )
}

/// Zero shift: the target is the (noisy) source distribution itself.
pub fn scenario_b() -> ScenarioConfig {
    let source = spurious_pair(1.0, 0.5, 0.02).with_label_noise(SCENARIO_A_LABEL_NOISE);
    base_config(
        "scenario_b",
        ShiftSpec { source: source.clone(), target: source, sizes: SplitSizes::default() },
    )
}

/// Scenario A on a deep narrow network: 11 hidden layers plus the output
/// layer give 12 tapped layers.
pub fn deep_ablation() -> ScenarioConfig {
    let mut cfg = scenario_a();
    cfg.name = "deep_ablation".into();
    cfg.run.hidden = vec![16; 11];
    cfg
}

/// Candidate A separates classes along `x1`, candidate B along `x2`; the
/// target is B seen through a slight rotation, so its trajectory follows
/// B's as training data moves toward B.
pub fn data_selection() -> MixtureConfig {
    let along = |angle: f64| MixtureSpec {
        n_classes: 2,
        components: vec![
            Component::isotropic(0, 1.0, [-1.5, 0.0], 0.7),
            Component::isotropic(1, 1.0, [1.5, 0.0], 0.7),
        ],
        label_noise: 0.0,
        rotation: angle,
        feature_mask: [1.0, 1.0],
    };
    MixtureConfig {
        name_a: "A".into(),
        name_b: "B".into(),
        a: along(0.0),
        b: along(PI / 2.0),
        target: along(PI / 2.0 + 10f64.to_radians()),
        omegas: vec![1.0, 0.75, 0.5, 0.25, 0.0],
        n_train: 500,
        n_candidate_probe: 64,
        n_target_probe: 5,
        run: RunSpec {
            hidden: vec![16; 3],
            activation: Activation::Relu,
            init: Init::default(),
            lr: 0.05,
            weight_decay: 0.0,
            batch_size: 32,
            steps_per_checkpoint: 100,
            checkpoints: 4,
            seed: 0,
        },
        tap: Tap::All,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::{stream, Stream};

    #[test]
    fn presets_are_valid() {
        for cfg in [scenario_a(), scenario_b(), deep_ablation()] {
            cfg.run.validate().unwrap();
            for spec in [&cfg.shift.source, &cfg.shift.target] {
                let d = spec.sample_n(50, &mut stream(0, Stream::Other(0))).unwrap();
                assert!(d.x.iter().flatten().all(|v| v.is_finite()));
            }
        }
        assert_eq!(deep_ablation().run.hidden.len() + 1, 12);
        let ds = data_selection();
        ds.run.validate().unwrap();
        assert!(ds.omegas.contains(&0.0) && ds.omegas.contains(&1.0));
    }

    #[test]
    fn scenario_b_has_no_shift() {
        let b = scenario_b();
        assert_eq!(b.shift.source, b.shift.target);
        let a = scenario_a();
        assert_eq!(a.shift.source.label_noise, SCENARIO_A_LABEL_NOISE);
        assert_eq!(a.shift.target.feature_mask, [1.0, SCENARIO_A_X2_SCALE]);
    }
}
