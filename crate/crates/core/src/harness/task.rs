//! Synthetic 2-D Gaussian-mixture classification tasks with a controllable
//! source/target shift.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::rng::{stream, Stream};

/// One Gaussian blob of a class-conditional mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub class: usize,
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Component {
    pub fn isotropic(class: usize, weight: f64, mean: [f64; 2], std: f64) -> Self {
        Self {
            class,
            weight,
            mean,
            cov: [[std * std, 0.0], [0.0, std * std]],
        }
    }
}

/// Parametric input distribution: a labelled Gaussian mixture, then a
/// rotation, then a per-feature mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub components: Vec<Component>,
    /// Probability that a label is replaced by a different random class.
    pub label_noise: f64,
    /// Rotation applied to every sample, radians.
    pub rotation: f64,
    /// Multiplies each input feature; `1` keeps it, `0` drops it.
    pub feature_mask: [f64; 2],
}

impl MixtureSpec {
    pub fn with_rotation(mut self, radians: f64) -> Self {
        self.rotation = radians;
        self
    }

    pub fn with_label_noise(mut self, rate: f64) -> Self {
        self.label_noise = rate;
        self
    }

    pub fn with_feature_mask(mut self, mask: [f64; 2]) -> Self {
        self.feature_mask = mask;
        self
    }

    /// `n` labelled samples from a seeded stream.
    pub fn sample_n(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let factors = self.validate()?;
        Ok(self.sample(&factors, n, rng))
    }

    fn validate(&self) -> Result<Vec<[[f64; 2]; 2]>> {
        if self.n_classes < 2 {
            return Err(Error::DegenerateSpec("need at least 2 classes".into()));
        }
        if self.components.is_empty() {
            return Err(Error::DegenerateSpec("no mixture components".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::DegenerateSpec(format!("label noise {} outside [0, 1)", self.label_noise)));
        }
        if !self.rotation.is_finite() || self.feature_mask.iter().any(|m| !m.is_finite()) {
            return Err(Error::DegenerateSpec("non-finite rotation or mask".into()));
        }
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.class >= self.n_classes {
                    return Err(Error::DegenerateSpec(format!("component {i} has class {}", c.class)));
                }
                if !(c.weight > 0.0 && c.weight.is_finite()) {
                    return Err(Error::DegenerateSpec(format!("component {i} weight {}", c.weight)));
                }
                if c.mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::DegenerateSpec(format!("component {i} mean is not finite")));
                }
                cholesky(&c.cov).ok_or_else(|| {
                    Error::DegenerateSpec(format!("component {i} covariance is not symmetric PSD"))
                })
            })
            .collect()
    }

    fn sample(&self, factors: &[[[f64; 2]; 2]], n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let (sin, cos) = self.rotation.sin_cos();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut pick = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                if u < c.weight {
                    pick = i;
                    break;
                }
                u -= c.weight;
            }
            let c = &self.components[pick];
            let l = &factors[pick];
            let z0: f64 = StandardNormal.sample(rng);
            let z1: f64 = StandardNormal.sample(rng);
            let p0 = c.mean[0] + l[0][0] * z0;
            let p1 = c.mean[1] + l[1][0] * z0 + l[1][1] * z1;
            let r0 = cos * p0 - sin * p1;
            let r1 = sin * p0 + cos * p1;
            x.push([r0 * self.feature_mask[0], r1 * self.feature_mask[1]]);
            let mut label = c.class;
            if self.label_noise > 0.0 && rng.random::<f64>() < self.label_noise {
                let other = rng.random_range(0..self.n_classes - 1);
                label = if other >= label { other + 1 } else { other };
            }
            y.push(label);
        }
        Dataset { x, y }
    }
}

/// Lower Cholesky factor of a symmetric PSD 2x2 matrix.
fn cholesky(c: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let tol = 1e-12 * (c[0][0].abs() + c[1][1].abs()).max(1.0);
    if (c[0][1] - c[1][0]).abs() > tol || c.iter().flatten().any(|v| !v.is_finite()) {
        return None;
    }
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    if c[0][0] < 0.0 || c[1][1] < 0.0 || det < -tol {
        return None;
    }
    let l00 = c[0][0].sqrt();
    let l10 = if l00 > 0.0 { c[1][0] / l00 } else { 0.0 };
    let l11 = (c[1][1] - l10 * l10).max(0.0).sqrt();
    Some([[l00, 0.0], [l10, l11]])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Flattened `f32` inputs, as hashed into the manifest.
    pub fn input_bytes(&self) -> Vec<f32> {
        self.x.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub source_val: usize,
    pub target_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 1000,
            source_val: 1000,
            target_test: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub source: MixtureSpec,
    pub target: MixtureSpec,
    pub sizes: SplitSizes,
}

#[derive(Debug, Clone)]
pub struct ShiftTask {
    pub spec: ShiftSpec,
    pub seed: u64,
    pub train: Dataset,
    pub source_val: Dataset,
    target_test: Dataset,
    target_factors: Vec<[[f64; 2]; 2]>,
}

impl ShiftTask {
    /// Labelled target test split; only for scoring selections.
    pub fn target_test(&self) -> &Dataset {
        &self.target_test
    }

    /// A fresh labelled batch of `n` target samples for trial `trial`,
    /// drawn independently of the target test split.
    pub fn probe_batch(&self, n: usize, trial: u64) -> Dataset {
        let mut rng = stream(self.seed, Stream::Probe(trial));
        self.spec.target.sample(&self.target_factors, n, &mut rng)
    }

    /// Rotation and label-noise knobs, for reports.
    pub fn severity(&self) -> serde_json::Value {
        serde_json::json!({
            "rotation": self.spec.target.rotation - self.spec.source.rotation,
            "source_label_noise": self.spec.source.label_noise,
            "target_label_noise": self.spec.target.label_noise,
            "target_feature_mask": self.spec.target.feature_mask,
        })
    }
}

pub fn generate_shift_task(spec: &ShiftSpec, seed: u64) -> Result<ShiftTask> {
    let source_factors = spec.source.validate()?;
    let target_factors = spec.target.validate()?;
    if spec.source.n_classes != spec.target.n_classes {
        return Err(Error::DegenerateSpec("source and target class counts differ".into()));
    }
    let s = &spec.sizes;
    if s.train == 0 || s.source_val == 0 || s.target_test == 0 {
        return Err(Error::DegenerateSpec("empty split".into()));
    }
    let train = spec.source.sample(&source_factors, s.train, &mut stream(seed, Stream::Train));
    let source_val = spec.source.sample(&source_factors, s.source_val, &mut stream(seed, Stream::SourceVal));
    let target_test = spec
        .target
        .sample(&target_factors, s.target_test, &mut stream(seed, Stream::TargetTest));
    Ok(ShiftTask {
        spec: spec.clone(),
        seed,
        train,
        source_val,
        target_test,
        target_factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple() -> MixtureSpec {
        MixtureSpec {
            n_classes: 2,
            components: vec![
                Component::isotropic(0, 1.0, [-1.0, 0.0], 0.5),
                Component::isotropic(1, 1.0, [1.0, 0.0], 0.5),
            ],
            label_noise: 0.0,
            rotation: 0.0,
            feature_mask: [1.0, 1.0],
        }
    }

    fn spec(target: MixtureSpec) -> ShiftSpec {
        ShiftSpec {
            source: simple(),
            target,
            sizes: SplitSizes {
                train: 200,
                source_val: 100,
                target_test: 100,
            },
        }
    }

    #[test]
    fn zero_shift_has_matching_distributions() {
        let task = generate_shift_task(&spec(simple()), 1).unwrap();
        assert_eq!(task.train.len(), 200);
        assert_eq!(task.target_test().len(), 100);
        let mean = |d: &Dataset| d.x.iter().map(|p| p[0]).sum::<f64>() / d.len() as f64;
        let (ms, mt) = (mean(&task.source_val), mean(task.target_test()));
        assert!((ms - mt).abs() < 0.4);
    }

    #[test]
    fn rotation_moves_means() {
        let rotated = simple().with_rotation(std::f64::consts::FRAC_PI_2);
        let task = generate_shift_task(&spec(rotated), 2).unwrap();
        // class 1 sits at (1, 0) in the source and at (0, 1) in the target
        let cls1: Vec<&[f64; 2]> = task
            .target_test()
            .x
            .iter()
            .zip(&task.target_test().y)
            .filter_map(|(p, &y)| (y == 1).then_some(p))
            .collect();
        let my = cls1.iter().map(|p| p[1]).sum::<f64>() / cls1.len() as f64;
        assert!((my - 1.0).abs() < 0.2, "{my}");
    }

    #[test]
    fn label_noise_rate() {
        let mut s = spec(simple());
        s.source = simple().with_label_noise(0.2);
        s.sizes.train = 5000;
        s.source.components[0].cov = [[1e-6, 0.0], [0.0, 1e-6]];
        s.source.components[1].cov = [[1e-6, 0.0], [0.0, 1e-6]];
        let task = generate_shift_task(&s, 3).unwrap();
        let flipped = task
            .train
            .x
            .iter()
            .zip(&task.train.y)
            .filter(|(p, &y)| (p[0] > 0.0) != (y == 1))
            .count();
        let rate = flipped as f64 / 5000.0;
        assert!((rate - 0.2).abs() < 0.03, "{rate}");
    }

    #[test]
    fn feature_mask_zeroes_inputs() {
        let task = generate_shift_task(&spec(simple().with_feature_mask([1.0, 0.0])), 4).unwrap();
        assert!(task.target_test().x.iter().all(|p| p[1] == 0.0));
    }

    #[test]
    fn degenerate_specs() {
        let mut bad = simple();
        bad.components[0].cov = [[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(generate_shift_task(&spec(bad), 0), Err(Error::DegenerateSpec(_))));
        let mut bad = simple();
        bad.components[1].cov = [[1.0, 0.5], [0.0, 1.0]];
        assert!(matches!(generate_shift_task(&spec(bad), 0), Err(Error::DegenerateSpec(_))));
        let mut bad = simple();
        bad.components[1].class = 5;
        assert!(generate_shift_task(&spec(bad), 0).is_err());
        assert!(generate_shift_task(&spec(simple().with_label_noise(1.0)), 0).is_err());
    }

    #[test]
    fn seeded_and_probe_disjoint_stream() {
        let a = generate_shift_task(&spec(simple()), 9).unwrap();
        let b = generate_shift_task(&spec(simple()), 9).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.probe_batch(5, 0), b.probe_batch(5, 0));
        assert_ne!(a.probe_batch(5, 0), a.probe_batch(5, 1));
        let probe = a.probe_batch(5, 0);
        assert!(probe.x.iter().all(|p| !a.target_test().x.contains(p)));
    }
}
