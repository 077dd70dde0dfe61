use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::mlp::{flatten_inputs, minibatch, Activation, Init, Mlp};
use crate::harness::rng::{stream, Stream};
use crate::harness::task::{Dataset, ShiftTask};
use crate::io::probe_hash;
use crate::moments::{ActivationMatrix, Domain};
use crate::trajectory::{build_trajectory, HyperparameterGrid, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub init: Init,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// A batch at least as large as the training set means full-batch descent.
    pub batch_size: usize,
    pub steps_per_checkpoint: usize,
    pub checkpoints: usize,
    pub seed: u64,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden widths must be non-empty and positive".into()));
        }
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !non_negative(self.lr) || !non_negative(self.weight_decay) || !(self.init.gain.is_finite() && self.init.gain > 0.0) {
            return Err(Error::Invalid("init gain must be positive, learning rate and weight decay non-negative".into()));
        }
        if self.batch_size == 0 || self.steps_per_checkpoint == 0 || self.checkpoints < 2 {
            return Err(Error::Invalid("need a positive batch size and at least 2 checkpoints".into()));
        }
        Ok(())
    }

    /// Training step at which checkpoint `k` was taken.
    pub fn step_of(&self, k: usize) -> usize {
        (k + 1) * self.steps_per_checkpoint
    }
}

/// Target-domain test accuracy per checkpoint. Only scoring code reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCurve {
    pub target_acc: Vec<f64>,
}

impl OracleCurve {
    /// First index of the maximum.
    pub fn best_index(&self) -> usize {
        argmax_first(&self.target_acc)
    }

    pub fn accuracy_at(&self, index: usize) -> f64 {
        self.target_acc[index]
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub spec: RunSpec,
    pub checkpoints: Vec<Mlp>,
    pub source_val_acc: Vec<f64>,
    pub train_loss: Vec<f64>,
    oracle: OracleCurve,
}

impl TrainRun {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn oracle(&self) -> &OracleCurve {
        &self.oracle
    }

    /// Checkpoint with the best source validation accuracy (first on ties).
    pub fn source_val_index(&self) -> usize {
        argmax_first(&self.source_val_acc)
    }

    /// Checkpoint with the best accuracy on a small labelled target batch.
    pub fn target_val_index(&self, labelled: &Dataset) -> usize {
        let x = flatten_inputs(&labelled.x);
        let acc: Vec<f64> = self.checkpoints.iter().map(|m| m.accuracy(&x, &labelled.y)).collect();
        argmax_first(&acc)
    }

    pub fn grid(&self) -> HyperparameterGrid {
        HyperparameterGrid::new("step", (0..self.len()).map(|k| self.spec.step_of(k) as f64).collect())
            .expect("steps are strictly increasing")
    }
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Plain SGD over one training set with counter-based minibatches.
struct Stepper<'a> {
    train: &'a Dataset,
    train_x: Vec<f64>,
    full_batch: bool,
    xb: Vec<f64>,
    yb: Vec<usize>,
    batches: rand_chacha::ChaCha8Rng,
    step: usize,
}

impl<'a> Stepper<'a> {
    fn new(train: &'a Dataset, spec: &RunSpec) -> Self {
        let bs = spec.batch_size.min(train.len());
        Self {
            train,
            train_x: flatten_inputs(&train.x),
            full_batch: spec.batch_size >= train.len(),
            xb: vec![0.0; bs * 2],
            yb: vec![0; bs],
            batches: stream(spec.seed, Stream::Batches),
            step: 0,
        }
    }

    /// Runs `steps` updates and returns their mean loss.
    fn run(&mut self, net: &mut Mlp, steps: usize, spec: &RunSpec) -> Result<f64> {
        let mut acc_loss = 0.0;
        for _ in 0..steps {
            self.step += 1;
            let loss = if self.full_batch {
                net.sgd_step(&self.train_x, &self.train.y, spec.lr, spec.weight_decay)
            } else {
                let n = self.train.len();
                for (slot, idx) in minibatch(&mut self.batches, n, self.yb.len()).into_iter().enumerate() {
                    self.xb[2 * slot] = self.train_x[2 * idx];
                    self.xb[2 * slot + 1] = self.train_x[2 * idx + 1];
                    self.yb[slot] = self.train.y[idx];
                }
                net.sgd_step(&self.xb, &self.yb, spec.lr, spec.weight_decay)
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step, loss });
            }
            acc_loss += loss;
        }
        Ok(acc_loss / steps.max(1) as f64)
    }
}

pub fn train_with_checkpoints(task: &ShiftTask, spec: &RunSpec) -> Result<TrainRun> {
    spec.validate()?;
    let n_classes = task.spec.source.n_classes;
    let mut net = Mlp::new(2, &spec.hidden, n_classes, spec.activation, spec.init, spec.seed);
    let val_x = flatten_inputs(&task.source_val.x);
    let target = task.target_test();
    let target_x = flatten_inputs(&target.x);

    let mut checkpoints = Vec::with_capacity(spec.checkpoints);
    let mut source_val_acc = Vec::with_capacity(spec.checkpoints);
    let mut target_acc = Vec::with_capacity(spec.checkpoints);
    let mut train_loss = Vec::with_capacity(spec.checkpoints);
    let mut stepper = Stepper::new(&task.train, spec);
    for _ in 0..spec.checkpoints {
        train_loss.push(stepper.run(&mut net, spec.steps_per_checkpoint, spec)?);
        source_val_acc.push(net.accuracy(&val_x, &task.source_val.y));
        target_acc.push(net.accuracy(&target_x, &target.y));
        checkpoints.push(net.clone());
    }
    Ok(TrainRun {
        spec: spec.clone(),
        checkpoints,
        source_val_acc,
        train_loss,
        oracle: OracleCurve { target_acc },
    })
}

/// Trains for `checkpoints * steps_per_checkpoint` steps on an arbitrary
/// labelled set and returns the final network.
pub fn train_final(train: &Dataset, n_classes: usize, spec: &RunSpec) -> Result<Mlp> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut net = Mlp::new(2, &spec.hidden, n_classes, spec.activation, spec.init, spec.seed);
    Stepper::new(train, spec).run(&mut net, spec.checkpoints * spec.steps_per_checkpoint, spec)?;
    Ok(net)
}

/// Which layer outputs become activation matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Post-activation output of every hidden layer.
    Hidden,
    /// Hidden layers followed by the output layer's logits.
    #[default]
    All,
}

/// Per-layer activations of one checkpoint on a fixed batch.
#[derive(Debug, Clone)]
pub struct CapturedBatch {
    pub layers: Vec<ActivationMatrix>,
    pub probe_hash: String,
}

/// `h0 .. h{L-1}` for hidden layers; the output layer is `out`.
pub fn layer_names(net: &Mlp, tap: Tap) -> Vec<String> {
    let mut names: Vec<String> = (0..net.n_hidden()).map(|l| format!("h{l}")).collect();
    if tap == Tap::All {
        names.push("out".into());
    }
    names
}

pub fn capture_activations(net: &Mlp, batch: &Dataset, domain: Domain, tap: Tap) -> CapturedBatch {
    let x = flatten_inputs(&batch.x);
    let outs = net.forward_all(&x, batch.len());
    let mut widths = net.hidden_widths();
    if tap == Tap::All {
        widths.push(net.n_outputs());
    }
    let layers = layer_names(net, tap)
        .into_iter()
        .zip(widths)
        .zip(outs)
        .map(|((name, w), values)| ActivationMatrix::new(name, domain.clone(), batch.len(), w, values))
        .collect();
    CapturedBatch {
        layers,
        probe_hash: probe_hash(&batch.input_bytes()),
    }
}

/// Moment trajectory of the first `upto + 1` checkpoints on a fixed batch.
pub fn run_trajectory(run: &TrainRun, batch: &Dataset, domain: Domain, upto: usize, tap: Tap) -> Result<Trajectory> {
    if upto >= run.len() {
        return Err(Error::Invalid(format!("checkpoint {upto} out of range for {} checkpoints", run.len())));
    }
    let points: Vec<Vec<ActivationMatrix>> = run.checkpoints[..=upto]
        .iter()
        .map(|net| capture_activations(net, batch, domain.clone(), tap).layers)
        .collect();
    let grid = run.grid();
    let grid = HyperparameterGrid::new(grid.name(), grid.values()[..=upto].to_vec())?;
    build_trajectory(&points, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::presets;
    use crate::harness::task::{generate_shift_task, SplitSizes};

    fn task() -> ShiftTask {
        let mut shift = presets::scenario_a().shift;
        shift.sizes = SplitSizes { train: 100, source_val: 100, target_test: 100 };
        generate_shift_task(&shift, 7).unwrap()
    }

    fn spec() -> RunSpec {
        RunSpec { hidden: vec![6, 5], batch_size: 25, steps_per_checkpoint: 4, checkpoints: 5, seed: 7, ..presets::reference_run() }
    }

    #[test]
    fn zero_rate_keeps_curves_constant() {
        let run = train_with_checkpoints(&task(), &RunSpec { lr: 0.0, ..spec() }).unwrap();
        assert_eq!(run.len(), 5);
        assert!(run.source_val_acc.windows(2).all(|w| w[0] == w[1]));
        assert!(run.oracle().target_acc.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn fixed_seed_reproduces_run() {
        let t = task();
        let a = train_with_checkpoints(&t, &spec()).unwrap();
        let b = train_with_checkpoints(&t, &spec()).unwrap();
        assert_eq!(a.source_val_acc, b.source_val_acc);
        assert_eq!(a.train_loss, b.train_loss);
        let c = train_with_checkpoints(&t, &RunSpec { seed: 8, ..spec() }).unwrap();
        assert_ne!(a.train_loss, c.train_loss);
    }

    #[test]
    fn capture_shapes_and_replay() {
        let t = task();
        let run = train_with_checkpoints(&t, &spec()).unwrap();
        let net = &run.checkpoints[3];
        let probe = t.probe_batch(5, 0);
        let all = capture_activations(net, &probe, Domain::Target, Tap::All);
        let hidden = capture_activations(net, &probe, Domain::Target, Tap::Hidden);
        let dims: Vec<(usize, usize)> = all.layers.iter().map(|m| (m.n_samples, m.n_features)).collect();
        assert_eq!(dims, vec![(5, 6), (5, 5), (5, 2)]);
        assert_eq!(hidden.layers.len(), 2);
        assert!(hidden.layers[1].rows().eq(all.layers[1].rows()));
        assert_eq!(all.probe_hash, capture_activations(net, &probe, Domain::Target, Tap::All).probe_hash);
        assert!(run_trajectory(&run, &probe, Domain::Target, 5, Tap::All).is_err());
        assert_eq!(run_trajectory(&run, &probe, Domain::Target, 4, Tap::All).unwrap().tau(), 4);
    }
}
