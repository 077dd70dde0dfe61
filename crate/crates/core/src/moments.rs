//! Aggregated activation moments.
//!
//! A layer's activation batch is an `N x D` matrix. Its distribution is
//! summarized by four scalars built from the feature-wise first moment
//! `E[z]` and the second-moment matrix `E[z z^T]`:
//!
//! - `m1`: mean over features of `E[z_i]`
//! - `m2`: mean over features of `E[z_i]^2`
//! - `m3`: mean of the diagonal `E[z_i^2]`
//! - `m4`: mean of the off-diagonal `E[z_i z_j]`, `i != j`
//!
//! All accumulation happens in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four aggregated moments, indexed `0..4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Moment {
    M1,
    M2,
    M3,
    M4,
}

impl Moment {
    pub const ALL: [Moment; 4] = [Moment::M1, Moment::M2, Moment::M3, Moment::M4];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Moment> {
        Self::ALL.get(k).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Moment::M1 => "m1",
            Moment::M2 => "m2",
            Moment::M3 => "m3",
            Moment::M4 => "m4",
        }
    }
}

impl std::fmt::Display for Moment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which input distribution a batch of activations came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
    Candidate(String),
}

impl Domain {
    /// Tag used in tensor names and manifests: `source`, `target`,
    /// `candidate:<name>`.
    pub fn tag(&self) -> String {
        match self {
            Domain::Source => "source".into(),
            Domain::Target => "target".into(),
            Domain::Candidate(name) => format!("candidate:{name}"),
        }
    }

    pub fn parse(tag: &str) -> Result<Domain> {
        match tag {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => match other.strip_prefix("candidate:") {
                Some(name) if !name.is_empty() => Ok(Domain::Candidate(name.to_string())),
                _ => Err(Error::Invalid(format!("unknown domain tag `{tag}`"))),
            },
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.tag())
    }
}

/// How a multi-dimensional layer output becomes rows of features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlattenMode {
    /// `D = channels x spatial positions`.
    #[default]
    Full,
    /// Average over spatial positions, `D = channels`.
    SpatialMean,
}

/// One layer's activations for one domain batch at one checkpoint.
///
/// Values are row-major: row = sample, column = feature. The declared
/// shape is kept separately from the payload so a decoded container can be
/// checked with [`validate_activation_matrix`] before use.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer_id: String,
    pub domain: Domain,
    pub n_samples: usize,
    pub n_features: usize,
    pub values: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(
        layer_id: impl Into<String>,
        domain: Domain,
        n_samples: usize,
        n_features: usize,
        values: Vec<f64>,
    ) -> Self {
        Self {
            layer_id: layer_id.into(),
            domain,
            n_samples,
            n_features,
            values,
        }
    }

    /// Builds a matrix from rows, taking the shape from the data.
    pub fn from_rows(layer_id: impl Into<String>, domain: Domain, rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let values = rows.iter().flatten().copied().collect();
        Self::new(layer_id, domain, n, d, values)
    }

    /// Reshapes an `N x C x S` tensor (S = product of spatial dims) into
    /// an activation matrix according to `mode`.
    pub fn from_tensor(
        layer_id: impl Into<String>,
        domain: Domain,
        dims: &[usize],
        values: Vec<f64>,
        mode: FlattenMode,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        let Some((&n, rest)) = dims.split_first() else {
            return Err(Error::Invalid(format!("tensor `{layer_id}` has rank 0")));
        };
        let full: usize = rest.iter().product();
        let expected = n * full;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: values.len(),
            });
        }
        match (mode, rest) {
            (FlattenMode::SpatialMean, [channels, spatial @ ..]) if !spatial.is_empty() && full > 0 => {
                let s: usize = spatial.iter().product();
                let mut pooled = Vec::with_capacity(n * channels);
                for block in values.chunks_exact(s) {
                    pooled.push(block.iter().sum::<f64>() / s as f64);
                }
                Ok(Self::new(layer_id, domain, n, *channels, pooled))
            }
            _ => Ok(Self::new(layer_id, domain, n, full, values)),
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_features..(n + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_features.max(1))
    }

    /// Returns the first hard error that would block moment computation.
    fn check(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_features == 0 {
            return Err(Error::EmptyMatrix);
        }
        let expected = self.n_samples * self.n_features;
        if self.values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.values.len(),
            });
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.n_features,
                col: pos % self.n_features,
            });
        }
        Ok(())
    }
}

/// Aggregated moments of one activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentVector {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    /// Set when `D = 1`; `m4` is then defined as 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_feature: bool,
}

impl MomentVector {
    pub fn new(m1: f64, m2: f64, m3: f64, m4: f64) -> Self {
        Self {
            m1,
            m2,
            m3,
            m4,
            single_feature: false,
        }
    }

    pub fn get(&self, moment: Moment) -> f64 {
        match moment {
            Moment::M1 => self.m1,
            Moment::M2 => self.m2,
            Moment::M3 => self.m3,
            Moment::M4 => self.m4,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.m1, self.m2, self.m3, self.m4]
    }
}

/// Column means of a validated matrix.
fn column_means(acts: &ActivationMatrix) -> Vec<f64> {
    let mut means = vec![0.0; acts.n_features];
    for row in acts.rows() {
        for (acc, &v) in means.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = acts.n_samples as f64;
    means.iter_mut().for_each(|m| *m /= n);
    means
}

fn first_order(acts: &ActivationMatrix) -> (f64, f64, f64) {
    let means = column_means(acts);
    let d = acts.n_features as f64;
    let m1 = means.iter().sum::<f64>() / d;
    let m2 = means.iter().map(|m| m * m).sum::<f64>() / d;
    let diag = acts.values.iter().map(|v| v * v).sum::<f64>() / acts.n_samples as f64;
    (m1, m2, diag / d)
}

/// Computes the aggregated moments by direct evaluation of the defining
/// sums: the off-diagonal term visits every ordered feature pair, so this
/// is `O(N * D^2)`.
pub fn aggregated_moments(acts: &ActivationMatrix) -> Result<MomentVector> {
    acts.check()?;
    let (m1, m2, m3) = first_order(acts);
    let d = acts.n_features;
    let m4 = if d == 1 {
        0.0
    } else {
        let mut off = 0.0;
        for row in acts.rows() {
            for (i, &a) in row.iter().enumerate() {
                let mut partial = 0.0;
                for (j, &b) in row.iter().enumerate() {
                    if i != j {
                        partial += b;
                    }
                }
                off += a * partial;
            }
        }
        off / acts.n_samples as f64 / (d * d - d) as f64
    };
    Ok(MomentVector {
        m1,
        m2,
        m3,
        m4,
        single_feature: d == 1,
    })
}

/// Same result as [`aggregated_moments`] in `O(N * D)` using
/// `sum_{i,j} E[z_i z_j] = E[(sum_i z_i)^2]`.
pub fn aggregated_moments_fast(acts: &ActivationMatrix) -> Result<MomentVector> {
    acts.check()?;
    let n = acts.n_samples as f64;
    let d = acts.n_features;
    let df = d as f64;
    let mut col_sum = vec![0.0; d];
    let mut sq_sum = 0.0;
    let mut row_sq_sum = 0.0;
    for row in acts.rows() {
        let mut s = 0.0;
        for (acc, &v) in col_sum.iter_mut().zip(row) {
            *acc += v;
            sq_sum += v * v;
            s += v;
        }
        row_sq_sum += s * s;
    }
    let m1 = col_sum.iter().sum::<f64>() / n / df;
    let m2 = col_sum.iter().map(|s| (s / n) * (s / n)).sum::<f64>() / df;
    let m3 = sq_sum / n / df;
    let m4 = if d == 1 {
        0.0
    } else {
        (row_sq_sum / n - df * m3) / (df * df - df)
    };
    Ok(MomentVector {
        m1,
        m2,
        m3,
        m4,
        single_feature: d == 1,
    })
}

/// One problem found by [`validate_activation_matrix`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    NonFinite { row: usize, col: usize },
    ZeroSamples,
    ZeroFeatures,
    ShapeMismatch { declared_rows: usize, declared_cols: usize, payload_len: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonFinite { row, col } => write!(f, "non-finite value at ({row}, {col})"),
            Violation::ZeroSamples => f.write_str("zero samples"),
            Violation::ZeroFeatures => f.write_str("zero features"),
            Violation::ShapeMismatch {
                declared_rows,
                declared_cols,
                payload_len,
            } => write!(
                f,
                "declared {declared_rows}x{declared_cols} but payload holds {payload_len} values"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationVerdict {
    pub violations: Vec<Violation>,
}

impl ValidationVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every violation instead of stopping at the first.
pub fn validate_activation_matrix(acts: &ActivationMatrix) -> ValidationVerdict {
    let mut violations = Vec::new();
    if acts.n_samples == 0 {
        violations.push(Violation::ZeroSamples);
    }
    if acts.n_features == 0 {
        violations.push(Violation::ZeroFeatures);
    }
    if acts.values.len() != acts.n_samples * acts.n_features {
        violations.push(Violation::ShapeMismatch {
            declared_rows: acts.n_samples,
            declared_cols: acts.n_features,
            payload_len: acts.values.len(),
        });
    }
    if acts.n_features > 0 {
        for (pos, v) in acts.values.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFinite {
                    row: pos / acts.n_features,
                    col: pos % acts.n_features,
                });
            }
        }
    }
    ValidationVerdict { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(n: usize, d: usize, values: Vec<f64>) -> ActivationMatrix {
        ActivationMatrix::new("l0", Domain::Source, n, d, values)
    }

    /// Materializes `E[z z^T]` and aggregates its diagonal and off-diagonal.
    fn brute_force(acts: &ActivationMatrix) -> [f64; 4] {
        let (n, d) = (acts.n_samples, acts.n_features);
        let mut mean = vec![0.0; d];
        let mut second = vec![vec![0.0; d]; d];
        for r in 0..n {
            let z = acts.row(r);
            for i in 0..d {
                mean[i] += z[i] / n as f64;
                for j in 0..d {
                    second[i][j] += z[i] * z[j] / n as f64;
                }
            }
        }
        let m1 = mean.iter().sum::<f64>() / d as f64;
        let m2 = mean.iter().map(|m| m * m).sum::<f64>() / d as f64;
        let m3 = (0..d).map(|i| second[i][i]).sum::<f64>() / d as f64;
        let mut off = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    off += second[i][j];
                }
            }
        }
        let m4 = if d > 1 { off / (d * d - d) as f64 } else { 0.0 };
        [m1, m2, m3, m4]
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn all_ones() {
        let m = aggregated_moments(&mat(3, 4, vec![1.0; 12])).unwrap();
        assert_eq!(m.as_array(), [1.0, 1.0, 1.0, 1.0]);
        let f = aggregated_moments_fast(&mat(3, 4, vec![1.0; 12])).unwrap();
        assert_eq!(f.as_array(), [1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn all_zeros() {
        let m = aggregated_moments(&mat(2, 5, vec![0.0; 10])).unwrap();
        assert_eq!(m.as_array(), [0.0; 4]);
    }

    #[test]
    fn identity_two_by_two() {
        let id = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(aggregated_moments(&id).unwrap().as_array(), [0.5, 0.25, 0.5, 0.0]);
        assert_eq!(aggregated_moments_fast(&id).unwrap().as_array(), [0.5, 0.25, 0.5, 0.0]);
    }

    #[test]
    fn seeded_8x6_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
        let acts = mat(8, 6, values);
        let oracle = brute_force(&acts);
        let direct = aggregated_moments(&acts).unwrap().as_array();
        let fast = aggregated_moments_fast(&acts).unwrap().as_array();
        for k in 0..4 {
            assert!(rel_close(direct[k], oracle[k], 1e-9), "m{} {direct:?} {oracle:?}", k + 1);
            assert!(rel_close(fast[k], oracle[k], 1e-9), "m{} {fast:?} {oracle:?}", k + 1);
        }
    }

    #[test]
    fn single_feature_sets_flag() {
        let m = aggregated_moments_fast(&mat(3, 1, vec![1.0, 2.0, 3.0])).unwrap();
        assert!(m.single_feature);
        assert_eq!(m.m4, 0.0);
        assert_eq!(m.m1, 2.0);
        assert_eq!(m, aggregated_moments(&mat(3, 1, vec![1.0, 2.0, 3.0])).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(aggregated_moments(&mat(0, 3, vec![])), Err(Error::EmptyMatrix)));
        assert!(matches!(aggregated_moments_fast(&mat(2, 0, vec![])), Err(Error::EmptyMatrix)));
        let mut v = vec![0.0; 6];
        v[4] = f64::INFINITY;
        assert!(matches!(
            aggregated_moments(&mat(2, 3, v)),
            Err(Error::NonFinite { row: 1, col: 1 })
        ));
    }

    #[test]
    fn validation_verdicts() {
        assert!(validate_activation_matrix(&mat(5, 3, vec![0.5; 15])).is_valid());

        let mut v = vec![0.0; 12];
        v[2 * 3 + 1] = f64::NAN;
        let verdict = validate_activation_matrix(&mat(4, 3, v));
        assert_eq!(verdict.violations, vec![Violation::NonFinite { row: 2, col: 1 }]);

        let verdict = validate_activation_matrix(&mat(4, 3, vec![0.0; 9]));
        assert!(matches!(verdict.violations[..], [Violation::ShapeMismatch { declared_rows: 4, .. }]));
    }

    #[test]
    fn spatial_mean_flatten() {
        // N=1, C=2, 2x2 spatial map
        let values = vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let full = ActivationMatrix::from_tensor("c", Domain::Target, &[1, 2, 2, 2], values.clone(), FlattenMode::Full)
            .unwrap();
        assert_eq!(full.n_features, 8);
        let pooled =
            ActivationMatrix::from_tensor("c", Domain::Target, &[1, 2, 2, 2], values, FlattenMode::SpatialMean)
                .unwrap();
        assert_eq!(pooled.n_features, 2);
        assert_eq!(pooled.values, vec![2.5, 10.0]);
    }

    fn matrix_strategy() -> impl Strategy<Value = ActivationMatrix> {
        (1usize..12, 1usize..12).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-100.0f64..100.0, n * d).prop_map(move |v| mat(n, d, v))
        })
    }

    proptest! {
        #[test]
        fn diagonal_dominates_squared_means(acts in matrix_strategy()) {
            let m = aggregated_moments_fast(&acts).unwrap();
            prop_assert!(m.m2 >= 0.0);
            prop_assert!(m.m3 + 1e-12 * m.m3.abs() >= m.m2);
        }

        #[test]
        fn fast_matches_direct(acts in matrix_strategy()) {
            let a = aggregated_moments(&acts).unwrap().as_array();
            let b = aggregated_moments_fast(&acts).unwrap().as_array();
            let scale = a[2].max(1e-300);
            for k in 0..4 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-9 * a[k].abs().max(b[k].abs()) + 1e-13 * scale);
            }
        }

        #[test]
        fn positive_scaling(acts in matrix_strategy(), c in 0.01f64..50.0) {
            let base = aggregated_moments_fast(&acts).unwrap();
            let mut scaled = acts.clone();
            scaled.values.iter_mut().for_each(|v| *v *= c);
            let s = aggregated_moments_fast(&scaled).unwrap();
            let tol = 1e-9 * c * c * base.m3.max(1e-300);
            prop_assert!((s.m1 - c * base.m1).abs() <= tol / c.min(1.0) + 1e-9 * (c * base.m1).abs());
            prop_assert!((s.m2 - c * c * base.m2).abs() <= tol);
            prop_assert!((s.m3 - c * c * base.m3).abs() <= tol);
            prop_assert!((s.m4 - c * c * base.m4).abs() <= tol);
        }
    }

    #[test]
    fn row_and_column_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (7, 5);
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let acts = mat(n, d, values);
        let base = aggregated_moments(&acts).unwrap().as_array();
        let rows: Vec<usize> = vec![3, 0, 6, 1, 5, 2, 4];
        let cols: Vec<usize> = vec![4, 2, 0, 3, 1];
        let mut permuted = Vec::with_capacity(n * d);
        for &r in &rows {
            for &c in &cols {
                permuted.push(acts.values[r * d + c]);
            }
        }
        let p = aggregated_moments(&mat(n, d, permuted)).unwrap().as_array();
        for k in 0..4 {
            assert!(rel_close(base[k], p[k], 1e-12));
        }
    }
}
