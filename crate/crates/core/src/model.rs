//! Loss families, shard containers and the linear predictor.
//!
//! Every loss is written as a function `L(y, z)` of the response and the
//! linear predictor `z = xᵀβ`, together with its first two derivatives in `z`.
//! Least squares uses the `½(y − z)²` convention so that its curvature is 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};

/// Threshold commonly advised for the Huber loss.
pub const DEFAULT_HUBER_A: f64 = 1.345;

/// Largest argument for which `exp` stays finite in binary64.
const EXP_OVERFLOW: f64 = 709.782_712_893_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossFamily {
    LeastSquares,
    Huber,
    Logistic,
    Poisson,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::LeastSquares => "least-squares",
            LossFamily::Huber => "huber",
            LossFamily::Logistic => "logistic",
            LossFamily::Poisson => "poisson",
        }
    }

    /// Canonical GLM families, for which the plug-in precision needs no inverse.
    pub fn is_canonical_glm(self) -> bool {
        !matches!(self, LossFamily::Huber)
    }
}

/// A loss family plus its parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "LossSpec", into = "LossSpec")]
pub struct LossModel {
    family: LossFamily,
    huber_a: f64,
}

impl PartialEq for LossModel {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family && self.huber_a() == other.huber_a()
    }
}

/// Serialized form of [`LossModel`]; the threshold only appears for Huber.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct LossSpec {
    family: LossFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    huber_a: Option<f64>,
}

impl From<LossModel> for LossSpec {
    fn from(m: LossModel) -> Self {
        LossSpec {
            family: m.family,
            huber_a: m.huber_a(),
        }
    }
}

impl TryFrom<LossSpec> for LossModel {
    type Error = WaveError;

    fn try_from(s: LossSpec) -> Result<Self> {
        match (s.family, s.huber_a) {
            (LossFamily::LeastSquares, None) => Ok(LossModel::least_squares()),
            (LossFamily::Logistic, None) => Ok(LossModel::logistic()),
            (LossFamily::Poisson, None) => Ok(LossModel::poisson()),
            (LossFamily::Huber, a) => LossModel::huber(a.unwrap_or(DEFAULT_HUBER_A)),
            (f, Some(_)) => Err(WaveError::Config(format!(
                "huber_a given for the {} loss",
                f.name()
            ))),
        }
    }
}

/// Loss value and derivatives in the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl LossModel {
    pub fn least_squares() -> Self {
        Self {
            family: LossFamily::LeastSquares,
            huber_a: f64::NAN,
        }
    }

    pub fn logistic() -> Self {
        Self {
            family: LossFamily::Logistic,
            huber_a: f64::NAN,
        }
    }

    pub fn poisson() -> Self {
        Self {
            family: LossFamily::Poisson,
            huber_a: f64::NAN,
        }
    }

    pub fn huber(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(WaveError::Config(format!(
                "huber threshold must be positive and finite, got {a}"
            )));
        }
        Ok(Self {
            family: LossFamily::Huber,
            huber_a: a,
        })
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    /// Huber threshold; `None` for the other families.
    pub fn huber_a(&self) -> Option<f64> {
        (self.family == LossFamily::Huber).then_some(self.huber_a)
    }

    /// Checks that `y` is a legal response for this family.
    pub fn check_response(&self, y: f64) -> Result<()> {
        let ok = y.is_finite()
            && match self.family {
                LossFamily::LeastSquares | LossFamily::Huber => true,
                LossFamily::Logistic => y == 0.0 || y == 1.0,
                LossFamily::Poisson => y >= 0.0 && y.fract() == 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(WaveError::Domain {
                family: self.family.name(),
                y,
            })
        }
    }

    /// Evaluates the loss without validating `y`. Callers must have checked
    /// the response already (shards are validated once per fit).
    pub(crate) fn eval_unchecked(&self, y: f64, z: f64) -> Result<LossValue> {
        let v = match self.family {
            LossFamily::LeastSquares => {
                let r = z - y;
                LossValue {
                    value: 0.5 * r * r,
                    d1: r,
                    d2: 1.0,
                }
            }
            LossFamily::Huber => {
                let a = self.huber_a;
                let r = y - z;
                if r.abs() <= a {
                    LossValue {
                        value: 0.5 * r * r,
                        d1: -r,
                        d2: 1.0,
                    }
                } else {
                    LossValue {
                        value: a * r.abs() - 0.5 * a * a,
                        d1: -a * r.signum(),
                        d2: 0.0,
                    }
                }
            }
            LossFamily::Logistic => {
                // log(1 + e^z) - y z, with a stable softplus and sigmoid.
                let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
                let s = sigmoid(z);
                LossValue {
                    value: softplus - y * z,
                    d1: s - y,
                    d2: s * (1.0 - s),
                }
            }
            LossFamily::Poisson => {
                if !(z <= EXP_OVERFLOW) {
                    return Err(WaveError::Overflow { index: None, z });
                }
                let mu = z.exp();
                LossValue {
                    value: mu - y * z,
                    d1: mu - y,
                    d2: mu,
                }
            }
        };
        Ok(v)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `L(y, z)` with its first and second derivative in `z`.
pub fn loss_eval(model: &LossModel, y: f64, z: f64) -> Result<LossValue> {
    model.check_response(y)?;
    if !z.is_finite() {
        return Err(WaveError::InvalidData(format!(
            "linear predictor must be finite, got {z}"
        )));
    }
    model.eval_unchecked(y, z)
}

/// Evaluates the loss over a whole shard at linear predictors `z`; overflow
/// errors carry the offending observation index.
pub(crate) fn eval_all(model: &LossModel, y: &[f64], z: &[f64]) -> Result<Vec<LossValue>> {
    y.iter()
        .zip(z)
        .enumerate()
        .map(|(i, (&yi, &zi))| {
            model.eval_unchecked(yi, zi).map_err(|e| match e {
                WaveError::Overflow { z, .. } => WaveError::Overflow { index: Some(i), z },
                other => other,
            })
        })
        .collect()
}

/// One worker's rows: design matrix `x` (n × p) and response `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub worker_id: usize,
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl DataShard {
    pub fn new(worker_id: usize, x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(WaveError::InvalidData(format!(
                "shard {worker_id} needs at least one row and one column"
            )));
        }
        if x.nrows() != y.len() {
            return Err(WaveError::Dimension {
                what: "response length",
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(WaveError::InvalidData(format!(
                "shard {worker_id} contains non-finite entries"
            )));
        }
        Ok(Self { worker_id, x, y })
    }

    /// Builds a shard from a row-major buffer of `n * p` values.
    pub fn from_row_major(worker_id: usize, p: usize, values: &[f64], y: Vec<f64>) -> Result<Self> {
        if p == 0 || values.len() != y.len() * p {
            return Err(WaveError::Dimension {
                what: "row-major design buffer",
                expected: y.len() * p,
                found: values.len(),
            });
        }
        Self::new(worker_id, DMatrix::from_row_slice(y.len(), p, values), y)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Validates every response against the family's domain.
    pub fn validate_for(&self, model: &LossModel) -> Result<()> {
        self.y.iter().try_for_each(|&y| model.check_response(y))
    }

    /// Same rows, only the listed columns (in the given order).
    pub fn select_columns(&self, cols: &[usize]) -> DataShard {
        DataShard {
            worker_id: self.worker_id,
            x: self.x.select_columns(cols),
            y: self.y.clone(),
        }
    }

    /// Same columns, only the listed rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> DataShard {
        DataShard {
            worker_id: self.worker_id,
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Shard whose loss is the original loss scaled by `c` (least squares
    /// only): responses and covariates are both scaled by √c.
    pub fn scaled(&self, c: f64) -> DataShard {
        let s = c.sqrt();
        DataShard {
            worker_id: self.worker_id,
            x: &self.x * s,
            y: self.y.iter().map(|v| v * s).collect(),
        }
    }
}

/// The data-generating parameter and its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub beta_star: Vec<f64>,
    pub active_set: Vec<usize>,
}

impl TrueModel {
    pub fn new(beta_star: Vec<f64>) -> Self {
        let active_set = support(&beta_star);
        Self {
            beta_star,
            active_set,
        }
    }

    pub fn p(&self) -> usize {
        self.beta_star.len()
    }
}

/// Indices of exact nonzeros.
pub fn support(v: &[f64]) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter_map(|(i, &b)| (b != 0.0).then_some(i))
        .collect()
}

/// `xᵢᵀβ` for every row of the shard.
pub fn linear_predict(shard: &DataShard, beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != shard.p() {
        return Err(WaveError::Dimension {
            what: "coefficient vector",
            expected: shard.p(),
            found: beta.len(),
        });
    }
    let b = DVector::from_column_slice(beta);
    Ok((shard.x() * b).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logistic_at_origin() {
        let v = loss_eval(&LossModel::logistic(), 0.0, 0.0).unwrap();
        assert!(close(v.value, 2f64.ln(), 1e-15));
        assert_eq!(v.d1, 0.5);
        assert_eq!(v.d2, 0.25);
    }

    #[test]
    fn poisson_at_origin() {
        let v = loss_eval(&LossModel::poisson(), 1.0, 0.0).unwrap();
        assert_eq!((v.value, v.d1, v.d2), (1.0, 0.0, 1.0));
    }

    #[test]
    fn huber_linear_branch() {
        let a = 1.345;
        let v = loss_eval(&LossModel::huber(a).unwrap(), 3.0, 0.0).unwrap();
        assert!(close(v.value, a * 3.0 - 0.5 * a * a, 1e-15));
        assert_eq!(v.d1, -a);
        assert_eq!(v.d2, 0.0);
    }

    #[test]
    fn huber_knot_belongs_to_quadratic_branch() {
        let v = loss_eval(&LossModel::huber(1.0).unwrap(), 1.0, 0.0).unwrap();
        assert_eq!(v.d2, 1.0);
        assert_eq!(v.value, 0.5);
    }

    #[test]
    fn least_squares_half_convention() {
        let v = loss_eval(&LossModel::least_squares(), 2.0, 1.0).unwrap();
        assert_eq!((v.value, v.d1, v.d2), (0.5, -1.0, 1.0));
    }

    #[test]
    fn logistic_extreme_predictor_is_finite() {
        for z in [-800.0, -40.0, 40.0, 800.0] {
            let v = loss_eval(&LossModel::logistic(), 1.0, z).unwrap();
            assert!(v.value.is_finite() && v.d1.is_finite() && v.d2 >= 0.0);
        }
        let v = loss_eval(&LossModel::logistic(), 0.0, 800.0).unwrap();
        assert!(close(v.value, 800.0, 1e-9));
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            loss_eval(&LossModel::logistic(), 0.5, 0.0),
            Err(WaveError::Domain { .. })
        ));
        assert!(matches!(
            loss_eval(&LossModel::poisson(), -1.0, 0.0),
            Err(WaveError::Domain { .. })
        ));
        assert!(matches!(
            loss_eval(&LossModel::poisson(), 1.5, 0.0),
            Err(WaveError::Domain { .. })
        ));
        assert!(LossModel::huber(0.0).is_err());
    }

    #[test]
    fn poisson_overflow_names_index() {
        let err = eval_all(&LossModel::poisson(), &[0.0, 1.0], &[0.0, 800.0]).unwrap_err();
        assert_eq!(
            err,
            WaveError::Overflow {
                index: Some(1),
                z: 800.0
            }
        );
        assert!(err.to_string().contains("observation 1"));
    }

    #[test]
    fn linear_predict_examples() {
        let id = DataShard::from_row_major(0, 2, &[1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_predict(&id, &[3.0, 1.5]).unwrap(), vec![3.0, 1.5]);

        let zeros = DataShard::from_row_major(0, 2, &[0.0; 4], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_predict(&zeros, &[7.0, -2.0]).unwrap(), vec![0.0, 0.0]);

        let x = DataShard::from_row_major(0, 2, &[1.0, 1.0, 1.0, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_predict(&x, &[2.0, 1.0]).unwrap(), vec![3.0, 1.0]);

        assert!(matches!(
            linear_predict(&x, &[1.0]),
            Err(WaveError::Dimension { .. })
        ));
    }

    #[test]
    fn shard_validation() {
        assert!(DataShard::from_row_major(0, 2, &[1.0, 2.0], vec![1.0, 2.0]).is_err());
        assert!(DataShard::from_row_major(0, 1, &[f64::NAN], vec![1.0]).is_err());
        let s = DataShard::from_row_major(0, 1, &[1.0, 2.0], vec![0.0, 2.0]).unwrap();
        assert!(s.validate_for(&LossModel::logistic()).is_err());
        assert!(s.validate_for(&LossModel::poisson()).is_ok());
    }

    #[test]
    fn true_model_support() {
        let t = TrueModel::new(vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(t.active_set, vec![0, 1, 4]);
    }
}
