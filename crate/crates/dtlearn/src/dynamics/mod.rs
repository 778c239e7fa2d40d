//! Ground-truth ODE models and fixed-step RK4 integration. The same
//! right-hand sides serve double duty: synthetic data generation and the
//! physics term h(X, U, θ) inside the recovery loss.

pub mod bergman;
pub mod ecgsyn;
pub mod library;

pub use bergman::{bergman_rhs, bergman_theta, BERGMAN_COEFF_NAMES};
pub use ecgsyn::{ecgsyn_rhs, ecgsyn_theta};
pub use library::{build_library, library_rhs, Term, TermLibrary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Seconds,
    Minutes,
}

/// One input channel: either a constant or a sampled series with linear
/// interpolation (clamped at the ends).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Constant(f64),
    Sampled { times: Vec<f64>, values: Vec<f64> },
}

impl Channel {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Channel::Constant(v) => *v,
            Channel::Sampled { times, values } => {
                if times.is_empty() {
                    return 0.0;
                }
                if t <= times[0] {
                    return values[0];
                }
                if t >= *times.last().unwrap() {
                    return *values.last().unwrap();
                }
                let i = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                    Ok(i) => return values[i],
                    Err(i) => i,
                };
                let (t0, t1) = (times[i - 1], times[i]);
                let w = (t - t0) / (t1 - t0);
                values[i - 1] * (1.0 - w) + values[i] * w
            }
        }
    }
}

/// The external input U(t). Channel meaning is model-specific:
/// Bergman `[u1, u2, i_b, G_b]`, ECGSYN `[r, A_b, f_resp]`, library models
/// treat every channel as one input variable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputSignal {
    pub channels: Vec<Channel>,
}

impl InputSignal {
    pub fn empty() -> Self {
        InputSignal::default()
    }

    pub fn constants(values: &[f64]) -> Self {
        InputSignal {
            channels: values.iter().map(|&v| Channel::Constant(v)).collect(),
        }
    }

    /// Sampled channels built from a trajectory's recorded input matrix.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let m = traj.input_dim();
        let channels = (0..m)
            .map(|j| Channel::Sampled {
                times: traj.times.clone(),
                values: traj.inputs.iter().map(|u| u[j]).collect(),
            })
            .collect();
        InputSignal { channels }
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.at(t)).collect()
    }

    pub fn channel(&self, i: usize) -> f64 {
        // convenience for constant lookups in tests
        self.channels[i].at(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Bergman,
    Ecgsyn,
    Library,
}

/// Sparse coefficient set θ. `term_ids[i]` names the nonlinear term that
/// `values[i]` multiplies; for library models the id is
/// `channel * library.num_terms() + term_index`, for the hardcoded models it
/// is simply the coefficient position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub values: Vec<f64>,
    pub term_ids: Vec<usize>,
    pub model_tag: ModelTag,
}

impl CoefficientVector {
    pub fn new(values: Vec<f64>, term_ids: Vec<usize>, model_tag: ModelTag) -> Result<Self> {
        if values.len() != term_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "coefficient/term-id length mismatch: {} vs {}",
                values.len(),
                term_ids.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &id in &term_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!("duplicate term id {id}")));
            }
        }
        Ok(CoefficientVector {
            values,
            term_ids,
            model_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(&format!("theta[{i}]"), context));
            }
        }
        Ok(())
    }
}

/// Model family selector used by `simulate` and the recovery loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Bergman,
    Ecgsyn,
    Library(TermLibrary),
}

impl Model {
    pub fn state_dim(&self) -> usize {
        match self {
            Model::Bergman | Model::Ecgsyn => 3,
            Model::Library(lib) => lib.state_dim,
        }
    }

    pub fn time_unit(&self) -> TimeUnit {
        match self {
            Model::Bergman => TimeUnit::Minutes, // CGM sampling is 5 min
            Model::Ecgsyn => TimeUnit::Seconds,
            Model::Library(_) => TimeUnit::Seconds,
        }
    }

    pub fn rhs(
        &self,
        state: &[f64],
        input: &InputSignal,
        theta: &CoefficientVector,
        t: f64,
    ) -> Result<Vec<f64>> {
        match self {
            Model::Bergman => bergman_rhs(state, input, theta, t),
            Model::Ecgsyn => ecgsyn_rhs(state, input, theta, t),
            Model::Library(lib) => library_rhs(state, input, theta, lib, t),
        }
    }

    /// ∂h/∂X, an n×n matrix (row = output channel).
    pub fn state_jacobian(
        &self,
        state: &[f64],
        input: &InputSignal,
        theta: &CoefficientVector,
        t: f64,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Model::Bergman => bergman::state_jacobian(state, input, theta, t),
            Model::Ecgsyn => ecgsyn::state_jacobian(state, input, theta, t),
            Model::Library(lib) => library::state_jacobian(state, input, theta, lib, t),
        }
    }

    /// ∂h/∂θ, an n×p matrix (column = coefficient position in `theta`).
    pub fn theta_jacobian(
        &self,
        state: &[f64],
        input: &InputSignal,
        theta: &CoefficientVector,
        t: f64,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Model::Bergman => bergman::theta_jacobian(state, input, theta, t),
            Model::Ecgsyn => ecgsyn::theta_jacobian(state, input, theta, t),
            Model::Library(lib) => library::theta_jacobian(state, input, theta, lib, t),
        }
    }
}

/// One classical RK4 step. Deterministic; propagates a domain error if any
/// intermediate evaluation goes non-finite.
pub fn rk4_step<F>(rhs: F, state: &[f64], input: &InputSignal, t: f64, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &InputSignal, f64) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {h}")));
    }
    let n = state.len();
    let advance = |base: &[f64], k: &[f64], scale: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(x, d)| x + scale * d).collect()
    };
    let k1 = rhs(state, input, t)?;
    let k2 = rhs(&advance(state, &k1, h / 2.0), input, t + h / 2.0)?;
    let k3 = rhs(&advance(state, &k2, h / 2.0), input, t + h / 2.0)?;
    let k4 = rhs(&advance(state, &k3, h), input, t + h)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        if !v.is_finite() {
            return Err(Error::non_finite(&format!("state[{i}]"), "rk4_step"));
        }
        out.push(v);
    }
    Ok(out)
}

/// Blow-up guard used by `simulate`.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub const DEFAULT_SUBSTEPS: usize = 10;

/// Integrate a model from `x0` over `[0, horizon]` producing `n_samples`
/// uniformly spaced outputs, with `substeps` RK4 substeps per output interval.
/// Sample 0 is `x0` exactly.
pub fn simulate(
    model: &Model,
    theta: &CoefficientVector,
    input: &InputSignal,
    x0: &[f64],
    horizon: f64,
    n_samples: usize,
    substeps: usize,
) -> Result<Trajectory> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be > 0, got {horizon}"
        )));
    }
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be >= 1".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::InvalidArgument(format!(
            "x0 has dimension {}, model expects {}",
            x0.len(),
            model.state_dim()
        )));
    }
    theta.check_finite("simulate")?;

    let dt_out = horizon / (n_samples - 1) as f64;
    let h = dt_out / substeps as f64;
    let mut state = x0.to_vec();
    let mut times = Vec::with_capacity(n_samples);
    let mut states = Vec::with_capacity(n_samples);
    let mut inputs = Vec::with_capacity(n_samples);
    times.push(0.0);
    states.push(state.clone());
    inputs.push(input.at(0.0));
    for k in 1..n_samples {
        let t_start = (k - 1) as f64 * dt_out;
        for s in 0..substeps {
            let t = t_start + s as f64 * h;
            state = rk4_step(|x, u, tt| model.rhs(x, u, theta, tt), &state, input, t, h)?;
            if let Some(bad) = state.iter().find(|v| v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::Divergence {
                    time: t + h,
                    message: format!("state magnitude {bad} exceeds {DIVERGENCE_LIMIT}"),
                });
            }
        }
        let t_k = k as f64 * dt_out;
        times.push(t_k);
        states.push(state.clone());
        inputs.push(input.at(t_k));
    }
    Ok(Trajectory {
        times,
        states,
        inputs,
        mask: vec![true; model.state_dim()],
    })
}

pub(crate) fn check_state_finite(state: &[f64], context: &str) -> Result<()> {
    for (i, v) in state.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::non_finite(&format!("state[{i}]"), context));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn decay_model() -> (Model, CoefficientVector) {
        // 1-D library {1, x}, theta picks x with -1: xdot = -x
        let lib = build_library(1, 0, 1).unwrap();
        let theta =
            CoefficientVector::new(vec![-1.0], vec![1], ModelTag::Library).unwrap();
        (Model::Library(lib), theta)
    }

    #[test]
    fn rk4_zero_rhs_leaves_state_unchanged() {
        let rhs = |_: &[f64], _: &InputSignal, _: f64| Ok(vec![0.0, 0.0]);
        let out = rk4_step(rhs, &[1.0, -2.0], &InputSignal::empty(), 0.0, 0.1).unwrap();
        assert_eq!(out, vec![1.0, -2.0]);
    }

    #[test]
    fn rk4_exponential_decay_matches_analytic() {
        let rhs = |x: &[f64], _: &InputSignal, _: f64| Ok(vec![-x[0]]);
        let mut state = vec![1.0];
        for k in 0..10 {
            state = rk4_step(rhs, &state, &InputSignal::empty(), k as f64 * 0.1, 0.1).unwrap();
        }
        assert_relative_eq!(state[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn rk4_has_fourth_order_convergence() {
        let rhs = |x: &[f64], _: &InputSignal, _: f64| Ok(vec![-x[0]]);
        let err_at = |h: f64| {
            let steps = (1.0 / h).round() as usize;
            let mut x = vec![1.0];
            for k in 0..steps {
                x = rk4_step(rhs, &x, &InputSignal::empty(), k as f64 * h, h).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let order = (err_at(0.1) / err_at(0.05)).log2();
        assert!(
            (3.9..=4.1).contains(&order),
            "empirical order {order} outside [3.9, 4.1]"
        );
    }

    #[test]
    fn rk4_time_reversal_returns_near_start() {
        let rhs = |x: &[f64], _: &InputSignal, _: f64| Ok(vec![x[1], -x[0]]);
        let h = 0.01;
        let x0 = vec![1.0, 0.5];
        let fwd = rk4_step(&rhs, &x0, &InputSignal::empty(), 0.0, h).unwrap();
        // integrate the reversed field over the same step
        let back_rhs = |x: &[f64], u: &InputSignal, t: f64| {
            rhs(x, u, t).map(|d| d.iter().map(|v| -v).collect())
        };
        let back = rk4_step(back_rhs, &fwd, &InputSignal::empty(), h, h).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-8, "reversal error {}", (a - b).abs());
        }
    }

    #[test]
    fn rk4_rejects_nonpositive_step() {
        let rhs = |_: &[f64], _: &InputSignal, _: f64| Ok(vec![0.0]);
        assert!(rk4_step(rhs, &[0.0], &InputSignal::empty(), 0.0, 0.0).is_err());
    }

    #[test]
    fn simulate_zero_rhs_keeps_x0() {
        let lib = build_library(1, 0, 1).unwrap();
        let theta = CoefficientVector::new(vec![], vec![], ModelTag::Library).unwrap();
        let traj = simulate(
            &Model::Library(lib),
            &theta,
            &InputSignal::empty(),
            &[3.5],
            1.0,
            2,
            10,
        )
        .unwrap();
        assert_eq!(traj.states[0], vec![3.5]);
        assert_eq!(traj.states[1], vec![3.5]);
    }

    #[test]
    fn simulate_sample_zero_is_exactly_x0() {
        let (model, theta) = decay_model();
        let traj = simulate(&model, &theta, &InputSignal::empty(), &[2.0], 1.0, 11, 10).unwrap();
        assert_eq!(traj.states[0], vec![2.0]);
        assert_eq!(traj.len(), 11);
        assert_relative_eq!(traj.times[1] - traj.times[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(traj.states[10][0], 2.0 * (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn simulate_detects_blowup() {
        // xdot = x^2 from x0=2 blows up at t=0.5
        let lib = build_library(1, 0, 2).unwrap();
        let theta = CoefficientVector::new(vec![1.0], vec![2], ModelTag::Library).unwrap();
        let err = simulate(
            &Model::Library(lib),
            &theta,
            &InputSignal::empty(),
            &[2.0],
            1.0,
            11,
            50,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }),
            "{err}"
        );
    }

    #[test]
    fn simulate_rejects_bad_args() {
        let (model, theta) = decay_model();
        assert!(simulate(&model, &theta, &InputSignal::empty(), &[1.0], 1.0, 1, 10).is_err());
        assert!(simulate(&model, &theta, &InputSignal::empty(), &[1.0], 0.0, 5, 10).is_err());
    }

    #[test]
    fn sampled_channel_interpolates_and_clamps() {
        let c = Channel::Sampled {
            times: vec![0.0, 1.0, 2.0],
            values: vec![0.0, 10.0, 0.0],
        };
        assert_eq!(c.at(-1.0), 0.0);
        assert_eq!(c.at(0.5), 5.0);
        assert_eq!(c.at(1.0), 10.0);
        assert_eq!(c.at(3.0), 0.0);
    }

    #[test]
    fn coefficient_vector_rejects_duplicate_term_ids() {
        assert!(CoefficientVector::new(vec![1.0, 2.0], vec![3, 3], ModelTag::Library).is_err());
    }
}
