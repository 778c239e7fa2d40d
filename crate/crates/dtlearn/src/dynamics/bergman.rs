//! Bergman minimal metabolic model in deviation form. States are
//! `[δi, δi_s, δG]`: plasma insulin deviation, interstitial insulin
//! deviation, blood glucose deviation. Time unit is minutes.

use super::{check_state_finite, CoefficientVector, InputSignal, ModelTag};
use crate::error::{Error, Result};

/// Coefficient order inside the Bergman `CoefficientVector`.
pub const BERGMAN_COEFF_NAMES: [&str; 6] = ["p1", "p2", "p3", "p4", "n", "inv_voi"];

pub const P1: usize = 0;
pub const P2: usize = 1;
pub const P3: usize = 2;
pub const P4: usize = 3;
pub const N_COEF: usize = 4;
pub const INV_VOI: usize = 5;

/// Input channel layout: `[u1 (insulin infusion), u2 (glucose appearance),
/// i_b (basal insulin), G_b (basal glucose)]`.
pub const CH_U1: usize = 0;
pub const CH_U2: usize = 1;
pub const CH_IB: usize = 2;
pub const CH_GB: usize = 3;

pub fn bergman_theta(p1: f64, p2: f64, p3: f64, p4: f64, n: f64, inv_voi: f64) -> CoefficientVector {
    CoefficientVector {
        values: vec![p1, p2, p3, p4, n, inv_voi],
        term_ids: (0..6).collect(),
        model_tag: ModelTag::Bergman,
    }
}

fn unpack(theta: &CoefficientVector) -> Result<&[f64]> {
    if theta.values.len() != 6 {
        return Err(Error::InvalidArgument(format!(
            "Bergman model needs 6 coefficients (p1,p2,p3,p4,n,1/VoI), got {}",
            theta.values.len()
        )));
    }
    for (i, v) in theta.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::non_finite(BERGMAN_COEFF_NAMES[i], "bergman_rhs"));
        }
    }
    Ok(&theta.values)
}

fn unpack_inputs(input: &InputSignal, t: f64) -> Result<(f64, f64, f64, f64)> {
    if input.dim() < 4 {
        return Err(Error::InvalidArgument(format!(
            "Bergman input needs channels [u1,u2,i_b,G_b], got {}",
            input.dim()
        )));
    }
    Ok((
        input.channels[CH_U1].at(t),
        input.channels[CH_U2].at(t),
        input.channels[CH_IB].at(t),
        input.channels[CH_GB].at(t),
    ))
}

/// d/dt [δi, δi_s, δG] = [−n·δi + p4·u1,
///                        −p1·δi_s + p2·(δi − i_b),
///                        −δi_s·G_b − p3·δG + u2/VoI]
pub fn bergman_rhs(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    t: f64,
) -> Result<Vec<f64>> {
    if state.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "Bergman state dimension must be 3, got {}",
            state.len()
        )));
    }
    check_state_finite(state, "bergman_rhs")?;
    let th = unpack(theta)?;
    let (u1, u2, i_b, g_b) = unpack_inputs(input, t)?;
    let (di, dis, dg) = (state[0], state[1], state[2]);
    Ok(vec![
        -th[N_COEF] * di + th[P4] * u1,
        -th[P1] * dis + th[P2] * (di - i_b),
        -dis * g_b - th[P3] * dg + u2 * th[INV_VOI],
    ])
}

pub(super) fn state_jacobian(
    _state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    let th = unpack(theta)?;
    let (_, _, _, g_b) = unpack_inputs(input, t)?;
    Ok(vec![
        vec![-th[N_COEF], 0.0, 0.0],
        vec![th[P2], -th[P1], 0.0],
        vec![0.0, -g_b, -th[P3]],
    ])
}

pub(super) fn theta_jacobian(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    unpack(theta)?;
    let (u1, u2, i_b, _) = unpack_inputs(input, t)?;
    let (di, dis, dg) = (state[0], state[1], state[2]);
    // rows = output channel, cols = coefficient [p1,p2,p3,p4,n,1/VoI]
    Ok(vec![
        vec![0.0, 0.0, 0.0, u1, -di, 0.0],
        vec![-dis, di - i_b, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, -dg, 0.0, 0.0, u2],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn inputs(u1: f64, u2: f64, i_b: f64, g_b: f64) -> InputSignal {
        InputSignal::constants(&[u1, u2, i_b, g_b])
    }

    #[test]
    fn homogeneous_equilibrium_is_zero() {
        let theta = bergman_theta(0.03, 0.02, 0.01, 0.05, 0.2, 0.003);
        let d = bergman_rhs(&[0.0; 3], &inputs(0.0, 0.0, 0.0, 80.0), &theta, 0.0).unwrap();
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_substitution_matches() {
        let theta = bergman_theta(0.03, 0.1, 0.01, 0.05, 0.2, 0.003);
        let d = bergman_rhs(&[1.0, 0.0, 0.0], &inputs(0.0, 0.5, 0.0, 80.0), &theta, 0.0).unwrap();
        assert_relative_eq!(d[0], -0.2);
        assert_relative_eq!(d[1], 0.1);
        assert_relative_eq!(d[2], -0.01 * 0.0 + 0.5 * 0.003);
    }

    #[test]
    fn third_component_is_linear_in_inv_voi() {
        let state = [0.3, -0.2, 5.0];
        let u = inputs(1.0, 2.5, 0.1, 80.0);
        let t1 = bergman_theta(0.03, 0.02, 0.01, 0.05, 0.2, 0.004);
        let t2 = bergman_theta(0.03, 0.02, 0.01, 0.05, 0.2, 0.008);
        let d1 = bergman_rhs(&state, &u, &t1, 0.0).unwrap();
        let d2 = bergman_rhs(&state, &u, &t2, 0.0).unwrap();
        assert_relative_eq!(d2[2] - d1[2], 2.5 * 0.004, epsilon = 1e-12);
        assert_eq!(d1[0], d2[0]);
        assert_eq!(d1[1], d2[1]);
    }

    #[test]
    fn non_finite_state_names_the_symbol() {
        let theta = bergman_theta(0.03, 0.02, 0.01, 0.05, 0.2, 0.003);
        let err = bergman_rhs(&[f64::NAN, 0.0, 0.0], &inputs(0.0, 0.0, 0.0, 80.0), &theta, 0.0)
            .unwrap_err();
        assert!(err.to_string().contains("state[0]"), "{err}");
        let bad = bergman_theta(0.03, f64::INFINITY, 0.01, 0.05, 0.2, 0.003);
        let err = bergman_rhs(&[0.0; 3], &inputs(0.0, 0.0, 0.0, 80.0), &bad, 0.0).unwrap_err();
        assert!(err.to_string().contains("p2"), "{err}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let theta = bergman_theta(0.031, 0.024, 0.012, 0.055, 0.21, 0.0031);
        let u = inputs(0.7, 1.3, 0.2, 80.0);
        let state = [0.4, -0.1, 3.0];
        let eps = 1e-6;

        let js = state_jacobian(&state, &u, &theta, 0.0).unwrap();
        for c in 0..3 {
            let mut sp = state;
            sp[c] += eps;
            let mut sm = state;
            sm[c] -= eps;
            let fp = bergman_rhs(&sp, &u, &theta, 0.0).unwrap();
            let fm = bergman_rhs(&sm, &u, &theta, 0.0).unwrap();
            for r in 0..3 {
                assert_relative_eq!(js[r][c], (fp[r] - fm[r]) / (2.0 * eps), epsilon = 1e-6);
            }
        }

        let jt = theta_jacobian(&state, &u, &theta, 0.0).unwrap();
        for c in 0..6 {
            let mut tp = theta.clone();
            tp.values[c] += eps;
            let mut tm = theta.clone();
            tm.values[c] -= eps;
            let fp = bergman_rhs(&state, &u, &tp, 0.0).unwrap();
            let fm = bergman_rhs(&state, &u, &tm, 0.0).unwrap();
            for r in 0..3 {
                assert_relative_eq!(jt[r][c], (fp[r] - fm[r]) / (2.0 * eps), epsilon = 1e-6);
            }
        }
    }
}
