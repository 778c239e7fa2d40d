//! ECGSYN-style cardiac dynamics: (x, y) rotate on a limit cycle of radius 1
//! and z traces PQRST morphology through angle-anchored Gaussian terms. Time
//! unit is seconds.

use std::f64::consts::PI;

use super::{check_state_finite, CoefficientVector, InputSignal, ModelTag};
use crate::error::{Error, Result};

/// Input channel layout: `[r (RR interval, s), A_b, f_resp (Hz)]`.
pub const CH_RR: usize = 0;
pub const CH_AB: usize = 1;
pub const CH_FRESP: usize = 2;

/// Coefficients packed as `[a_P..a_T, b_P..b_T, theta_P..theta_T]`.
pub fn ecgsyn_theta(a: [f64; 5], b: [f64; 5], angles: [f64; 5]) -> CoefficientVector {
    let mut values = Vec::with_capacity(15);
    values.extend_from_slice(&a);
    values.extend_from_slice(&b);
    values.extend_from_slice(&angles);
    CoefficientVector {
        values,
        term_ids: (0..15).collect(),
        model_tag: ModelTag::Ecgsyn,
    }
}

/// Wrap an angle difference into (−π, π].
pub(crate) fn wrap_angle(d: f64) -> f64 {
    PI - (PI - d).rem_euclid(2.0 * PI)
}

struct Unpacked<'a> {
    a: &'a [f64],
    b: &'a [f64],
    ang: &'a [f64],
}

fn unpack(theta: &CoefficientVector) -> Result<Unpacked<'_>> {
    if theta.values.len() != 15 {
        return Err(Error::InvalidArgument(format!(
            "ECGSYN model needs 15 coefficients (5 amplitudes, 5 widths, 5 angles), got {}",
            theta.values.len()
        )));
    }
    for (i, v) in theta.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::non_finite(&format!("theta[{i}]"), "ecgsyn_rhs"));
        }
    }
    let (a, rest) = theta.values.split_at(5);
    let (b, ang) = rest.split_at(5);
    for (i, w) in b.iter().enumerate() {
        if *w <= 0.0 {
            return Err(Error::Domain(format!("wave width b[{i}] must be > 0, got {w}")));
        }
    }
    Ok(Unpacked { a, b, ang })
}

fn unpack_inputs(input: &InputSignal, t: f64) -> Result<(f64, f64, f64)> {
    if input.dim() < 3 {
        return Err(Error::InvalidArgument(format!(
            "ECGSYN input needs channels [r, A_b, f_resp], got {}",
            input.dim()
        )));
    }
    let r = input.channels[CH_RR].at(t);
    if r <= 0.0 {
        return Err(Error::Domain(format!("RR interval r(t) must be > 0, got {r} at t={t}")));
    }
    Ok((r, input.channels[CH_AB].at(t), input.channels[CH_FRESP].at(t)))
}

pub fn ecgsyn_rhs(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    t: f64,
) -> Result<Vec<f64>> {
    if state.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "ECGSYN state dimension must be 3, got {}",
            state.len()
        )));
    }
    check_state_finite(state, "ecgsyn_rhs")?;
    let th = unpack(theta)?;
    let (r, a_b, f_resp) = unpack_inputs(input, t)?;
    let (x, y, z) = (state[0], state[1], state[2]);

    let rho = (x * x + y * y).sqrt();
    let omega = 2.0 * PI / r;
    let phase = y.atan2(x);
    let z0 = a_b * (2.0 * PI * f_resp * t).sin();

    let mut zdot = -(z - z0);
    for i in 0..5 {
        let d = wrap_angle(phase - th.ang[i]);
        zdot -= th.a[i] * d * (-d * d / (2.0 * th.b[i] * th.b[i])).exp();
    }
    Ok(vec![
        (1.0 - rho) * x - omega * y,
        (1.0 - rho) * y + omega * x,
        zdot,
    ])
}

pub(super) fn state_jacobian(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    let th = unpack(theta)?;
    let (r, _, _) = unpack_inputs(input, t)?;
    let (x, y, _) = (state[0], state[1], state[2]);
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    if rho < 1e-12 {
        return Err(Error::Domain(
            "state jacobian undefined at the phase-plane origin".into(),
        ));
    }
    let omega = 2.0 * PI / r;
    let phase = y.atan2(x);
    // d(phase)/dx, d(phase)/dy
    let (px, py) = (-y / rho2, x / rho2);

    let mut dz_dphase = 0.0;
    for i in 0..5 {
        let d = wrap_angle(phase - th.ang[i]);
        let g = (-d * d / (2.0 * th.b[i] * th.b[i])).exp();
        // d/dΔ [ -a Δ exp(-Δ²/2b²) ] = -a exp(...) (1 - Δ²/b²)
        dz_dphase += -th.a[i] * g * (1.0 - d * d / (th.b[i] * th.b[i]));
    }

    Ok(vec![
        vec![(1.0 - rho) - x * x / rho, -x * y / rho - omega, 0.0],
        vec![-x * y / rho + omega, (1.0 - rho) - y * y / rho, 0.0],
        vec![dz_dphase * px, dz_dphase * py, -1.0],
    ])
}

pub(super) fn theta_jacobian(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    let th = unpack(theta)?;
    unpack_inputs(input, t)?;
    let (x, y, _) = (state[0], state[1], state[2]);
    let phase = y.atan2(x);
    let mut rows = vec![vec![0.0; 15]; 3];
    for i in 0..5 {
        let d = wrap_angle(phase - th.ang[i]);
        let b = th.b[i];
        let g = (-d * d / (2.0 * b * b)).exp();
        rows[2][i] = -d * g; // ∂ż/∂a_i
        rows[2][5 + i] = -th.a[i] * d * g * (d * d / (b * b * b)); // ∂ż/∂b_i
        rows[2][10 + i] = th.a[i] * g * (1.0 - d * d / (b * b)); // ∂ż/∂θ_i
    }
    Ok(rows)
}

/// A textbook-style PQRST parameterization used by fixtures and tests.
pub fn default_theta() -> CoefficientVector {
    ecgsyn_theta(
        [1.2, -5.0, 30.0, -7.5, 0.75],
        [0.25, 0.1, 0.1, 0.1, 0.4],
        [
            -PI / 3.0,
            -PI / 12.0,
            0.0,
            PI / 12.0,
            PI / 2.0,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn inputs(r: f64, a_b: f64, f_resp: f64) -> InputSignal {
        InputSignal::constants(&[r, a_b, f_resp])
    }

    #[test]
    fn unit_circle_kills_radial_term() {
        let theta = default_theta();
        let u = inputs(1.0, 0.0, 0.25);
        let (x, y) = (0.6, 0.8); // on the unit circle
        let d = ecgsyn_rhs(&[x, y, 0.0], &u, &theta, 0.0).unwrap();
        let omega = 2.0 * PI;
        assert_relative_eq!(d[0], -omega * y, epsilon = 1e-12);
        assert_relative_eq!(d[1], omega * x, epsilon = 1e-12);
    }

    #[test]
    fn r_peak_center_contributes_zero() {
        // place the state exactly at the R angle (0), with only the R wave active
        let theta = ecgsyn_theta(
            [0.0, 0.0, 30.0, 0.0, 0.0],
            [0.1, 0.1, 0.1, 0.1, 0.1],
            [-1.0, -0.5, 0.0, 0.5, 1.0],
        );
        let u = inputs(1.0, 0.0, 0.25);
        let d = ecgsyn_rhs(&[1.0, 0.0, 0.4], &u, &theta, 0.0).unwrap();
        assert_relative_eq!(d[2], -0.4, epsilon = 1e-12); // only −(z−0) remains
    }

    #[test]
    fn zero_amplitudes_give_exponential_z_decay() {
        let theta = ecgsyn_theta(
            [0.0; 5],
            [0.1; 5],
            [-1.0, -0.5, 0.0, 0.5, 1.0],
        );
        let u = inputs(1.0, 0.0, 0.25);
        let d = ecgsyn_rhs(&[1.0, 0.0, 0.7], &u, &theta, 0.3).unwrap();
        assert_relative_eq!(d[2], -0.7, epsilon = 1e-12);
    }

    #[test]
    fn nonpositive_rr_or_width_is_domain_error() {
        let theta = default_theta();
        assert!(ecgsyn_rhs(&[1.0, 0.0, 0.0], &inputs(0.0, 0.0, 0.25), &theta, 0.0).is_err());
        let mut bad = default_theta();
        bad.values[6] = -0.1;
        assert!(ecgsyn_rhs(&[1.0, 0.0, 0.0], &inputs(1.0, 0.0, 0.25), &bad, 0.0).is_err());
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        assert_relative_eq!(wrap_angle(0.0), 0.0);
        assert_relative_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI);
        assert_relative_eq!(wrap_angle(1.5 * PI), -0.5 * PI, epsilon = 1e-12);
        for k in -20..20 {
            let d = 0.37 * k as f64;
            let w = wrap_angle(d);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            // same angle modulo 2π (residue may land at 0 or 2π)
            let r = (d - w).rem_euclid(2.0 * PI);
            assert!(r < 1e-9 || 2.0 * PI - r < 1e-9, "residue {r}");
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let theta = default_theta();
        let u = inputs(0.9, 0.05, 0.25);
        let state = [0.7, 0.6, 0.2];
        let t = 0.4;
        let eps = 1e-6;

        let js = state_jacobian(&state, &u, &theta, t).unwrap();
        for c in 0..3 {
            let mut sp = state;
            sp[c] += eps;
            let mut sm = state;
            sm[c] -= eps;
            let fp = ecgsyn_rhs(&sp, &u, &theta, t).unwrap();
            let fm = ecgsyn_rhs(&sm, &u, &theta, t).unwrap();
            for r in 0..3 {
                let fd = (fp[r] - fm[r]) / (2.0 * eps);
                assert!(
                    (js[r][c] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "state jac ({r},{c}): {} vs fd {fd}",
                    js[r][c]
                );
            }
        }

        let jt = theta_jacobian(&state, &u, &theta, t).unwrap();
        for c in 0..15 {
            let mut tp = theta.clone();
            tp.values[c] += eps;
            let mut tm = theta.clone();
            tm.values[c] -= eps;
            let fp = ecgsyn_rhs(&state, &u, &tp, t).unwrap();
            let fm = ecgsyn_rhs(&state, &u, &tm, t).unwrap();
            for r in 0..3 {
                let fd = (fp[r] - fm[r]) / (2.0 * eps);
                assert!(
                    (jt[r][c] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "theta jac ({r},{c}): {} vs fd {fd}",
                    jt[r][c]
                );
            }
        }
    }
}
