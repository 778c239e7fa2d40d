//! Generic sparse-library dynamics: each state derivative is a sparse linear
//! combination of candidate nonlinear terms (state monomials up to a total
//! degree, plus inputs entering linearly).

use serde::{Deserialize, Serialize};

use super::{check_state_finite, CoefficientVector, InputSignal};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Product of state variables raised to the given exponents.
    Monomial(Vec<u32>),
    /// A single input channel, degree 1.
    Input(usize),
}

impl Term {
    pub fn eval(&self, state: &[f64], inputs: &[f64]) -> f64 {
        match self {
            Term::Monomial(exps) => exps
                .iter()
                .zip(state)
                .map(|(&e, &x)| x.powi(e as i32))
                .product(),
            Term::Input(j) => inputs.get(*j).copied().unwrap_or(0.0),
        }
    }

    /// ∂term/∂state_l
    pub fn state_partial(&self, state: &[f64], l: usize) -> f64 {
        match self {
            Term::Input(_) => 0.0,
            Term::Monomial(exps) => {
                let e_l = exps[l];
                if e_l == 0 {
                    return 0.0;
                }
                let mut acc = e_l as f64 * state[l].powi(e_l as i32 - 1);
                for (i, (&e, &x)) in exps.iter().zip(state).enumerate() {
                    if i != l {
                        acc *= x.powi(e as i32);
                    }
                }
                acc
            }
        }
    }

    pub fn total_degree(&self) -> u32 {
        match self {
            Term::Monomial(exps) => exps.iter().sum(),
            Term::Input(_) => 1,
        }
    }
}

/// Candidate-term library. Terms are ordered graded-lexicographically over
/// the state monomials (constant term at index 0), followed by the input
/// terms. A complete states-only library has C(M+n, n) entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLibrary {
    pub order: u32,
    pub state_dim: usize,
    pub input_dim: usize,
    pub terms: Vec<Term>,
}

impl TermLibrary {
    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Flat term id for (output channel, term index).
    pub fn term_id(&self, channel: usize, term_index: usize) -> usize {
        channel * self.num_terms() + term_index
    }

    pub fn split_id(&self, term_id: usize) -> (usize, usize) {
        (term_id / self.num_terms(), term_id % self.num_terms())
    }

    /// Graded-lex index of a pure state monomial, if present.
    pub fn find_monomial(&self, exps: &[u32]) -> Option<usize> {
        self.terms
            .iter()
            .position(|t| matches!(t, Term::Monomial(e) if e == exps))
    }

    pub fn find_input(&self, j: usize) -> Option<usize> {
        self.terms
            .iter()
            .position(|t| matches!(t, Term::Input(i) if *i == j))
    }
}

const TERM_COUNT_CAP: usize = 10_000;

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)?.checked_div(i + 1)?;
    }
    Some(acc)
}

/// All state monomials with total degree ≤ `order` (graded lexicographic,
/// constant first), plus `input_dim` linear input terms.
pub fn build_library(state_dim: usize, input_dim: usize, order: u32) -> Result<TermLibrary> {
    if state_dim == 0 || order == 0 {
        return Err(Error::InvalidArgument(
            "library needs state_dim >= 1 and order >= 1".into(),
        ));
    }
    let count = binomial((order as u64) + state_dim as u64, state_dim as u64)
        .filter(|&c| c as usize + input_dim <= TERM_COUNT_CAP)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "term count overflows the cap of {TERM_COUNT_CAP}"
            ))
        })?;

    let mut terms = Vec::with_capacity(count as usize + input_dim);
    let mut exps = vec![0u32; state_dim];
    for degree in 0..=order {
        push_monomials(&mut terms, &mut exps, 0, degree);
    }
    debug_assert_eq!(terms.len(), count as usize);
    for j in 0..input_dim {
        terms.push(Term::Input(j));
    }
    Ok(TermLibrary {
        order,
        state_dim,
        input_dim,
        terms,
    })
}

fn push_monomials(terms: &mut Vec<Term>, exps: &mut Vec<u32>, var: usize, remaining: u32) {
    if var == exps.len() - 1 {
        exps[var] = remaining;
        terms.push(Term::Monomial(exps.clone()));
        exps[var] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        exps[var] = e;
        push_monomials(terms, exps, var + 1, remaining - e);
        exps[var] = 0;
    }
}

fn validate_ids(theta: &CoefficientVector, library: &TermLibrary) -> Result<()> {
    let limit = library.state_dim * library.num_terms();
    for &id in &theta.term_ids {
        if id >= limit {
            return Err(Error::Index(format!(
                "term id {id} out of range for {} channels x {} terms",
                library.state_dim,
                library.num_terms()
            )));
        }
    }
    Ok(())
}

/// Ẋ_j = Σ_k θ_{j,k} · term_k(X, U)
pub fn library_rhs(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    library: &TermLibrary,
    t: f64,
) -> Result<Vec<f64>> {
    if state.len() != library.state_dim {
        return Err(Error::InvalidArgument(format!(
            "state dimension {} != library dimension {}",
            state.len(),
            library.state_dim
        )));
    }
    check_state_finite(state, "library_rhs")?;
    theta.check_finite("library_rhs")?;
    validate_ids(theta, library)?;
    let u = input.at(t);
    let mut out = vec![0.0; library.state_dim];
    for (&v, &id) in theta.values.iter().zip(&theta.term_ids) {
        let (channel, k) = library.split_id(id);
        out[channel] += v * library.terms[k].eval(state, &u);
    }
    Ok(out)
}

pub(super) fn state_jacobian(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    library: &TermLibrary,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    validate_ids(theta, library)?;
    let _ = input.at(t);
    let n = library.state_dim;
    let mut jac = vec![vec![0.0; n]; n];
    for (&v, &id) in theta.values.iter().zip(&theta.term_ids) {
        let (channel, k) = library.split_id(id);
        for l in 0..n {
            jac[channel][l] += v * library.terms[k].state_partial(state, l);
        }
    }
    Ok(jac)
}

pub(super) fn theta_jacobian(
    state: &[f64],
    input: &InputSignal,
    theta: &CoefficientVector,
    library: &TermLibrary,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    validate_ids(theta, library)?;
    let u = input.at(t);
    let n = library.state_dim;
    let mut jac = vec![vec![0.0; theta.len()]; n];
    for (c, &id) in theta.term_ids.iter().enumerate() {
        let (channel, k) = library.split_id(id);
        jac[channel][c] = library.terms[k].eval(state, &u);
    }
    Ok(jac)
}
