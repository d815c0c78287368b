//! Dense matrices, parameter sets and a reverse-mode tape that can
//! differentiate through one gradient step.

mod matrix;
mod params;
pub mod tape;

pub use matrix::Matrix;
pub use params::{Manifest, ParamSet, Segment};
pub use tape::{Tape, Var, PROB_EPS};

use crate::error::{Error, Result};

/// Places every segment of `p` on the tape as a differentiable leaf.
pub fn leaves(tape: &Tape, p: &ParamSet) -> Vec<Var> {
    p.matrices().into_iter().map(|m| tape.leaf(m)).collect()
}

/// Places every segment of `p` on the tape as a constant.
pub fn constants(tape: &Tape, p: &ParamSet) -> Vec<Var> {
    p.matrices().into_iter().map(|m| tape.constant(m)).collect()
}

/// Reads the values of `vars` back into a parameter set shaped like `like`.
pub fn collect(tape: &Tape, vars: &[Var], like: &crate::numerics::Manifest) -> Result<ParamSet> {
    if vars.len() != like.segments.len() {
        return Err(Error::shape(
            "collect",
            format!("{} vars for {} segments", vars.len(), like.segments.len()),
        ));
    }
    let mut values = Vec::with_capacity(like.total_len);
    for (v, seg) in vars.iter().zip(&like.segments) {
        let m = tape.value(*v);
        if m.shape() != (seg.rows, seg.cols) {
            return Err(Error::shape(
                "collect",
                format!("segment {} is {:?}, expected {}x{}", seg.name, m.shape(), seg.rows, seg.cols),
            ));
        }
        values.extend_from_slice(m.data());
    }
    ParamSet::new(like.clone(), values)
}

/// Value and gradient of a scalar function of a parameter set.
pub fn value_and_grad<F>(f: F, p: &ParamSet) -> Result<(f64, ParamSet)>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = leaves(&tape, p);
    let out = f(&tape, &vars)?;
    let value = tape.scalar(out)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "objective" });
    }
    let grads = tape.grad(out, &vars)?;
    Ok((value, collect(&tape, &grads, p.manifest())?))
}

/// Gradient of a scalar function of a parameter set.
pub fn grad<F>(f: F, p: &ParamSet) -> Result<ParamSet>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    value_and_grad(f, p).map(|(_, g)| g)
}

/// Gradient of `outer(inner_step(phi))` with respect to `phi`.
///
/// `inner_step` typically contains a call to [`Tape::grad`] (an SGD step);
/// since adjoints are recorded on the tape, the returned gradient includes
/// the second-order terms flowing through that step. Returns the outer
/// value alongside the gradient.
pub fn grad_through_step<O, I>(outer: O, inner_step: I, phi: &ParamSet) -> Result<(f64, ParamSet)>
where
    O: Fn(&Tape, &[Var]) -> Result<Var>,
    I: Fn(&Tape, &[Var]) -> Result<Vec<Var>>,
{
    let tape = Tape::new();
    let phi_vars = leaves(&tape, phi);
    let stepped = inner_step(&tape, &phi_vars)?;
    let out = outer(&tape, &stepped)?;
    let value = tape.scalar(out)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "outer objective" });
    }
    let grads = tape.grad(out, &phi_vars)?;
    Ok((value, collect(&tape, &grads, phi.manifest())?))
}

/// Central-difference estimate of the gradient on a subset of coordinates.
///
/// Used for runtime spot checks of the hypergradient; coordinates not listed
/// are left at zero.
pub fn central_difference<F>(f: F, p: &ParamSet, coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = p.clone();
    for &i in coords {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.values_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.values_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
