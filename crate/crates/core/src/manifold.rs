//! Calculus on the generated manifold: gradients along the local chart,
//! perturbation response and a Laplace-Beltrami estimate.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::LocalGenerator;
use crate::nets::MlpVars;
use crate::semisup::{ClassifierModel, ClassifierVars};
use crate::tensor::Tensor;

/// A scalar function on the ambient space, recorded on a tape so it can be
/// differentiated. `x` is a `1 x D` row; the result must be a single value.
pub trait ScalarField {
    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl<F> ScalarField for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

fn as_row(x: &Tensor) -> Result<Tensor> {
    x.reshape(&[1, x.len()])
}

/// `f(x)` for a point given as a vector.
pub fn field_value(f: &dyn ScalarField, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(as_row(x)?);
    let y = f.record(&mut tape, xv)?;
    Ok(tape.value(y).item())
}

/// Ordinary gradient `grad_x f(x)` as a vector.
pub fn ambient_gradient(f: &dyn ScalarField, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(as_row(x)?);
    let y = f.record(&mut tape, xv)?;
    let g = tape.backward(y)?.wrt(xv).clone();
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "ambient_gradient" });
    }
    g.reshape(&[x.len()])
}

/// Gradient along the manifold, `J_x^T grad_x f(x)`.
pub fn manifold_gradient(f: &dyn ScalarField, model: &LocalGenerator, x: &Tensor) -> Result<Tensor> {
    let grad = ambient_gradient(f, x)?;
    let jac = model.jacobians(&as_row(x)?)?.remove(0);
    let out = jac.transpose().matmul(&grad.reshape(&[x.len(), 1])?)?;
    out.reshape(&[model.coord_dim()])
}

/// Gradient of `z -> f(G(x, z))` at `z = 0`, taken directly in coordinates.
pub fn coordinate_gradient(f: &dyn ScalarField, model: &LocalGenerator, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let xv = tape.constant(as_row(x)?);
    let zv = tape.leaf(Tensor::zeros(&[1, model.coord_dim()]));
    let g = model.generate_tape(&mut tape, &vars, xv, zv)?;
    let y = f.record(&mut tape, g)?;
    let grad = tape.backward(y)?.wrt(zv).clone();
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "coordinate_gradient" });
    }
    grad.reshape(&[model.coord_dim()])
}

fn field_at(f: &dyn ScalarField, model: &LocalGenerator, x: &Tensor, z: &Tensor) -> Result<f64> {
    let v = field_value(f, &model.generate(x, z)?)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "field_value" });
    }
    Ok(v)
}

/// `|f(G(x, dz)) - f(G(x, 0))|^2`.
pub fn perturbation_response(f: &dyn ScalarField, model: &LocalGenerator, x: &Tensor, dz: &Tensor) -> Result<f64> {
    let moved = field_at(f, model, x, dz)?;
    let origin = field_at(f, model, x, &Tensor::zeros(&[model.coord_dim()]))?;
    Ok((moved - origin).powi(2))
}

/// Central second differences of `f(G(x, .))` summed over every coordinate.
pub fn laplace_beltrami(f: &dyn ScalarField, model: &LocalGenerator, x: &Tensor, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let n = model.coord_dim();
    let center = field_at(f, model, x, &Tensor::zeros(&[n]))?;
    let mut total = 0.0;
    for j in 0..n {
        let mut step = Tensor::zeros(&[n]);
        step.data_mut()[j] = h;
        let plus = field_at(f, model, x, &step)?;
        step.data_mut()[j] = -h;
        let minus = field_at(f, model, x, &step)?;
        total += (plus - 2.0 * center + minus) / (h * h);
    }
    Ok(total)
}

/// Tangent rows for every coordinate of every base point, `(B * N) x D`,
/// held fixed with respect to the classifier.
pub fn tangent_rows(model: &LocalGenerator, points: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: MlpVars = model.bind(&mut tape, false);
    let xv = tape.constant(points.clone());
    let coords: Vec<usize> = (0..model.coord_dim()).collect();
    let t = model.tangents_tape(&mut tape, &vars, xv, &coords)?;
    Ok(tape.value(t).clone())
}

/// Records `mean_b sum_k ||J_b^T grad_x log P(y = k | x_b)||^2` over the
/// real classes.
///
/// The directional derivatives are pushed forward through the classifier
/// on the same tape, so the penalty is differentiable in the classifier
/// parameters. `tangents` comes from [`tangent_rows`].
pub fn penalty_tape(
    tape: &mut Tape,
    clf: &ClassifierModel,
    vars: &ClassifierVars,
    x: Var,
    tangents: &Tensor,
    coord_dim: usize,
) -> Result<Var> {
    let batch = tape.shape(x)[0];
    let k = clf.classes();
    let t = tape.constant(tangents.clone());
    let (logits, dlogits) = clf.logits_jvp_tape(tape, vars, x, t, coord_dim)?;
    let logp = tape.log_softmax_rows(logits)?;
    let p = tape.exp(logp)?;
    let p = tape.repeat_rows(p, coord_dim)?;
    let weighted = tape.mul(p, dlogits)?;
    let avg = tape.sum_rows(weighted)?;
    let avg = tape.broadcast_cols(avg, k + 1)?;
    let dlogp = tape.sub(dlogits, avg)?;
    let real = tape.slice_cols(dlogp, 0, k)?;
    let total = tape.squared_norm(real)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// `sum_k ||grad_z log P(y = k | G(x, z))|_{z=0}||^2` at a single point.
pub fn manifold_gradient_norm_penalty(clf: &ClassifierModel, model: &LocalGenerator, x: &Tensor, classes: usize) -> Result<f64> {
    if clf.classes() != classes {
        return Err(Error::invalid(format!(
            "classifier has {} real classes, expected {classes}",
            clf.classes()
        )));
    }
    let row = as_row(x)?;
    let tangents = tangent_rows(model, &row)?;
    let mut tape = Tape::new();
    let vars = clf.bind(&mut tape, false);
    let xv = tape.constant(row);
    let pen = penalty_tape(&mut tape, clf, &vars, xv, &tangents, model.coord_dim())?;
    Ok(tape.value(pen).item())
}
