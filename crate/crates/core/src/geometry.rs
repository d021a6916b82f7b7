//! Local generators, local-coordinate noise, tangent bases and the
//! locality/orthonormality regularizer.
//!
//! A local generator maps a base point `x` in the ambient space `R^D` and
//! local coordinates `z` in `R^N` to a nearby point `G(x, z)`. The tangent
//! vector along coordinate `j` is `dG/dz_j` at `z = 0`; stacking them gives
//! the `D x N` Jacobian. Orthonormal columns keep the chart from collapsing
//! onto fewer than `N` directions.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp, MlpSpec, MlpVars};
use crate::tensor::Tensor;

/// How the core network is turned into a generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// `G(x, z) = x + B(x, z) - B(x, 0)`; locality holds exactly.
    Residual,
    /// `G(x, z) = x + B(x, z)`; locality must be learned through the penalty.
    Direct,
}

impl Parameterization {
    pub fn code(self) -> u8 {
        match self {
            Parameterization::Residual => 0,
            Parameterization::Direct => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Parameterization::Residual),
            1 => Some(Parameterization::Direct),
            _ => None,
        }
    }
}

impl std::str::FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Parameterization::Residual),
            "direct" => Ok(Parameterization::Direct),
            other => Err(Error::invalid(format!("unknown parameterization {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalGenerator {
    core: Mlp,
    ambient_dim: usize,
    coord_dim: usize,
    parameterization: Parameterization,
}

impl LocalGenerator {
    /// `core` maps the concatenation `[x, z]` (width `D + N`) to `R^D`.
    pub fn new(core: Mlp, ambient_dim: usize, coord_dim: usize) -> Result<Self> {
        Self::with_parameterization(core, ambient_dim, coord_dim, Parameterization::Residual)
    }

    pub fn with_parameterization(core: Mlp, ambient_dim: usize, coord_dim: usize, parameterization: Parameterization) -> Result<Self> {
        if coord_dim == 0 || coord_dim > ambient_dim {
            return Err(Error::invalid(format!(
                "coordinate dimension {coord_dim} must lie in 1..={ambient_dim}"
            )));
        }
        if core.in_dim() != Some(ambient_dim + coord_dim) || core.out_dim() != Some(ambient_dim) {
            return Err(Error::invalid(format!(
                "core network must map {} inputs to {ambient_dim} outputs",
                ambient_dim + coord_dim
            )));
        }
        Ok(LocalGenerator {
            core,
            ambient_dim,
            coord_dim,
            parameterization,
        })
    }

    /// Core with `hidden` layers of the given activation and a linear output.
    pub fn init(ambient_dim: usize, coord_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let spec = MlpSpec::with_hidden(ambient_dim + coord_dim, hidden, activation, ambient_dim, Activation::Linear);
        Self::new(Mlp::init(&spec, seed)?, ambient_dim, coord_dim)
    }

    pub fn core(&self) -> &Mlp {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut Mlp {
        &mut self.core
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn coord_dim(&self) -> usize {
        self.coord_dim
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        self.core.bind(tape, trainable)
    }

    fn check_batch(&self, x: &Tensor, z: Option<&Tensor>) -> Result<()> {
        let bad_x = x.rank() != 2 || x.cols() != self.ambient_dim;
        let bad_z = z.is_some_and(|z| z.rank() != 2 || z.cols() != self.coord_dim || z.rows() != x.rows());
        if bad_x || bad_z {
            return Err(Error::ShapeMismatch {
                op: "local_generate",
                left: x.shape().to_vec(),
                right: z.map_or(vec![], |z| z.shape().to_vec()),
            });
        }
        Ok(())
    }

    /// Records `G(x, z)` for a batch of base points and coordinates.
    pub fn generate_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var, z: Var) -> Result<Var> {
        let input = tape.concat_cols(&[x, z])?;
        let moved = self.core.forward_tape(tape, vars, input)?;
        let shift = match self.parameterization {
            Parameterization::Direct => moved,
            Parameterization::Residual => {
                let zero = tape.constant(Tensor::zeros(&[tape.shape(x)[0], self.coord_dim]));
                let origin_input = tape.concat_cols(&[x, zero])?;
                let origin = self.core.forward_tape(tape, vars, origin_input)?;
                tape.sub(moved, origin)?
            }
        };
        tape.add(x, shift)
    }

    /// Records the tangent vectors for the selected coordinates.
    ///
    /// Returns a `(B * |coords|) x D` matrix; rows `b * |coords| + k` hold the
    /// tangent along `coords[k]` at base point `b`. Built by forward tangent
    /// propagation, so it stays differentiable in the core parameters.
    pub fn tangents_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var, coords: &[usize]) -> Result<Var> {
        let (batch, d, n) = (tape.shape(x)[0], self.ambient_dim, self.coord_dim);
        if let Some(&bad) = coords.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!("coordinate {bad} out of range 0..{n}")));
        }
        let s = coords.len();
        let zero = tape.constant(Tensor::zeros(&[batch, n]));
        let input = tape.concat_cols(&[x, zero])?;
        let mut dirs = Tensor::zeros(&[batch * s, d + n]);
        for b in 0..batch {
            for (k, &c) in coords.iter().enumerate() {
                dirs.data_mut()[(b * s + k) * (d + n) + d + c] = 1.0;
            }
        }
        let dirs = tape.constant(dirs);
        let (_, tangents) = self.core.jvp_tape(tape, vars, input, dirs, s)?;
        Ok(tangents)
    }

    /// `G(x, z)` for a single point (vectors) or a batch (matrices).
    pub fn generate(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 1;
        let (xb, zb) = if single {
            (x.reshape(&[1, x.len()])?, z.reshape(&[1, z.len()])?)
        } else {
            (x.clone(), z.clone())
        };
        self.check_batch(&xb, Some(&zb))?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(xb);
        let zv = tape.constant(zb);
        let g = self.generate_tape(&mut tape, &vars, xv, zv)?;
        let out = tape.value(g).clone();
        if single {
            out.reshape(&[self.ambient_dim])
        } else {
            Ok(out)
        }
    }

    /// Jacobians (`D x N`) at each row of a batch of base points.
    pub fn jacobians(&self, points: &Tensor) -> Result<Vec<Tensor>> {
        self.check_batch(points, None)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(points.clone());
        let coords: Vec<usize> = (0..self.coord_dim).collect();
        let t = self.tangents_tape(&mut tape, &vars, xv, &coords)?;
        let t = tape.value(t);
        let n = self.coord_dim;
        Ok((0..points.rows())
            .map(|b| {
                let rows: Vec<usize> = (b * n..(b + 1) * n).collect();
                t.select_rows(&rows).transpose()
            })
            .collect())
    }
}

/// Base point together with its `D x N` Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentBasis {
    pub base_point: Tensor,
    pub jacobian: Tensor,
}

impl TangentBasis {
    /// Tangent vector along coordinate `j`.
    pub fn tangent(&self, j: usize) -> Vec<f64> {
        (0..self.jacobian.rows()).map(|i| self.jacobian.get(i, j)).collect()
    }
}

pub fn local_generate(model: &LocalGenerator, x: &Tensor, z: &Tensor) -> Result<Tensor> {
    model.generate(x, z)
}

/// One draw from `zero_weight * delta_0 + (1 - zero_weight) * N(0, I)`.
pub fn sample_local_noise<R: Rng + ?Sized>(coord_dim: usize, zero_weight: f64, rng: &mut R) -> Tensor {
    if rng.random::<f64>() < zero_weight {
        Tensor::zeros(&[coord_dim])
    } else {
        Tensor::vector((0..coord_dim).map(|_| rng.sample(StandardNormal)).collect())
    }
}

/// `batch` independent mixture draws as rows of a matrix.
pub fn sample_noise_batch<R: Rng + ?Sized>(batch: usize, coord_dim: usize, zero_weight: f64, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(batch * coord_dim);
    for _ in 0..batch {
        data.extend(sample_local_noise(coord_dim, zero_weight, rng).into_data());
    }
    Tensor::matrix(batch, coord_dim, data).expect("consistent noise shape")
}

pub fn tangent_basis(model: &LocalGenerator, x: &Tensor) -> Result<TangentBasis> {
    let xb = x.reshape(&[1, x.len()])?;
    let jacobian = model.jacobians(&xb)?.remove(0);
    Ok(TangentBasis {
        base_point: x.clone(),
        jacobian,
    })
}

/// `||J^T J - I_N||_F^2` for a `D x N` matrix.
pub fn orthonormality_penalty(jacobian: &Tensor) -> f64 {
    let gram = jacobian.transpose().matmul(jacobian).expect("J^T J is always defined");
    let n = gram.rows();
    gram.data()
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let target = if k / n == k % n { 1.0 } else { 0.0 };
            (g - target).powi(2)
        })
        .sum()
}

/// `||G(x, 0) - x||^2`.
pub fn locality_penalty(model: &LocalGenerator, x: &Tensor) -> Result<f64> {
    let g = model.generate(x, &Tensor::zeros(&[model.coord_dim()]))?;
    Ok(g.zip_map(x, |a, b| a - b).data().iter().map(|v| v * v).sum())
}

/// `min(m, N)` distinct coordinate indices, uniform without replacement,
/// returned in ascending order.
pub fn subsample_coordinates<R: Rng + ?Sized>(coord_dim: usize, m: usize, rng: &mut R) -> Vec<usize> {
    if m >= coord_dim {
        return (0..coord_dim).collect();
    }
    let mut picked = index::sample(rng, coord_dim, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Batch-mean regularizer terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct OmegaTerms {
    pub locality: Var,
    pub orthonormality: Var,
    pub total: Var,
}

/// Records `mean_x [mu ||G(x,0) - x||^2 + eta ||J_S^T J_S - I||_F^2]`.
pub fn omega_tape(
    tape: &mut Tape,
    model: &LocalGenerator,
    vars: &MlpVars,
    x: Var,
    mu: f64,
    eta: f64,
    coords: &[usize],
) -> Result<OmegaTerms> {
    let batch = tape.shape(x)[0];
    let zero = tape.constant(Tensor::zeros(&[batch, model.coord_dim()]));
    let origin = model.generate_tape(tape, vars, x, zero)?;
    let drift = tape.sub(origin, x)?;
    let locality = tape.squared_norm(drift)?;
    let locality = tape.scale(locality, 1.0 / batch as f64)?;

    let s = coords.len();
    let tangents = model.tangents_tape(tape, vars, x, coords)?;
    let (mut left, mut right) = (Vec::new(), Vec::new());
    let mut target = Vec::new();
    for b in 0..batch {
        for i in 0..s {
            for j in 0..s {
                left.push(b * s + i);
                right.push(b * s + j);
                target.push(if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    let rows = target.len();
    let l = tape.gather_rows(tangents, left)?;
    let r = tape.gather_rows(tangents, right)?;
    let prod = tape.mul(l, r)?;
    let gram = tape.sum_rows(prod)?;
    let target = tape.constant(Tensor::matrix(rows, 1, target)?);
    let dev = tape.sub(gram, target)?;
    let orthonormality = tape.squared_norm(dev)?;
    let orthonormality = tape.scale(orthonormality, 1.0 / batch as f64)?;

    let a = tape.scale(locality, mu)?;
    let b = tape.scale(orthonormality, eta)?;
    let total = tape.add(a, b)?;
    Ok(OmegaTerms {
        locality,
        orthonormality,
        total,
    })
}

/// Regularizer at a single point; `subset = None` uses every coordinate.
pub fn regularizer_omega(model: &LocalGenerator, x: &Tensor, mu: f64, eta: f64, subset: Option<&[usize]>) -> Result<f64> {
    if mu < 0.0 || eta < 0.0 {
        return Err(Error::invalid("regularizer weights must be nonnegative"));
    }
    let all: Vec<usize> = (0..model.coord_dim()).collect();
    let coords = subset.unwrap_or(&all);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let xb = tape.constant(x.reshape(&[1, x.len()])?);
    let terms = omega_tape(&mut tape, model, &vars, xb, mu, eta, coords)?;
    Ok(tape.value(terms.total).item())
}
