//! Stage and terminal costs: fixed quadratic regulation cost, feedforward
//! network correction, parameter flattening, and the Riccati terminal weight.
//!
//! The learnable stage cost is `l_θ(x, u) = l(x, u) + y(x) − y(x_d)` where
//! `l` is a quadratic set-point cost and `y` the network output; subtracting
//! the value at the set-point forces `l_θ(x_d, u_d) = 0` for every parameter
//! vector.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Input, State};
use crate::error::{Error, Result};

/// Hidden-layer activation. Only the hyperbolic tangent is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

/// Feedforward network shape: input width, hidden widths, output width.
///
/// The input width must equal the state dimension (4) and the output width 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl NetworkShape {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        Self { layer_sizes, activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Precondition(
                "network needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes[0] != 4 {
            return Err(Error::Precondition(format!(
                "network input width must be 4, got {}",
                self.layer_sizes[0]
            )));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::Precondition(format!(
                "network output width must be 1, got {}",
                self.layer_sizes.last().unwrap()
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Precondition("network layer widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// Number of parameters of a network shape: `Σ (n_{i−1} + 1) · n_i`.
pub fn count_params(shape: &NetworkShape) -> usize {
    shape
        .layer_sizes
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum()
}

/// Per-layer weight matrix and bias vector.
///
/// The flat parameter vector is ordered layer by layer, each layer storing
/// its weight matrix row-major followed by its bias vector. Run logs and BO
/// boxes depend on this ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Split a flat parameter vector into per-layer weights and biases.
pub fn unflatten(theta: &[f64], shape: &NetworkShape) -> Result<Vec<LayerParams>> {
    let expected = count_params(shape);
    if theta.len() != expected {
        return Err(Error::Dimension {
            context: "unflatten",
            expected,
            actual: theta.len(),
        });
    }
    let mut layers = Vec::with_capacity(shape.layer_sizes.len() - 1);
    let mut offset = 0;
    for w in shape.layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = DMatrix::from_row_slice(n_out, n_in, &theta[offset..offset + n_in * n_out]);
        offset += n_in * n_out;
        let bias = DVector::from_column_slice(&theta[offset..offset + n_out]);
        offset += n_out;
        layers.push(LayerParams { weights, bias });
    }
    Ok(layers)
}

/// Flatten per-layer parameters back into a single vector (inverse of
/// [`unflatten`]).
pub fn flatten(layers: &[LayerParams]) -> Vec<f64> {
    let mut theta = Vec::new();
    for layer in layers {
        for i in 0..layer.weights.nrows() {
            for j in 0..layer.weights.ncols() {
                theta.push(layer.weights[(i, j)]);
            }
        }
        theta.extend(layer.bias.iter().copied());
    }
    theta
}

fn check_theta(theta: &[f64], shape: &NetworkShape, context: &'static str) -> Result<()> {
    let expected = count_params(shape);
    if theta.len() != expected {
        return Err(Error::Dimension { context, expected, actual: theta.len() });
    }
    Ok(())
}

/// Network output `y(x)`: tanh on hidden layers, affine output layer.
pub fn nn_forward(x: &State, theta: &[f64], shape: &NetworkShape) -> Result<f64> {
    check_theta(theta, shape, "nn_forward")?;
    let mut act: Vec<f64> = x.to_array().to_vec();
    let n_layers = shape.layer_sizes.len() - 1;
    let mut offset = 0;
    for (l, w) in shape.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let mut next = vec![0.0; n_out];
        for (i, slot) in next.iter_mut().enumerate() {
            let row = &theta[offset + i * n_in..offset + (i + 1) * n_in];
            let mut z = theta[offset + n_in * n_out + i]; // bias
            for (wij, aj) in row.iter().zip(&act) {
                z += wij * aj;
            }
            *slot = if l + 1 < n_layers { z.tanh() } else { z };
        }
        offset += (n_in + 1) * n_out;
        act = next;
    }
    Ok(act[0])
}

/// Gradient of the network output with respect to its input state.
pub fn nn_input_gradient(x: &State, theta: &[f64], shape: &NetworkShape) -> Result<Vector4<f64>> {
    check_theta(theta, shape, "nn_input_gradient")?;
    let n_layers = shape.layer_sizes.len() - 1;

    // forward pass keeping every activation
    let mut acts: Vec<Vec<f64>> = vec![x.to_array().to_vec()];
    let mut offset = 0;
    let mut offsets = Vec::with_capacity(n_layers);
    for (l, w) in shape.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        offsets.push(offset);
        let prev = acts.last().unwrap().clone();
        let mut next = vec![0.0; n_out];
        for (i, slot) in next.iter_mut().enumerate() {
            let row = &theta[offset + i * n_in..offset + (i + 1) * n_in];
            let mut z = theta[offset + n_in * n_out + i];
            for (wij, aj) in row.iter().zip(&prev) {
                z += wij * aj;
            }
            *slot = if l + 1 < n_layers { z.tanh() } else { z };
        }
        offset += (n_in + 1) * n_out;
        acts.push(next);
    }

    // backward pass: delta through affine output, then tanh layers
    let mut delta = vec![1.0];
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (shape.layer_sizes[l], shape.layer_sizes[l + 1]);
        let off = offsets[l];
        let mut prev_delta = vec![0.0; n_in];
        for i in 0..n_out {
            let row = &theta[off + i * n_in..off + (i + 1) * n_in];
            for (j, wij) in row.iter().enumerate() {
                prev_delta[j] += wij * delta[i];
            }
        }
        if l > 0 {
            // activation derivative of the layer below (its outputs are tanh)
            for (d, a) in prev_delta.iter_mut().zip(&acts[l]) {
                *d *= 1.0 - a * a;
            }
        }
        delta = prev_delta;
    }
    Ok(Vector4::new(delta[0], delta[1], delta[2], delta[3]))
}

/// Gradient of the network output with respect to the flat parameter vector.
pub fn nn_param_gradient(x: &State, theta: &[f64], shape: &NetworkShape) -> Result<Vec<f64>> {
    check_theta(theta, shape, "nn_param_gradient")?;
    let n_layers = shape.layer_sizes.len() - 1;

    let mut acts: Vec<Vec<f64>> = vec![x.to_array().to_vec()];
    let mut offset = 0;
    let mut offsets = Vec::with_capacity(n_layers);
    for (l, w) in shape.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        offsets.push(offset);
        let prev = acts.last().unwrap().clone();
        let mut next = vec![0.0; n_out];
        for (i, slot) in next.iter_mut().enumerate() {
            let row = &theta[offset + i * n_in..offset + (i + 1) * n_in];
            let mut z = theta[offset + n_in * n_out + i];
            for (wij, aj) in row.iter().zip(&prev) {
                z += wij * aj;
            }
            *slot = if l + 1 < n_layers { z.tanh() } else { z };
        }
        offset += (n_in + 1) * n_out;
        acts.push(next);
    }

    let mut grad = vec![0.0; theta.len()];
    // deltas w.r.t. post-activation outputs, walked backwards
    let mut delta = vec![1.0];
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (shape.layer_sizes[l], shape.layer_sizes[l + 1]);
        let off = offsets[l];
        // delta w.r.t. pre-activation of this layer
        let dz: Vec<f64> = if l + 1 < n_layers {
            delta
                .iter()
                .zip(&acts[l + 1])
                .map(|(d, a)| d * (1.0 - a * a))
                .collect()
        } else {
            delta.clone()
        };
        for i in 0..n_out {
            for j in 0..n_in {
                grad[off + i * n_in + j] = dz[i] * acts[l][j];
            }
            grad[off + n_in * n_out + i] = dz[i];
        }
        let mut prev_delta = vec![0.0; n_in];
        for i in 0..n_out {
            let row = &theta[off + i * n_in..off + (i + 1) * n_in];
            for (j, wij) in row.iter().enumerate() {
                prev_delta[j] += wij * dz[i];
            }
        }
        delta = prev_delta;
    }
    Ok(grad)
}

/// Quadratic/terminal weighting matrices together with the set-point.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// State weight, positive semidefinite.
    pub q: Matrix4<f64>,
    /// Input weight, strictly positive.
    pub r: f64,
    /// Terminal weight, positive semidefinite.
    pub p: Matrix4<f64>,
    pub x_d: State,
    pub u_d: Input,
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) {
            return Err(Error::Precondition(format!("input weight must be positive, got {}", self.r)));
        }
        for (name, m) in [("Q", &self.q), ("P", &self.p)] {
            let sym = (m + m.transpose()) * 0.5;
            let min_eig = sym
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if min_eig < -1e-9 {
                return Err(Error::Precondition(format!(
                    "{name} must be positive semidefinite (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed quadratic stage cost `(x−x_d)ᵀ Q (x−x_d) + (u−u_d)ᵀ R (u−u_d)`.
pub fn stage_cost_quadratic(x: &State, u: Input, w: &CostWeights) -> f64 {
    let dx = x.to_vector() - w.x_d.to_vector();
    let du = u.0 - w.u_d.0;
    (dx.transpose() * w.q * dx)[0] + w.r * du * du
}

/// Parameterized stage cost `l(x,u) + y(x) − y(x_d)`.
pub fn stage_cost_param(
    x: &State,
    u: Input,
    theta: &[f64],
    w: &CostWeights,
    shape: &NetworkShape,
) -> Result<f64> {
    let correction = nn_forward(x, theta, shape)? - nn_forward(&w.x_d, theta, shape)?;
    Ok(stage_cost_quadratic(x, u, w) + correction)
}

/// Terminal cost `(x_N − x_d)ᵀ P (x_N − x_d)`.
pub fn terminal_cost(x_n: &State, p: &Matrix4<f64>, x_d: &State) -> f64 {
    let dx = x_n.to_vector() - x_d.to_vector();
    (dx.transpose() * p * dx)[0]
}

/// Copy a fixed-size 4×4 matrix into a dynamically sized one (DARE interop).
pub fn dmat4(m: &Matrix4<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |i, j| m[(i, j)])
}

/// Copy a 4-vector into a 4×1 dynamically sized matrix (DARE interop).
pub fn dcol4(v: &Vector4<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(4, 1, v.as_slice())
}

/// Solve the discrete-time algebraic Riccati equation by fixed-point
/// iteration of `P ← AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q` from `P₀ = Q`,
/// stopping when the max-norm update falls below `1e-10` (cap 10000
/// iterations). Returns the symmetric positive-semidefinite solution.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 10_000;
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let pb = &p * b;
        let gain_denom = r + &bt * &pb;
        let inv = gain_denom.clone().try_inverse().ok_or(Error::Precondition(
            "R + BᵀPB is singular in the DARE iteration".into(),
        ))?;
        let next = &at * &p * a - &at * &pb * &inv * pb.transpose() * a + q;
        // keep the iterate symmetric against roundoff
        let next = (&next + next.transpose()) * 0.5;
        delta = (&next - &p).amax();
        p = next;
        if delta < TOL {
            return Ok(p);
        }
    }
    Err(Error::DareNoConvergence { max_iter: MAX_ITER, delta })
}

/// Max-norm residual of the DARE at `p` (zero at the solution).
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let at = a.transpose();
    let bt = b.transpose();
    let pb = p * b;
    let inv = (r + &bt * &pb).try_inverse().expect("R + BᵀPB invertible");
    let next = &at * p * a - &at * &pb * &inv * pb.transpose() * a + q;
    (next - p).amax()
}

/// LQR state-feedback gain `K = (R + BᵀPB)⁻¹ BᵀPA` for a DARE solution `P`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let bt = b.transpose();
    let inv = (r + &bt * p * b).try_inverse().expect("R + BᵀPB invertible");
    inv * bt * p * a
}
