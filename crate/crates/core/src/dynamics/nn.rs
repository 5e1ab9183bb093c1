//! Two-hidden-layer tanh network forward model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DynamicsModel;
use crate::error::{Error, Result};
use crate::state::{ControlInput, Derivative, VehicleState};

/// Network input: `(v_x, v_y, yaw_rate, roll, steering, throttle)`.
pub const NN_INPUT_DIM: usize = 6;
/// Network output: `(dv_x, dv_y, dyaw_rate, droll)`.
pub const NN_OUTPUT_DIM: usize = 4;

/// `out = W3 tanh(W2 tanh(W1 z + b1) + b2) + b3`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNetModel {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    w3: DMatrix<f64>,
    b3: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    fn vector(v: &DVector<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.iter().copied().collect(),
        }
    }

    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Dimension(format!(
                "{name}: expected a 2-d shape, got {:?}",
                self.shape
            )));
        };
        self.check_len(name, rows * cols)?;
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }

    fn to_vector(&self, name: &str) -> Result<DVector<f64>> {
        let [len] = self.shape[..] else {
            return Err(Error::Dimension(format!(
                "{name}: expected a 1-d shape, got {:?}",
                self.shape
            )));
        };
        self.check_len(name, len)?;
        Ok(DVector::from_column_slice(&self.data))
    }

    fn check_len(&self, name: &str, want: usize) -> Result<()> {
        if self.data.len() != want {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} declares {want} values but data has {}",
                self.shape,
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name}[{i}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NnFile {
    nn_version: u32,
    input_dim: usize,
    output_dim: usize,
    layer1_weights: Tensor,
    layer1_bias: Tensor,
    layer2_weights: Tensor,
    layer2_bias: Tensor,
    output_weights: Tensor,
    output_bias: Tensor,
}

impl NeuralNetModel {
    /// Assembles a network, checking that layer shapes chain from
    /// [`NN_INPUT_DIM`] inputs to [`NN_OUTPUT_DIM`] outputs.
    pub fn new(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
        w3: DMatrix<f64>,
        b3: DVector<f64>,
    ) -> Result<Self> {
        let chain = [
            ("layer1_weights columns", w1.ncols(), NN_INPUT_DIM),
            ("layer1_bias length", b1.len(), w1.nrows()),
            ("layer2_weights columns", w2.ncols(), w1.nrows()),
            ("layer2_bias length", b2.len(), w2.nrows()),
            ("output_weights columns", w3.ncols(), w2.nrows()),
            ("output_weights rows", w3.nrows(), NN_OUTPUT_DIM),
            ("output_bias length", b3.len(), NN_OUTPUT_DIM),
        ];
        for (what, got, want) in chain {
            if got != want {
                return Err(Error::Dimension(format!("{what} is {got}, expected {want}")));
            }
        }
        if w1.nrows() == 0 || w2.nrows() == 0 {
            return Err(Error::Dimension("hidden layers must be non-empty".into()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    /// Xavier-uniform weights and zero biases from a fixed seed.
    pub fn random(hidden: [usize; 2], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        let w1 = layer(hidden[0], NN_INPUT_DIM);
        let w2 = layer(hidden[1], hidden[0]);
        let w3 = layer(NN_OUTPUT_DIM, hidden[1]);
        Self::new(
            w1,
            DVector::zeros(hidden[0]),
            w2,
            DVector::zeros(hidden[1]),
            w3,
            DVector::zeros(NN_OUTPUT_DIM),
        )
    }

    pub fn hidden_widths(&self) -> [usize; 2] {
        [self.w1.nrows(), self.w2.nrows()]
    }

    pub fn input_vector(state: &VehicleState, control: &ControlInput) -> DVector<f64> {
        DVector::from_column_slice(&[
            state.v_x,
            state.v_y,
            state.yaw_rate,
            state.roll,
            control.steering,
            control.throttle,
        ])
    }

    fn hidden(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let h1 = (&self.w1 * z + &self.b1).map(f64::tanh);
        let h2 = (&self.w2 * &h1 + &self.b2).map(f64::tanh);
        (h1, h2)
    }

    pub fn forward(&self, z: &DVector<f64>) -> DVector<f64> {
        let (_, h2) = self.hidden(z);
        &self.w3 * h2 + &self.b3
    }

    /// Analytic Jacobian of the output with respect to the input `z`
    /// (`NN_OUTPUT_DIM x NN_INPUT_DIM`).
    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (h1, h2) = self.hidden(z);
        let d1 = h1.map(|h| 1.0 - h * h);
        let d2 = h2.map(|h| 1.0 - h * h);
        let inner = DMatrix::from_diagonal(&d1) * &self.w1;
        let mid = DMatrix::from_diagonal(&d2) * (&self.w2 * inner);
        &self.w3 * mid
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::parse(path, reason),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: NnFile =
            serde_json::from_str(text).map_err(|e| Error::parse(Path::new("<nn>"), e))?;
        if f.nn_version != 1 {
            return Err(Error::invalid(
                "nn_version",
                format!("unsupported version {}", f.nn_version),
            ));
        }
        if f.input_dim != NN_INPUT_DIM || f.output_dim != NN_OUTPUT_DIM {
            return Err(Error::Dimension(format!(
                "declared dims {}->{}, expected {NN_INPUT_DIM}->{NN_OUTPUT_DIM}",
                f.input_dim, f.output_dim
            )));
        }
        Self::new(
            f.layer1_weights.to_matrix("layer1_weights")?,
            f.layer1_bias.to_vector("layer1_bias")?,
            f.layer2_weights.to_matrix("layer2_weights")?,
            f.layer2_bias.to_vector("layer2_bias")?,
            f.output_weights.to_matrix("output_weights")?,
            f.output_bias.to_vector("output_bias")?,
        )
    }

    pub fn to_json(&self) -> String {
        let f = NnFile {
            nn_version: 1,
            input_dim: NN_INPUT_DIM,
            output_dim: NN_OUTPUT_DIM,
            layer1_weights: Tensor::matrix(&self.w1),
            layer1_bias: Tensor::vector(&self.b1),
            layer2_weights: Tensor::matrix(&self.w2),
            layer2_bias: Tensor::vector(&self.b2),
            output_weights: Tensor::matrix(&self.w3),
            output_bias: Tensor::vector(&self.b3),
        };
        serde_json::to_string_pretty(&f).expect("network serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

impl DynamicsModel for NeuralNetModel {
    fn derivative(&self, state: &VehicleState, control: &ControlInput) -> Derivative {
        let out = self.forward(&Self::input_vector(state, control));
        Derivative::from_array([out[0], out[1], out[2], out[3]])
    }
}

pub fn nn_predict(
    model: &NeuralNetModel,
    state: &VehicleState,
    control: &ControlInput,
) -> Result<Derivative> {
    state.check_finite()?;
    if !control.is_finite() {
        return Err(Error::NonFinite("control input".into()));
    }
    Ok(model.derivative(state, control))
}
