//! Dense layers with a recording tape for reverse-mode gradients, plus Adam.
//!
//! The tape only supports chains: each recorded op consumes the output of
//! the previous one. That is all an MLP encoder or decoder needs; the VAE
//! stitches its two chains together by hand.

use rand::Rng;

use crate::error::{ensure, invalid, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure(data.len() == rows * cols, || {
            format!("{} values for a {rows}x{cols} matrix", data.len())
        })?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure(r.as_ref().len() == cols, || {
                format!("row {i} has {} columns, expected {cols}", r.as_ref().len())
            })?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what} output")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input and the cached output.
    fn derivative(self, input: f64, output: f64) -> f64 {
        match self {
            Activation::Relu => {
                if input > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - output * output,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            _ => Err(invalid(format!("unknown activation '{s}'"))),
        }
    }
}

/// Weights stored input-major (`in x out`) so `y = x W + b` for row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(inputs, outputs), bias: vec![0.0; outputs] }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            weight: Matrix { rows: inputs, cols: outputs, data },
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    weight_m: Vec<f64>,
    weight_v: Vec<f64>,
    bias_m: Vec<f64>,
    bias_v: Vec<f64>,
}

impl Moments {
    fn for_layer(layer: &Dense) -> Self {
        let (w, b) = (layer.weight.data.len(), layer.bias.len());
        Self { weight_m: vec![0.0; w], weight_v: vec![0.0; w], bias_m: vec![0.0; b], bias_v: vec![0.0; b] }
    }
}

/// Named dense layers plus their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    layers: Vec<Dense>,
    moments: Vec<Moments>,
}

impl ParamSet {
    pub fn new(named: Vec<(String, Dense)>) -> Result<Self> {
        for pair in named.windows(2) {
            ensure(pair[0].1.outputs() == pair[1].1.inputs(), || {
                format!(
                    "layer '{}' outputs {} but '{}' expects {}",
                    pair[0].0,
                    pair[0].1.outputs(),
                    pair[1].0,
                    pair[1].1.inputs()
                )
            })?;
        }
        for (name, layer) in &named {
            ensure(layer.bias.len() == layer.outputs(), || {
                format!("layer '{name}' bias length {} != {}", layer.bias.len(), layer.outputs())
            })?;
        }
        let moments = named.iter().map(|(_, l)| Moments::for_layer(l)).collect();
        let (names, layers) = named.into_iter().unzip();
        Ok(Self { names, layers, moments })
    }

    /// A chain of Glorot-initialised layers `sizes[0] -> sizes[1] -> ...`.
    pub fn mlp<R: Rng + ?Sized>(prefix: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        ensure(sizes.len() >= 2, || "an MLP needs at least two layer sizes".into())?;
        ensure(sizes.iter().all(|&s| s > 0), || format!("layer sizes must be positive: {sizes:?}"))?;
        Self::new(
            sizes
                .windows(2)
                .enumerate()
                .map(|(i, w)| (format!("{prefix}.{i}"), Dense::glorot(w[0], w[1], rng)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, i: usize) -> &Dense {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Dense {
        &mut self.layers[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Dense)> {
        self.names.iter().map(String::as_str).zip(&self.layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    /// `(block name, value count)` in the order used by [`ParamSet::to_flat`].
    pub fn layout(&self) -> Vec<(String, usize)> {
        self.layers()
            .flat_map(|(name, l)| {
                [(format!("{name}.weight"), l.weight.data.len()), (format!("{name}.bias"), l.bias.len())]
            })
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure(flat.len() == self.param_count(), || {
            format!("{} values for {} parameters", flat.len(), self.param_count())
        })?;
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.data.len();
            l.weight.data.copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Runs the whole chain, recording every op. `activations[i]` follows layer `i`.
    pub fn forward(&self, input: &Matrix, activations: &[Activation], tape: &mut GradTape) -> Result<Matrix> {
        ensure(activations.len() == self.layers.len(), || {
            format!("{} activations for {} layers", activations.len(), self.layers.len())
        })?;
        let mut x = input.clone();
        for (i, &act) in activations.iter().enumerate() {
            x = affine(tape, self, i, &x)?;
            x = activation(tape, x, act)?;
        }
        Ok(x)
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: &Matrix, activations: &[Activation]) -> Result<Matrix> {
        let mut tape = GradTape::new();
        self.forward(input, activations, &mut tape)
    }
}

/// Gradients aligned layer-by-layer with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { layers: params.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect() }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.data.iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone)]
enum TapeOp {
    Affine { layer: usize, input: Matrix },
    Activation { kind: Activation, input: Matrix, output: Matrix },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Record of one forward chain, replayed in reverse by [`backward`].
#[derive(Debug, Clone)]
pub struct GradTape {
    ops: Vec<TapeOp>,
    state: TapeState,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self { ops: Vec::new(), state: TapeState::Recording }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn record(&mut self, op: TapeOp) {
        if self.state == TapeState::Consumed {
            self.ops.clear();
            self.state = TapeState::Recording;
        }
        self.ops.push(op);
    }
}

/// `input * W + b` for layer `layer` of `params`.
pub fn affine(tape: &mut GradTape, params: &ParamSet, layer: usize, input: &Matrix) -> Result<Matrix> {
    let dense = params
        .layers
        .get(layer)
        .ok_or_else(|| invalid(format!("layer index {layer} out of range")))?;
    ensure(input.cols == dense.inputs(), || {
        format!(
            "layer '{}' expects {} inputs, got {}",
            params.names[layer],
            dense.inputs(),
            input.cols
        )
    })?;
    let out_cols = dense.outputs();
    let mut out = Matrix::zeros(input.rows, out_cols);
    for i in 0..input.rows {
        let dst = &mut out.data[i * out_cols..(i + 1) * out_cols];
        dst.copy_from_slice(&dense.bias);
        for (k, &x) in input.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (d, w) in dst.iter_mut().zip(dense.weight.row(k)) {
                *d += x * w;
            }
        }
    }
    check_finite(&out, &params.names[layer])?;
    tape.record(TapeOp::Affine { layer, input: input.clone() });
    Ok(out)
}

/// Elementwise activation.
pub fn activation(tape: &mut GradTape, input: Matrix, kind: Activation) -> Result<Matrix> {
    let mut output = input.clone();
    output.data.iter_mut().for_each(|v| *v = kind.apply(*v));
    check_finite(&output, kind.name())?;
    tape.record(TapeOp::Activation { kind, input, output: output.clone() });
    Ok(output)
}

/// Replays the tape in reverse. `grad_output` is the gradient of the scalar
/// loss with respect to the chain's final output. Returns parameter
/// gradients (zero for layers the tape never touched) and the gradient with
/// respect to the chain's input.
pub fn backward(tape: &mut GradTape, params: &ParamSet, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
    match (tape.state, tape.ops.is_empty()) {
        (TapeState::Consumed, _) => {
            return Err(Error::State("backward called twice without a new forward pass".into()))
        }
        (_, true) => return Err(Error::State("backward called before any forward pass".into())),
        _ => {}
    }
    let mut grads = Gradients::zeros_like(params);
    let mut g = grad_output.clone();
    for op in tape.ops.iter().rev() {
        match op {
            TapeOp::Activation { kind, input, output } => {
                ensure(g.rows == output.rows && g.cols == output.cols, || {
                    format!("gradient shape {}x{} does not match activation output {}x{}", g.rows, g.cols, output.rows, output.cols)
                })?;
                for ((gv, &x), &y) in g.data.iter_mut().zip(&input.data).zip(&output.data) {
                    *gv *= kind.derivative(x, y);
                }
            }
            TapeOp::Affine { layer, input } => {
                let dense = &params.layers[*layer];
                ensure(g.rows == input.rows && g.cols == dense.outputs(), || {
                    format!("gradient shape {}x{} does not match layer '{}'", g.rows, g.cols, params.names[*layer])
                })?;
                let gl = &mut grads.layers[*layer];
                for i in 0..input.rows {
                    let gi = g.row(i);
                    for (b, v) in gl.bias.iter_mut().zip(gi) {
                        *b += v;
                    }
                    for (k, &x) in input.row(i).iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (w, v) in gl.weight.row_mut(k).iter_mut().zip(gi) {
                            *w += x * v;
                        }
                    }
                }
                let mut gin = Matrix::zeros(input.rows, dense.inputs());
                for i in 0..input.rows {
                    let gi = g.row(i);
                    for k in 0..dense.inputs() {
                        gin.data[i * dense.inputs() + k] =
                            dense.weight.row(k).iter().zip(gi).map(|(w, v)| w * v).sum();
                    }
                }
                g = gin;
            }
        }
    }
    tape.state = TapeState::Consumed;
    Ok((grads, g))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

/// One bias-corrected Adam update, applied in place. `step` counts from 1.
/// Gradients are validated before anything is modified.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, cfg: &AdamConfig, step: u64) -> Result<()> {
    ensure(step >= 1, || "adam step index starts at 1".into())?;
    ensure(grads.layers.len() == params.layers.len(), || {
        format!("{} gradient layers for {} parameter layers", grads.layers.len(), params.layers.len())
    })?;
    for ((name, p), g) in params.names.iter().zip(&params.layers).zip(&grads.layers) {
        ensure(g.weight.data.len() == p.weight.data.len() && g.bias.len() == p.bias.len(), || {
            format!("gradient shape mismatch for '{name}'")
        })?;
        if let Some(i) = g.weight.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in '{name}.weight' at index {i}")));
        }
        if let Some(i) = g.bias.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in '{name}.bias' at index {i}")));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_hat);
        }
    };
    for ((p, g), mo) in params.layers.iter_mut().zip(&grads.layers).zip(&mut params.moments) {
        update(&mut p.weight.data, &g.weight.data, &mut mo.weight_m, &mut mo.weight_v);
        update(&mut p.bias, &g.bias, &mut mo.bias_m, &mut mo.bias_v);
    }
    Ok(())
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Block name and offset within the block of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose relative error exceeded the tolerance.
    pub failures: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// numerically zero are compared on an absolute scale.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 1e-7;

/// Relative error used by [`grad_check`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_DENOM_FLOOR)
}

/// Compares `analytic` (flattened in `layout` order) against central finite
/// differences of `loss` with step `h`.
pub fn grad_check<F>(
    layout: &[(String, usize)],
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, failures: Vec::new() };
    let mut idx = 0;
    for (name, count) in layout {
        for off in 0..*count {
            let orig = theta[idx];
            theta[idx] = orig + h;
            let up = loss(&theta);
            theta[idx] = orig - h;
            let down = loss(&theta);
            theta[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[idx], numeric);
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), off));
            }
            if !(err < tolerance) {
                report.failures.push((name.clone(), off, err));
            }
            report.checked += 1;
            idx += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn affine_with_identity_weights_is_identity() {
        let params = ParamSet::new(vec![(
            "id".into(),
            Dense { weight: Matrix::identity(3), bias: vec![0.0; 3] },
        )])
        .unwrap();
        let x = Matrix::identity(3);
        let mut tape = GradTape::new();
        assert_eq!(affine(&mut tape, &params, 0, &x).unwrap(), x);
        let bad = Matrix::zeros(2, 4);
        assert!(matches!(affine(&mut tape, &params, 0, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn activation_definitions() {
        let mut tape = GradTape::new();
        let x = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = activation(&mut tape, x, Activation::Relu).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (_, g) = backward(&mut tape, &ParamSet::new(vec![]).unwrap(), &Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap()).unwrap();
        // relu'(0) is defined as 0.
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let mut tape = GradTape::new();
        let y = activation(&mut tape, Matrix::zeros(1, 1), Activation::Tanh).unwrap();
        assert_eq!(y.data(), &[0.0]);
        let (_, g) = backward(&mut tape, &ParamSet::new(vec![]).unwrap(), &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0]);
    }

    #[test]
    fn sum_of_affine_has_input_gradient_per_row() {
        let mut r = rng();
        let params = ParamSet::mlp("l", &[4, 3], &mut r).unwrap();
        let x = Matrix::from_vec(2, 4, vec![0.5, -1.0, 2.0, 0.25, 1.5, 0.0, -0.5, 1.0]).unwrap();
        let mut tape = GradTape::new();
        let y = affine(&mut tape, &params, 0, &x).unwrap();
        let ones = Matrix::from_vec(y.rows(), y.cols(), vec![1.0; y.data().len()]).unwrap();
        let (g, _) = backward(&mut tape, &params, &ones).unwrap();
        // d/dW[k][j] sum(xW + b) = sum_i x[i][k] for every output column j.
        for k in 0..4 {
            let col_sum = x.get(0, k) + x.get(1, k);
            for j in 0..3 {
                assert!((g.layers[0].weight.get(k, j) - col_sum).abs() < 1e-12);
            }
        }
        assert_eq!(g.layers[0].bias, vec![2.0; 3]);

        let flat = params.to_flat();
        let loss = |theta: &[f64]| {
            let mut p = params.clone();
            p.set_flat(theta).unwrap();
            p.predict(&x, &[Activation::Identity]).unwrap().data().iter().sum::<f64>()
        };
        let report = grad_check(&params.layout(), &flat, &g.to_flat(), 1e-4, 1e-4, loss);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn unreached_layers_get_zero_gradient() {
        let mut r = rng();
        let params = ParamSet::mlp("l", &[2, 2, 2], &mut r).unwrap();
        let mut tape = GradTape::new();
        let y = affine(&mut tape, &params, 0, &Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let (g, _) = backward(&mut tape, &params, &y).unwrap();
        assert!(g.layers[1].weight.data().iter().all(|v| *v == 0.0));
        assert!(g.layers[1].bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_state_errors() {
        let mut r = rng();
        let params = ParamSet::mlp("l", &[2, 2], &mut r).unwrap();
        let mut tape = GradTape::new();
        let seed = Matrix::zeros(1, 2);
        assert!(matches!(backward(&mut tape, &params, &seed), Err(Error::State(_))));
        params.forward(&Matrix::zeros(1, 2), &[Activation::Tanh], &mut tape).unwrap();
        backward(&mut tape, &params, &seed).unwrap();
        assert!(matches!(backward(&mut tape, &params, &seed), Err(Error::State(_))));
        params.forward(&Matrix::zeros(1, 2), &[Activation::Tanh], &mut tape).unwrap();
        assert_eq!(tape.len(), 2);
        assert!(backward(&mut tape, &params, &seed).is_ok());
    }

    fn mse_loss_and_grad(params: &ParamSet, acts: &[Activation], x: &Matrix, target: &Matrix) -> (f64, Gradients) {
        let mut tape = GradTape::new();
        let y = params.forward(x, acts, &mut tape).unwrap();
        let mut d = y.clone();
        let mut loss = 0.0;
        for (dv, t) in d.data_mut().iter_mut().zip(target.data()) {
            let e = *dv - t;
            loss += 0.5 * e * e;
            *dv = e;
        }
        let (g, _) = backward(&mut tape, params, &d).unwrap();
        (loss, g)
    }

    fn check_mlp(acts: &[Activation], sizes: &[usize], x: Matrix, seed: u64) -> GradCheckReport {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::mlp("m", sizes, &mut r).unwrap();
        let target = Matrix::from_vec(x.rows(), *sizes.last().unwrap(), (0..x.rows() * sizes.last().unwrap()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = mse_loss_and_grad(&params, acts, &x, &target);
        grad_check(&params.layout(), &params.to_flat(), &g.to_flat(), 1e-4, 1e-4, |theta| {
            let mut p = params.clone();
            p.set_flat(theta).unwrap();
            mse_loss_and_grad(&p, acts, &x, &target).0
        })
    }

    #[test]
    fn two_layer_tanh_mlp_passes_grad_check() {
        let mut r = rng();
        let x = Matrix::from_vec(5, 6, (0..30).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = check_mlp(&[Activation::Tanh, Activation::Identity], &[6, 5, 3], x, 1);
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err < 1e-4);
        assert_eq!(report.checked, 6 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn identity_network_matches_exactly() {
        let params = ParamSet::new(vec![("id".into(), Dense { weight: Matrix::identity(2), bias: vec![0.0; 2] })]).unwrap();
        let x = Matrix::from_vec(1, 2, vec![0.5, -0.25]).unwrap();
        let mut tape = GradTape::new();
        let y = params.forward(&x, &[Activation::Identity], &mut tape).unwrap();
        assert_eq!(y, x);
        // Loss = sum(y): the input gradient is exactly one everywhere.
        let (_, gin) = backward(&mut tape, &params, &Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(gin.data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_away_from_kink_passes_grad_check() {
        // Offset inputs so no pre-activation sits near zero.
        let mut r = rng();
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| r.gen_range(0.5..1.5)).collect()).unwrap();
        let mut params = ParamSet::mlp("m", &[4, 3, 2], &mut r).unwrap();
        for v in params.layer_mut(0).weight.data_mut() {
            *v = v.abs() + 0.1;
        }
        let acts = [Activation::Relu, Activation::Identity];
        let target = Matrix::zeros(5, 2);
        let (_, g) = mse_loss_and_grad(&params, &acts, &x, &target);
        let report = grad_check(&params.layout(), &params.to_flat(), &g.to_flat(), 1e-4, 1e-4, |theta| {
            let mut p = params.clone();
            p.set_flat(theta).unwrap();
            mse_loss_and_grad(&p, &acts, &x, &target).0
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut r = rng();
        let mut params = ParamSet::mlp("m", &[3, 2], &mut r).unwrap();
        let before = params.to_flat();
        let g = Gradients::zeros_like(&params);
        adam_step(&mut params, &g, &AdamConfig::default(), 1).unwrap();
        assert_eq!(params.to_flat(), before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut r = rng();
        let mut params = ParamSet::mlp("m", &[3, 2], &mut r).unwrap();
        let before = params.to_flat();
        let mut g = Gradients::zeros_like(&params);
        for (i, v) in g.layers[0].weight.data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.37 } else { -2.5 };
        }
        g.layers[0].bias = vec![0.01, -0.01];
        let cfg = AdamConfig::default();
        adam_step(&mut params, &g, &cfg, 1).unwrap();
        for ((a, b), gv) in params.to_flat().iter().zip(&before).zip(g.to_flat()) {
            let step = b - a;
            let expect = cfg.lr * gv.signum();
            assert!((step / expect - 1.0).abs() < 1e-6, "step {step} vs {expect}");
        }
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut params = ParamSet::new(vec![("w".into(), Dense { weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(), bias: vec![0.0] })]).unwrap();
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        for t in 1..=500 {
            let w = params.layer(0).weight.get(0, 0);
            let mut g = Gradients::zeros_like(&params);
            g.layers[0].weight.set(0, 0, 2.0 * w);
            adam_step(&mut params, &g, &cfg, t).unwrap();
        }
        assert!(params.layer(0).weight.get(0, 0).abs() < 1e-3);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut r = rng();
        let mut params = ParamSet::mlp("enc", &[2, 2, 2], &mut r).unwrap();
        let before = params.clone();
        let mut g = Gradients::zeros_like(&params);
        g.layers[1].bias[1] = f64::NAN;
        match adam_step(&mut params, &g, &AdamConfig::default(), 1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("enc.1.bias"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, before);
    }

    #[test]
    fn identical_seeds_train_identically() {
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let mut params = ParamSet::mlp("m", &[3, 4, 2], &mut r).unwrap();
            let x = Matrix::from_vec(4, 3, (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let target = Matrix::zeros(4, 2);
            for t in 1..=50 {
                let (_, g) = mse_loss_and_grad(&params, &[Activation::Tanh, Activation::Identity], &x, &target);
                adam_step(&mut params, &g, &AdamConfig::default(), t).unwrap();
            }
            params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
