use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::arch::{Architecture, LayerKind, LayerShape, PnnParams};
use super::{Sequence, SequenceSet};
use crate::math::{self, axpy, dot, HALF_LN_2PI};
use crate::{Error, Result};

/// Added to `softplus(raw_scale)` so variances stay strictly positive.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Per-step Gaussian prediction of one member for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSeqPrediction {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianSeqPrediction {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Gradient with the same layout as [`PnnParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(self.0.iter().map(|g| g * g).sum())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Mean over time steps of the Gaussian negative log-likelihood including
/// the `½·ln 2π` constant.
pub fn gaussian_nll(pred: &GaussianSeqPrediction, targets: &[f64]) -> Result<f64> {
    if pred.means.len() != targets.len() || pred.variances.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} steps, targets {}",
            pred.means.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".to_string()));
    }
    if pred.variances.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument("variances must be positive".to_string()));
    }
    let total: f64 = pred
        .means
        .iter()
        .zip(&pred.variances)
        .zip(targets)
        .map(|((&mu, &var), &y)| step_nll(mu, var, y))
        .sum();
    Ok(total / targets.len() as f64)
}

#[inline]
fn step_nll(mu: f64, var: f64, y: f64) -> f64 {
    let r = y - mu;
    0.5 * math::ln(var) + r * r / (2.0 * var) + HALF_LN_2PI
}

/// Activations of one LSTM layer over a whole sequence.
#[derive(Debug, Default, Clone)]
struct LstmTrace {
    /// `[T × 4h]` post-activation gates (i, f, g, o).
    gates: Vec<f64>,
    /// `[T × h]`
    cells: Vec<f64>,
    /// `[T × h]` tanh of the cell state.
    cell_tanh: Vec<f64>,
    /// `[T × h]`
    hidden: Vec<f64>,
}

/// Forward/backward engine with reusable buffers. Create one per thread.
#[derive(Debug, Clone)]
pub struct Evaluator {
    layers: Vec<LayerShape>,
    lstm: Vec<LstmTrace>,
    /// Post-activation outputs of every dense layer, `[T × units]`.
    dense: Vec<Vec<f64>>,
    concat: Vec<f64>,
    pre: Vec<f64>,
    /// Gradient w.r.t. the current layer's output, `[T × units]`.
    d_out: Vec<f64>,
    d_in: Vec<f64>,
    d_concat: Vec<f64>,
    d_pre: Vec<f64>,
    dh_next: Vec<f64>,
    dc_next: Vec<f64>,
    steps: usize,
}

impl Evaluator {
    pub fn new(architecture: &Architecture) -> Self {
        let layers = architecture.layers();
        let n_lstm = architecture.recurrent_layers.len();
        Self {
            lstm: vec![LstmTrace::default(); n_lstm],
            dense: vec![Vec::new(); layers.len() - n_lstm],
            layers,
            concat: Vec::new(),
            pre: Vec::new(),
            d_out: Vec::new(),
            d_in: Vec::new(),
            d_concat: Vec::new(),
            d_pre: Vec::new(),
            dh_next: Vec::new(),
            dc_next: Vec::new(),
            steps: 0,
        }
    }

    fn check(&self, params: &PnnParams, inputs: &[f64]) -> Result<usize> {
        let f = params.architecture.input_dim;
        if params.architecture.layers() != self.layers {
            return Err(Error::InvalidArgument(
                "evaluator built for a different architecture".to_string(),
            ));
        }
        if inputs.is_empty() || !inputs.len().is_multiple_of(f) {
            return Err(Error::InvalidArgument(format!(
                "input of length {} is not a nonempty [T × {f}] matrix",
                inputs.len()
            )));
        }
        Ok(inputs.len() / f)
    }

    /// Runs the network; the raw head output `[T × 2]` (mean, raw scale)
    /// ends up in the last dense buffer.
    fn run(&mut self, params: &PnnParams, inputs: &[f64]) -> Result<()> {
        let steps = self.check(params, inputs)?;
        self.steps = steps;
        let w = &params.values;
        let n_lstm = self.lstm.len();

        for (k, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Lstm => {
                    let (before, rest) = self.lstm.split_at_mut(k);
                    let x: &[f64] = if k == 0 { inputs } else { &before[k - 1].hidden };
                    lstm_forward(layer, w, x, steps, &mut rest[0], &mut self.concat, &mut self.pre);
                }
                LayerKind::DenseTanh | LayerKind::GaussianHead => {
                    let d = k - n_lstm;
                    let (before, rest) = self.dense.split_at_mut(d);
                    let x: &[f64] = if d == 0 {
                        &self.lstm[n_lstm - 1].hidden
                    } else {
                        &before[d - 1]
                    };
                    dense_forward(layer, w, x, steps, &mut rest[0]);
                }
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, params: &PnnParams, inputs: &[f64]) -> Result<GaussianSeqPrediction> {
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".to_string()));
        }
        self.run(params, inputs)?;
        let raw = self.dense.last().expect("architecture has a head layer");
        let (means, variances) = raw
            .chunks_exact(2)
            .map(|o| (o[0], math::softplus(o[1]) + VARIANCE_FLOOR))
            .unzip();
        Ok(GaussianSeqPrediction { means, variances })
    }

    /// Adds `weight · ∂NLL(seq)/∂θ` to `grad` and returns the sequence's
    /// mean NLL.
    pub fn accumulate_gradient(
        &mut self,
        params: &PnnParams,
        seq: Sequence<'_>,
        weight: f64,
        grad: &mut Gradients,
    ) -> Result<f64> {
        if seq.n_features != params.architecture.input_dim
            || seq.inputs.len() != seq.targets.len() * seq.n_features
        {
            return Err(Error::InvalidArgument(format!(
                "sequence shape [{} × {}] does not match input_dim {}",
                seq.targets.len(),
                seq.n_features,
                params.architecture.input_dim
            )));
        }
        if grad.0.len() != params.values.len() {
            return Err(Error::InvalidArgument("gradient buffer has the wrong length".to_string()));
        }
        let steps = seq.steps();
        self.run(params, seq.inputs)?;
        let raw = self.dense.last().expect("architecture has a head layer");

        let scale = weight / steps as f64;
        let mut loss = 0.0;
        self.d_out.clear();
        self.d_out.resize(steps * 2, 0.0);
        for t in 0..steps {
            let mu = raw[2 * t];
            let s = raw[2 * t + 1];
            let var = math::softplus(s) + VARIANCE_FLOOR;
            let y = seq.targets[t];
            loss += step_nll(mu, var, y);
            let r = mu - y;
            // ∂/∂μ and ∂/∂s of ½ln σ² + r²/(2σ²), with dσ²/ds = sigmoid(s).
            self.d_out[2 * t] = scale * r / var;
            self.d_out[2 * t + 1] =
                scale * (0.5 / var - 0.5 * r * r / (var * var)) * math::sigmoid(s);
        }
        let loss = loss / steps as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".to_string()));
        }
        self.backward(params, seq.inputs, grad);
        Ok(loss)
    }

    fn backward(&mut self, params: &PnnParams, inputs: &[f64], grad: &mut Gradients) {
        let steps = self.steps;
        let w = &params.values;
        let g = &mut grad.0;
        let n_lstm = self.lstm.len();

        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            let need_input_grad = k > 0;
            match layer.kind {
                LayerKind::Lstm => {
                    let x: &[f64] = if k == 0 { inputs } else { &self.lstm[k - 1].hidden };
                    lstm_backward(
                        &layer,
                        w,
                        g,
                        x,
                        steps,
                        &self.lstm[k],
                        &self.d_out,
                        need_input_grad.then_some(&mut self.d_in),
                        &mut Scratch {
                            concat: &mut self.concat,
                            d_pre: &mut self.d_pre,
                            d_concat: &mut self.d_concat,
                            dh_next: &mut self.dh_next,
                            dc_next: &mut self.dc_next,
                        },
                    );
                }
                LayerKind::DenseTanh | LayerKind::GaussianHead => {
                    let d = k - n_lstm;
                    let x: &[f64] = if d == 0 {
                        &self.lstm[n_lstm - 1].hidden
                    } else {
                        &self.dense[d - 1]
                    };
                    dense_backward(
                        &layer,
                        w,
                        g,
                        x,
                        &self.dense[d],
                        steps,
                        &self.d_out,
                        &mut self.d_pre,
                        &mut self.d_in,
                    );
                }
            }
            core::mem::swap(&mut self.d_out, &mut self.d_in);
        }
    }
}

fn lstm_forward(
    layer: &LayerShape,
    w: &[f64],
    x: &[f64],
    steps: usize,
    trace: &mut LstmTrace,
    concat: &mut Vec<f64>,
    pre: &mut Vec<f64>,
) {
    let h = layer.units;
    let n_in = layer.inputs;
    let cols = layer.cols();
    let weights = &w[layer.offset..layer.bias_offset()];
    let bias = &w[layer.bias_offset()..layer.bias_offset() + 4 * h];

    trace.gates.clear();
    trace.gates.resize(steps * 4 * h, 0.0);
    trace.cells.clear();
    trace.cells.resize(steps * h, 0.0);
    trace.cell_tanh.clear();
    trace.cell_tanh.resize(steps * h, 0.0);
    trace.hidden.clear();
    trace.hidden.resize(steps * h, 0.0);
    concat.clear();
    concat.resize(cols, 0.0);
    pre.clear();
    pre.resize(4 * h, 0.0);

    for t in 0..steps {
        concat[..n_in].copy_from_slice(&x[t * n_in..(t + 1) * n_in]);
        if t > 0 {
            concat[n_in..].copy_from_slice(&trace.hidden[(t - 1) * h..t * h]);
        }
        for (r, z) in pre.iter_mut().enumerate() {
            *z = bias[r] + dot(&weights[r * cols..(r + 1) * cols], concat);
        }
        let gates = &mut trace.gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            gates[j] = math::sigmoid(pre[j]);
            gates[h + j] = math::sigmoid(pre[h + j]);
            gates[2 * h + j] = math::tanh(pre[2 * h + j]);
            gates[3 * h + j] = math::sigmoid(pre[3 * h + j]);
        }
        for j in 0..h {
            let c_prev = if t > 0 { trace.cells[(t - 1) * h + j] } else { 0.0 };
            let c = gates[h + j] * c_prev + gates[j] * gates[2 * h + j];
            let tc = math::tanh(c);
            trace.cells[t * h + j] = c;
            trace.cell_tanh[t * h + j] = tc;
            trace.hidden[t * h + j] = gates[3 * h + j] * tc;
        }
    }
}

struct Scratch<'a> {
    concat: &'a mut Vec<f64>,
    d_pre: &'a mut Vec<f64>,
    d_concat: &'a mut Vec<f64>,
    dh_next: &'a mut Vec<f64>,
    dc_next: &'a mut Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    layer: &LayerShape,
    w: &[f64],
    g: &mut [f64],
    x: &[f64],
    steps: usize,
    trace: &LstmTrace,
    d_hidden: &[f64],
    mut d_input: Option<&mut Vec<f64>>,
    s: &mut Scratch<'_>,
) {
    let h = layer.units;
    let n_in = layer.inputs;
    let cols = layer.cols();
    let weights = &w[layer.offset..layer.bias_offset()];
    let (g_weights, g_rest) = g[layer.offset..].split_at_mut(layer.weight_len());
    let g_bias = &mut g_rest[..4 * h];

    if let Some(d) = d_input.as_deref_mut() {
        d.clear();
        d.resize(steps * n_in, 0.0);
    }
    s.dh_next.clear();
    s.dh_next.resize(h, 0.0);
    s.dc_next.clear();
    s.dc_next.resize(h, 0.0);
    s.d_pre.clear();
    s.d_pre.resize(4 * h, 0.0);
    s.concat.clear();
    s.concat.resize(cols, 0.0);
    s.d_concat.clear();
    s.d_concat.resize(cols, 0.0);

    for t in (0..steps).rev() {
        let gates = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let (i, f, gg, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let tc = trace.cell_tanh[t * h + j];
            let c_prev = if t > 0 { trace.cells[(t - 1) * h + j] } else { 0.0 };
            let dh = d_hidden[t * h + j] + s.dh_next[j];
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc) + s.dc_next[j];
            s.dc_next[j] = dc * f;
            s.d_pre[j] = dc * gg * i * (1.0 - i);
            s.d_pre[h + j] = dc * c_prev * f * (1.0 - f);
            s.d_pre[2 * h + j] = dc * i * (1.0 - gg * gg);
            s.d_pre[3 * h + j] = d_o * o * (1.0 - o);
        }

        s.concat[..n_in].copy_from_slice(&x[t * n_in..(t + 1) * n_in]);
        if t > 0 {
            s.concat[n_in..].copy_from_slice(&trace.hidden[(t - 1) * h..t * h]);
        } else {
            s.concat[n_in..].fill(0.0);
        }
        s.d_concat.fill(0.0);
        for r in 0..4 * h {
            let dp = s.d_pre[r];
            if dp == 0.0 {
                continue;
            }
            g_bias[r] += dp;
            axpy(dp, s.concat, &mut g_weights[r * cols..(r + 1) * cols]);
            axpy(dp, &weights[r * cols..(r + 1) * cols], s.d_concat);
        }
        if let Some(d) = d_input.as_deref_mut() {
            d[t * n_in..(t + 1) * n_in].copy_from_slice(&s.d_concat[..n_in]);
        }
        s.dh_next.copy_from_slice(&s.d_concat[n_in..]);
    }
}

fn dense_forward(layer: &LayerShape, w: &[f64], x: &[f64], steps: usize, out: &mut Vec<f64>) {
    let n_in = layer.inputs;
    let units = layer.units;
    let weights = &w[layer.offset..layer.bias_offset()];
    let bias = &w[layer.bias_offset()..layer.bias_offset() + units];
    out.clear();
    out.resize(steps * units, 0.0);
    for t in 0..steps {
        let xt = &x[t * n_in..(t + 1) * n_in];
        for r in 0..units {
            let z = bias[r] + dot(&weights[r * n_in..(r + 1) * n_in], xt);
            out[t * units + r] = match layer.kind {
                LayerKind::DenseTanh => math::tanh(z),
                _ => z,
            };
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    layer: &LayerShape,
    w: &[f64],
    g: &mut [f64],
    x: &[f64],
    out: &[f64],
    steps: usize,
    d_out: &[f64],
    d_pre: &mut Vec<f64>,
    d_input: &mut Vec<f64>,
) {
    let n_in = layer.inputs;
    let units = layer.units;
    let weights = &w[layer.offset..layer.bias_offset()];
    let (g_weights, g_rest) = g[layer.offset..].split_at_mut(layer.weight_len());
    let g_bias = &mut g_rest[..units];

    d_pre.clear();
    d_pre.extend(d_out.iter().zip(out).map(|(&d, &y)| match layer.kind {
        LayerKind::DenseTanh => d * (1.0 - y * y),
        _ => d,
    }));
    d_input.clear();
    d_input.resize(steps * n_in, 0.0);
    for t in 0..steps {
        let xt = &x[t * n_in..(t + 1) * n_in];
        let dxt = &mut d_input[t * n_in..(t + 1) * n_in];
        for r in 0..units {
            let dp = d_pre[t * units + r];
            g_bias[r] += dp;
            axpy(dp, xt, &mut g_weights[r * n_in..(r + 1) * n_in]);
            axpy(dp, &weights[r * n_in..(r + 1) * n_in], dxt);
        }
    }
}

/// Per-step Gaussian prediction for one `[T × F]` input. Recurrent state
/// starts at zero.
pub fn forward(params: &PnnParams, inputs: &[f64]) -> Result<GaussianSeqPrediction> {
    Evaluator::new(&params.architecture).forward(params, inputs)
}

/// Mean NLL over a batch without gradients.
pub fn batch_loss(params: &PnnParams, batch: &[Sequence<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    let mut eval = Evaluator::new(&params.architecture);
    let mut total = 0.0;
    for (i, seq) in batch.iter().enumerate() {
        let pred = eval.forward(params, seq.inputs)?;
        let loss = gaussian_nll(&pred, seq.targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of the mean batch NLL and the loss itself.
pub fn grad(params: &PnnParams, batch: &[Sequence<'_>]) -> Result<(Gradients, f64)> {
    let mut eval = Evaluator::new(&params.architecture);
    let mut grads = Gradients::zeros(params.len());
    let indices: Vec<usize> = (0..batch.len()).collect();
    let loss = batch_gradient(&mut eval, params, batch, &indices, &mut grads)?;
    Ok((grads, loss))
}

/// Accumulates the mean-NLL gradient of `set[indices]` into `grads`
/// (which should start at zero) and returns the mean loss.
pub(crate) fn batch_gradient<S: SequenceSet + ?Sized>(
    eval: &mut Evaluator,
    params: &PnnParams,
    set: &S,
    indices: &[usize],
    grads: &mut Gradients,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    let weight = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    for (pos, &i) in indices.iter().enumerate() {
        let loss = eval
            .accumulate_gradient(params, set.sequence(i), weight, grads)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { sample: pos },
                other => other,
            })?;
        total += loss;
    }
    Ok(total * weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Architecture {
        Architecture::new(3, vec![4, 3], vec![3, 2]).unwrap()
    }

    fn random_inputs(rng: &mut ChaCha8Rng, steps: usize, f: usize) -> Vec<f64> {
        (0..steps * f).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_network_predicts_softplus_zero() {
        let arch = Architecture::lstm_32_16(5);
        let params = PnnParams {
            values: vec![0.0; arch.param_count()],
            architecture: arch,
            seed: 0,
        };
        let pred = forward(&params, &[0.0; 5 * 7]).unwrap();
        assert_eq!(pred.len(), 7);
        for t in 0..7 {
            assert_eq!(pred.means[t], 0.0);
            assert!((pred.variances[t] - (core::f64::consts::LN_2 + 1e-6)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let params = init_params(&tiny_arch(), 3).unwrap();
        assert!(matches!(forward(&params, &[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(forward(&params, &[1.0; 4]), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            forward(&params, &[1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn first_step_ignores_later_steps() {
        let params = init_params(&tiny_arch(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_inputs(&mut rng, 2, 3);
        let one = forward(&params, &x[..3]).unwrap();
        let two = forward(&params, &x).unwrap();
        assert_eq!(one.means[0].to_bits(), two.means[0].to_bits());
        assert_eq!(one.variances[0].to_bits(), two.variances[0].to_bits());
    }

    #[test]
    fn causality_under_future_edits() {
        let params = init_params(&tiny_arch(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_inputs(&mut rng, 10, 3);
        let base = forward(&params, &x).unwrap();
        for cut in 0..10 {
            let mut y = x.clone();
            for v in &mut y[(cut + 1) * 3..] {
                *v = rng.random_range(-5.0..5.0);
            }
            let edited = forward(&params, &y).unwrap();
            for t in 0..=cut {
                assert_eq!(base.means[t].to_bits(), edited.means[t].to_bits());
                assert_eq!(base.variances[t].to_bits(), edited.variances[t].to_bits());
            }
        }
    }

    #[test]
    fn variances_positive_and_finite_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for draw in 0..1000 {
            let arch = Architecture::new(2, vec![3], vec![2]).unwrap();
            let mut params = init_params(&arch, draw).unwrap();
            let scale = rng.random_range(0.1..20.0);
            params.values.iter_mut().for_each(|v| *v *= scale);
            let x: Vec<f64> = (0..2 * 6).map(|_| rng.random_range(-1e3..1e3)).collect();
            let pred = forward(&params, &x).unwrap();
            for (m, v) in pred.means.iter().zip(&pred.variances) {
                assert!(m.is_finite() && v.is_finite() && *v > 0.0);
            }
        }
    }

    fn pred(means: &[f64], vars: &[f64]) -> GaussianSeqPrediction {
        GaussianSeqPrediction {
            means: means.to_vec(),
            variances: vars.to_vec(),
        }
    }

    #[test]
    fn nll_reference_values() {
        let y = [1.0, -2.0, 3.5];
        let l = gaussian_nll(&pred(&y, &[1.0; 3]), &y).unwrap();
        assert!((l - 0.918_938_533_204_672_7).abs() < 1e-12);

        let e2 = core::f64::consts::E * core::f64::consts::E;
        let l = gaussian_nll(&pred(&y, &[e2; 3]), &y).unwrap();
        assert!((l - (1.0 + HALF_LN_2PI)).abs() < 1e-12);

        let shifted: Vec<f64> = y.iter().map(|v| v + 2.0).collect();
        let l = gaussian_nll(&pred(&shifted, &[1.0; 3]), &y).unwrap();
        assert!((l - (2.0 + HALF_LN_2PI)).abs() < 1e-12);

        assert!(gaussian_nll(&pred(&y, &[1.0; 3]), &y[..2]).is_err());
        assert!(gaussian_nll(&pred(&y, &[1.0, 0.0, 1.0]), &y).is_err());
    }

    #[test]
    fn unit_variance_nll_is_half_mse_plus_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..50);
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mse = mu.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
            let l = gaussian_nll(&pred(&mu, &vec![1.0; n]), &y).unwrap();
            assert!((l - (0.5 * mse + HALF_LN_2PI)).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn zero_mean_network_has_no_residual_gradient_on_zero_targets() {
        // Head weights and bias for the mean output are zero, so μ̂ ≡ 0; with
        // zero targets the residual term contributes nothing, and only the
        // mean head's gradient would carry it.
        let arch = tiny_arch();
        let mut params = init_params(&arch, 21).unwrap();
        let head = *arch.layers().last().unwrap();
        for c in 0..head.inputs {
            params.values[head.offset + c] = 0.0;
        }
        params.values[head.bias_offset()] = 0.0;
        let x = [0.3, -0.2, 0.9, 1.0, 0.0, -1.0];
        let y = [0.0, 0.0];
        let seq = Sequence {
            inputs: &x,
            targets: &y,
            n_features: 3,
        };
        let (g, _) = grad(&params, &[seq]).unwrap();
        assert!(g.0[head.offset..head.offset + head.inputs].iter().all(|&v| v == 0.0));
        assert_eq!(g.0[head.bias_offset()], 0.0);
    }

    #[test]
    fn duplicated_sample_gradient_equals_single() {
        let params = init_params(&tiny_arch(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_inputs(&mut rng, 4, 3);
        let y = [3.0, 2.0, 1.0, 0.0];
        let seq = Sequence {
            inputs: &x,
            targets: &y,
            n_features: 3,
        };
        let (g1, l1) = grad(&params, &[seq]).unwrap();
        let (g2, l2) = grad(&params, &[seq, seq]).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn loss_from_gradient_path_matches_forward_path() {
        let params = init_params(&tiny_arch(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_inputs(&mut rng, 5, 3);
        let y = [5.0, 4.0, 3.0, 2.0, 1.0];
        let seq = Sequence {
            inputs: &x,
            targets: &y,
            n_features: 3,
        };
        let (_, loss) = grad(&params, &[seq]).unwrap();
        let direct = batch_loss(&params, &[seq]).unwrap();
        assert!((loss - direct).abs() < 1e-13);
    }

    #[test]
    fn nonfinite_loss_names_sample() {
        let arch = Architecture::new(1, vec![1], vec![2]).unwrap();
        let mut params = init_params(&arch, 0).unwrap();
        // Huge negative raw scale drives σ² to the floor; an enormous
        // target then overflows the residual term.
        let head = *arch.layers().last().unwrap();
        params.values[head.bias_offset() + 1] = -1e3;
        let x = [0.0];
        let ok = [0.0];
        let bad = [1e300];
        let batch = [
            Sequence { inputs: &x, targets: &ok, n_features: 1 },
            Sequence { inputs: &x, targets: &bad, n_features: 1 },
        ];
        assert_eq!(grad(&params, &batch).unwrap_err(), Error::NonFiniteLoss { sample: 1 });
    }
}
