//! Full-sequence backpropagation through time, batched over sequences.
//!
//! Sequences of unequal length are packed time-major and padded; padded
//! steps carry zero input and zero loss weight, so they contribute nothing
//! to the loss or the gradient. The loss is the mean over all real timesteps
//! of `((σ − σ*) / label_std)²`.

use rand::Rng;

use super::gemm::gemm;
use super::{sigmoid, tanh, NetParams, ParamLayout};
use crate::error::{Error, Result};

/// One training sequence: normalised inputs (row-major `len × input_dim`)
/// and raw steering labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Inverted-dropout multipliers on the hidden layer, one `len × fc_units`
/// block per sequence. Entries are 0 or `1 / (1 − rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub per_sequence: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(rng: &mut R, lengths: &[usize], fc_units: usize, rate: f64) -> Self {
        let keep = 1.0 - rate;
        let per_sequence = lengths
            .iter()
            .map(|&len| {
                (0..len * fc_units)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            })
            .collect();
        DropoutMasks { per_sequence }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Gradient of the mean normalised squared error with respect to every
/// parameter, in the flat parameter order.
pub fn bptt_gradients(
    params: &NetParams,
    sequences: &[Sequence],
    masks: Option<&DropoutMasks>,
    label_std: f64,
) -> Result<GradientResult> {
    let batch = Batch::new(sequences, params.config.input_dim)?;
    let mut work = Workspace::default();
    batch.gradients(params, masks, label_std, &mut work)
}

/// Mean normalised squared error in inference mode (no dropout).
pub fn sequence_loss(params: &NetParams, sequences: &[Sequence], label_std: f64) -> Result<f64> {
    let batch = Batch::new(sequences, params.config.input_dim)?;
    let mut work = Workspace::default();
    batch.loss(params, label_std, &mut work)
}

/// Sequences packed once, time-major: row `t · B + b` holds step `t` of
/// sequence `b`.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    b: usize,
    t_max: usize,
    lengths: Vec<usize>,
    input_dim: usize,
    x: Vec<f64>,
    labels: Vec<f64>,
    valid: Vec<bool>,
    steps: usize,
}

/// Reusable activation and gradient buffers.
#[derive(Debug, Default)]
pub(crate) struct Workspace {
    gates: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
    h_prev: Vec<f64>,
    fc: Vec<f64>,
    mask: Vec<f64>,
    drop: Vec<f64>,
    y: Vec<f64>,
    dz: Vec<f64>,
    dpre: Vec<f64>,
    dh_fc: Vec<f64>,
}

fn resize(v: &mut Vec<f64>, n: usize) {
    v.clear();
    v.resize(n, 0.0);
}

/// Resizes without clearing; for buffers that are fully overwritten.
fn ensure(v: &mut Vec<f64>, n: usize) {
    if v.len() != n {
        resize(v, n);
    }
}

impl Batch {
    pub(crate) fn new(sequences: &[Sequence], input_dim: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::invalid("no sequences given"));
        }
        for (k, s) in sequences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("sequence {k} is empty")));
            }
            if s.inputs.len() != s.len() * input_dim {
                return Err(Error::invalid(format!(
                    "sequence {k} has {} input values for {} labels",
                    s.inputs.len(),
                    s.len()
                )));
            }
        }
        let b = sequences.len();
        let lengths: Vec<usize> = sequences.iter().map(Sequence::len).collect();
        let t_max = *lengths.iter().max().unwrap_or(&0);
        let mut x = vec![0.0; t_max * b * input_dim];
        let mut labels = vec![0.0; t_max * b];
        let mut valid = vec![false; t_max * b];
        for (j, s) in sequences.iter().enumerate() {
            for t in 0..s.len() {
                let row = t * b + j;
                x[row * input_dim..(row + 1) * input_dim]
                    .copy_from_slice(&s.inputs[t * input_dim..(t + 1) * input_dim]);
                labels[row] = s.labels[t];
                valid[row] = true;
            }
        }
        Ok(Batch {
            b,
            t_max,
            steps: lengths.iter().sum(),
            lengths,
            input_dim,
            x,
            labels,
            valid,
        })
    }

    pub(crate) fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn pack_masks(&self, masks: &DropoutMasks, fc: usize, out: &mut Vec<f64>) -> Result<()> {
        if masks.per_sequence.len() != self.b {
            return Err(Error::invalid("one dropout mask per sequence is required"));
        }
        resize(out, self.t_max * self.b * fc);
        for (j, m) in masks.per_sequence.iter().enumerate() {
            if m.len() != self.lengths[j] * fc {
                return Err(Error::invalid(format!("dropout mask {j} has the wrong length")));
            }
            for t in 0..self.lengths[j] {
                let row = t * self.b + j;
                out[row * fc..(row + 1) * fc].copy_from_slice(&m[t * fc..(t + 1) * fc]);
            }
        }
        Ok(())
    }

    fn forward(&self, params: &NetParams, masks: Option<&DropoutMasks>, w: &mut Workspace) -> Result<()> {
        let l = params.layout();
        if l.input != self.input_dim {
            return Err(Error::invalid("sequence width does not match the network input"));
        }
        let p = &params.values;
        let (b, nh, nf) = (self.b, l.hidden, l.fc);
        let g4 = 4 * nh;
        let rows = self.t_max * b;

        // Input projection for every step at once, plus bias.
        ensure(&mut w.gates, rows * g4);
        for r in 0..rows {
            w.gates[r * g4..(r + 1) * g4].copy_from_slice(&p[l.b..l.b + g4]);
        }
        gemm(rows, l.input, g4, 1.0, &self.x, false, &p[l.w_x..l.w_h], true, 1.0, &mut w.gates);

        ensure(&mut w.c, rows * nh);
        ensure(&mut w.tc, rows * nh);
        ensure(&mut w.h, rows * nh);
        ensure(&mut w.h_prev, rows * nh);
        w.h_prev[..b * nh].fill(0.0);
        let w_h = &p[l.w_h..l.b];
        for t in 0..self.t_max {
            let (lo, hi) = (t * b, (t + 1) * b);
            if t > 0 {
                w.h_prev[lo * nh..hi * nh].copy_from_slice(&w.h[(lo - b) * nh..lo * nh]);
                gemm(b, nh, g4, 1.0, &w.h_prev[lo * nh..hi * nh], false, w_h, true, 1.0, &mut w.gates[lo * g4..hi * g4]);
            }
            for r in lo..hi {
                let z = &mut w.gates[r * g4..(r + 1) * g4];
                for u in 0..nh {
                    z[u] = sigmoid(z[u]);
                    z[nh + u] = sigmoid(z[nh + u]);
                    z[2 * nh + u] = tanh(z[2 * nh + u]);
                    z[3 * nh + u] = sigmoid(z[3 * nh + u]);
                }
                for u in 0..nh {
                    let c_prev = if t > 0 { w.c[(r - b) * nh + u] } else { 0.0 };
                    let c = z[nh + u] * c_prev + z[u] * z[2 * nh + u];
                    let tc = tanh(c);
                    w.c[r * nh + u] = c;
                    w.tc[r * nh + u] = tc;
                    w.h[r * nh + u] = z[3 * nh + u] * tc;
                }
            }
        }

        // Hidden layer and output for every step at once.
        ensure(&mut w.fc, rows * nf);
        for r in 0..rows {
            w.fc[r * nf..(r + 1) * nf].copy_from_slice(&p[l.b_fc..l.w_out]);
        }
        gemm(rows, nh, nf, 1.0, &w.h, false, &p[l.w_fc..l.b_fc], true, 1.0, &mut w.fc);
        for v in &mut w.fc {
            *v = tanh(*v);
        }
        match masks {
            Some(m) => {
                self.pack_masks(m, nf, &mut w.mask)?;
                w.drop.clear();
                w.drop.extend(w.mask.iter().zip(&w.fc).map(|(m, a)| m * a));
            }
            None => {
                w.drop.clear();
                w.drop.extend_from_slice(&w.fc);
            }
        }
        ensure(&mut w.y, rows);
        gemm(rows, nf, 1, 1.0, &w.drop, false, &p[l.w_out..l.total], false, 0.0, &mut w.y);
        Ok(())
    }

    fn loss_from_outputs(&self, scale: f64, label_std: f64, y: &[f64]) -> f64 {
        let mut sum = 0.0;
        for r in 0..y.len() {
            if self.valid[r] {
                let e = (scale * tanh(y[r]) - self.labels[r]) / label_std;
                sum += e * e;
            }
        }
        sum / self.steps as f64
    }

    pub(crate) fn loss(&self, params: &NetParams, label_std: f64, w: &mut Workspace) -> Result<f64> {
        check_std(label_std)?;
        self.forward(params, None, w)?;
        Ok(self.loss_from_outputs(params.config.output_scale, label_std, &w.y))
    }

    /// Steering outputs of every real step, per sequence.
    #[cfg(test)]
    pub(crate) fn outputs(&self, params: &NetParams, w: &mut Workspace) -> Result<Vec<Vec<f64>>> {
        self.forward(params, None, w)?;
        let s = params.config.output_scale;
        Ok(self
            .lengths
            .iter()
            .enumerate()
            .map(|(j, &len)| (0..len).map(|t| s * tanh(w.y[t * self.b + j])).collect())
            .collect())
    }

    pub(crate) fn gradients(
        &self,
        params: &NetParams,
        masks: Option<&DropoutMasks>,
        label_std: f64,
        w: &mut Workspace,
    ) -> Result<GradientResult> {
        check_std(label_std)?;
        self.forward(params, masks, w)?;
        let l: ParamLayout = params.layout();
        let p = &params.values;
        let (b, nh, nf) = (self.b, l.hidden, l.fc);
        let g4 = 4 * nh;
        let rows = self.t_max * b;
        let scale = params.config.output_scale;
        let loss = self.loss_from_outputs(scale, label_std, &w.y);
        let mut grad = vec![0.0; l.total];

        // Output layer: dy per row, then dw_out = dropᵀ·dy.
        let norm = 2.0 / (self.steps as f64 * label_std * label_std);
        let mut dy = vec![0.0; rows];
        for r in 0..rows {
            if self.valid[r] {
                let th = tanh(w.y[r]);
                dy[r] = norm * (scale * th - self.labels[r]) * scale * (1.0 - th * th);
            }
        }
        gemm(nf, rows, 1, 1.0, &w.drop, true, &dy, false, 0.0, &mut grad[l.w_out..l.total]);

        // Hidden layer pre-activation gradient.
        let w_out = &p[l.w_out..l.total];
        ensure(&mut w.dpre, rows * nf);
        for r in 0..rows {
            if dy[r] == 0.0 {
                w.dpre[r * nf..(r + 1) * nf].fill(0.0);
                continue;
            }
            for k in 0..nf {
                let a = w.fc[r * nf + k];
                let m = if masks.is_some() { w.mask[r * nf + k] } else { 1.0 };
                w.dpre[r * nf + k] = dy[r] * w_out[k] * m * (1.0 - a * a);
            }
        }
        for r in 0..rows {
            for k in 0..nf {
                grad[l.b_fc + k] += w.dpre[r * nf + k];
            }
        }
        gemm(nf, rows, nh, 1.0, &w.dpre, true, &w.h, false, 0.0, &mut grad[l.w_fc..l.b_fc]);
        ensure(&mut w.dh_fc, rows * nh);
        gemm(rows, nf, nh, 1.0, &w.dpre, false, &p[l.w_fc..l.b_fc], false, 0.0, &mut w.dh_fc);

        // Recurrence, newest step first.
        ensure(&mut w.dz, rows * g4);
        let w_h = &p[l.w_h..l.b];
        let mut dh_next = vec![0.0; b * nh];
        let mut dc_next = vec![0.0; b * nh];
        for t in (0..self.t_max).rev() {
            let (lo, hi) = (t * b, (t + 1) * b);
            for r in lo..hi {
                let j = r - lo;
                let z = &w.gates[r * g4..(r + 1) * g4];
                let dz = &mut w.dz[r * g4..(r + 1) * g4];
                for u in 0..nh {
                    let (ig, fg, gg, og) = (z[u], z[nh + u], z[2 * nh + u], z[3 * nh + u]);
                    let tc = w.tc[r * nh + u];
                    let dh = w.dh_fc[r * nh + u] + dh_next[j * nh + u];
                    let dc = dh * og * (1.0 - tc * tc) + dc_next[j * nh + u];
                    let c_prev = if t > 0 { w.c[(r - b) * nh + u] } else { 0.0 };
                    dz[u] = dc * gg * ig * (1.0 - ig);
                    dz[nh + u] = dc * c_prev * fg * (1.0 - fg);
                    dz[2 * nh + u] = dc * ig * (1.0 - gg * gg);
                    dz[3 * nh + u] = dh * tc * og * (1.0 - og);
                    dc_next[j * nh + u] = dc * fg;
                }
            }
            if t > 0 {
                gemm(b, g4, nh, 1.0, &w.dz[lo * g4..hi * g4], false, w_h, false, 0.0, &mut dh_next);
            }
        }

        // Deferred weight gradients over all steps.
        gemm(g4, rows, nh, 1.0, &w.dz, true, &w.h_prev, false, 0.0, &mut grad[l.w_h..l.b]);
        gemm(g4, rows, l.input, 1.0, &w.dz, true, &self.x, false, 0.0, &mut grad[l.w_x..l.w_h]);
        for r in 0..rows {
            for q in 0..g4 {
                grad[l.b + q] += w.dz[r * g4 + q];
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("bptt", "non-finite loss or gradient"));
        }
        Ok(GradientResult { loss, gradient: grad })
    }
}

fn check_std(label_std: f64) -> Result<()> {
    if !(label_std > 0.0) || !label_std.is_finite() {
        return Err(Error::invalid(format!("label scale must be positive, got {label_std}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward_step, HiddenState, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> NetConfig {
        NetConfig {
            input_dim: 3,
            lstm_units: 5,
            fc_units: 4,
            dropout_rate: 0.2,
            output_scale: 0.3,
        }
    }

    fn random_sequences(rng: &mut ChaCha8Rng, lengths: &[usize], dim: usize) -> Vec<Sequence> {
        lengths
            .iter()
            .map(|&n| Sequence {
                inputs: (0..n * dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                labels: (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            })
            .collect()
    }

    /// Step-by-step reference loss using the single-step forward pass.
    fn reference_loss(params: &NetParams, seqs: &[Sequence], masks: Option<&DropoutMasks>, std: f64) -> f64 {
        let cfg = params.config;
        let mut sum = 0.0;
        let mut n = 0;
        for (j, s) in seqs.iter().enumerate() {
            let mut h = HiddenState::zeros(&cfg);
            for t in 0..s.len() {
                let x = &s.inputs[t * cfg.input_dim..(t + 1) * cfg.input_dim];
                let m = masks.map(|m| &m.per_sequence[j][t * cfg.fc_units..(t + 1) * cfg.fc_units]);
                let (sigma, next) = forward_step(params, x, &h, m).unwrap();
                h = next;
                let e = (sigma - s.labels[t]) / std;
                sum += e * e;
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn batched_loss_matches_stepwise_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = NetParams::init(small_config(), 2);
        let seqs = random_sequences(&mut rng, &[7, 3, 11], 3);
        let masks = DropoutMasks::sample(&mut rng, &[7, 3, 11], 4, 0.2);
        let batch = Batch::new(&seqs, 3).unwrap();
        let mut w = Workspace::default();
        let g = batch.gradients(&params, Some(&masks), 0.1, &mut w).unwrap();
        let r = reference_loss(&params, &seqs, Some(&masks), 0.1);
        assert!((g.loss - r).abs() < 1e-12 * r.max(1.0));
        let l = batch.loss(&params, 0.1, &mut w).unwrap();
        assert!((l - reference_loss(&params, &seqs, None, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = NetParams::init(small_config(), 9);
        let seqs = random_sequences(&mut rng, &[9, 4, 6], 3);
        let masks = DropoutMasks::sample(&mut rng, &[9, 4, 6], 4, 0.2);
        let g = bptt_gradients(&params, &seqs, Some(&masks), 0.2).unwrap();
        let h = 1e-5;
        for k in 0..params.values.len() {
            let mut plus = params.clone();
            plus.values[k] += h;
            let mut minus = params.clone();
            minus.values[k] -= h;
            let fd = (reference_loss(&plus, &seqs, Some(&masks), 0.2)
                - reference_loss(&minus, &seqs, Some(&masks), 0.2))
                / (2.0 * h);
            let a = g.gradient[k];
            // floor keeps near-zero coordinates from measuring difference noise
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom < 1e-5, "coordinate {k}: {a} vs {fd}");
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = NetParams::init(small_config(), 4);
        let mut seqs = random_sequences(&mut rng, &[6, 8], 3);
        let batch = Batch::new(&seqs, 3).unwrap();
        let outs = batch.outputs(&params, &mut Workspace::default()).unwrap();
        for (s, o) in seqs.iter_mut().zip(outs) {
            s.labels = o;
        }
        let g = bptt_gradients(&params, &seqs, None, 0.1).unwrap();
        let norm: f64 = g.gradient.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-12);
    }

    #[test]
    fn duplicating_sequences_keeps_the_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = NetParams::init(small_config(), 1);
        let seqs = random_sequences(&mut rng, &[5, 9], 3);
        let doubled: Vec<Sequence> = seqs.iter().chain(seqs.iter()).cloned().collect();
        let a = bptt_gradients(&params, &seqs, None, 0.1).unwrap();
        let b = bptt_gradients(&params, &doubled, None, 0.1).unwrap();
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let params = NetParams::init(small_config(), 1);
        assert!(matches!(bptt_gradients(&params, &[], None, 1.0), Err(Error::InvalidArgument(_))));
        let empty = Sequence { inputs: vec![], labels: vec![] };
        assert!(matches!(bptt_gradients(&params, &[empty], None, 1.0), Err(Error::InvalidArgument(_))));
    }
}
