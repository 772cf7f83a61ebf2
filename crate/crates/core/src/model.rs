//! Small conditional MLPs for the proximal operator `f(x; t, lambda, c)` and
//! the baseline score `s(x; t, c)`, with exact reverse-mode gradients.
//!
//! Inputs are the point `x`, Fourier features of `t` (and of `ln lambda` for
//! the prox net), and a learned per-condition embedding row. The table has
//! one row per label plus a final row reserved for the null condition. The
//! last dense layer starts at zero, so a fresh prox net is the identity map
//! and a fresh score net returns zero.
//!
//! Parameters live in one flat `Vec<f64>`:
//! `[embedding | W_0 | b_0 | ... | W_out | b_out]`, weights row-major
//! `(fan_in, fan_out)`. Gradients use the same layout.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::target::Condition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Prox,
    Score,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Prox => "prox",
            NetKind::Score => "score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub kind: NetKind,
    pub dim: usize,
    pub labels: usize,
    pub hidden: usize,
    pub depth: usize,
    pub embed: usize,
    pub freqs: usize,
}

impl Architecture {
    /// Three hidden layers of width 128, 8-wide condition embedding, 4 Fourier frequencies.
    pub fn new(kind: NetKind, dim: usize, labels: usize) -> Self {
        Self { kind, dim, labels, hidden: 128, depth: 3, embed: 8, freqs: 4 }
    }

    pub fn with_size(mut self, hidden: usize, depth: usize) -> Self {
        self.hidden = hidden;
        self.depth = depth;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.labels == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::Argument(format!("degenerate architecture: {}", self.descriptor())));
        }
        Ok(())
    }

    fn feature_width(&self) -> usize {
        1 + 2 * self.freqs
    }

    fn embed_offset(&self) -> usize {
        self.dim + self.feature_width() * if self.kind == NetKind::Prox { 2 } else { 1 }
    }

    pub fn input_width(&self) -> usize {
        self.embed_offset() + self.embed
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_width(), self.hidden)];
        shapes.extend(std::iter::repeat((self.hidden, self.hidden)).take(self.depth - 1));
        shapes.push((self.hidden, self.dim));
        shapes
    }

    fn embedding_len(&self) -> usize {
        (self.labels + 1) * self.embed
    }

    pub fn param_count(&self) -> usize {
        self.embedding_len() + self.layer_shapes().iter().map(|(i, o)| i * o + o).sum::<usize>()
    }

    /// One-line `key=value` description; the checkpoint compatibility key.
    pub fn descriptor(&self) -> String {
        format!(
            "kind={} dim={} labels={} hidden={} depth={} embed={} freqs={}",
            self.kind.as_str(),
            self.dim,
            self.labels,
            self.hidden,
            self.depth,
            self.embed,
            self.freqs
        )
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut nums = std::collections::HashMap::new();
        for token in text.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("bad descriptor token `{token}`")))?;
            if k == "kind" {
                kind = Some(match v {
                    "prox" => NetKind::Prox,
                    "score" => NetKind::Score,
                    other => return Err(Error::Argument(format!("unknown network kind `{other}`"))),
                });
            } else {
                let n: usize = v.parse().map_err(|_| Error::Argument(format!("bad descriptor value `{token}`")))?;
                nums.insert(k.to_string(), n);
            }
        }
        let get = |k: &str| nums.get(k).copied().ok_or_else(|| Error::Argument(format!("descriptor lacks `{k}`")));
        let arch = Self {
            kind: kind.ok_or_else(|| Error::Argument("descriptor lacks `kind`".into()))?,
            dim: get("dim")?,
            labels: get("labels")?,
            hidden: get("hidden")?,
            depth: get("depth")?,
            embed: get("embed")?,
            freqs: get("freqs")?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// A minibatch of network queries. `lambdas` is empty for score nets.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub xs: Array2<f64>,
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub conds: Vec<Condition>,
}

impl QueryBatch {
    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            xs: Array2::zeros((0, dim)),
            times: Vec::with_capacity(rows),
            lambdas: Vec::with_capacity(rows),
            conds: Vec::with_capacity(rows),
        }
    }

    pub fn single(x: &[f64], t: f64, lambda: Option<f64>, cond: Condition) -> Self {
        let mut b = Self::with_capacity(x.len(), 1);
        b.push(x, t, lambda, cond);
        b
    }

    pub fn push(&mut self, x: &[f64], t: f64, lambda: Option<f64>, cond: Condition) {
        self.xs.push_row(ndarray::ArrayView1::from(x)).expect("row width matches batch");
        self.times.push(t);
        if let Some(l) = lambda {
            self.lambdas.push(l);
        }
        self.conds.push(cond);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// What an objective hands back to [`Network::value_and_grad`]: its value,
/// its gradient with respect to every network output, and optionally a
/// gradient term that depends on the parameters directly.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub value: f64,
    pub d_outputs: Array2<f64>,
    pub d_params: Option<Vec<f64>>,
}

impl ObjectiveGrad {
    pub fn from_outputs(value: f64, d_outputs: Array2<f64>) -> Self {
        Self { value, d_outputs, d_params: None }
    }
}

fn fourier(z: f64, freqs: usize, out: &mut [f64]) {
    out[0] = z;
    for f in 1..=freqs {
        let (s, c) = (f as f64 * z).sin_cos();
        out[2 * f - 1] = s;
        out[2 * f] = c;
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

struct Trace {
    /// Input of each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

/// The shared conditional MLP behind both network kinds.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

impl Mlp {
    fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng: StreamRng = rng::stream(seed, &[rng::domain::INIT]);
        let mut params = Vec::with_capacity(arch.param_count());
        params.extend((0..arch.embedding_len()).map(|_| rng::normal(&mut rng)));
        let shapes = arch.layer_shapes();
        let last = shapes.len() - 1;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            if l == last {
                params.extend(std::iter::repeat(0.0).take(fan_in * fan_out + fan_out));
            } else {
                let sd = (1.0 / fan_in as f64).sqrt();
                params.extend((0..fan_in * fan_out).map(|_| sd * rng::normal(&mut rng)));
                params.extend(std::iter::repeat(0.0).take(fan_out));
            }
        }
        debug_assert_eq!(params.len(), arch.param_count());
        Ok(Self { arch, params })
    }

    fn cond_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Label(c) if c < self.arch.labels => Ok(c),
            Condition::Label(c) => Err(Error::Argument(format!(
                "label {c} outside the network's {} labels",
                self.arch.labels
            ))),
            Condition::Null => Ok(self.arch.labels),
        }
    }

    fn check_batch(&self, batch: &QueryBatch) -> Result<()> {
        let n = batch.len();
        if batch.xs.nrows() != n || batch.conds.len() != n || batch.xs.ncols() != self.arch.dim {
            return Err(Error::Argument(format!(
                "batch shape {:?} with {} times does not fit a {}-d network",
                batch.xs.dim(),
                n,
                self.arch.dim
            )));
        }
        let want_lambda = self.arch.kind == NetKind::Prox;
        if want_lambda && batch.lambdas.len() != n {
            return Err(Error::Argument("prox queries need one lambda per row".into()));
        }
        if batch.xs.iter().any(|v| !v.is_finite()) || batch.times.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network query contains NaN or infinity".into()));
        }
        if want_lambda && batch.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Argument("prox weight lambda must be positive and finite".into()));
        }
        Ok(())
    }

    fn features(&self, batch: &QueryBatch) -> Result<Array2<f64>> {
        let a = &self.arch;
        let fw = a.feature_width();
        let emb_off = a.embed_offset();
        let table = &self.params[..a.embedding_len()];
        let mut h = Array2::zeros((batch.len(), a.input_width()));
        for (i, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("fresh arrays are contiguous");
            for j in 0..a.dim {
                row[j] = batch.xs[[i, j]];
            }
            fourier(std::f64::consts::PI * batch.times[i], a.freqs, &mut row[a.dim..a.dim + fw]);
            if a.kind == NetKind::Prox {
                fourier(0.5 * batch.lambdas[i].ln(), a.freqs, &mut row[a.dim + fw..a.dim + 2 * fw]);
            }
            let r = self.cond_row(batch.conds[i])?;
            row[emb_off..].copy_from_slice(&table[r * a.embed..(r + 1) * a.embed]);
        }
        Ok(h)
    }

    fn layer(&self, offset: usize, fan_in: usize, fan_out: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[offset..offset + fan_in * fan_out])
            .expect("layer slice matches its shape");
        let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }

    fn forward(&self, batch: &QueryBatch, keep_trace: bool) -> Result<(Array2<f64>, Option<Trace>)> {
        self.check_batch(batch)?;
        let mut h = self.features(batch)?;
        let shapes = self.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut offset = self.arch.embedding_len();
        let mut trace = keep_trace.then(|| Trace { inputs: Vec::new(), pre: Vec::new() });
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let (w, b) = self.layer(offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let mut z = h.dot(&w);
            for mut row in z.axis_iter_mut(Axis(0)) {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l == last {
                if let Some(tr) = trace.as_mut() {
                    tr.inputs.push(h);
                }
                return Ok((z, trace));
            }
            let next = z.mapv(silu);
            if let Some(tr) = trace.as_mut() {
                tr.inputs.push(h);
                tr.pre.push(z);
            }
            h = next;
        }
        unreachable!("architecture always has an output layer")
    }

    /// Gradient of `sum(d_raw * raw_output)` with respect to the parameters.
    fn backward(&self, batch: &QueryBatch, trace: &Trace, d_raw: Array2<f64>) -> Vec<f64> {
        let a = &self.arch;
        let shapes = a.layer_shapes();
        let mut grad = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = a.embedding_len();
        for &(fi, fo) in &shapes {
            offsets.push(off);
            off += fi * fo + fo;
        }

        let mut delta = d_raw;
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let dw = trace.inputs[l].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let o = offsets[l];
            // Logical (row-major) order, whatever layout `dot` chose.
            for (g, v) in grad[o..o + fan_in * fan_out].iter_mut().zip(dw.iter()) {
                *g = *v;
            }
            for (g, v) in grad[o + fan_in * fan_out..o + fan_in * fan_out + fan_out].iter_mut().zip(db.iter()) {
                *g = *v;
            }

            let (w, _) = self.layer(o, fan_in, fan_out);
            if l > 0 {
                let mut dh = delta.dot(&w.t());
                ndarray::Zip::from(&mut dh).and(&trace.pre[l - 1]).for_each(|d, &z| *d *= silu_grad(z));
                delta = dh;
            } else {
                let emb_off = a.embed_offset();
                let w_emb = w.slice(s![emb_off.., ..]);
                let d_emb = delta.dot(&w_emb.t());
                for (i, row) in d_emb.axis_iter(Axis(0)).enumerate() {
                    let r = self.cond_row(batch.conds[i]).expect("validated in forward");
                    for (j, v) in row.iter().enumerate() {
                        grad[r * a.embed + j] += v;
                    }
                }
            }
        }
        grad
    }
}

/// Common surface of both network kinds.
pub trait Network: Clone {
    fn architecture(&self) -> &Architecture;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn schedule(&self) -> &NoiseSchedule;

    /// Deterministic batched forward pass.
    fn forward_batch(&self, batch: &QueryBatch) -> Result<Array2<f64>>;

    /// Evaluates `objective` on the outputs for `batch` and returns its value
    /// together with the exact gradient with respect to the parameters.
    fn value_and_grad<F>(&self, batch: &QueryBatch, objective: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>, &[f64]) -> Result<ObjectiveGrad>;

    /// A frozen copy, e.g. the behaviour or reference policy during fine-tuning.
    fn snapshot(&self) -> Self {
        self.clone()
    }
}

/// Free-function form of [`Network::value_and_grad`].
pub fn grad_of_scalar<N, F>(net: &N, batch: &QueryBatch, objective: F) -> Result<(f64, Vec<f64>)>
where
    N: Network,
    F: FnOnce(ArrayView2<'_, f64>, &[f64]) -> Result<ObjectiveGrad>,
{
    net.value_and_grad(batch, objective)
}

fn run_objective<F>(outputs: &Array2<f64>, params: &[f64], objective: F) -> Result<ObjectiveGrad>
where
    F: FnOnce(ArrayView2<'_, f64>, &[f64]) -> Result<ObjectiveGrad>,
{
    let og = objective(outputs.view(), params)?;
    if og.d_outputs.dim() != outputs.dim() {
        return Err(Error::NonDifferentiable(format!(
            "objective returned output gradients of shape {:?} for outputs of shape {:?}",
            og.d_outputs.dim(),
            outputs.dim()
        )));
    }
    if let Some(dp) = &og.d_params {
        if dp.len() != params.len() {
            return Err(Error::NonDifferentiable(format!(
                "objective returned {} parameter gradients for {} parameters",
                dp.len(),
                params.len()
            )));
        }
    }
    Ok(og)
}

fn merge_param_grad(mut grad: Vec<f64>, extra: Option<Vec<f64>>) -> Vec<f64> {
    if let Some(dp) = extra {
        for (g, d) in grad.iter_mut().zip(dp) {
            *g += d;
        }
    }
    grad
}

#[inline]
fn residual_scale(lambda: f64) -> f64 {
    lambda / (1.0 + lambda)
}

fn scale_rows(m: &mut Array2<f64>, scales: impl Iterator<Item = f64>) {
    for (mut row, s) in m.axis_iter_mut(Axis(0)).zip(scales) {
        row.mapv_inplace(|v| v * s);
    }
}

/// Residual prox network `f(x; t, lambda, c) = x + lambda / (1 + lambda) * mlp(x, t, lambda, c)`.
///
/// The residual of an exact prox is `lambda` times a score, so scaling the
/// MLP by `lambda / (1 + lambda)` keeps its regression target O(1) across
/// the step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxNet {
    mlp: Mlp,
    schedule: NoiseSchedule,
}

impl ProxNet {
    pub fn new(dim: usize, labels: usize, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        Self::with_architecture(Architecture::new(NetKind::Prox, dim, labels), schedule, seed)
    }

    pub fn with_architecture(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if arch.kind != NetKind::Prox {
            return Err(Error::Argument("ProxNet needs a prox architecture".into()));
        }
        Ok(Self { mlp: Mlp::init(arch, seed)?, schedule })
    }

    pub fn from_parts(arch: Architecture, schedule: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        if arch.kind != NetKind::Prox || params.len() != arch.param_count() {
            return Err(Error::Argument(format!(
                "{} parameters do not fit `{}`",
                params.len(),
                arch.descriptor()
            )));
        }
        Ok(Self { mlp: Mlp { arch, params }, schedule })
    }

    pub fn prox_forward(&self, x: &[f64], t: f64, lambda: f64, cond: Condition) -> Result<Vec<f64>> {
        let out = self.forward_batch(&QueryBatch::single(x, t, Some(lambda), cond))?;
        Ok(out.row(0).to_vec())
    }
}

impl Network for ProxNet {
    fn architecture(&self) -> &Architecture {
        &self.mlp.arch
    }

    fn params(&self) -> &[f64] {
        &self.mlp.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.mlp.params
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn forward_batch(&self, batch: &QueryBatch) -> Result<Array2<f64>> {
        let (mut raw, _) = self.mlp.forward(batch, false)?;
        scale_rows(&mut raw, batch.lambdas.iter().map(|&l| residual_scale(l)));
        Ok(raw + &batch.xs)
    }

    fn value_and_grad<F>(&self, batch: &QueryBatch, objective: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>, &[f64]) -> Result<ObjectiveGrad>,
    {
        let (mut raw, trace) = self.mlp.forward(batch, true)?;
        scale_rows(&mut raw, batch.lambdas.iter().map(|&l| residual_scale(l)));
        let out = raw + &batch.xs;
        let og = run_objective(&out, &self.mlp.params, objective)?;
        let mut d_raw = og.d_outputs;
        scale_rows(&mut d_raw, batch.lambdas.iter().map(|&l| residual_scale(l)));
        let grad = self.mlp.backward(batch, &trace.expect("trace requested"), d_raw);
        Ok((og.value, merge_param_grad(grad, og.d_params)))
    }
}

/// Score network in noise-prediction form: `s(x; t, c) = -eps(x, t, c) / sqrt(1 - alpha_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    mlp: Mlp,
    schedule: NoiseSchedule,
}

impl ScoreNet {
    pub fn new(dim: usize, labels: usize, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        Self::with_architecture(Architecture::new(NetKind::Score, dim, labels), schedule, seed)
    }

    pub fn with_architecture(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if arch.kind != NetKind::Score {
            return Err(Error::Argument("ScoreNet needs a score architecture".into()));
        }
        Ok(Self { mlp: Mlp::init(arch, seed)?, schedule })
    }

    pub fn from_parts(arch: Architecture, schedule: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        if arch.kind != NetKind::Score || params.len() != arch.param_count() {
            return Err(Error::Argument(format!(
                "{} parameters do not fit `{}`",
                params.len(),
                arch.descriptor()
            )));
        }
        Ok(Self { mlp: Mlp { arch, params }, schedule })
    }

    pub fn score_forward(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        let out = self.forward_batch(&QueryBatch::single(x, t, None, cond))?;
        Ok(out.row(0).to_vec())
    }

    /// Raw noise prediction, the quantity the denoising loss regresses.
    pub fn predict_noise(&self, batch: &QueryBatch) -> Result<Array2<f64>> {
        Ok(self.mlp.forward(batch, false)?.0)
    }

    /// Like [`Network::value_and_grad`] but the objective sees raw noise predictions.
    pub fn noise_value_and_grad<F>(&self, batch: &QueryBatch, objective: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>, &[f64]) -> Result<ObjectiveGrad>,
    {
        let (raw, trace) = self.mlp.forward(batch, true)?;
        let og = run_objective(&raw, &self.mlp.params, objective)?;
        let grad = self.mlp.backward(batch, &trace.expect("trace requested"), og.d_outputs);
        Ok((og.value, merge_param_grad(grad, og.d_params)))
    }

    fn noise_scales(&self, batch: &QueryBatch) -> Result<Vec<f64>> {
        batch
            .times
            .iter()
            .map(|&t| {
                let a = self.schedule.alpha_at(t)?;
                if a >= 1.0 {
                    return Err(Error::Domain(format!("score is undefined at t = {t} (no noise)")));
                }
                Ok(-1.0 / (1.0 - a).sqrt())
            })
            .collect()
    }
}

impl Network for ScoreNet {
    fn architecture(&self) -> &Architecture {
        &self.mlp.arch
    }

    fn params(&self) -> &[f64] {
        &self.mlp.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.mlp.params
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn forward_batch(&self, batch: &QueryBatch) -> Result<Array2<f64>> {
        let scales = self.noise_scales(batch)?;
        let mut raw = self.mlp.forward(batch, false)?.0;
        scale_rows(&mut raw, scales.into_iter());
        Ok(raw)
    }

    fn value_and_grad<F>(&self, batch: &QueryBatch, objective: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>, &[f64]) -> Result<ObjectiveGrad>,
    {
        let scales = self.noise_scales(batch)?;
        let (mut out, trace) = self.mlp.forward(batch, true)?;
        scale_rows(&mut out, scales.iter().copied());
        let og = run_objective(&out, &self.mlp.params, objective)?;
        let mut d_raw = og.d_outputs;
        scale_rows(&mut d_raw, scales.into_iter());
        let grad = self.mlp.backward(batch, &trace.expect("trace requested"), d_raw);
        Ok((og.value, merge_param_grad(grad, og.d_params)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small_prox(labels: usize, seed: u64) -> ProxNet {
        let arch = Architecture::new(NetKind::Prox, 2, labels).with_size(16, 2);
        ProxNet::with_architecture(arch, NoiseSchedule::default(), seed).unwrap()
    }

    fn small_score(seed: u64) -> ScoreNet {
        let arch = Architecture::new(NetKind::Score, 2, 2).with_size(16, 2);
        ScoreNet::with_architecture(arch, NoiseSchedule::default(), seed).unwrap()
    }

    /// Perturbs every parameter so the zero-initialized output layer is live.
    fn randomize<N: Network>(net: &mut N, seed: u64) {
        let mut rng = rng::stream(seed, &[rng::domain::CHECK]);
        for p in net.params_mut() {
            *p += 0.3 * rng::normal(&mut rng);
        }
    }

    fn random_batch(n: usize, prox: bool, labels: usize, seed: u64) -> QueryBatch {
        let mut rng = rng::stream(seed, &[rng::domain::CHECK, 1]);
        let mut b = QueryBatch::with_capacity(2, n);
        for i in 0..n {
            let x = rng::normal_vec(&mut rng, 2);
            let t = 0.01 + 0.98 * rng::uniform(&mut rng);
            let lambda = prox.then(|| (-3.0 + 4.0 * rng::uniform(&mut rng)).exp());
            let c = if i % 3 == 0 { Condition::Null } else { Condition::Label(i % labels) };
            b.push(&x, t, lambda, c);
        }
        b
    }

    #[test]
    fn fresh_prox_is_identity_and_fresh_score_is_zero() {
        let net = ProxNet::new(2, 3, NoiseSchedule::default(), 1).unwrap();
        let x = [0.7, -1.3];
        assert_eq!(net.prox_forward(&x, 0.4, 0.8, Condition::Label(1)).unwrap(), x.to_vec());
        let score = ScoreNet::new(2, 3, NoiseSchedule::default(), 1).unwrap();
        assert_eq!(score.score_forward(&x, 0.4, Condition::Null).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn default_architecture_sizes() {
        let a = Architecture::new(NetKind::Prox, 2, 2);
        assert_eq!(a.layer_shapes(), vec![(2 + 9 + 9 + 8, 128), (128, 128), (128, 128), (128, 2)]);
        let parsed = Architecture::parse_descriptor(&a.descriptor()).unwrap();
        assert_eq!(parsed, a);
        assert!(Architecture::parse_descriptor("kind=prox dim=2").is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_lambda() {
        let net = small_prox(2, 1);
        assert!(matches!(net.prox_forward(&[f64::NAN, 0.0], 0.3, 1.0, Condition::Null), Err(Error::NonFinite(_))));
        assert!(net.prox_forward(&[0.0, 0.0], 0.3, 0.0, Condition::Null).is_err());
        assert!(net.prox_forward(&[0.0, 0.0], 0.3, 1.0, Condition::Label(7)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = small_prox(2, 3);
        randomize(&mut net, 4);
        let b = random_batch(32, true, 2, 5);
        let a = net.forward_batch(&b).unwrap();
        let c = net.forward_batch(&b).unwrap();
        assert!(a.iter().zip(c.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rows_do_not_depend_on_batch_composition() {
        let mut net = small_prox(2, 3);
        randomize(&mut net, 4);
        let b = random_batch(37, true, 2, 6);
        let all = net.forward_batch(&b).unwrap();
        for i in [0, 5, 36] {
            let one = net
                .prox_forward(&b.xs.row(i).to_vec(), b.times[i], b.lambdas[i], b.conds[i])
                .unwrap();
            assert_eq!(one[0].to_bits(), all[[i, 0]].to_bits());
            assert_eq!(one[1].to_bits(), all[[i, 1]].to_bits());
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut net = small_prox(2, 1);
        randomize(&mut net, 2);
        let b = random_batch(8, true, 2, 3);
        let (v, g) = grad_of_scalar(&net, &b, |out, _| Ok(ObjectiveGrad::from_outputs(3.5, Array2::zeros(out.dim())))).unwrap();
        assert_eq!(v, 3.5);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_squared_norm_of_params_has_params_as_gradient() {
        let mut net = small_prox(2, 1);
        randomize(&mut net, 2);
        let b = random_batch(4, true, 2, 3);
        let (v, g) = net
            .value_and_grad(&b, |out, theta| {
                Ok(ObjectiveGrad {
                    value: 0.5 * theta.iter().map(|x| x * x).sum::<f64>(),
                    d_outputs: Array2::zeros(out.dim()),
                    d_params: Some(theta.to_vec()),
                })
            })
            .unwrap();
        assert!(v > 0.0);
        assert_eq!(g, net.params().to_vec());
    }

    #[test]
    fn mismatched_objective_gradient_is_rejected() {
        let net = small_prox(2, 1);
        let b = random_batch(4, true, 2, 3);
        let err = net.value_and_grad(&b, |_, _| Ok(ObjectiveGrad::from_outputs(0.0, Array2::zeros((1, 1)))));
        assert!(matches!(err, Err(Error::NonDifferentiable(_))));
    }

    /// Central finite differences on a handful of coordinates.
    fn check_fd<N: Network>(net: &N, batch: &QueryBatch, coords: &[usize]) {
        let objective = |out: ArrayView2<'_, f64>, _: &[f64]| {
            // Smooth nonlinear scalar of the outputs.
            let value = out.iter().enumerate().map(|(i, v)| ((i % 5) as f64 + 1.0) * (0.5 * v).sin()).sum();
            let d = Array2::from_shape_fn(out.dim(), |(r, c)| {
                let i = r * out.ncols() + c;
                ((i % 5) as f64 + 1.0) * 0.5 * (0.5 * out[[r, c]]).cos()
            });
            Ok(ObjectiveGrad::from_outputs(value, d))
        };
        let (_, grad) = net.value_and_grad(batch, objective).unwrap();
        let h = 1e-6;
        for &i in coords {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fp = plus.value_and_grad(batch, objective).unwrap().0;
            let fm = minus.value_and_grad(batch, objective).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-3);
            assert!(rel <= 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn prox_gradient_matches_finite_differences() {
        let mut net = small_prox(2, 7);
        randomize(&mut net, 8);
        let b = random_batch(12, true, 2, 9);
        let mut rng = rng::stream(10, &[rng::domain::CHECK]);
        let coords: Vec<usize> = (0..20).map(|_| rng::index(&mut rng, net.params().len())).collect();
        check_fd(&net, &b, &coords);
        // Every embedding row in use, including the null row.
        check_fd(&net, &b, &[0, 8, 16]);
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let mut net = small_score(7);
        randomize(&mut net, 8);
        let b = random_batch(12, false, 2, 9);
        let mut rng = rng::stream(11, &[rng::domain::CHECK]);
        let coords: Vec<usize> = (0..20).map(|_| rng::index(&mut rng, net.params().len())).collect();
        check_fd(&net, &b, &coords);
    }

    #[test]
    fn snapshot_is_independent() {
        let mut net = small_prox(2, 1);
        randomize(&mut net, 2);
        let frozen = net.snapshot();
        let b = random_batch(6, true, 2, 3);
        let before = frozen.forward_batch(&b).unwrap();
        for p in net.params_mut() {
            *p *= 1.5;
        }
        assert_eq!(frozen.forward_batch(&b).unwrap(), before);
        assert_eq!(frozen.snapshot().forward_batch(&b).unwrap(), before);
        assert_ne!(net.forward_batch(&b).unwrap(), before);
    }

    #[test]
    fn null_output_ignores_label_rows() {
        let mut net = small_prox(3, 1);
        randomize(&mut net, 2);
        let e = net.architecture().embed;
        let mut permuted = net.clone();
        {
            let p = permuted.params_mut();
            // Rotate the three label rows; the null row (index 3) stays put.
            let rows: Vec<Vec<f64>> = (0..3).map(|r| p[r * e..(r + 1) * e].to_vec()).collect();
            for r in 0..3 {
                p[r * e..(r + 1) * e].copy_from_slice(&rows[(r + 1) % 3]);
            }
        }
        let x = [0.4, -0.2];
        let a = net.prox_forward(&x, 0.3, 0.5, Condition::Null).unwrap();
        let b = permuted.prox_forward(&x, 0.3, 0.5, Condition::Null).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            net.prox_forward(&x, 0.3, 0.5, Condition::Label(0)).unwrap(),
            permuted.prox_forward(&x, 0.3, 0.5, Condition::Label(0)).unwrap()
        );
    }
}
