//! Fully connected score network with a sinusoidal time embedding and a
//! hand-written reverse pass.
//!
//! Input is `[x, emb(t/T)]`, hidden layers use SiLU, the output layer is
//! linear and zero-initialized so a fresh model returns `s ≡ 0`.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScoreFunction;
use crate::error::{Result, VsdmError};
use crate::rng::{checksum_f64, stream_rng, Purpose};

const MODEL_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub dim: usize,
    /// Length of the sinusoidal time embedding (even).
    pub time_embed: usize,
    pub hidden: Vec<usize>,
}

impl MlpLayout {
    /// Three hidden layers of 128 units with a 64-wide time embedding.
    pub fn standard(dim: usize) -> Self {
        MlpLayout {
            dim,
            time_embed: 64,
            hidden: vec![128; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.time_embed % 2 != 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(VsdmError::Config(format!("invalid network layout {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim + self.time_embed];
        w.extend(&self.hidden);
        w.push(self.dim);
        w
    }

    /// `(in, out, weight offset, bias offset)` per layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let w = self.widths();
        let mut off = 0;
        w.windows(2)
            .map(|p| {
                let (i, o) = (p[0], p[1]);
                let entry = (i, o, off, off + i * o);
                off += i * o + o;
                entry
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o, _, _)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    layout: MlpLayout,
    horizon: f64,
    params: Vec<f64>,
    ema: Option<Vec<f64>>,
    ema_rate: f64,
    ema_updates: u64,
}

/// Intermediate values kept by the forward pass for the reverse pass.
pub(crate) struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
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

impl ScoreModel {
    pub fn new(layout: MlpLayout, horizon: f64, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = stream_rng(seed, Purpose::Init, 0);
        let mut params = vec![0.0; layout.param_count()];
        let layers = layout.layers();
        let last = layers.len() - 1;
        for (l, &(inp, out, w_off, _)) in layers.iter().enumerate() {
            if l == last {
                continue;
            }
            let bound = (6.0 / inp as f64).sqrt();
            for w in &mut params[w_off..w_off + inp * out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(ScoreModel {
            layout,
            horizon,
            params,
            ema: None,
            ema_rate: 0.0,
            ema_updates: 0,
        })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn ema_params(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.params)
    }

    /// Start tracking an exponential moving average of the parameters.
    pub fn enable_ema(&mut self, rate: f64) {
        self.ema = Some(self.params.clone());
        self.ema_rate = rate;
        self.ema_updates = 0;
    }

    /// `θ̄ ← r θ̄ + (1 - r) θ` with the warm-up `r = min(rate, (1+k)/(10+k))`
    /// so early averages are not dominated by the initialization.
    pub fn update_ema(&mut self) {
        if let Some(ema) = self.ema.as_mut() {
            let k = self.ema_updates as f64;
            let r = self.ema_rate.min((1.0 + k) / (10.0 + k));
            for (e, p) in ema.iter_mut().zip(&self.params) {
                *e = r * *e + (1.0 - r) * p;
            }
            self.ema_updates += 1;
        }
    }

    /// Scores computed with the averaged parameters when available.
    pub fn averaged(&self) -> ParamView<'_> {
        ParamView {
            model: self,
            params: self.ema.as_deref().unwrap_or(&self.params),
        }
    }

    pub fn time_embedding(&self, t: f64) -> Vec<f64> {
        let half = self.layout.time_embed / 2;
        let tau = t / self.horizon;
        let mut out = vec![0.0; self.layout.time_embed];
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let arg = 1000.0 * tau * freq;
            out[k] = arg.sin();
            out[half + k] = arg.cos();
        }
        out
    }

    fn build_input(&self, x: ArrayView2<f64>, times: &[f64]) -> Array2<f64> {
        let d = self.layout.dim;
        let b = x.nrows();
        let mut input = Array2::zeros((b, d + self.layout.time_embed));
        input.slice_mut(s![.., ..d]).assign(&x);
        let mut last_t = f64::NAN;
        let mut emb = Vec::new();
        for (r, &t) in times.iter().enumerate() {
            if t != last_t {
                emb = self.time_embedding(t);
                last_t = t;
            }
            input
                .slice_mut(s![r, d..])
                .assign(&ArrayView1::from(emb.as_slice()));
        }
        input
    }

    fn weights<'p>(&self, params: &'p [f64], layer: (usize, usize, usize, usize)) -> (ArrayView2<'p, f64>, ArrayView1<'p, f64>) {
        let (inp, out, w_off, b_off) = layer;
        let w = ArrayView2::from_shape((out, inp), &params[w_off..w_off + inp * out]).expect("layout");
        let b = ArrayView1::from(&params[b_off..b_off + out]);
        (w, b)
    }

    pub(crate) fn forward_with(&self, params: &[f64], x: ArrayView2<f64>, times: &[f64], keep: bool) -> (Array2<f64>, Option<Tape>) {
        debug_assert_eq!(x.nrows(), times.len());
        let layers = self.layout.layers();
        let mut h = self.build_input(x, times);
        let mut tape = keep.then(|| Tape {
            inputs: Vec::with_capacity(layers.len()),
            pre: Vec::with_capacity(layers.len()),
        });
        for (l, &layer) in layers.iter().enumerate() {
            let (w, b) = self.weights(params, layer);
            let mut z = h.dot(&w.t());
            z += &b;
            let last = l + 1 == layers.len();
            let next = if last { z.clone() } else { z.mapv(silu) };
            if let Some(t) = tape.as_mut() {
                t.inputs.push(std::mem::replace(&mut h, next));
                t.pre.push(z);
            } else {
                h = next;
            }
        }
        (h, tape)
    }

    /// Reverse pass: gradient of `Σ_rows ⟨d_out, s(x)⟩` with respect to θ.
    pub(crate) fn backward(&self, params: &[f64], tape: &Tape, d_out: &Array2<f64>) -> Vec<f64> {
        let layers = self.layout.layers();
        let mut grad = vec![0.0; params.len()];
        let mut g = d_out.clone();
        for l in (0..layers.len()).rev() {
            let (inp, out, w_off, b_off) = layers[l];
            let input = &tape.inputs[l];
            let dw = g.t().dot(input);
            grad[w_off..w_off + inp * out].copy_from_slice(dw.as_slice().expect("standard layout"));
            let db = g.sum_axis(Axis(0));
            grad[b_off..b_off + out].copy_from_slice(db.as_slice().expect("contiguous"));
            if l > 0 {
                let (w, _) = self.weights(params, layers[l]);
                let mut gh = g.dot(&w);
                let z = &tape.pre[l - 1];
                gh.zip_mut_with(z, |a, &zz| *a *= silu_grad(zz));
                g = gh;
            }
        }
        grad
    }

    fn check_inputs(&self, x: &Array2<f64>, t: f64) -> Result<()> {
        if x.ncols() != self.layout.dim {
            return Err(VsdmError::domain(format!(
                "score model expects dimension {}, got {}",
                self.layout.dim,
                x.ncols()
            )));
        }
        if !(t >= 0.0 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(VsdmError::domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(VsdmError::domain("non-finite input to the score model"));
        }
        Ok(())
    }

    fn eval_params(&self, params: &[f64], x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.check_inputs(x, t)?;
        let times = vec![t; x.nrows()];
        Ok(self.forward_with(params, x.view(), &times, false).0)
    }

    /// `s_θ(x, t)` for a single state.
    pub fn evaluate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| VsdmError::domain(e.to_string()))?;
        Ok(self.eval_params(&self.params, &x, t)?.into_raw_vec_and_offset().0)
    }

    pub fn evaluate_batch(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.eval_params(&self.params, x, t)
    }

    /// Serialize as: format tag, layout header, horizon, then row-major
    /// little-endian f64 weights (and the EMA shadow, if any).
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MODEL_FORMAT.to_le_bytes());
        out.extend_from_slice(&(self.layout.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.layout.time_embed as u32).to_le_bytes());
        out.extend_from_slice(&(self.layout.hidden.len() as u32).to_le_bytes());
        for &w in &self.layout.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.horizon.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        match &self.ema {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&self.ema_rate.to_le_bytes());
                out.extend_from_slice(&self.ema_updates.to_le_bytes());
                for p in e {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
            None => out.push(0),
        }
    }

    pub fn read_bytes(input: &mut &[u8]) -> Result<Self> {
        let format = take_u32(input)?;
        if format != MODEL_FORMAT {
            return Err(VsdmError::Checkpoint(format!(
                "score model format {format} is not supported (expected {MODEL_FORMAT})"
            )));
        }
        let dim = take_u32(input)? as usize;
        let time_embed = take_u32(input)? as usize;
        let n_hidden = take_u32(input)? as usize;
        if n_hidden > 1024 {
            return Err(VsdmError::Checkpoint("implausible hidden layer count".into()));
        }
        let hidden = (0..n_hidden)
            .map(|_| take_u32(input).map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let layout = MlpLayout { dim, time_embed, hidden };
        layout
            .validate()
            .map_err(|e| VsdmError::Checkpoint(e.to_string()))?;
        let horizon = take_f64(input)?;
        let count = take_u64(input)? as usize;
        if count != layout.param_count() {
            return Err(VsdmError::Checkpoint(format!(
                "parameter count {count} does not match layout ({})",
                layout.param_count()
            )));
        }
        let params = take_f64s(input, count)?;
        let (ema, ema_rate, ema_updates) = match take_u8(input)? {
            0 => (None, 0.0, 0),
            1 => {
                let rate = take_f64(input)?;
                let updates = take_u64(input)?;
                (Some(take_f64s(input, count)?), rate, updates)
            }
            b => return Err(VsdmError::Checkpoint(format!("bad EMA flag {b}"))),
        };
        Ok(ScoreModel {
            layout,
            horizon,
            params,
            ema,
            ema_rate,
            ema_updates,
        })
    }
}

fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(VsdmError::Checkpoint("truncated score model block".into()));
    }
    let (head, tail) = input.split_at(n);
    *input = tail;
    Ok(head)
}

fn take_u8(input: &mut &[u8]) -> Result<u8> {
    Ok(take(input, 1)?[0])
}

fn take_u32(input: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(input, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(input: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(input, 8)?.try_into().expect("8 bytes")))
}

fn take_f64(input: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_le_bytes(take(input, 8)?.try_into().expect("8 bytes")))
}

fn take_f64s(input: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let bytes = take(input, n.checked_mul(8).ok_or_else(|| VsdmError::Checkpoint("overflow".into()))?)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl ScoreFunction for ScoreModel {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn eval_batch(&self, x: &Array2<f64>, _node: usize, t: f64) -> Result<Array2<f64>> {
        self.eval_params(&self.params, x, t)
    }
}

/// A model evaluated with a specific parameter vector (e.g. the EMA shadow).
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    model: &'a ScoreModel,
    params: &'a [f64],
}

impl ScoreFunction for ParamView<'_> {
    fn dim(&self) -> usize {
        self.model.layout.dim
    }

    fn eval_batch(&self, x: &Array2<f64>, _node: usize, t: f64) -> Result<Array2<f64>> {
        self.model.eval_params(self.params, x, t)
    }
}
