//! One-layer LSTM backbone with one or two MLP classification heads.
//!
//! Parameters are stored by name:
//!
//! ```text
//! lstm.w_ih.{i,f,g,o}  [input, hidden]
//! lstm.w_hh.{i,f,g,o}  [hidden, hidden]
//! lstm.b.{i,f,g,o}     [1, hidden]
//! {local,global}.w1 [hidden, hidden]  .b1 [1, hidden]  .w2 [hidden, 1]  .b2 [1, 1]
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{global_term_scale, ClassWeights};
use crate::data::N_STEPS;
use crate::error::{Error, Result};
use crate::numeric::{GradTape, Tensor, Var};

pub const HIDDEN: usize = 64;
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_DROPOUT: f64 = 0.2;
const GATES: [&str; 4] = ["i", "f", "g", "o"];
/// Rows per tape during inference.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Local,
    Global,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Local => "local",
            Head::Global => "global",
        }
    }
}

/// Class weights applied inside each head's loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub local: ClassWeights,
    pub global: ClassWeights,
}

impl HeadWeights {
    pub const UNIT: HeadWeights = HeadWeights {
        local: ClassWeights::UNIT,
        global: ClassWeights::UNIT,
    };
}

/// A mini-batch of normalized sequences, each `N_STEPS × input_size` month-major.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<u8>,
    pub is_local: Vec<bool>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub input_size: usize,
    pub hidden: usize,
    /// Divisor of the global loss term.
    pub alpha: f64,
    /// Probability of dropping a recurrent unit during training.
    pub dropout: f64,
    pub params: BTreeMap<String, Tensor>,
}

pub(crate) type Bound = BTreeMap<String, Var>;

impl LstmModel {
    pub fn new(input_size: usize, multi_head: bool, alpha: f64, dropout: f64, seed: u64) -> Result<Self> {
        if input_size == 0 {
            return Err(Error::Invalid("input size must be positive".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Invalid(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let h = HIDDEN;
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), v).unwrap()
        };
        let mut params = BTreeMap::new();
        for g in GATES {
            params.insert(format!("lstm.w_ih.{g}"), uniform(&[input_size, h]));
            params.insert(format!("lstm.w_hh.{g}"), uniform(&[h, h]));
            let b = if g == "f" { 1.0 } else { 0.0 };
            params.insert(format!("lstm.b.{g}"), Tensor::filled(&[1, h], b));
        }
        let heads: &[Head] = if multi_head {
            &[Head::Local, Head::Global]
        } else {
            &[Head::Local]
        };
        for head in heads {
            let p = head.prefix();
            params.insert(format!("{p}.w1"), uniform(&[h, h]));
            params.insert(format!("{p}.b1"), Tensor::zeros(&[1, h]));
            params.insert(format!("{p}.w2"), uniform(&[h, 1]));
            params.insert(format!("{p}.b2"), Tensor::zeros(&[1, 1]));
        }
        Ok(Self {
            input_size,
            hidden: h,
            alpha,
            dropout,
            params,
        })
    }

    pub fn is_multi_head(&self) -> bool {
        self.params.contains_key("global.w1")
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks parameter names and shapes against `input_size` and `hidden`.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::new(self.input_size, self.is_multi_head(), self.alpha, self.dropout, 0)?;
        if self.hidden != HIDDEN {
            return Err(Error::Schema(format!("hidden size {} is not {HIDDEN}", self.hidden)));
        }
        if reference.params.len() != self.params.len() {
            return Err(Error::Schema("unexpected parameter set".into()));
        }
        for (name, t) in &reference.params {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() && p.all_finite() => {}
                Some(_) => return Err(Error::Schema(format!("parameter {name} has a bad shape or value"))),
                None => return Err(Error::Schema(format!("parameter {name} missing"))),
            }
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub(crate) fn bind(&self, tape: &mut GradTape) -> Bound {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    /// Variational recurrent dropout mask for `rows` sequences: one keep/drop
    /// draw per hidden unit, scaled by the inverse keep probability.
    pub fn sample_dropout_mask(&self, rows: usize, rng: &mut impl Rng) -> Vec<f64> {
        let keep = 1.0 - self.dropout;
        (0..rows * self.hidden)
            .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect()
    }

    /// Final hidden state `[B, hidden]`. `mask`, when given, multiplies
    /// `h_{t-1}` at every step.
    pub(crate) fn backbone(
        &self,
        tape: &mut GradTape,
        p: &Bound,
        inputs: &[&[f64]],
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let b = inputs.len();
        let k = self.input_size;
        if let Some(bad) = inputs.iter().find(|x| x.len() != N_STEPS * k) {
            return Err(Error::shape(
                "lstm_forward",
                format!("sequence of {} values, expected {}", bad.len(), N_STEPS * k),
            ));
        }
        let mut weights = Vec::with_capacity(4);
        for g in GATES {
            let w = tape.concat(&[p[&format!("lstm.w_ih.{g}")], p[&format!("lstm.w_hh.{g}")]], 0)?;
            weights.push((w, p[&format!("lstm.b.{g}")]));
        }
        let mut h = tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[b, self.hidden]));
        for t in 0..N_STEPS {
            let mut xt = Vec::with_capacity(b * k);
            for x in inputs {
                xt.extend_from_slice(&x[t * k..(t + 1) * k]);
            }
            let xt = tape.constant(Tensor::matrix(b, k, xt)?);
            let h_in = match mask {
                Some(m) => tape.mask_apply(h, m)?,
                None => h,
            };
            let z = tape.concat(&[xt, h_in], 1)?;
            let mut acts = Vec::with_capacity(4);
            for (gi, &(w, bias)) in weights.iter().enumerate() {
                let pre = tape.matmul(z, w)?;
                let pre = tape.add(pre, bias)?;
                acts.push(if gi == 2 { tape.tanh(pre)? } else { tape.sigmoid(pre)? });
            }
            let (i, f, g, o) = (acts[0], acts[1], acts[2], acts[3]);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
        }
        Ok(h)
    }

    /// Probabilities `[B, 1]` from hidden states `[B, hidden]`.
    pub(crate) fn head(&self, tape: &mut GradTape, p: &Bound, h: Var, head: Head) -> Result<Var> {
        let pre = head.prefix();
        let get = |n: &str| {
            p.get(&format!("{pre}.{n}"))
                .copied()
                .ok_or_else(|| Error::Invalid(format!("model has no {pre} head")))
        };
        let z = tape.matmul(h, get("w1")?)?;
        let z = tape.add(z, get("b1")?)?;
        let z = tape.tanh(z)?;
        let z = tape.matmul(z, get("w2")?)?;
        let z = tape.add(z, get("b2")?)?;
        tape.sigmoid(z)
    }

    /// Scalar training loss of `batch` on `tape`. Single-head models treat
    /// every sample as local.
    pub(crate) fn loss_on_tape(
        &self,
        tape: &mut GradTape,
        p: &Bound,
        batch: &Batch,
        weights: &HeadWeights,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let h = self.backbone(tape, p, &batch.inputs, mask)?;
        let targets = |idx: &[usize]| idx.iter().map(|&i| batch.labels[i] as f64).collect::<Vec<_>>();
        if !self.is_multi_head() {
            let probs = self.head(tape, p, h, Head::Local)?;
            let all: Vec<usize> = (0..batch.len()).collect();
            return tape.bce(probs, &targets(&all), weights.local.w1, weights.local.w0);
        }
        let local: Vec<usize> = (0..batch.len()).filter(|&i| batch.is_local[i]).collect();
        let global: Vec<usize> = (0..batch.len()).filter(|&i| !batch.is_local[i]).collect();
        let local_loss = if local.is_empty() {
            log::debug!("batch of {} has no local samples", batch.len());
            None
        } else {
            let hl = tape.select_rows(h, &local)?;
            let pl = self.head(tape, p, hl, Head::Local)?;
            Some(tape.bce(pl, &targets(&local), weights.local.w1, weights.local.w0)?)
        };
        if global.is_empty() {
            return Ok(local_loss.expect("non-empty batch has local samples"));
        }
        let hg = tape.select_rows(h, &global)?;
        let pg = self.head(tape, p, hg, Head::Global)?;
        let lg = tape.bce(pg, &targets(&global), weights.global.w1, weights.global.w0)?;
        let lg = tape.scale(lg, global_term_scale(local.len(), global.len(), self.alpha))?;
        match local_loss {
            Some(ll) => tape.add(lg, ll),
            None => Ok(lg),
        }
    }

    pub fn loss(&self, batch: &Batch, weights: &HeadWeights, mask: Option<&[f64]>) -> Result<f64> {
        let mut tape = GradTape::new();
        let p = self.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &p, batch, weights, mask)?;
        Ok(tape.value(l).values()[0])
    }

    /// Loss and its gradient with respect to every named parameter.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        weights: &HeadWeights,
        mask: Option<&[f64]>,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = GradTape::new();
        let p = self.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &p, batch, weights, mask)?;
        let grads = tape.backward(l)?;
        let out = p.iter().map(|(k, &v)| (k.clone(), grads.get(v).clone())).collect();
        Ok((tape.value(l).values()[0], out))
    }

    /// Final hidden state of each sequence, dropout off.
    pub fn hidden_states(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            let mut tape = GradTape::new();
            let p = self.bind(&mut tape);
            let h = self.backbone(&mut tape, &p, chunk, None)?;
            out.extend(tape.value(h).values().chunks(self.hidden).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Cropland probability from `head` for each sequence, dropout off.
    pub fn predict_head(&self, inputs: &[&[f64]], head: Head) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            let mut tape = GradTape::new();
            let p = self.bind(&mut tape);
            let h = self.backbone(&mut tape, &p, chunk, None)?;
            let probs = self.head(&mut tape, &p, h, head)?;
            out.extend_from_slice(tape.value(probs).values());
        }
        Ok(out)
    }

    /// Local-head probabilities; this is the map-making output.
    pub fn predict(&self, inputs: &[&[f64]]) -> Result<Vec<f64>> {
        self.predict_head(inputs, Head::Local)
    }

    /// Probabilities from the head each sample is supervised by.
    pub fn predict_routed(&self, inputs: &[&[f64]], is_local: &[bool]) -> Result<Vec<f64>> {
        let local = self.predict_head(inputs, Head::Local)?;
        if !self.is_multi_head() {
            return Ok(local);
        }
        let global = self.predict_head(inputs, Head::Global)?;
        Ok(is_local
            .iter()
            .zip(local.into_iter().zip(global))
            .map(|(&l, (pl, pg))| if l { pl } else { pg })
            .collect())
    }
}
