//! AdamW with decoupled weight decay.

use crate::codec::Param;
use crate::error::{format_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter update counts; parameters start their bias
    /// correction from their own first update.
    steps: Vec<u64>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Param]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            steps: vec![0; params.len()],
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn steps(&self, i: usize) -> u64 {
        self.steps[i]
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Tensor<f32>>], lr: f64) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - lr * self.weight_decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk as f64;
                let mk = self.beta1 * m[k] as f64 + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k] as f64 + (1.0 - self.beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - update) as f32;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        for i in 0..self.steps.len() {
            out.extend_from_slice(&self.steps[i].to_le_bytes());
            out.extend_from_slice(&(self.m[i].len() as u32).to_le_bytes());
            for x in self.m[i].iter().chain(&self.v[i]) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Reads moments written by [`AdamW::to_bytes`] for `params`.
    pub fn from_bytes(bytes: &[u8], params: &[Param]) -> Result<(Self, usize)> {
        let mut r = crate::codec::model::ByteReader { bytes, pos: 0 };
        let count = r.u32()? as usize;
        if count != params.len() {
            return format_err(format!("optimizer holds {count} tensors, model has {}", params.len()));
        }
        let mut opt = AdamW::new(params);
        for (i, p) in params.iter().enumerate() {
            opt.steps[i] = r.u64()?;
            let n = r.u32()? as usize;
            if n != p.value.len() {
                return format_err(format!("optimizer moments for {} have {n} entries", p.name));
            }
            let raw = r.take(8 * n)?;
            let f = |k: usize| f32::from_le_bytes(raw[4 * k..4 * k + 4].try_into().unwrap());
            opt.m[i] = (0..n).map(f).collect();
            opt.v[i] = (n..2 * n).map(f).collect();
        }
        Ok((opt, r.pos))
    }
}
