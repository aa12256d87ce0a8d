//! Learnable parameters of the codec and their on-disk layout.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{format_err, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Parameter subsets that training stages switch on and off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Motion estimator, motion encoder/decoder and motion steps.
    MotionNet,
    /// Hyperprior of the motion latent.
    MotionEntropy,
    /// Context miner, contextual coder, PQA, RQA, frame head, intra feature
    /// and context steps.
    ReconNet,
    /// Hyperprior of the context latent.
    ReconEntropy,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::MotionNet,
        Group::MotionEntropy,
        Group::ReconNet,
        Group::ReconEntropy,
    ];

    fn code(self) -> u8 {
        match self {
            Group::MotionNet => 0,
            Group::MotionEntropy => 1,
            Group::ReconNet => 2,
            Group::ReconEntropy => 3,
        }
    }
}

/// Architecture switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModelConfig {
    pub pqa: bool,
    pub rqa: bool,
}

/// Channel plan.
pub const FEATURE_CHANNELS: usize = 16;
pub const CONTEXT_CHANNELS: [usize; 3] = [16, 32, 64];
pub const MOTION_LATENT: usize = 16;
pub const CONTEXT_LATENT: usize = 32;
pub const HYPER_LATENT: usize = 16;
/// Number of trained rate points.
pub const RATE_POINTS: usize = 4;
/// Initial motion quantization steps, coarsest first.
pub const INITIAL_MOTION_STEPS: [f64; RATE_POINTS] = [0.125, 0.088, 0.0625, 0.044];
/// Initial context quantization steps, coarsest first.
pub const INITIAL_CONTEXT_STEPS: [f64; RATE_POINTS] = [0.5, 0.35, 0.25, 0.18];

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform with variance `2/fan_in`, for layers followed by leaky ReLU.
    Hidden,
    /// Uniform with variance `1/fan_in`.
    Linear,
    /// A tenth of the linear range.
    Small,
    /// Small weights and a positive bias so gates start mostly open.
    Confidence,
    /// Zero weights, bias one-hot on the centre tap.
    Delta,
    /// Zero weights and bias.
    Zero,
}

struct ConvSpec {
    name: &'static str,
    group: Group,
    cin: usize,
    cout: usize,
    init: Init,
}

const fn conv(name: &'static str, group: Group, cin: usize, cout: usize, init: Init) -> ConvSpec {
    ConvSpec {
        name,
        group,
        cin,
        cout,
        init,
    }
}

use Group::*;
use Init::*;

const BASE_CONVS: &[ConvSpec] = &[
    conv("me.c1", MotionNet, 6, 16, Hidden),
    conv("me.c2", MotionNet, 16, 16, Hidden),
    conv("me.c3", MotionNet, 16, 16, Hidden),
    conv("me.c4", MotionNet, 16, 16, Hidden),
    conv("me.c5", MotionNet, 16, 2, Small),
    conv("mv.e1", MotionNet, 2, 16, Hidden),
    conv("mv.e2", MotionNet, 16, 16, Hidden),
    conv("mv.e3", MotionNet, 16, 16, Hidden),
    conv("mv.e4", MotionNet, 16, MOTION_LATENT, Linear),
    conv("mv.d1", MotionNet, MOTION_LATENT, 16, Hidden),
    conv("mv.d2", MotionNet, 16, 16, Hidden),
    conv("mv.d3", MotionNet, 16, 16, Hidden),
    conv("mv.d4", MotionNet, 16, 2, Linear),
    conv("hm.e1", MotionEntropy, MOTION_LATENT, 16, Hidden),
    conv("hm.e2", MotionEntropy, 16, HYPER_LATENT, Linear),
    conv("hm.d1", MotionEntropy, HYPER_LATENT, 16, Hidden),
    conv("hm.d2", MotionEntropy, 16, 2 * MOTION_LATENT, Linear),
    conv("intra.f", ReconNet, 3, FEATURE_CHANNELS, Linear),
    conv("cm.first0", ReconNet, FEATURE_CHANNELS, 16, Linear),
    conv("cm.first1", ReconNet, FEATURE_CHANNELS, 16, Linear),
    conv("cm.first2", ReconNet, FEATURE_CHANNELS, 16, Linear),
    conv("cm.first3", ReconNet, FEATURE_CHANNELS, 16, Linear),
    conv("cm.d1", ReconNet, FEATURE_CHANNELS, 32, Hidden),
    conv("cm.d2", ReconNet, 32, 64, Hidden),
    conv("cm.c1", ReconNet, 32, 32, Linear),
    conv("cm.c2", ReconNet, 64, 64, Linear),
    conv("enc.c1", ReconNet, 3 + 16, 32, Hidden),
    conv("enc.c2", ReconNet, 32 + 32, 48, Hidden),
    conv("enc.c3", ReconNet, 48 + 64, 48, Hidden),
    conv("enc.c4", ReconNet, 48, CONTEXT_LATENT, Linear),
    conv("dec.c1", ReconNet, CONTEXT_LATENT, 48, Hidden),
    conv("dec.c2", ReconNet, 48, 48, Hidden),
    conv("dec.c3", ReconNet, 48 + 64, 32, Hidden),
    conv("dec.c4", ReconNet, 32 + 32, 16, Hidden),
    conv("dec.c5", ReconNet, 16 + 16, FEATURE_CHANNELS, Hidden),
    conv("head", ReconNet, FEATURE_CHANNELS, 3, Zero),
    conv("hc.e1", ReconEntropy, CONTEXT_LATENT, 16, Hidden),
    conv("hc.e2", ReconEntropy, 16, HYPER_LATENT, Linear),
    conv("hc.d1", ReconEntropy, HYPER_LATENT, 32, Hidden),
    conv("hc.d2", ReconEntropy, 32, 2 * CONTEXT_LATENT, Linear),
];

const PQA_CONVS: &[ConvSpec] = &[
    conv("pqa.e0", ReconNet, 16 + 3, 16, Confidence),
    conv("pqa.e1", ReconNet, 32 + 32, 32, Confidence),
    conv("pqa.e2", ReconNet, 64 + 48, 64, Confidence),
    conv("pqa.d2", ReconNet, 64 + 48, 64, Confidence),
    conv("pqa.d1", ReconNet, 32 + 32, 32, Confidence),
    conv("pqa.d0", ReconNet, 16 + 16, 16, Confidence),
];

const RQA_CONVS: &[ConvSpec] = &[
    conv("rqa.enc", ReconNet, 3, 9, Delta),
    conv("rqa.dec", ReconNet, 3, 9, Delta),
];

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor<f32>,
}

/// All learnable parameters of one codec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CTXM";
const CHECKPOINT_VERSION: u8 = 1;

/// Stable 64-bit FNV-1a hash of a parameter name mixed with the seed.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl ModelState {
    /// Fresh parameters. Every tensor draws from its own stream derived
    /// from `seed` and its name, so configurations that share a layer
    /// start from the same values for it.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = Vec::new();
        for spec in Self::conv_specs(config) {
            let fan_in = (spec.cin * 9) as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, spec.name));
            let mut uniform = |n: usize, a: f64| -> Vec<f32> {
                (0..n).map(|_| rng.gen_range(-a..a) as f32).collect()
            };
            let nw = spec.cout * spec.cin * 9;
            let (w, b) = match spec.init {
                Hidden => (uniform(nw, (6.0 / fan_in).sqrt()), vec![0.0; spec.cout]),
                Linear => (uniform(nw, (3.0 / fan_in).sqrt()), vec![0.0; spec.cout]),
                Small => (uniform(nw, 0.1 * (3.0 / fan_in).sqrt()), vec![0.0; spec.cout]),
                Confidence => (uniform(nw, 0.1 * (3.0 / fan_in).sqrt()), vec![2.0; spec.cout]),
                Zero => (vec![0.0; nw], vec![0.0; spec.cout]),
                Delta => {
                    let mut b = vec![0.0; spec.cout];
                    b[spec.cout / 2] = 1.0;
                    (vec![0.0; nw], b)
                }
            };
            params.push(Param {
                name: format!("{}.w", spec.name),
                group: spec.group,
                value: Tensor::new(&[spec.cout, spec.cin, 3, 3], w).unwrap(),
            });
            params.push(Param {
                name: format!("{}.b", spec.name),
                group: spec.group,
                value: Tensor::new(&[spec.cout], b).unwrap(),
            });
        }
        for (name, group, steps) in [
            ("q.motion", MotionNet, INITIAL_MOTION_STEPS),
            ("q.context", ReconNet, INITIAL_CONTEXT_STEPS),
        ] {
            let log_steps = steps.iter().map(|q| q.ln() as f32).collect();
            params.push(Param {
                name: name.into(),
                group,
                value: Tensor::new(&[RATE_POINTS], log_steps).unwrap(),
            });
        }
        let b0 = inv_softplus(1.0) as f32;
        for (prefix, group) in [("hm", MotionEntropy), ("hc", ReconEntropy)] {
            params.push(Param {
                name: format!("{prefix}.prior_mu"),
                group,
                value: Tensor::zeros(&[HYPER_LATENT]),
            });
            params.push(Param {
                name: format!("{prefix}.prior_b"),
                group,
                value: Tensor::full(&[HYPER_LATENT], b0),
            });
        }
        Self::from_params(config, params)
    }

    fn conv_specs(config: ModelConfig) -> impl Iterator<Item = &'static ConvSpec> {
        let pqa: &[ConvSpec] = if config.pqa { PQA_CONVS } else { &[] };
        let rqa: &[ConvSpec] = if config.rqa { RQA_CONVS } else { &[] };
        BASE_CONVS.iter().chain(pqa).chain(rqa)
    }

    fn from_params(config: ModelConfig, params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ModelState {
            config,
            params,
            index,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Quantization step of the motion (`motion = true`) or context latent
    /// at a continuous rate index in `[0, 3]`.
    pub fn step(&self, motion: bool, rate: f64) -> f64 {
        let p = self.get(if motion { "q.motion" } else { "q.context" }).unwrap();
        let (i, f) = rate_blend(rate);
        let d = p.value.data();
        ((1.0 - f) * d[i] as f64 + f * d[i + 1] as f64).exp()
    }

    /// Registers every parameter on `tape`; parameters whose group is not
    /// `trainable` become constants.
    pub fn bind<'m, 't, T: Real>(
        &'m self,
        tape: &'t Tape<T>,
        trainable: impl Fn(Group) -> bool,
    ) -> Net<'m, 't, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.cast(), tape.grad_enabled() && trainable(p.group)))
            .collect();
        Net { model: self, vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.scalar_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(self.config.pqa as u8 | (self.config.rqa as u8) << 1);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.code());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a model written by [`ModelState::to_bytes`] from the front of
    /// `bytes` and returns it with the number of bytes consumed. The layout
    /// must match the one implied by the stored configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return format_err("not a model checkpoint");
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return format_err(format!("unsupported checkpoint version {version}"));
        }
        let flags = r.u8()?;
        if flags > 3 {
            return format_err(format!("bad configuration flags {flags:#x}"));
        }
        let config = ModelConfig {
            pqa: flags & 1 != 0,
            rqa: flags & 2 != 0,
        };
        let mut reference = ModelState::new(config, 0);
        let count = r.u32()? as usize;
        if count != reference.params.len() {
            return format_err(format!(
                "checkpoint holds {count} tensors, layout expects {}",
                reference.params.len()
            ));
        }
        for p in reference.params.iter_mut() {
            let name_len = r.u16()? as usize;
            let name = r.take(name_len)?;
            if name != p.name.as_bytes() {
                return format_err(format!(
                    "unexpected tensor {:?}, expected {}",
                    String::from_utf8_lossy(name),
                    p.name
                ));
            }
            if r.u8()? != p.group.code() {
                return format_err(format!("group mismatch for {}", p.name));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != p.value.shape() {
                return format_err(format!(
                    "{}: shape {shape:?}, expected {:?}",
                    p.name,
                    p.value.shape()
                ));
            }
            for v in p.value.data_mut() {
                *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            }
        }
        Ok((reference, r.pos))
    }
}

/// Splits a continuous rate index into a lower trained point and a blend
/// factor towards the next one.
pub fn rate_blend(rate: f64) -> (usize, f64) {
    let r = rate.clamp(0.0, (RATE_POINTS - 1) as f64);
    let i = (r.floor() as usize).min(RATE_POINTS - 2);
    (i, r - i as f64)
}

/// A model bound to one tape.
pub struct Net<'m, 't, T: Real> {
    pub model: &'m ModelState,
    vars: Vec<Var<'t, T>>,
}

impl<'m, 't, T: Real> Net<'m, 't, T> {
    pub fn config(&self) -> ModelConfig {
        self.model.config
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.vars[0].tape()
    }

    /// Variable for a named parameter. Panics on unknown names, which are
    /// programming errors.
    pub fn p(&self, name: &str) -> Var<'t, T> {
        match self.model.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Variables in layout order, aligned with [`ModelState::params`].
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return format_err(format!(
                "unexpected end of data at offset {} (need {n} bytes)",
                self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
