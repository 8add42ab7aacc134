//! Noise-prediction network: a small 1D convolutional U-Net over the design
//! vector with sinusoidal time conditioning.
//!
//! All parameters live in one flat vector. [`Layout`] maps layer names to
//! slices of it, so a tape can hold the whole parameter set as a single
//! variable (training) or a single constant (sampling).

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{invalid, Error, Result};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Sequence length.
    pub d: usize,
    pub channels: usize,
    /// Down/up-sampling levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Diffusion step count; time is fed to the network as `t / timesteps`.
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d: 40,
            channels: 32,
            depth: 2,
            time_embed_dim: 64,
            timesteps: 1000,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.channels == 0 || self.timesteps == 0 {
            return invalid("denoiser dimensions must be positive");
        }
        if self.d % (1 << self.depth) != 0 {
            return invalid(format!(
                "sequence length {} not divisible by 2^{}",
                self.d, self.depth
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return invalid(format!(
                "time embedding dimension must be even, got {}",
                self.time_embed_dim
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Shape,
    /// Zero for biases.
    pub fan_in: usize,
}

/// Named slices of the flat parameter vector, in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    slots: Vec<ParamSlot>,
    len: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Shape, fan_in: usize) -> usize {
        let idx = self.slots.len();
        self.slots.push(ParamSlot {
            name,
            offset: self.len,
            shape,
            fan_in,
        });
        self.len += shape.len();
        idx
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Dense {
        Dense {
            w: self.push(format!("{name}.weight"), Shape::Matrix(out, inp), inp),
            b: self.push(format!("{name}.bias"), Shape::Vector(out), 0),
        }
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, width: usize) -> Conv {
        Conv {
            w: self.push(format!("{name}.weight"), Shape::Matrix(out, inp * width), inp * width),
            b: self.push(format!("{name}.bias"), Shape::Vector(out), 0),
            width,
        }
    }

    fn block(&mut self, name: &str, inp: usize, out: usize, embed: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), out, inp, KERNEL),
            time: self.linear(&format!("{name}.time"), out, embed),
            conv2: self.conv(&format!("{name}.conv2"), out, out, KERNEL),
            skip: (inp != out).then(|| self.conv(&format!("{name}.skip"), out, inp, 1)),
        }
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    width: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    time: Dense,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Architecture {
    layout: Layout,
    time1: Dense,
    time2: Dense,
    lift: Conv,
    down: Vec<[ResBlock; 2]>,
    mid: ResBlock,
    up: Vec<[ResBlock; 2]>,
    out: Conv,
}

impl Architecture {
    fn new(cfg: &DenoiserConfig) -> Self {
        let c = cfg.channels;
        let e = cfg.time_embed_dim;
        let mut l = Layout {
            slots: Vec::new(),
            len: 0,
        };
        let time1 = l.linear("time.0", e, e);
        let time2 = l.linear("time.1", e, e);
        let lift = l.conv("lift", c, 1, KERNEL);
        let down = (0..cfg.depth)
            .map(|i| [l.block(&format!("down{i}.0"), c, c, e), l.block(&format!("down{i}.1"), c, c, e)])
            .collect();
        let mid = l.block("mid", c, c, e);
        let up = (0..cfg.depth)
            .rev()
            .map(|i| [l.block(&format!("up{i}.0"), 2 * c, c, e), l.block(&format!("up{i}.1"), c, c, e)])
            .collect();
        let out = l.conv("out", 1, c, KERNEL);
        Self {
            layout: l,
            time1,
            time2,
            lift,
            down,
            mid,
            up,
            out,
        }
    }
}

/// Flat parameter vector together with its configuration.
#[derive(Clone, Debug)]
pub struct DenoiserWeights {
    config: DenoiserConfig,
    arch: Architecture,
    theta: Vec<f64>,
}

impl PartialEq for DenoiserWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.theta == other.theta
    }
}

/// Kaiming-uniform (fan-in) weights and zero biases, seeded by `config.seed`.
///
/// Uses the leaky-ReLU gain with negative slope `sqrt(5)`, i.e. the bound
/// `1 / sqrt(fan_in)`. The ReLU gain (`sqrt(6 / fan_in)`) compounds through the
/// residual stack to output RMS ~ 37 at initialization.
pub fn init_weights(config: &DenoiserConfig) -> Result<DenoiserWeights> {
    config.validate()?;
    let arch = Architecture::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = vec![0.0; arch.layout.len()];
    for slot in arch.layout.slots() {
        if slot.fan_in == 0 {
            continue;
        }
        let bound = 1.0 / (slot.fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in &mut theta[slot.offset..slot.offset + slot.shape.len()] {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(DenoiserWeights {
        config: config.clone(),
        arch,
        theta,
    })
}

/// Sinusoidal embedding of `t / timesteps`, frequencies `1000 * 10000^(-k / half)`.
pub fn time_embedding(t: usize, timesteps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = t as f64 / timesteps as f64 * 1000.0;
    let mut e = Vec::with_capacity(dim);
    let freq = |k: usize| (-(10000f64.ln()) * k as f64 / half as f64).exp();
    e.extend((0..half).map(|k| (s * freq(k)).sin()));
    e.extend((0..half).map(|k| (s * freq(k)).cos()));
    e
}

struct Bound<'a> {
    arch: &'a Architecture,
    theta: Var,
}

impl Bound<'_> {
    fn param(&self, tape: &mut Tape, idx: usize) -> Result<Var> {
        let s = &self.arch.layout.slots[idx];
        tape.slice(self.theta, s.offset, s.shape)
    }

    fn dense(&self, tape: &mut Tape, l: &Dense, x: Var) -> Result<Var> {
        let w = self.param(tape, l.w)?;
        let b = self.param(tape, l.b)?;
        let y = tape.matvec(w, x)?;
        tape.add(y, b)
    }

    fn conv(&self, tape: &mut Tape, l: &Conv, x: Var) -> Result<Var> {
        let w = self.param(tape, l.w)?;
        let b = self.param(tape, l.b)?;
        let y = tape.conv1d(x, w, l.width)?;
        let b = tape.broadcast(b, y.shape())?;
        tape.add(y, b)
    }

    fn block(&self, tape: &mut Tape, l: &ResBlock, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv(tape, &l.conv1, x)?;
        let h = tape.silu(h)?;
        let te = self.dense(tape, &l.time, temb)?;
        let te = tape.broadcast(te, h.shape())?;
        let h = tape.add(h, te)?;
        let h = tape.silu(h)?;
        let h = self.conv(tape, &l.conv2, h)?;
        let skip = match &l.skip {
            Some(s) => self.conv(tape, s, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// `(len, len / 2)` average-pooling matrix.
fn pool_matrix(len: usize) -> Vec<f64> {
    let half = len / 2;
    let mut m = vec![0.0; len * half];
    for j in 0..half {
        m[2 * j * half + j] = 0.5;
        m[(2 * j + 1) * half + j] = 0.5;
    }
    m
}

/// `(len, 2 len)` nearest-neighbour upsampling matrix.
fn upsample_matrix(len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * 2 * len];
    for j in 0..len {
        m[j * 2 * len + 2 * j] = 1.0;
        m[j * 2 * len + 2 * j + 1] = 1.0;
    }
    m
}

impl DenoiserWeights {
    pub fn from_params(config: DenoiserConfig, theta: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        if theta.len() != arch.layout.len() {
            return invalid(format!(
                "parameter vector has length {}, layout needs {}",
                theta.len(),
                arch.layout.len()
            ));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return invalid("parameter vector has non-finite entries");
        }
        Ok(Self { config, arch, theta })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.arch.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Zero the output convolution so the network predicts zero noise.
    pub fn zero_output_layer(&mut self) {
        for idx in [self.arch.out.w, self.arch.out.b] {
            let s = &self.arch.layout.slots[idx];
            self.theta[s.offset..s.offset + s.shape.len()].fill(0.0);
        }
    }

    /// Put the parameters on `tape`, as a variable when `trainable`.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> Result<Var> {
        let shape = Shape::Vector(self.theta.len());
        if trainable {
            tape.variable(shape, self.theta.clone())
        } else {
            tape.constant(shape, self.theta.clone())
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return invalid(format!("timestep {t} outside 1..={}", self.config.timesteps));
        }
        Ok(())
    }

    /// Record `eps_hat(x, t)` on `tape`; `theta` comes from [`record_params`].
    ///
    /// [`record_params`]: Self::record_params
    pub fn forward_taped(&self, tape: &mut Tape, theta: Var, x: Var, t: usize) -> Result<Var> {
        self.check_t(t)?;
        let cfg = &self.config;
        if x.len() != cfg.d {
            return invalid(format!("input has length {}, expected {}", x.len(), cfg.d));
        }
        if theta.len() != self.theta.len() {
            return invalid("parameter variable does not match this network");
        }
        let net = Bound {
            arch: &self.arch,
            theta,
        };
        let a = &self.arch;

        let emb = tape.vector_constant(&time_embedding(t, cfg.timesteps, cfg.time_embed_dim));
        let h = net.dense(tape, &a.time1, emb)?;
        let h = tape.silu(h)?;
        let temb = net.dense(tape, &a.time2, h)?;
        let temb = tape.silu(temb)?;

        let x = tape.reshape(x, Shape::Matrix(1, cfg.d))?;
        let mut h = net.conv(tape, &a.lift, x)?;
        let mut len = cfg.d;
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in &a.down {
            h = net.block(tape, &level[0], h, temb)?;
            h = net.block(tape, &level[1], h, temb)?;
            skips.push(h);
            let pool = tape.constant(Shape::Matrix(len, len / 2), pool_matrix(len))?;
            h = tape.matmul(h, pool)?;
            len /= 2;
        }
        h = net.block(tape, &a.mid, h, temb)?;
        for level in &a.up {
            let up = tape.constant(Shape::Matrix(len, 2 * len), upsample_matrix(len))?;
            h = tape.matmul(h, up)?;
            len *= 2;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(&[h, skip])?;
            h = net.block(tape, &level[0], h, temb)?;
            h = net.block(tape, &level[1], h, temb)?;
        }
        let out = net.conv(tape, &a.out, h)?;
        tape.reshape(out, Shape::Vector(cfg.d))
    }

    /// Untaped evaluation of `eps_hat(x, t)`.
    pub fn forward(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let theta = self.record_params(&mut tape, false)?;
        let xv = tape.vector_constant(x);
        let y = self.forward_taped(&mut tape, theta, xv, t)?;
        Ok(tape.value(y).to_vec())
    }
}

/// Anything that predicts the injected noise; lets tests swap in exact stubs.
pub trait NoisePredictor {
    /// Sequence length.
    fn dim(&self) -> usize;

    /// Put shared state (parameters) on the tape once per tape.
    fn prepare(&self, tape: &mut Tape, trainable: bool) -> Result<Option<Var>>;

    /// Record `eps_hat(x, t)`; `params` is what `prepare` returned on this tape.
    fn predict(&self, tape: &mut Tape, params: Option<Var>, x: Var, t: usize) -> Result<Var>;
}

impl NoisePredictor for DenoiserWeights {
    fn dim(&self) -> usize {
        self.config.d
    }

    fn prepare(&self, tape: &mut Tape, trainable: bool) -> Result<Option<Var>> {
        self.record_params(tape, trainable).map(Some)
    }

    fn predict(&self, tape: &mut Tape, params: Option<Var>, x: Var, t: usize) -> Result<Var> {
        let theta = params.ok_or_else(|| Error::InvalidArgument("denoiser parameters were not prepared".into()))?;
        self.forward_taped(tape, theta, x, t)
    }
}

/// Predicts zero noise for sequences of the given length.
#[derive(Clone, Copy, Debug)]
pub struct ZeroNoise(pub usize);

impl NoisePredictor for ZeroNoise {
    fn dim(&self) -> usize {
        self.0
    }

    fn prepare(&self, _: &mut Tape, _: bool) -> Result<Option<Var>> {
        Ok(None)
    }

    fn predict(&self, tape: &mut Tape, _: Option<Var>, _: Var, _: usize) -> Result<Var> {
        tape.constant(Shape::Vector(self.0), vec![0.0; self.0])
    }
}

const MAGIC: &[u8; 8] = b"LFDENOIS";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    param_count: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Write a checkpoint.
///
/// Layout: 8-byte magic `LFDENOIS`, `u32` LE format version, `u64` LE length
/// of a UTF-8 JSON header, the header (`config`, `param_count`, free-form
/// `extra`), then `param_count` little-endian `f64` parameters.
pub fn write_checkpoint(mut w: impl Write, weights: &DenoiserWeights, extra: serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: weights.config.clone(),
        param_count: weights.theta.len(),
        extra,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(8 * weights.theta.len());
    for v in &weights.theta {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint written by [`write_checkpoint`], returning the `extra` header field.
pub fn read_checkpoint(mut r: impl Read) -> Result<(DenoiserWeights, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a denoiser checkpoint".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    if hlen > 1 << 24 {
        return Err(Error::Checkpoint(format!("header length {hlen} is implausible")));
    }
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * header.param_count {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * header.param_count,
            body.len()
        )));
    }
    let theta = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let weights = DenoiserWeights::from_params(header.config, theta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((weights, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            d: 8,
            channels: 4,
            depth: 2,
            time_embed_dim: 8,
            timesteps: 100,
            seed: 1,
        }
    }

    #[test]
    fn default_parameter_count() {
        let w = init_weights(&DenoiserConfig::default()).unwrap();
        // time MLP 8320, lift 128, four plain down blocks and one mid block at
        // 8288 each, two levels of (13440 + 8288) on the way up, output 97
        assert_eq!(w.len(), 8320 + 128 + 5 * 8288 + 2 * (13440 + 8288) + 97);
        assert_eq!(w.len(), 93_441);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_weights(&small()).unwrap();
        let b = init_weights(&small()).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&DenoiserConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
        let bias = a.layout().get("lift.bias").unwrap();
        assert!(a.params()[bias.offset..bias.offset + 4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig { d: 10, ..small() }.validate().is_err());
        assert!(DenoiserConfig { time_embed_dim: 7, ..small() }.validate().is_err());
    }

    #[test]
    fn output_shape_and_zeroed_output() {
        let mut w = init_weights(&DenoiserConfig::default()).unwrap();
        let x = vec![0.3; 40];
        for t in [1, 500, 1000] {
            assert_eq!(w.forward(&x, t).unwrap().len(), 40);
        }
        assert!(w.forward(&x, 0).is_err());
        assert!(w.forward(&x, 1001).is_err());
        w.zero_output_layer();
        assert!(w.forward(&x, 17).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let w = init_weights(&DenoiserConfig::default()).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = w.forward(&x, 123).unwrap();
        let b = w.forward(&x, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let w = init_weights(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let th = w.record_params(&mut tape, false).unwrap();
        let xv = tape.vector_variable(&x);
        let y = w.forward_taped(&mut tape, th, xv, 37).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, None).unwrap().wrt(xv);
        let f = |x: &[f64]| w.forward(x, 37).unwrap().iter().sum::<f64>();
        let h = 1e-6;
        for k in 0..8 {
            let mut p = x.clone();
            p[k] += h;
            let mut m = x.clone();
            m[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let w = init_weights(&small()).unwrap();
        let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut tape = Tape::new();
        let th = w.record_params(&mut tape, true).unwrap();
        let xv = tape.vector_constant(&x);
        let y = w.forward_taped(&mut tape, th, xv, 60).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, None).unwrap().wrt(th);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..20 {
            let k = rng.gen_range(0..w.len());
            let eval = |v: f64| {
                let mut p = w.clone();
                p.params_mut()[k] = v;
                p.forward(&x, 60).unwrap().iter().sum::<f64>()
            };
            let fd = (eval(w.params()[k] + h) - eval(w.params()[k] - h)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let w = init_weights(&small()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w, serde_json::json!({"note": 1})).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let (r, extra) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(r, w);
        assert_eq!(extra["note"], 1);
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&b"garbage!garbage!"[..]).is_err());
    }
}
