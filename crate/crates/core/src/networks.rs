//! The amortized inference networks.
//!
//! * `f_s`: residual blocks `conv -> relu -> conv`, output `(mu_x, ln var_x)`.
//! * `f_a`: residual blocks `conv -> norm -> relu -> conv -> norm`, output
//!   `(mu_m, ln var_m)` or `mu_m` alone when the appearance is deterministic.
//! * `g`: two-level encoder-decoder on the shape sample, output `K` raw
//!   class means followed by `K` log-variances (omitted when deterministic).
//!
//! All convolutions are 3x3 with zero padding except the 1x1 segmentation
//! head. Parameters live in one flat list so the optimizer and checkpoint
//! code treat the three networks uniformly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use bayeseg_tensor::{AdamConfig, AdamState, Element, Graph, Padding, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BSCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Bias of every log-variance head at initialization (`sigma ~ 0.37`).
pub const LOG_VAR_BIAS_INIT: f64 = -2.0;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    None,
    Instance,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::Instance => "instance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "instance" => Ok(NormMode::Instance),
            other => Err(Error::Config(format!("unknown norm mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub width: usize,
    pub res_blocks_shape: usize,
    pub res_blocks_app: usize,
    pub classes: usize,
    pub norm_mode: NormMode,
    pub seed: u64,
    /// `f_a` emits a log-variance channel.
    pub appearance_variance: bool,
    /// `g` emits `K` log-variance channels.
    pub segmentation_variance: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 16,
            res_blocks_shape: 10,
            res_blocks_app: 6,
            classes: 3,
            norm_mode: NormMode::Instance,
            seed: 0,
            appearance_variance: true,
            segmentation_variance: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.res_blocks_shape == 0 || self.res_blocks_app == 0 {
            return Err(Error::Config(
                "network width and block counts must be at least 1".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    /// `key=value` lines under the `net.` namespace.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("net.width".into(), self.width.to_string()),
            ("net.res_blocks_shape".into(), self.res_blocks_shape.to_string()),
            ("net.res_blocks_app".into(), self.res_blocks_app.to_string()),
            ("net.classes".into(), self.classes.to_string()),
            ("net.norm_mode".into(), self.norm_mode.as_str().into()),
            ("net.seed".into(), self.seed.to_string()),
            ("net.appearance_variance".into(), self.appearance_variance.to_string()),
            (
                "net.segmentation_variance".into(),
                self.segmentation_variance.to_string(),
            ),
        ]
    }

    /// Applies one `net.*` key; returns false for keys outside the namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "net.width" => self.width = parse(key, value)?,
            "net.res_blocks_shape" => self.res_blocks_shape = parse(key, value)?,
            "net.res_blocks_app" => self.res_blocks_app = parse(key, value)?,
            "net.classes" => self.classes = parse(key, value)?,
            "net.norm_mode" => self.norm_mode = NormMode::parse(value)?,
            "net.seed" => self.seed = parse(key, value)?,
            "net.appearance_variance" => self.appearance_variance = parse(key, value)?,
            "net.segmentation_variance" => self.segmentation_variance = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernel: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    scale: usize,
    shift: usize,
}

#[derive(Clone, Debug)]
struct Block {
    c1: Conv,
    n1: Option<Affine>,
    c2: Conv,
    n2: Option<Affine>,
}

#[derive(Clone, Debug)]
struct ResNet {
    head: Conv,
    blocks: Vec<Block>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct SegNet {
    enc1: [Conv; 2],
    enc2: [Conv; 2],
    bottom: [Conv; 2],
    dec2: Conv,
    dec1: Conv,
    out: Conv,
}

/// Parameter list with its layer layout.
struct Builder<'r, T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_gain(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: &[f64],
        gain: f64,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(std * z)
        });
        let kernel = self.push(format!("{name}.weight"), w);
        let b = Tensor::from_fn(&[cout], |i| T::from_f64_lossy(bias.get(i).copied().unwrap_or(0.0)));
        let bias = self.push(format!("{name}.bias"), b);
        Conv {
            kernel,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: &[f64]) -> Conv {
        self.conv_gain(name, cin, cout, k, stride, bias, 1.0)
    }

    /// Output head whose channels from `means` on are log-variances. Their
    /// kernel rows start at zero, so every log-variance starts at its bias.
    fn head(&mut self, name: &str, cin: usize, cout: usize, k: usize, means: usize, bias: &[f64]) -> Conv {
        let c = self.conv(name, cin, cout, k, 1, bias);
        let row = cin * k * k;
        for v in &mut self.tensors[c.kernel].data_mut()[means * row..] {
            *v = T::from_f64_lossy(0.0);
        }
        c
    }

    fn affine(&mut self, name: &str, ch: usize) -> Affine {
        let scale = self.push(format!("{name}.scale"), Tensor::ones(&[1, ch, 1, 1]));
        let shift = self.push(format!("{name}.shift"), Tensor::zeros(&[1, ch, 1, 1]));
        Affine { scale, shift }
    }

    fn resnet(&mut self, name: &str, width: usize, blocks: usize, norm: bool, outputs: usize) -> ResNet {
        let head = self.conv(&format!("{name}.head"), 1, width, 3, 1, &[]);
        // residual branches scaled so the trunk variance stays bounded in depth
        let branch_gain = 1.0 / (blocks as f64).sqrt();
        let blocks = (0..blocks)
            .map(|b| {
                let p = format!("{name}.block{b}");
                let c1 = self.conv(&format!("{p}.conv1"), width, width, 3, 1, &[]);
                let n1 = norm.then(|| self.affine(&format!("{p}.norm1"), width));
                let c2 = self.conv_gain(&format!("{p}.conv2"), width, width, 3, 1, &[], branch_gain);
                let n2 = norm.then(|| self.affine(&format!("{p}.norm2"), width));
                Block { c1, n1, c2, n2 }
            })
            .collect();
        let bias: Vec<f64> = (0..outputs)
            .map(|i| if i == 0 { 0.0 } else { LOG_VAR_BIAS_INIT })
            .collect();
        let out = self.head(&format!("{name}.out"), width, outputs, 3, 1, &bias);
        ResNet { head, blocks, out }
    }

    fn segnet(&mut self, width: usize, classes: usize, variance: bool) -> SegNet {
        let (w1, w2, w3) = (width, 2 * width, 4 * width);
        let enc1 = [
            self.conv("seg.enc1a", 1, w1, 3, 1, &[]),
            self.conv("seg.enc1b", w1, w1, 3, 1, &[]),
        ];
        let enc2 = [
            self.conv("seg.down1", w1, w2, 3, 2, &[]),
            self.conv("seg.enc2", w2, w2, 3, 1, &[]),
        ];
        let bottom = [
            self.conv("seg.down2", w2, w3, 3, 2, &[]),
            self.conv("seg.bottom", w3, w3, 3, 1, &[]),
        ];
        let dec2 = self.conv("seg.dec2", w3 + w2, w2, 3, 1, &[]);
        let dec1 = self.conv("seg.dec1", w2 + w1, w1, 3, 1, &[]);
        let outputs = if variance { 2 * classes } else { classes };
        let bias: Vec<f64> = (0..outputs)
            .map(|i| if i < classes { 0.0 } else { LOG_VAR_BIAS_INIT })
            .collect();
        let out = self.head("seg.out", w1, outputs, 1, classes, &bias);
        SegNet {
            enc1,
            enc2,
            bottom,
            dec2,
            dec1,
            out,
        }
    }
}

/// Gaussian head output: mean and, when stochastic, log-variance.
#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    pub mean: Var,
    pub log_var: Option<Var>,
}

/// Weights of `f_s`, `f_a`, `g` and the optimizer moments.
pub struct Networks<T> {
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    adam: AdamState<T>,
    shape: ResNet,
    app: ResNet,
    seg: SegNet,
}

impl<T: Element> Networks<T> {
    /// Kaiming fan-in initialization seeded by `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let norm = config.norm_mode == NormMode::Instance;
        let shape = b.resnet("shape", config.width, config.res_blocks_shape, false, 2);
        let app_out = if config.appearance_variance { 2 } else { 1 };
        let app = b.resnet("app", config.width, config.res_blocks_app, norm, app_out);
        let seg = b.segnet(config.width, config.classes, config.segmentation_variance);
        let (names, params) = (b.names, b.tensors);
        let adam = AdamState::for_params(&params);
        Ok(Networks {
            config,
            names,
            params,
            adam,
            shape,
            app,
            seg,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn adam_state(&self) -> &AdamState<T> {
        &self.adam
    }

    /// Registers every parameter on `g`; `trainable` selects leaf vs constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// One Adam update from gradients aligned with [`params`](Self::params).
    pub fn adam_step(&mut self, cfg: &AdamConfig, grads: &[Tensor<T>]) -> Result<()> {
        Ok(self.adam.update(cfg, &mut self.params, grads)?)
    }

    fn conv(g: &mut Graph<T>, p: &[Var], c: Conv, x: Var) -> Result<Var> {
        Ok(g.conv2d_bias(x, p[c.kernel], p[c.bias], c.stride, Padding::Zero(c.pad))?)
    }

    fn norm(g: &mut Graph<T>, p: &[Var], a: Option<Affine>, x: Var) -> Result<Var> {
        match a {
            None => Ok(x),
            Some(a) => {
                let n = g.instance_norm(x, T::from_f64_lossy(NORM_EPS))?;
                let s = g.mul(n, p[a.scale])?;
                Ok(g.add(s, p[a.shift])?)
            }
        }
    }

    fn resnet_forward(g: &mut Graph<T>, p: &[Var], net: &ResNet, y: Var) -> Result<HeadOut> {
        let mut h = Self::conv(g, p, net.head, y)?;
        for b in &net.blocks {
            let t = Self::conv(g, p, b.c1, h)?;
            let t = Self::norm(g, p, b.n1, t)?;
            let t = g.relu(t)?;
            let t = Self::conv(g, p, b.c2, t)?;
            let t = Self::norm(g, p, b.n2, t)?;
            h = g.add(h, t)?;
        }
        let h = g.relu(h)?;
        let out = Self::conv(g, p, net.out, h)?;
        split_head(g, out, 1)
    }

    /// `f_s` on an `[N, 1, H, W]` image node.
    pub fn shape_forward(&self, g: &mut Graph<T>, p: &[Var], y: Var) -> Result<HeadOut> {
        Self::resnet_forward(g, p, &self.shape, y)
    }

    /// `f_a` on an `[N, 1, H, W]` image node.
    pub fn appearance_forward(&self, g: &mut Graph<T>, p: &[Var], y: Var) -> Result<HeadOut> {
        Self::resnet_forward(g, p, &self.app, y)
    }

    /// `g` on the `[N, 1, H, W]` shape sample; `H` and `W` divisible by 4.
    pub fn segmentation_forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<HeadOut> {
        let d = g.value(x).dims().to_vec();
        if d.len() != 4 || d[2] % 4 != 0 || d[3] % 4 != 0 {
            return Err(Error::shape(
                "segmentation_forward",
                format!("input {d:?} must be NCHW with H, W divisible by 4"),
            ));
        }
        let s = &self.seg;
        let act = |g: &mut Graph<T>, c: Conv, x: Var| -> Result<Var> {
            let y = Self::conv(g, p, c, x)?;
            Ok(g.relu(y)?)
        };
        let e1 = act(g, s.enc1[0], x)?;
        let e1 = act(g, s.enc1[1], e1)?;
        let e2 = act(g, s.enc2[0], e1)?;
        let e2 = act(g, s.enc2[1], e2)?;
        let b = act(g, s.bottom[0], e2)?;
        let b = act(g, s.bottom[1], b)?;
        let u2 = g.upsample2x(b)?;
        let u2 = g.concat(&[u2, e2], 1)?;
        let d2 = act(g, s.dec2, u2)?;
        let u1 = g.upsample2x(d2)?;
        let u1 = g.concat(&[u1, e1], 1)?;
        let d1 = act(g, s.dec1, u1)?;
        let out = Self::conv(g, p, s.out, d1)?;
        split_head(g, out, self.config.classes)
    }

    /// Writes the checkpoint: magic, version, config echo, named tensors,
    /// Adam step and moments.
    pub fn save_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::io("<checkpoint stream>", e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        let mut echo = format!("dtype={}\n", T::NAME);
        for (k, v) in self.config.to_pairs() {
            echo.push_str(&format!("{k}={v}\n"));
        }
        write_blob(w, echo.as_bytes()).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in self.names.iter().zip(&self.params) {
            write_blob(w, name.as_bytes()).map_err(io)?;
            t.write_to(w)?;
        }
        w.write_all(&self.adam.step.to_le_bytes()).map_err(io)?;
        for (m, v) in self.adam.first.iter().zip(&self.adam.second) {
            m.write_to(w)?;
            v.write_to(w)?;
        }
        Ok(())
    }

    pub fn load_from(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("checkpoint: {msg}"));
        let io = |e: std::io::Error| Error::io("<checkpoint stream>", e);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v).map_err(io)?;
        if u16::from_le_bytes(v) != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", u16::from_le_bytes(v))));
        }
        let echo = String::from_utf8(read_blob(r).map_err(io)?).map_err(|_| bad("config echo is not UTF-8".into()))?;
        let mut config = NetConfig::default();
        for line in echo.lines() {
            let (k, val) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            if k == "dtype" {
                if val != T::NAME {
                    return Err(bad(format!("stored as {val}, loading as {}", T::NAME)));
                }
            } else if !config.set(k, val)? {
                return Err(bad(format!("unknown key {k}")));
            }
        }
        let mut nets = Networks::<T>::new(config)?;
        let mut n = [0u8; 4];
        r.read_exact(&mut n).map_err(io)?;
        if u32::from_le_bytes(n) as usize != nets.params.len() {
            return Err(bad(format!(
                "{} tensors, architecture needs {}",
                u32::from_le_bytes(n),
                nets.params.len()
            )));
        }
        for i in 0..nets.params.len() {
            let name = String::from_utf8(read_blob(r).map_err(io)?).map_err(|_| bad("tensor name".into()))?;
            if name != nets.names[i] {
                return Err(bad(format!("expected tensor {}, found {name}", nets.names[i])));
            }
            let t = Tensor::read_from(r)?;
            if t.dims() != nets.params[i].dims() {
                return Err(bad(format!("{name} has dims {:?}", t.dims())));
            }
            nets.params[i] = t;
        }
        let mut step = [0u8; 8];
        r.read_exact(&mut step).map_err(io)?;
        nets.adam.step = u64::from_le_bytes(step);
        for i in 0..nets.params.len() {
            nets.adam.first[i] = Tensor::read_from(r)?;
            nets.adam.second[i] = Tensor::read_from(r)?;
        }
        Ok(nets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::load_from(&mut bytes.as_slice())
    }

    /// Parameter tensors keyed by name.
    pub fn named(&self) -> BTreeMap<&str, &Tensor<T>> {
        self.names.iter().map(|s| s.as_str()).zip(&self.params).collect()
    }
}

/// Element type a checkpoint was written with (`"f32"` or `"f64"`).
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("checkpoint {}: {msg}", path.display()));
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad("bad magic"));
    }
    let mut r = &bytes[CHECKPOINT_MAGIC.len() + 2..];
    let echo = read_blob(&mut r).map_err(|e| Error::io(path, e))?;
    let echo = String::from_utf8(echo).map_err(|_| bad("config echo is not UTF-8"))?;
    echo.lines()
        .find_map(|l| l.strip_prefix("dtype="))
        .map(str::to_string)
        .ok_or_else(|| bad("no dtype line"))
}

fn write_blob(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_blob(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let mut b = vec![0u8; u32::from_le_bytes(n) as usize];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Splits `[N, C, H, W]` into the first `k` channels and the remainder.
fn split_head<T: Element>(g: &mut Graph<T>, out: Var, k: usize) -> Result<HeadOut> {
    let ch = g.value(out).dims()[1];
    if ch == k {
        return Ok(HeadOut {
            mean: out,
            log_var: None,
        });
    }
    let mean = g.narrow(out, 1, 0, k)?;
    let log_var = g.narrow(out, 1, k, ch - k)?;
    Ok(HeadOut {
        mean,
        log_var: Some(log_var),
    })
}

/// `a = m + rho^{-1/2} * eps`.
pub fn sample_appearance(
    m_sample: &crate::grid::ImageGrid,
    rho: &crate::grid::ImageGrid,
    noise: &crate::grid::ImageGrid,
) -> Result<crate::grid::ImageGrid> {
    m_sample.check_same(rho, "sample_appearance")?;
    m_sample.check_same(noise, "sample_appearance")?;
    if let Some((i, r)) = rho.data().iter().enumerate().find(|(_, &r)| !(r > 0.0)) {
        return Err(Error::domain(
            "sample_appearance",
            format!("precision {r} at pixel {i}"),
        ));
    }
    let sd = rho.map(|r| r.powf(-0.5));
    let d = sd.zip_with(noise, |s, e| s * e)?;
    m_sample.zip_with(&d, |m, v| m + v)
}
