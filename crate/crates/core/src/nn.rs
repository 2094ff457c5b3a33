//! Policy/value network with a hand-written reverse pass.
//!
//! Three input branches (image convolutions, end-effector MLP, joint MLP) are
//! concatenated into a combined MLP that feeds a Gaussian action-mean head and
//! a scalar value head. The action log-std is a free parameter vector.
//! Every hidden layer uses ELU. Parameters live in one flat `Vec<f64>`
//! described by [`Network::layout`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub conv: Vec<ConvSpec>,
    pub ee_dim: usize,
    pub ee_layers: Vec<usize>,
    pub joint_dim: usize,
    pub joint_layers: Vec<usize>,
    pub combined_layers: Vec<usize>,
    pub action_dim: usize,
    pub initial_log_std: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for NetworkConfig {
    /// Full-size stack on 64×64 RGBA-D frames with six action outputs.
    fn default() -> Self {
        Self {
            image_channels: 5,
            image_height: 64,
            image_width: 64,
            conv: vec![
                ConvSpec::new(32, 8, 4),
                ConvSpec::new(128, 4, 2),
                ConvSpec::new(128, 3, 1),
                ConvSpec::new(128, 3, 1),
            ],
            ee_dim: 3,
            ee_layers: vec![64, 64],
            joint_dim: 6,
            joint_layers: vec![64, 64],
            combined_layers: vec![512],
            action_dim: 6,
            initial_log_std: 0.0,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

impl NetworkConfig {
    /// Reduced stack for 32×32 frames: two convolutions down to a 2×2 map and
    /// narrow dense layers.
    pub fn toy(action_dim: usize) -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            conv: vec![ConvSpec::new(8, 8, 4), ConvSpec::new(16, 4, 2)],
            ee_layers: vec![32, 32],
            joint_layers: vec![32, 32],
            combined_layers: vec![64],
            action_dim,
            ..Self::default()
        }
    }

    /// Length of the flat input vector: image planes, then joints, then end effector.
    pub fn input_dim(&self) -> usize {
        self.image_channels * self.image_height * self.image_width + self.joint_dim + self.ee_dim
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected {expected} values for {what}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
    weight: usize,
    bias: usize,
}

impl ConvLayer {
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    nin: usize,
    nout: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    conv: Vec<ConvLayer>,
    ee: Vec<DenseLayer>,
    joint: Vec<DenseLayer>,
    combined: Vec<DenseLayer>,
    mean_head: DenseLayer,
    value_head: DenseLayer,
    log_std: usize,
    layout: Vec<TensorInfo>,
    param_count: usize,
}

/// Network outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub mean: Vec<f64>,
    /// Log-std after clipping to the configured range.
    pub log_std: Vec<f64>,
    pub value: f64,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    input: Vec<f64>,
    cols: Vec<Vec<f64>>,
    conv: Vec<Vec<f64>>,
    ee: Vec<Vec<f64>>,
    joint: Vec<Vec<f64>>,
    concat: Vec<f64>,
    combined: Vec<Vec<f64>>,
}

/// Upstream gradients of a scalar loss with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub mean: Vec<f64>,
    /// Gradient with respect to the clipped log-std.
    pub log_std: Vec<f64>,
    pub value: f64,
}

impl OutputGrad {
    pub fn zeros(action_dim: usize) -> Self {
        Self {
            mean: vec![0.0; action_dim],
            log_std: vec![0.0; action_dim],
            value: 0.0,
        }
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        libm::expm1(x)
    }
}

/// ELU derivative written in terms of the activation output.
#[inline]
fn elu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

struct LayoutBuilder {
    layout: Vec<TensorInfo>,
    next: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.next;
        let info = TensorInfo {
            name,
            shape,
            offset,
        };
        self.next += info.len();
        self.layout.push(info);
        offset
    }

    fn dense(&mut self, prefix: &str, nin: usize, nout: usize) -> DenseLayer {
        let weight = self.add(alloc::format!("{prefix}.weight"), vec![nout, nin]);
        let bias = self.add(alloc::format!("{prefix}.bias"), vec![nout]);
        DenseLayer {
            nin,
            nout,
            weight,
            bias,
        }
    }

    fn mlp(&mut self, prefix: &str, nin: usize, widths: &[usize]) -> (Vec<DenseLayer>, usize) {
        let mut layers = Vec::with_capacity(widths.len());
        let mut n = nin;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(self.dense(&alloc::format!("{prefix}.{i}"), n, w));
            n = w;
        }
        (layers, n)
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.into()));
        if config.action_dim == 0 {
            return bad("action_dim must be at least 1");
        }
        if config.image_channels == 0 || config.image_height == 0 || config.image_width == 0 {
            return bad("image dimensions must be positive");
        }
        if config.ee_layers.iter().chain(&config.joint_layers).any(|&w| w == 0)
            || config.combined_layers.iter().any(|&w| w == 0)
        {
            return bad("layer widths must be positive");
        }
        if !(config.log_std_min < config.log_std_max) {
            return bad("log_std_min must be below log_std_max");
        }
        let mut b = LayoutBuilder {
            layout: Vec::new(),
            next: 0,
        };
        let (mut c, mut h, mut w) = (config.image_channels, config.image_height, config.image_width);
        let mut conv = Vec::with_capacity(config.conv.len());
        for (i, spec) in config.conv.iter().enumerate() {
            if spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 {
                return bad("conv channels, kernel and stride must be positive");
            }
            if spec.kernel > h || spec.kernel > w {
                return Err(NetworkError::Config(alloc::format!(
                    "conv layer {i} kernel {} exceeds its {h}x{w} input",
                    spec.kernel
                )));
            }
            let ho = (h - spec.kernel) / spec.stride + 1;
            let wo = (w - spec.kernel) / spec.stride + 1;
            let weight = b.add(
                alloc::format!("image.{i}.weight"),
                vec![spec.out_channels, c, spec.kernel, spec.kernel],
            );
            let bias = b.add(alloc::format!("image.{i}.bias"), vec![spec.out_channels]);
            conv.push(ConvLayer {
                cin: c,
                h,
                w,
                cout: spec.out_channels,
                k: spec.kernel,
                s: spec.stride,
                ho,
                wo,
                weight,
                bias,
            });
            (c, h, w) = (spec.out_channels, ho, wo);
        }
        let image_features = c * h * w;
        let (ee, ee_out) = b.mlp("ee", config.ee_dim, &config.ee_layers);
        let (joint, joint_out) = b.mlp("joint", config.joint_dim, &config.joint_layers);
        let (combined, hidden) =
            b.mlp("combined", image_features + ee_out + joint_out, &config.combined_layers);
        let mean_head = b.dense("mean", hidden, config.action_dim);
        let value_head = b.dense("value", hidden, 1);
        let log_std = b.add("log_std".into(), vec![config.action_dim]);
        Ok(Self {
            config,
            conv,
            ee,
            joint,
            combined,
            mean_head,
            value_head,
            log_std,
            param_count: b.next,
            layout: b.layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn layout(&self) -> &[TensorInfo] {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn image_len(&self) -> usize {
        self.config.image_channels * self.config.image_height * self.config.image_width
    }

    /// Scaled-uniform weights, zero biases, log-std at its initial value.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.param_count];
        let mut fill = |offset: usize, n: usize, fan_in: usize, gain: f64| {
            let bound = gain * libm::sqrt(3.0 / fan_in as f64);
            for v in &mut p[offset..offset + n] {
                *v = rng.random_range(-bound..bound);
            }
        };
        for l in &self.conv {
            fill(l.weight, l.cout * l.cin * l.k * l.k, l.cin * l.k * l.k, 1.0);
        }
        for l in self.ee.iter().chain(&self.joint).chain(&self.combined) {
            fill(l.weight, l.nout * l.nin, l.nin, 1.0);
        }
        fill(self.mean_head.weight, self.mean_head.nout * self.mean_head.nin, self.mean_head.nin, 0.1);
        fill(self.value_head.weight, self.value_head.nin, self.value_head.nin, 1.0);
        for v in &mut p[self.log_std..self.log_std + self.config.action_dim] {
            *v = self.config.initial_log_std;
        }
        p
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NetworkError> {
        if params.len() != self.param_count {
            return Err(NetworkError::Shape {
                what: "parameters",
                expected: self.param_count,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Forward pass recording activations into `tape`.
    pub fn forward(&self, params: &[f64], input: &[f64], tape: &mut Tape) -> Result<Output, NetworkError> {
        self.check_params(params)?;
        if input.len() != self.input_dim() {
            return Err(NetworkError::Shape {
                what: "input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        tape.input.clear();
        tape.input.extend_from_slice(input);
        let img = self.image_len();
        let (image, rest) = input.split_at(img);
        let (joints, ee) = rest.split_at(self.config.joint_dim);

        tape.conv.resize_with(self.conv.len(), Vec::new);
        tape.cols.resize_with(self.conv.len(), Vec::new);
        for (i, l) in self.conv.iter().enumerate() {
            let (before, after) = tape.conv.split_at_mut(i);
            let src: &[f64] = if i == 0 { image } else { &before[i - 1] };
            im2col(l, src, &mut tape.cols[i]);
            conv_forward(l, params, &tape.cols[i], &mut after[0]);
        }
        run_mlp(&self.ee, params, ee, &mut tape.ee);
        run_mlp(&self.joint, params, joints, &mut tape.joint);

        tape.concat.clear();
        match tape.conv.last() {
            Some(x) => tape.concat.extend_from_slice(x),
            None => tape.concat.extend_from_slice(image),
        }
        tape.concat.extend_from_slice(tape.ee.last().map_or(ee, |v| v.as_slice()));
        tape.concat.extend_from_slice(tape.joint.last().map_or(joints, |v| v.as_slice()));
        run_mlp(&self.combined, params, &tape.concat, &mut tape.combined);
        let hidden = tape.combined.last().unwrap_or(&tape.concat);

        let mut mean = vec![0.0; self.config.action_dim];
        dense_forward(&self.mean_head, params, hidden, &mut mean);
        let mut value = [0.0];
        dense_forward(&self.value_head, params, hidden, &mut value);
        let log_std = params[self.log_std..self.log_std + self.config.action_dim]
            .iter()
            .map(|&s| s.clamp(self.config.log_std_min, self.config.log_std_max))
            .collect();
        Ok(Output {
            mean,
            log_std,
            value: value[0],
        })
    }

    /// Accumulate parameter gradients for one recorded forward pass into `grad`.
    pub fn backward(&self, params: &[f64], tape: &Tape, up: &OutputGrad, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.param_count);
        let a = self.config.action_dim;
        for i in 0..a {
            let raw = params[self.log_std + i];
            if raw >= self.config.log_std_min && raw <= self.config.log_std_max {
                grad[self.log_std + i] += up.log_std[i];
            }
        }
        let hidden = tape.combined.last().unwrap_or(&tape.concat);
        let mut d_hidden = vec![0.0; hidden.len()];
        dense_backward(&self.mean_head, params, hidden, &up.mean, grad, Some(&mut d_hidden));
        dense_backward(&self.value_head, params, hidden, &[up.value], grad, Some(&mut d_hidden));

        let d_concat = mlp_backward(&self.combined, params, &tape.concat, &tape.combined, d_hidden, grad, true)
            .expect("input gradient requested");

        let img_features = tape.concat.len() - self.branch_width(&self.ee, self.config.ee_dim)
            - self.branch_width(&self.joint, self.config.joint_dim);
        let ee_w = self.branch_width(&self.ee, self.config.ee_dim);
        let d_img = &d_concat[..img_features];
        let d_ee = d_concat[img_features..img_features + ee_w].to_vec();
        let d_joint = d_concat[img_features + ee_w..].to_vec();

        let img = self.image_len();
        let joints = &tape.input[img..img + self.config.joint_dim];
        let ee = &tape.input[img + self.config.joint_dim..];
        mlp_backward(&self.ee, params, ee, &tape.ee, d_ee, grad, false);
        mlp_backward(&self.joint, params, joints, &tape.joint, d_joint, grad, false);

        let mut d_out = d_img.to_vec();
        for i in (0..self.conv.len()).rev() {
            let l = &self.conv[i];
            let out = &tape.conv[i];
            for (d, &y) in d_out.iter_mut().zip(out) {
                *d *= elu_grad_from_output(y);
            }
            let need_input = i > 0;
            let mut d_in = if need_input { vec![0.0; l.in_len()] } else { Vec::new() };
            conv_backward(l, params, &tape.cols[i], &d_out, grad, need_input.then_some(&mut d_in[..]));
            d_out = d_in;
        }
    }

    fn branch_width(&self, layers: &[DenseLayer], input: usize) -> usize {
        layers.last().map_or(input, |l| l.nout)
    }
}

fn dense_forward(l: &DenseLayer, params: &[f64], x: &[f64], out: &mut [f64]) {
    let w = &params[l.weight..l.weight + l.nout * l.nin];
    let b = &params[l.bias..l.bias + l.nout];
    for o in 0..l.nout {
        let row = &w[o * l.nin..(o + 1) * l.nin];
        out[o] = b[o] + dot(row, x);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn dense_backward(
    l: &DenseLayer,
    params: &[f64],
    x: &[f64],
    d_out: &[f64],
    grad: &mut [f64],
    d_in: Option<&mut Vec<f64>>,
) {
    for o in 0..l.nout {
        let g = d_out[o];
        if g == 0.0 {
            continue;
        }
        grad[l.bias + o] += g;
        let row = &mut grad[l.weight + o * l.nin..l.weight + (o + 1) * l.nin];
        for (r, &xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(d_in) = d_in {
        let w = &params[l.weight..l.weight + l.nout * l.nin];
        for o in 0..l.nout {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            for (d, &wi) in d_in.iter_mut().zip(&w[o * l.nin..(o + 1) * l.nin]) {
                *d += g * wi;
            }
        }
    }
}

fn run_mlp(layers: &[DenseLayer], params: &[f64], x: &[f64], acts: &mut Vec<Vec<f64>>) {
    acts.resize_with(layers.len(), Vec::new);
    for (i, l) in layers.iter().enumerate() {
        let (before, after) = acts.split_at_mut(i);
        let src: &[f64] = if i == 0 { x } else { &before[i - 1] };
        let out = &mut after[0];
        out.clear();
        out.resize(l.nout, 0.0);
        dense_forward(l, params, src, out);
        out.iter_mut().for_each(|v| *v = elu(*v));
    }
}

/// Backward through an ELU MLP; returns the gradient at its input when asked.
fn mlp_backward(
    layers: &[DenseLayer],
    params: &[f64],
    x: &[f64],
    acts: &[Vec<f64>],
    mut d_out: Vec<f64>,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        for (d, &y) in d_out.iter_mut().zip(&acts[i]) {
            *d *= elu_grad_from_output(y);
        }
        let src: &[f64] = if i == 0 { x } else { &acts[i - 1] };
        if i == 0 && !want_input {
            dense_backward(l, params, src, &d_out, grad, None);
            return None;
        }
        let mut d_in = vec![0.0; l.nin];
        dense_backward(l, params, src, &d_out, grad, Some(&mut d_in));
        d_out = d_in;
    }
    want_input.then_some(d_out)
}

/// Unfold input patches into rows of `cin * k * k` values, one per output pixel.
fn im2col(l: &ConvLayer, x: &[f64], cols: &mut Vec<f64>) {
    let kdim = l.cin * l.k * l.k;
    cols.clear();
    cols.resize(l.ho * l.wo * kdim, 0.0);
    for oy in 0..l.ho {
        for ox in 0..l.wo {
            let row = &mut cols[(oy * l.wo + ox) * kdim..(oy * l.wo + ox + 1) * kdim];
            let mut i = 0;
            for c in 0..l.cin {
                for ky in 0..l.k {
                    let src = c * l.h * l.w + (oy * l.s + ky) * l.w + ox * l.s;
                    row[i..i + l.k].copy_from_slice(&x[src..src + l.k]);
                    i += l.k;
                }
            }
        }
    }
}

fn conv_forward(l: &ConvLayer, params: &[f64], cols: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(l.out_len(), 0.0);
    let kdim = l.cin * l.k * l.k;
    let hw = l.ho * l.wo;
    for o in 0..l.cout {
        let w = &params[l.weight + o * kdim..l.weight + (o + 1) * kdim];
        let b = params[l.bias + o];
        for p in 0..hw {
            out[o * hw + p] = elu(b + dot(w, &cols[p * kdim..(p + 1) * kdim]));
        }
    }
}

/// `d_out` is the gradient at the pre-activation output.
fn conv_backward(
    l: &ConvLayer,
    params: &[f64],
    cols: &[f64],
    d_out: &[f64],
    grad: &mut [f64],
    d_in: Option<&mut [f64]>,
) {
    let kdim = l.cin * l.k * l.k;
    let hw = l.ho * l.wo;
    for o in 0..l.cout {
        let g = &d_out[o * hw..(o + 1) * hw];
        grad[l.bias + o] += g.iter().sum::<f64>();
        let dw = &mut grad[l.weight + o * kdim..l.weight + (o + 1) * kdim];
        for (p, &gv) in g.iter().enumerate() {
            if gv != 0.0 {
                axpy(gv, &cols[p * kdim..(p + 1) * kdim], dw);
            }
        }
    }
    let Some(d_in) = d_in else { return };
    let mut dcol = vec![0.0; kdim];
    for oy in 0..l.ho {
        for ox in 0..l.wo {
            let p = oy * l.wo + ox;
            dcol.fill(0.0);
            for o in 0..l.cout {
                let gv = d_out[o * hw + p];
                if gv != 0.0 {
                    axpy(gv, &params[l.weight + o * kdim..l.weight + (o + 1) * kdim], &mut dcol);
                }
            }
            let mut i = 0;
            for c in 0..l.cin {
                for ky in 0..l.k {
                    let dst = c * l.h * l.w + (oy * l.s + ky) * l.w + ox * l.s;
                    for (d, v) in d_in[dst..dst + l.k].iter_mut().zip(&dcol[i..i + l.k]) {
                        *d += v;
                    }
                    i += l.k;
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Diagonal-Gaussian log density of `x`.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_8;
    let mut lp = 0.0;
    for i in 0..x.len() {
        let z = (x[i] - mean[i]) * libm::exp(-log_std[i]);
        lp += -0.5 * z * z - log_std[i] - HALF_LOG_TAU;
    }
    lp
}

/// Entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    const HALF_LOG_TAU_E: f64 = 1.418_938_533_204_672_7;
    log_std.iter().map(|s| s + HALF_LOG_TAU_E).sum()
}

/// A Gaussian draw and its log-probability, taken before clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    /// Clipped to `[-1, 1]` per component.
    pub action: Vec<f64>,
    /// Unclipped draw.
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> SampledAction {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(&m, &s)| m + libm::exp(s) * std_normal.sample(rng))
        .collect();
    let log_prob = gaussian_log_prob(&raw, mean, log_std);
    let action = raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    SampledAction {
        action,
        raw,
        log_prob,
    }
}
