//! The UNet noise predictor.
//!
//! Three stages over the frame axis — Down, Mid, Up — each built from two
//! ResNet blocks and two multi-head self-attention blocks in series. A single
//! stride-2 convolution halves the 80 frames to 40 between Down and Mid; a
//! transposed convolution doubles them back, concatenating the Down-stage
//! skip. All convolutions act along frames only and keep the 12 frequency
//! rows untouched. The denoising step index enters through a sinusoidal
//! embedding, mapped by a small perceptron to a learned per-channel shift
//! inside every ResNet block.
//!
//! Parameters live in one flat vector with a named-tensor index; gradients
//! are computed by hand-derived reverse-mode passes layer by layer, which
//! keeps them exact (finite differences agree to ~1e-6 relative) without an
//! autodiff dependency.

mod kernels;
mod layers;
mod layout;

pub use layout::{ParamLayout, TensorId, TensorSpec};

use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::spectral::{Spectrogram, CHANNELS};

use layers::{
    linear_backward, linear_forward, silu_vec, silu_vec_backward, Attention, AttentionCtx, Conv,
    ConvCtx, ConvTranspose, ConvTransposeCtx, GroupNorm, ResBlock, ResBlockCtx,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Spectrogram channels; must equal 12.
    pub in_channels: usize,
    pub base_channels: usize,
    pub attention_heads: usize,
    pub embedding_dim: usize,
    pub norm_groups: usize,
    /// Convolution extent along frames.
    pub kernel: usize,
}

impl UNetConfig {
    /// Paper-scale defaults: 32 base channels, 4 heads, 8 groups, 128-dim
    /// embedding, kernel 3.
    pub fn full() -> UNetConfig {
        UNetConfig {
            in_channels: CHANNELS,
            base_channels: 32,
            attention_heads: 4,
            embedding_dim: 128,
            norm_groups: 8,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != CHANNELS {
            return Err(Error::Config(format!(
                "in_channels must be {CHANNELS}, got {}",
                self.in_channels
            )));
        }
        if self.base_channels == 0
            || self.base_channels % self.attention_heads != 0
            || self.base_channels % self.norm_groups != 0
        {
            return Err(Error::Config(format!(
                "base_channels {} must be divisible by attention_heads {} and norm_groups {}",
                self.base_channels, self.attention_heads, self.norm_groups
            )));
        }
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding_dim must be positive and even, got {}",
                self.embedding_dim
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel extent must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Sinusoidal step embedding: components i < dim/2 hold sin(t / 10000^(i/dim)),
/// the rest cos with the same divisors.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let divisor = 10000f64.powf(i as f64 / dim as f64);
        let arg = t as f64 / divisor;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    FanInUniform(usize),
    Ones,
    Zeros,
}

struct NetBuilder {
    layout: ParamLayout,
    inits: Vec<InitKind>,
}

impl NetBuilder {
    fn new() -> NetBuilder {
        NetBuilder {
            layout: ParamLayout::default(),
            inits: Vec::new(),
        }
    }

    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> TensorId {
        let id = self.layout.add(name, shape);
        self.inits.push(InitKind::FanInUniform(fan_in));
        id
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> TensorId {
        let id = self.layout.add(name, shape);
        self.inits.push(InitKind::Zeros);
        id
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> TensorId {
        let id = self.layout.add(name, shape);
        self.inits.push(InitKind::Ones);
        id
    }

    fn group_norm(&mut self, prefix: &str, channels: usize, groups: usize) -> GroupNorm {
        GroupNorm {
            gamma: self.ones(format!("{prefix}.gamma"), &[channels]),
            beta: self.zeros(format!("{prefix}.beta"), &[channels]),
            channels,
            groups,
        }
    }

    fn conv_same(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        let w = self.weight(format!("{prefix}.w"), &[c_out, c_in, k], c_in * k);
        let b = self.zeros(format!("{prefix}.b"), &[c_out]);
        Conv::same(w, b, c_in, c_out, k)
    }

    fn res_block(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        cfg: &UNetConfig,
    ) -> ResBlock {
        let gn1 = self.group_norm(&format!("{prefix}.gn1"), c_in, cfg.norm_groups);
        let conv1 = self.conv_same(&format!("{prefix}.conv1"), c_in, c_out, cfg.kernel);
        let emb_w = self.weight(
            format!("{prefix}.emb.w"),
            &[c_out, cfg.embedding_dim],
            cfg.embedding_dim,
        );
        let emb_b = self.zeros(format!("{prefix}.emb.b"), &[c_out]);
        let gn2 = self.group_norm(&format!("{prefix}.gn2"), c_out, cfg.norm_groups);
        let conv2 = self.conv_same(&format!("{prefix}.conv2"), c_out, c_out, cfg.kernel);
        let shortcut = if c_in != c_out {
            Some(self.conv_same(&format!("{prefix}.shortcut"), c_in, c_out, 1))
        } else {
            None
        };
        ResBlock {
            gn1,
            conv1,
            emb_w,
            emb_b,
            gn2,
            conv2,
            shortcut,
            c_out,
            emb_dim: cfg.embedding_dim,
        }
    }

    fn attention(&mut self, prefix: &str, channels: usize, cfg: &UNetConfig) -> Attention {
        let norm = self.group_norm(&format!("{prefix}.gn"), channels, cfg.norm_groups);
        let mut proj = |name: &str| -> (TensorId, TensorId) {
            let w = self.weight(format!("{prefix}.{name}.w"), &[channels, channels], channels);
            let b = self.zeros(format!("{prefix}.{name}.b"), &[channels]);
            (w, b)
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("out");
        Attention {
            norm,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads: cfg.attention_heads,
        }
    }
}

/// Static layer graph derived from a config.
struct UNet {
    layout: ParamLayout,
    inits: Vec<InitKind>,
    time_w: TensorId,
    time_b: TensorId,
    in_proj: Conv,
    down_res1: ResBlock,
    down_attn1: Attention,
    down_res2: ResBlock,
    down_attn2: Attention,
    pool: Conv,
    mid_res1: ResBlock,
    mid_attn1: Attention,
    mid_res2: ResBlock,
    mid_attn2: Attention,
    expand: ConvTranspose,
    up_res1: ResBlock,
    up_attn1: Attention,
    up_res2: ResBlock,
    up_attn2: Attention,
    out_proj: Conv,
}

impl UNet {
    fn build(cfg: &UNetConfig) -> Result<UNet> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let c1 = 2 * c0;
        let mut b = NetBuilder::new();

        let time_w = b.weight(
            "time.lin.w".into(),
            &[cfg.embedding_dim, cfg.embedding_dim],
            cfg.embedding_dim,
        );
        let time_b = b.zeros("time.lin.b".into(), &[cfg.embedding_dim]);

        let in_proj = b.conv_same("in_proj", cfg.in_channels, c0, cfg.kernel);

        let down_res1 = b.res_block("down.res1", c0, c0, cfg);
        let down_attn1 = b.attention("down.attn1", c0, cfg);
        let down_res2 = b.res_block("down.res2", c0, c0, cfg);
        let down_attn2 = b.attention("down.attn2", c0, cfg);
        let pool = {
            let w = b.weight("down.pool.w".into(), &[c1, c0, cfg.kernel], c0 * cfg.kernel);
            let bias = b.zeros("down.pool.b".into(), &[c1]);
            Conv::halving(w, bias, c0, c1, cfg.kernel)
        };

        let mid_res1 = b.res_block("mid.res1", c1, c1, cfg);
        let mid_attn1 = b.attention("mid.attn1", c1, cfg);
        let mid_res2 = b.res_block("mid.res2", c1, c1, cfg);
        let mid_attn2 = b.attention("mid.attn2", c1, cfg);

        let expand = {
            let w = b.weight("up.expand.w".into(), &[c0, c1, 4], c1 * 4);
            let bias = b.zeros("up.expand.b".into(), &[c0]);
            ConvTranspose::doubling(w, bias, c1, c0)
        };

        let up_res1 = b.res_block("up.res1", 2 * c0, c0, cfg);
        let up_attn1 = b.attention("up.attn1", c0, cfg);
        let up_res2 = b.res_block("up.res2", c0, c0, cfg);
        let up_attn2 = b.attention("up.attn2", c0, cfg);

        let out_proj = {
            let w = b.zeros(
                "out_proj.w".into(),
                &[cfg.in_channels, c0, cfg.kernel],
            );
            let bias = b.zeros("out_proj.b".into(), &[cfg.in_channels]);
            Conv::same(w, bias, c0, cfg.in_channels, cfg.kernel)
        };

        Ok(UNet {
            layout: b.layout,
            inits: b.inits,
            time_w,
            time_b,
            in_proj,
            down_res1,
            down_attn1,
            down_res2,
            down_attn2,
            pool,
            mid_res1,
            mid_attn1,
            mid_res2,
            mid_attn2,
            expand,
            up_res1,
            up_attn1,
            up_res2,
            up_attn2,
            out_proj,
        })
    }
}

/// UNet parameters plus the step-count the model was trained for.
pub struct DenoiserModel {
    pub config: UNetConfig,
    pub t_steps: usize,
    pub params: Vec<f64>,
    net: UNet,
}

impl Clone for DenoiserModel {
    fn clone(&self) -> Self {
        DenoiserModel {
            config: self.config,
            t_steps: self.t_steps,
            params: self.params.clone(),
            net: UNet::build(&self.config).expect("config was already validated"),
        }
    }
}

impl std::fmt::Debug for DenoiserModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserModel")
            .field("config", &self.config)
            .field("t_steps", &self.t_steps)
            .field("parameters", &self.params.len())
            .finish()
    }
}

impl DenoiserModel {
    /// Fresh model with fan-in-scaled uniform weights and a zeroed output
    /// projection.
    pub fn init(config: UNetConfig, t_steps: usize, seed: u64) -> Result<DenoiserModel> {
        let net = UNet::build(&config)?;
        let mut params = vec![0.0; net.layout.total_len()];
        let mut rng = substream(seed, &["unet-init"]);
        for (spec, init) in net.layout.tensors().iter().zip(&net.inits) {
            let slot = &mut params[spec.offset..spec.offset + spec.len];
            match init {
                InitKind::Zeros => {}
                InitKind::Ones => slot.fill(1.0),
                InitKind::FanInUniform(fan_in) => {
                    let bound = 1.0 / (*fan_in as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        Ok(DenoiserModel {
            config,
            t_steps,
            params,
            net,
        })
    }

    /// Rebuild a model around an existing parameter vector (checkpoint load).
    pub fn from_params(
        config: UNetConfig,
        t_steps: usize,
        params: Vec<f64>,
    ) -> Result<DenoiserModel> {
        let net = UNet::build(&config)?;
        net.layout.check_flat(&params)?;
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("parameters contain non-finite values".into()));
        }
        Ok(DenoiserModel {
            config,
            t_steps,
            params,
            net,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.net.layout
    }
}

/// Total parameter count implied by a config.
pub fn parameter_count(config: &UNetConfig) -> Result<usize> {
    Ok(UNet::build(config)?.layout.total_len())
}

/// Forward-pass context retained for the backward pass.
pub struct Tape {
    te: Vec<f64>,
    emb_pre: Vec<f64>,
    emb: Vec<f64>,
    in_proj: ConvCtx,
    down_res1: ResBlockCtx,
    down_attn1: AttentionCtx,
    down_res2: ResBlockCtx,
    down_attn2: AttentionCtx,
    pool: ConvCtx,
    mid_res1: ResBlockCtx,
    mid_attn1: AttentionCtx,
    mid_res2: ResBlockCtx,
    mid_attn2: AttentionCtx,
    expand: ConvTransposeCtx,
    up_res1: ResBlockCtx,
    up_attn1: AttentionCtx,
    up_res2: ResBlockCtx,
    up_attn2: AttentionCtx,
    out_proj: ConvCtx,
}

fn check_step(model: &DenoiserModel, t: usize) -> Result<()> {
    if t >= model.t_steps {
        return Err(Error::Domain(format!(
            "step {t} out of range [0, {})",
            model.t_steps
        )));
    }
    Ok(())
}

/// Predict the noise in `x_t` at step `t`, keeping the tape for [`backward`].
pub fn forward_with_tape(
    model: &DenoiserModel,
    x_t: &Spectrogram,
    t: usize,
) -> Result<(Spectrogram, Tape)> {
    check_step(model, t)?;
    let net = &model.net;
    let layout = &net.layout;
    let p = model.params.as_slice();
    let cfg = &model.config;

    let te = time_embedding(t, cfg.embedding_dim);
    let emb_pre = linear_forward(layout, p, net.time_w, net.time_b, &te, cfg.embedding_dim);
    let emb = silu_vec(&emb_pre);

    let (h, in_proj) = net.in_proj.forward(layout, p, &x_t.data);
    let (h, down_res1) = net.down_res1.forward(layout, p, &h, &emb);
    let (h, down_attn1) = net.down_attn1.forward(layout, p, &h);
    let (h, down_res2) = net.down_res2.forward(layout, p, &h, &emb);
    let (skip, down_attn2) = net.down_attn2.forward(layout, p, &h);
    let (h, pool) = net.pool.forward(layout, p, &skip);
    let (h, mid_res1) = net.mid_res1.forward(layout, p, &h, &emb);
    let (h, mid_attn1) = net.mid_attn1.forward(layout, p, &h);
    let (h, mid_res2) = net.mid_res2.forward(layout, p, &h, &emb);
    let (h, mid_attn2) = net.mid_attn2.forward(layout, p, &h);
    let (up, expand) = net.expand.forward(layout, p, &h);

    // Concatenate the upsampled path with the Down-stage skip along channels.
    let c0 = cfg.base_channels;
    let (_, f_dim, t_dim) = up.dim();
    let mut cat = Array3::zeros((2 * c0, f_dim, t_dim));
    cat.slice_mut(ndarray::s![..c0, .., ..]).assign(&up);
    cat.slice_mut(ndarray::s![c0.., .., ..]).assign(&skip);

    let (h, up_res1) = net.up_res1.forward(layout, p, &cat, &emb);
    let (h, up_attn1) = net.up_attn1.forward(layout, p, &h);
    let (h, up_res2) = net.up_res2.forward(layout, p, &h, &emb);
    let (h, up_attn2) = net.up_attn2.forward(layout, p, &h);
    let (out, out_proj) = net.out_proj.forward(layout, p, &h);

    Ok((
        Spectrogram { data: out },
        Tape {
            te,
            emb_pre,
            emb,
            in_proj,
            down_res1,
            down_attn1,
            down_res2,
            down_attn2,
            pool,
            mid_res1,
            mid_attn1,
            mid_res2,
            mid_attn2,
            expand,
            up_res1,
            up_attn1,
            up_res2,
            up_attn2,
            out_proj,
        },
    ))
}

/// Predict the noise in `x_t` at step `t`.
pub fn forward(model: &DenoiserModel, x_t: &Spectrogram, t: usize) -> Result<Spectrogram> {
    forward_with_tape(model, x_t, t).map(|(out, _)| out)
}

/// Reverse-mode pass: gradient of a scalar loss with respect to every
/// parameter, given d(loss)/d(output).
pub fn backward(model: &DenoiserModel, tape: &Tape, d_out: &Array3<f64>) -> Vec<f64> {
    let net = &model.net;
    let layout = &net.layout;
    let p = model.params.as_slice();
    let cfg = &model.config;
    let c0 = cfg.base_channels;
    let mut grads = vec![0.0; layout.total_len()];
    let mut demb = vec![0.0; cfg.embedding_dim];

    let d = net
        .out_proj
        .backward(layout, p, &tape.out_proj, d_out, &mut grads);
    let d = net
        .up_attn2
        .backward(layout, p, &tape.up_attn2, &d, &mut grads);
    let d = net.up_res2.backward(
        layout,
        p,
        &tape.up_res2,
        &d,
        &tape.emb,
        &mut demb,
        &mut grads,
    );
    let d = net
        .up_attn1
        .backward(layout, p, &tape.up_attn1, &d, &mut grads);
    let d_cat = net.up_res1.backward(
        layout,
        p,
        &tape.up_res1,
        &d,
        &tape.emb,
        &mut demb,
        &mut grads,
    );

    let d_up = d_cat.slice(ndarray::s![..c0, .., ..]).to_owned();
    let d_skip_from_cat = d_cat.slice(ndarray::s![c0.., .., ..]).to_owned();

    let d = net
        .expand
        .backward(layout, p, &tape.expand, &d_up, &mut grads);
    let d = net
        .mid_attn2
        .backward(layout, p, &tape.mid_attn2, &d, &mut grads);
    let d = net.mid_res2.backward(
        layout,
        p,
        &tape.mid_res2,
        &d,
        &tape.emb,
        &mut demb,
        &mut grads,
    );
    let d = net
        .mid_attn1
        .backward(layout, p, &tape.mid_attn1, &d, &mut grads);
    let d = net.mid_res1.backward(
        layout,
        p,
        &tape.mid_res1,
        &d,
        &tape.emb,
        &mut demb,
        &mut grads,
    );
    let mut d_skip = net.pool.backward(layout, p, &tape.pool, &d, &mut grads);
    d_skip += &d_skip_from_cat;

    let d = net
        .down_attn2
        .backward(layout, p, &tape.down_attn2, &d_skip, &mut grads);
    let d = net.down_res2.backward(
        layout,
        p,
        &tape.down_res2,
        &d,
        &tape.emb,
        &mut demb,
        &mut grads,
    );
    let d = net
        .down_attn1
        .backward(layout, p, &tape.down_attn1, &d, &mut grads);
    let d = net.down_res1.backward(
        layout,
        p,
        &tape.down_res1,
        &d,
        &tape.emb,
        &mut demb,
        &mut grads,
    );
    let _dx = net
        .in_proj
        .backward(layout, p, &tape.in_proj, &d, &mut grads);

    // Embedding pathway: through the shared SiLU and linear layer.
    let d_pre = silu_vec_backward(&tape.emb_pre, &demb);
    let _dte = linear_backward(
        layout,
        p,
        net.time_w,
        net.time_b,
        &tape.te,
        &d_pre,
        &mut grads,
    );
    grads
}

/// Mean loss and mean parameter gradient over a batch.
///
/// `loss` maps (batch index, prediction) to the per-sample scalar loss and
/// d(loss)/d(prediction). Samples are evaluated in parallel; the reduction
/// order is fixed so parallel and serial runs agree exactly.
pub fn gradient<F>(
    model: &DenoiserModel,
    batch: &[(Spectrogram, usize)],
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &Spectrogram) -> (f64, Array3<f64>) + Sync,
{
    if batch.is_empty() {
        return Err(Error::Config("gradient needs a non-empty batch".into()));
    }
    let per_sample: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x_t, t))| {
            let (pred, tape) = forward_with_tape(model, x_t, *t)?;
            let (l, d_out) = loss(i, &pred);
            if !l.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {l} on batch element {i}"
                )));
            }
            Ok((l, backward(model, &tape, &d_out)))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = vec![0.0; model.net.layout.total_len()];
    for item in per_sample {
        let (l, g) = item?;
        total_loss += l * scale;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v * scale;
        }
    }
    Ok((total_loss, grads))
}

#[cfg(test)]
mod tests;
