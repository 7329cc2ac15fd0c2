//! Transformer building blocks shared by the field network, the semantic
//! language model, and the discrete baseline.
//!
//! Block order (pre-norm, residual around each sub-block):
//! rotary multi-head self-attention, optional depthwise-conv module, GELU FFN.
//! A final layer norm follows the last block.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Rotary, SeqLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub use_conv_block: bool,
    pub conv_kernel: usize,
    pub time_embed_dim: usize,
    pub use_rotary: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::preset(Preset::Tiny)
    }
}

impl NetConfig {
    pub fn preset(p: Preset) -> Self {
        let (layers, hidden_dim, ffn_dim, heads) = match p {
            Preset::Tiny => (2, 64, 256, 4),
            Preset::Small => (4, 128, 512, 4),
            Preset::Base => (6, 256, 1024, 8),
        };
        NetConfig {
            layers,
            hidden_dim,
            ffn_dim,
            heads,
            use_conv_block: true,
            conv_kernel: 5,
            time_embed_dim: 32,
            use_rotary: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(
                "hidden_dim, ffn_dim and heads must be positive".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.use_rotary && (self.hidden_dim / self.heads) % 2 != 0 {
            return Err(Error::InvalidConfig("rotary needs an even head dim".into()));
        }
        if self.use_conv_block && (self.conv_kernel == 0 || self.conv_kernel % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "time_embed_dim must be positive and even".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvParams {
    ln_g: usize,
    ln_b: usize,
    dw_w: usize,
    dw_b: usize,
    pw_w: usize,
    pw_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockParams {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    conv: Option<ConvParams>,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

pub(crate) fn norm(layout: &mut ParamLayout, name: &str, dim: usize) -> (usize, usize) {
    let g = layout.push(format!("{name}.g"), 1, dim, Init::Ones);
    let b = layout.push(format!("{name}.b"), 1, dim, Init::Zeros);
    (g, b)
}

/// Stack of blocks plus the final norm.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    blocks: Vec<BlockParams>,
    final_norm: Option<(usize, usize)>,
    heads: usize,
    rotary: bool,
}

/// How attention sees the stacked sequences.
pub(crate) struct SeqCtx {
    pub layout: Rc<SeqLayout>,
    pub causal: bool,
    pub rotary_offset: usize,
}

impl Trunk {
    pub fn register(layout: &mut ParamLayout, cfg: &NetConfig) -> Trunk {
        let h = cfg.hidden_dim;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("block{i}");
            let (ln1_g, ln1_b) = norm(layout, &format!("{p}.ln1"), h);
            let wq = layout.weight(format!("{p}.attn.wq"), h, h);
            let bq = layout.bias(format!("{p}.attn.bq"), h);
            let wk = layout.weight(format!("{p}.attn.wk"), h, h);
            let bk = layout.bias(format!("{p}.attn.bk"), h);
            let wv = layout.weight(format!("{p}.attn.wv"), h, h);
            let bv = layout.bias(format!("{p}.attn.bv"), h);
            let wo = layout.weight(format!("{p}.attn.wo"), h, h);
            let bo = layout.bias(format!("{p}.attn.bo"), h);
            let conv = cfg.use_conv_block.then(|| {
                let (ln_g, ln_b) = norm(layout, &format!("{p}.conv.ln"), h);
                let k = cfg.conv_kernel;
                let dw_w = layout.push(
                    format!("{p}.conv.dw_w"),
                    k,
                    h,
                    Init::Xavier {
                        fan_in: k,
                        fan_out: k,
                    },
                );
                let dw_b = layout.bias(format!("{p}.conv.dw_b"), h);
                let pw_w = layout.weight(format!("{p}.conv.pw_w"), h, h);
                let pw_b = layout.bias(format!("{p}.conv.pw_b"), h);
                ConvParams {
                    ln_g,
                    ln_b,
                    dw_w,
                    dw_b,
                    pw_w,
                    pw_b,
                }
            });
            let (ln2_g, ln2_b) = norm(layout, &format!("{p}.ln2"), h);
            let w1 = layout.weight(format!("{p}.ffn.w1"), h, cfg.ffn_dim);
            let b1 = layout.bias(format!("{p}.ffn.b1"), cfg.ffn_dim);
            let w2 = layout.weight(format!("{p}.ffn.w2"), cfg.ffn_dim, h);
            let b2 = layout.bias(format!("{p}.ffn.b2"), h);
            blocks.push(BlockParams {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                conv,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm = (cfg.layers > 0).then(|| norm(layout, "final_ln", h));
        Trunk {
            blocks,
            final_norm,
            heads: cfg.heads,
            rotary: cfg.use_rotary,
        }
    }

    /// Number of parameters `register` adds for `cfg`.
    pub fn param_count(cfg: &NetConfig) -> usize {
        let h = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let attn = 4 * (h * h + h);
        let conv = if cfg.use_conv_block {
            2 * h + cfg.conv_kernel * h + h + h * h + h
        } else {
            0
        };
        let ffn = h * f + f + f * h + h;
        let per_block = 2 * h + attn + conv + 2 * h + ffn;
        cfg.layers * per_block + if cfg.layers > 0 { 2 * h } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], mut x: Var, ctx: &SeqCtx) -> Var {
        let rotary = Rotary {
            offset: ctx.rotary_offset,
            ..Rotary::default()
        };
        for b in &self.blocks {
            let hn = tape.layer_norm(x, vars[b.ln1_g], vars[b.ln1_b]);
            let mut q = tape.linear(hn, vars[b.wq], vars[b.bq]);
            let mut k = tape.linear(hn, vars[b.wk], vars[b.bk]);
            let v = tape.linear(hn, vars[b.wv], vars[b.bv]);
            if self.rotary {
                q = tape.rope(q, self.heads, &ctx.layout, rotary);
                k = tape.rope(k, self.heads, &ctx.layout, rotary);
            }
            let a = tape.attention(q, k, v, self.heads, ctx.layout.clone(), ctx.causal);
            let a = tape.linear(a, vars[b.wo], vars[b.bo]);
            x = tape.add(x, a);

            if let Some(c) = &b.conv {
                let hn = tape.layer_norm(x, vars[c.ln_g], vars[c.ln_b]);
                let y = tape.depthwise_conv(hn, vars[c.dw_w], vars[c.dw_b], ctx.layout.clone());
                let y = tape.gelu(y);
                let y = tape.linear(y, vars[c.pw_w], vars[c.pw_b]);
                x = tape.add(x, y);
            }

            let hn = tape.layer_norm(x, vars[b.ln2_g], vars[b.ln2_b]);
            let y = tape.linear(hn, vars[b.w1], vars[b.b1]);
            let y = tape.gelu(y);
            let y = tape.linear(y, vars[b.w2], vars[b.b2]);
            x = tape.add(x, y);
        }
        if let Some((g, b)) = self.final_norm {
            x = tape.layer_norm(x, vars[g], vars[b]);
        }
        x
    }
}
