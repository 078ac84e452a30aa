//! Encoder–decoder backbone with residual blocks, optional single-head
//! self-attention at configured spatial sizes, and an optional sinusoidal
//! timestep pathway.
//!
//! The network is assembled as a flat program of nodes plus an explicit
//! skip stack; the backward pass replays the program in reverse, which keeps
//! the tape a plain `Vec` no matter how deep the configuration goes.

use super::layers::{
    silu, silu_backward, AttnCtx, Conv2d, ConvTranspose2d, GroupNorm, GroupNormStats, Init,
    Linear, ResBlock, ResCtx, SelfAttention,
};
use super::{Float, ParamStore};
use crate::error::{Result, SynthError};
use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::Rng;

/// Architectural description shared by the denoiser and the baseline
/// generator (which drops the timestep pathway).
#[derive(Debug, Clone)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_level: usize,
    pub groups: usize,
    pub attention_resolutions: Vec<usize>,
    pub image_size: usize,
    pub time_embed: bool,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(SynthError::Config("channel counts must be positive".into()));
        }
        if self.base_channels == 0 || self.resblocks_per_level == 0 || self.groups == 0 {
            return Err(SynthError::Config(
                "base_channels, resblocks_per_level, groups must be positive".into(),
            ));
        }
        if self.channel_multipliers.is_empty()
            || self.channel_multipliers.iter().any(|&m| m == 0)
        {
            return Err(SynthError::Config(
                "channel_multipliers must be non-empty and positive".into(),
            ));
        }
        let levels = self.channel_multipliers.len();
        let down_factor = 1usize << (levels - 1);
        if self.image_size == 0 || self.image_size % down_factor != 0 {
            return Err(SynthError::Config(format!(
                "image_size {} must be divisible by 2^(levels-1) = {}",
                self.image_size, down_factor
            )));
        }
        for w in self.groupnorm_widths() {
            if w % self.groups != 0 {
                return Err(SynthError::Config(format!(
                    "groups {} does not divide realized channel width {w}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Every channel width group normalization is applied to, walking the
    /// program exactly as [`UNet::build`] lays it out: residual-block inputs
    /// and outputs (decoder inputs include the concatenated skip), the mid
    /// width, and the head.
    pub fn groupnorm_widths(&self) -> Vec<usize> {
        let base = self.base_channels;
        let r = self.resblocks_per_level;
        let mut widths = Vec::new();
        let mut cur = base;
        let mut skips = Vec::new();
        for &m in &self.channel_multipliers {
            let out = base * m;
            for _ in 0..r {
                widths.push(cur);
                widths.push(out);
                cur = out;
                skips.push(cur);
            }
        }
        widths.push(cur); // mid blocks hold the deepest width
        for l in (0..self.channel_multipliers.len()).rev() {
            let out = base * self.channel_multipliers[l];
            for _ in 0..r {
                let skip = skips.pop().expect("skip bookkeeping");
                widths.push(cur + skip);
                widths.push(out);
                cur = out;
            }
        }
        widths.push(cur); // head norm
        widths
    }

    /// Spatial size at each level, halving between levels.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len())
            .map(|l| self.image_size >> l)
            .collect()
    }
}

enum Node {
    Conv(Conv2d),
    Res(ResBlock),
    Attn(SelfAttention),
    Up(ConvTranspose2d),
    Norm(GroupNorm),
    Silu,
    PushSkip,
    PopConcat,
}

enum NodeCtx<F: Float> {
    Conv { x: Array4<F> },
    Res(Box<ResCtx<F>>),
    Attn { x: Array4<F>, ctx: Box<AttnCtx<F>> },
    Up { x: Array4<F> },
    Norm { x: Array4<F>, stats: GroupNormStats<F> },
    Silu { x: Array4<F> },
    Push,
    Pop { lead: usize },
}

/// Saved activations for one training forward pass.
pub struct Tape<F: Float> {
    node_ctxs: Vec<NodeCtx<F>>,
    sin: Option<Array2<F>>,
    pre0: Option<Array2<F>>,
    s0: Option<Array2<F>>,
    temb: Option<Array2<F>>,
}

pub struct UNet {
    nodes: Vec<Node>,
    lin0: Option<Linear>,
    lin1: Option<Linear>,
    pub spec: ArchSpec,
    /// Spatial size at which each attention node was placed (build-time
    /// introspection; one entry per attention node in program order).
    pub attn_placements: Vec<usize>,
}

/// Sinusoidal embedding of integer timesteps: `dim/2` sine components then
/// `dim/2` cosine components over geometrically spaced frequencies.
pub fn timestep_embedding<F: Float>(t: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let mut out = Array2::<F>::zeros((t.len(), dim));
    for (bi, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
            let arg = tv as f64 * freq;
            out[[bi, i]] = F::from_f64(arg.sin());
            out[[bi, half + i]] = F::from_f64(arg.cos());
        }
    }
    out
}

impl UNet {
    pub fn build<F: Float, R: Rng>(
        spec: ArchSpec,
        ps: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let base = spec.base_channels;
        let groups = spec.groups;
        let levels = spec.channel_multipliers.len();
        let r = spec.resblocks_per_level;
        let temb_dim = spec.time_embed.then_some(4 * base);

        let (lin0, lin1) = if spec.time_embed {
            (
                Some(Linear::new(ps, rng, "temb.lin0", base, 4 * base)),
                Some(Linear::new(ps, rng, "temb.lin1", 4 * base, 4 * base)),
            )
        } else {
            (None, None)
        };

        let mut nodes = Vec::new();
        let mut attn_placements = Vec::new();
        let attn_here = |res: usize| spec.attention_resolutions.contains(&res);

        nodes.push(Node::Conv(Conv2d::new(
            ps,
            rng,
            "stem",
            spec.in_channels,
            base,
            3,
            1,
            1,
            Init::FanIn,
        )));

        let mut cur_ch = base;
        let mut cur_res = spec.image_size;
        let mut skip_chs: Vec<usize> = Vec::new();

        for (l, &m) in spec.channel_multipliers.iter().enumerate() {
            let out_ch = base * m;
            for b in 0..r {
                nodes.push(Node::Res(ResBlock::new(
                    ps,
                    rng,
                    &format!("enc{l}.res{b}"),
                    cur_ch,
                    out_ch,
                    groups,
                    temb_dim,
                )));
                cur_ch = out_ch;
                if attn_here(cur_res) {
                    nodes.push(Node::Attn(SelfAttention::new(
                        ps,
                        rng,
                        &format!("enc{l}.attn{b}"),
                        cur_ch,
                        groups,
                    )));
                    attn_placements.push(cur_res);
                }
                nodes.push(Node::PushSkip);
                skip_chs.push(cur_ch);
            }
            if l < levels - 1 {
                nodes.push(Node::Conv(Conv2d::new(
                    ps,
                    rng,
                    &format!("down{l}"),
                    cur_ch,
                    cur_ch,
                    3,
                    2,
                    1,
                    Init::FanIn,
                )));
                cur_res /= 2;
            }
        }

        nodes.push(Node::Res(ResBlock::new(
            ps, rng, "mid.res0", cur_ch, cur_ch, groups, temb_dim,
        )));
        if attn_here(cur_res) {
            nodes.push(Node::Attn(SelfAttention::new(
                ps, rng, "mid.attn", cur_ch, groups,
            )));
            attn_placements.push(cur_res);
        }
        nodes.push(Node::Res(ResBlock::new(
            ps, rng, "mid.res1", cur_ch, cur_ch, groups, temb_dim,
        )));

        for l in (0..levels).rev() {
            let out_ch = base * spec.channel_multipliers[l];
            for b in 0..r {
                let skip_ch = skip_chs.pop().expect("skip bookkeeping");
                nodes.push(Node::PopConcat);
                nodes.push(Node::Res(ResBlock::new(
                    ps,
                    rng,
                    &format!("dec{l}.res{b}"),
                    cur_ch + skip_ch,
                    out_ch,
                    groups,
                    temb_dim,
                )));
                cur_ch = out_ch;
                if attn_here(cur_res) {
                    nodes.push(Node::Attn(SelfAttention::new(
                        ps,
                        rng,
                        &format!("dec{l}.attn{b}"),
                        cur_ch,
                        groups,
                    )));
                    attn_placements.push(cur_res);
                }
            }
            if l > 0 {
                nodes.push(Node::Up(ConvTranspose2d::new(
                    ps,
                    rng,
                    &format!("up{l}"),
                    cur_ch,
                    cur_ch,
                )));
                cur_res *= 2;
            }
        }
        debug_assert!(skip_chs.is_empty());

        nodes.push(Node::Norm(GroupNorm::new(ps, "head.norm", cur_ch, groups)));
        nodes.push(Node::Silu);
        nodes.push(Node::Conv(Conv2d::new(
            ps,
            rng,
            "head.conv",
            cur_ch,
            spec.out_channels,
            3,
            1,
            1,
            Init::Zero,
        )));

        Ok(Self {
            nodes,
            lin0,
            lin1,
            spec,
            attn_placements,
        })
    }

    fn check_input<F: Float>(&self, x: &Array4<F>, t: Option<&[usize]>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(SynthError::Config(format!(
                "input has {c} channels, network expects {}",
                self.spec.in_channels
            )));
        }
        let down_factor = 1usize << (self.spec.channel_multipliers.len() - 1);
        if h == 0 || w == 0 || h % down_factor != 0 || w % down_factor != 0 {
            return Err(SynthError::Shape(format!(
                "spatial size {h}x{w} not divisible by {down_factor}"
            )));
        }
        match (self.spec.time_embed, t) {
            (true, Some(ts)) if ts.len() == n => Ok(()),
            (true, Some(ts)) => Err(SynthError::Shape(format!(
                "got {} timesteps for batch of {n}",
                ts.len()
            ))),
            (true, None) => Err(SynthError::Config(
                "network has a timestep pathway but no timesteps given".into(),
            )),
            (false, Some(_)) => Err(SynthError::Config(
                "network has no timestep pathway but timesteps were given".into(),
            )),
            (false, None) => Ok(()),
        }
    }

    fn run<F: Float>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        t: Option<&[usize]>,
        mut tape: Option<&mut Tape<F>>,
    ) -> Result<Array4<F>> {
        self.check_input(x, t)?;

        let temb = if self.spec.time_embed {
            let sin = timestep_embedding::<F>(t.unwrap(), self.spec.base_channels);
            let pre0 = self.lin0.as_ref().unwrap().forward(ps, &sin);
            let s0 = silu(&pre0);
            let te = self.lin1.as_ref().unwrap().forward(ps, &s0);
            if let Some(tp) = tape.as_deref_mut() {
                tp.sin = Some(sin);
                tp.pre0 = Some(pre0);
                tp.s0 = Some(s0);
                tp.temb = Some(te.clone());
            }
            Some(te)
        } else {
            None
        };

        let mut h = x.clone();
        let mut skips: Vec<Array4<F>> = Vec::new();

        for node in &self.nodes {
            match node {
                Node::Conv(c) => {
                    let y = c.forward(ps, &h);
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Conv { x: h });
                    }
                    h = y;
                }
                Node::Res(rb) => {
                    let (y, ctx) = rb.forward(ps, h, temb.as_ref());
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Res(Box::new(ctx)));
                    }
                    h = y;
                }
                Node::Attn(at) => {
                    let (y, ctx) = at.forward(ps, &h);
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Attn {
                            x: h,
                            ctx: Box::new(ctx),
                        });
                    }
                    h = y;
                }
                Node::Up(u) => {
                    let y = u.forward(ps, &h);
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Up { x: h });
                    }
                    h = y;
                }
                Node::Norm(gn) => {
                    let (y, stats) = gn.forward(ps, &h);
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Norm { x: h, stats });
                    }
                    h = y;
                }
                Node::Silu => {
                    let y = silu(&h);
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Silu { x: h });
                    }
                    h = y;
                }
                Node::PushSkip => {
                    skips.push(h.clone());
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Push);
                    }
                }
                Node::PopConcat => {
                    let sk = skips.pop().expect("skip stack underflow");
                    let lead = h.dim().1;
                    let cat = concatenate(Axis(1), &[h.view(), sk.view()])
                        .expect("concat shapes");
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.node_ctxs.push(NodeCtx::Pop { lead });
                    }
                    h = cat;
                }
            }
        }

        for &v in h.iter() {
            if !v.to_f64().is_finite() {
                return Err(SynthError::Numeric(
                    "non-finite activation in network output".into(),
                ));
            }
        }
        Ok(h)
    }

    /// Inference-only forward; nothing is saved.
    pub fn infer<F: Float>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        t: Option<&[usize]>,
    ) -> Result<Array4<F>> {
        self.run(ps, x, t, None)
    }

    /// Training forward returning the activation tape for [`Self::backward`].
    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        t: Option<&[usize]>,
    ) -> Result<(Array4<F>, Tape<F>)> {
        let mut tape = Tape {
            node_ctxs: Vec::with_capacity(self.nodes.len()),
            sin: None,
            pre0: None,
            s0: None,
            temb: None,
        };
        let y = self.run(ps, x, t, Some(&mut tape))?;
        Ok((y, tape))
    }

    /// Accumulate parameter gradients for `dy` and return the input
    /// gradient. Consumes the tape, freeing activations as it unwinds.
    pub fn backward<F: Float>(
        &self,
        ps: &mut ParamStore<F>,
        tape: Tape<F>,
        dy: &Array4<F>,
    ) -> Result<Array4<F>> {
        if tape.node_ctxs.len() != self.nodes.len() {
            return Err(SynthError::Parameter(
                "tape does not match network program".into(),
            ));
        }
        let temb = tape.temb;
        let mut dtemb_acc: Option<Array2<F>> = None;
        let mut dh = dy.clone();
        let mut dskips: Vec<Array4<F>> = Vec::new();

        for (node, ctx) in self
            .nodes
            .iter()
            .rev()
            .zip(tape.node_ctxs.into_iter().rev())
        {
            match (node, ctx) {
                (Node::Conv(c), NodeCtx::Conv { x }) => {
                    dh = c.backward(ps, &x, &dh);
                }
                (Node::Res(rb), NodeCtx::Res(rctx)) => {
                    let (dx, dt) = rb.backward(ps, &rctx, temb.as_ref(), &dh);
                    dh = dx;
                    if self.spec.time_embed {
                        match &mut dtemb_acc {
                            Some(acc) => *acc += &dt,
                            None => dtemb_acc = Some(dt),
                        }
                    }
                }
                (Node::Attn(at), NodeCtx::Attn { x, ctx }) => {
                    dh = at.backward(ps, &x, &ctx, &dh);
                }
                (Node::Up(u), NodeCtx::Up { x }) => {
                    dh = u.backward(ps, &x, &dh);
                }
                (Node::Norm(gn), NodeCtx::Norm { x, stats }) => {
                    dh = gn.backward(ps, &x, &stats, &dh);
                }
                (Node::Silu, NodeCtx::Silu { x }) => {
                    dh = silu_backward(&x, &dh);
                }
                (Node::PushSkip, NodeCtx::Push) => {
                    let dsk = dskips.pop().expect("skip-grad stack underflow");
                    dh += &dsk;
                }
                (Node::PopConcat, NodeCtx::Pop { lead }) => {
                    let dlead = dh.slice(s![.., ..lead, .., ..]).to_owned();
                    let dskip = dh.slice(s![.., lead.., .., ..]).to_owned();
                    dskips.push(dskip);
                    dh = dlead;
                }
                _ => {
                    return Err(SynthError::Parameter(
                        "tape entry does not match node kind".into(),
                    ))
                }
            }
        }
        debug_assert!(dskips.is_empty());

        if self.spec.time_embed {
            let dtemb = dtemb_acc.expect("conditioned network has res blocks");
            let s0 = tape.s0.expect("tape temb activations");
            let pre0 = tape.pre0.expect("tape temb activations");
            let sin = tape.sin.expect("tape temb activations");
            let ds0 = self.lin1.as_ref().unwrap().backward(ps, &s0, &dtemb);
            let dpre0 = silu_backward(&pre0, &ds0);
            let _ = self.lin0.as_ref().unwrap().backward(ps, &sin, &dpre0);
        }
        Ok(dh)
    }
}
