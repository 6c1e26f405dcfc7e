//! Score network: a small U-Net over real/imaginary STFT planes.
//!
//! Input planes are the current state `s_t` (2 planes) followed by the
//! conditioner: the cross-channel attention expansion of the `M` noisy
//! channels (`2M - 1` channels of 2 planes), their plain concatenation when
//! attention is off, or the reference alone for `M = 1`. Every stage is
//! `3x3 conv -> group norm -> + time bias -> ReLU`; the bottleneck splits its
//! features into `M` groups and applies the attention block again.

use rand::{Rng, SeedableRng};

use crate::attention::{cross_channel_attention_var, AttentionParams, AttentionVars};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::sde::{std, SdeParams};
use crate::tensor::Tensor;

/// Sinusoidal embedding of the diffusion time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    /// Highest angular frequency; frequencies are geometric from 1 to `scale`.
    pub scale: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding { dim: 64, scale: 100.0 }
    }
}

impl TimeEmbedding {
    pub fn embed(&self, t: f64) -> Tensor {
        let half = self.dim / 2;
        let denom = (half.max(2) - 1) as f64;
        Tensor::from_fn(&[self.dim], |i| {
            let k = i % half;
            let w = self.scale.powf(k as f64 / denom);
            if i < half {
                (w * t).sin()
            } else {
                (w * t).cos()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub num_mics: usize,
    /// Number of encoder/decoder stages (E).
    pub levels: usize,
    pub base_width: usize,
    pub attention: bool,
    pub attention_hidden: usize,
    /// Tie the auxiliary-channel attention branches.
    pub shared_aux: bool,
    pub time_embedding: TimeEmbedding,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            num_mics: 4,
            levels: 2,
            base_width: 32,
            attention: true,
            attention_hidden: 8,
            shared_aux: false,
            time_embedding: TimeEmbedding::default(),
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.num_mics == 0 {
            return Err(Error::invalid("num_mics must be at least 1"));
        }
        if self.levels == 0 || self.levels > 4 {
            return Err(Error::invalid(format!("levels must be in 1..=4, got {}", self.levels)));
        }
        if self.base_width < 2 || self.attention_hidden == 0 {
            return Err(Error::invalid("base_width must be >= 2 and attention_hidden >= 1"));
        }
        let d = self.time_embedding.dim;
        if d < 2 || !d.is_multiple_of(2) || self.time_embedding.scale <= 0.0 {
            return Err(Error::invalid(format!(
                "time embedding dim must be even and >= 2, got {d}"
            )));
        }
        Ok(())
    }

    fn uses_attention(&self) -> bool {
        self.attention && self.num_mics >= 2
    }

    /// Spatial sizes must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn stage_width(&self, i: usize) -> usize {
        self.base_width << i
    }

    /// Bottleneck width, rounded up so it splits into `num_mics` groups.
    pub fn bottleneck_width(&self) -> usize {
        let c = self.stage_width(self.levels - 1);
        if self.uses_attention() {
            c.div_ceil(self.num_mics) * self.num_mics
        } else {
            c
        }
    }

    /// Conditioner channels (each of 2 planes).
    pub fn conditioner_channels(&self) -> usize {
        if self.uses_attention() {
            2 * self.num_mics - 1
        } else {
            self.num_mics
        }
    }

    pub fn input_planes(&self) -> usize {
        2 + 2 * self.conditioner_channels()
    }
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|&g| c.is_multiple_of(g) && c / g >= 2)
        .unwrap_or(1)
}

fn he(shape: &[usize], fan_in: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    Tensor::randn(shape, rng).scaled((2.0 / fan_in as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub arch: Architecture,
    pub params: ParamSet,
}

/// A 3x3 conv stage with group norm and time bias.
fn stage_params(
    set: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    temb: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<()> {
    set.insert(format!("{name}.w"), he(&[cout, cin, 3, 3], cin * 9, rng))?;
    set.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    set.insert(format!("{name}.gn.g"), Tensor::full(&[cout], 1.0))?;
    set.insert(format!("{name}.gn.b"), Tensor::zeros(&[cout]))?;
    set.insert(format!("{name}.t.w"), he(&[cout, temb], temb, rng))?;
    set.insert(format!("{name}.t.b"), Tensor::zeros(&[cout]))
}

impl ScoreNet {
    /// He-initialized weights, zero biases, zero output conv.
    pub fn init(arch: Architecture, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        arch.validate()?;
        let d = arch.time_embedding.dim;
        let mut set = ParamSet::new();
        set.insert("temb.w", he(&[d, d], d, rng))?;
        set.insert("temb.b", Tensor::zeros(&[d]))?;
        if arch.uses_attention() {
            AttentionParams::init(arch.num_mics, 2, arch.attention_hidden, arch.shared_aux, rng)
                .insert_into(&mut set, "in_attn.")?;
        }
        let w0 = arch.stage_width(0);
        stage_params(&mut set, "in", arch.input_planes(), w0, d, rng)?;
        let mut prev = w0;
        for i in 0..arch.levels {
            let c = arch.stage_width(i);
            stage_params(&mut set, &format!("enc{i}"), prev, c, d, rng)?;
            prev = c;
        }
        let cb = arch.bottleneck_width();
        stage_params(&mut set, "mid", prev, cb, d, rng)?;
        if arch.uses_attention() {
            let group = cb / arch.num_mics;
            AttentionParams::init(arch.num_mics, group, arch.attention_hidden, arch.shared_aux, rng)
                .insert_into(&mut set, "mid_attn.")?;
            let expanded = (2 * arch.num_mics - 1) * group;
            set.insert("mid.fuse.w", he(&[cb, expanded], expanded, rng))?;
            set.insert("mid.fuse.b", Tensor::zeros(&[cb]))?;
        }
        let mut up = cb;
        for i in (0..arch.levels).rev() {
            let c = arch.stage_width(i);
            stage_params(&mut set, &format!("dec{i}"), up + c, c, d, rng)?;
            up = c;
        }
        set.insert("out.w", Tensor::zeros(&[2, w0, 3, 3]))?;
        set.insert("out.b", Tensor::zeros(&[2]))?;
        Ok(ScoreNet { arch, params: set })
    }

    /// Same layout as [`ScoreNet::init`] with every tensor zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let net = Self::init(arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        Ok(ScoreNet {
            params: net.params.zeros_like(),
            arch: net.arch,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, s_t: &Tensor, x: &Tensor) -> Result<(usize, usize)> {
        let &[2, t, f] = s_t.shape() else {
            return Err(Error::shape(
                "score_net",
                format!("s_t must be [2, T, F], got {:?}", s_t.shape()),
            ));
        };
        if x.shape() != [self.arch.num_mics, 2, t, f] {
            return Err(Error::shape(
                "score_net",
                format!(
                    "conditioner {:?} does not match [{}, 2, {t}, {f}]",
                    x.shape(),
                    self.arch.num_mics
                ),
            ));
        }
        let m = self.arch.multiple();
        if t % m != 0 || f % m != 0 {
            return Err(Error::shape(
                "score_net",
                format!(
                    "T={t}, F={f} must be multiples of {m}; pad by {} frames and {} bins",
                    t.next_multiple_of(m) - t,
                    f.next_multiple_of(m) - f
                ),
            ));
        }
        Ok((t, f))
    }

    /// Records the forward pass; `x` holds one `[2, T, F]` variable per microphone.
    pub fn forward_var(&self, g: &mut Graph, bound: &Bound, s_t: Var, x: &[Var], t: f64) -> Result<Var> {
        let arch = &self.arch;
        if x.len() != arch.num_mics {
            return Err(Error::shape(
                "score_net",
                format!("{} conditioner channels for {} mics", x.len(), arch.num_mics),
            ));
        }
        let emb = g.input(arch.time_embedding.embed(t));
        let temb = g.linear(emb, bound.var("temb.w")?, bound.var("temb.b")?)?;
        let temb = g.relu(temb)?;

        let cond = if arch.uses_attention() {
            let vars = AttentionVars::from_bound(bound, "in_attn.", arch.num_mics, arch.shared_aux)?;
            cross_channel_attention_var(g, x, &vars)?
        } else if x.len() == 1 {
            x[0]
        } else {
            g.concat(x)?
        };
        let input = g.concat(&[s_t, cond])?;
        let mut h = stage(g, bound, "in", input, temb)?;
        let mut skips = Vec::with_capacity(arch.levels);
        for i in 0..arch.levels {
            let e = stage(g, bound, &format!("enc{i}"), h, temb)?;
            skips.push(e);
            h = g.downsample2(e)?;
        }
        h = stage(g, bound, "mid", h, temb)?;
        if arch.uses_attention() {
            let m = arch.num_mics;
            let group = arch.bottleneck_width() / m;
            let parts: Vec<Var> = (0..m).map(|i| g.slice(h, 0, i * group, group)).collect::<Result<_>>()?;
            let vars = AttentionVars::from_bound(bound, "mid_attn.", m, arch.shared_aux)?;
            let expanded = cross_channel_attention_var(g, &parts, &vars)?;
            let fused = g.conv1x1(expanded, bound.var("mid.fuse.w")?, bound.var("mid.fuse.b")?)?;
            h = g.relu(fused)?;
        }
        for i in (0..arch.levels).rev() {
            let up = g.upsample2(h)?;
            let cat = g.concat(&[up, skips[i]])?;
            h = stage(g, bound, &format!("dec{i}"), cat, temb)?;
        }
        g.conv3x3(h, bound.var("out.w")?, bound.var("out.b")?)
    }

    /// Splits `[M, 2, T, F]` into per-microphone graph inputs.
    pub fn conditioner_inputs(g: &mut Graph, x: &Tensor) -> Vec<Var> {
        let m = x.shape()[0];
        let inner = x.shape()[1..].to_vec();
        let plane = x.len() / m;
        (0..m)
            .map(|i| {
                let data = x.data()[i * plane..(i + 1) * plane].to_vec();
                g.input(Tensor::new(inner.clone(), data).expect("sized from shape"))
            })
            .collect()
    }

    /// Score for `s_t` (`[2, T, F]`) given noisy channels `x` (`[M, 2, T, F]`);
    /// T and F must be multiples of `2^E`.
    pub fn forward(&self, s_t: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check_inputs(s_t, x)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let s = g.input(s_t.clone());
        let xs = Self::conditioner_inputs(&mut g, x);
        let out = self.forward_var(&mut g, &bound, s, &xs, t)?;
        Ok(g.value(out).clone())
    }

    /// Score estimate: the padded network output divided by `sigma_t`, so the
    /// network itself predicts the unit-scale quantity `sigma_t * score`.
    pub fn score(&self, s_t: &Tensor, x: &Tensor, t: f64, sde: &SdeParams) -> Result<Tensor> {
        Ok(self.forward_padded(s_t, x, t)?.scaled(1.0 / std(t, sde)?))
    }

    /// [`ScoreNet::forward`] on arbitrary sizes: reflection-pads time and
    /// frequency up to multiples of `2^E` and crops the result.
    pub fn forward_padded(&self, s_t: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
        let &[_, tt, ff] = s_t.shape() else {
            return Err(Error::shape(
                "score_net",
                format!("s_t must be [2, T, F], got {:?}", s_t.shape()),
            ));
        };
        let m = self.arch.multiple();
        let (tp, fp) = (tt.next_multiple_of(m), ff.next_multiple_of(m));
        if (tp, fp) == (tt, ff) {
            return self.forward(s_t, x, t);
        }
        let out = self.forward(&pad_reflect(s_t, tp, fp)?, &pad_reflect(x, tp, fp)?, t)?;
        crop(&out, tt, ff)
    }
}

fn stage(g: &mut Graph, bound: &Bound, name: &str, x: Var, temb: Var) -> Result<Var> {
    let h = g.conv3x3(x, bound.var(&format!("{name}.w"))?, bound.var(&format!("{name}.b"))?)?;
    let c = g.value(h).shape()[0];
    let h = g.group_norm(
        h,
        bound.var(&format!("{name}.gn.g"))?,
        bound.var(&format!("{name}.gn.b"))?,
        groups_for(c),
    )?;
    let bias = g.linear(
        temb,
        bound.var(&format!("{name}.t.w"))?,
        bound.var(&format!("{name}.t.b"))?,
    )?;
    let bias = g.reshape(bias, &[c, 1, 1])?;
    let h = g.add(h, bias)?;
    g.relu(h)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Reflection-pads the last two axes at their far ends up to `t` x `f`.
pub fn pad_reflect(x: &Tensor, t: usize, f: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::shape("pad_reflect", format!("rank {r} input")));
    }
    let (t0, f0) = (x.shape()[r - 2], x.shape()[r - 1]);
    if t < t0 || f < f0 {
        return Err(Error::shape("pad_reflect", format!("cannot pad {t0}x{f0} to {t}x{f}")));
    }
    let outer = x.len() / (t0 * f0);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = t;
    shape[r - 1] = f;
    let src = x.data();
    let mut out = Vec::with_capacity(outer * t * f);
    for o in 0..outer {
        for ti in 0..t {
            let row = &src[(o * t0 + reflect(ti, t0)) * f0..][..f0];
            out.extend((0..f).map(|fi| row[reflect(fi, f0)]));
        }
    }
    Tensor::new(shape, out)
}

/// Keeps the leading `t` x `f` corner of the last two axes.
pub fn crop(x: &Tensor, t: usize, f: usize) -> Result<Tensor> {
    let r = x.rank();
    let (t0, f0) = (x.shape()[r - 2], x.shape()[r - 1]);
    if t > t0 || f > f0 {
        return Err(Error::shape("crop", format!("cannot crop {t0}x{f0} to {t}x{f}")));
    }
    let outer = x.len() / (t0 * f0);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = t;
    shape[r - 1] = f;
    let mut out = Vec::with_capacity(outer * t * f);
    for o in 0..outer {
        for ti in 0..t {
            out.extend_from_slice(&x.data()[(o * t0 + ti) * f0..][..f]);
        }
    }
    Tensor::new(shape, out)
}
