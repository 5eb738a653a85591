use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{norm_groups, prefixed, prefixed_mut, Conv2d, GroupNorm, LayerNorm, Linear, Module, Named, NamedMut};
use crate::ssm::{attend, BiMamba, Mhsa, SsmOptions};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Mhsa,
    BiMamba,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::BiMamba => "bimamba",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mhsa" => Ok(AttentionKind::Mhsa),
            "bimamba" => Ok(AttentionKind::BiMamba),
            _ => Err(Error::Config(format!("unknown attention kind {s:?} (mhsa|bimamba)"))),
        }
    }
}

/// How the thermal latent reaches the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThermalInjection {
    /// Channel concatenation with `z_t` at the input.
    Concat,
    /// Projected to `d_ctx` and appended to the cross-attention tokens.
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub thermal_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Levels at or below this index (finer) have no attention block.
    pub attention_from_level: usize,
    pub attention: AttentionKind,
    pub injection: ThermalInjection,
    pub d_ctx: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub d_state: usize,
    /// Input-dependent `B`/`C` in the state-space mixer.
    pub selective: bool,
    /// Causal depthwise convolution ahead of the scan.
    pub conv_kernel: Option<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 8,
            latent_size: 8,
            thermal_channels: 8,
            base_channels: 32,
            channel_mults: vec![1, 2],
            attention_from_level: 0,
            attention: AttentionKind::BiMamba,
            injection: ThermalInjection::Concat,
            d_ctx: 32,
            time_dim: 32,
            heads: 4,
            d_state: 16,
            selective: true,
            conv_kernel: None,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.channel_mults.contains(&0) {
            return Err(Error::Config("channel multipliers must be non-empty and positive".into()));
        }
        if self.latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "latent size {} not divisible by 2^{}",
                self.latent_size,
                levels - 1
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        for &m in &self.channel_mults {
            if (self.base_channels * m) % self.heads != 0 {
                return Err(Error::Config(format!(
                    "width {} not divisible by {} heads",
                    self.base_channels * m,
                    self.heads
                )));
            }
        }
        if self.conv_kernel == Some(0) {
            return Err(Error::Config("conv kernel must be positive".into()));
        }
        if self.latent_channels == 0 || self.d_ctx == 0 {
            return Err(Error::Config("latent channels and d_ctx must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn temb_dim(&self) -> usize {
        2 * self.base_channels
    }

    fn input_channels(&self) -> usize {
        match self.injection {
            ThermalInjection::Concat => self.latent_channels + self.thermal_channels,
            ThermalInjection::CrossAttention => self.latent_channels,
        }
    }
}

/// `[B, dim]` sinusoidal features of integer timesteps.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &s in t {
        let (mut sin, mut cos) = (Vec::with_capacity(half), Vec::with_capacity(half));
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            sin.push((s as f64 * freq).sin() as f32);
            cos.push((s as f64 * freq).cos() as f32);
        }
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::new(vec![t.len(), dim], data).expect("sized above")
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: GroupNorm<f32>,
    c1: Conv2d<f32>,
    temb: Linear<f32>,
    n2: GroupNorm<f32>,
    c2: Conv2d<f32>,
    skip: Option<Conv2d<f32>>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, temb: usize, rng: &mut R) -> Self {
        ResBlock {
            n1: GroupNorm::new(norm_groups(cin), cin),
            c1: Conv2d::same(cin, cout, rng),
            temb: Linear::new(temb, cout, true, rng),
            n2: GroupNorm::new(norm_groups(cout), cout),
            c2: Conv2d::same(cout, cout, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0, rng)),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var, temb: Var) -> Result<Var> {
        let h = self.n1.forward(tape, x)?;
        let h = tape.silu(h);
        let h = self.c1.forward(tape, h)?;
        let t = self.temb.forward(tape, temb)?;
        let s = tape.shape(t).to_vec();
        let t = tape.reshape(t, &[s[0], s[1], 1, 1])?;
        let h = tape.add(h, t)?;
        let h = self.n2.forward(tape, h)?;
        let h = tape.silu(h);
        let h = self.c2.forward(tape, h)?;
        let x = match &self.skip {
            Some(c) => c.forward(tape, x)?,
            None => x,
        };
        tape.add(x, h)
    }

    fn named(&self) -> Named<'_, f32> {
        let mut v = prefixed("n1", self.n1.params());
        v.extend(prefixed("c1", self.c1.params()));
        v.extend(prefixed("temb", self.temb.params()));
        v.extend(prefixed("n2", self.n2.params()));
        v.extend(prefixed("c2", self.c2.params()));
        if let Some(s) = &self.skip {
            v.extend(prefixed("skip", s.params()));
        }
        v
    }

    fn named_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("n1", self.n1.params_mut());
        v.extend(prefixed_mut("c1", self.c1.params_mut()));
        v.extend(prefixed_mut("temb", self.temb.params_mut()));
        v.extend(prefixed_mut("n2", self.n2.params_mut()));
        v.extend(prefixed_mut("c2", self.c2.params_mut()));
        if let Some(s) = &mut self.skip {
            v.extend(prefixed_mut("skip", s.params_mut()));
        }
        v
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    Mhsa(Mhsa<f32>),
    BiMamba(BiMamba<f32>),
}

/// Self-attention (of the configured kind) then cross-attention to the
/// context tokens, each pre-normed with a residual.
#[derive(Debug, Clone)]
struct AttnBlock {
    heads: usize,
    ln1: LayerNorm<f32>,
    mixer: Mixer,
    ln2: LayerNorm<f32>,
    wq: Linear<f32>,
    wk: Linear<f32>,
    wv: Linear<f32>,
    wo: Linear<f32>,
}

impl AttnBlock {
    fn new<R: Rng + ?Sized>(ch: usize, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mixer = match cfg.attention {
            AttentionKind::Mhsa => Mixer::Mhsa(Mhsa::new(ch, cfg.heads, rng)?),
            AttentionKind::BiMamba => Mixer::BiMamba(BiMamba::new(
                SsmOptions {
                    selective: cfg.selective,
                    conv_kernel: cfg.conv_kernel,
                    ..SsmOptions::new(ch, cfg.d_state)
                },
                rng,
            )),
        };
        Ok(AttnBlock {
            heads: cfg.heads,
            ln1: LayerNorm::new(ch),
            mixer,
            ln2: LayerNorm::new(ch),
            wq: Linear::new(ch, ch, false, rng),
            wk: Linear::new(cfg.d_ctx, ch, false, rng),
            wv: Linear::new(cfg.d_ctx, ch, false, rng),
            wo: Linear::new(ch, ch, true, rng),
        })
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var, ctx: Var) -> Result<Var> {
        let [b, c, h, w] = tape.shape(x).to_vec()[..] else {
            return dim_err("attention block expects [B, C, H, W]");
        };
        let seq = tape.reshape(x, &[b, c, h * w])?;
        let seq = tape.permute(seq, &[0, 2, 1])?;
        let n = self.ln1.forward(tape, seq)?;
        let m = match &self.mixer {
            Mixer::Mhsa(a) => a.mix(tape, n)?,
            Mixer::BiMamba(a) => a.mix(tape, n)?,
        };
        let seq = tape.add(seq, m)?;
        let n = self.ln2.forward(tape, seq)?;
        let q = self.wq.forward(tape, n)?;
        let k = self.wk.forward(tape, ctx)?;
        let v = self.wv.forward(tape, ctx)?;
        let (o, _) = attend(tape, q, k, v, self.heads)?;
        let o = self.wo.forward(tape, o)?;
        let seq = tape.add(seq, o)?;
        let out = tape.permute(seq, &[0, 2, 1])?;
        tape.reshape(out, &[b, c, h, w])
    }

    fn named(&self) -> Named<'_, f32> {
        let mut v = prefixed("ln1", self.ln1.params());
        v.extend(match &self.mixer {
            Mixer::Mhsa(a) => prefixed("mhsa", a.params()),
            Mixer::BiMamba(a) => prefixed("bimamba", a.params()),
        });
        v.extend(prefixed("ln2", self.ln2.params()));
        v.extend(prefixed("cross_q", self.wq.params()));
        v.extend(prefixed("cross_k", self.wk.params()));
        v.extend(prefixed("cross_v", self.wv.params()));
        v.extend(prefixed("cross_o", self.wo.params()));
        v
    }

    fn named_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("ln1", self.ln1.params_mut());
        v.extend(match &mut self.mixer {
            Mixer::Mhsa(a) => prefixed_mut("mhsa", a.params_mut()),
            Mixer::BiMamba(a) => prefixed_mut("bimamba", a.params_mut()),
        });
        v.extend(prefixed_mut("ln2", self.ln2.params_mut()));
        v.extend(prefixed_mut("cross_q", self.wq.params_mut()));
        v.extend(prefixed_mut("cross_k", self.wk.params_mut()));
        v.extend(prefixed_mut("cross_v", self.wv.params_mut()));
        v.extend(prefixed_mut("cross_o", self.wo.params_mut()));
        v
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
    /// Stride-2 conv to the next level; absent at the coarsest.
    down: Option<Conv2d<f32>>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    /// Upsample then conv to the next finer width; absent at level 0.
    up: Option<Conv2d<f32>>,
}

/// Conditional noise predictor `ε_θ(z_t, t, C)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    t1: Linear<f32>,
    t2: Linear<f32>,
    thermal_proj: Option<Linear<f32>>,
    conv_in: Conv2d<f32>,
    downs: Vec<Level>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    ups: Vec<UpLevel>,
    norm_out: GroupNorm<f32>,
    conv_out: Conv2d<f32>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let te = config.temb_dim();
        let levels = config.channel_mults.len();
        let attn_at = |l: usize, rng: &mut R| -> Result<Option<AttnBlock>> {
            if l >= config.attention_from_level {
                Ok(Some(AttnBlock::new(config.width(l), &config, rng)?))
            } else {
                Ok(None)
            }
        };
        let conv_in = Conv2d::same(config.input_channels(), config.width(0), rng);
        let mut downs = Vec::with_capacity(levels);
        let mut prev = config.width(0);
        for l in 0..levels {
            let ch = config.width(l);
            downs.push(Level {
                res: ResBlock::new(prev, ch, te, rng),
                attn: attn_at(l, rng)?,
                down: (l + 1 < levels).then(|| Conv2d::new(ch, ch, 3, 2, 1, rng)),
            });
            prev = ch;
        }
        let top = config.width(levels - 1);
        let mid1 = ResBlock::new(top, top, te, rng);
        let mid_attn = AttnBlock::new(top, &config, rng)?;
        let mid2 = ResBlock::new(top, top, te, rng);
        let mut ups = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let ch = config.width(l);
            ups.push(UpLevel {
                res: ResBlock::new(2 * ch, ch, te, rng),
                attn: attn_at(l, rng)?,
                up: (l > 0).then(|| Conv2d::same(ch, config.width(l - 1), rng)),
            });
        }
        let mut conv_out = Conv2d::same(config.width(0), config.latent_channels, rng);
        // zero output so training starts from ε̂ = 0
        conv_out.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(Denoiser {
            t1: Linear::new(config.time_dim, te, true, rng),
            t2: Linear::new(te, te, true, rng),
            thermal_proj: (config.injection == ThermalInjection::CrossAttention)
                .then(|| Linear::new(config.thermal_channels, config.d_ctx, true, rng)),
            conv_in,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            norm_out: GroupNorm::new(norm_groups(config.width(0)), config.width(0)),
            conv_out,
            config,
        })
    }

    /// `z_t: [B, c, h, w]`, `t`: one timestep per item, `thermal: [B, c_th, h, w]`,
    /// `tokens: [B, L, d_ctx]`. Returns `ε̂` shaped like `z_t`.
    pub fn forward(&self, tape: &mut Tape<f32>, z_t: Var, t: &[usize], thermal: Var, tokens: Var) -> Result<Var> {
        let cfg = &self.config;
        let zs = tape.shape(z_t).to_vec();
        let b = zs[0];
        let expect = [b, cfg.latent_channels, cfg.latent_size, cfg.latent_size];
        if zs != expect {
            return dim_err(format!("latent {zs:?}, expected {expect:?}"));
        }
        let th_expect = [b, cfg.thermal_channels, cfg.latent_size, cfg.latent_size];
        if tape.shape(thermal) != th_expect {
            return dim_err(format!(
                "thermal latent {:?}, expected {th_expect:?}",
                tape.shape(thermal)
            ));
        }
        let ts = tape.shape(tokens).to_vec();
        if ts.len() != 3 || ts[0] != b || ts[2] != cfg.d_ctx {
            return dim_err(format!("context tokens {ts:?}, expected [{b}, L, {}]", cfg.d_ctx));
        }
        if t.len() != b {
            return dim_err(format!("{} timesteps for batch {b}", t.len()));
        }
        let tf = tape.constant(&timestep_features(t, cfg.time_dim));
        let temb = self.t1.forward(tape, tf)?;
        let temb = tape.silu(temb);
        let temb = self.t2.forward(tape, temb)?;
        let temb = tape.silu(temb);

        let (input, ctx) = match &self.thermal_proj {
            None => (tape.concat(&[z_t, thermal], 1)?, tokens),
            Some(p) => {
                let hw = cfg.latent_size * cfg.latent_size;
                let th = tape.reshape(thermal, &[b, cfg.thermal_channels, hw])?;
                let th = tape.permute(th, &[0, 2, 1])?;
                let th = p.forward(tape, th)?;
                (z_t, tape.concat(&[tokens, th], 1)?)
            }
        };
        let mut h = self.conv_in.forward(tape, input)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for lvl in &self.downs {
            h = lvl.res.forward(tape, h, temb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(tape, h, ctx)?;
            }
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(tape, h)?;
            }
        }
        h = self.mid1.forward(tape, h, temb)?;
        h = self.mid_attn.forward(tape, h, ctx)?;
        h = self.mid2.forward(tape, h, temb)?;
        for lvl in &self.ups {
            let s = skips.pop().expect("one skip per level");
            h = tape.concat(&[h, s], 1)?;
            h = lvl.res.forward(tape, h, temb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(tape, h, ctx)?;
            }
            if let Some(u) = &lvl.up {
                h = tape.upsample2x(h)?;
                h = u.forward(tape, h)?;
            }
        }
        let h = self.norm_out.forward(tape, h)?;
        let h = tape.silu(h);
        self.conv_out.forward(tape, h)
    }

    /// Tape-free `ε̂` for a batch.
    pub fn predict(&self, z_t: &Tensor<f32>, t: &[usize], thermal: &Tensor<f32>, tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::no_grad();
        let z = tape.constant(z_t);
        let th = tape.constant(thermal);
        let tk = tape.constant(tokens);
        let e = self.forward(&mut tape, z, t, th, tk)?;
        Ok(tape.tensor(e))
    }
}

impl Module<f32> for Denoiser {
    fn params(&self) -> Named<'_, f32> {
        let mut v = prefixed("time1", self.t1.params());
        v.extend(prefixed("time2", self.t2.params()));
        if let Some(p) = &self.thermal_proj {
            v.extend(prefixed("thermal_proj", p.params()));
        }
        v.extend(prefixed("conv_in", self.conv_in.params()));
        for (i, l) in self.downs.iter().enumerate() {
            v.extend(prefixed(&format!("down{i}.res"), l.res.named()));
            if let Some(a) = &l.attn {
                v.extend(prefixed(&format!("down{i}.attn"), a.named()));
            }
            if let Some(d) = &l.down {
                v.extend(prefixed(&format!("down{i}.down"), d.params()));
            }
        }
        v.extend(prefixed("mid1", self.mid1.named()));
        v.extend(prefixed("mid_attn", self.mid_attn.named()));
        v.extend(prefixed("mid2", self.mid2.named()));
        for (i, l) in self.ups.iter().enumerate() {
            v.extend(prefixed(&format!("up{i}.res"), l.res.named()));
            if let Some(a) = &l.attn {
                v.extend(prefixed(&format!("up{i}.attn"), a.named()));
            }
            if let Some(u) = &l.up {
                v.extend(prefixed(&format!("up{i}.up"), u.params()));
            }
        }
        v.extend(prefixed("norm_out", self.norm_out.params()));
        v.extend(prefixed("conv_out", self.conv_out.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("time1", self.t1.params_mut());
        v.extend(prefixed_mut("time2", self.t2.params_mut()));
        if let Some(p) = &mut self.thermal_proj {
            v.extend(prefixed_mut("thermal_proj", p.params_mut()));
        }
        v.extend(prefixed_mut("conv_in", self.conv_in.params_mut()));
        for (i, l) in self.downs.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("down{i}.res"), l.res.named_mut()));
            if let Some(a) = &mut l.attn {
                v.extend(prefixed_mut(&format!("down{i}.attn"), a.named_mut()));
            }
            if let Some(d) = &mut l.down {
                v.extend(prefixed_mut(&format!("down{i}.down"), d.params_mut()));
            }
        }
        v.extend(prefixed_mut("mid1", self.mid1.named_mut()));
        v.extend(prefixed_mut("mid_attn", self.mid_attn.named_mut()));
        v.extend(prefixed_mut("mid2", self.mid2.named_mut()));
        for (i, l) in self.ups.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("up{i}.res"), l.res.named_mut()));
            if let Some(a) = &mut l.attn {
                v.extend(prefixed_mut(&format!("up{i}.attn"), a.named_mut()));
            }
            if let Some(u) = &mut l.up {
                v.extend(prefixed_mut(&format!("up{i}.up"), u.params_mut()));
            }
        }
        v.extend(prefixed_mut("norm_out", self.norm_out.params_mut()));
        v.extend(prefixed_mut("conv_out", self.conv_out.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small(kind: AttentionKind) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            latent_size: 4,
            thermal_channels: 3,
            base_channels: 8,
            attention: kind,
            d_ctx: 6,
            time_dim: 8,
            heads: 2,
            d_state: 4,
            ..Default::default()
        }
    }

    fn inputs(cfg: &DenoiserConfig, b: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut r = rng::seeded(seed);
        let s = cfg.latent_size;
        (
            Tensor::randn(vec![b, cfg.latent_channels, s, s], 1.0, &mut r),
            Tensor::randn(vec![b, cfg.thermal_channels, s, s], 1.0, &mut r),
            Tensor::randn(vec![b, 3, cfg.d_ctx], 1.0, &mut r),
        )
    }

    /// Nonzero output layer so shapes and determinism are exercised on real values.
    fn randomise_out(d: &mut Denoiser) {
        let mut r = rng::seeded(99);
        let shape = d.conv_out.weight.shape().to_vec();
        d.conv_out.weight = Tensor::randn(shape, 0.1, &mut r).with_grad();
    }

    #[test]
    fn shapes_determinism_and_kinds() {
        let mut counts = Vec::new();
        for kind in [AttentionKind::Mhsa, AttentionKind::BiMamba] {
            let cfg = small(kind);
            let mut d = Denoiser::new(cfg.clone(), &mut rng::seeded(1)).unwrap();
            let (z, th, tk) = inputs(&cfg, 3, 2);
            assert!(d.predict(&z, &[1, 5, 9], &th, &tk).unwrap().data().iter().all(|&v| v == 0.0));
            randomise_out(&mut d);
            let e = d.predict(&z, &[1, 5, 9], &th, &tk).unwrap();
            assert_eq!(e.shape(), z.shape());
            assert_eq!(e, d.predict(&z, &[1, 5, 9], &th, &tk).unwrap());
            assert_ne!(e, d.predict(&z, &[2, 5, 9], &th, &tk).unwrap());
            counts.push(d.param_count());
        }
        assert_ne!(counts[0], counts[1]);
    }

    #[test]
    fn cross_attention_injection_and_errors() {
        let cfg = DenoiserConfig {
            injection: ThermalInjection::CrossAttention,
            ..small(AttentionKind::BiMamba)
        };
        let mut d = Denoiser::new(cfg.clone(), &mut rng::seeded(3)).unwrap();
        randomise_out(&mut d);
        let (z, th, tk) = inputs(&cfg, 2, 4);
        assert_eq!(d.predict(&z, &[3, 4], &th, &tk).unwrap().shape(), z.shape());
        let bad_th = Tensor::zeros(vec![2, 3, 2, 2]);
        assert!(matches!(d.predict(&z, &[3, 4], &bad_th, &tk), Err(Error::Dimension(_))));
        let bad_tk = Tensor::zeros(vec![2, 3, 5]);
        assert!(d.predict(&z, &[3, 4], &th, &bad_tk).is_err());
        assert!(d.predict(&z, &[3], &th, &tk).is_err());
        let bad = DenoiserConfig {
            latent_size: 5,
            ..small(AttentionKind::Mhsa)
        };
        assert!(Denoiser::new(bad, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let plain = small(AttentionKind::BiMamba);
        let gated = DenoiserConfig {
            selective: true,
            conv_kernel: Some(3),
            ..plain.clone()
        };
        let mut counts = Vec::new();
        for cfg in [plain, gated] {
            let mut d = Denoiser::new(cfg.clone(), &mut rng::seeded(5)).unwrap();
            randomise_out(&mut d);
            let (z, th, tk) = inputs(&cfg, 2, 6);
            let mut tape = Tape::new();
            let zv = tape.constant(&z);
            let tv = tape.constant(&th);
            let kv = tape.constant(&tk);
            let e = d.forward(&mut tape, zv, &[2, 7], tv, kv).unwrap();
            let sq = tape.square(e);
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap();
            for (name, p) in d.params() {
                let gp = g.for_param(p).unwrap_or_else(|| panic!("{name} has no gradient"));
                assert!(gp.iter().any(|&v| v != 0.0), "{name} gradient is zero");
            }
            counts.push(d.param_count());
        }
        assert!(counts[1] > counts[0]);
    }

    #[test]
    fn timestep_features_layout() {
        let f = timestep_features(&[0, 3], 4);
        assert_eq!(f.shape(), &[2, 4]);
        assert_eq!(&f.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((f.data()[4] - 3f32.sin()).abs() < 1e-6);
    }
}
