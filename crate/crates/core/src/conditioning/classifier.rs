use rand::Rng;

use super::labels::{AttributeLabels, HEAD_SIZES};
use crate::codec::select_batch;
use crate::error::{dim_err, Error, Result};
use crate::nn::{prefixed, prefixed_mut, Conv2d, Linear, Module, Named, NamedMut};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// Conv feature extractor with global max pooling and three linear heads.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub frozen: bool,
    pub convs: Vec<Conv2d<f32>>,
    pub heads: [Linear<f32>; 3],
}

pub const FEATURE_DIM: usize = 64;

impl ClassifierNet {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        let convs = vec![
            Conv2d::same(in_channels, 16, rng),
            Conv2d::new(16, 32, 3, 2, 1, rng),
            Conv2d::new(32, 32, 3, 2, 1, rng),
            Conv2d::new(32, FEATURE_DIM, 3, 2, 1, rng),
            Conv2d::same(FEATURE_DIM, FEATURE_DIM, rng),
        ];
        let heads = HEAD_SIZES.map(|k| Linear::new(FEATURE_DIM, k, true, rng));
        ClassifierNet {
            frozen: false,
            convs,
            heads,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map(|c| c.out_channels()).unwrap_or(0)
    }

    /// `[B, d_f]` features for images `[B, C, H, W]`.
    pub fn features(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.in_channels() {
            return dim_err(format!(
                "classifier expects [B, {}, H, W], got {s:?}",
                self.in_channels()
            ));
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, h)?;
            h = tape.silu(h);
        }
        tape.global_max_pool(h)
    }

    pub fn logits(&self, tape: &mut Tape<f32>, feats: Var) -> Result<[Var; 3]> {
        Ok([
            self.heads[0].forward(tape, feats)?,
            self.heads[1].forward(tape, feats)?,
            self.heads[2].forward(tape, feats)?,
        ])
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.set_trainable(false);
    }

    /// Unfrozen exact copy.
    pub fn trainable_copy(&self) -> ClassifierNet {
        let mut out = self.clone();
        out.frozen = false;
        out.set_trainable(true);
        out
    }

    /// Trainable copy reading `channels` inputs; the first kernel is the
    /// channel mean of this net's, replicated.
    pub fn adapted_copy(&self, channels: usize) -> Result<ClassifierNet> {
        let mut out = self.trainable_copy();
        let w = &self.convs[0].weight;
        let [o, c, kh, kw] = w.shape()[..] else {
            return dim_err("first kernel must be 4-D");
        };
        let mut data = vec![0f32; o * channels * kh * kw];
        for oi in 0..o {
            for k in 0..kh * kw {
                let mean = (0..c).map(|ci| w.data()[(oi * c + ci) * kh * kw + k]).sum::<f32>() / c as f32;
                for ci in 0..channels {
                    data[(oi * channels + ci) * kh * kw + k] = mean;
                }
            }
        }
        out.convs[0].weight = Tensor::new(vec![o, channels, kh, kw], data)?.with_grad();
        Ok(out)
    }

    fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::Frozen("classifier is frozen".into()))
        } else {
            Ok(())
        }
    }
}

impl Module<f32> for ClassifierNet {
    fn params(&self) -> Named<'_, f32> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.extend(prefixed(&format!("conv{i}"), c.params()));
        }
        for (name, h) in ["gender", "age", "tone"].iter().zip(&self.heads) {
            v.extend(prefixed(&format!("head_{name}"), h.params()));
        }
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("conv{i}"), c.params_mut()));
        }
        for (name, h) in ["gender", "age", "tone"].iter().zip(self.heads.iter_mut()) {
            v.extend(prefixed_mut(&format!("head_{name}"), h.params_mut()));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: AttributeLabels,
    pub features: Vec<f32>,
    /// Softmax output of each head.
    pub probs: [Vec<f32>; 3],
}

fn softmax(v: &[f32]) -> Vec<f32> {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Lowest index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Labels, features and probabilities for `[C, H, W]` or `[B, C, H, W]` images.
pub fn classify(net: &ClassifierNet, images: &Tensor<f32>) -> Result<Vec<Classification>> {
    let x = match images.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.clone().reshape(s)?
        }
        _ => images.clone(),
    };
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let xb = crate::codec::slice_batch(&x, start, 64.min(n - start))?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(&xb);
        let f = net.features(&mut tape, xv)?;
        let logits = net.logits(&mut tape, f)?;
        let d = net.feature_dim();
        let fv = tape.value(f).to_vec();
        for i in 0..xb.shape()[0] {
            let probs: [Vec<f32>; 3] = std::array::from_fn(|h| {
                let k = HEAD_SIZES[h];
                softmax(&tape.value(logits[h])[i * k..(i + 1) * k])
            });
            let labels = AttributeLabels::from_array(std::array::from_fn(|h| argmax(&probs[h])))?;
            out.push(Classification {
                labels,
                features: fv[i * d..(i + 1) * d].to_vec(),
                probs,
            });
        }
    }
    Ok(out)
}

/// Fraction of matches per head (gender, age, tone).
pub fn per_head_agreement(a: &[AttributeLabels], b: &[AttributeLabels]) -> [f64; 3] {
    let n = a.len().min(b.len()).max(1) as f64;
    std::array::from_fn(|h| {
        a.iter()
            .zip(b)
            .filter(|(x, y)| x.as_array()[h] == y.as_array()[h])
            .count() as f64
            / n
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Random shifts and noise on training images.
    pub augment: bool,
    /// Weight of the cross-entropy term during distillation.
    pub ce_weight: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 20,
            lr: 2e-3,
            batch: 16,
            seed: 0,
            augment: false,
            ce_weight: 0.1,
        }
    }
}

/// Random shift of up to ±2 px (edges replicated) and light Gaussian noise.
pub fn augment<R: Rng + ?Sized>(x: &Tensor<f32>, r: &mut R) -> Tensor<f32> {
    let [n, c, h, w] = x.shape()[..] else {
        return x.clone();
    };
    let plane = h * w;
    let src = x.data();
    let mut data = vec![0f32; src.len()];
    for i in 0..n {
        let dx = rng::below(r, 5) as isize - 2;
        let dy = rng::below(r, 5) as isize - 2;
        let noise = 0.01 * rng::uniform(r);
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for y in 0..h {
                let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                for xx in 0..w {
                    let sx = (xx as isize - dx).clamp(0, w as isize - 1) as usize;
                    data[off + y * w + xx] = src[off + sy * w + sx] + (noise * rng::normal(r)) as f32;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Cosine decay from `lr` towards zero over `total` epochs.
pub fn cosine_lr(lr: f64, epoch: usize, total: usize) -> f64 {
    0.5 * lr * (1.0 + (std::f64::consts::PI * epoch as f64 / total.max(1) as f64).cos())
}

fn check_labels(images: &Tensor<f32>, labels: &[AttributeLabels]) -> Result<()> {
    if images.shape().first() != Some(&labels.len()) || labels.is_empty() {
        return Err(Error::Contract(format!(
            "{} labels for {:?} images",
            labels.len(),
            images.shape()
        )));
    }
    for l in labels {
        AttributeLabels::from_array(l.as_array())?;
    }
    Ok(())
}

fn step(net: &mut ClassifierNet, adam: &mut Adam<f32>, tape: &Tape<f32>, loss: Var) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (_, p) in net.params_mut() {
        grads.accumulate(p)?;
    }
    adam.step(net.params_mut().into_iter().map(|(_, p)| p))?;
    net.zero_grad();
    Ok(())
}

/// Cross-entropy over the three heads on labelled visible images; the net
/// is frozen afterwards. Returns the mean loss per epoch.
pub fn train_teacher(
    net: &mut ClassifierNet,
    images: &Tensor<f32>,
    labels: &[AttributeLabels],
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<f64>> {
    net.ensure_trainable()?;
    check_labels(images, labels)?;
    let mut r = rng::stream(cfg.seed, "teacher");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.config.lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        rng::shuffle(&mut order, &mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut xb = select_batch(images, chunk)?;
            if cfg.augment {
                xb = augment(&xb, &mut r);
            }
            let mut tape = Tape::new();
            let x = tape.constant(&xb);
            let f = net.features(&mut tape, x)?;
            let logits = net.logits(&mut tape, f)?;
            let mut loss = None;
            for (h, lg) in logits.iter().enumerate() {
                let t: Vec<usize> = chunk.iter().map(|&i| labels[i].as_array()[h]).collect();
                let ce = tape.cross_entropy(*lg, &t)?;
                loss = Some(match loss {
                    None => ce,
                    Some(l) => tape.add(l, ce)?,
                });
            }
            let loss = loss.expect("three heads");
            total += tape.item(loss) as f64;
            batches += 1;
            step(net, &mut adam, &tape, loss)?;
        }
        curve.push(total / batches as f64);
        log::info!("teacher epoch {epoch}: loss {:.4}", curve[epoch]);
    }
    net.freeze();
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillEpoch {
    pub epoch: usize,
    /// Mean over pairs of `‖f_vis − f_IR‖²`.
    pub feature_loss: f64,
    pub ce_loss: f64,
}

fn eq5_loss(tape: &mut Tape<f32>, teacher_feats: Var, student_feats: Var) -> Result<Var> {
    let d = tape.sub(teacher_feats, student_feats)?;
    let sq = tape.square(d);
    let per = tape.sum_axis(sq, 1)?;
    Ok(tape.mean(per))
}

/// Mean feature-consistency loss over a paired set, without updates.
pub fn feature_loss(teacher: &ClassifierNet, student: &ClassifierNet, visible: &Tensor<f32>, thermal: &Tensor<f32>) -> Result<f64> {
    let n = visible.shape()[0];
    let mut total = 0.0;
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let mut tape = Tape::no_grad();
        let v = tape.constant(&crate::codec::slice_batch(visible, start, len)?);
        let t = tape.constant(&crate::codec::slice_batch(thermal, start, len)?);
        let fv = teacher.features(&mut tape, v)?;
        let ft = student.features(&mut tape, t)?;
        let l = eq5_loss(&mut tape, fv, ft)?;
        total += tape.item(l) as f64 * len as f64;
    }
    Ok(total / n as f64)
}

/// Trains `student` on thermal images to reproduce the frozen teacher's
/// features on the paired visible images, plus `ce_weight` × cross-entropy
/// against the teacher's predicted labels. Entry 0 is the untrained loss.
pub fn distill_student(
    teacher: &ClassifierNet,
    student: &mut ClassifierNet,
    visible: &Tensor<f32>,
    thermal: &Tensor<f32>,
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<DistillEpoch>> {
    if !teacher.frozen {
        return Err(Error::Contract("teacher must be frozen before distillation".into()));
    }
    student.ensure_trainable()?;
    let n = visible.shape().first().copied().unwrap_or(0);
    if n == 0 || thermal.shape().first() != Some(&n) {
        return Err(Error::Contract(format!(
            "unpaired data: {:?} visible vs {:?} thermal",
            visible.shape(),
            thermal.shape()
        )));
    }
    let targets: Vec<AttributeLabels> = classify(teacher, visible)?.into_iter().map(|c| c.labels).collect();
    let mut curve = vec![DistillEpoch {
        epoch: 0,
        feature_loss: feature_loss(teacher, student, visible, thermal)?,
        ce_loss: 0.0,
    }];
    let mut r = rng::stream(cfg.seed, "student");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        adam.config.lr = cosine_lr(cfg.lr, epoch - 1, cfg.epochs);
        rng::shuffle(&mut order, &mut r);
        let (mut fl, mut cl, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let vb = select_batch(visible, chunk)?;
            let tb = select_batch(thermal, chunk)?;
            let mut tape = Tape::new();
            let v = tape.constant(&vb);
            let t = tape.constant(&tb);
            let fv = teacher.features(&mut tape, v)?;
            let fv = tape.detach(fv);
            let ft = student.features(&mut tape, t)?;
            let l5 = eq5_loss(&mut tape, fv, ft)?;
            let logits = student.logits(&mut tape, ft)?;
            let mut ce = None;
            for (h, lg) in logits.iter().enumerate() {
                let tg: Vec<usize> = chunk.iter().map(|&i| targets[i].as_array()[h]).collect();
                let c = tape.cross_entropy(*lg, &tg)?;
                ce = Some(match ce {
                    None => c,
                    Some(a) => tape.add(a, c)?,
                });
            }
            let ce = ce.expect("three heads");
            let weighted = tape.scale(ce, cfg.ce_weight as f32);
            let loss = tape.add(l5, weighted)?;
            fl += tape.item(l5) as f64;
            cl += tape.item(ce) as f64;
            batches += 1;
            step(student, &mut adam, &tape, loss)?;
        }
        let rec = DistillEpoch {
            epoch,
            feature_loss: fl / batches as f64,
            ce_loss: cl / batches as f64,
        };
        log::info!("distill epoch {epoch}: eq5 {:.4} ce {:.4}", rec.feature_loss, rec.ce_loss);
        curve.push(rec);
    }
    Ok(curve)
}
