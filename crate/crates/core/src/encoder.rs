//! Toy vision-language degradation encoder.
//!
//! The image side is a strided-conv backbone followed by an adapter MLP; the
//! text side is a learnable label table followed by its own adapter. Both
//! outputs are L2-normalized so cosine similarity is a dot product.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::DatasetManifest;
use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::graph::softmax_in_place;
use crate::nn::params::init;
use crate::nn::{AdamW, Conv3, GradAccumulator, Graph, LayerNorm, Linear, ParamBuilder, ParamId, ParamSet, Tensor, Var};
use crate::scalar::Scalar;
use crate::schedule::LrSchedule;

/// Sharpening factor for label scores.
pub const DEFAULT_GAMMA: f64 = 100.0;
/// Initial contrastive temperature; stored as `ln τ`.
pub const INIT_TAU: f64 = 10.0;
pub const MIN_IMAGE_SIZE: usize = 16;
/// Pixel standardization ahead of the backbone.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.27;

/// Anything that maps a degraded image to a unit-norm degradation vector.
pub trait DegradationEncoder {
    fn dim(&self) -> usize;
    fn encode_image(&self, y: &Image) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderArch {
    pub dim: usize,
    pub widths: Vec<usize>,
    pub labels: Vec<String>,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            dim: 64,
            widths: vec![16, 32, 64, 64],
            labels: DegradationKind::ALL.iter().map(|k| k.label().to_string()).collect(),
        }
    }
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder dim and widths must be positive".into()));
        }
        if self.labels.is_empty() {
            return Err(Error::Config("encoder needs at least one label".into()));
        }
        let mut l = self.labels.clone();
        l.sort();
        l.dedup();
        if l.len() != self.labels.len() {
            return Err(Error::Config("duplicate encoder labels".into()));
        }
        Ok(())
    }
}

/// Linear-LN-GELU, Linear-LN-GELU, Linear over `[D, N]` columns.
#[derive(Clone, Debug)]
pub struct Adapter {
    l1: Linear,
    n1: LayerNorm,
    l2: Linear,
    n2: LayerNorm,
    l3: Linear,
}

impl Adapter {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Adapter {
            l1: Linear::new(&mut pb.child("l1"), dim, dim, true)?,
            n1: LayerNorm::new(&mut pb.child("n1"), dim)?,
            l2: Linear::new(&mut pb.child("l2"), dim, dim, true)?,
            n2: LayerNorm::new(&mut pb.child("n2"), dim)?,
            l3: Linear::new(&mut pb.child("l3"), dim, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = self.n1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.l2.forward(g, h)?;
        let h = self.n2.forward(g, h)?;
        let h = g.gelu(h);
        self.l3.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct Net {
    convs: Vec<Conv3>,
    head: Linear,
    image_adapter: Adapter,
    table: ParamId,
    text_adapter: Adapter,
    log_tau: ParamId,
}

pub struct ToyEncoder<T: Scalar> {
    pub arch: EncoderArch,
    pub params: ParamSet<T>,
    net: Net,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn new(arch: EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let mut convs = Vec::new();
        let mut cin = 3;
        {
            let mut bb = pb.child("backbone");
            for (i, &w) in arch.widths.iter().enumerate() {
                let mut cp = bb.child(&format!("conv{i}"));
                let wt = init::normal(cp.rng(), &[w, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt());
                convs.push(Conv3 { w: cp.add("w", wt)?, b: Some(cp.zeros("b", &[w])?), stride: 2 });
                cin = w;
            }
        }
        let head = Linear::new(&mut pb.child("backbone").child("head"), cin, arch.dim, true)?;
        let image_adapter = Adapter::new(&mut pb.child("image_adapter"), arch.dim)?;
        let m = arch.labels.len();
        let table = pb.child("labels").xavier("table", &[m, arch.dim], arch.dim, arch.dim)?;
        let text_adapter = Adapter::new(&mut pb.child("text_adapter"), arch.dim)?;
        let log_tau = pb.full("log_tau", &[1], INIT_TAU.ln())?;
        Ok(ToyEncoder { arch, params, net: Net { convs, head, image_adapter, table, text_adapter, log_tau } })
    }

    /// Rebuilds the architecture and takes its values from `params`.
    pub fn from_params(arch: EncoderArch, params: &ParamSet<T>) -> Result<Self> {
        let mut enc = Self::new(arch, 0)?;
        let copied = enc.params.load_from(params)?;
        if copied != enc.params.len() {
            return Err(Error::Checkpoint(format!(
                "encoder checkpoint has {copied} of {} expected parameters",
                enc.params.len()
            )));
        }
        Ok(enc)
    }

    pub fn labels(&self) -> &[String] {
        &self.arch.labels
    }

    pub fn label_index(&self, kind: DegradationKind) -> Result<usize> {
        self.arch
            .labels
            .iter()
            .position(|l| l == kind.label())
            .ok_or_else(|| Error::Config(format!("no encoder label {:?} for kind {kind}", kind.label())))
    }

    pub fn tau(&self) -> f64 {
        self.params.tensor(self.net.log_tau).item().to_f64_lossy().exp()
    }

    fn check_size(y: &Image) -> Result<()> {
        if y.width() < MIN_IMAGE_SIZE || y.height() < MIN_IMAGE_SIZE {
            return Err(Error::Shape(format!(
                "encoder needs images of at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {}x{}",
                y.width(),
                y.height()
            )));
        }
        Ok(())
    }

    /// Backbone output `[D, 1]` before the adapter.
    pub fn backbone_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        let shift = g.constant(Tensor::from_fn(&[c], |_| T::of(-INPUT_MEAN / INPUT_STD)));
        let scaled = g.scale(x, T::of(1.0 / INPUT_STD));
        let mut h = g.add_rows(scaled, shift)?;
        for c in &self.net.convs {
            h = c.forward(g, h)?;
            h = g.gelu(h);
        }
        let pooled = g.mean_cols(h);
        self.net.head.forward(g, pooled)
    }

    /// Adapter plus normalization: `[D, 1]` features to a `[1, D]` unit row.
    pub fn adapt_graph(&self, g: &mut Graph<'_, T>, feat: Var) -> Result<Var> {
        let a = self.net.image_adapter.forward(g, feat)?;
        let row = g.reshape(a, &[1, self.arch.dim])?;
        Ok(g.l2_normalize_rows(row))
    }

    pub fn embed_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = self.backbone_graph(g, x)?;
        self.adapt_graph(g, f)
    }

    /// All label embeddings as unit rows, `[M, D]`.
    pub fn text_graph(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let table = g.param(self.net.table);
        let cols = g.transpose(table)?;
        let a = self.net.text_adapter.forward(g, cols)?;
        let rows = g.transpose(a)?;
        Ok(g.l2_normalize_rows(rows))
    }

    pub fn tau_graph(&self, g: &mut Graph<'_, T>) -> Var {
        let lt = g.param(self.net.log_tau);
        g.exp(lt)
    }

    /// Contrastive loss for unit image rows `[B, D]` against their labels.
    pub fn batch_loss_graph(&self, g: &mut Graph<'_, T>, images: Var, labels: &[usize]) -> Result<Var> {
        let m = self.arch.labels.len();
        if labels.iter().any(|&l| l >= m) {
            return Err(Error::Param(format!("label index out of range for {m} labels")));
        }
        let text = self.text_graph(g)?;
        let onehot = g.constant(Tensor::from_fn(&[labels.len(), m], |i| {
            if labels[i / m] == i % m {
                T::one()
            } else {
                T::zero()
            }
        }));
        let batch_text = g.matmul(onehot, text)?;
        let tau = self.tau_graph(g);
        contrastive_loss_graph(g, images, batch_text, tau)
    }

    pub fn backbone_features(&self, y: &Image) -> Result<Vec<T>> {
        Self::check_size(y)?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(y.to_tensor());
        let f = self.backbone_graph(&mut g, x)?;
        Ok(g.value(f).data().to_vec())
    }

    fn adapt_features(&self, feat: &[T]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let f = g.constant(Tensor::new(vec![feat.len(), 1], feat.to_vec())?);
        let e = self.adapt_graph(&mut g, f)?;
        Ok(g.value(e).data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn label_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.params);
        let t = self.text_graph(&mut g)?;
        let d = self.arch.dim;
        Ok(g.value(t).data().chunks(d).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect())
    }

    /// Softmax over labels of `gamma · cos(image, label)`.
    pub fn score_labels(&self, y: &Image, gamma: f64) -> Result<Vec<f64>> {
        let d = self.encode_image(y)?;
        score_embeddings(&d, &self.label_embeddings()?, gamma)
    }

    pub fn classify(&self, y: &Image) -> Result<usize> {
        let s = self.score_labels(y, DEFAULT_GAMMA)?;
        Ok(argmax(&s))
    }
}

impl<T: Scalar> DegradationEncoder for ToyEncoder<T> {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn encode_image(&self, y: &Image) -> Result<Vec<f64>> {
        let f = self.backbone_features(y)?;
        self.adapt_features(&f)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// `softmax_i(gamma · cos(d, e_i))`.
pub fn score_embeddings(d: &[f64], labels: &[Vec<f64>], gamma: f64) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Param("empty label set".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Param(format!("gamma must be positive, got {gamma}")));
    }
    let mut s: Vec<f64> = labels.iter().map(|e| gamma * cosine(d, e)).collect();
    softmax_in_place(&mut s);
    Ok(s)
}

/// `−mean_i log softmax_j(τ · ⟨img_i, txt_j⟩)[i]` for unit rows `[B, D]`.
pub fn contrastive_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, images: Var, texts: Var, tau: Var) -> Result<Var> {
    let b = g.shape(images)[0];
    let sims = g.matmul_t(images, false, texts, true)?;
    let logits = g.mul_scalar(sims, tau)?;
    let logp = g.log_softmax(logits);
    let diag: Vec<usize> = (0..b).collect();
    let picked = g.pick(logp, &diag)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Value-only contrastive loss over precomputed embeddings.
pub fn contrastive_loss(images: &[Vec<f64>], texts: &[Vec<f64>], tau: f64) -> Result<f64> {
    if images.is_empty() || images.len() != texts.len() {
        return Err(Error::Param(format!("contrastive batch of {} images and {} labels", images.len(), texts.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Param(format!("tau must be positive, got {tau}")));
    }
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let d = images[0].len();
    let flat = |vs: &[Vec<f64>]| -> Result<Tensor<f64>> {
        Tensor::new(vec![vs.len(), d], vs.iter().flat_map(unit).collect())
    };
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let i = g.constant(flat(images)?);
    let t = g.constant(flat(texts)?);
    let tv = g.constant(Tensor::scalar(tau));
    let l = contrastive_loss_graph(&mut g, i, t, tv)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Epochs during which the backbone is trained too; frozen afterwards.
    pub backbone_warm_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 30, lr: 1e-3, warmup_epochs: 2, batch_size: 8, backbone_warm_epochs: 6, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub per_epoch: Vec<f64>,
}

impl LossCurve {
    /// Mean of the first and last `w` epochs.
    pub fn windowed(&self, w: usize) -> Option<(f64, f64)> {
        let n = self.per_epoch.len();
        if n == 0 {
            return None;
        }
        let w = w.clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.per_epoch[..w]), mean(&self.per_epoch[n - w..])))
    }
}

/// Contrastive fine-tuning on the training split of `manifest`.
/// `log` receives one line per epoch.
pub fn finetune<T: Scalar>(
    enc: &mut ToyEncoder<T>,
    manifest: &DatasetManifest,
    cfg: &FinetuneConfig,
    mut log: impl FnMut(&str),
) -> Result<LossCurve> {
    if manifest.kinds().len() < 2 {
        return Err(Error::Dataset("contrastive fine-tuning needs at least two degradation kinds".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("encoder batch_size must be at least 2".into()));
    }
    let (train, _) = manifest.split();
    let mut images = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for &i in &train {
        images.push(manifest.load_pair(i)?.1.to_tensor::<T>());
        labels.push(enc.label_index(manifest.records[i].kind())?);
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.lr, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch)?;
    let mut opt = AdamW::new(&enc.params, 0.9, 0.999, cfg.weight_decay);
    let mut acc = GradAccumulator::new(&enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut features: Option<Vec<Tensor<T>>> = None;
    let mut curve = LossCurve::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if epoch >= cfg.backbone_warm_epochs && features.is_none() {
            enc.params.set_trainable("backbone", false);
            let mut f = Vec::with_capacity(images.len());
            for x in &images {
                let mut g = Graph::new(&enc.params);
                let xv = g.constant(x.clone());
                let out = enc.backbone_graph(&mut g, xv)?;
                f.push(g.value(out).clone());
            }
            features = Some(f);
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&enc.params);
            let mut rows = Vec::with_capacity(batch.len());
            for &j in batch {
                let e = match &features {
                    Some(f) => {
                        let fv = g.constant(f[j].clone());
                        enc.adapt_graph(&mut g, fv)?
                    }
                    None => {
                        let xv = g.constant(images[j].clone());
                        enc.embed_graph(&mut g, xv)?
                    }
                };
                rows.push(e);
            }
            let stacked = g.concat(&rows)?;
            let lbl: Vec<usize> = batch.iter().map(|&j| labels[j]).collect();
            let loss = enc.batch_loss_graph(&mut g, stacked, &lbl)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Model(format!("encoder loss diverged at epoch {epoch}")));
            }
            total += lv.to_f64_lossy() * batch.len() as f64;
            let grads = g.backward(loss)?;
            acc.clear();
            acc.add(&enc.params, &grads, T::one());
            drop(g);
            opt.step(&mut enc.params, &acc, T::of(sched.lr_at(step)));
            step += 1;
        }
        let mean = total / train.len() as f64;
        curve.per_epoch.push(mean);
        log(&format!("epoch {} loss {:.6} tau {:.3}", epoch + 1, mean, enc.tau()));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyEncoder<f64> {
        ToyEncoder::new(EncoderArch { dim: 8, widths: vec![4, 4], ..EncoderArch::default() }, 3).unwrap()
    }

    #[test]
    fn encoding_is_unit_norm_and_deterministic() {
        let enc = small();
        let img = Image::from_fn(16, 20, |x, y, c| ((x * 3 + y * 5 + c) % 11) as f64 / 10.0);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&img).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert!(enc.encode_image(&Image::filled(15, 16, 0.5)).is_err());
    }

    #[test]
    fn score_hand_values() {
        let s = score_embeddings(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 2.0).unwrap();
        assert!((s[0] - 0.8808).abs() < 1e-4 && (s[1] - 0.1192).abs() < 1e-4);
        assert_eq!(score_embeddings(&[1.0, 0.0], &[vec![0.3, 0.1]], 100.0).unwrap(), vec![1.0]);
        let u = score_embeddings(&[0.2, 0.9], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]], 1e-9).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(score_embeddings(&[1.0], &[], 1.0).is_err());
    }

    #[test]
    fn contrastive_hand_values() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((contrastive_loss(&e, &e, 1.0).unwrap() - 0.3133).abs() < 1e-4);
        assert!(contrastive_loss(&e[..1], &e[1..], 3.0).unwrap().abs() < 1e-12);
        assert!(contrastive_loss(&[], &[], 1.0).is_err());
        assert!(contrastive_loss(&e, &e, 0.0).is_err());
    }

    #[test]
    fn scores_sum_to_one_and_tau_starts_at_ten() {
        let enc = small();
        let s = enc.score_labels(&Image::filled(16, 16, 0.4), DEFAULT_GAMMA).unwrap();
        assert_eq!(s.len(), 5);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((enc.tau() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn label_lookup() {
        let enc = small();
        assert_eq!(enc.label_index(DegradationKind::Rain).unwrap(), 3);
        let other = ToyEncoder::<f64>::new(EncoderArch { labels: vec!["a".into(), "b".into()], dim: 4, widths: vec![2] }, 0).unwrap();
        assert!(other.label_index(DegradationKind::Noise).is_err());
        assert!(EncoderArch { labels: vec!["a".into(), "a".into()], ..EncoderArch::default() }.validate().is_err());
    }
}
