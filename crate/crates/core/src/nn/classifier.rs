use serde::{Deserialize, Serialize};

use super::graph::{clamped_sigmoid, Graph, LeafGrad, Var};
use super::scalar::{Dual, Real};
use super::tensor::{GradientMap, ParamSet, Tensor};
use super::Differentiable;
use crate::data::{Example, PAD};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoder {
    /// Mean of token embeddings.
    MeanPool,
    /// Convolutions over several window widths, max-pooled over time.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_encoder")]
    pub encoder: Encoder,
    #[serde(default = "default_conv_widths")]
    pub conv_widths: Vec<usize>,
    #[serde(default = "default_conv_maps")]
    pub conv_maps: usize,
}

fn default_embed_dim() -> usize {
    32
}
fn default_hidden() -> usize {
    384
}
fn default_encoder() -> Encoder {
    Encoder::MeanPool
}
fn default_conv_widths() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_conv_maps() -> usize {
    16
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize) -> Self {
        ClassifierConfig {
            vocab_size,
            embed_dim: default_embed_dim(),
            hidden: default_hidden(),
            encoder: default_encoder(),
            conv_widths: default_conv_widths(),
            conv_maps: default_conv_maps(),
        }
    }

    fn feature_dim(&self) -> usize {
        match self.encoder {
            Encoder::MeanPool => self.embed_dim,
            Encoder::Conv => self.conv_widths.len() * self.conv_maps,
        }
    }
}

/// A labelled mini-batch with one loss coefficient per item.
///
/// The batch loss is `Σ coef_i · BCE_i`; [`LabeledBatch::mean`] uses
/// `coef = 1/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub seqs: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
    pub coefs: Vec<f64>,
}

impl LabeledBatch {
    pub fn mean(seqs: Vec<Vec<usize>>, labels: Vec<f64>) -> Result<Self> {
        let m = seqs.len();
        if m == 0 {
            return Err(Error::EmptyInput("batch".into()));
        }
        Self::weighted(seqs, labels, vec![1.0 / m as f64; m])
    }

    pub fn weighted(seqs: Vec<Vec<usize>>, labels: Vec<f64>, coefs: Vec<f64>) -> Result<Self> {
        if seqs.len() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "sequences vs labels",
                left: seqs.len(),
                right: labels.len(),
            });
        }
        if seqs.len() != coefs.len() {
            return Err(Error::LengthMismatch {
                what: "sequences vs loss coefficients",
                left: seqs.len(),
                right: coefs.len(),
            });
        }
        Ok(LabeledBatch {
            seqs,
            labels,
            coefs,
        })
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let (seqs, labels): (Vec<_>, Vec<_>) = examples
            .into_iter()
            .map(|e| (e.seq.ids.clone(), e.label.as_f64()))
            .unzip();
        Self::mean(seqs, labels)
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Same items with every coefficient multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.coefs.iter_mut().for_each(|c| *c *= s);
        out
    }
}

/// Embedding → encoder → tanh dense layer → sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        if config.vocab_size <= crate::data::NUM_RESERVED {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::Config("embed_dim and hidden must be >= 1".into()));
        }
        if config.encoder == Encoder::Conv
            && (config.conv_maps == 0
                || config.conv_widths.is_empty()
                || config.conv_widths.contains(&0))
        {
            return Err(Error::Config("conv encoder needs widths >= 1 and maps >= 1".into()));
        }
        Ok(Classifier { config })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c = &self.config;
        let mut out = vec![("embedding".to_string(), vec![c.vocab_size, c.embed_dim], c.embed_dim)];
        if c.encoder == Encoder::Conv {
            for &w in &c.conv_widths {
                let fan = w * c.embed_dim;
                out.push((format!("conv{w}.kernel"), vec![fan, c.conv_maps], fan));
                out.push((format!("conv{w}.bias"), vec![c.conv_maps], fan));
            }
        }
        let f = c.feature_dim();
        out.push(("hidden.weight".into(), vec![f, c.hidden], f));
        out.push(("hidden.bias".into(), vec![c.hidden], f));
        out.push(("output.weight".into(), vec![c.hidden, 1], c.hidden));
        out.push(("output.bias".into(), vec![1], c.hidden));
        out
    }

    /// Uniform(±1/√fan_in) per layer from a seeded stream.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = util::rng(seed, 0x1417);
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in self.layout() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params
                .insert(name, Tensor::uniform(&shape, bound, &mut rng))
                .expect("layout names are unique");
        }
        params
    }

    /// Checks that `params` has exactly this model's layout.
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        let mut expected = ParamSet::new();
        for (name, shape, _) in self.layout() {
            expected.insert(name, Tensor::zeros(&shape))?;
        }
        expected.check_same_layout(params)
    }

    fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet,
        tangent: Option<&ParamSet>,
        seqs: &[&[usize]],
    ) -> Result<Var> {
        let leaf = |g: &mut Graph<T>, name: &str| -> Result<Var> {
            let t = params.get(name)?;
            let d = tangent.map(|tp| tp.get(name)).transpose()?;
            Ok(g.param(name, t, d))
        };
        let emb = leaf(g, "embedding")?;
        let features = match self.config.encoder {
            Encoder::MeanPool => g.mean_embed(emb, seqs)?,
            Encoder::Conv => {
                let mut parts = Vec::new();
                for &w in &self.config.conv_widths {
                    let k = leaf(g, &format!("conv{w}.kernel"))?;
                    let b = leaf(g, &format!("conv{w}.bias"))?;
                    parts.push(g.conv_max(emb, k, b, w, seqs, PAD)?);
                }
                g.concat_cols(&parts)?
            }
        };
        let w1 = leaf(g, "hidden.weight")?;
        let b1 = leaf(g, "hidden.bias")?;
        let h = g.linear(features, w1, b1)?;
        let h = g.tanh(h);
        let w2 = leaf(g, "output.weight")?;
        let b2 = leaf(g, "output.bias")?;
        g.linear(h, w2, b2)
    }

    /// Probability of the positive (fake) class per sequence, strictly
    /// inside (0, 1).
    pub fn predict(&self, params: &ParamSet, seqs: &[&[usize]]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f64>::new();
        let z = self.logits(&mut g, params, None, seqs)?;
        if let Some(bad) = g.first_non_finite() {
            return Err(Error::NonFinite(bad.to_string()));
        }
        Ok(g.value(z).iter().map(|&z| clamped_sigmoid(z).0).collect())
    }

    fn run<T: Real>(
        &self,
        params: &ParamSet,
        tangent: Option<&ParamSet>,
        batch: &LabeledBatch,
    ) -> Result<(T, Vec<LeafGrad<T>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch".into()));
        }
        let seqs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<T>::new();
        let z = self.logits(&mut g, params, tangent, &seqs)?;
        let loss = g.bce_logits(z, &batch.labels, &batch.coefs)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            let at = g.first_non_finite().unwrap_or("loss");
            return Err(Error::NonFinite(at.to_string()));
        }
        Ok((value, g.backward(loss)?))
    }
}

/// Gathers leaf gradients into `layout`'s shape; missing leaves stay zero.
pub(crate) fn collect_grads<T: Real>(
    layout: &ParamSet,
    leaves: Vec<LeafGrad<T>>,
    part: impl Fn(T) -> f64,
) -> Result<GradientMap> {
    let mut out = layout.zeros_like();
    for lg in leaves {
        let t = out.get_mut(&lg.name)?;
        for (dst, v) in t.data_mut().iter_mut().zip(lg.grad) {
            *dst += part(v);
        }
    }
    Ok(out)
}

impl Differentiable for Classifier {
    type Batch = LabeledBatch;

    fn loss(&self, params: &ParamSet, batch: &LabeledBatch) -> Result<f64> {
        let seqs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<f64>::new();
        let z = self.logits(&mut g, params, None, &seqs)?;
        let loss = g.bce_logits(z, &batch.labels, &batch.coefs)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(g.first_non_finite().unwrap_or("loss").into()));
        }
        Ok(v)
    }

    fn loss_and_grad(&self, params: &ParamSet, batch: &LabeledBatch) -> Result<(f64, GradientMap)> {
        let (loss, leaves) = self.run::<f64>(params, None, batch)?;
        Ok((loss, collect_grads(params, leaves, |v| v)?))
    }

    fn hessian_vector(
        &self,
        params: &ParamSet,
        batch: &LabeledBatch,
        direction: &ParamSet,
    ) -> Result<GradientMap> {
        params.check_same_layout(direction)?;
        let (_, leaves) = self.run::<Dual>(params, Some(direction), batch)?;
        collect_grads(params, leaves, Real::tangent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{fd_check, random_batch};

    fn tiny(encoder: Encoder) -> Classifier {
        Classifier::new(ClassifierConfig {
            vocab_size: 9,
            embed_dim: 3,
            hidden: 4,
            encoder,
            conv_widths: vec![1, 2],
            conv_maps: 2,
        })
        .unwrap()
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let m = tiny(Encoder::MeanPool);
        let mut p = m.init(1);
        p.get_mut("output.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("output.bias").unwrap().data_mut().fill(0.0);
        let preds = m.predict(&p, &[&[2, 5, 6, 3], &[2, 7, 3]]).unwrap();
        assert_eq!(preds, vec![0.5, 0.5]);
    }

    #[test]
    fn batch_order_is_irrelevant() {
        let m = tiny(Encoder::Conv);
        let p = m.init(2);
        let a: Vec<&[usize]> = vec![&[2, 5, 3], &[2, 6, 7, 8, 3], &[2, 8, 3]];
        let b: Vec<&[usize]> = vec![a[2], a[0], a[1]];
        let pa = m.predict(&p, &a).unwrap();
        let pb = m.predict(&p, &b).unwrap();
        assert_eq!(pb, vec![pa[2], pa[0], pa[1]]);
        assert_eq!(m.predict(&p, &a).unwrap(), pa);
    }

    #[test]
    fn out_of_vocab_id_is_error() {
        let m = tiny(Encoder::MeanPool);
        let p = m.init(0);
        assert!(matches!(
            m.predict(&p, &[&[2, 9, 3]]),
            Err(Error::TokenOutOfRange { id: 9, .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, enc) in [(0, Encoder::MeanPool), (1, Encoder::Conv), (2, Encoder::MeanPool)] {
            let m = tiny(enc);
            let p = m.init(seed);
            let batch = random_batch(9, 5, seed);
            let err = fd_check(&m, &p, &batch, 1e-5).unwrap();
            assert!(err < 1e-4, "{enc:?}: {err}");
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let m = tiny(Encoder::MeanPool);
        let p = m.init(5);
        let batch = random_batch(9, 4, 5);
        let (l1, g1) = m.loss_and_grad(&p, &batch).unwrap();
        let (l2, g2) = m.loss_and_grad(&p, &batch.scaled(2.0)).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn unused_embedding_rows_get_exact_zero() {
        let m = tiny(Encoder::MeanPool);
        let p = m.init(3);
        let batch = LabeledBatch::mean(vec![vec![2, 5, 3]], vec![1.0]).unwrap();
        let (_, g) = m.loss_and_grad(&p, &batch).unwrap();
        let emb = g.get("embedding").unwrap().data();
        for row in [0, 1, 4, 6, 7, 8] {
            assert!(emb[row * 3..row * 3 + 3].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn validate_rejects_foreign_layout() {
        let m = tiny(Encoder::MeanPool);
        assert!(m.validate(&m.init(0)).is_ok());
        assert!(m.validate(&tiny(Encoder::Conv).init(0)).is_err());
    }
}
