//! End-to-end model: frozen backbone, optional LoRA on the backbone's final
//! projection, optional mixture-of-experts adaptation, attention pooling over
//! slices and a multi-label sigmoid head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter_params, load_balance_loss, LoraAdapter, MolreCache, MolreLayer};
use crate::backbone::{SliceBackbone, VolumeBackbone};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, linear, linear_backward, Tensor};

/// Single learnable query attending over the slices of each volume.
#[derive(Clone, Debug)]
pub struct AttentionPooler {
    pub q: Tensor,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    /// Pooling weights, `B×S`.
    pub alpha: Tensor,
}

impl AttentionPooler {
    pub fn new(d: usize) -> Self {
        Self { q: Tensor::zeros(&[d]) }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// `features` is `(B·S)×d`; returns `h: B×d`.
    pub fn forward(&self, features: &Tensor, batch: usize, slices: usize) -> Result<(Tensor, PoolCache)> {
        if slices == 0 || batch == 0 {
            return Err(Error::Data("attention pooling over an empty volume".into()));
        }
        let d = self.dim();
        if features.shape() != [batch * slices, d] {
            return Err(Error::shape("attention_pool", features.shape(), &[batch * slices, d]));
        }
        let scale = (d as f64).sqrt();
        let scores = Tensor::from_fn(&[batch, slices], |i| {
            tensor::dot(self.q.data(), features.row(i)) / scale
        });
        let alpha = tensor::softmax(&scores, 1)?;
        let mut h = vec![0.0; batch * d];
        for b in 0..batch {
            let hr = &mut h[b * d..(b + 1) * d];
            for s in 0..slices {
                let a = alpha.at(b, s);
                for (o, f) in hr.iter_mut().zip(features.row(b * slices + s)) {
                    *o += a * f;
                }
            }
        }
        Ok((Tensor::new(&[batch, d], h)?, PoolCache { alpha }))
    }

    /// Accumulates `dq` and returns `dF`.
    pub fn backward(&mut self, features: &Tensor, cache: &PoolCache, grad_h: &Tensor) -> Result<Tensor> {
        let (batch, slices) = (cache.alpha.rows(), cache.alpha.cols());
        let d = self.dim();
        let scale = (d as f64).sqrt();
        let g_alpha = Tensor::from_fn(&[batch, slices], |i| {
            tensor::dot(grad_h.row(i / slices), features.row(i))
        });
        let g_scores = tensor::softmax_backward(&cache.alpha, &g_alpha, 1)?;
        let mut g_q = vec![0.0; d];
        let mut g_f = vec![0.0; batch * slices * d];
        for b in 0..batch {
            for s in 0..slices {
                let row = b * slices + s;
                let a = cache.alpha.at(b, s);
                let gs = g_scores.at(b, s) / scale;
                let f = features.row(row);
                let gh = grad_h.row(b);
                let gf = &mut g_f[row * d..(row + 1) * d];
                for j in 0..d {
                    g_q[j] += gs * f[j];
                    gf[j] = a * gh[j] + gs * self.q.data()[j];
                }
            }
        }
        self.q.accumulate_grad(&g_q);
        Tensor::new(&[batch * slices, d], g_f)
    }
}

pub fn attention_pool(pooler: &AttentionPooler, features: &Tensor, batch: usize, slices: usize) -> Result<Tensor> {
    Ok(pooler.forward(features, batch, slices)?.0)
}

/// Independent per-class sigmoid outputs.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w: Tensor,
    pub bias: Option<Tensor>,
}

impl ClassifierHead {
    pub fn new(d: usize, classes: usize, with_bias: bool) -> Self {
        Self {
            w: Tensor::zeros(&[classes, d]),
            bias: with_bias.then(|| Tensor::zeros(&[classes])),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        linear(h, &self.w, self.bias.as_ref())
    }

    pub fn backward(&mut self, h: &Tensor, grad_logits: &Tensor) -> Tensor {
        let (g_h, g_w, g_b) = linear_backward(h, &self.w, grad_logits);
        self.w.accumulate_grad(g_w.data());
        if let Some(b) = &mut self.bias {
            b.accumulate_grad(g_b.data());
        }
        g_h
    }
}

pub fn classify(head: &ClassifierHead, h: &Tensor) -> Result<Tensor> {
    Ok(tensor::sigmoid(&head.logits(h)?))
}

/// Backbone features for every slice, rows ordered `b·S + s`.
pub fn extract_slice_features(stub: &SliceBackbone, lora: Option<&LoraAdapter>, x: &Tensor) -> Result<Tensor> {
    let trunk = stub.trunk(x)?;
    let mut f = stub.project(&trunk)?;
    if let Some(l) = lora {
        let (delta, _) = l.delta(&trunk)?;
        add_in_place(&mut f, &delta);
    }
    Ok(f)
}

/// Slice features → optional mixture layer → attention pooling → head.
pub fn forward_2d(
    stub: &SliceBackbone,
    molre: Option<&MolreLayer>,
    pooler: &AttentionPooler,
    head: &ClassifierHead,
    x: &Tensor,
) -> Result<Tensor> {
    let slices = x.shape().get(2).copied().unwrap_or(0);
    let batch = x.shape()[0];
    let f = extract_slice_features(stub, None, x)?;
    let f = match molre {
        Some(m) => m.forward(&f)?,
        None => f,
    };
    let h = attention_pool(pooler, &f, batch, slices)?;
    classify(head, &h)
}

/// Pooled volume embedding → optional mixture layer (routed once per volume) → head.
pub fn forward_3d(
    stub: &VolumeBackbone,
    molre: Option<&MolreLayer>,
    head: &ClassifierHead,
    x: &Tensor,
) -> Result<Tensor> {
    let f = stub.project(&stub.trunk(x)?)?;
    let f = match molre {
        Some(m) => m.forward(&f)?,
        None => f,
    };
    classify(head, &f)
}

fn add_in_place(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BaselineFrozen,
    Lora,
    Molre,
    Molre3d,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BaselineFrozen => "baseline-frozen",
            Mode::Lora => "lora",
            Mode::Molre => "molre",
            Mode::Molre3d => "molre3d",
        }
    }

    pub fn is_volumetric(self) -> bool {
        self == Mode::Molre3d
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-frozen" => Ok(Mode::BaselineFrozen),
            "lora" => Ok(Mode::Lora),
            "molre" => Ok(Mode::Molre),
            "molre3d" => Ok(Mode::Molre3d),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Architecture hyperparameters needed to build a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub mode: Mode,
    pub in_channels: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub experts: usize,
    pub rank: usize,
    pub expert_scaling: f64,
    pub router_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub classifier_bias: bool,
    pub backbone_seed: u64,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Slice(SliceBackbone),
    Volume(VolumeBackbone),
}

impl Backbone {
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Slice(b) => b.trunk(x),
            Backbone::Volume(b) => b.trunk(x),
        }
    }

    pub fn project(&self, trunk: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Slice(b) => b.project(trunk),
            Backbone::Volume(b) => b.project(trunk),
        }
    }

    pub fn trunk_dim(&self) -> usize {
        match self {
            Backbone::Slice(b) => b.trunk_dim(),
            Backbone::Volume(b) => b.trunk_dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Backbone::Slice(b) => b.num_params(),
            Backbone::Volume(b) => b.num_params(),
        }
    }

    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Backbone::Slice(b) => b.frozen_tensors(),
            Backbone::Volume(b) => b.frozen_tensors(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Classifier head and pooling query.
    Head,
    /// LoRA, experts and router.
    Adapter,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a mut Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub lora: Option<LoraAdapter>,
    pub molre: Option<MolreLayer>,
    pub pooler: Option<AttentionPooler>,
    pub head: ClassifierHead,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub batch: usize,
    pub slices: usize,
    trunk: Tensor,
    lora_ax: Option<Tensor>,
    features: Tensor,
    molre: Option<MolreCache>,
    adapted: Tensor,
    pool: Option<PoolCache>,
    pooled: Tensor,
    pub probs: Tensor,
}

impl ForwardPass {
    /// Rows the router was evaluated on (0 without a mixture layer).
    pub fn routed_rows(&self) -> usize {
        self.molre.as_ref().map_or(0, MolreCache::routed_rows)
    }

    pub fn gates(&self) -> Option<&Tensor> {
        self.molre.as_ref().map(MolreCache::gates)
    }

    pub fn pool_weights(&self) -> Option<&Tensor> {
        self.pool.as_ref().map(|p| &p.alpha)
    }

    pub fn adapted_features(&self) -> &Tensor {
        &self.adapted
    }
}

const INIT_TAG: u64 = 0x1A17;

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.classes == 0 || spec.feature_dim == 0 || spec.in_channels == 0 {
            return Err(Error::Config("classes, feature_dim and channels must be positive".into()));
        }
        let d = spec.feature_dim;
        let init = RngStream::keyed(seed, &[INIT_TAG]);
        let backbone = if spec.mode.is_volumetric() {
            Backbone::Volume(VolumeBackbone::new(spec.in_channels, d, spec.backbone_seed))
        } else {
            Backbone::Slice(SliceBackbone::new(spec.in_channels, d, spec.backbone_seed))
        };
        let lora = match spec.mode {
            Mode::Lora | Mode::Molre => {
                let mut l = LoraAdapter::new(backbone.trunk_dim(), d, spec.lora_rank, spec.lora_alpha)?;
                l.init(&mut init.split(1));
                Some(l)
            }
            _ => None,
        };
        let molre = match spec.mode {
            Mode::Molre | Mode::Molre3d => {
                let mut m = MolreLayer::feature_space(d, spec.experts, spec.rank, spec.router_hidden, spec.expert_scaling)?;
                init_adapter_params(&mut m.bank, &mut m.router, &mut init.split(2));
                Some(m)
            }
            _ => None,
        };
        let pooler = (!spec.mode.is_volumetric()).then(|| AttentionPooler::new(d));
        let mut head = ClassifierHead::new(d, spec.classes, spec.classifier_bias);
        let mut rng = init.split(3);
        head.w = Tensor::randn(head.w.shape(), (1.0 / d as f64).sqrt(), &mut rng);
        Ok(Self {
            spec: spec.clone(),
            backbone,
            lora,
            molre,
            pooler,
            head,
        })
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    /// Frozen trunk features: `(B·S)×c` for slices, `B×c` for volumes.
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.trunk(x)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        let batch = x.shape()[0];
        let slices = if self.spec.mode.is_volumetric() { 1 } else { x.shape().get(2).copied().unwrap_or(0) };
        self.forward_trunk(self.trunk(x)?, batch, slices)
    }

    pub fn forward_trunk(&self, trunk: Tensor, batch: usize, slices: usize) -> Result<ForwardPass> {
        let mut features = self.backbone.project(&trunk)?;
        let lora_ax = match &self.lora {
            Some(l) => {
                let (delta, ax) = l.delta(&trunk)?;
                add_in_place(&mut features, &delta);
                Some(ax)
            }
            None => None,
        };
        let (adapted, molre) = match &self.molre {
            Some(m) => {
                let (h, c) = m.forward_cached(&features)?;
                (h, Some(c))
            }
            None => (features.clone(), None),
        };
        let (pooled, pool) = match &self.pooler {
            Some(p) => {
                let (h, c) = p.forward(&adapted, batch, slices)?;
                (h, Some(c))
            }
            None => (adapted.clone(), None),
        };
        let probs = tensor::sigmoid(&self.head.logits(&pooled)?);
        Ok(ForwardPass {
            batch,
            slices,
            trunk,
            lora_ax,
            features,
            molre,
            adapted,
            pool,
            pooled,
            probs,
        })
    }

    /// Backpropagates `dL/dprobs` into every trainable parameter.
    ///
    /// With `balance_weight > 0` a load-balancing term on the gates is added;
    /// its value is returned (already weighted).
    pub fn backward(&mut self, pass: &ForwardPass, grad_probs: &Tensor, balance_weight: f64) -> Result<f64> {
        let g_logits = tensor::sigmoid_backward(&pass.probs, grad_probs);
        let g_pooled = self.head.backward(&pass.pooled, &g_logits);
        let g_adapted = match (&mut self.pooler, &pass.pool) {
            (Some(p), Some(c)) => p.backward(&pass.adapted, c, &g_pooled)?,
            _ => g_pooled,
        };
        let mut aux = 0.0;
        let g_features = match (&mut self.molre, &pass.molre) {
            (Some(m), Some(c)) => {
                let extra = if balance_weight > 0.0 {
                    let (l, mut g) = load_balance_loss(c.gates());
                    aux = balance_weight * l;
                    g.data_mut().iter_mut().for_each(|v| *v *= balance_weight);
                    Some(g)
                } else {
                    None
                };
                m.backward(&pass.features, c, &g_adapted, extra.as_ref())?
            }
            _ => g_adapted,
        };
        if let (Some(l), Some(ax)) = (&mut self.lora, &pass.lora_ax) {
            l.backward(&pass.trunk, ax, &g_features);
        }
        Ok(aux)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        let mut push = |name: String, group, tensor| out.push(ParamMut { name, group, tensor });
        push("head.weight".into(), ParamGroup::Head, &mut self.head.w);
        if let Some(b) = &mut self.head.bias {
            push("head.bias".into(), ParamGroup::Head, b);
        }
        if let Some(p) = &mut self.pooler {
            push("pooler.query".into(), ParamGroup::Head, &mut p.q);
        }
        if let Some(l) = &mut self.lora {
            push("lora.a".into(), ParamGroup::Adapter, &mut l.a);
            push("lora.b".into(), ParamGroup::Adapter, &mut l.b);
        }
        if let Some(m) = &mut self.molre {
            for (i, e) in m.bank.experts.iter_mut().enumerate() {
                push(format!("molre.expert{i}.a"), ParamGroup::Adapter, &mut e.a);
                push(format!("molre.expert{i}.b"), ParamGroup::Adapter, &mut e.b);
            }
            push("molre.router.w1".into(), ParamGroup::Adapter, &mut m.router.w1);
            push("molre.router.b1".into(), ParamGroup::Adapter, &mut m.router.b1);
            push("molre.router.w2".into(), ParamGroup::Adapter, &mut m.router.w2);
            push("molre.router.b2".into(), ParamGroup::Adapter, &mut m.router.b2);
        }
        out
    }

    /// Read-only view of the trainable tensors, in the same order as [`Model::params_mut`].
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = vec![("head.weight".to_string(), ParamGroup::Head, &self.head.w)];
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".into(), ParamGroup::Head, b));
        }
        if let Some(p) = &self.pooler {
            out.push(("pooler.query".into(), ParamGroup::Head, &p.q));
        }
        if let Some(l) = &self.lora {
            out.push(("lora.a".into(), ParamGroup::Adapter, &l.a));
            out.push(("lora.b".into(), ParamGroup::Adapter, &l.b));
        }
        if let Some(m) = &self.molre {
            for (i, e) in m.bank.experts.iter().enumerate() {
                out.push((format!("molre.expert{i}.a"), ParamGroup::Adapter, &e.a));
                out.push((format!("molre.expert{i}.b"), ParamGroup::Adapter, &e.b));
            }
            out.push(("molre.router.w1".into(), ParamGroup::Adapter, &m.router.w1));
            out.push(("molre.router.b1".into(), ParamGroup::Adapter, &m.router.b1));
            out.push(("molre.router.w2".into(), ParamGroup::Adapter, &m.router.w2));
            out.push(("molre.router.b2".into(), ParamGroup::Adapter, &m.router.b2));
        }
        out
    }

    /// Tensors that never receive gradients.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.frozen_tensors();
        if let Some(m) = &self.molre {
            v.push(("molre.w0".into(), &m.w0));
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }
}
