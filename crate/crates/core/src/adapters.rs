//! Low-rank adapters: a single LoRA update, a bank of low-rank experts, the
//! soft router that mixes them, and the combined mixture layer
//!
//! ```text
//! h = W0·x + Σ_i g_i(x) · s · B_i·(A_i·x)
//! g(x) = softmax(W2 · relu(W1·x + b1) + b2)
//! ```
//!
//! `W0` is frozen. Every expert shares the rank and the scaling `s`, which
//! defaults to `alpha / rank` so a single-expert mixture is exactly LoRA.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, linear, linear_backward, Tensor};

/// Single low-rank update `ΔW = (alpha / rank) · B·A`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(d: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || rank > d.min(d_out) {
            return Err(Error::Config(format!(
                "lora rank {rank} must be in 1..={}",
                d.min(d_out)
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("lora alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            a: Tensor::zeros(&[rank, d]),
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            alpha,
        })
    }

    /// `A ~ N(0, 1/d)`, `B = 0`.
    pub fn init(&mut self, rng: &mut RngStream) {
        let d = self.a.cols();
        self.a = Tensor::randn(&[self.rank, d], (1.0 / d as f64).sqrt(), rng);
        self.b = Tensor::zeros(self.b.shape());
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Returns `s·B·A·x` per row and the cached `A·x`.
    pub fn delta(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let ax = linear(x, &self.a, None)?;
        let mut bax = linear(&ax, &self.b, None)?;
        let s = self.scaling();
        bax.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok((bax, ax))
    }

    /// Accumulates `dA`, `dB` and returns `dx`.
    pub fn backward(&mut self, x: &Tensor, ax: &Tensor, grad_out: &Tensor) -> Tensor {
        let s = self.scaling();
        let scaled = Tensor::from_fn(grad_out.shape(), |i| s * grad_out.data()[i]);
        let (g_ax, g_b, _) = linear_backward(ax, &self.b, &scaled);
        self.b.accumulate_grad(g_b.data());
        let (g_x, g_a, _) = linear_backward(x, &self.a, &g_ax);
        self.a.accumulate_grad(g_a.data());
        g_x
    }
}

/// `h = W0·x + (alpha/r)·B·A·x` for every row of `x`.
pub fn lora_forward(adapter: &LoraAdapter, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w0.shape() != [adapter.out_dim(), adapter.in_dim()] {
        return Err(Error::shape("lora_forward", w0.shape(), &[adapter.out_dim(), adapter.in_dim()]));
    }
    let mut h = linear(x, w0, None)?;
    let (delta, _) = adapter.delta(x)?;
    for (hv, dv) in h.data_mut().iter_mut().zip(delta.data()) {
        *hv += dv;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub a: Tensor,
    pub b: Tensor,
}

/// `K` low-rank experts sharing `(rank, d, d_out)`.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
    rank: usize,
}

impl ExpertBank {
    pub fn new(k: usize, d: usize, d_out: usize, rank: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("expert bank needs at least one expert".into()));
        }
        if rank == 0 || rank > d.min(d_out) {
            return Err(Error::Config(format!(
                "expert rank {rank} must be in 1..={}",
                d.min(d_out)
            )));
        }
        let experts = (0..k)
            .map(|_| Expert {
                a: Tensor::zeros(&[rank, d]),
                b: Tensor::zeros(&[d_out, rank]),
            })
            .collect();
        Ok(Self { experts, rank })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn in_dim(&self) -> usize {
        self.experts[0].a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].b.rows()
    }

    pub fn num_params(&self) -> usize {
        self.experts.iter().map(|e| e.a.len() + e.b.len()).sum()
    }
}

/// Two-layer MLP producing a softmax distribution over experts.
#[derive(Clone, Debug)]
pub struct Router {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct RouterCache {
    pub pre: Tensor,
    pub hidden: Tensor,
    pub gates: Tensor,
}

impl Router {
    pub fn new(d: usize, hidden: usize, k: usize) -> Result<Self> {
        if d == 0 || hidden == 0 || k == 0 {
            return Err(Error::Config(format!(
                "router dims must be positive (d={d}, d_h={hidden}, K={k})"
            )));
        }
        Ok(Self {
            w1: Tensor::zeros(&[hidden, d]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[k, hidden]),
            b2: Tensor::zeros(&[k]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.w2.rows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.gates)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<RouterCache> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(Error::shape("router_forward", x.shape(), self.w1.shape()));
        }
        let pre = linear(x, &self.w1, Some(&self.b1))?;
        let hidden = tensor::relu(&pre);
        let logits = linear(&hidden, &self.w2, Some(&self.b2))?;
        let gates = tensor::softmax(&logits, 1)?;
        Ok(RouterCache { pre, hidden, gates })
    }

    /// Accumulates router parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &Tensor, cache: &RouterCache, grad_gates: &Tensor) -> Result<Tensor> {
        let g_logits = tensor::softmax_backward(&cache.gates, grad_gates, 1)?;
        let (g_hidden, g_w2, g_b2) = linear_backward(&cache.hidden, &self.w2, &g_logits);
        self.w2.accumulate_grad(g_w2.data());
        self.b2.accumulate_grad(g_b2.data());
        let g_pre = tensor::relu_backward(&cache.pre, &g_hidden);
        let (g_x, g_w1, g_b1) = linear_backward(x, &self.w1, &g_pre);
        self.w1.accumulate_grad(g_w1.data());
        self.b1.accumulate_grad(g_b1.data());
        Ok(g_x)
    }
}

pub fn router_forward(router: &Router, x: &Tensor) -> Result<Tensor> {
    router.forward(x)
}

/// Frozen base weight plus a softly routed expert bank.
#[derive(Clone, Debug)]
pub struct MolreLayer {
    pub w0: Tensor,
    pub bank: ExpertBank,
    pub router: Router,
    scaling: f64,
}

#[derive(Clone, Debug)]
pub struct MolreCache {
    pub router: RouterCache,
    /// `A_i·x` per expert.
    pub ax: Vec<Tensor>,
    /// `B_i·A_i·x` per expert, unscaled.
    pub bax: Vec<Tensor>,
}

impl MolreCache {
    pub fn gates(&self) -> &Tensor {
        &self.router.gates
    }

    /// Number of feature rows the router was evaluated on.
    pub fn routed_rows(&self) -> usize {
        self.router.gates.rows()
    }
}

impl MolreLayer {
    pub fn new(w0: Tensor, bank: ExpertBank, router: Router, scaling: f64) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Config("MoLRE layer needs K >= 1".into()));
        }
        if w0.shape() != [bank.out_dim(), bank.in_dim()] {
            return Err(Error::shape("molre W0", w0.shape(), &[bank.out_dim(), bank.in_dim()]));
        }
        if router.in_dim() != bank.in_dim() || router.num_experts() != bank.len() {
            return Err(Error::shape(
                "molre router",
                router.w1.shape(),
                &[bank.len(), bank.in_dim()],
            ));
        }
        Ok(Self {
            w0,
            bank,
            router,
            scaling,
        })
    }

    /// Feature-space layer with `W0 = I` (the `[N, d] → [N, d]` case).
    pub fn feature_space(d: usize, k: usize, rank: usize, hidden: usize, scaling: f64) -> Result<Self> {
        Self::new(
            Tensor::identity(d),
            ExpertBank::new(k, d, d, rank)?,
            Router::new(d, hidden, k)?,
            scaling,
        )
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn num_trainable(&self) -> usize {
        self.bank.num_params() + self.router.num_params()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MolreCache)> {
        if x.shape().len() != 2 || x.cols() != self.bank.in_dim() {
            return Err(Error::shape("molre_forward", x.shape(), self.w0.shape()));
        }
        let router = self.router.forward_cached(x)?;
        let mut h = linear(x, &self.w0, None)?;
        let d_out = h.cols();
        let mut ax = Vec::with_capacity(self.bank.len());
        let mut bax = Vec::with_capacity(self.bank.len());
        for (i, e) in self.bank.experts.iter().enumerate() {
            let a = linear(x, &e.a, None)?;
            let b = linear(&a, &e.b, None)?;
            for n in 0..x.rows() {
                let w = router.gates.at(n, i) * self.scaling;
                let hr = &mut h.data_mut()[n * d_out..(n + 1) * d_out];
                for (hv, bv) in hr.iter_mut().zip(b.row(n)) {
                    *hv += w * bv;
                }
            }
            ax.push(a);
            bax.push(b);
        }
        Ok((h, MolreCache { router, ax, bax }))
    }

    /// Accumulates expert and router gradients (never `W0`) and returns `dx`.
    ///
    /// `extra_gate_grad` adds a direct gradient on the gates, e.g. from an
    /// auxiliary balancing term.
    pub fn backward(
        &mut self,
        x: &Tensor,
        cache: &MolreCache,
        grad_out: &Tensor,
        extra_gate_grad: Option<&Tensor>,
    ) -> Result<Tensor> {
        let n_rows = x.rows();
        let d = x.cols();
        let d_out = grad_out.cols();
        let k = self.bank.len();
        let s = self.scaling;

        // W0 is frozen: only propagate through it.
        let mut gx = vec![0.0; n_rows * d];
        for n in 0..n_rows {
            let g = grad_out.row(n);
            let gxr = &mut gx[n * d..(n + 1) * d];
            for (j, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for (o, w) in gxr.iter_mut().zip(self.w0.row(j)) {
                    *o += gv * w;
                }
            }
        }

        let mut g_gates = match extra_gate_grad {
            Some(t) => t.clone(),
            None => Tensor::zeros(&[n_rows, k]),
        };
        let gates = &cache.router.gates;
        for (i, e) in self.bank.experts.iter_mut().enumerate() {
            let mut g_bax = vec![0.0; n_rows * d_out];
            for n in 0..n_rows {
                let g = grad_out.row(n);
                g_gates.row_mut(n)[i] += s * tensor::dot(g, cache.bax[i].row(n));
                let w = gates.at(n, i) * s;
                for (o, &gv) in g_bax[n * d_out..(n + 1) * d_out].iter_mut().zip(g) {
                    *o = w * gv;
                }
            }
            let g_bax = Tensor::from_vec_unchecked(&[n_rows, d_out], g_bax);
            let (g_ax, g_b, _) = linear_backward(&cache.ax[i], &e.b, &g_bax);
            e.b.accumulate_grad(g_b.data());
            let (g_x, g_a, _) = linear_backward(x, &e.a, &g_ax);
            e.a.accumulate_grad(g_a.data());
            for (o, v) in gx.iter_mut().zip(g_x.data()) {
                *o += v;
            }
        }

        let g_x_router = self.router.backward(x, &cache.router, &g_gates)?;
        for (o, v) in gx.iter_mut().zip(g_x_router.data()) {
            *o += v;
        }
        Ok(Tensor::from_vec_unchecked(&[n_rows, d], gx))
    }
}

pub fn molre_forward(layer: &MolreLayer, x: &Tensor) -> Result<Tensor> {
    layer.forward(x)
}

/// Experts: `A_i ~ N(0, 1/d)`, `B_i = 0`. Router: He-normal weights, zero biases.
pub fn init_adapter_params(bank: &mut ExpertBank, router: &mut Router, rng: &mut RngStream) {
    let d = bank.in_dim();
    let std_a = (1.0 / d as f64).sqrt();
    for e in &mut bank.experts {
        e.a = Tensor::randn(e.a.shape(), std_a, rng);
        e.b = Tensor::zeros(e.b.shape());
    }
    let (h, d_r) = (router.w1.rows(), router.w1.cols());
    let k = router.w2.rows();
    router.w1 = Tensor::randn(&[h, d_r], (2.0 / d_r as f64).sqrt(), rng);
    router.b1 = Tensor::zeros(&[h]);
    router.w2 = Tensor::randn(&[k, h], (2.0 / h as f64).sqrt(), rng);
    router.b2 = Tensor::zeros(&[k]);
}

/// Trainable parameters added by the expert bank and router.
pub fn count_molre_params(d: usize, d_out: usize, k: usize, r: usize, d_h: usize) -> usize {
    k * (r * d + d_out * r) + (d_h * d + d_h) + (k * d_h + k)
}

/// `K · Σ_k mean_n(g_nk)²`, which is 1 for perfectly balanced usage.
/// Returns the loss and its gradient with respect to the gates.
pub fn load_balance_loss(gates: &Tensor) -> (f64, Tensor) {
    let (n, k) = (gates.rows(), gates.cols());
    let mut mean = vec![0.0; k];
    for r in 0..n {
        for (m, g) in mean.iter_mut().zip(gates.row(r)) {
            *m += g / n as f64;
        }
    }
    let loss = k as f64 * mean.iter().map(|m| m * m).sum::<f64>();
    let grad = Tensor::from_fn(&[n, k], |idx| 2.0 * k as f64 * mean[idx % k] / n as f64);
    (loss, grad)
}
