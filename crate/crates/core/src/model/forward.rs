//! Forward pass, masked cross-entropy loss, and the exact analytic backward
//! pass (optionally through low-rank adapters).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::peft::{LoraAdapters, LoraFactors, TrainableMask};

use super::{LayerNormParams, Parameters, LN_EPS};

/// Which target positions contribute to the loss (true = scored).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    flags: Vec<bool>,
}

impl LossMask {
    pub fn new(flags: Vec<bool>) -> Self {
        LossMask { flags }
    }

    /// Mask scoring every position at or after `start`.
    pub fn suffix_from(len: usize, start: usize) -> Self {
        LossMask { flags: (0..len).map(|i| i >= start).collect() }
    }

    pub fn all(len: usize) -> Self {
        LossMask { flags: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn ln_forward(x: &Matrix, p: &LayerNormParams) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let scale = p.scale.row(0);
    let shift = p.shift.row(0);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xr = xhat.row_mut(i);
        for j in 0..d {
            xr[j] = (row[j] - mean) * inv;
        }
        let xr = xhat.row(i);
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = scale[j] * xr[j] + shift[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(
    dy: &Matrix,
    cache: &LnCache,
    p: &LayerNormParams,
    d_scale: &mut Matrix,
    d_shift: &mut Matrix,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let scale = p.scale.row(0);
    for i in 0..n {
        let dyr = dy.row(i);
        let xr = cache.xhat.row(i);
        {
            let ds = d_scale.row_mut(0);
            for j in 0..d {
                ds[j] += dyr[j] * xr[j];
            }
        }
        {
            let db = d_shift.row_mut(0);
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * scale[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * scale[j];
            dxr[j] = inv * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn cols(m: &Matrix, c0: usize, width: usize) -> Matrix {
    let n = m.rows();
    let mut out = Matrix::zeros(n, width);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&m.row(i)[c0..c0 + width]);
    }
    out
}

fn add_cols(dst: &mut Matrix, src: &Matrix, c0: usize) {
    let (n, w) = src.shape();
    for i in 0..n {
        let s = src.row(i);
        let d = &mut dst.row_mut(i)[c0..c0 + w];
        for j in 0..w {
            d[j] += s[j];
        }
    }
}

/// y = x·w, plus (x·A)·Bᵀ when low-rank factors are attached.
fn project(x: &Matrix, w: &Matrix, f: Option<&LoraFactors>) -> Matrix {
    let mut y = x.matmul(w);
    if let Some(f) = f {
        y.add_assign(&x.matmul(&f.a).matmul_tb(&f.b));
    }
    y
}

/// Backward of `project`: accumulates dW (and dA/dB when factors are
/// attached), returns dx.
fn project_backward(
    x: &Matrix,
    w: &Matrix,
    f: Option<(&LoraFactors, &mut LoraFactors)>,
    dy: &Matrix,
    dw: &mut Matrix,
) -> Matrix {
    dw.add_assign(&x.matmul_ta(dy));
    let mut dx = dy.matmul_tb(w);
    if let Some((f, df)) = f {
        let dyb = dy.matmul(&f.b);
        df.a.add_assign(&x.matmul_ta(&dyb));
        let xa = x.matmul(&f.a);
        df.b.add_assign(&dy.matmul_ta(&xa));
        dx.add_assign(&dyb.matmul_tb(&f.a));
    }
    dx
}

fn causal_softmax(s: &Matrix) -> Matrix {
    let n = s.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let row = &s.row(i)[..=i];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pr = p.row_mut(i);
        let mut z = 0.0;
        for j in 0..=i {
            pr[j] = (row[j] - mx).exp();
            z += pr[j];
        }
        for v in pr[..=i].iter_mut() {
            *v /= z;
        }
    }
    p
}

struct BlockCache {
    a: Matrix,
    ln1: LnCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    o: Matrix,
    f: Matrix,
    ln2: LnCache,
    u: Matrix,
    g: Matrix,
}

pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    y: Matrix,
}

fn validate_tokens(params: &Parameters, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > params.config.context_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            ctx: params.config.context_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::UnknownTokenId(bad));
    }
    Ok(())
}

pub(crate) fn forward_cached(
    params: &Parameters,
    tokens: &[usize],
    adapters: Option<&LoraAdapters>,
) -> Result<(Matrix, ForwardCache)> {
    validate_tokens(params, tokens)?;
    let cfg = &params.config;
    let (n, d) = (tokens.len(), cfg.d_model);
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let att_scale = 1.0 / (head_dim as f64).sqrt();

    let mut x = Matrix::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        let xr = x.row_mut(i);
        let te = params.tok_emb.row(t);
        let pe = params.pos_emb.row(i);
        for j in 0..d {
            xr[j] = te[j] + pe[j];
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (l, bp) in params.blocks.iter().enumerate() {
        let (a, ln1) = ln_forward(&x, &bp.ln1);
        let lq = adapters.and_then(|ad| ad.factors_for(&format!("block{l}.attn.Wq")));
        let lv = adapters.and_then(|ad| ad.factors_for(&format!("block{l}.attn.Wv")));
        let q = project(&a, &bp.wq, lq);
        let k = a.matmul(&bp.wk);
        let v = project(&a, &bp.wv, lv);

        let mut o = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * head_dim;
            let qh = cols(&q, off, head_dim);
            let kh = cols(&k, off, head_dim);
            let vh = cols(&v, off, head_dim);
            let mut s = qh.matmul_tb(&kh);
            s.scale(att_scale);
            let p = causal_softmax(&s);
            let oh = p.matmul(&vh);
            add_cols(&mut o, &oh, off);
            probs.push(p);
        }
        let attn_out = o.matmul(&bp.wo);
        let mut h_res = x.clone();
        h_res.add_assign(&attn_out);

        let (f, ln2) = ln_forward(&h_res, &bp.ln2);
        let u = f.matmul(&bp.w1);
        let mut g = u.clone();
        for v in g.data_mut() {
            *v = silu(*v);
        }
        let ffn_out = g.matmul(&bp.w2);
        let mut out = h_res;
        out.add_assign(&ffn_out);

        blocks.push(BlockCache { a, ln1, q, k, v, probs, o, f, ln2, u, g });
        x = out;
    }

    let (y, final_ln) = ln_forward(&x, &params.final_ln);
    let logits = y.matmul(&params.head);
    Ok((logits, ForwardCache { blocks, final_ln, y }))
}

/// Next-token logits, one row per input position.
pub fn forward(
    params: &Parameters,
    tokens: &[usize],
    adapters: Option<&LoraAdapters>,
) -> Result<Matrix> {
    forward_cached(params, tokens, adapters).map(|(logits, _)| logits)
}

fn check_loss_args(params: &Parameters, tokens: &[usize], targets: &[usize], mask: &LossMask) -> Result<()> {
    if targets.len() != tokens.len() || mask.len() != tokens.len() {
        return Err(Error::Invalid(format!(
            "tokens ({}), targets ({}), and mask ({}) lengths differ",
            tokens.len(),
            targets.len(),
            mask.len()
        )));
    }
    if mask.count() == 0 {
        return Err(Error::Invalid("loss mask scores no positions".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::UnknownTokenId(bad));
    }
    Ok(())
}

/// Mean cross-entropy over masked positions, no gradients.
pub fn loss_only(
    params: &Parameters,
    tokens: &[usize],
    targets: &[usize],
    mask: &LossMask,
    adapters: Option<&LoraAdapters>,
) -> Result<f64> {
    check_loss_args(params, tokens, targets, mask)?;
    let logits = forward(params, tokens, adapters)?;
    let mut loss = 0.0;
    for (i, &scored) in mask.flags().iter().enumerate() {
        if !scored {
            continue;
        }
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        loss -= row[targets[i]] - mx - z.ln();
    }
    Ok(loss / mask.count() as f64)
}

/// Gradient tree: same shape as the parameters, plus adapter factors when
/// adapters are attached.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub base: Parameters,
    pub lora: Option<LoraAdapters>,
}

impl GradientSet {
    pub fn zeros_like(params: &Parameters, adapters: Option<&LoraAdapters>) -> Result<Self> {
        Ok(GradientSet {
            base: Parameters::zeros(&params.config)?,
            lora: adapters.map(|a| a.zeros_like()),
        })
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = self.base.tensor_names();
        if let Some(l) = &self.lora {
            names.extend(l.tensor_names());
        }
        names
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        if name.contains(".lora.") {
            self.lora.as_ref()?.tensor(name)
        } else {
            self.base.tensor(name)
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name.contains(".lora.") {
            self.lora.as_mut()?.tensor_mut(name)
        } else {
            self.base.tensor_mut(name)
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for name in self.tensor_names() {
            let src = other.get(&name).expect("gradient trees share shape");
            self.get_mut(&name).unwrap().add_assign(src);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for name in self.tensor_names() {
            self.get_mut(&name).unwrap().scale(s);
        }
    }

    /// L2 norm over the masked tensors only.
    pub fn global_norm(&self, mask: &TrainableMask) -> f64 {
        mask.iter()
            .filter_map(|n| self.get(n))
            .map(Matrix::sq_sum)
            .sum::<f64>()
            .sqrt()
    }

    /// Zero every tensor outside the mask.
    pub fn retain(&mut self, mask: &TrainableMask) {
        for name in self.tensor_names() {
            if !mask.contains(&name) {
                self.get_mut(&name).unwrap().fill(0.0);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    bp: &super::BlockParams,
    gb: &mut super::BlockParams,
    l: usize,
    cache: &BlockCache,
    d_out: &Matrix,
    adapters: Option<&LoraAdapters>,
    g_lora: Option<&mut LoraAdapters>,
    n_heads: usize,
    head_dim: usize,
) -> Matrix {
    let att_scale = 1.0 / (head_dim as f64).sqrt();
    let n = d_out.rows();
    let d = n_heads * head_dim;

    // out = h + ffn(ln2(h))
    let dgm = project_backward(&cache.g, &bp.w2, None, d_out, &mut gb.w2);
    let mut du = dgm;
    for (x, &u) in du.data_mut().iter_mut().zip(cache.u.data()) {
        *x *= silu_prime(u);
    }
    let df = project_backward(&cache.f, &bp.w1, None, &du, &mut gb.w1);
    let mut dh = ln_backward(&df, &cache.ln2, &bp.ln2, &mut gb.ln2.scale, &mut gb.ln2.shift);
    dh.add_assign(d_out);

    // h = x + (attn o ln1)(x)
    let d_o = project_backward(&cache.o, &bp.wo, None, &dh, &mut gb.wo);
    let mut d_q = Matrix::zeros(n, d);
    let mut d_k = Matrix::zeros(n, d);
    let mut d_v = Matrix::zeros(n, d);
    for h in 0..n_heads {
        let off = h * head_dim;
        let qh = cols(&cache.q, off, head_dim);
        let kh = cols(&cache.k, off, head_dim);
        let vh = cols(&cache.v, off, head_dim);
        let p = &cache.probs[h];
        let d_oh = cols(&d_o, off, head_dim);
        let d_p = d_oh.matmul_tb(&vh);
        let d_vh = p.matmul_ta(&d_oh);
        let mut d_s = Matrix::zeros(n, n);
        for i in 0..n {
            let pr = p.row(i);
            let dpr = d_p.row(i);
            let dot: f64 = (0..=i).map(|j| dpr[j] * pr[j]).sum();
            let dsr = d_s.row_mut(i);
            for j in 0..=i {
                dsr[j] = pr[j] * (dpr[j] - dot);
            }
        }
        d_s.scale(att_scale);
        let d_qh = d_s.matmul(&kh);
        let d_kh = d_s.matmul_ta(&qh);
        add_cols(&mut d_q, &d_qh, off);
        add_cols(&mut d_k, &d_kh, off);
        add_cols(&mut d_v, &d_vh, off);
    }

    let name_q = format!("block{l}.attn.Wq");
    let name_v = format!("block{l}.attn.Wv");
    let mut g_lora = g_lora;
    let fq = adapters.and_then(|a| a.factors_for(&name_q));
    let gq = g_lora.as_mut().and_then(|g| g.entries.get_mut(&name_q));
    let pair_q = fq.zip(gq);
    let mut da = project_backward(&cache.a, &bp.wq, pair_q, &d_q, &mut gb.wq);
    da.add_assign(&project_backward(&cache.a, &bp.wk, None, &d_k, &mut gb.wk));
    let fv = adapters.and_then(|a| a.factors_for(&name_v));
    let gv = g_lora.as_mut().and_then(|g| g.entries.get_mut(&name_v));
    let pair_v = fv.zip(gv);
    da.add_assign(&project_backward(&cache.a, &bp.wv, pair_v, &d_v, &mut gb.wv));

    let mut dx = ln_backward(&da, &cache.ln1, &bp.ln1, &mut gb.ln1.scale, &mut gb.ln1.shift);
    dx.add_assign(&dh);
    dx
}

/// Mean masked cross-entropy and its exact gradient. When `trainable` is
/// given, tensors outside the mask are zeroed in the result.
pub fn loss_and_grad(
    params: &Parameters,
    tokens: &[usize],
    targets: &[usize],
    mask: &LossMask,
    adapters: Option<&LoraAdapters>,
    trainable: Option<&TrainableMask>,
) -> Result<(f64, GradientSet)> {
    check_loss_args(params, tokens, targets, mask)?;
    let (logits, cache) = forward_cached(params, tokens, adapters)?;
    let cfg = &params.config;
    let n = tokens.len();
    let m = mask.count() as f64;

    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, cfg.vocab_size);
    for (i, &scored) in mask.flags().iter().enumerate() {
        if !scored {
            continue;
        }
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        loss -= row[targets[i]] - mx - z.ln();
        let dr = dlogits.row_mut(i);
        for j in 0..cfg.vocab_size {
            dr[j] = (row[j] - mx).exp() / z / m;
        }
        dr[targets[i]] -= 1.0 / m;
    }
    loss /= m;

    let mut grads = GradientSet::zeros_like(params, adapters)?;
    let GradientSet { base, lora } = &mut grads;

    let dy = dlogits.matmul_tb(&params.head);
    base.head.add_assign(&cache.y.matmul_ta(&dlogits));
    let mut dx = ln_backward(
        &dy,
        &cache.final_ln,
        &params.final_ln,
        &mut base.final_ln.scale,
        &mut base.final_ln.shift,
    );

    for l in (0..cfg.n_layers).rev() {
        dx = block_backward(
            &params.blocks[l],
            &mut base.blocks[l],
            l,
            &cache.blocks[l],
            &dx,
            adapters,
            lora.as_mut(),
            cfg.n_heads,
            cfg.head_dim(),
        );
    }

    for (i, &t) in tokens.iter().enumerate() {
        let src = dx.row(i).to_vec();
        let te = base.tok_emb.row_mut(t);
        for j in 0..cfg.d_model {
            te[j] += src[j];
        }
        let pe = base.pos_emb.row_mut(i);
        for j in 0..cfg.d_model {
            pe[j] += src[j];
        }
    }

    if let Some(tm) = trainable {
        grads.retain(tm);
    }
    Ok((loss, grads))
}
