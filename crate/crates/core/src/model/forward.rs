use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Tensor, Var};

/// Parameters registered as leaves of one [`Graph`].
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers every parameter; `trainable` controls whether gradients flow.
    pub fn register(g: &mut Graph, params: &Parameters, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), g.leaf(t.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn attn(&self, prefix: &str) -> AttnVars {
        AttnVars {
            q: self.get(&format!("{prefix}.q")),
            k: self.get(&format!("{prefix}.k")),
            v: self.get(&format!("{prefix}.v")),
            o: self.get(&format!("{prefix}.o")),
        }
    }

    fn norm(&self, prefix: &str) -> (Var, Var) {
        (
            self.get(&format!("{prefix}.gain")),
            self.get(&format!("{prefix}.bias")),
        )
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Row layout of a batch of instances flattened into one token matrix: the
/// tokens of instance `b` occupy rows `offsets[b]..offsets[b + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewLayout {
    offsets: Vec<usize>,
}

impl ViewLayout {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Empty("instance batch"));
        }
        if counts.contains(&0) {
            return Err(Error::Empty("instance views"));
        }
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        Ok(Self { offsets })
    }

    pub fn instances(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn tokens(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    fn owner_of_tokens(&self) -> Vec<usize> {
        let mut owner = Vec::with_capacity(self.tokens());
        for b in 0..self.instances() {
            owner.extend(std::iter::repeat_n(b, self.range(b).len()));
        }
        owner
    }

    /// Each token attends only to itself.
    pub fn self_mask(&self) -> Mask {
        let n = self.tokens();
        let mut m = vec![false; n * n];
        for i in 0..n {
            m[i * n + i] = true;
        }
        Arc::new(m)
    }

    /// Each token attends to the other tokens of its own instance.
    pub fn memory_mask(&self) -> Mask {
        let n = self.tokens();
        let owner = self.owner_of_tokens();
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in self.range(owner[i]) {
                m[i * n + j] = j != i;
            }
        }
        Arc::new(m)
    }

    /// Row `b` attends to all tokens of instance `b`.
    pub fn pooling_mask(&self) -> Mask {
        let (b, n) = (self.instances(), self.tokens());
        let mut m = vec![false; b * n];
        for i in 0..b {
            for j in self.range(i) {
                m[i * n + j] = true;
            }
        }
        Arc::new(m)
    }
}

/// Input projection `E⁰ = F·W + b`, one token per view.
pub fn project_in(g: &mut Graph, pv: &ParamVars, descriptors: Var) -> Result<Var> {
    let w = pv.get("input.weight");
    let expected = g.value(w).rows();
    let got = g.value(descriptors).cols();
    if got != expected {
        return Err(Error::shape("project_in", &[expected], &[got]));
    }
    let b = pv.get("input.bias");
    g.linear(descriptors, w, Some(b))
}

/// Multi-head scaled dot-product attention of `queries` over `keys_values`,
/// restricted to `mask`-allowed pairs. Query rows with no allowed key yield a
/// zero row (no output bias).
pub fn attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: AttnVars,
    num_heads: usize,
    mask: Option<Mask>,
) -> Result<Var> {
    let (q_rows, dim) = g.value(queries).dims2();
    let (k_rows, kdim) = g.value(keys_values).dims2();
    if k_rows == 0 {
        return Err(Error::Empty("attention memory"));
    }
    if dim != kdim || dim % num_heads != 0 {
        return Err(Error::shape("attention", &[q_rows, dim], &[k_rows, kdim]));
    }
    let head_dim = dim / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = g.matmul(queries, w.q)?;
    let k = g.matmul(keys_values, w.k)?;
    let v = g.matmul(keys_values, w.v)?;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let start = h * head_dim;
        let qh = g.slice_cols(q, start, head_dim)?;
        let kh = g.slice_cols(k, start, head_dim)?;
        let vh = g.slice_cols(v, start, head_dim)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let probs = match &mask {
            Some(m) => g.softmax_masked(scores, m.clone())?,
            None => g.softmax(scores),
        };
        heads.push(g.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, w.o)
}

/// Precomputed masks for one [`ViewLayout`].
pub struct LayoutMasks {
    pub self_only: Mask,
    pub memory: Mask,
    pub pooling: Mask,
}

impl LayoutMasks {
    pub fn new(layout: &ViewLayout) -> Self {
        Self {
            self_only: layout.self_mask(),
            memory: layout.memory_mask(),
            pooling: layout.pooling_mask(),
        }
    }
}

/// One multiview block. Each token (a) attends to itself, (b) attends to the
/// memory made of the *block inputs* of the other views of its instance and
/// (c) passes through a GeLU MLP; every sub-layer is pre-normed and residual.
/// A token whose instance has a single view gets an identity pass through (b).
pub fn block_forward(
    g: &mut Graph,
    pv: &ParamVars,
    config: &ModelConfig,
    block: usize,
    tokens: Var,
    masks: &LayoutMasks,
) -> Result<Var> {
    let p = format!("blocks.{block}");
    let eps = config.layer_norm_eps;
    let heads = config.num_heads;

    let (gn, bn) = pv.norm(&format!("{p}.self_norm"));
    let h = g.layer_norm(tokens, gn, bn, eps)?;
    let a = attention(
        g,
        h,
        h,
        pv.attn(&format!("{p}.self_attn")),
        heads,
        Some(masks.self_only.clone()),
    )?;
    let x1 = g.add(tokens, a)?;

    let (gq, bq) = pv.norm(&format!("{p}.cross_q_norm"));
    let (gk, bk) = pv.norm(&format!("{p}.cross_kv_norm"));
    let hq = g.layer_norm(x1, gq, bq, eps)?;
    let memory = g.layer_norm(tokens, gk, bk, eps)?;
    let c = attention(
        g,
        hq,
        memory,
        pv.attn(&format!("{p}.cross_attn")),
        heads,
        Some(masks.memory.clone()),
    )?;
    let x2 = g.add(x1, c)?;

    let (gm, bm) = pv.norm(&format!("{p}.mlp_norm"));
    let h = g.layer_norm(x2, gm, bm, eps)?;
    let f = g.linear(
        h,
        pv.get(&format!("{p}.mlp.fc1.weight")),
        Some(pv.get(&format!("{p}.mlp.fc1.bias"))),
    )?;
    let f = g.gelu(f);
    let f = g.linear(
        f,
        pv.get(&format!("{p}.mlp.fc2.weight")),
        Some(pv.get(&format!("{p}.mlp.fc2.bias"))),
    )?;
    g.add(x2, f)
}

/// Cross-attention of the learned latent query over each instance's final
/// tokens; returns one `model_dim` row per instance.
pub fn latent_pooling(
    g: &mut Graph,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: Var,
    layout: &ViewLayout,
    masks: &LayoutMasks,
) -> Result<Var> {
    let latent = pv.get("pool.latent");
    let query = g.gather_rows(latent, vec![0; layout.instances()])?;
    let (gk, bk) = pv.norm("pool.kv_norm");
    let kv = g.layer_norm(tokens, gk, bk, config.layer_norm_eps)?;
    let pooled = attention(
        g,
        query,
        kv,
        pv.attn("pool.attn"),
        config.num_heads,
        Some(masks.pooling.clone()),
    )?;
    g.add(query, pooled)
}

/// Full fusion for a batch: `descriptors` stacks every instance's views in
/// `layout` order. Returns a `B×D` matrix of unit rows.
pub fn fuse_batch(
    g: &mut Graph,
    pv: &ParamVars,
    config: &ModelConfig,
    descriptors: Var,
    layout: &ViewLayout,
) -> Result<Var> {
    if g.value(descriptors).rows() != layout.tokens() {
        return Err(Error::shape(
            "fuse_batch",
            &[layout.tokens()],
            &[g.value(descriptors).rows()],
        ));
    }
    let masks = LayoutMasks::new(layout);
    let mut x = project_in(g, pv, descriptors)?;
    for block in 0..config.num_blocks {
        x = block_forward(g, pv, config, block, x, &masks)?;
    }
    let pooled = latent_pooling(g, pv, config, x, layout, &masks)?;
    let out = g.linear(
        pooled,
        pv.get("output.weight"),
        Some(pv.get("output.bias")),
    )?;
    g.l2_normalize_rows(out)
}

/// Stacks per-instance view matrices into one token matrix plus its layout.
pub fn stack_views(instances: &[&Tensor]) -> Result<(Tensor, ViewLayout)> {
    let counts: Vec<usize> = instances.iter().map(|t| t.rows()).collect();
    let layout = ViewLayout::from_counts(&counts)?;
    let d = instances[0].cols();
    let mut data = Vec::with_capacity(layout.tokens() * d);
    for t in instances {
        if t.cols() != d {
            return Err(Error::shape("stack_views", &[d], &[t.cols()]));
        }
        data.extend_from_slice(t.data());
    }
    Ok((Tensor::matrix(layout.tokens(), d, data), layout))
}

/// Fused descriptor of one instance from its `n×D` view descriptors.
pub fn fuse(params: &Parameters, descriptors: &Tensor) -> Result<Vec<f64>> {
    if descriptors.is_empty() || descriptors.rows() == 0 {
        return Err(Error::Empty("fuse input views"));
    }
    let mut out = fuse_many(params, &[descriptors], 1)?;
    Ok(out.pop().unwrap())
}

/// Inference over many instances, evaluated in chunks of `chunk` instances.
pub fn fuse_many(params: &Parameters, instances: &[&Tensor], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let config = *params.config();
    let mut out = Vec::with_capacity(instances.len());
    for group in instances.chunks(chunk.max(1)) {
        let (stacked, layout) = stack_views(group)?;
        if stacked.cols() != config.descriptor_dim {
            return Err(Error::shape(
                "fuse",
                &[config.descriptor_dim],
                &[stacked.cols()],
            ));
        }
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, params, false);
        let x = g.constant(stacked);
        let fused = fuse_batch(&mut g, &pv, &config, x, &layout)?;
        let value = g.value(fused);
        for b in 0..layout.instances() {
            out.push(value.row(b).to_vec());
        }
    }
    Ok(out)
}
