use super::params::{Params, ResidualBlock, TransformerLayer};
use super::{Activation, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenize::{
    tokenize_context, ContextLayout, ExampleWindow, LayoutMode, PatchGrid, Token,
};

/// A context cut into patches and laid out as a token stream.
#[derive(Clone, Debug)]
pub struct TokenizedContext {
    pub grids: Vec<PatchGrid>,
    pub layout: ContextLayout,
}

impl TokenizedContext {
    /// Fails with a capacity error when the context has more than
    /// `max_examples` windows or any window is longer than `max_len`.
    pub fn new(windows: &[ExampleWindow], cfg: &ModelConfig, mode: LayoutMode) -> Result<Self> {
        if windows.len() > cfg.max_examples {
            return Err(Error::Capacity {
                what: "number of examples",
                got: windows.len(),
                max: cfg.max_examples,
            });
        }
        if let Some(w) = windows.iter().find(|w| w.len() > cfg.max_len) {
            return Err(Error::Capacity {
                what: "example length",
                got: w.len(),
                max: cfg.max_len,
            });
        }
        let (grids, layout) = tokenize_context(windows, cfg.patch_len, mode)?;
        Ok(Self { grids, layout })
    }
}

/// Square boolean matrix, `true` where query `q` may attend to key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size + k]
    }

    /// Row-major complement, the form `masked_fill` consumes.
    pub fn blocked(&self) -> Vec<bool> {
        self.allowed.iter().map(|a| !a).collect()
    }
}

/// Causal attention restricted to eligible keys: `(q, k)` is allowed iff
/// `k <= q` and token `k` is attention-eligible. Separators are always
/// eligible; right-incomplete and fully padded patches never are.
pub fn build_attention_mask(layout: &ContextLayout) -> AttentionMask {
    let n = layout.len();
    let eligible = layout.eligible();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..=q {
            allowed[q * n + k] = eligible[k];
        }
    }
    AttentionMask { size: n, allowed }
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn residual_block(
    g: &mut Graph,
    x: Var,
    block: &ResidualBlock<Var>,
    act: Activation,
) -> Result<Var> {
    let hidden = linear(g, x, block.w_hidden, block.b_hidden)?;
    let hidden = activate(g, hidden, act);
    let out = linear(g, hidden, block.w_out, block.b_out)?;
    let skip = linear(g, x, block.w_skip, block.b_skip)?;
    g.add(out, skip)
}

/// Token matrix `(tokens x d_model)`: each patch is zeroed where padded and
/// passed through the input residual block; each separator slot holds the
/// separator embedding.
pub fn embed_tokens(
    g: &mut Graph,
    p: &Params<Var>,
    cfg: &ModelConfig,
    ctx: &TokenizedContext,
) -> Result<Var> {
    let TokenizedContext { grids, layout } = ctx;
    if layout.num_examples() != grids.len()
        || grids.iter().enumerate().any(|(i, grid)| {
            layout.span(i).len() != grid.num_patches() || grid.patch_len() != cfg.patch_len
        })
    {
        return Err(Error::contract(
            "context layout does not match its patch grids",
        ));
    }

    let n_patches = layout.num_patch_tokens();
    let mut rows = Vec::with_capacity(n_patches * cfg.patch_len);
    let mut index = Vec::with_capacity(layout.len());
    for token in layout.tokens() {
        match *token {
            Token::Patch { example, patch } => {
                index.push(rows.len() / cfg.patch_len);
                let grid = &grids[example];
                rows.extend(
                    grid.patch(patch)
                        .iter()
                        .zip(grid.patch_mask(patch))
                        .map(|(&v, &m)| if m { 0.0 } else { v }),
                );
            }
            Token::Separator { .. } => index.push(n_patches),
        }
    }
    let patches = g.input(Tensor::matrix(n_patches, cfg.patch_len, rows)?);
    let embedded = residual_block(g, patches, &p.input, cfg.activation)?;
    let table = g.concat_rows(&[embedded, p.separator])?;
    g.gather_rows(table, index)
}

fn attention(
    g: &mut Graph,
    x: Var,
    layer: &TransformerLayer<Var>,
    cfg: &ModelConfig,
    blocked: &[bool],
) -> Result<Var> {
    let q = g.matmul(x, layer.wq)?;
    let k = g.matmul(x, layer.wk)?;
    let v = g.matmul(x, layer.wv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let scores = g.masked_fill(scores, blocked.to_vec(), f64::NEG_INFINITY)?;
        let weights = g.softmax(scores);
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(merged, layer.wo)
}

fn transformer_layer(
    g: &mut Graph,
    x: Var,
    layer: &TransformerLayer<Var>,
    cfg: &ModelConfig,
    blocked: &[bool],
) -> Result<Var> {
    let h = g.layer_norm(x, layer.attn_norm_gain, layer.attn_norm_bias)?;
    let a = attention(g, h, layer, cfg, blocked)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, layer.ff_norm_gain, layer.ff_norm_bias)?;
    let f = linear(g, h, layer.ff_w1, layer.ff_b1)?;
    let f = activate(g, f, cfg.activation);
    let f = linear(g, f, layer.ff_w2, layer.ff_b2)?;
    g.add(x, f)
}

/// Per-token predictions `(tokens x h)`: row `t` is the model's forecast of
/// the `h` points that follow token `t` within its example.
pub fn forward_graph(
    g: &mut Graph,
    p: &Params<Var>,
    cfg: &ModelConfig,
    ctx: &TokenizedContext,
) -> Result<Var> {
    let mut x = embed_tokens(g, p, cfg, ctx)?;
    let blocked = build_attention_mask(&ctx.layout).blocked();
    for layer in &p.layers {
        x = transformer_layer(g, x, layer, cfg, &blocked)?;
    }
    let x = g.layer_norm(x, p.final_norm_gain, p.final_norm_bias)?;
    residual_block(g, x, &p.output, cfg.activation)
}

/// Evaluates the network on a context without recording gradients for later
/// use.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &[ExampleWindow],
    mode: LayoutMode,
) -> Result<(TokenizedContext, Tensor)> {
    let ctx = TokenizedContext::new(windows, cfg, mode)?;
    let mut g = Graph::new();
    let p = params.bind(cfg, &mut g);
    let out = forward_graph(&mut g, &p, cfg, &ctx)?;
    let preds = g.value(out).clone();
    Ok((ctx, preds))
}
