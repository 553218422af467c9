use super::ops::{
    attention, batch_norm, conv2d, gelu, layer_norm, linear, ConvSpec, FeatureMap, Tokens,
};
use super::{ClassProbabilities, CvTConfig, CvtError, StageConfig, TensorStore};

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `(channels, height, width)` of each stage's token grid.
    pub stage_shapes: Vec<(usize, usize, usize)>,
    /// Normalized classification token fed to the head.
    pub features: Vec<f32>,
    pub logits: Vec<f32>,
    pub probs: ClassProbabilities,
}

struct Ctx<'a> {
    w: &'a TensorStore,
}

impl Ctx<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<&[f32], CvtError> {
        self.w.require(name, shape)
    }

    fn layer_norm(&self, x: &Tokens, pre: &str) -> Result<Tokens, CvtError> {
        let d = x.d;
        Ok(layer_norm(
            x,
            self.get(&format!("{pre}.weight"), &[d])?,
            self.get(&format!("{pre}.bias"), &[d])?,
        ))
    }

    fn linear(&self, x: &Tokens, pre: &str, out: usize, bias: bool) -> Result<Tokens, CvtError> {
        let w = self.get(&format!("{pre}.weight"), &[out, x.d])?;
        let b = if bias {
            Some(self.get(&format!("{pre}.bias"), &[out])?)
        } else {
            None
        };
        Ok(linear(x, w, b, out))
    }

    /// Depthwise conv + batch norm on the token grid, flattened back to
    /// tokens.
    fn conv_proj(
        &self,
        grid: &FeatureMap,
        pre: &str,
        s: &StageConfig,
        stride: usize,
    ) -> Result<Tokens, CvtError> {
        let d = grid.channels;
        let k = s.proj_kernel;
        let spec = ConvSpec {
            in_channels: d,
            out_channels: d,
            kernel: k,
            stride,
            padding: k / 2,
            groups: d,
        };
        let mut m = conv2d(
            grid,
            self.get(&format!("{pre}.conv.weight"), &[d, 1, k, k])?,
            None,
            &spec,
        )?;
        let v = |n: &str| self.get(&format!("{pre}.bn.{n}"), &[d]);
        batch_norm(
            &mut m,
            v("weight")?,
            v("bias")?,
            v("running_mean")?,
            v("running_var")?,
        );
        Ok(m.to_tokens())
    }

    fn attention(
        &self,
        x: &Tokens,
        h: usize,
        w: usize,
        pre: &str,
        s: &StageConfig,
    ) -> Result<Tokens, CvtError> {
        let d = x.d;
        let (cls, grid) = if s.with_cls_token {
            let (c, g) = x.split_first();
            (Some(c), g)
        } else {
            (None, x.clone())
        };
        let grid = FeatureMap::from_tokens(&grid, h, w)?;
        let proj = |name: &str, stride: usize| -> Result<Tokens, CvtError> {
            let t = self.conv_proj(&grid, &format!("{pre}.conv_proj_{name}"), s, stride)?;
            // the cls token bypasses the convolution
            let t = match &cls {
                Some(c) => t.prepend(c),
                None => t,
            };
            self.linear(&t, &format!("{pre}.proj_{name}"), d, s.qkv_bias)
        };
        let q = proj("q", s.q_stride)?;
        let k = proj("k", s.kv_stride)?;
        let v = proj("v", s.kv_stride)?;
        let o = attention(&q, &k, &v, s.heads);
        self.linear(&o, &format!("{pre}.proj"), d, true)
    }

    fn block(
        &self,
        x: &mut Tokens,
        h: usize,
        w: usize,
        pre: &str,
        s: &StageConfig,
    ) -> Result<(), CvtError> {
        let y = self.layer_norm(x, &format!("{pre}.norm1"))?;
        x.add_assign(&self.attention(&y, h, w, &format!("{pre}.attn"), s)?);
        let y = self.layer_norm(x, &format!("{pre}.norm2"))?;
        let mut hdn = self.linear(&y, &format!("{pre}.mlp.fc1"), x.d * s.mlp_ratio, true)?;
        hdn.data.iter_mut().for_each(|v| *v = gelu(*v));
        x.add_assign(&self.linear(&hdn, &format!("{pre}.mlp.fc2"), x.d, true)?);
        Ok(())
    }
}

/// Forward pass on a preprocessed `in_channels x H x W` map. Any input size
/// that survives the three embeddings works: there is no positional
/// embedding.
pub fn forward_detailed(
    x: &FeatureMap,
    cfg: &CvTConfig,
    weights: &TensorStore,
) -> Result<ForwardTrace, CvtError> {
    cfg.validate()?;
    weights.check(cfg)?;
    if x.channels != cfg.in_channels {
        return Err(CvtError::Shape(format!(
            "expected {} input channels, got {}",
            cfg.in_channels, x.channels
        )));
    }
    let ctx = Ctx { w: weights };
    let mut map = x.clone();
    let mut cls_out = None;
    let mut stage_shapes = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        let pre = format!("stage{i}");
        let d = s.embed_dim;
        let spec = ConvSpec {
            in_channels: map.channels,
            out_channels: d,
            kernel: s.embed_kernel,
            stride: s.embed_stride,
            padding: s.embed_padding,
            groups: 1,
        };
        let k = s.embed_kernel;
        let emb = conv2d(
            &map,
            ctx.get(
                &format!("{pre}.patch_embed.proj.weight"),
                &[d, map.channels, k, k],
            )?,
            Some(ctx.get(&format!("{pre}.patch_embed.proj.bias"), &[d])?),
            &spec,
        )?;
        let (h, w) = (emb.height, emb.width);
        stage_shapes.push((d, h, w));
        let mut t = ctx.layer_norm(&emb.to_tokens(), &format!("{pre}.patch_embed.norm"))?;
        if s.with_cls_token {
            t = t.prepend(ctx.get(&format!("{pre}.cls_token"), &[1, 1, d])?);
        }
        for j in 0..s.depth {
            ctx.block(&mut t, h, w, &format!("{pre}.blocks.{j}"), s)?;
        }
        if s.with_cls_token {
            let (c, grid) = t.split_first();
            cls_out = Some(c);
            t = grid;
        }
        map = FeatureMap::from_tokens(&t, h, w)?;
    }
    let cls = cls_out
        .ok_or_else(|| CvtError::Config("final stage produced no classification token".into()))?;
    let d = cls.len();
    let cls = Tokens { n: 1, d, data: cls };
    let features = ctx.layer_norm(&cls, "norm")?;
    let logits = ctx.linear(&features, "head", cfg.num_classes, true)?.data;
    Ok(ForwardTrace {
        stage_shapes,
        probs: ClassProbabilities::from_logits(&logits),
        features: features.data,
        logits,
    })
}

pub fn forward(
    x: &FeatureMap,
    cfg: &CvTConfig,
    weights: &TensorStore,
) -> Result<ClassProbabilities, CvtError> {
    Ok(forward_detailed(x, cfg, weights)?.probs)
}
