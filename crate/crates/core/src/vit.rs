//! Toy vision-transformer encoder.
//!
//! Images are `C x H x W` tensors. The encoder splits them into `P x P`
//! patches, embeds them linearly, prepends a classification token, adds
//! learned position embeddings and runs `L` pre-norm transformer blocks.
//! Each block's head-averaged attention is kept for the inner-guided map.

use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Token width inside the across-transformer.
    pub across_dim: usize,
    pub across_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 8,
            across_dim: 16,
            across_heads: 2,
        }
    }
}

impl EncoderConfig {
    /// The 4-patch, 2-class model used for gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            across_dim: 4,
            across_heads: 2,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("across_dim", self.across_dim),
            ("across_heads", self.across_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.grid() % 2 != 0 {
            return fail(format!(
                "patch grid {0}x{0} must have even sides for 2x2 blocks",
                self.grid()
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.across_dim % self.across_heads != 0 {
            return fail(format!(
                "across_dim {} is not divisible by {} heads",
                self.across_dim, self.across_heads
            ));
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        d => Err(Error::Invalid(format!(
            "image must be C x H x W, got {d:?}"
        ))),
    }
}

/// Splits a `C x H x W` image into `N x (P*P*C)` rows; row `k` is the
/// row-major flattening of the patch at grid cell `(k / w, k % w)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..patch {
                    let row = (ch * h + gy * patch + py) * w + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, patch * patch * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor> {
    let (gh, gw) = (height / patch, width / patch);
    if patches.dims() != [gh * gw, patch * patch * channels]
        || gh * patch != height
        || gw * patch != width
    {
        return Err(Error::Invalid(format!(
            "patches {:?} do not tile a {channels}x{height}x{width} image with patch {patch}",
            patches.dims()
        )));
    }
    let src = patches.data();
    let mut out = vec![0.0; channels * height * width];
    let row_len = patch * patch * channels;
    for k in 0..gh * gw {
        let (gy, gx) = (k / gw, k % gw);
        let row = &src[k * row_len..(k + 1) * row_len];
        for ch in 0..channels {
            for py in 0..patch {
                let dst = (ch * height + gy * patch + py) * width + gx * patch;
                let s = (ch * patch + py) * patch;
                out[dst..dst + patch].copy_from_slice(&row[s..s + patch]);
            }
        }
    }
    Ok(Tensor::new(&[channels, height, width], out)?)
}

/// Head-averaged post-softmax attention of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub per_layer: Vec<Tensor>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl AttentionStack {
    /// Layer average of the classification token's attention over the patch
    /// tokens, laid out on the `h x w` patch grid.
    pub fn inner_guided(&self) -> Result<Tensor> {
        if self.per_layer.is_empty() {
            return Err(Error::Invalid("attention stack is empty".into()));
        }
        let n = self.grid_h * self.grid_w;
        let mut acc = vec![0.0; n];
        for layer in &self.per_layer {
            if layer.dims() != [n + 1, n + 1] {
                return Err(Error::Invalid(format!(
                    "attention matrix {:?} does not match a {}x{} grid",
                    layer.dims(),
                    self.grid_h,
                    self.grid_w
                )));
            }
            for (a, &v) in acc.iter_mut().zip(&layer.data()[1..=n]) {
                *a += v;
            }
        }
        let l = self.per_layer.len() as f64;
        Ok(Tensor::new(
            &[self.grid_h, self.grid_w],
            acc.into_iter().map(|v| v / l).collect(),
        )?)
    }
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    let n = tape.layer_norm(x)?;
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

/// Layer norm applied to the patch tokens before they become the feature map.
pub fn final_norm(tape: &mut Tape, params: &BoundParams, tokens: Var) -> Result<Var> {
    Ok(norm_affine(
        tape,
        tokens,
        params.get("norm.weight")?,
        params.get("norm.bias")?,
    )?)
}

/// One pre-norm block over a `T x dim` sequence. Returns the new sequence
/// and the head-averaged attention matrix.
pub(crate) fn transformer_block(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Tensor)> {
    let p = |s: &str| params.get(&format!("{prefix}.{s}"));
    let dim = tape.dims(x)[1];
    let tokens = tape.dims(x)[0];
    let head_dim = dim / heads;

    let h = norm_affine(tape, x, p("norm1.weight")?, p("norm1.bias")?)?;
    let qkv = linear(tape, h, p("attn.qkv.weight")?, p("attn.qkv.bias")?)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut avg = vec![0.0; tokens * tokens];
    for i in 0..heads {
        let q = tape.narrow(qkv, 1, i * head_dim, head_dim)?;
        let k = tape.narrow(qkv, 1, dim + i * head_dim, head_dim)?;
        let v = tape.narrow(qkv, 1, 2 * dim + i * head_dim, head_dim)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        for (a, w) in avg.iter_mut().zip(tape.value(attn).data()) {
            *a += w / heads as f64;
        }
        outs.push(tape.matmul(attn, v)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    let proj = linear(tape, merged, p("attn.proj.weight")?, p("attn.proj.bias")?)?;
    let x = tape.add(x, proj)?;

    let h = norm_affine(tape, x, p("norm2.weight")?, p("norm2.bias")?)?;
    let h = linear(tape, h, p("mlp.fc1.weight")?, p("mlp.fc1.bias")?)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p("mlp.fc2.weight")?, p("mlp.fc2.bias")?)?;
    let x = tape.add(x, h)?;
    Ok((x, Tensor::new(&[tokens, tokens], avg)?))
}

/// Output of [`encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `N x D` patch tokens after the last block.
    pub patch_tokens: Var,
    /// Length-`D` classification token after the last block.
    pub cls_token: Var,
    pub attention: AttentionStack,
}

pub fn encode(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    image: &Tensor,
) -> Result<Encoded> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.dims() != expected {
        return Err(Error::Invalid(format!(
            "image dims {:?} do not match encoder input {expected:?}",
            image.dims()
        )));
    }
    let n = cfg.num_patches();
    let patches = tape.constant(patchify(image, cfg.patch_size)?);
    let emb = linear(
        tape,
        patches,
        params.get("patch_embed.weight")?,
        params.get("patch_embed.bias")?,
    )?;
    let seq = tape.concat(&[params.get("cls_token")?, emb], 0)?;
    let mut x = tape.add(seq, params.get("pos_embed")?)?;
    if tape.dims(x) != [n + 1, cfg.embed_dim] {
        return Err(Error::Invalid(format!(
            "token sequence {:?} does not match {} patches of width {}",
            tape.dims(x),
            n,
            cfg.embed_dim
        )));
    }
    let mut per_layer = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (next, attn) = transformer_block(tape, params, &format!("blocks.{l}"), x, cfg.heads)?;
        x = next;
        per_layer.push(attn);
    }
    let patch_tokens = tape.narrow(x, 0, 1, n)?;
    let cls = tape.narrow(x, 0, 0, 1)?;
    let cls_token = tape.reshape(cls, &[cfg.embed_dim])?;
    Ok(Encoded {
        patch_tokens,
        cls_token,
        attention: AttentionStack {
            per_layer,
            grid_h: cfg.grid(),
            grid_w: cfg.grid(),
        },
    })
}
