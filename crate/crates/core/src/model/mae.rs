use ndarray::{s, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, OptimizerSnapshot};
use super::layers::{token, Block, BlockCache, LayerNorm, Linear, LnCache};
use super::params::{Gradients, ParamId, ParameterStore};
use super::{ModelConfig, WeightSpace};
use crate::error::{Error, Result};
use crate::imagery::Pixels;
use crate::masking::PatchMask;
use crate::relpos::{patch_bboxes, sinusoidal_embed, NormalizedBBox};
use crate::visibility::{
    classify_pixels, loss_weights, patch_stats, weighted_recon_loss, weighted_recon_loss_grad, FrameTransform,
    LossTerm, LossWeightMap, PatchStats, Visibility, VisibilityMap, WeightGradient, WeightPolicy,
};

/// Splits an `H x W x C` image into row-major patches, each flattened in
/// (row, column, channel) order.
pub fn patchify(image: ArrayView3<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Array2::zeros((rows * cols, patch * patch * c));
    for r in 0..rows {
        for q in 0..cols {
            let block = image.slice(s![r * patch..(r + 1) * patch, q * patch..(q + 1) * patch, ..]);
            for (k, v) in block.iter().enumerate() {
                out[[r * cols + q, k]] = *v;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Array2<f64>,
    patch: usize,
    rows: usize,
    cols: usize,
    channels: usize,
) -> Result<Array3<f64>> {
    if patches.dim() != (rows * cols, patch * patch * channels) {
        return Err(Error::Shape(format!(
            "{:?} patches cannot form a {rows}x{cols} grid of {patch}px x {channels}ch",
            patches.dim()
        )));
    }
    let mut out = Array3::zeros((rows * patch, cols * patch, channels));
    for r in 0..rows {
        for q in 0..cols {
            let mut block = out.slice_mut(s![r * patch..(r + 1) * patch, q * patch..(q + 1) * patch, ..]);
            for (k, v) in block.iter_mut().enumerate() {
                *v = patches[[r * cols + q, k]];
            }
        }
    }
    Ok(out)
}

/// Encoder input rows, the patch rows they embed, and each row's
/// `(view, patch)` origin.
pub type VisibleEmbedding = (Array2<f64>, Array2<f64>, Vec<(usize, usize)>);

type LossParts = (
    Vec<Array3<f64>>,
    Vec<Option<PatchStats>>,
    Vec<VisibilityMap>,
    Vec<LossWeightMap>,
);

/// One image of a masked pair as the model sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub pixels: Pixels,
    pub frame: NormalizedBBox,
    pub flipped: bool,
    /// Image-slot embedding row (0 or 1).
    pub slot: usize,
    pub mask: PatchMask,
}

/// One or two masked views reconstructed jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub views: Vec<MaskedView>,
    pub mask_ratio: f64,
    pub ids: Vec<String>,
}

impl MaskedPair {
    /// A lone image in the unit frame, slot 0.
    pub fn single(pixels: Pixels, mask: PatchMask, mask_ratio: f64, id: impl Into<String>) -> Self {
        MaskedPair {
            views: vec![MaskedView {
                pixels,
                frame: NormalizedBBox::UNIT,
                flipped: false,
                slot: 0,
                mask,
            }],
            mask_ratio,
            ids: vec![id.into()],
        }
    }

    pub fn visible_tokens(&self) -> usize {
        self.views.iter().map(|v| v.mask.keep_count).sum()
    }
}

/// Encoded visible tokens of all views, in view order then patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Array2<f64>,
    /// `(view index, patch index)` of every token.
    pub origin: Vec<(usize, usize)>,
}

pub struct EncodeCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    norm: LnCache,
}

struct DecodeCache {
    embed_in: Array2<f64>,
    /// Token index feeding each row of the full sequence, or `None` for a
    /// mask token.
    row_token: Vec<Option<usize>>,
    row_slot: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: LnCache,
    normed: Array2<f64>,
}

/// Everything a backward pass needs.
pub struct ForwardPass {
    pub tokens: TokenBatch,
    /// Per-view predictions, `H x W x C`, in the reconstruction-target space.
    pub recon: Vec<Array3<f64>>,
    encode: EncodeCache,
    decode: DecodeCache,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub recon: Vec<Array3<f64>>,
    pub targets: Vec<Array3<f64>>,
    pub stats: Vec<Option<PatchStats>>,
    pub visibility: Vec<VisibilityMap>,
    pub weights: Vec<LossWeightMap>,
}

impl LossOutput {
    /// Fraction of all pixels that are cross-visible.
    pub fn cross_fraction(&self) -> f64 {
        let total: usize = self.visibility.iter().map(|v| v.category.len()).sum();
        let cross: usize = self.visibility.iter().map(|v| v.count(Visibility::CrossVisible)).sum();
        cross as f64 / total.max(1) as f64
    }

    /// Predictions mapped back to [0, 1] pixel space.
    pub fn recon_pixels(&self) -> Vec<Array3<f64>> {
        self.recon
            .iter()
            .zip(&self.stats)
            .map(|(r, s)| match s {
                Some(s) => s.denormalize(r.view()),
                None => r.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    pub config: ModelConfig,
    pub store: ParameterStore,
    patch_embed: Linear,
    enc_slot: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_slot: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl MaskedAutoencoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::default();
        let c = &config;
        let patch_embed = Linear::new(&mut store, "patch_embed.proj", c.patch_dim(), c.enc_dim, &mut rng);
        let enc_slot = token(&mut store, "encoder.slot_embed", 2, c.enc_dim, &mut rng);
        let enc_blocks = (0..c.enc_depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("encoder.blocks.{i}"),
                    c.enc_dim,
                    c.heads,
                    c.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "encoder.norm", c.enc_dim);
        let dec_embed = Linear::new(&mut store, "decoder.embed", c.enc_dim, c.dec_dim, &mut rng);
        let mask_token = token(&mut store, "decoder.mask_token", 1, c.dec_dim, &mut rng);
        let dec_slot = token(&mut store, "decoder.slot_embed", 2, c.dec_dim, &mut rng);
        let dec_blocks = (0..c.dec_depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("decoder.blocks.{i}"),
                    c.dec_dim,
                    c.heads,
                    c.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "decoder.norm", c.dec_dim);
        let head = Linear::new(&mut store, "decoder.pred", c.dec_dim, c.patch_dim(), &mut rng);
        Ok(MaskedAutoencoder {
            config,
            store,
            patch_embed,
            enc_slot,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_slot,
            dec_blocks,
            dec_norm,
            head,
        })
    }

    fn check_pair(&self, pair: &MaskedPair) -> Result<()> {
        let c = &self.config;
        if pair.views.is_empty() || pair.views.len() > 2 {
            return Err(Error::Shape(format!("expected 1 or 2 views, got {}", pair.views.len())));
        }
        for v in &pair.views {
            if v.pixels.dim() != (c.input_size, c.input_size, c.channels) {
                return Err(Error::Shape(format!(
                    "view is {:?}, model expects {}x{}x{}",
                    v.pixels.dim(),
                    c.input_size,
                    c.input_size,
                    c.channels
                )));
            }
            if v.mask.grid() != (c.grid(), c.grid()) || v.slot > 1 {
                return Err(Error::Shape(format!(
                    "mask grid {:?} / slot {} incompatible with a {}x{} patch grid",
                    v.mask.grid(),
                    v.slot,
                    c.grid(),
                    c.grid()
                )));
            }
        }
        if pair.visible_tokens() == 0 {
            return Err(Error::Shape("pair has no visible patches".into()));
        }
        Ok(())
    }

    /// Sinusoidal patch positions of a view at width `dim`.
    fn positions(&self, view: &MaskedView, dim: usize) -> Result<Array2<f64>> {
        let g = self.config.grid();
        sinusoidal_embed(
            &patch_bboxes(&view.frame, g, g, view.flipped),
            dim,
            self.config.coord_scale,
        )
    }

    /// Runs the encoder blocks and final norm over already-embedded tokens.
    pub fn encode_tokens(&self, x: &Array2<f64>) -> Array2<f64> {
        self.encode_blocks(x.clone()).0
    }

    fn encode_blocks(&self, mut x: Array2<f64>) -> (Array2<f64>, Vec<BlockCache>, LnCache) {
        let mut caches = Vec::with_capacity(self.enc_blocks.len());
        for b in &self.enc_blocks {
            let (y, cache) = b.forward(&self.store, &x);
            caches.push(cache);
            x = y;
        }
        let (out, norm) = self.enc_norm.forward(&self.store, &x);
        (out, caches, norm)
    }

    /// Embedded encoder inputs (patch projection + position + image slot) of
    /// the visible patches, plus the raw patch rows they came from.
    pub fn embed_visible(&self, pair: &MaskedPair) -> Result<VisibleEmbedding> {
        self.check_pair(pair)?;
        let c = &self.config;
        let k = pair.visible_tokens();
        let mut patches = Array2::zeros((k, c.patch_dim()));
        let mut pos = Array2::zeros((k, c.enc_dim));
        let mut origin = Vec::with_capacity(k);
        let slots = self.store.get(self.enc_slot);
        for (vi, view) in pair.views.iter().enumerate() {
            let all = patchify(view.pixels.view(), c.patch_size)?;
            let pe = self.positions(view, c.enc_dim)?;
            for p in view.mask.visible_indices() {
                let t = origin.len();
                patches.row_mut(t).assign(&all.row(p));
                pos.row_mut(t).assign(&(&pe.row(p) + &slots.row(view.slot)));
                origin.push((vi, p));
            }
        }
        let x0 = self.patch_embed.forward(&self.store, &patches) + pos;
        Ok((x0, patches, origin))
    }

    pub fn encode(&self, pair: &MaskedPair) -> Result<(TokenBatch, EncodeCache)> {
        let (x0, patches, origin) = self.embed_visible(pair)?;
        let (tokens, blocks, norm) = self.encode_blocks(x0);
        Ok((TokenBatch { tokens, origin }, EncodeCache { patches, blocks, norm }))
    }

    fn decode_inner(&self, pair: &MaskedPair, enc: &TokenBatch) -> Result<(Vec<Array3<f64>>, DecodeCache)> {
        let c = &self.config;
        let n = c.num_patches();
        let total = n * pair.views.len();
        let y = self.dec_embed.forward(&self.store, &enc.tokens);
        let mask_token = self.store.get(self.mask_token).row(0).to_owned();
        let slots = self.store.get(self.dec_slot);
        let mut x = Array2::zeros((total, c.dec_dim));
        let mut row_token = vec![None; total];
        let mut row_slot = vec![0; total];
        for (t, &(vi, p)) in enc.origin.iter().enumerate() {
            row_token[vi * n + p] = Some(t);
        }
        for (vi, view) in pair.views.iter().enumerate() {
            let pd = self.positions(view, c.dec_dim)?;
            for p in 0..n {
                let r = vi * n + p;
                row_slot[r] = view.slot;
                let base = match row_token[r] {
                    Some(t) => y.row(t).to_owned(),
                    None => mask_token.clone(),
                };
                x.row_mut(r).assign(&(base + pd.row(p) + slots.row(view.slot)));
            }
        }
        let mut caches = Vec::with_capacity(self.dec_blocks.len());
        for b in &self.dec_blocks {
            let (out, cache) = b.forward(&self.store, &x);
            caches.push(cache);
            x = out;
        }
        let (normed, norm) = self.dec_norm.forward(&self.store, &x);
        let pred = self.head.forward(&self.store, &normed);
        let g = c.grid();
        let recon = (0..pair.views.len())
            .map(|vi| {
                unpatchify(
                    &pred.slice(s![vi * n..(vi + 1) * n, ..]).to_owned(),
                    c.patch_size,
                    g,
                    g,
                    c.channels,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            recon,
            DecodeCache {
                embed_in: enc.tokens.clone(),
                row_token,
                row_slot,
                blocks: caches,
                norm,
                normed,
            },
        ))
    }

    /// Fills masked positions with the mask token and predicts every patch
    /// of every view.
    pub fn decode(&self, pair: &MaskedPair, enc: &TokenBatch) -> Result<Vec<Array3<f64>>> {
        Ok(self.decode_inner(pair, enc)?.0)
    }

    pub fn forward(&self, pair: &MaskedPair) -> Result<ForwardPass> {
        let (tokens, encode) = self.encode(pair)?;
        let (recon, decode) = self.decode_inner(pair, &tokens)?;
        Ok(ForwardPass {
            tokens,
            recon,
            encode,
            decode,
        })
    }

    /// Backpropagates per-view gradients w.r.t. the reconstructions.
    pub fn backward(&self, pass: &ForwardPass, drecon: &[Array3<f64>]) -> Result<Gradients> {
        let c = &self.config;
        let p = &self.store;
        let mut g = p.zeros_like();
        let n = c.num_patches();
        let mut dpred = Array2::zeros((n * drecon.len(), c.patch_dim()));
        for (vi, d) in drecon.iter().enumerate() {
            dpred
                .slice_mut(s![vi * n..(vi + 1) * n, ..])
                .assign(&patchify(d.view(), c.patch_size)?);
        }
        let dc = &pass.decode;
        let dnormed = self.head.backward(p, &mut g, &dc.normed, &dpred);
        let mut dx = self.dec_norm.backward(p, &mut g, &dc.norm, &dnormed);
        for (b, cache) in self.dec_blocks.iter().zip(&dc.blocks).rev() {
            dx = b.backward(p, &mut g, cache, &dx);
        }
        let mut dy = Array2::zeros((dc.embed_in.nrows(), c.dec_dim));
        for (r, row) in dx.rows().into_iter().enumerate() {
            let mut slot_row = g.get_mut(self.dec_slot).row_mut(dc.row_slot[r]);
            slot_row += &row;
            match dc.row_token[r] {
                Some(t) => dy.row_mut(t).assign(&row),
                None => {
                    let mut m = g.get_mut(self.mask_token).row_mut(0);
                    m += &row;
                }
            }
        }
        let denc = self.dec_embed.backward(p, &mut g, &dc.embed_in, &dy);

        let ec = &pass.encode;
        let mut dx = self.enc_norm.backward(p, &mut g, &ec.norm, &denc);
        for (b, cache) in self.enc_blocks.iter().zip(&ec.blocks).rev() {
            dx = b.backward(p, &mut g, cache, &dx);
        }
        self.patch_embed.backward(p, &mut g, &ec.patches, &dx);
        let n = self.config.num_patches();
        for (t, &(vi, _)) in pass.tokens.origin.iter().enumerate() {
            let mut r = g.get_mut(self.enc_slot).row_mut(dc.row_slot[vi * n]);
            r += &dx.row(t);
        }
        Ok(g)
    }

    /// Targets, visibility maps and loss weights for a forward pass.
    fn loss_parts(&self, pair: &MaskedPair, recon: &[Array3<f64>], policy: WeightPolicy) -> Result<LossParts> {
        let c = &self.config;
        let stats: Vec<Option<PatchStats>> = pair
            .views
            .iter()
            .map(|v| c.norm_pix_loss.then(|| patch_stats(v.pixels.view(), c.patch_size)))
            .collect();
        let targets: Vec<Array3<f64>> = pair
            .views
            .iter()
            .zip(&stats)
            .map(|(v, s)| match s {
                Some(s) => s.normalize(v.pixels.view()),
                None => v.pixels.clone(),
            })
            .collect();
        let visibility = self.visibility(pair)?;
        let (refs, recon_ref): (Vec<Array3<f64>>, Vec<Array3<f64>>) = match c.weight_space {
            WeightSpace::Loss => (targets.clone(), recon.to_vec()),
            WeightSpace::Raw => (
                pair.views.iter().map(|v| v.pixels.clone()).collect(),
                recon
                    .iter()
                    .zip(&stats)
                    .map(|(r, s)| match s {
                        Some(s) => s.denormalize(r.view()),
                        None => r.clone(),
                    })
                    .collect(),
            ),
        };
        let nviews = pair.views.len();
        let weights = (0..nviews)
            .map(|vi| {
                let other = if nviews == 2 { 1 - vi } else { vi };
                loss_weights(
                    &visibility[vi],
                    refs[vi].view(),
                    refs[other].view(),
                    recon_ref[vi].view(),
                    policy,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((targets, stats, visibility, weights))
    }

    /// Self/cross/not-visible maps for every view.
    pub fn visibility(&self, pair: &MaskedPair) -> Result<Vec<VisibilityMap>> {
        let c = &self.config;
        if pair.views.len() == 1 {
            return Ok(vec![VisibilityMap::single(&pair.views[0].mask, c.patch_size)]);
        }
        let frames = pair
            .views
            .iter()
            .map(|v| FrameTransform::new(&v.frame, c.input_size, c.input_size, v.flipped))
            .collect::<Result<Vec<_>>>()?;
        (0..2)
            .map(|vi| {
                let o = 1 - vi;
                classify_pixels(
                    &pair.views[vi].mask,
                    &pair.views[o].mask,
                    &frames[vi],
                    &frames[o],
                    c.patch_size,
                )
            })
            .collect()
    }

    pub fn forward_loss(&self, pair: &MaskedPair, policy: WeightPolicy) -> Result<LossOutput> {
        let pass = self.forward(pair)?;
        let (targets, stats, visibility, weights) = self.loss_parts(pair, &pass.recon, policy)?;
        let terms: Vec<LossTerm<'_>> = pass
            .recon
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((r, t), w)| LossTerm {
                recon: r.view(),
                target: t.view(),
                weights: w,
            })
            .collect();
        let loss = weighted_recon_loss(&terms)?;
        Ok(LossOutput {
            loss,
            recon: pass.recon,
            targets,
            stats,
            visibility,
            weights,
        })
    }

    /// Loss and parameter gradients; `mode` selects whether gradients see
    /// the weights as constants.
    pub fn loss_and_grad(
        &self,
        pair: &MaskedPair,
        policy: WeightPolicy,
        mode: WeightGradient,
    ) -> Result<(LossOutput, Gradients)> {
        let pass = self.forward(pair)?;
        let (targets, stats, visibility, weights) = self.loss_parts(pair, &pass.recon, policy)?;
        let terms: Vec<LossTerm<'_>> = pass
            .recon
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((r, t), w)| LossTerm {
                recon: r.view(),
                target: t.view(),
                weights: w,
            })
            .collect();
        let (loss, drecon) = weighted_recon_loss_grad(&terms, mode)?;
        let grads = self.backward(&pass, &drecon)?;
        Ok((
            LossOutput {
                loss,
                recon: pass.recon,
                targets,
                stats,
                visibility,
                weights,
            },
            grads,
        ))
    }

    /// Loss with caller-supplied weights held fixed.
    pub fn loss_with_weights(&self, pair: &MaskedPair, weights: &[LossWeightMap]) -> Result<f64> {
        let pass = self.forward(pair)?;
        let c = &self.config;
        let targets: Vec<Array3<f64>> = pair
            .views
            .iter()
            .map(|v| {
                if c.norm_pix_loss {
                    patch_stats(v.pixels.view(), c.patch_size).normalize(v.pixels.view())
                } else {
                    v.pixels.clone()
                }
            })
            .collect();
        let terms: Vec<LossTerm<'_>> = pass
            .recon
            .iter()
            .zip(&targets)
            .zip(weights)
            .map(|((r, t), w)| LossTerm {
                recon: r.view(),
                target: t.view(),
                weights: w,
            })
            .collect();
        weighted_recon_loss(&terms)
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value, optimizer: Option<OptimizerSnapshot>) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta,
            params: self
                .store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer,
        }
    }

    /// Rebuilds the architecture from the stored config and loads its values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = MaskedAutoencoder::new(ckpt.config.clone(), 0)?;
        model.store.load_values(ckpt.params.clone())?;
        Ok(model)
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    pub fn slot_embed_ids(&self) -> (ParamId, ParamId) {
        (self.enc_slot, self.dec_slot)
    }
}

/// Sums per-pair gradients in order and divides by the count.
pub fn average_gradients(store: &ParameterStore, parts: &[Gradients]) -> Gradients {
    let mut total = store.zeros_like();
    for g in parts {
        total.add_assign(g);
    }
    if !parts.is_empty() {
        total.scale(1.0 / parts.len() as f64);
    }
    total
}
