//! Scene quality encoder: maps a clip of any view count and resolution to a
//! fixed-dimension representation, plus per-branch projection heads.
//!
//! Per view, a four-stage residual convolutional trunk (stride-2 stem, then
//! stride-2 entries into stages 2..4) extracts features; after each stage a
//! 1x1 refinement convolution followed by global average pooling yields one
//! per-scale descriptor, and the concatenated descriptors map linearly to a
//! d-dimensional view token. Across views, sinusoidal positional encodings
//! plus pre-norm transformer encoder layers fuse the tokens; mean pooling
//! and a final layer norm produce the representation. Each branch projects
//! it through its own two-layer MLP. The trunk is norm-free; tokens are
//! normalized on entry to every transformer sublayer.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::Branch;
use crate::nn::attention::{TransformerCache, TransformerLayer};
use crate::nn::conv::Conv2d;
use crate::nn::linear::{Init, Linear};
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::{gelu, gelu_grad, ParamVisitor, Parameterized};

pub const MIN_VIEW_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    /// Representation dimension D; also the transformer width.
    pub repr_dim: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    /// Maximum clip length accepted by the fusion stage.
    pub max_views: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 256],
            repr_dim: 256,
            transformer_layers: 4,
            attention_heads: 4,
            projector_hidden: 256,
            projector_out: 128,
            max_views: 64,
        }
    }
}

impl BackboneConfig {
    /// Feed-forward width inside each transformer layer.
    pub fn ffn_dim(&self) -> usize {
        2 * self.repr_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.repr_dim == 0 || self.repr_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "repr_dim {} must be a positive multiple of attention_heads {}",
                self.repr_dim, self.attention_heads
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0)
            || self.projector_hidden == 0
            || self.projector_out == 0
            || self.max_views == 0
        {
            return Err(Error::Config(
                "backbone dimensions must all be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Exact trainable-parameter count, closed form. Cross-checked against
    /// the parameter visitor in tests.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let [c1, c2, c3, c4] = self.stage_channels;
        let d = self.repr_dim;
        let ffn = self.ffn_dim();

        let mut view = conv(3, c1, 3);
        let chans = [c1, c2, c3, c4];
        for (i, &c) in chans.iter().enumerate() {
            if i > 0 {
                view += conv(chans[i - 1], c, 3);
            }
            view += 2 * conv(c, c, 3) + conv(c, c, 1);
        }
        view += (c1 + c2 + c3 + c4) * d + d;

        let layer = 4 * (d * d + d) + (d * ffn + ffn) + (ffn * d + d) + 4 * d;
        let fusion = self.transformer_layers * layer + 2 * d;

        let head = d * self.projector_hidden
            + self.projector_hidden
            + self.projector_hidden * self.projector_out
            + self.projector_out;

        view + fusion + 3 * head
    }
}

struct ViewStage {
    down: Option<Conv2d>,
    res1: Conv2d,
    res2: Conv2d,
    refine: Conv2d,
}

impl ViewStage {
    fn new(rng: &mut ChaCha8Rng, c_in: Option<usize>, c: usize) -> Self {
        Self {
            down: c_in.map(|ci| Conv2d::new(rng, ci, c, 3, 2, 1)),
            res1: Conv2d::new(rng, c, c, 3, 1, 1),
            res2: Conv2d::new(rng, c, c, 3, 1, 1),
            refine: Conv2d::new(rng, c, c, 1, 1, 0),
        }
    }
}

impl Parameterized for ViewStage {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        if let Some(down) = &mut self.down {
            down.visit_params(&format!("{prefix}.down"), visitor);
        }
        self.res1.visit_params(&format!("{prefix}.res1"), visitor);
        self.res2.visit_params(&format!("{prefix}.res2"), visitor);
        self.refine
            .visit_params(&format!("{prefix}.refine"), visitor);
    }
}

struct BranchHead {
    fc1: Linear,
    fc2: Linear,
}

impl BranchHead {
    fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(rng, d, hidden, Init::He),
            fc2: Linear::new(rng, hidden, out, Init::Xavier),
        }
    }
}

impl Parameterized for BranchHead {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), visitor);
        self.fc2.visit_params(&format!("{prefix}.fc2"), visitor);
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stages: Vec<ViewStage>,
    token_proj: Linear,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
    head_iqa: BranchHead,
    head_vqa: BranchHead,
    head_rep: BranchHead,
}

/// Intermediates of one view's trunk pass, kept for backward.
pub struct ViewCache {
    x0: Array3<f32>,
    stem_pre: Array3<f32>,
    stages: Vec<StageCache>,
    token_in: Array2<f32>,
}

struct StageCache {
    input: Array3<f32>,
    down_pre: Option<Array3<f32>>,
    zd: Array3<f32>,
    r1_pre: Array3<f32>,
    r1: Array3<f32>,
    sum_pre: Array3<f32>,
    y: Array3<f32>,
    refine_pre: Array3<f32>,
}

/// Intermediates of the fusion pass.
pub struct FuseCache {
    layer_caches: Vec<TransformerCache>,
    v_len: usize,
    final_ln: LayerNormCache,
}

/// Full forward cache for one clip.
pub struct SceneCache {
    pub views: Vec<ViewCache>,
    pub fuse: FuseCache,
}

/// Cache of one branch projection.
pub struct ProjCache {
    branch: Branch,
    repr_in: Array2<f32>,
    h_pre: Array2<f32>,
    h: Array2<f32>,
}

impl Backbone {
    /// Build with weights drawn deterministically from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3, c4] = config.stage_channels;
        let stem = Conv2d::new(&mut rng, 3, c1, 3, 2, 1);
        let stages = vec![
            ViewStage::new(&mut rng, None, c1),
            ViewStage::new(&mut rng, Some(c1), c2),
            ViewStage::new(&mut rng, Some(c2), c3),
            ViewStage::new(&mut rng, Some(c3), c4),
        ];
        let token_proj = Linear::new(&mut rng, c1 + c2 + c3 + c4, config.repr_dim, Init::Xavier);
        let layers = (0..config.transformer_layers)
            .map(|_| {
                TransformerLayer::new(
                    &mut rng,
                    config.repr_dim,
                    config.attention_heads,
                    config.ffn_dim(),
                )
            })
            .collect();
        let final_ln = LayerNorm::new(config.repr_dim);
        let head_iqa = BranchHead::new(
            &mut rng,
            config.repr_dim,
            config.projector_hidden,
            config.projector_out,
        );
        let head_vqa = BranchHead::new(
            &mut rng,
            config.repr_dim,
            config.projector_hidden,
            config.projector_out,
        );
        let head_rep = BranchHead::new(
            &mut rng,
            config.repr_dim,
            config.projector_hidden,
            config.projector_out,
        );
        Ok(Self {
            config,
            stem,
            stages,
            token_proj,
            layers,
            final_ln,
            head_iqa,
            head_vqa,
            head_rep,
        })
    }

    fn head(&self, branch: Branch) -> &BranchHead {
        match branch {
            Branch::Iqa => &self.head_iqa,
            Branch::Vqa => &self.head_vqa,
            Branch::Rep => &self.head_rep,
        }
    }

    fn head_mut(&mut self, branch: Branch) -> &mut BranchHead {
        match branch {
            Branch::Iqa => &mut self.head_iqa,
            Branch::Vqa => &mut self.head_vqa,
            Branch::Rep => &mut self.head_rep,
        }
    }

    /// Per-view trunk: `(H, W, 3)` pixels to a d-dimensional token.
    pub fn extract_viewwise(&self, view: &Array3<f32>) -> Result<(Array1<f32>, ViewCache)> {
        let (h, w, c) = view.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_VIEW_SIDE || w < MIN_VIEW_SIDE {
            return Err(Error::Shape(format!(
                "view {h}x{w} below the {MIN_VIEW_SIDE}x{MIN_VIEW_SIDE} minimum"
            )));
        }
        let x0 = view
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned();

        let stem_pre = self.stem.forward(&x0);
        let mut z = stem_pre.mapv(gelu);

        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let mut descriptors: Vec<f32> = Vec::new();
        for stage in &self.stages {
            let input = z;
            let (down_pre, zd) = match &stage.down {
                Some(down) => {
                    let pre = down.forward(&input);
                    let zd = pre.mapv(gelu);
                    (Some(pre), zd)
                }
                None => (None, input.clone()),
            };
            let r1_pre = stage.res1.forward(&zd);
            let r1 = r1_pre.mapv(gelu);
            let r2 = stage.res2.forward(&r1);
            let sum_pre = &zd + &r2;
            let y = sum_pre.mapv(gelu);
            let refine_pre = stage.refine.forward(&y);
            let f = refine_pre.mapv(gelu);
            let (fc, fh, fw) = f.dim();
            let inv = 1.0 / (fh * fw) as f32;
            for ch in 0..fc {
                descriptors.push(f.slice(ndarray::s![ch, .., ..]).sum() * inv);
            }
            stage_caches.push(StageCache {
                input,
                down_pre,
                zd,
                r1_pre,
                r1,
                sum_pre,
                y: y.clone(),
                refine_pre,
            });
            z = y;
        }

        let token_in = Array2::from_shape_vec((1, descriptors.len()), descriptors)
            .expect("descriptor length");
        let token = self.token_proj.forward(&token_in);
        let token = token.row(0).to_owned();
        if token.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(
                "non-finite view token; input out of range?".to_string(),
            ));
        }
        Ok((
            token,
            ViewCache {
                x0,
                stem_pre,
                stages: stage_caches,
                token_in,
            },
        ))
    }

    /// Backward through one view's trunk, accumulating parameter gradients.
    fn backward_viewwise(&mut self, cache: &ViewCache, dtoken: &Array1<f32>) {
        let dtok = dtoken.view().into_shape_with_order((1, dtoken.len())).unwrap();
        let ddesc = self.token_proj.backward(&cache.token_in, &dtok.to_owned());

        let mut offset_end = ddesc.len();
        let mut dz_next: Option<Array3<f32>> = None;
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages).rev() {
            let (c, fh, fw) = sc.refine_pre.dim();
            let offset = offset_end - c;
            let inv = 1.0 / (fh * fw) as f32;
            // GAP spreads each descriptor gradient uniformly.
            let mut drefine_pre = Array3::<f32>::zeros((c, fh, fw));
            for ch in 0..c {
                let g = ddesc[(0, offset + ch)] * inv;
                drefine_pre
                    .slice_mut(ndarray::s![ch, .., ..])
                    .mapv_inplace(|_| g);
            }
            offset_end = offset;
            for (d, p) in drefine_pre.iter_mut().zip(sc.refine_pre.iter()) {
                *d *= gelu_grad(*p);
            }
            let mut dy = stage.refine.backward(&sc.y, &drefine_pre);
            if let Some(dz) = dz_next.take() {
                dy += &dz;
            }

            let mut dsum = dy;
            for (d, p) in dsum.iter_mut().zip(sc.sum_pre.iter()) {
                *d *= gelu_grad(*p);
            }
            let mut dr1 = stage.res2.backward(&sc.r1, &dsum);
            for (d, p) in dr1.iter_mut().zip(sc.r1_pre.iter()) {
                *d *= gelu_grad(*p);
            }
            let mut dzd = stage.res1.backward(&sc.zd, &dr1);
            dzd += &dsum;

            dz_next = Some(match (&mut stage.down, &sc.down_pre) {
                (Some(down), Some(down_pre)) => {
                    let mut dpre = dzd;
                    for (d, p) in dpre.iter_mut().zip(down_pre.iter()) {
                        *d *= gelu_grad(*p);
                    }
                    down.backward(&sc.input, &dpre)
                }
                _ => dzd,
            });
        }

        let mut dstem_pre = dz_next.expect("at least one stage");
        for (d, p) in dstem_pre.iter_mut().zip(cache.stem_pre.iter()) {
            *d *= gelu_grad(*p);
        }
        self.stem.backward(&cache.x0, &dstem_pre);
    }

    /// Sinusoidal positional encoding for view position `pos`.
    fn positional_encoding(&self, pos: usize) -> Array1<f32> {
        let d = self.config.repr_dim;
        let mut pe = Array1::<f32>::zeros(d);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            pe[2 * i] = angle.sin() as f32;
            pe[2 * i + 1] = angle.cos() as f32;
        }
        pe
    }

    /// Fuse per-view tokens `(V, d)` into a single D-vector.
    pub fn fuse_anglewise(&self, tokens: &Array2<f32>) -> Result<(Array1<f32>, FuseCache)> {
        let (v_len, d) = tokens.dim();
        if d != self.config.repr_dim {
            return Err(Error::Shape(format!(
                "token dim {d} does not match repr_dim {}",
                self.config.repr_dim
            )));
        }
        if v_len == 0 {
            return Err(Error::Shape("empty clip".to_string()));
        }
        if v_len > self.config.max_views {
            return Err(Error::Shape(format!(
                "clip has {v_len} views, above the max_views limit {}",
                self.config.max_views
            )));
        }
        let mut x = tokens.clone();
        for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &self.positional_encoding(pos);
        }
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = out;
        }
        let pooled = x.sum_axis(ndarray::Axis(0)) / v_len as f32;
        let pooled2 = pooled.view().into_shape_with_order((1, d)).unwrap().to_owned();
        let (repr2, final_ln) = self.final_ln.forward(&pooled2);
        let repr = repr2.row(0).to_owned();
        if repr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite representation".to_string()));
        }
        Ok((
            repr,
            FuseCache {
                layer_caches,
                v_len,
                final_ln,
            },
        ))
    }

    /// Backward through fusion; returns token gradients `(V, d)`.
    fn backward_fuse(&mut self, cache: &FuseCache, drepr: &Array1<f32>) -> Array2<f32> {
        let d = self.config.repr_dim;
        let drepr2 = drepr.view().into_shape_with_order((1, d)).unwrap().to_owned();
        let dpooled = self.final_ln.backward(&cache.final_ln, &drepr2);
        let mut dx = Array2::<f32>::zeros((cache.v_len, d));
        let scale = 1.0 / cache.v_len as f32;
        for mut row in dx.rows_mut() {
            row.assign(&(&dpooled.row(0) * scale));
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layer_caches).rev() {
            dx = layer.backward(lc, &dx);
        }
        // Positional encodings are additive constants; gradient passes
        // through unchanged.
        dx
    }

    /// Full forward over a clip, keeping caches for backward.
    pub fn represent(&self, views: &[Array3<f32>]) -> Result<(Array1<f32>, SceneCache)> {
        if views.is_empty() {
            return Err(Error::Shape("empty clip".to_string()));
        }
        let results = crate::exec::par_map_range(views.len(), |i| self.extract_viewwise(&views[i]));
        let mut tokens = Array2::<f32>::zeros((views.len(), self.config.repr_dim));
        let mut caches = Vec::with_capacity(views.len());
        for (i, r) in results.into_iter().enumerate() {
            let (token, cache) = r?;
            tokens.row_mut(i).assign(&token);
            caches.push(cache);
        }
        let (repr, fuse) = self.fuse_anglewise(&tokens)?;
        Ok((
            repr,
            SceneCache {
                views: caches,
                fuse,
            },
        ))
    }

    /// Forward without retaining per-view caches; for evaluation.
    pub fn represent_inference(&self, views: &[Array3<f32>]) -> Result<Array1<f32>> {
        if views.is_empty() {
            return Err(Error::Shape("empty clip".to_string()));
        }
        let results = crate::exec::par_map_range(views.len(), |i| {
            self.extract_viewwise(&views[i]).map(|(t, _)| t)
        });
        let mut tokens = Array2::<f32>::zeros((views.len(), self.config.repr_dim));
        for (i, r) in results.into_iter().enumerate() {
            tokens.row_mut(i).assign(&r?);
        }
        Ok(self.fuse_anglewise(&tokens)?.0)
    }

    /// Backward through fusion and every view trunk. Views run
    /// sequentially in index order so gradient accumulation is
    /// deterministic regardless of thread count.
    pub fn backward_scene(&mut self, cache: &SceneCache, drepr: &Array1<f32>) {
        let dtokens = self.backward_fuse(&cache.fuse, drepr);
        for (i, vc) in cache.views.iter().enumerate() {
            self.backward_viewwise(vc, &dtokens.row(i).to_owned());
        }
    }

    /// Branch-specific projection of a representation.
    pub fn project(&self, repr: &Array1<f32>, branch: Branch) -> (Array1<f32>, ProjCache) {
        let head = self.head(branch);
        let repr_in = repr
            .view()
            .into_shape_with_order((1, repr.len()))
            .unwrap()
            .to_owned();
        let h_pre = head.fc1.forward(&repr_in);
        let h = h_pre.mapv(gelu);
        let out = head.fc2.forward(&h);
        (
            out.row(0).to_owned(),
            ProjCache {
                branch,
                repr_in,
                h_pre,
                h,
            },
        )
    }

    /// Backward through one projection head; returns the representation
    /// gradient.
    pub fn backward_project(&mut self, cache: &ProjCache, dproj: &Array1<f32>) -> Array1<f32> {
        let head = self.head_mut(cache.branch);
        let dout = dproj
            .view()
            .into_shape_with_order((1, dproj.len()))
            .unwrap()
            .to_owned();
        let dh = head.fc2.backward(&cache.h, &dout);
        let mut dh_pre = dh;
        for (d, p) in dh_pre.iter_mut().zip(cache.h_pre.iter()) {
            *d *= gelu_grad(*p);
        }
        let drepr = head.fc1.backward(&cache.repr_in, &dh_pre);
        drepr.row(0).to_owned()
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.stem.visit_params(&p("view.stem"), visitor);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params(&p(&format!("view.stage{}", i + 1)), visitor);
        }
        self.token_proj.visit_params(&p("view.token"), visitor);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&p(&format!("fuse.layer{i}")), visitor);
        }
        self.final_ln.visit_params(&p("fuse.final_ln"), visitor);
        self.head_iqa.visit_params(&p("head.iqa"), visitor);
        self.head_vqa.visit_params(&p("head.vqa"), visitor);
        self.head_rep.visit_params(&p("head.rep"), visitor);
    }
}
