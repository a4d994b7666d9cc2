//! The conditional noise predictor `ε_θ(x_t, c, t)`.
//!
//! A small convolutional U-Net. Residual blocks at each resolution are
//! modulated (per-channel shift and scale) by the sum of the timestep and
//! condition embeddings; the bottom level adds a self-attention block; the
//! decoder upsamples and concatenates the encoder's skips.
//!
//! The network itself outputs a velocity-style field `F`; the noise
//! prediction is `ε_θ = √(1−ᾱ_t)·x_t − √ᾱ_t·F`, which carries the exact
//! `ε ≈ x_t` limit at high noise so the network never has to learn it.
//!
//! Every parameter lives in a flat map keyed by a stable string id. Layers
//! store their matrix as `in × out` (`y = x·W + b`; a 3×3 convolution has
//! `in = 9·c_in`), so a low-rank update `ΔW = B·A` has `B: in × r` and
//! `A: r × out`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttentionCache, Grid};
use crate::real::Real;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::vocab::{Phrase, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Feature width per level; level `i` runs at `image_size / 2^i`.
    pub widths: Vec<usize>,
    /// Heads of the bottom-level self-attention.
    pub heads: usize,
    /// Width of the timestep and condition embeddings.
    pub emb_dim: usize,
    /// Width of a token embedding.
    pub cond_dim: usize,
    /// Schedule the prediction is parameterized against; fixes `T`.
    pub schedule: ScheduleConfig,
    pub vocab: Vocabulary,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            widths: vec![16, 32, 64],
            heads: 4,
            emb_dim: 64,
            cond_dim: 32,
            schedule: ScheduleConfig::default(),
            vocab: Vocabulary::standard(),
        }
    }
}

/// A residual block's id and widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResBlockSpec {
    pub id: String,
    pub c_in: usize,
    pub c_out: usize,
    pub level: usize,
}

impl DenoiserConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            channels: 3,
            widths: vec![2, 4],
            heads: 2,
            emb_dim: 4,
            cond_dim: 4,
            schedule: ScheduleConfig::linear_scaled(10),
            vocab: Vocabulary::standard(),
        }
    }

    pub fn max_timestep(&self) -> usize {
        match self.schedule {
            ScheduleConfig::Linear { timesteps, .. } => timesteps,
        }
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    fn levels(&self) -> usize {
        self.widths.len()
    }

    fn grid(&self, batch: usize, level: usize) -> Grid {
        let side = self.image_size >> level;
        Grid {
            batch,
            height: side,
            width: side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("denoiser config: {m}")));
        let levels = self.levels();
        if levels == 0 || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.image_size == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return bad("image_size must be divisible by 2^(levels-1)");
        }
        if self.heads == 0 || self.widths[levels - 1] % self.heads != 0 {
            return bad("heads must divide the bottom width");
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return bad("emb_dim must be positive and even");
        }
        if self.channels == 0 || self.cond_dim == 0 {
            return bad("channels and cond_dim must be positive");
        }
        if self.vocab.is_empty() {
            return bad("vocabulary must be non-empty");
        }
        NoiseSchedule::new(self.schedule).map(|_| ())
    }

    /// Residual blocks in forward order: encoder, bottom, decoder.
    pub fn res_blocks(&self) -> Vec<ResBlockSpec> {
        let w = &self.widths;
        let last = w.len() - 1;
        let mut v: Vec<ResBlockSpec> = (0..w.len())
            .map(|i| ResBlockSpec {
                id: format!("down{i}"),
                c_in: w[i.saturating_sub(1)],
                c_out: w[i],
                level: i,
            })
            .collect();
        v.push(ResBlockSpec {
            id: "mid.res".into(),
            c_in: w[last],
            c_out: w[last],
            level: last,
        });
        for i in (0..last).rev() {
            v.push(ResBlockSpec {
                id: format!("up{i}"),
                c_in: w[i + 1] + w[i],
                c_out: w[i],
                level: i,
            });
        }
        v
    }

    /// `(id, in, out, has_bias)` for every weight matrix, in forward order.
    pub fn dense_layers(&self) -> Vec<(String, usize, usize, bool)> {
        let (e, c) = (self.emb_dim, self.channels);
        let mut v = vec![
            ("time.fc1".to_string(), e, e, true),
            ("time.fc2".to_string(), e, e, true),
            ("cond.proj".to_string(), self.cond_dim, e, true),
            ("in.conv".to_string(), 9 * c, self.widths[0], true),
        ];
        let res = self.res_blocks();
        let bottom = self.widths[self.levels() - 1];
        for r in &res {
            if r.id == "mid.res" {
                for n in ["q", "k", "v", "o"] {
                    v.push((format!("mid.attn.{n}"), bottom, bottom, true));
                }
            }
            v.push((format!("{}.conv1", r.id), 9 * r.c_in, r.c_out, true));
            v.push((format!("{}.mod", r.id), e, 2 * r.c_out, true));
            v.push((format!("{}.conv2", r.id), 9 * r.c_out, r.c_out, true));
            if r.c_in != r.c_out {
                v.push((format!("{}.skip", r.id), r.c_in, r.c_out, false));
            }
        }
        v.push(("out.conv".to_string(), 9 * self.widths[0], c, true));
        v
    }

    /// Condition-injection and attention projection layers: the default
    /// slider targets.
    pub fn slider_target_layers(&self) -> Vec<String> {
        let mut v = vec!["cond.proj".to_string()];
        v.extend(self.res_blocks().into_iter().map(|r| format!("{}.mod", r.id)));
        v.extend(["q", "k", "v", "o"].map(|n| format!("mid.attn.{n}")));
        v
    }
}

pub fn bias_id(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Read access to the (possibly adapted) parameters used by a forward pass.
pub trait WeightSource<F: Real>: Sync {
    fn weight(&self, id: &str) -> &Array2<F>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<F: Real = f32> {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: BTreeMap<String, Array2<F>>,
}

impl<F: Real> WeightSource<F> for DenoiserModel<F> {
    fn weight(&self, id: &str) -> &Array2<F> {
        self.params
            .get(id)
            .unwrap_or_else(|| panic!("missing parameter `{id}`"))
    }
}

fn zero_initialized(id: &str) -> bool {
    id == "out.conv" || id == "mid.attn.o" || id.ends_with(".conv2") || id.ends_with(".mod")
}

impl<F: Real> DenoiserModel<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::lit(z * std)
            })
        };
        let mut params = BTreeMap::new();
        for (id, fan_in, fan_out, has_bias) in config.dense_layers() {
            let w = if zero_initialized(&id) {
                Array2::zeros((fan_in, fan_out))
            } else {
                normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
            };
            params.insert(id.clone(), w);
            if has_bias {
                params.insert(bias_id(&id), Array2::zeros((1, fan_out)));
            }
        }
        params.insert(
            "cond.table".to_string(),
            normal(config.vocab.len(), config.cond_dim, 1.0),
        );
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    /// Assembles a model from stored parameters, checking every shape.
    pub fn from_params(config: DenoiserConfig, params: BTreeMap<String, Array2<F>>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        let expected: BTreeSet<&String> = reference.params.keys().collect();
        let found: BTreeSet<&String> = params.keys().collect();
        if expected != found {
            let missing: Vec<_> = expected.difference(&found).collect();
            let extra: Vec<_> = found.difference(&expected).collect();
            return Err(Error::Format(format!(
                "parameter set mismatch: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (id, w) in &params {
            let want = reference.params[id].dim();
            if w.dim() != want {
                return Err(Error::Shape(format!("{id}: {:?} vs {want:?}", w.dim())));
            }
        }
        Ok(Self {
            schedule: reference.schedule,
            config,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn params(&self) -> &BTreeMap<String, Array2<F>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Array2<F>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Ids of weight matrices that can carry a low-rank update.
    pub fn layer_ids(&self) -> Vec<String> {
        self.config
            .dense_layers()
            .into_iter()
            .map(|(id, ..)| id)
            .collect()
    }

    /// `(d, k)` of a layer's weight matrix.
    pub fn layer_dims(&self, id: &str) -> Result<(usize, usize)> {
        self.config
            .dense_layers()
            .into_iter()
            .find(|(l, ..)| l == id)
            .map(|(_, d, k, _)| (d, k))
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    pub fn cast<G: Real>(&self) -> DenoiserModel<G> {
        DenoiserModel {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::lit(x.to_f64_lossy()))))
                .collect(),
        }
    }

    /// Noise prediction for a batch of flattened images (`batch × H·W·C`).
    pub fn predict(
        &self,
        weights: &dyn WeightSource<F>,
        x: ArrayView2<F>,
        timesteps: &[usize],
        conds: &[Phrase],
    ) -> Array2<F> {
        self.forward(weights, x, timesteps, conds).0
    }

    pub fn forward(
        &self,
        weights: &dyn WeightSource<F>,
        x: ArrayView2<F>,
        timesteps: &[usize],
        conds: &[Phrase],
    ) -> (Array2<F>, ForwardCache<F>) {
        let cfg = &self.config;
        let batch = x.nrows();
        assert_eq!(x.ncols(), cfg.pixels(), "image width");
        assert_eq!(timesteps.len(), batch, "one timestep per sample");
        assert_eq!(conds.len(), batch, "one condition per sample");
        for &t in timesteps {
            assert!(self.schedule.check_timestep(t).is_ok(), "timestep {t} outside the schedule");
        }
        let w = |id: &str| weights.weight(id);
        let b = |id: &str| Some(weights.weight(&bias_id(id)));

        let temb_in = time_embedding::<F>(timesteps, cfg.emb_dim, cfg.max_timestep());
        let t1 = nn::linear(temb_in.view(), w("time.fc1"), b("time.fc1"));
        let t1a = nn::silu(t1.view());
        let temb = nn::linear(t1a.view(), w("time.fc2"), b("time.fc2"));
        let token_ids: Vec<Vec<u32>> = conds.iter().map(Phrase::embedding_ids).collect();
        let pooled = pool_tokens(w("cond.table"), &token_ids);
        let cemb = nn::linear(pooled.view(), w("cond.proj"), b("cond.proj"));
        let gsum = &temb + &cemb;
        let g = nn::silu(gsum.view());

        let levels = cfg.levels();
        let grid0 = cfg.grid(batch, 0);
        let x_map = pixels_to_map(x, cfg);
        let mut h = nn::conv3x3(x_map.view(), grid0, w("in.conv"), b("in.conv"));
        let mut stages = Vec::new();
        let mut skips: Vec<Option<Array2<F>>> = vec![None; levels];
        let res = cfg.res_blocks();
        let mut res_iter = res.iter();
        for level in 0..levels {
            if level > 0 {
                h = nn::avg_pool2(h.view(), cfg.grid(batch, level - 1));
                stages.push(Stage::Pool(cfg.grid(batch, level - 1)));
            }
            let spec = res_iter.next().expect("one encoder block per level");
            let (out, cache) = res_forward(weights, spec, h, cfg.grid(batch, level), &g);
            h = out;
            stages.push(Stage::Res(cache));
            if level + 1 < levels {
                skips[level] = Some(h.clone());
                stages.push(Stage::Skip(level));
            }
        }
        let bottom = cfg.grid(batch, levels - 1);
        let (out, cache) = attn_forward(weights, h, bottom, cfg.heads);
        h = out;
        stages.push(Stage::Attn(cache));
        for spec in res_iter {
            if spec.id != "mid.res" {
                let small = cfg.grid(batch, spec.level + 1);
                h = nn::upsample2(h.view(), small);
                stages.push(Stage::Upsample(small));
                let skip = skips[spec.level].take().expect("encoder skip");
                let left = h.ncols();
                h = concatenate(Axis(1), &[h.view(), skip.view()]).expect("matching rows");
                stages.push(Stage::Concat { level: spec.level, left });
            }
            let (out, cache) = res_forward(weights, spec, h, cfg.grid(batch, spec.level), &g);
            h = out;
            stages.push(Stage::Res(cache));
        }

        let (nf, invf) = nn::layer_norm(h.view());
        let af = nn::silu(nf.view());
        let field_map = nn::conv3x3(af.view(), grid0, w("out.conv"), b("out.conv"));
        let (signal, noise): (Vec<F>, Vec<F>) = timesteps
            .iter()
            .map(|&t| {
                let ab = self.schedule.alpha_bar(t);
                (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()))
            })
            .unzip();
        let mut out = map_to_pixels(field_map, cfg, batch);
        for (b, mut row) in out.rows_mut().into_iter().enumerate() {
            let (sg, ns) = (signal[b], noise[b]);
            ndarray::Zip::from(&mut row)
                .and(x.row(b))
                .for_each(|o, &xv| *o = ns * xv - sg * *o);
        }
        let cache = ForwardCache {
            batch,
            signal,
            x_map,
            temb_in,
            t1,
            t1a,
            token_ids,
            pooled,
            gsum,
            g,
            stages,
            nf,
            invf,
            af,
        };
        (out, cache)
    }

    /// Back-propagates `dout` (same shape as the prediction) and returns the
    /// gradients of the requested parameters.
    pub fn backward(
        &self,
        weights: &dyn WeightSource<F>,
        cache: &ForwardCache<F>,
        dout: ArrayView2<F>,
        wanted: &GradRequest,
    ) -> Gradients<F> {
        let cfg = &self.config;
        let mut grads = Gradients::default();
        let bw = Backprop {
            weights,
            wanted,
        };
        let grid0 = cfg.grid(cache.batch, 0);

        let mut dfield = dout.to_owned();
        for (mut row, &sg) in dfield.rows_mut().into_iter().zip(&cache.signal) {
            row.mapv_inplace(|v| -sg * v);
        }
        let dfield_map = pixels_to_map(dfield.view(), cfg);
        let daf = bw.conv(&mut grads, "out.conv", cache.af.view(), grid0, dfield_map.view(), true);
        let dnf = nn::silu_backward(cache.nf.view(), daf.view());
        let mut dh = nn::layer_norm_backward(cache.nf.view(), &cache.invf, dnf.view());
        let mut dg = Array2::<F>::zeros(cache.g.raw_dim());
        let mut dskips: Vec<Option<Array2<F>>> = vec![None; cfg.levels()];

        for stage in cache.stages.iter().rev() {
            dh = match stage {
                Stage::Res(rc) => res_backward(&bw, &mut grads, rc, &cache.g, dh, &mut dg),
                Stage::Attn(ac) => attn_backward(&bw, &mut grads, ac, dh, cfg.heads),
                Stage::Pool(grid) => nn::avg_pool2_backward(dh.view(), *grid),
                Stage::Upsample(grid) => nn::upsample2_backward(dh.view(), *grid),
                Stage::Concat { level, left } => {
                    dskips[*level] = Some(dh.slice(s![.., *left..]).to_owned());
                    dh.slice(s![.., ..*left]).to_owned()
                }
                Stage::Skip(level) => {
                    dh += dskips[*level].as_ref().expect("decoder consumed the skip");
                    dh
                }
            };
        }
        bw.conv(&mut grads, "in.conv", cache.x_map.view(), grid0, dh.view(), true);

        let dgsum = nn::silu_backward(cache.gsum.view(), dg.view());
        let dpooled = bw.dense(&mut grads, "cond.proj", cache.pooled.view(), dgsum.view(), true);
        if wanted.wants("cond.table") {
            let table = weights.weight("cond.table");
            let mut dtable = Array2::<F>::zeros(table.raw_dim());
            for (ids, drow) in cache.token_ids.iter().zip(dpooled.rows()) {
                let scale = F::one() / F::lit(ids.len() as f64);
                for id in ids {
                    dtable.row_mut(*id as usize).scaled_add(scale, &drow);
                }
            }
            grads.accumulate("cond.table", dtable);
        }
        let dt1a = bw.dense(&mut grads, "time.fc2", cache.t1a.view(), dgsum.view(), true);
        let dt1 = nn::silu_backward(cache.t1.view(), dt1a.view());
        bw.dense(&mut grads, "time.fc1", cache.temb_in.view(), dt1.view(), true);
        grads
    }
}

struct Backprop<'a, F: Real> {
    weights: &'a dyn WeightSource<F>,
    wanted: &'a GradRequest,
}

impl<F: Real> Backprop<'_, F> {
    fn collect(&self, grads: &mut Gradients<F>, id: &str, dw: Option<Array2<F>>, db: Option<Array2<F>>) {
        if let Some(dw) = dw {
            grads.accumulate(id, dw);
        }
        if let Some(db) = db {
            grads.accumulate(&bias_id(id), db);
        }
    }

    fn dense(&self, grads: &mut Gradients<F>, id: &str, x: ArrayView2<F>, dy: ArrayView2<F>, has_bias: bool) -> Array2<F> {
        let want_b = has_bias && self.wanted.wants(&bias_id(id));
        let (dx, dw, db) = nn::linear_backward(x, self.weights.weight(id), dy, self.wanted.wants(id), want_b);
        self.collect(grads, id, dw, db);
        dx
    }

    fn conv(&self, grads: &mut Gradients<F>, id: &str, x: ArrayView2<F>, grid: Grid, dy: ArrayView2<F>, has_bias: bool) -> Array2<F> {
        let want_b = has_bias && self.wanted.wants(&bias_id(id));
        let (dx, dw, db) =
            nn::conv3x3_backward(x, grid, self.weights.weight(id), dy, self.wanted.wants(id), want_b);
        self.collect(grads, id, dw, db);
        dx
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<F> {
    batch: usize,
    signal: Vec<F>,
    x_map: Array2<F>,
    temb_in: Array2<F>,
    t1: Array2<F>,
    t1a: Array2<F>,
    token_ids: Vec<Vec<u32>>,
    pooled: Array2<F>,
    gsum: Array2<F>,
    g: Array2<F>,
    stages: Vec<Stage<F>>,
    nf: Array2<F>,
    invf: Array1<F>,
    af: Array2<F>,
}

enum Stage<F> {
    Res(ResCache<F>),
    Attn(AttnCache<F>),
    Pool(Grid),
    Upsample(Grid),
    /// Columns `left..` of the concatenation came from the level's skip.
    Concat { level: usize, left: usize },
    /// The block output was also routed to the decoder.
    Skip(usize),
}

struct ResCache<F> {
    id: String,
    grid: Grid,
    x: Array2<F>,
    n1: Array2<F>,
    inv1: Array1<F>,
    a1: Array2<F>,
    h: Array2<F>,
    modulation: Array2<F>,
    n2: Array2<F>,
    inv2: Array1<F>,
    a2: Array2<F>,
    has_skip: bool,
}

fn res_forward<F: Real>(
    weights: &dyn WeightSource<F>,
    spec: &ResBlockSpec,
    x: Array2<F>,
    grid: Grid,
    g: &Array2<F>,
) -> (Array2<F>, ResCache<F>) {
    let id = |s: &str| format!("{}.{s}", spec.id);
    let w = |s: &str| weights.weight(&id(s));
    let b = |s: &str| Some(weights.weight(&bias_id(&id(s))));
    let (n1, inv1) = nn::layer_norm(x.view());
    let a1 = nn::silu(n1.view());
    let h = nn::conv3x3(a1.view(), grid, w("conv1"), b("conv1"));
    let modulation = nn::linear(g.view(), w("mod"), b("mod"));
    let h2 = modulate(&h, &modulation, 0, spec.c_out, grid.per_sample());
    let (n2, inv2) = nn::layer_norm(h2.view());
    let a2 = nn::silu(n2.view());
    let mut out = nn::conv3x3(a2.view(), grid, w("conv2"), b("conv2"));
    let has_skip = spec.c_in != spec.c_out;
    if has_skip {
        out += &x.dot(w("skip"));
    } else {
        out += &x;
    }
    let cache = ResCache {
        id: spec.id.clone(),
        grid,
        x,
        n1,
        inv1,
        a1,
        h,
        modulation,
        n2,
        inv2,
        a2,
        has_skip,
    };
    (out, cache)
}

fn res_backward<F: Real>(
    bw: &Backprop<'_, F>,
    grads: &mut Gradients<F>,
    rc: &ResCache<F>,
    g: &Array2<F>,
    dout: Array2<F>,
    dg: &mut Array2<F>,
) -> Array2<F> {
    let id = |s: &str| format!("{}.{s}", rc.id);
    let c_out = dout.ncols();
    let mut dx = if rc.has_skip {
        bw.dense(grads, &id("skip"), rc.x.view(), dout.view(), false)
    } else {
        dout.clone()
    };
    let da2 = bw.conv(grads, &id("conv2"), rc.a2.view(), rc.grid, dout.view(), true);
    let dn2 = nn::silu_backward(rc.n2.view(), da2.view());
    let dh2 = nn::layer_norm_backward(rc.n2.view(), &rc.inv2, dn2.view());
    let mut dmod = Array2::<F>::zeros(rc.modulation.raw_dim());
    let dh = demodulate(&dh2, &rc.h, &rc.modulation, &mut dmod, 0, c_out, rc.grid.per_sample());
    *dg += &bw.dense(grads, &id("mod"), g.view(), dmod.view(), true);
    let da1 = bw.conv(grads, &id("conv1"), rc.a1.view(), rc.grid, dh.view(), true);
    let dn1 = nn::silu_backward(rc.n1.view(), da1.view());
    dx += &nn::layer_norm_backward(rc.n1.view(), &rc.inv1, dn1.view());
    dx
}

struct AttnCache<F> {
    tokens: usize,
    n: Array2<F>,
    inv: Array1<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: AttentionCache<F>,
    attn_out: Array2<F>,
}

fn attn_forward<F: Real>(weights: &dyn WeightSource<F>, x: Array2<F>, grid: Grid, heads: usize) -> (Array2<F>, AttnCache<F>) {
    let w = |s: &str| weights.weight(s);
    let b = |s: &str| Some(weights.weight(&bias_id(s)));
    let tokens = grid.per_sample();
    let (n, inv) = nn::layer_norm(x.view());
    let q = nn::linear(n.view(), w("mid.attn.q"), b("mid.attn.q"));
    let k = nn::linear(n.view(), w("mid.attn.k"), b("mid.attn.k"));
    let v = nn::linear(n.view(), w("mid.attn.v"), b("mid.attn.v"));
    let (attn_out, attn) = nn::attention(&q, &k, &v, tokens, heads);
    let out = &x + &nn::linear(attn_out.view(), w("mid.attn.o"), b("mid.attn.o"));
    let cache = AttnCache {
        tokens,
        n,
        inv,
        q,
        k,
        v,
        attn,
        attn_out,
    };
    (out, cache)
}

fn attn_backward<F: Real>(
    bw: &Backprop<'_, F>,
    grads: &mut Gradients<F>,
    ac: &AttnCache<F>,
    dout: Array2<F>,
    heads: usize,
) -> Array2<F> {
    let dattn = bw.dense(grads, "mid.attn.o", ac.attn_out.view(), dout.view(), true);
    let (dq, dk, dv) = nn::attention_backward(&ac.q, &ac.k, &ac.v, &ac.attn, dattn.view(), ac.tokens, heads);
    let mut dn = bw.dense(grads, "mid.attn.q", ac.n.view(), dq.view(), true);
    dn += &bw.dense(grads, "mid.attn.k", ac.n.view(), dk.view(), true);
    dn += &bw.dense(grads, "mid.attn.v", ac.n.view(), dv.view(), true);
    let mut dx = dout;
    dx += &nn::layer_norm_backward(ac.n.view(), &ac.inv, dn.view());
    dx
}

/// `batch × (H·W·C)` → `(batch·H·W) × C`; rows are already pixel-major.
fn pixels_to_map<F: Real>(x: ArrayView2<F>, cfg: &DenoiserConfig) -> Array2<F> {
    let rows = x.nrows() * cfg.image_size * cfg.image_size;
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cfg.channels))
        .expect("pixel layout")
}

fn map_to_pixels<F: Real>(m: Array2<F>, cfg: &DenoiserConfig, batch: usize) -> Array2<F> {
    m.into_shape_with_order((batch, cfg.pixels())).expect("pixel layout")
}

/// Which parameter gradients `backward` should materialize.
#[derive(Debug, Clone)]
pub enum GradRequest {
    All,
    Only(BTreeSet<String>),
}

impl GradRequest {
    pub fn only<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        GradRequest::Only(ids.into_iter().map(Into::into).collect())
    }

    pub fn wants(&self, id: &str) -> bool {
        match self {
            GradRequest::All => true,
            GradRequest::Only(set) => set.contains(id),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    pub map: BTreeMap<String, Array2<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn accumulate(&mut self, id: &str, g: Array2<F>) {
        match self.map.get_mut(id) {
            Some(acc) => *acc += &g,
            None => {
                self.map.insert(id.to_string(), g);
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&Array2<F>> {
        self.map.get(id)
    }

    pub fn scale(&mut self, s: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn merge(&mut self, other: Gradients<F>) {
        for (k, v) in other.map {
            self.accumulate(&k, v);
        }
    }
}

fn modulate<F: Real>(x: &Array2<F>, modulation: &Array2<F>, slot: usize, d: usize, n: usize) -> Array2<F> {
    let mut out = x.clone();
    for (b, mut chunk) in out.axis_chunks_iter_mut(Axis(0), n).enumerate() {
        let shift = modulation.slice(s![b, slot * d..(slot + 1) * d]);
        let scale = modulation.slice(s![b, (slot + 1) * d..(slot + 2) * d]);
        for mut row in chunk.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&shift)
                .and(&scale)
                .for_each(|v, &sh, &sc| *v = *v * (F::one() + sc) + sh);
        }
    }
    out
}

/// Backward of [`modulate`]: returns the input gradient and accumulates the
/// shift/scale gradients into `dmod`.
fn demodulate<F: Real>(
    dy: &Array2<F>,
    x: &Array2<F>,
    modulation: &Array2<F>,
    dmod: &mut Array2<F>,
    slot: usize,
    d: usize,
    n: usize,
) -> Array2<F> {
    let mut dx = dy.clone();
    let batch = dy.nrows() / n;
    for b in 0..batch {
        let rows = b * n..(b + 1) * n;
        let dyb = dy.slice(s![rows.clone(), ..]);
        let xb = x.slice(s![rows.clone(), ..]);
        let dshift = dyb.sum_axis(Axis(0));
        let dscale = (&dyb * &xb).sum_axis(Axis(0));
        dmod.slice_mut(s![b, slot * d..(slot + 1) * d]).assign(&dshift);
        dmod.slice_mut(s![b, (slot + 1) * d..(slot + 2) * d]).assign(&dscale);
        let scale = modulation.slice(s![b, (slot + 1) * d..(slot + 2) * d]);
        for mut row in dx.slice_mut(s![rows, ..]).rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&scale)
                .for_each(|v, &sc| *v = *v * (F::one() + sc));
        }
    }
    dx
}

fn pool_tokens<F: Real>(table: &Array2<F>, token_ids: &[Vec<u32>]) -> Array2<F> {
    let mut out = Array2::zeros((token_ids.len(), table.ncols()));
    for (mut row, ids) in out.rows_mut().into_iter().zip(token_ids) {
        for id in ids {
            row += &table.row(*id as usize);
        }
        let inv = F::one() / F::lit(ids.len() as f64);
        row.mapv_inplace(|v| v * inv);
    }
    out
}

/// Sinusoidal embedding with `t` rescaled so the last step maps to 1000.
pub fn time_embedding<F: Real>(timesteps: &[usize], dim: usize, max_t: usize) -> Array2<F> {
    let half = dim / 2;
    let mut out = Array2::zeros((timesteps.len(), dim));
    for (mut row, &t) in out.rows_mut().into_iter().zip(timesteps) {
        let pos = t as f64 * 1000.0 / max_t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = F::lit((pos * freq).sin());
            row[half + i] = F::lit((pos * freq).cos());
        }
    }
    out
}
