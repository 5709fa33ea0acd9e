//! Weight-shared two-view encoder: a compact convolutional backbone, the
//! four-branch permuted-axis attention block and a five-stream classifier head.
//!
//! Drone and satellite images go through the very same [`Model`], so the two
//! views share every parameter by construction.

mod params;

pub use params::{Bound, Param, ParamGroup, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DimOrder, Graph, Real, Tensor, Var};

/// Stream names in output order: the fused map, then one per branch order.
pub const STREAMS: [&str; 5] = ["fused", "CHW", "HWC", "WCH", "CWH"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input image extents `(C, H, W)`.
    pub input: [usize; 3],
    /// Output channels of each stride-2 backbone stage.
    pub widths: Vec<usize>,
    pub n_streams: usize,
    pub bottleneck: usize,
    pub n_classes: usize,
    pub caci_reduction: usize,
    pub caci_weight_sharing: bool,
    /// Side of the square spatial-attention kernel.
    pub spatial_kernel: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for 16x16 RGB payloads.
    pub fn desk(n_classes: usize) -> Self {
        ModelConfig {
            input: [3, 16, 16],
            widths: vec![16, 32],
            n_streams: 5,
            bottleneck: 32,
            n_classes,
            caci_reduction: 4,
            caci_weight_sharing: true,
            spatial_kernel: 7,
        }
    }

    pub fn c_out(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input[0])
    }

    /// Spatial extents of the backbone output.
    pub fn feature_hw(&self) -> (usize, usize) {
        let f = 1usize << self.widths.len();
        (self.input[1] / f, self.input[2] / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input.iter().any(|&d| d == 0) {
            return bad(format!("input extents {:?} must be positive", self.input));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("backbone widths {:?} must be non-empty and positive", self.widths));
        }
        let f = 1usize << self.widths.len();
        if self.input[1] % f != 0 || self.input[2] % f != 0 {
            return bad(format!(
                "input {}x{} not divisible by total stride {f}",
                self.input[1], self.input[2]
            ));
        }
        if self.n_streams != STREAMS.len() {
            return bad(format!("the head has exactly {} streams, got {}", STREAMS.len(), self.n_streams));
        }
        if self.bottleneck == 0 || self.n_classes == 0 {
            return bad("bottleneck and n_classes must be positive".into());
        }
        if self.caci_reduction == 0 || self.c_out() % self.caci_reduction != 0 {
            return bad(format!(
                "caci_reduction {} must divide c_out {}",
                self.caci_reduction,
                self.c_out()
            ));
        }
        for order in DimOrder::BRANCHES {
            let ch = self.branch_shape(order)[0];
            if ch < self.caci_reduction {
                return bad(format!(
                    "branch {} has {ch} channels, fewer than reduction {}",
                    order.name(),
                    self.caci_reduction
                ));
            }
        }
        if self.spatial_kernel % 2 == 0 {
            return bad("spatial_kernel must be odd".into());
        }
        Ok(())
    }

    /// `(C', H', W')` of the backbone output after permuting by `order`.
    pub fn branch_shape(&self, order: DimOrder) -> [usize; 3] {
        let (h, w) = self.feature_hw();
        let chw = [self.c_out(), h, w];
        let a = order.axes();
        [chw[a[0]], chw[a[1]], chw[a[2]]]
    }

    pub fn embedding_dim(&self) -> usize {
        self.n_streams * self.bottleneck
    }
}

/// Parameter-name prefix of the spatial-attention conv used by `order`.
fn spatial_prefix(order: DimOrder, shared: bool) -> String {
    if shared {
        "caci.spatial".into()
    } else {
        format!("caci.{}.spatial", order.name())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Everything one forward pass produces for a batch.
pub struct ForwardOut<'g> {
    pub feature: Var<'g>,
    pub fused: Var<'g>,
    pub branches: [Var<'g>; 4],
    pub scales: [Var<'g>; 4],
    /// Globally average-pooled fused map, `(N, C)`.
    pub pooled: Var<'g>,
    pub bottlenecks: Vec<Var<'g>>,
    pub logits: Vec<Var<'g>>,
}

impl Model {
    /// Fan-in scaled uniform weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as Real)
        };

        let mut cin = config.input[0];
        for (i, &w) in config.widths.iter().enumerate() {
            let group = ParamGroup::Backbone;
            params.insert(format!("backbone.{i}.conv.weight"), group, uniform(&[w, cin, 3, 3], cin * 9));
            params.insert(format!("backbone.{i}.conv.bias"), group, Tensor::zeros(&[w]));
            params.insert(format!("backbone.{i}.norm.gamma"), group, Tensor::full(&[w], 1.0));
            params.insert(format!("backbone.{i}.norm.beta"), group, Tensor::zeros(&[w]));
            cin = w;
        }

        let k = config.spatial_kernel;
        let head = ParamGroup::Head;
        for order in DimOrder::BRANCHES {
            let ch = config.branch_shape(order)[0];
            let hidden = ch / config.caci_reduction;
            let p = format!("caci.{}", order.name());
            params.insert(format!("{p}.mlp1.weight"), head, uniform(&[hidden, ch], ch));
            params.insert(format!("{p}.mlp1.bias"), head, Tensor::zeros(&[hidden]));
            params.insert(format!("{p}.mlp2.weight"), head, uniform(&[ch, hidden], hidden));
            params.insert(format!("{p}.mlp2.bias"), head, Tensor::zeros(&[ch]));
            let sp = spatial_prefix(order, config.caci_weight_sharing);
            if params.get(&format!("{sp}.weight")).is_none() {
                params.insert(format!("{sp}.weight"), head, uniform(&[1, 2, k, k], 2 * k * k));
                params.insert(format!("{sp}.bias"), head, Tensor::zeros(&[1]));
            }
        }

        let c = config.c_out();
        for s in STREAMS {
            let nb = config.bottleneck;
            params.insert(format!("head.{s}.bottleneck.weight"), head, uniform(&[nb, c], c));
            params.insert(format!("head.{s}.bottleneck.bias"), head, Tensor::zeros(&[nb]));
            params.insert(format!("head.{s}.classifier.weight"), head, uniform(&[config.n_classes, nb], nb));
            params.insert(format!("head.{s}.classifier.bias"), head, Tensor::zeros(&[config.n_classes]));
        }
        Ok(Model { config, params })
    }

    /// Number of scalar parameters in the spatial-attention conv block.
    pub fn spatial_block_size(&self) -> usize {
        2 * self.config.spatial_kernel * self.config.spatial_kernel + 1
    }

    /// Checks that a batch `(N, C, H, W)` matches the configured input.
    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input {
            return Err(Error::Shape(format!(
                "model expects (N, {:?}), got {s:?}",
                self.config.input
            )));
        }
        Ok(())
    }

    /// Full forward pass over a batch.
    pub fn forward<'g>(&self, x: Var<'g>, p: &Bound<'g>) -> Result<ForwardOut<'g>> {
        self.check_input(&x)?;
        let feature = backbone_forward(x, p, self.config.widths.len())?;
        let rca = rca_forward(feature, p, self.config.caci_weight_sharing, self.config.spatial_kernel)?;
        let pooled = rca.fused.global_avg_pool()?;
        let (bottlenecks, logits) = head_forward(rca.fused, &rca.branches, p)?;
        Ok(ForwardOut {
            feature,
            fused: rca.fused,
            branches: rca.branches,
            scales: rca.scales,
            pooled,
            bottlenecks,
            logits,
        })
    }

    /// Unit-norm retrieval embeddings (concatenated bottlenecks) for a batch
    /// `(N, C, H, W)`; one row per image.
    pub fn embed_batch(&self, batch: &Tensor) -> Result<Vec<Vec<Real>>> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let x = graph.constant(batch.clone());
        let out = self.forward(x, &p)?;
        let emb = embedding_from_bottlenecks(&out.bottlenecks)?.value();
        let d = self.config.embedding_dim();
        Ok(emb.data().chunks(d).map(<[Real]>::to_vec).collect())
    }

    /// Embeddings of many `(C, H, W)` images, computed in chunks spread over
    /// worker threads. Every row depends only on its own image, so the
    /// result does not depend on the thread count.
    pub fn embed_many(&self, images: &[&Tensor]) -> Result<Vec<Vec<Real>>> {
        const CHUNK: usize = 32;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<&[&Tensor]> = images.chunks(CHUNK).collect();
        let workers = worker_threads().min(chunks.len());
        let embed_chunk = |c: &[&Tensor]| -> Result<Vec<Vec<Real>>> {
            let owned: Vec<Tensor> = c.iter().map(|t| (*t).clone()).collect();
            self.embed_batch(&Tensor::stack(&owned)?)
        };
        let per_chunk: Vec<Result<Vec<Vec<Real>>>> = if workers <= 1 {
            chunks.iter().map(|c| embed_chunk(c)).collect()
        } else {
            let mut slots: Vec<Option<Result<Vec<Vec<Real>>>>> = (0..chunks.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let chunks = &chunks;
                        let embed_chunk = &embed_chunk;
                        scope.spawn(move || {
                            (w..chunks.len()).step_by(workers).map(|i| (i, embed_chunk(chunks[i]))).collect::<Vec<_>>()
                        })
                    })
                    .collect();
                for h in handles {
                    for (i, r) in h.join().expect("embedding worker panicked") {
                        slots[i] = Some(r);
                    }
                }
            });
            slots.into_iter().map(|s| s.expect("every chunk embedded")).collect()
        };
        let mut out = Vec::with_capacity(images.len());
        for r in per_chunk {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Embedding of one `(C, H, W)` image.
    pub fn extract_embedding(&self, image: &Tensor) -> Result<Vec<Real>> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(&shape)?;
        Ok(self.embed_batch(&batch)?.remove(0))
    }

    /// Fused RCA output for one `(C, H, W)` image, shape `(C', H', W')`.
    pub fn fused_map(&self, image: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let x = graph.constant(image.clone().reshape(&shape)?);
        let out = self.forward(x, &p)?;
        let fused = out.fused.value();
        let s = fused.shape()[1..].to_vec();
        fused.reshape(&s)
    }
}

/// Concatenates the stream bottlenecks and normalises each row to unit length.
pub fn embedding_from_bottlenecks<'g>(bottlenecks: &[Var<'g>]) -> Result<Var<'g>> {
    Var::concat(bottlenecks, 1)?.l2_normalize().map_err(|e| match e {
        Error::Domain(m) => Error::Numeric(format!("all-zero embedding: {m}")),
        other => other,
    })
}

/// Stride-2 conv, channel normalisation and ReLU per stage.
pub fn backbone_forward<'g>(x: Var<'g>, p: &Bound<'g>, stages: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let f = 1usize << stages;
    if s.len() != 4 || s[2] % f != 0 || s[3] % f != 0 {
        return Err(Error::Shape(format!("input {s:?} not divisible by total stride {f}")));
    }
    let mut h = x;
    for i in 0..stages {
        h = h.conv2d(
            p.var(&format!("backbone.{i}.conv.weight"))?,
            Some(p.var(&format!("backbone.{i}.conv.bias"))?),
            2,
            1,
        )?;
        h = h
            .channel_norm(p.var(&format!("backbone.{i}.norm.gamma"))?, p.var(&format!("backbone.{i}.norm.beta"))?)?
            .relu()?;
    }
    Ok(h)
}

/// Parameters of one attention block as graph vars.
#[derive(Clone, Copy)]
pub struct CaciVars<'g> {
    pub mlp1_w: Var<'g>,
    pub mlp1_b: Var<'g>,
    pub mlp2_w: Var<'g>,
    pub mlp2_b: Var<'g>,
    pub spatial_w: Var<'g>,
    pub spatial_b: Var<'g>,
}

impl<'g> CaciVars<'g> {
    pub fn for_branch(p: &Bound<'g>, order: DimOrder, shared: bool) -> Result<Self> {
        let pre = format!("caci.{}", order.name());
        let sp = spatial_prefix(order, shared);
        Ok(CaciVars {
            mlp1_w: p.var(&format!("{pre}.mlp1.weight"))?,
            mlp1_b: p.var(&format!("{pre}.mlp1.bias"))?,
            mlp2_w: p.var(&format!("{pre}.mlp2.weight"))?,
            mlp2_b: p.var(&format!("{pre}.mlp2.bias"))?,
            spatial_w: p.var(&format!("{sp}.weight"))?,
            spatial_b: p.var(&format!("{sp}.bias"))?,
        })
    }
}

/// Channel gate `sigmoid(MLP(avgpool(x)))` times the spatial gate
/// `sigmoid(conv([mean_c(x); max_c(x)]))`. Returns `(scale * x, scale)`.
pub fn caci_forward<'g>(x: Var<'g>, p: &CaciVars<'g>, kernel: usize) -> Result<(Var<'g>, Var<'g>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("attention input must be (N, C, H, W), got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let hidden = p.mlp1_w.shape()[0];
    if p.mlp1_w.shape()[1] != c {
        return Err(Error::Shape(format!(
            "attention MLP expects {} channels, input has {c}",
            p.mlp1_w.shape()[1]
        )));
    }
    if hidden == 0 || c < hidden {
        return Err(Error::Config(format!("{c} channels cannot be squeezed to {hidden}")));
    }
    let channel = x
        .global_avg_pool()?
        .linear(p.mlp1_w, Some(p.mlp1_b))?
        .relu()?
        .linear(p.mlp2_w, Some(p.mlp2_b))?
        .sigmoid()?
        .reshape(&[n, c, 1, 1])?;
    let pooled = Var::concat(&[x.channel_mean()?, x.channel_max()?], 1)?;
    let spatial = pooled.conv2d(p.spatial_w, Some(p.spatial_b), 1, kernel / 2)?.sigmoid()?;
    let scale = channel.mul(spatial)?;
    Ok((scale.mul(x)?, scale))
}

pub struct RcaOut<'g> {
    pub fused: Var<'g>,
    /// Per-branch outputs in original `(C, H, W)` order.
    pub branches: [Var<'g>; 4],
    /// Per-branch attention scales in permuted order.
    pub scales: [Var<'g>; 4],
}

/// Permute, attend, un-permute on each of the four branch orders and sum.
pub fn rca_forward<'g>(f: Var<'g>, p: &Bound<'g>, shared: bool, kernel: usize) -> Result<RcaOut<'g>> {
    let mut branches = Vec::with_capacity(4);
    let mut scales = Vec::with_capacity(4);
    for order in DimOrder::BRANCHES {
        let axes = order.batched();
        let permuted = f.permute(&axes)?;
        let vars = CaciVars::for_branch(p, order, shared)?;
        let (attended, scale) = caci_forward(permuted, &vars, kernel)?;
        branches.push(attended.inverse_permute(&axes)?);
        scales.push(scale);
    }
    let fused = branches[1..].iter().try_fold(branches[0], |acc, b| acc.add(*b))?;
    Ok(RcaOut {
        fused,
        branches: branches.try_into().expect("four branches"),
        scales: scales.try_into().expect("four scales"),
    })
}

/// Pools each of `[fused, CHW, HWC, WCH, CWH]` and runs it through its own
/// bottleneck and classifier.
pub fn head_forward<'g>(
    fused: Var<'g>,
    branches: &[Var<'g>; 4],
    p: &Bound<'g>,
) -> Result<(Vec<Var<'g>>, Vec<Var<'g>>)> {
    let inputs = std::iter::once(fused).chain(branches.iter().copied());
    let mut bottlenecks = Vec::with_capacity(STREAMS.len());
    let mut logits = Vec::with_capacity(STREAMS.len());
    for (s, map) in STREAMS.iter().zip(inputs) {
        let b = map.global_avg_pool()?.linear(
            p.var(&format!("head.{s}.bottleneck.weight"))?,
            Some(p.var(&format!("head.{s}.bottleneck.bias"))?),
        )?;
        let l = b.linear(
            p.var(&format!("head.{s}.classifier.weight"))?,
            Some(p.var(&format!("head.{s}.classifier.bias"))?),
        )?;
        bottlenecks.push(b);
        logits.push(l);
    }
    Ok((bottlenecks, logits))
}

#[cfg(test)]
mod tests;

/// Worker count for embedding: `CEUSP_THREADS` if set, else the available
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var("CEUSP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}
