use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConditioningMode, ModelConfig};
use super::steps::{CondTensors, Conditioning, SourceStep, StepLayout, StepVars, SubLayer, TargetStep};
use crate::autodiff::{Tape, Var};
use crate::data::{downsample_boundary, Grid};
use crate::error::{Error, Result};
use crate::flow::multiscale::{gaussian_logp_on, split_forward};
use crate::flow::{squeeze, Direction, LatentPyramid};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// A batch of paired images, each `N×C×H×W`, with an optional full
/// resolution boundary map `N×1×H×W`.
#[derive(Clone, Debug)]
pub struct PairBatch<R> {
    pub source: Tensor<R>,
    pub target: Tensor<R>,
    pub boundary: Option<Tensor<R>>,
}

impl<R: Real> PairBatch<R> {
    pub fn len(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source activations of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache<R> {
    /// After actnorm.
    pub act: Tensor<R>,
    /// After the 1×1 convolution.
    pub mixed: Tensor<R>,
    /// After the coupling.
    pub out: Tensor<R>,
}

/// Everything the target stack needs from one source pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache<R> {
    pub steps: Vec<StepCache<R>>,
    /// Boundary map of each block, at that block's resolution.
    pub boundaries: Vec<Option<Tensor<R>>>,
}

impl<R: Real> ActivationCache<R> {
    pub fn batch_size(&self) -> usize {
        self.steps.first().map_or(0, |s| s.act.shape()[0])
    }

    fn cond(&self, layout: &StepLayout, index: usize) -> CondTensors<'_, R> {
        let s = &self.steps[index];
        CondTensors { act: &s.act, mixed: &s.mixed, out: &s.out, boundary: self.boundaries[layout.block].as_ref() }
    }
}

/// Result of a forward pass through either stack.
#[derive(Clone, Debug)]
pub struct FlowPass<R> {
    pub latents: LatentPyramid<R>,
    /// Per-sample log-density (base density plus log-determinants).
    pub logp: Vec<f64>,
    /// Per-sample sum of all log-determinants.
    pub logdet: Vec<f64>,
}

/// Tape values produced by one step together with its squeeze and split.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SegmentVars {
    pub next: Option<Var>,
    pub z: Option<Var>,
    /// Per-sample log-determinant plus any base-density term.
    pub logp: Var,
    pub step: StepVars,
}

/// Source and target stacks with their conditioning networks.
#[derive(Clone, Debug)]
pub struct FullGlow<R> {
    config: ModelConfig,
    pub store: ParamStore<R>,
    layouts: Vec<StepLayout>,
    source: Vec<SourceStep>,
    target: Vec<TargetStep>,
    initialized: bool,
}

impl<R: Real> FullGlow<R> {
    /// Builds a freshly initialized model. Random draws (1×1 rotations and
    /// hidden CN weights) come from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layouts = Vec::with_capacity(config.total_steps());
        let mut source = Vec::with_capacity(config.total_steps());
        let mut target = Vec::with_capacity(config.total_steps());
        let (norms, coupling) = match config.conditioning {
            ConditioningMode::Full => (true, true),
            ConditioningMode::CouplingOnly => (false, true),
            ConditioningMode::Unconditional => (false, false),
        };
        for block in 0..config.n_blocks {
            let (channels, height, width) = config.block_shape(block);
            for flow in 0..config.n_flows {
                let layout = StepLayout {
                    block,
                    flow,
                    channels,
                    height,
                    width,
                    opens_block: flow == 0,
                    closes_block: flow + 1 == config.n_flows,
                    last_block: block + 1 == config.n_blocks,
                };
                let tag = format!("b{block}.f{flow}");
                source.push(SourceStep::new(&mut store, &format!("source.{tag}"), &layout, config.hidden_channels, &mut rng)?);
                target.push(TargetStep::new(
                    &mut store,
                    &format!("target.{tag}"),
                    &layout,
                    config.hidden_channels,
                    norms,
                    coupling,
                    config.use_boundary,
                    &mut rng,
                )?);
                layouts.push(layout);
            }
        }
        Ok(Self { config, store, layouts, source, target, initialized: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layouts(&self) -> &[StepLayout] {
        &self.layouts
    }

    pub fn source_steps(&self) -> &[SourceStep] {
        &self.source
    }

    pub fn target_steps(&self) -> &[TargetStep] {
        &self.target
    }

    /// Whether data-dependent initialization has run (or was restored).
    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self, value: bool) {
        self.initialized = value;
    }

    /// Copies the model into another precision.
    pub fn cast<S: Real>(&self) -> FullGlow<S> {
        FullGlow {
            config: self.config.clone(),
            store: self.store.cast(),
            layouts: self.layouts.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            initialized: self.initialized,
        }
    }

    /// Latent chunk shapes for a batch of `n`.
    pub fn latent_shapes(&self, n: usize) -> Vec<Vec<usize>> {
        (0..self.config.n_blocks)
            .map(|b| {
                let (c, h, w) = self.config.block_shape(b);
                let kept = if b + 1 == self.config.n_blocks { c } else { c / 2 };
                vec![n, kept, h, w]
            })
            .collect()
    }

    fn check_image(&self, x: &Tensor<R>, what: &str) -> Result<usize> {
        let s = self.config.image_size;
        match *x.shape() {
            [n, c, h, w] if c == self.config.in_channels && h == s && w == s && n > 0 => Ok(n),
            _ => Err(Error::usage(format!(
                "{what} must be N×{}×{s}×{s}, got {:?}",
                self.config.in_channels,
                x.shape()
            ))),
        }
    }

    /// Whether target steps consume boundary maps.
    pub fn uses_boundary(&self) -> bool {
        self.config.use_boundary && self.config.conditioning != ConditioningMode::Unconditional
    }

    /// Per-block boundary maps from a full-resolution `N×1×H×W` map.
    pub fn boundary_pyramid(&self, boundary: Option<&Tensor<R>>) -> Result<Vec<Option<Tensor<R>>>> {
        if !self.uses_boundary() {
            return Ok(vec![None; self.config.n_blocks]);
        }
        let b = boundary.ok_or_else(|| Error::usage("this model conditions on boundary maps; none was given"))?;
        let s = self.config.image_size;
        let n = match *b.shape() {
            [n, 1, h, w] if h == s && w == s => n,
            _ => return Err(Error::usage(format!("boundary map must be N×1×{s}×{s}, got {:?}", b.shape()))),
        };
        let mut out = Vec::with_capacity(self.config.n_blocks);
        for block in 0..self.config.n_blocks {
            let factor = 1 << (block + 1);
            let mut data = Vec::new();
            for i in 0..n {
                let grid = Grid::new(s, s, b.sample(i).data().iter().map(|v| v.as_f64()).collect())?;
                let small = downsample_boundary(&grid, factor, self.config.boundary_mode)?;
                data.extend(small.data.iter().map(|&v| R::lit(v)));
            }
            out.push(Some(Tensor::new(vec![n, 1, s / factor, s / factor], data)?));
        }
        Ok(out)
    }

    fn enter(tape: &mut Tape<R>, layout: &StepLayout, h: Var) -> Result<Var> {
        if layout.opens_block {
            tape.squeeze(h)
        } else {
            Ok(h)
        }
    }

    /// Split (or final prior) after the last step of a block. Returns the
    /// next input, the factored latent and its log-density.
    fn exit(tape: &mut Tape<R>, layout: &StepLayout, y: Var) -> Result<(Option<Var>, Option<Var>, Option<Var>)> {
        if !layout.closes_block {
            Ok((Some(y), None, None))
        } else if layout.last_block {
            let lp = gaussian_logp_on(tape, y)?;
            Ok((None, Some(y), Some(lp)))
        } else {
            let (kept, z, lp) = split_forward(tape, y)?;
            Ok((Some(kept), Some(z), Some(lp)))
        }
    }

    fn finish_segment(tape: &mut Tape<R>, layout: &StepLayout, step: StepVars) -> Result<SegmentVars> {
        let (next, z, prior) = Self::exit(tape, layout, step.out)?;
        let logp = match prior {
            Some(p) => tape.add(step.logdet, p)?,
            None => step.logdet,
        };
        Ok(SegmentVars { next, z, logp, step })
    }

    pub(crate) fn source_segment(&self, tape: &mut Tape<R>, index: usize, h: Var) -> Result<SegmentVars> {
        let layout = &self.layouts[index];
        let x = Self::enter(tape, layout, h)?;
        let step = self.source[index].forward(tape, &self.store, x)?;
        Self::finish_segment(tape, layout, step)
    }

    pub(crate) fn target_segment(
        &self,
        tape: &mut Tape<R>,
        index: usize,
        h: Var,
        cond: Option<&Conditioning>,
    ) -> Result<SegmentVars> {
        let layout = &self.layouts[index];
        let x = Self::enter(tape, layout, h)?;
        let step = self.target[index].forward(tape, &self.store, x, cond)?;
        Self::finish_segment(tape, layout, step)
    }

    /// Runs the source stack, returning its latents, log-density and the
    /// activation cache for the target stack.
    pub fn source_forward(&self, x: &Tensor<R>, boundary: Option<&Tensor<R>>) -> Result<(FlowPass<R>, ActivationCache<R>)> {
        let n = self.check_image(x, "source image")?;
        let boundaries = self.boundary_pyramid(boundary)?;
        let mut steps = Vec::with_capacity(self.layouts.len());
        let mut acc = Accumulator::new(n);
        let mut h = x.clone();
        for (index, layout) in self.layouts.iter().enumerate() {
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let seg = self.source_segment(&mut tape, index, hv).map_err(|e| e.at(&format!("source {}", layout.label())))?;
            steps.push(StepCache {
                act: tape.value(seg.step.act).clone(),
                mixed: tape.value(seg.step.mixed).clone(),
                out: tape.value(seg.step.out).clone(),
            });
            acc.add(&tape, &seg);
            h = match seg.next {
                Some(v) => tape.value(v).clone(),
                None => Tensor::scalar(R::zero()),
            };
        }
        Ok((acc.finish(), ActivationCache { steps, boundaries }))
    }

    fn check_cache(&self, cache: &ActivationCache<R>, n: usize) -> Result<()> {
        if cache.steps.len() != self.layouts.len() || cache.boundaries.len() != self.config.n_blocks {
            return Err(Error::config(format!(
                "activation cache has {} steps, model has {}",
                cache.steps.len(),
                self.layouts.len()
            )));
        }
        if cache.batch_size() != n {
            return Err(Error::config(format!("activation cache is for {} samples, input has {n}", cache.batch_size())));
        }
        Ok(())
    }

    fn record_cond(tape: &mut Tape<R>, cond: CondTensors<'_, R>) -> Conditioning {
        Conditioning {
            act: tape.constant(cond.act.clone()),
            mixed: tape.constant(cond.mixed.clone()),
            out: tape.constant(cond.out.clone()),
            boundary: cond.boundary.map(|b| tape.constant(b.clone())),
        }
    }

    /// Conditional forward pass of the target stack.
    pub fn target_forward(&self, x: &Tensor<R>, cache: &ActivationCache<R>) -> Result<FlowPass<R>> {
        Ok(self.target_pass(x, cache, false)?.0)
    }

    /// Like [`target_forward`](Self::target_forward), also returning the
    /// target activations after every sub-layer.
    pub fn target_activations(&self, x: &Tensor<R>, cache: &ActivationCache<R>) -> Result<(FlowPass<R>, Vec<StepCache<R>>)> {
        self.target_pass(x, cache, true)
    }

    fn target_pass(&self, x: &Tensor<R>, cache: &ActivationCache<R>, collect: bool) -> Result<(FlowPass<R>, Vec<StepCache<R>>)> {
        let n = self.check_image(x, "target image")?;
        self.check_cache(cache, n)?;
        let mut steps = Vec::new();
        let mut acc = Accumulator::new(n);
        let mut h = x.clone();
        for (index, layout) in self.layouts.iter().enumerate() {
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let cond = self.target[index].is_conditional().then(|| Self::record_cond(&mut tape, cache.cond(layout, index)));
            let seg = self
                .target_segment(&mut tape, index, hv, cond.as_ref())
                .map_err(|e| e.at(&format!("target {}", layout.label())))?;
            acc.add(&tape, &seg);
            if collect {
                steps.push(StepCache {
                    act: tape.value(seg.step.act).clone(),
                    mixed: tape.value(seg.step.mixed).clone(),
                    out: tape.value(seg.step.out).clone(),
                });
            }
            h = match seg.next {
                Some(v) => tape.value(v).clone(),
                None => Tensor::scalar(R::zero()),
            };
        }
        Ok((acc.finish(), steps))
    }

    fn check_latents(&self, z: &LatentPyramid<R>) -> Result<usize> {
        let n = z.chunks.first().map_or(0, |c| c.shape()[0]);
        let expected = self.latent_shapes(n.max(1));
        if n == 0 || z.shapes() != expected {
            return Err(Error::usage(format!("latent pyramid shapes {:?} do not match the model ({expected:?})", z.shapes())));
        }
        Ok(n)
    }

    /// Walks the steps backwards, re-inserting factored latents.
    fn invert(
        &self,
        z: &LatentPyramid<R>,
        mut step_inverse: impl FnMut(usize, &StepLayout, &Tensor<R>) -> Result<Tensor<R>>,
    ) -> Result<Tensor<R>> {
        let mut h = z.chunks.last().expect("non-empty pyramid").clone();
        for (index, layout) in self.layouts.iter().enumerate().rev() {
            if layout.closes_block && !layout.last_block {
                h = Tensor::concat_channels(&[&h, &z.chunks[layout.block]])?;
            }
            h = step_inverse(index, layout, &h)?;
            if layout.opens_block {
                h = squeeze(&h, Direction::Inverse)?;
            }
        }
        Ok(h)
    }

    /// Exact inverse of [`target_forward`](Self::target_forward) for the
    /// same cache.
    pub fn target_inverse(&self, z: &LatentPyramid<R>, cache: &ActivationCache<R>) -> Result<Tensor<R>> {
        let n = self.check_latents(z)?;
        self.check_cache(cache, n)?;
        self.invert(z, |index, layout, h| {
            let cond = self.target[index].is_conditional().then(|| cache.cond(layout, index));
            let (x, _) = self.target[index]
                .inverse(&self.store, h, cond.as_ref())
                .map_err(|e| e.at(&format!("target inverse {}", layout.label())))?;
            x.check_finite(&format!("target inverse {}", layout.label()))?;
            Ok(x)
        })
    }

    /// Exact inverse of the source stack.
    pub fn source_inverse(&self, z: &LatentPyramid<R>) -> Result<Tensor<R>> {
        self.check_latents(z)?;
        self.invert(z, |index, layout, h| {
            let (x, _) = self.source[index]
                .inverse(&self.store, h)
                .map_err(|e| e.at(&format!("source inverse {}", layout.label())))?;
            x.check_finite(&format!("source inverse {}", layout.label()))?;
            Ok(x)
        })
    }

    /// Data-dependent initialization: every actnorm (plain or conditional)
    /// is set to standardize the activations of `batch` entering it.
    pub fn initialize(&mut self, batch: &PairBatch<R>) -> Result<()> {
        let n = self.check_image(&batch.source, "source image")?;
        if self.check_image(&batch.target, "target image")? != n {
            return Err(Error::usage("source and target batches differ in size"));
        }
        let boundaries = self.boundary_pyramid(batch.boundary.as_ref())?;
        let mut hs = batch.source.clone();
        let mut ht = batch.target.clone();
        for index in 0..self.layouts.len() {
            let layout = self.layouts[index];
            let at = |e: Error| e.at(&format!("initialization {}", layout.label()));
            let mut tape = Tape::new();
            let hs_v = tape.constant(hs);
            let xs = Self::enter(&mut tape, &layout, hs_v)?;
            self.source[index].init_actnorm(&mut self.store, tape.value(xs)).map_err(at)?;
            let src = self.source[index].forward(&mut tape, &self.store, xs).map_err(at)?;

            let ht_v = tape.constant(ht);
            let xt = Self::enter(&mut tape, &layout, ht_v)?;
            self.target[index].init_actnorm(&mut self.store, tape.value(xt)).map_err(at)?;
            let boundary = boundaries[layout.block].clone().map(|b| tape.constant(b));
            let cond = Conditioning { act: src.act, mixed: src.mixed, out: src.out, boundary };
            let tgt = self.target[index].forward(&mut tape, &self.store, xt, Some(&cond)).map_err(at)?;

            let (ns, _, _) = Self::exit(&mut tape, &layout, src.out)?;
            let (nt, _, _) = Self::exit(&mut tape, &layout, tgt.out)?;
            hs = ns.map_or_else(|| Tensor::scalar(R::zero()), |v| tape.value(v).clone());
            ht = nt.map_or_else(|| Tensor::scalar(R::zero()), |v| tape.value(v).clone());
        }
        self.initialized = true;
        Ok(())
    }

    /// Per-sample `(log p(x_a), log p(x_b | x_a))`.
    pub fn log_likelihoods(&self, batch: &PairBatch<R>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (src, cache) = self.source_forward(&batch.source, batch.boundary.as_ref())?;
        let tgt = self.target_forward(&batch.target, &cache)?;
        Ok((src.logp, tgt.logp))
    }

    /// Objective `(−λ Σ log p(x_a) − Σ log p(x_b|x_a)) / N` with the
    /// configured λ.
    pub fn loss(&self, batch: &PairBatch<R>) -> Result<f64> {
        self.loss_with_lambda(batch, self.config.lambda)
    }

    pub fn loss_with_lambda(&self, batch: &PairBatch<R>, lambda: f64) -> Result<f64> {
        let (ls, lt) = self.log_likelihoods(batch)?;
        let loss = objective(&ls, &lt, lambda);
        if !loss.is_finite() {
            return Err(Error::numerical(format!("loss is {loss}")));
        }
        Ok(loss)
    }

    /// Per-sample conditional bits per dimension of the targets.
    pub fn bpd(&self, batch: &PairBatch<R>) -> Result<Vec<f64>> {
        let (_, lt) = self.log_likelihoods(batch)?;
        Ok(lt.iter().map(|&lp| bits_per_dim(lp, self.config.image_dim())).collect())
    }

    /// Draws target images conditioned on `source`, with latents from
    /// `N(0, T²I)`.
    pub fn sample(
        &self,
        source: &Tensor<R>,
        boundary: Option<&Tensor<R>>,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor<R>> {
        let n = self.check_image(source, "source image")?;
        let z = LatentPyramid::sample(&self.latent_shapes(n), temperature, rng)?;
        let (_, cache) = self.source_forward(source, boundary)?;
        self.target_inverse(&z, &cache)
    }

    /// Encodes `content` against `content_source`, then decodes the latent
    /// against `new_source`.
    pub fn content_transfer(
        &self,
        content_source: (&Tensor<R>, Option<&Tensor<R>>),
        content: &Tensor<R>,
        new_source: (&Tensor<R>, Option<&Tensor<R>>),
    ) -> Result<Tensor<R>> {
        let shape = content.shape();
        if content_source.0.shape() != shape || new_source.0.shape() != shape {
            return Err(Error::usage(format!(
                "content transfer needs equal shapes, got {:?}, {:?} and {:?}",
                content_source.0.shape(),
                shape,
                new_source.0.shape()
            )));
        }
        let (_, cache1) = self.source_forward(content_source.0, content_source.1)?;
        let z = self.target_forward(content, &cache1)?.latents;
        let (_, cache2) = self.source_forward(new_source.0, new_source.1)?;
        self.target_inverse(&z, &cache2)
    }

    /// Applies a single target sub-layer at step `index` to `x` (the
    /// input of that sub-layer). Returns its output and per-sample
    /// log-determinant.
    pub fn target_sublayer(
        &self,
        index: usize,
        layer: SubLayer,
        x: &Tensor<R>,
        cache: &ActivationCache<R>,
    ) -> Result<(Tensor<R>, Vec<R>)> {
        let layout = &self.layouts[index];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cond = self.target[index].is_conditional().then(|| Self::record_cond(&mut tape, cache.cond(layout, index)));
        let (y, ld) = self.target[index].sublayer_forward(&mut tape, &self.store, layer, xv, cond.as_ref())?;
        Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
    }
}

/// `(−λ Σ ls − Σ lt) / N`.
pub fn objective(source_logp: &[f64], target_logp: &[f64], lambda: f64) -> f64 {
    let n = source_logp.len() as f64;
    (-lambda * source_logp.iter().sum::<f64>() - target_logp.iter().sum::<f64>()) / n
}

/// `−log p / (D ln 2)`.
pub fn bits_per_dim(logp: f64, dim: usize) -> f64 {
    -logp / (dim as f64 * std::f64::consts::LN_2)
}

struct Accumulator<R> {
    chunks: Vec<Tensor<R>>,
    logp: Vec<f64>,
    logdet: Vec<f64>,
}

impl<R: Real> Accumulator<R> {
    fn new(n: usize) -> Self {
        Self { chunks: Vec::new(), logp: vec![0.0; n], logdet: vec![0.0; n] }
    }

    fn add(&mut self, tape: &Tape<R>, seg: &SegmentVars) {
        for (acc, v) in self.logp.iter_mut().zip(tape.value(seg.logp).data()) {
            *acc += v.as_f64();
        }
        for (acc, v) in self.logdet.iter_mut().zip(tape.value(seg.step.logdet).data()) {
            *acc += v.as_f64();
        }
        if let Some(z) = seg.z {
            self.chunks.push(tape.value(z).clone());
        }
    }

    fn finish(self) -> FlowPass<R> {
        FlowPass { latents: LatentPyramid { chunks: self.chunks }, logp: self.logp, logdet: self.logdet }
    }
}
