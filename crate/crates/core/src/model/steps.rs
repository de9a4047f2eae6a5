//! One flow step of each stack: actnorm → 1×1 convolution → coupling.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cond::{ActnormCn, CouplingNet, FrozenLu, InvConvCn};
use crate::error::{Error, Result};
use crate::flow::actnorm::{actnorm_data_init, actnorm_forward, actnorm_inverse};
use crate::flow::coupling::{coupling_forward, coupling_inverse, half_channels, split_halves, CouplingParams};
use crate::flow::invconv::{invconv_forward, invconv_inverse, random_rotation, InvConvParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Position and tensor shape of one flow step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepLayout {
    pub block: usize,
    pub flow: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// The step is preceded by its block's squeeze.
    pub opens_block: bool,
    /// The step is followed by its block's split (or the final prior).
    pub closes_block: bool,
    pub last_block: bool,
}

impl StepLayout {
    pub fn label(&self) -> String {
        format!("block {} step {}", self.block, self.flow)
    }
}

/// Sub-layers of a flow step, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubLayer {
    Actnorm,
    InvConv,
    Coupling,
}

impl SubLayer {
    pub const ALL: [SubLayer; 3] = [SubLayer::Actnorm, SubLayer::InvConv, SubLayer::Coupling];

    pub fn as_str(self) -> &'static str {
        match self {
            SubLayer::Actnorm => "actnorm",
            SubLayer::InvConv => "invconv",
            SubLayer::Coupling => "coupling",
        }
    }
}

/// Values recorded by one step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub act: Var,
    pub mixed: Var,
    pub out: Var,
    /// Per-sample log-determinants of the three sub-layers.
    pub logdets: [Var; 3],
    pub logdet: Var,
}

/// Source activations (and boundary map) that condition a target step,
/// recorded on the same tape as the target step.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub act: Var,
    pub mixed: Var,
    pub out: Var,
    pub boundary: Option<Var>,
}

/// Shared (per-model) actnorm parameters.
#[derive(Clone, Debug)]
pub struct PlainActnorm {
    pub log_scale: ParamId,
    pub shift: ParamId,
}

impl PlainActnorm {
    fn new<R: Real>(store: &mut ParamStore<R>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            log_scale: store.add(format!("{prefix}.log_scale"), Tensor::zeros(&[channels]), true)?,
            shift: store.add(format!("{prefix}.shift"), Tensor::zeros(&[channels]), true)?,
        })
    }

    fn params<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, n: usize) -> Result<(Var, Var)> {
        let ls = tape.param(store, self.log_scale);
        let t = tape.param(store, self.shift);
        Ok((tape.expand(ls, n)?, tape.expand(t, n)?))
    }

    fn init<R: Real>(&self, store: &mut ParamStore<R>, batch: &Tensor<R>) -> Result<()> {
        let p = actnorm_data_init(batch)?;
        store.set(self.log_scale, p.log_scale)?;
        store.set(self.shift, p.shift)
    }
}

/// Shared 1×1 convolution in LU form with frozen permutation and signs.
#[derive(Clone, Debug)]
pub struct PlainInvConv {
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_s: ParamId,
    pub frozen: FrozenLu,
}

impl PlainInvConv {
    fn new<R: Real>(store: &mut ParamStore<R>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let lu = InvConvParams::<R>::from_matrix(channels, &random_rotation(channels, rng))?;
        Ok(Self {
            lower: store.add(format!("{prefix}.lower"), lu.lower, true)?,
            upper: store.add(format!("{prefix}.upper"), lu.upper, true)?,
            log_s: store.add(format!("{prefix}.log_s"), lu.log_s, true)?,
            frozen: FrozenLu::register(store, prefix, &lu.perm, &lu.sign)?,
        })
    }

    fn params<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, n: usize) -> Result<(Var, Var, Var)> {
        let lo = tape.param(store, self.lower);
        let up = tape.param(store, self.upper);
        let ls = tape.param(store, self.log_s);
        Ok((tape.expand(lo, n)?, tape.expand(up, n)?, tape.expand(ls, n)?))
    }
}

fn apply_step<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    actnorm: (Var, Var),
    invconv: (Var, Var, Var),
    frozen: (&[usize], &[f64]),
    coupling: impl FnOnce(&mut Tape<R>, Var) -> Result<(Var, Var)>,
) -> Result<StepVars> {
    let (act, ld_act) = actnorm_forward(tape, x, actnorm.0, actnorm.1)?;
    let (mixed, ld_mix) = invconv_forward(tape, act, invconv.0, invconv.1, invconv.2, frozen.0, frozen.1)?;
    let (x1, x2) = split_halves(tape, mixed)?;
    let (o1, o2) = coupling(tape, x2)?;
    let (out, ld_cpl) = coupling_forward(tape, x1, x2, o1, o2)?;
    let partial = tape.add(ld_act, ld_mix)?;
    let logdet = tape.add(partial, ld_cpl)?;
    Ok(StepVars { act, mixed, out, logdets: [ld_act, ld_mix, ld_cpl], logdet })
}

/// Exact inverse given per-sample parameter values; returns the input and
/// the per-sample log-determinant of the forward map.
#[allow(clippy::too_many_arguments)]
fn invert_step<R: Real>(
    y: &Tensor<R>,
    actnorm: (&Tensor<R>, &Tensor<R>),
    invconv: (&Tensor<R>, &Tensor<R>, &Tensor<R>),
    frozen: (&[usize], &[f64]),
    coupling: impl FnOnce(&Tensor<R>) -> Result<CouplingParams<R>>,
) -> Result<(Tensor<R>, Vec<R>)> {
    let c = y.dims4()?.1;
    let half = half_channels(c)?;
    let fields = coupling(&y.slice_channels(half, half)?)?;
    let (mixed, ld_cpl) = coupling_inverse(y, &fields)?;
    let (act, ld_mix) = invconv_inverse(&mixed, invconv.0, invconv.1, invconv.2, frozen.0, frozen.1)?;
    let (x, ld_act) = actnorm_inverse(&act, actnorm.0, actnorm.1)?;
    let logdet = ld_cpl.iter().zip(&ld_mix).zip(&ld_act).map(|((a, b), c)| -(*a + *b + *c)).collect();
    Ok((x, logdet))
}

/// Unconditional step of the source stack.
#[derive(Clone, Debug)]
pub struct SourceStep {
    pub actnorm: PlainActnorm,
    pub invconv: PlainInvConv,
    pub coupling: CouplingNet,
}

impl SourceStep {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        layout: &StepLayout,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = layout.channels;
        Ok(Self {
            actnorm: PlainActnorm::new(store, &format!("{prefix}.actnorm"), c)?,
            invconv: PlainInvConv::new(store, &format!("{prefix}.invconv"), c, rng)?,
            coupling: CouplingNet::new(store, &format!("{prefix}.coupling"), c / 2, hidden, c, rng)?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<StepVars> {
        let n = tape.shape(x)[0];
        let an = self.actnorm.params(tape, store, n)?;
        let ic = self.invconv.params(tape, store, n)?;
        let perm = self.invconv.frozen.perm(store);
        let sign = self.invconv.frozen.sign(store);
        apply_step(tape, x, an, ic, (&perm, &sign), |tape, x2| self.coupling.forward(tape, store, x2))
    }

    pub fn inverse<R: Real>(&self, store: &ParamStore<R>, y: &Tensor<R>) -> Result<(Tensor<R>, Vec<R>)> {
        let n = y.dims4()?.0;
        let mut tape = Tape::new();
        let (ls, t) = self.actnorm.params(&mut tape, store, n)?;
        let (lo, up, lsd) = self.invconv.params(&mut tape, store, n)?;
        let perm = self.invconv.frozen.perm(store);
        let sign = self.invconv.frozen.sign(store);
        invert_step(
            y,
            (tape.value(ls), tape.value(t)),
            (tape.value(lo), tape.value(up), tape.value(lsd)),
            (&perm, &sign),
            |y2| coupling_fields(&self.coupling, store, y2, |_, x2| Ok(x2)),
        )
    }

    pub fn init_actnorm<R: Real>(&self, store: &mut ParamStore<R>, batch: &Tensor<R>) -> Result<()> {
        self.actnorm.init(store, batch)
    }
}

/// Evaluates a coupling network on a fresh tape and returns its fields.
fn coupling_fields<R: Real>(
    net: &CouplingNet,
    store: &ParamStore<R>,
    x2: &Tensor<R>,
    build_input: impl FnOnce(&mut Tape<R>, Var) -> Result<Var>,
) -> Result<CouplingParams<R>> {
    let mut tape = Tape::new();
    let x2 = tape.constant(x2.clone());
    let input = build_input(&mut tape, x2)?;
    let (o1, o2) = net.forward(&mut tape, store, input)?;
    Ok(CouplingParams { o1: tape.value(o1).clone(), o2: tape.value(o2).clone() })
}

#[derive(Clone, Debug)]
pub enum TargetActnorm {
    Plain(PlainActnorm),
    Conditional(ActnormCn),
}

#[derive(Clone, Debug)]
pub enum TargetInvConv {
    Plain(PlainInvConv),
    Conditional(InvConvCn),
}

/// Step of the target stack; which sub-layers read the source depends on
/// the conditioning mode it was built with.
#[derive(Clone, Debug)]
pub struct TargetStep {
    pub actnorm: TargetActnorm,
    pub invconv: TargetInvConv,
    pub coupling: CouplingNet,
    conditional_coupling: bool,
    use_boundary: bool,
}

/// Tensor-valued conditioning for the inverse direction.
#[derive(Clone, Copy, Debug)]
pub struct CondTensors<'a, R> {
    pub act: &'a Tensor<R>,
    pub mixed: &'a Tensor<R>,
    pub out: &'a Tensor<R>,
    pub boundary: Option<&'a Tensor<R>>,
}

impl TargetStep {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        layout: &StepLayout,
        hidden: usize,
        conditional_norms: bool,
        conditional_coupling: bool,
        use_boundary: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = layout.channels;
        let spatial = (layout.height, layout.width);
        let extra = usize::from(use_boundary && conditional_coupling);
        let actnorm = if conditional_norms {
            TargetActnorm::Conditional(ActnormCn::new(store, &format!("{prefix}.actnorm_cn"), c + extra, spatial, c, rng)?)
        } else {
            TargetActnorm::Plain(PlainActnorm::new(store, &format!("{prefix}.actnorm"), c)?)
        };
        let invconv = if conditional_norms {
            TargetInvConv::Conditional(InvConvCn::new(store, &format!("{prefix}.invconv_cn"), c + extra, spatial, c, rng)?)
        } else {
            TargetInvConv::Plain(PlainInvConv::new(store, &format!("{prefix}.invconv"), c, rng)?)
        };
        let coupling_in = if conditional_coupling { c / 2 + c + extra } else { c / 2 };
        let coupling = CouplingNet::new(store, &format!("{prefix}.coupling_cn"), coupling_in, hidden, c, rng)?;
        Ok(Self { actnorm, invconv, coupling, conditional_coupling, use_boundary: use_boundary && conditional_coupling })
    }

    /// Whether any sub-layer reads the source activations.
    pub fn is_conditional(&self) -> bool {
        self.conditional_coupling
    }

    fn with_boundary<R: Real>(&self, tape: &mut Tape<R>, v: Var, boundary: Option<Var>) -> Result<Var> {
        if !self.use_boundary {
            return Ok(v);
        }
        let b = boundary.ok_or_else(|| Error::config("boundary conditioning is enabled but no boundary map was given"))?;
        tape.concat_channels(&[v, b])
    }

    fn require<'c, T>(&self, cond: Option<&'c T>) -> Result<&'c T> {
        cond.ok_or_else(|| Error::config("target step needs source activations but none were provided"))
    }

    fn actnorm_params<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        n: usize,
        cond: Option<&Conditioning>,
    ) -> Result<(Var, Var)> {
        match &self.actnorm {
            TargetActnorm::Plain(p) => p.params(tape, store, n),
            TargetActnorm::Conditional(cn) => {
                let cond = self.require(cond)?;
                let input = self.with_boundary(tape, cond.act, cond.boundary)?;
                cn.params(tape, store, input)
            }
        }
    }

    fn invconv_params<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        n: usize,
        cond: Option<&Conditioning>,
    ) -> Result<(Var, Var, Var, FrozenLu)> {
        match &self.invconv {
            TargetInvConv::Plain(p) => {
                let (lo, up, ls) = p.params(tape, store, n)?;
                Ok((lo, up, ls, p.frozen))
            }
            TargetInvConv::Conditional(cn) => {
                let cond = self.require(cond)?;
                let input = self.with_boundary(tape, cond.mixed, cond.boundary)?;
                let (lo, up, ls) = cn.params(tape, store, input)?;
                Ok((lo, up, ls, cn.frozen))
            }
        }
    }

    fn coupling_input<R: Real>(&self, tape: &mut Tape<R>, x2: Var, cond: Option<&Conditioning>) -> Result<Var> {
        if !self.conditional_coupling {
            return Ok(x2);
        }
        let cond = self.require(cond)?;
        let joined = tape.concat_channels(&[x2, cond.out])?;
        self.with_boundary(tape, joined, cond.boundary)
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
        cond: Option<&Conditioning>,
    ) -> Result<StepVars> {
        let n = tape.shape(x)[0];
        let an = self.actnorm_params(tape, store, n, cond)?;
        let (lo, up, ls, frozen) = self.invconv_params(tape, store, n, cond)?;
        let perm = frozen.perm(store);
        let sign = frozen.sign(store);
        apply_step(tape, x, an, (lo, up, ls), (&perm, &sign), |tape, x2| {
            let input = self.coupling_input(tape, x2, cond)?;
            self.coupling.forward(tape, store, input)
        })
    }

    /// Forward pass of a single sub-layer; returns its output and
    /// per-sample log-determinant.
    pub fn sublayer_forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        layer: SubLayer,
        x: Var,
        cond: Option<&Conditioning>,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(x)[0];
        match layer {
            SubLayer::Actnorm => {
                let (ls, t) = self.actnorm_params(tape, store, n, cond)?;
                actnorm_forward(tape, x, ls, t)
            }
            SubLayer::InvConv => {
                let (lo, up, ls, frozen) = self.invconv_params(tape, store, n, cond)?;
                invconv_forward(tape, x, lo, up, ls, &frozen.perm(store), &frozen.sign(store))
            }
            SubLayer::Coupling => {
                let (x1, x2) = split_halves(tape, x)?;
                let input = self.coupling_input(tape, x2, cond)?;
                let (o1, o2) = self.coupling.forward(tape, store, input)?;
                coupling_forward(tape, x1, x2, o1, o2)
            }
        }
    }

    /// Records `cond` as constants on `tape`.
    fn record<R: Real>(tape: &mut Tape<R>, cond: Option<&CondTensors<R>>) -> Option<Conditioning> {
        cond.map(|c| Conditioning {
            act: tape.constant(c.act.clone()),
            mixed: tape.constant(c.mixed.clone()),
            out: tape.constant(c.out.clone()),
            boundary: c.boundary.map(|b| tape.constant(b.clone())),
        })
    }

    pub fn inverse<R: Real>(
        &self,
        store: &ParamStore<R>,
        y: &Tensor<R>,
        cond: Option<&CondTensors<R>>,
    ) -> Result<(Tensor<R>, Vec<R>)> {
        let n = y.dims4()?.0;
        let mut tape = Tape::new();
        let recorded = Self::record(&mut tape, cond);
        let (ls, t) = self.actnorm_params(&mut tape, store, n, recorded.as_ref())?;
        let (lo, up, lsd, frozen) = self.invconv_params(&mut tape, store, n, recorded.as_ref())?;
        let perm = frozen.perm(store);
        let sign = frozen.sign(store);
        invert_step(
            y,
            (tape.value(ls), tape.value(t)),
            (tape.value(lo), tape.value(up), tape.value(lsd)),
            (&perm, &sign),
            |y2| {
                coupling_fields(&self.coupling, store, y2, |tape, x2| {
                    let recorded = Self::record(tape, cond);
                    self.coupling_input(tape, x2, recorded.as_ref())
                })
            },
        )
    }

    /// Data-dependent actnorm initialization from the activations entering
    /// this step.
    pub fn init_actnorm<R: Real>(&self, store: &mut ParamStore<R>, batch: &Tensor<R>) -> Result<()> {
        match &self.actnorm {
            TargetActnorm::Plain(p) => p.init(store, batch),
            TargetActnorm::Conditional(cn) => cn.init_from_batch(store, batch),
        }
    }
}
