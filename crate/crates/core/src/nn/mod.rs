//! Parameterized layers built on the tape, with deterministic
//! initialization, freeze flags and a binary checkpoint format.

mod checkpoint;
mod layers;

pub use checkpoint::{Checkpoint, CheckpointEntry, EntryKind};
pub use layers::{BatchNorm, Conv2d, ConvBnAct, DepthwiseBlock, GdConv, Linear, PRelu};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{grad_check_params_worst, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// How a parameter is (re)initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Uniform in `±sqrt(1 / fan_in)`.
    Weight {
        fan_in: usize,
    },
    Bias,
    Gamma,
    Beta,
    Slope,
}

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Frozen parameters still receive gradients but the optimizer skips them.
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Param {
            name: name.into(),
            value: Tensor::zeros(shape).tracked(),
            kind,
            frozen: false,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.bind(&self.name, &self.value)
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        match self.kind {
            ParamKind::Weight { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                for v in self.value.data_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
            ParamKind::Bias | ParamKind::Beta => self.value.data_mut().fill(0.0),
            ParamKind::Gamma => self.value.data_mut().fill(1.0),
            ParamKind::Slope => self.value.data_mut().fill(PRELU_INIT),
        }
    }
}

/// Non-trainable state carried by a layer (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer)) {}

    fn set_mode(&mut self, _mode: Mode) {}

    fn freeze(&mut self) {
        self.visit_params_mut(&mut |p| p.frozen = true);
    }

    fn unfreeze(&mut self) {
        self.visit_params_mut(&mut |p| p.frozen = false);
    }

    /// Re-initializes every parameter from `seed`, in visiting order.
    fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_params_mut(&mut |p| p.init(&mut rng));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }
}

/// Finite-difference check of every coordinate of every parameter of `m`.
///
/// `f` runs the module on a fresh tape and returns a scalar; it is called
/// once for the autodiff pass and twice per coordinate.
pub fn grad_check_module<M: Module>(
    m: &mut M,
    f: impl FnMut(&mut M, &mut Tape) -> Result<Var>,
    eps: f64,
) -> Result<f64> {
    Ok(grad_check_module_worst(m, f, eps)?.map_or(0.0, |w| w.rel_error))
}

/// Location and values of the worst coordinate of a module check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// [`grad_check_module`] reporting the worst coordinate; `None` for a
/// module without parameters.
pub fn grad_check_module_worst<M: Module>(
    m: &mut M,
    mut f: impl FnMut(&mut M, &mut Tape) -> Result<Var>,
    eps: f64,
) -> Result<Option<ParamWorst>> {
    let mut tape = Tape::new();
    let out = f(m, &mut tape)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut coords = Vec::new();
    let mut analytic = Vec::new();
    let mut names = Vec::new();
    m.visit_params(&mut |p| {
        let g = grads.param(&p.name).unwrap_or_else(|| vec![0.0; p.value.numel()]);
        for (j, gj) in g.into_iter().enumerate() {
            coords.push((names.len(), j));
            analytic.push(gj);
        }
        names.push(p.name.clone());
    });

    fn with_param<M: Module>(m: &mut M, target: usize, mut act: impl FnMut(&mut Param)) {
        let mut i = 0;
        m.visit_params_mut(&mut |p| {
            if i == target {
                act(p);
            }
            i += 1;
        });
    }

    let worst = grad_check_params_worst(
        m,
        &coords,
        &analytic,
        |m, p, j| {
            let mut i = 0;
            let mut out = 0.0;
            m.visit_params(&mut |q| {
                if i == p {
                    out = q.value.data()[j];
                }
                i += 1;
            });
            out
        },
        |m, p, j, v| with_param(m, p, |q| q.value.data_mut()[j] = v),
        |m| {
            let mut tape = Tape::new();
            let out = f(m, &mut tape)?;
            Ok(tape.data(out)[0])
        },
        eps,
    )?;
    Ok(worst.map(|w| {
        let (p, index) = coords[w.coord];
        ParamWorst {
            param: names[p].clone(),
            index,
            analytic: w.analytic,
            numeric: w.numeric,
            rel_error: w.rel_error,
        }
    }))
}
