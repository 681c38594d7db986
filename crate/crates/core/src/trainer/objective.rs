//! The combined training objective for one minibatch, with exact gradients
//! for both students.
//!
//! Pseudo-labels never carry gradient. Cross-branch targets are derived from
//! the same forward passes that produce the predictions unless a frozen set
//! is supplied, which makes the objective a smooth function of the
//! parameters for finite-difference checks.

use crate::error::{Error, Result};
use crate::losses::{cfc_loss_grad, ce_loss_grad, seg_loss_grad};
use crate::metrics::dice_score;
use crate::network::{ForwardOutput, Network, OutputGrad, ParamVector, Tape};
use crate::real::Real;
use crate::volume::{argmax_label, softmax_over_classes, LabelMap, ProbMap, Volume};
use crate::weights::ClassWeights;

use super::config::{McpcDirection, Toggles};

/// One image of the minibatch with everything that does not depend on the
/// student parameters.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub x: &'a Volume,
    /// Required when MCPC or CMD is on.
    pub x_masked: Option<Volume>,
    /// Present for labeled samples only.
    pub y: Option<&'a LabelMap>,
    /// Teacher pseudo-labels on the unmasked input; required when CMD is on.
    pub teacher_a: Option<LabelMap>,
    pub teacher_b: Option<LabelMap>,
}

/// Cross-branch pseudo-labels: `for_a` supervises branch A, `for_b` branch B.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTargets {
    pub for_a: LabelMap,
    pub for_b: LabelMap,
}

/// Multipliers applied to each term's gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub sup: f64,
    pub cps: f64,
    pub con: f64,
    pub dis: f64,
}

impl Coefficients {
    /// `sup + β·(cps + con + dis)`.
    pub fn total(beta: f64) -> Self {
        Coefficients {
            sup: 1.0,
            cps: beta,
            con: beta,
            dis: beta,
        }
    }

    pub fn only(term: Term) -> Self {
        let mut c = Coefficients {
            sup: 0.0,
            cps: 0.0,
            con: 0.0,
            dis: 0.0,
        };
        match term {
            Term::Sup => c.sup = 1.0,
            Term::Cps => c.cps = 1.0,
            Term::Con => c.con = 1.0,
            Term::Dis => c.dis = 1.0,
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Sup,
    Cps,
    Con,
    Dis,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec<'a> {
    pub toggles: Toggles,
    pub direction: McpcDirection,
    pub weights: &'a ClassWeights,
    pub coef: Coefficients,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub sup: f64,
    pub cps: f64,
    pub con: f64,
    pub dis: f64,
    /// `Σ coef · term`.
    pub value: f64,
    pub grad_a: ParamVector<T>,
    pub grad_b: ParamVector<T>,
    /// Targets used per sample (`None` when MCPC is off).
    pub cross_targets: Vec<Option<CrossTargets>>,
    /// Per-class hard Dice of the unmasked student predictions on labeled
    /// samples, averaged over both branches and samples.
    pub student_dice: Option<Vec<f64>>,
}

/// One taped forward pass plus the probability-space gradient collected for it.
struct Pass<T> {
    out: ForwardOutput<T>,
    tape: Tape<T>,
    probs: ProbMap<T>,
    grad_p: Option<Vec<T>>,
    grad: OutputGrad<T>,
}

impl<T: Real> Pass<T> {
    fn run(net: &Network, params: &ParamVector<T>, x: &Volume) -> Result<Self> {
        let (out, tape) = net.forward_taped(params, x)?;
        let probs = softmax_over_classes(&out.logits)?;
        Ok(Pass {
            out,
            tape,
            probs,
            grad_p: None,
            grad: OutputGrad::default(),
        })
    }

    fn add_prob_grad(&mut self, g: Vec<T>, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let c = T::from_f64(coef);
        match &mut self.grad_p {
            None => self.grad_p = Some(g.into_iter().map(|v| v * c).collect()),
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v * c),
        }
    }

    fn add_feature_grads(&mut self, gs: Vec<Vec<T>>, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let c = T::from_f64(coef);
        let mut extra = OutputGrad::default();
        for (slot, g) in extra.features.iter_mut().zip(gs) {
            *slot = Some(g.into_iter().map(|v| v * c).collect());
        }
        self.grad.merge(extra);
    }

    fn backward(mut self, net: &Network, params: &ParamVector<T>, acc: &mut ParamVector<T>) -> Result<()> {
        if let Some(gp) = self.grad_p.take() {
            let gl = crate::losses::softmax_backward(&self.probs, &gp);
            self.grad.merge(OutputGrad {
                logits: Some(gl),
                ..OutputGrad::default()
            });
        }
        if self.grad.is_empty() {
            return Ok(());
        }
        net.backward(params, &self.tape, &self.grad, acc)
    }
}

fn require<'s, X>(v: &'s Option<X>, what: &str, i: usize) -> Result<&'s X> {
    v.as_ref()
        .ok_or_else(|| Error::invalid(format!("sample {i}: {what} is required by the enabled terms")))
}

/// Evaluate the objective over `samples` and its gradient for both students.
pub fn objective<T: Real>(
    net: &Network,
    params_a: &ParamVector<T>,
    params_b: &ParamVector<T>,
    samples: &[Sample<'_>],
    spec: &ObjectiveSpec<'_>,
    frozen: Option<&[Option<CrossTargets>]>,
) -> Result<ObjectiveOutput<T>> {
    if samples.is_empty() {
        return Err(Error::invalid("objective needs at least one sample"));
    }
    if let Some(f) = frozen {
        if f.len() != samples.len() {
            return Err(Error::invalid("frozen targets must match the sample count"));
        }
    }
    let t = spec.toggles;
    let w = spec.weights;
    let c = net.config().num_classes;
    if w.w_diff.len() != c || w.w_dist.len() != c {
        return Err(Error::shape(format!("class weights for {} classes, network has {c}", w.w_diff.len())));
    }
    let n_labeled = samples.iter().filter(|s| s.y.is_some()).count();
    let batch = 1.0 / samples.len() as f64;

    let mut grad_a = params_a.zeros_like();
    let mut grad_b = params_b.zeros_like();
    let (mut sup, mut cps, mut con, mut dis) = (0.0, 0.0, 0.0, 0.0);
    let mut cross_targets = Vec::with_capacity(samples.len());
    let mut dice_sum = vec![0.0; c];

    for (i, s) in samples.iter().enumerate() {
        let labeled = s.y.is_some();
        if !labeled && !t.any() {
            cross_targets.push(None);
            continue;
        }
        let mut ua = Pass::run(net, params_a, s.x)?;
        let mut ub = Pass::run(net, params_b, s.x)?;
        let (mut ma, mut mb) = if t.mcpc || t.cmd {
            let xm = require(&s.x_masked, "masked input", i)?;
            (Some(Pass::run(net, params_a, xm)?), Some(Pass::run(net, params_b, xm)?))
        } else {
            (None, None)
        };

        if let Some(y) = s.y {
            let scale = 1.0 / n_labeled as f64;
            let (la, ga) = seg_loss_grad(&ua.probs, y, &w.w_diff, scale)?;
            let (lb, gb) = seg_loss_grad(&ub.probs, y, &w.w_dist, scale)?;
            sup += la + lb;
            ua.add_prob_grad(ga, spec.coef.sup);
            ub.add_prob_grad(gb, spec.coef.sup);
            for pred in [&ua.probs, &ub.probs] {
                let hard = argmax_label(pred);
                for (k, d) in dice_sum.iter_mut().enumerate() {
                    *d += dice_score(&hard, y, k)?;
                }
            }
        }

        if t.mcpc {
            let (ma, mb) = (ma.as_mut().expect("masked pass"), mb.as_mut().expect("masked pass"));
            let targets = match frozen.and_then(|f| f[i].clone()) {
                Some(ct) => ct,
                None => match spec.direction {
                    McpcDirection::MaskedTeaches => CrossTargets {
                        for_a: argmax_label(&mb.probs),
                        for_b: argmax_label(&ma.probs),
                    },
                    McpcDirection::UnmaskedTeaches => CrossTargets {
                        for_a: argmax_label(&ub.probs),
                        for_b: argmax_label(&ua.probs),
                    },
                },
            };
            let (pa, pb) = match spec.direction {
                McpcDirection::MaskedTeaches => (&mut ua, &mut ub),
                McpcDirection::UnmaskedTeaches => (ma, mb),
            };
            let (la, ga) = ce_loss_grad(&pa.probs, &targets.for_a, &w.w_diff, batch)?;
            let (lb, gb) = ce_loss_grad(&pb.probs, &targets.for_b, &w.w_dist, batch)?;
            cps += la + lb;
            pa.add_prob_grad(ga, spec.coef.cps);
            pb.add_prob_grad(gb, spec.coef.cps);
            cross_targets.push(Some(targets));
        } else {
            cross_targets.push(None);
        }

        if t.cfc {
            let (l, ga, gb) = cfc_loss_grad(&ua.out.decoder_features, &ub.out.decoder_features, batch)?;
            con += l;
            ua.add_feature_grads(ga, spec.coef.con);
            ub.add_feature_grads(gb, spec.coef.con);
        }

        if t.cmd {
            let ya = require(&s.teacher_a, "teacher A pseudo-label", i)?;
            let yb = require(&s.teacher_b, "teacher B pseudo-label", i)?;
            let ones = vec![1.0; c];
            let (ma, mb) = (ma.as_mut().expect("masked pass"), mb.as_mut().expect("masked pass"));
            let (la, ga) = ce_loss_grad(&ma.probs, ya, &ones, batch)?;
            let (lb, gb) = ce_loss_grad(&mb.probs, yb, &ones, batch)?;
            dis += la + lb;
            ma.add_prob_grad(ga, spec.coef.dis);
            mb.add_prob_grad(gb, spec.coef.dis);
        }

        ua.backward(net, params_a, &mut grad_a)?;
        ub.backward(net, params_b, &mut grad_b)?;
        if let Some(p) = ma {
            p.backward(net, params_a, &mut grad_a)?;
        }
        if let Some(p) = mb {
            p.backward(net, params_b, &mut grad_b)?;
        }
    }

    let co = spec.coef;
    let value = co.sup * sup + co.cps * cps + co.con * con + co.dis * dis;
    let student_dice = (n_labeled > 0).then(|| {
        let n = (2 * n_labeled) as f64;
        dice_sum.iter().map(|d| d / n).collect()
    });
    Ok(ObjectiveOutput {
        sup,
        cps,
        con,
        dis,
        value,
        grad_a,
        grad_b,
        cross_targets,
        student_dice,
    })
}
