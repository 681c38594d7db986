//! Training objectives.
//!
//! Every loss comes in two forms: a plain value function over a batch, and a
//! per-sample `*_grad` form returning `scale · loss` together with its
//! gradient with respect to the network outputs (probabilities or decoder
//! features). Pseudo-labels are plain [`LabelMap`]s, so they never carry
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{log_softmax_planar, FeatureMap, LabelMap, ProbMap};
use crate::weights::ClassWeights;

/// Probabilities are clipped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1e-5;

/// Per-stage weights of the feature consistency loss, `λ_k = 0.2·k`.
pub const CFC_LAMBDA: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

fn check_pair<T: Real>(p: &ProbMap<T>, y: &LabelMap) -> Result<()> {
    if p.dims() != y.dims() {
        return Err(Error::shape(format!(
            "prediction dims {:?} vs label dims {:?}",
            p.dims(),
            y.dims()
        )));
    }
    if y.num_classes() > p.num_classes() {
        return Err(Error::shape(format!(
            "labels have {} classes, prediction {}",
            y.num_classes(),
            p.num_classes()
        )));
    }
    Ok(())
}

fn check_weights(w: &[f64], c: usize) -> Result<()> {
    if w.len() != c {
        return Err(Error::shape(format!("{} class weights for {c} classes", w.len())));
    }
    Ok(())
}

/// `scale · mean_v(−w_{y(v)} · log p_{y(v)}(v))` and its gradient w.r.t. `p`.
pub fn ce_loss_grad<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &[f64], scale: f64) -> Result<(f64, Vec<T>)> {
    check_pair(p, y)?;
    check_weights(w, p.num_classes())?;
    let n = p.dims().voxels();
    let mut grad = vec![T::zero(); p.data().len()];
    let mut sum = 0.0f64;
    let k = scale / n as f64;
    for v in 0..n {
        let c = y.label(v);
        let pv = p.prob(c, v).as_f64();
        let wc = w[c];
        if pv > PROB_FLOOR {
            sum -= wc * pv.ln();
            grad[c * n + v] = T::from_f64(-k * wc / pv);
        } else {
            sum -= wc * PROB_FLOOR.ln();
        }
    }
    Ok((k * sum, grad))
}

/// Weighted voxel-wise cross-entropy.
pub fn ce_loss<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &[f64]) -> Result<f64> {
    Ok(ce_loss_grad(p, y, w, 1.0)?.0)
}

/// `scale · (1/C) Σ_c w_c (1 − dice_c)` with soft Dice per class, and its gradient.
pub fn dice_loss_grad<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &[f64], scale: f64) -> Result<(f64, Vec<T>)> {
    check_pair(p, y)?;
    let c = p.num_classes();
    check_weights(w, c)?;
    let n = p.dims().voxels();
    let mut grad = vec![T::zero(); p.data().len()];
    let mut loss = 0.0f64;
    let cf = c as f64;
    for k in 0..c {
        let plane = p.class_plane(k);
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut gsum = 0.0f64;
        for (v, &pv) in plane.iter().enumerate() {
            let pv = pv.as_f64();
            psum += pv;
            if y.label(v) == k {
                inter += pv;
                gsum += 1.0;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + gsum + DICE_EPS;
        let dice = num / den;
        loss += w[k] * (1.0 - dice);
        let coef = -scale * w[k] / cf;
        let g_in = coef * (2.0 * den - num) / (den * den);
        let g_out = coef * (-num) / (den * den);
        for (v, g) in grad[k * n..(k + 1) * n].iter_mut().enumerate() {
            *g = T::from_f64(if y.label(v) == k { g_in } else { g_out });
        }
    }
    Ok((scale * loss / cf, grad))
}

/// Soft Dice loss, unweighted, averaged over all classes.
pub fn dice_loss<T: Real>(p: &ProbMap<T>, y: &LabelMap) -> Result<f64> {
    let w = vec![1.0; p.num_classes()];
    Ok(dice_loss_grad(p, y, &w, 1.0)?.0)
}

/// `scale · ½(CE_w + Dice_w)` for one prediction.
pub fn seg_loss_grad<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &[f64], scale: f64) -> Result<(f64, Vec<T>)> {
    let (ce, mut g) = ce_loss_grad(p, y, w, 0.5 * scale)?;
    let (dice, gd) = dice_loss_grad(p, y, w, 0.5 * scale)?;
    g.iter_mut().zip(&gd).for_each(|(a, &b)| *a += b);
    Ok((ce + dice, g))
}

/// Gradient of a loss w.r.t. the logits given its gradient w.r.t. softmax probabilities.
pub fn softmax_backward<T: Real>(p: &ProbMap<T>, grad_p: &[T]) -> Vec<T> {
    let n = p.dims().voxels();
    let c = p.num_classes();
    let data = p.data();
    let mut out = vec![T::zero(); data.len()];
    for v in 0..n {
        let mut dot = 0.0f64;
        for k in 0..c {
            dot += (grad_p[k * n + v] * data[k * n + v]).as_f64();
        }
        let dot = T::from_f64(dot);
        for k in 0..c {
            out[k * n + v] = data[k * n + v] * (grad_p[k * n + v] - dot);
        }
    }
    out
}

/// One labeled sample seen by both branches.
pub struct SupSample<'a, T> {
    pub pa: &'a ProbMap<T>,
    pub pb: &'a ProbMap<T>,
    pub y: &'a LabelMap,
}

/// Mean over labeled samples of `L_s(pA, y)` weighted by `w_diff` plus
/// `L_s(pB, y)` weighted by `w_dist`, with `L_s = ½(CE + Dice)`.
pub fn sup_loss<T: Real>(samples: &[SupSample<'_, T>], cw: &ClassWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("supervised loss needs at least one labeled sample"));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        total += seg_loss_grad(s.pa, s.y, &cw.w_diff, scale)?.0;
        total += seg_loss_grad(s.pb, s.y, &cw.w_dist, scale)?.0;
    }
    Ok(total)
}

/// Two predictions, each paired with a pseudo-label and a class-weight vector.
pub struct PairedTargets<'a, T> {
    pub pa: &'a ProbMap<T>,
    pub target_a: &'a LabelMap,
    pub pb: &'a ProbMap<T>,
    pub target_b: &'a LabelMap,
}

/// Per-sample `scale · (CE_wa(pa, ta) + CE_wb(pb, tb))` with gradients for both branches.
pub fn paired_ce_grad<T: Real>(
    s: &PairedTargets<'_, T>,
    wa: &[f64],
    wb: &[f64],
    scale: f64,
) -> Result<(f64, Vec<T>, Vec<T>)> {
    let (la, ga) = ce_loss_grad(s.pa, s.target_a, wa, scale)?;
    let (lb, gb) = ce_loss_grad(s.pb, s.target_b, wb, scale)?;
    Ok((la + lb, ga, gb))
}

/// Masked cross pseudo consistency over a batch.
///
/// Each sample pairs branch A's prediction with branch B's masked-input
/// pseudo-label (weighted by `w_diff`) and branch B's prediction with
/// branch A's masked-input pseudo-label (weighted by `w_dist`).
pub fn cps_loss<T: Real>(samples: &[PairedTargets<'_, T>], cw: &ClassWeights) -> Result<f64> {
    batch_mean(samples, |s, scale| Ok(paired_ce_grad(s, &cw.w_diff, &cw.w_dist, scale)?.0))
}

/// Teacher discrepancy over a batch: each masked-input student against its
/// own teacher's pseudo-label, unweighted.
pub fn cmd_loss<T: Real>(samples: &[PairedTargets<'_, T>]) -> Result<f64> {
    batch_mean(samples, |s, scale| {
        let ones = vec![1.0; s.pa.num_classes()];
        Ok(paired_ce_grad(s, &ones, &ones, scale)?.0)
    })
}

fn batch_mean<S>(samples: &[S], f: impl Fn(&S, f64) -> Result<f64>) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let scale = 1.0 / samples.len() as f64;
    samples.iter().map(|s| f(s, scale)).sum()
}

/// `scale · mean_v KL(σ(target) ‖ σ(pred))` over channels, with gradients
/// for both arguments.
pub fn kl_feature_grad<T: Real>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
    scale: f64,
) -> Result<(f64, Vec<T>, Vec<T>)> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "feature stage {}: {:?}x{} vs {:?}x{}",
            pred.stage,
            pred.dims(),
            pred.channels(),
            target.dims(),
            target.channels()
        )));
    }
    let n = pred.dims().voxels();
    let c = pred.channels();
    let log_p = log_softmax_planar(pred.data(), c, n);
    let log_q = log_softmax_planar(target.data(), c, n);
    let k = scale / n as f64;
    let mut g_pred = vec![T::zero(); c * n];
    let mut g_target = vec![T::zero(); c * n];
    let mut total = 0.0f64;
    for v in 0..n {
        let mut kl = 0.0f64;
        for ch in 0..c {
            let i = ch * n + v;
            let q = log_q[i].exp();
            kl += q * (log_q[i] - log_p[i]);
        }
        total += kl;
        for ch in 0..c {
            let i = ch * n + v;
            let q = log_q[i].exp();
            let p = log_p[i].exp();
            g_pred[i] = T::from_f64(k * (p - q));
            g_target[i] = T::from_f64(k * q * (log_q[i] - log_p[i] - kl));
        }
    }
    Ok((k * total, g_pred, g_target))
}

/// Per-sample `scale · Σ_k λ_k KL(σ(d_k^B) ‖ σ(d_k^A))` with gradients for
/// the features of both branches (index `k − 1`).
#[allow(clippy::type_complexity)]
pub fn cfc_loss_grad<T: Real>(
    features_a: &[FeatureMap<T>],
    features_b: &[FeatureMap<T>],
    scale: f64,
) -> Result<(f64, Vec<Vec<T>>, Vec<Vec<T>>)> {
    if features_a.len() != CFC_LAMBDA.len() || features_b.len() != CFC_LAMBDA.len() {
        return Err(Error::shape(format!(
            "feature consistency needs {} stages per branch, got {} and {}",
            CFC_LAMBDA.len(),
            features_a.len(),
            features_b.len()
        )));
    }
    let mut total = 0.0;
    let mut ga = Vec::with_capacity(4);
    let mut gb = Vec::with_capacity(4);
    for ((fa, fb), &lambda) in features_a.iter().zip(features_b).zip(&CFC_LAMBDA) {
        let (l, g_pred, g_target) = kl_feature_grad(fa, fb, scale * lambda)?;
        total += l;
        ga.push(g_pred);
        gb.push(g_target);
    }
    Ok((total, ga, gb))
}

/// Cross feature consistency averaged over a batch of `(features_a, features_b)` samples.
pub fn cfc_loss<T: Real>(samples: &[(&[FeatureMap<T>], &[FeatureMap<T>])]) -> Result<f64> {
    batch_mean(samples, |(a, b), scale| Ok(cfc_loss_grad(a, b, scale)?.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampUpSchedule {
    pub beta_max: f64,
    /// Iteration at which the ramp reaches `beta_max`.
    pub ramp_iters: u64,
}

impl Default for RampUpSchedule {
    fn default() -> Self {
        RampUpSchedule {
            beta_max: 1.0,
            ramp_iters: 800,
        }
    }
}

impl RampUpSchedule {
    /// Schedule reaching `beta_max` after `fraction` of `total_iters`.
    pub fn for_run(beta_max: f64, total_iters: u64, fraction: f64) -> Self {
        RampUpSchedule {
            beta_max,
            ramp_iters: ((total_iters as f64 * fraction).round() as u64).max(1),
        }
    }
}

/// Gaussian ramp-up `β(t) = β_max · exp(−5 (1 − min(t, T_r)/T_r)²)`.
pub fn rampup_beta(t: u64, sched: &RampUpSchedule) -> f64 {
    let tr = sched.ramp_iters.max(1) as f64;
    let phase = 1.0 - (t as f64).min(tr) / tr;
    sched.beta_max * (-5.0 * phase * phase).exp()
}

/// Components of the objective at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub cps: f64,
    pub con: f64,
    pub dis: f64,
    pub beta: f64,
    pub total: f64,
}

/// `total = sup + β·(cps + con + dis)`; non-finite components are rejected by name.
pub fn total_loss(sup: f64, cps: f64, con: f64, dis: f64, beta: f64) -> Result<LossBreakdown> {
    for (term, value) in [("sup", sup), ("cps", cps), ("con", con), ("dis", dis), ("beta", beta)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    let total = sup + beta * (cps + con + dis);
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total", value: total });
    }
    Ok(LossBreakdown {
        sup,
        cps,
        con,
        dis,
        beta,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{one_hot, Dims};
    use std::f64::consts::LN_2;

    fn labels(data: Vec<u8>, c: usize) -> LabelMap {
        let n = data.len();
        LabelMap::new(Dims::new(1, 1, n), c, data).unwrap()
    }

    fn probs(per_voxel: &[&[f64]]) -> ProbMap<f64> {
        let n = per_voxel.len();
        let c = per_voxel[0].len();
        let mut data = vec![0.0; n * c];
        for (v, p) in per_voxel.iter().enumerate() {
            for k in 0..c {
                data[k * n + v] = p[k];
            }
        }
        ProbMap::new(Dims::new(1, 1, n), c, data).unwrap()
    }

    #[test]
    fn ce_cases() {
        let y = labels(vec![0, 1, 1, 0], 2);
        let p: ProbMap<f64> = one_hot(&y, 2).unwrap();
        assert!(ce_loss(&p, &y, &[1.0, 1.0]).unwrap().abs() < 1e-12);

        let u = ProbMap::<f64>::uniform(y.dims(), 2);
        assert!((ce_loss(&u, &y, &[1.0, 1.0]).unwrap() - LN_2).abs() < 1e-12);
        assert!((ce_loss(&u, &y, &[2.0, 2.0]).unwrap() - 2.0 * LN_2).abs() < 1e-12);

        // confident wrong prediction is capped by the clipping floor
        let wrong = probs(&[&[1.0, 0.0]]);
        let l = ce_loss(&wrong, &labels(vec![1], 2), &[1.0, 1.0]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_shape_mismatch() {
        let p = ProbMap::<f64>::uniform(Dims::new(1, 1, 3), 2);
        assert!(matches!(ce_loss(&p, &labels(vec![0, 1], 2), &[1.0, 1.0]), Err(Error::Shape(_))));
        assert!(ce_loss(&p, &labels(vec![0, 1, 0], 2), &[1.0]).is_err());
    }

    #[test]
    fn dice_cases() {
        let y = labels(vec![0, 1, 1, 0], 2);
        let p: ProbMap<f64> = one_hot(&y, 2).unwrap();
        assert!(dice_loss(&p, &y).unwrap().abs() < 1e-5);

        let complement = labels(vec![1, 0, 0, 1], 2);
        let p: ProbMap<f64> = one_hot(&complement, 2).unwrap();
        assert!((dice_loss(&p, &y).unwrap() - 1.0).abs() < 1e-5);

        let y = labels(vec![0, 1], 2);
        let u = ProbMap::<f64>::uniform(y.dims(), 2);
        let want = 1.0 - (1.0 + DICE_EPS) / (2.0 + DICE_EPS);
        assert!((dice_loss(&u, &y).unwrap() - want).abs() < 1e-15);
        assert!((dice_loss(&u, &y).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn sup_cases() {
        let y = labels(vec![0, 1], 2);
        let cw = ClassWeights::uniform(2);
        let oh: ProbMap<f64> = one_hot(&y, 2).unwrap();
        let l = sup_loss(&[SupSample { pa: &oh, pb: &oh, y: &y }], &cw).unwrap();
        assert!(l.abs() < 1e-5);

        let u = ProbMap::<f64>::uniform(y.dims(), 2);
        let l = sup_loss(&[SupSample { pa: &u, pb: &u, y: &y }], &cw).unwrap();
        let per_branch = 0.5 * (LN_2 + dice_loss(&u, &y).unwrap());
        assert!((l - 2.0 * per_branch).abs() < 1e-12);
        assert!((l - (LN_2 + 0.5)).abs() < 1e-5);

        let other = probs(&[&[0.7, 0.3], &[0.2, 0.8]]);
        let cw = ClassWeights {
            w_diff: vec![0.4, 1.6],
            w_dist: vec![0.4, 1.6],
        };
        let ab = sup_loss(&[SupSample { pa: &u, pb: &other, y: &y }], &cw).unwrap();
        let ba = sup_loss(&[SupSample { pa: &other, pb: &u, y: &y }], &cw).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn cps_and_cmd_cases() {
        let y_b = labels(vec![1], 2);
        let y_a = labels(vec![0], 2);
        let pa: ProbMap<f64> = one_hot(&y_b, 2).unwrap();
        let pb: ProbMap<f64> = one_hot(&y_a, 2).unwrap();
        let s = PairedTargets {
            pa: &pa,
            target_a: &y_b,
            pb: &pb,
            target_b: &y_a,
        };
        assert!(cps_loss(&[s], &ClassWeights::uniform(2)).unwrap().abs() < 1e-12);

        let u = probs(&[&[0.5, 0.5]]);
        let s = PairedTargets {
            pa: &u,
            target_a: &y_b,
            pb: &pb,
            target_b: &y_a,
        };
        assert!((cps_loss(&[s], &ClassWeights::uniform(2)).unwrap() - LN_2).abs() < 1e-12);

        let s = PairedTargets {
            pa: &u,
            target_a: &y_a,
            pb: &u,
            target_b: &y_b,
        };
        assert!((cmd_loss(&[s]).unwrap() - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_case_and_lambda() {
        assert_eq!(CFC_LAMBDA, [0.2, 0.4, 0.6, 0.8]);
        for (k, l) in CFC_LAMBDA.iter().enumerate() {
            assert!((*l - 0.2 * (k + 1) as f64).abs() < 1e-15);
        }
        let d = Dims::cube(1);
        let fa = FeatureMap::new(1, d, 2, vec![0.0f64, 0.0]).unwrap();
        let fb = FeatureMap::new(1, d, 2, vec![0.0f64, 3f64.ln()]).unwrap();
        let (kl, _, _) = kl_feature_grad(&fa, &fb, 1.0).unwrap();
        let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((kl - want).abs() < 1e-15);
        assert!((kl - 0.130_812_035_941_137).abs() < 1e-12);

        let (same, _, _) = kl_feature_grad(&fb, &fb, 1.0).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn cfc_identical_features_is_zero() {
        let d = Dims::cube(2);
        let feats: Vec<FeatureMap<f64>> = (1..=4)
            .map(|k| FeatureMap::new(k, d, 3, (0..24).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap())
            .collect();
        let l = cfc_loss(&[(&feats[..], &feats[..])]).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn rampup_values() {
        let s = RampUpSchedule {
            beta_max: 2.0,
            ramp_iters: 100,
        };
        assert!((rampup_beta(0, &s) - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(rampup_beta(100, &s), 2.0);
        assert_eq!(rampup_beta(5000, &s), 2.0);
        assert!((rampup_beta(50, &s) - 2.0 * (-1.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn total_cases() {
        assert_eq!(total_loss(0.7, 3.0, 2.0, 1.0, 0.0).unwrap().total, 0.7);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 1.0).unwrap().total, 4.0);
        match total_loss(1.0, f64::NAN, 0.0, 0.0, 1.0) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "cps"),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Central differences over probabilities (ce, dice) and features (kl).
    #[test]
    fn output_gradients_match_finite_differences() {
        let y = labels(vec![0, 2, 1, 2, 0], 3);
        let base = probs(&[
            &[0.2, 0.5, 0.3],
            &[0.1, 0.1, 0.8],
            &[0.6, 0.3, 0.1],
            &[0.3, 0.3, 0.4],
            &[0.5, 0.25, 0.25],
        ]);
        let w = [0.5, 1.2, 1.3];
        let h = 1e-6;
        let check = |f: &dyn Fn(&ProbMap<f64>) -> f64, g: &[f64]| {
            for i in 0..base.data().len() {
                let mut up = base.data().to_vec();
                up[i] += h;
                let mut dn = base.data().to_vec();
                dn[i] -= h;
                let fu = f(&ProbMap::from_raw(base.dims(), 3, up));
                let fd = f(&ProbMap::from_raw(base.dims(), 3, dn));
                let num = (fu - fd) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-6, "index {i}: {num} vs {}", g[i]);
            }
        };
        let (_, g) = ce_loss_grad(&base, &y, &w, 0.7).unwrap();
        check(&|p| ce_loss_grad(p, &y, &w, 0.7).unwrap().0, &g);
        let (_, g) = dice_loss_grad(&base, &y, &w, 0.7).unwrap();
        check(&|p| dice_loss_grad(p, &y, &w, 0.7).unwrap().0, &g);

        let d = Dims::new(1, 1, 3);
        let fa = FeatureMap::new(2, d, 2, vec![0.3, -1.0, 0.8, 0.1, 0.4, -0.2]).unwrap();
        let fb = FeatureMap::new(2, d, 2, vec![-0.5, 0.2, 0.9, 1.1, -0.3, 0.6]).unwrap();
        let (_, ga, gb) = kl_feature_grad(&fa, &fb, 0.4).unwrap();
        for i in 0..6 {
            for (which, g) in [(0, &ga), (1, &gb)] {
                let mut up = [fa.data().to_vec(), fb.data().to_vec()];
                let mut dn = up.clone();
                up[which][i] += h;
                dn[which][i] -= h;
                let f = |v: &[Vec<f64>; 2]| {
                    let a = FeatureMap::new(2, d, 2, v[0].clone()).unwrap();
                    let b = FeatureMap::new(2, d, 2, v[1].clone()).unwrap();
                    kl_feature_grad(&a, &b, 0.4).unwrap().0
                };
                let num = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-8, "arg {which} index {i}");
            }
        }
    }

    #[test]
    fn softmax_backward_matches_chain_rule() {
        // L = Σ a_k p_k  =>  dL/dz_j = p_j (a_j − Σ a_k p_k)
        let p = probs(&[&[0.2, 0.3, 0.5]]);
        let a = [1.0, -2.0, 0.5];
        let g = softmax_backward(&p, &a);
        let dot: f64 = 0.2 * 1.0 + 0.3 * -2.0 + 0.5 * 0.5;
        for k in 0..3 {
            assert!((g[k] - p.data()[k] * (a[k] - dot)).abs() < 1e-15);
        }
    }
}
