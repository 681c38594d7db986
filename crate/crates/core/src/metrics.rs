//! Evaluation metrics: per-class Dice, average surface distance, and the
//! report that collects them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, ParamVector};
use crate::volume::{argmax_label, softmax_over_classes, Dims, LabelMap, ProbMap, Spacing, Volume};

fn check_dims(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction dims {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)` for class `c`; 1 when both are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, c: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    let mut p = 0u64;
    let mut g = 0u64;
    let mut both = 0u64;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let ia = a as usize == c;
        let ib = b as usize == c;
        p += ia as u64;
        g += ib as u64;
        both += (ia && ib) as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Voxels of class `c` with at least one face neighbour outside the class
/// (the volume border counts as outside), as flat indices in scan order.
pub fn surface_voxels(y: &LabelMap, c: usize) -> Vec<usize> {
    let d = y.dims();
    let inside = |z: isize, yy: isize, x: isize| {
        z >= 0
            && yy >= 0
            && x >= 0
            && (z as usize) < d.d
            && (yy as usize) < d.h
            && (x as usize) < d.w
            && y.label(d.index(z as usize, yy as usize, x as usize)) == c
    };
    let mut out = Vec::new();
    for i in 0..d.voxels() {
        if y.label(i) != c {
            continue;
        }
        let (z, yy, x) = d.coords(i);
        let (z, yy, x) = (z as isize, yy as isize, x as isize);
        let interior = inside(z - 1, yy, x)
            && inside(z + 1, yy, x)
            && inside(z, yy - 1, x)
            && inside(z, yy + 1, x)
            && inside(z, yy, x - 1)
            && inside(z, yy, x + 1);
        if !interior {
            out.push(i);
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], w2: f64, out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w2 * (q * q) as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                zb[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = (fq - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q - p) as f64);
            if s <= zb[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                zb[k as usize] = s;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let last = k as usize;
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while j < last && zb[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *o = w2 * dq * dq + f[p];
    }
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest site.
pub fn squared_distance_transform(dims: Dims, sites: &[usize], spacing: Spacing) -> Vec<f64> {
    let [sz, sy, sx] = spacing.0.map(|s| s as f64);
    let mut g = vec![f64::INFINITY; dims.voxels()];
    for &s in sites {
        g[s] = 0.0;
    }
    let longest = dims.d.max(dims.h).max(dims.w);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zb = vec![0.0; longest + 1];
    let mut pass = |len: usize, w2: f64, lines: &mut dyn Iterator<Item = (usize, usize)>, g: &mut [f64]| {
        for (start, stride) in lines {
            for i in 0..len {
                f[i] = g[start + i * stride];
            }
            dt1d(&f[..len], w2, &mut out[..len], &mut v, &mut zb);
            for i in 0..len {
                g[start + i * stride] = out[i];
            }
        }
    };
    let (d, h, w) = (dims.d, dims.h, dims.w);
    pass(w, sx * sx, &mut (0..d * h).map(|r| (r * w, 1)), &mut g);
    pass(h, sy * sy, &mut (0..d).flat_map(|z| (0..w).map(move |x| (z * h * w + x, w))), &mut g);
    pass(d, sz * sz, &mut (0..h * w).map(|r| (r, h * w)), &mut g);
    g
}

/// Symmetric average surface distance for class `c`, in spacing units.
/// `None` when the class is absent from either map.
pub fn asd(pred: &LabelMap, gt: &LabelMap, c: usize, spacing: Spacing) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    if !spacing.is_valid() {
        return Err(Error::invalid(format!("spacing {:?} must be positive", spacing.0)));
    }
    let sp = surface_voxels(pred, c);
    let sg = surface_voxels(gt, c);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let dims = pred.dims();
    let to_gt = squared_distance_transform(dims, &sg, spacing);
    let to_pred = squared_distance_transform(dims, &sp, spacing);
    let mean = |from: &[usize], dist: &[f64]| from.iter().map(|&i| dist[i].sqrt()).sum::<f64>() / from.len() as f64;
    Ok(Some(0.5 * (mean(&sp, &to_gt) + mean(&sg, &to_pred))))
}

/// Per-class evaluation over a set of volumes. Class 0 (background) is not reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iteration: Option<u64>,
    /// Foreground classes `1..C`, index `c - 1`.
    pub per_class_dice: Vec<f64>,
    /// `None` where no volume had the class in both prediction and ground truth.
    pub per_class_asd: Vec<Option<f64>>,
    /// Per class, how many volumes had an undefined surface distance.
    pub asd_undefined: Vec<usize>,
    pub avg_dice: f64,
    pub avg_asd: Option<f64>,
}

impl MetricsReport {
    /// Mean Dice over a subset of foreground classes (1-based class ids).
    pub fn subset_dice(&self, classes: &[usize]) -> Result<f64> {
        if classes.is_empty() {
            return Err(Error::invalid("empty class subset"));
        }
        let mut sum = 0.0;
        for &c in classes {
            let v = self
                .per_class_dice
                .get(c.wrapping_sub(1))
                .ok_or_else(|| Error::invalid(format!("class {c} is not a foreground class")))?;
            sum += v;
        }
        Ok(sum / classes.len() as f64)
    }

    /// Aligned text table: one column per class plus the two averages.
    pub fn table(&self) -> String {
        let mut head = String::from("metric   ");
        let mut dice = String::from("Dice     ");
        let mut dist = String::from("ASD      ");
        for (i, (d, a)) in self.per_class_dice.iter().zip(&self.per_class_asd).enumerate() {
            let _ = write!(head, " {:>8}", format!("c{}", i + 1));
            let _ = write!(dice, " {:>8.4}", d);
            let _ = write!(dist, " {:>8}", fmt_opt(*a));
        }
        let _ = write!(head, " {:>9} {:>9}", "Avg.Dice", "Avg.ASD");
        let _ = write!(dice, " {:>9.4} {:>9}", self.avg_dice, "");
        let _ = write!(dist, " {:>9} {:>9}", "", fmt_opt(self.avg_asd));
        format!("{head}\n{dice}\n{dist}\n")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Build a report from predicted and ground-truth label maps.
pub fn report_from_predictions(
    preds: &[LabelMap],
    gts: &[LabelMap],
    spacings: &[Spacing],
    iteration: Option<u64>,
) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != gts.len() || spacings.len() != gts.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty prediction/label/spacing lists, got {}/{}/{}",
            preds.len(),
            gts.len(),
            spacings.len()
        )));
    }
    let c = gts[0].num_classes();
    let fg = c - 1;
    let mut dice_sum = vec![0.0; fg];
    let mut asd_sum = vec![0.0; fg];
    let mut asd_n = vec![0usize; fg];
    for ((p, g), &s) in preds.iter().zip(gts).zip(spacings) {
        if g.num_classes() != c {
            return Err(Error::shape("ground-truth maps disagree on the class count"));
        }
        for k in 1..c {
            dice_sum[k - 1] += dice_score(p, g, k)?;
            if let Some(a) = asd(p, g, k, s)? {
                asd_sum[k - 1] += a;
                asd_n[k - 1] += 1;
            }
        }
    }
    let n = preds.len() as f64;
    let per_class_dice: Vec<f64> = dice_sum.iter().map(|s| s / n).collect();
    let per_class_asd: Vec<Option<f64>> = asd_sum
        .iter()
        .zip(&asd_n)
        .map(|(&s, &k)| (k > 0).then(|| s / k as f64))
        .collect();
    let asd_undefined: Vec<usize> = asd_n.iter().map(|&k| preds.len() - k).collect();
    for (k, &u) in asd_undefined.iter().enumerate() {
        if u > 0 {
            log::debug!("class {}: surface distance undefined on {u} volume(s)", k + 1);
        }
    }
    let avg_dice = per_class_dice.iter().sum::<f64>() / fg as f64;
    let defined: Vec<f64> = per_class_asd.iter().flatten().copied().collect();
    let avg_asd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MetricsReport {
        iteration,
        per_class_dice,
        per_class_asd,
        asd_undefined,
        avg_dice,
        avg_asd,
    })
}

/// Predicted label map; several parameter sets are ensembled by averaging
/// their probabilities.
pub fn predict(net: &Network, params: &[&ParamVector], x: &Volume) -> Result<LabelMap> {
    let mut probs = Vec::with_capacity(params.len());
    for p in params {
        probs.push(softmax_over_classes(&net.forward(p, x)?.logits)?);
    }
    let refs: Vec<&ProbMap> = probs.iter().collect();
    Ok(argmax_label(&ProbMap::average(&refs)?))
}

/// Evaluate one or more parameter sets on labeled validation volumes.
pub fn evaluate(
    net: &Network,
    params: &[&ParamVector],
    val: &[(Volume, LabelMap)],
    iteration: Option<u64>,
) -> Result<MetricsReport> {
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut preds = Vec::with_capacity(val.len());
    for (i, (x, _)) in val.iter().enumerate() {
        let p = predict(net, params, x).map_err(|e| Error::invalid(format!("validation volume {i}: {e}")))?;
        preds.push(p);
    }
    let gts: Vec<LabelMap> = val.iter().map(|(_, y)| y.clone()).collect();
    let spacings: Vec<Spacing> = val.iter().map(|(x, _)| x.spacing()).collect();
    report_from_predictions(&preds, &gts, &spacings, iteration)
}
