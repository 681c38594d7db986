//! The co-training loop: two students, two EMA teachers, masked inputs and
//! the combined objective.

mod config;
mod objective;

pub use config::{parse_config_text, McpcDirection, Toggles, TrainConfig, CONFIG_KEYS};
pub use objective::{objective, Coefficients, CrossTargets, ObjectiveOutput, ObjectiveSpec, Sample, Term};

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::ema::{ema_update, init_teacher, TeacherState};
use crate::error::{Error, Result};
use crate::losses::{rampup_beta, total_loss, LossBreakdown};
use crate::masking::{apply_mask, generate_mask, MaskSpec};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{Network, ParamVector};
use crate::rng::{self, Stream};
use crate::volume::{argmax_label, softmax_over_classes, LabelMap, Volume};
use crate::weights::{update_stats, ClassStats, ClassWeighting, ClassWeights, LogFrequencyDifficulty};

/// One student, its teacher and its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub student: ParamVector,
    pub teacher: TeacherState,
    pub velocity: ParamVector,
}

impl BranchState {
    pub fn new(student: ParamVector) -> Self {
        BranchState {
            teacher: init_teacher(&student),
            velocity: student.zeros_like(),
            student,
        }
    }
}

/// Everything that changes between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Number of completed iterations.
    pub iter: u64,
    pub a: BranchState,
    pub b: BranchState,
    pub stats: ClassStats,
    pub weights: ClassWeights,
}

/// `lr0 · (1 − t/T)^p`, clamped to zero past the end.
pub fn poly_lr(t: u64, cfg: &TrainConfig) -> f64 {
    let frac = (t as f64 / cfg.total_iters as f64).min(1.0);
    cfg.lr0 * (1.0 - frac).powf(cfg.poly_power)
}

/// Fresh state: differently seeded students, teachers equal to them, zero
/// momentum, distribution weights from the labeled class counts.
pub fn init_state(cfg: &TrainConfig, labeled_counts: Vec<u64>) -> Result<TrainerState> {
    init_state_with(cfg, labeled_counts, &LogFrequencyDifficulty)
}

pub fn init_state_with(
    cfg: &TrainConfig,
    labeled_counts: Vec<u64>,
    scheme: &dyn ClassWeighting,
) -> Result<TrainerState> {
    cfg.validate()?;
    let net = Network::new(cfg.network)?;
    if labeled_counts.len() != cfg.network.num_classes {
        return Err(Error::shape(format!(
            "{} class counts for {} classes",
            labeled_counts.len(),
            cfg.network.num_classes
        )));
    }
    let a = net.init(rng::derive_seed(cfg.seed, &[Stream::InitA as u64]));
    let b = net.init(rng::derive_seed(cfg.seed, &[Stream::InitB as u64]));
    let stats = ClassStats::new(labeled_counts);
    let weights = ClassWeights {
        w_diff: scheme.diff(&stats)?,
        w_dist: scheme.dist(&stats)?,
    };
    Ok(TrainerState {
        iter: 0,
        a: BranchState::new(a),
        b: BranchState::new(b),
        stats,
        weights,
    })
}

/// Result of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub iter: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// Set when the difficulty weights were recomputed before this step.
    pub new_weights: Option<ClassWeights>,
}

/// Image identity used to key mask draws: `(split slot, index)`.
fn image_id(slot: u64, index: usize) -> u64 {
    (slot << 32) | index as u64
}

pub struct Trainer<'d> {
    cfg: TrainConfig,
    net: Network,
    data: &'d Dataset,
    scheme: Box<dyn ClassWeighting>,
    mask: MaskSpec,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d Dataset) -> Result<Self> {
        Trainer::with_weighting(cfg, data, Box::new(LogFrequencyDifficulty))
    }

    pub fn with_weighting(cfg: TrainConfig, data: &'d Dataset, scheme: Box<dyn ClassWeighting>) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::invalid("the labeled split is empty"));
        }
        let net = Network::new(cfg.network)?;
        let c = cfg.network.num_classes;
        for (i, (x, y)) in data.labeled.iter().chain(&data.val).enumerate() {
            net.check_input(x.dims())?;
            if y.num_classes() != c {
                return Err(Error::shape(format!("labeled/val volume {i} has {} classes, config {c}", y.num_classes())));
            }
        }
        for x in &data.unlabeled {
            net.check_input(x.dims())?;
        }
        let mask = MaskSpec {
            seed: rng::derive_seed(cfg.seed, &[Stream::Mask as u64, cfg.mask.seed]),
            ..cfg.mask
        };
        Ok(Trainer {
            cfg,
            net,
            data,
            scheme,
            mask,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn init_state(&self) -> Result<TrainerState> {
        init_state_with(&self.cfg, self.data.labeled_class_counts(self.cfg.network.num_classes), self.scheme.as_ref())
    }

    /// Index into a split at iteration `t`: each pass over the split uses
    /// its own seeded shuffle.
    fn order(&self, purpose: Stream, len: usize, t: u64) -> usize {
        let epoch = t / len as u64;
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng::stream(self.cfg.seed, purpose, &[epoch]));
        perm[(t % len as u64) as usize]
    }

    /// `(labeled index, unlabeled index)` used at iteration `t`.
    pub fn batch_indices(&self, t: u64) -> (usize, Option<usize>) {
        let l = self.order(Stream::LabeledOrder, self.data.labeled.len(), t);
        let u = (!self.data.unlabeled.is_empty()).then(|| self.order(Stream::UnlabeledOrder, self.data.unlabeled.len(), t));
        (l, u)
    }

    /// One iteration on the batch scheduled for `state.iter`.
    pub fn step(&self, state: &mut TrainerState) -> Result<StepRecord> {
        let (li, ui) = self.batch_indices(state.iter);
        let (x, y) = &self.data.labeled[li];
        let unlabeled = ui.map(|i| (&self.data.unlabeled[i], image_id(1, i)));
        self.train_step(state, (x, y, image_id(0, li)), unlabeled)
    }

    fn prepare<'a>(&self, state: &TrainerState, x: &'a Volume, y: Option<&'a LabelMap>, id: u64) -> Result<Sample<'a>> {
        let t = self.cfg.toggles;
        let x_masked = if t.mcpc || t.cmd {
            let m = generate_mask(&self.mask.for_draw(id, state.iter), x.dims())?;
            Some(apply_mask(x, &m)?)
        } else {
            None
        };
        let (teacher_a, teacher_b) = if t.cmd {
            let label = |p: &ParamVector| -> Result<LabelMap> {
                Ok(argmax_label(&softmax_over_classes(&self.net.forward(p, x)?.logits)?))
            };
            (Some(label(&state.a.teacher.params)?), Some(label(&state.b.teacher.params)?))
        } else {
            (None, None)
        };
        Ok(Sample {
            x,
            x_masked,
            y,
            teacher_a,
            teacher_b,
        })
    }

    /// One optimization step on an explicit batch. `labeled` and `unlabeled`
    /// carry an image id that keys the mask draw.
    pub fn train_step(
        &self,
        state: &mut TrainerState,
        labeled: (&Volume, &LabelMap, u64),
        unlabeled: Option<(&Volume, u64)>,
    ) -> Result<StepRecord> {
        let t = state.iter;
        let new_weights = if t > 0 && t % self.cfg.diff_every == 0 {
            state.weights.w_diff = self.scheme.diff(&state.stats)?;
            Some(state.weights.clone())
        } else {
            None
        };

        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iter: t,
                term: "network output".into(),
                breakdown: e.to_string(),
            },
            other => other,
        };
        let mut samples = vec![self
            .prepare(state, labeled.0, Some(labeled.1), labeled.2)
            .map_err(diverged)?];
        if let Some((u, id)) = unlabeled {
            samples.push(self.prepare(state, u, None, id).map_err(diverged)?);
        }
        let beta = rampup_beta(t, &self.cfg.rampup());
        let spec = ObjectiveSpec {
            toggles: self.cfg.toggles,
            direction: self.cfg.direction,
            weights: &state.weights,
            coef: Coefficients::total(beta),
        };
        let out = objective(&self.net, &state.a.student, &state.b.student, &samples, &spec, None).map_err(diverged)?;
        let breakdown = total_loss(out.sup, out.cps, out.con, out.dis, beta).map_err(|e| match e {
            Error::NonFiniteLoss { term, .. } => Error::Diverged {
                iter: t,
                term: term.to_string(),
                breakdown: format!(
                    "{{\"sup\":{},\"cps\":{},\"con\":{},\"dis\":{},\"beta\":{}}}",
                    out.sup, out.cps, out.con, out.dis, beta
                ),
            },
            other => other,
        })?;

        let lr = poly_lr(t, &self.cfg);
        let mu = self.cfg.momentum as f32;
        let lr32 = lr as f32;
        for (branch, grad) in [(&mut state.a, &out.grad_a), (&mut state.b, &out.grad_b)] {
            branch.velocity.zip_apply(grad, |v, g| *v = mu * *v + g)?;
            branch.student.zip_apply(&branch.velocity, |p, v| *p -= lr32 * v)?;
            if !branch.student.all_finite() {
                return Err(Error::Diverged {
                    iter: t,
                    term: "parameters".into(),
                    breakdown: serde_json::to_string(&breakdown)?,
                });
            }
            ema_update(&mut branch.teacher, &branch.student, self.cfg.ema_alpha)?;
        }
        if let Some(d) = &out.student_dice {
            state.stats = update_stats(&state.stats, d)?;
        }
        state.iter += 1;
        Ok(StepRecord {
            iter: t,
            breakdown,
            lr,
            new_weights,
        })
    }

    /// Validation report for the current students.
    pub fn evaluate(&self, state: &TrainerState) -> Result<MetricsReport> {
        let params: Vec<&ParamVector> = if self.cfg.eval_ensemble {
            vec![&state.a.student, &state.b.student]
        } else {
            vec![&state.a.student]
        };
        evaluate(&self.net, &params, &self.data.val, Some(state.iter))
    }
}

/// Where and how [`run`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    /// Records of the iterations executed by this call.
    pub records: Vec<StepRecord>,
    pub final_report: Option<MetricsReport>,
}

pub const LOG_NAME: &str = "log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_ECHO: &str = "config.cfg";

pub fn checkpoint_path(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iter:06}.ckpt"))
}

/// JSONL metrics stream.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Open `path` for appending, first dropping records with `iter >= keep_below`.
    pub fn open(path: &Path, keep_below: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if keep_below > 0 && path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                let v: serde_json::Value = serde_json::from_str(&line)?;
                if v.get("iter").and_then(|i| i.as_u64()).is_some_and(|i| i < keep_below) {
                    kept.push(line);
                }
            }
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        for line in kept {
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        writeln!(self.file, "{value}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn loss(&mut self, r: &StepRecord) -> Result<()> {
        let b = &r.breakdown;
        self.write(&json!({
            "kind": "loss", "iter": r.iter, "sup": b.sup, "cps": b.cps, "con": b.con,
            "dis": b.dis, "beta": b.beta, "total": b.total, "lr": r.lr,
        }))
    }

    pub fn weights(&mut self, iter: u64, w: &ClassWeights) -> Result<()> {
        self.write(&json!({"kind": "weights", "iter": iter, "w_diff": w.w_diff, "w_dist": w.w_dist}))
    }

    pub fn eval(&mut self, r: &MetricsReport) -> Result<()> {
        let mut v = serde_json::to_value(r)?;
        v["kind"] = json!("eval");
        v["iter"] = json!(r.iteration);
        self.write(&v)
    }
}

fn write_report(out_dir: &Path, r: &MetricsReport) -> Result<()> {
    let json_path = out_dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(&json_path, e))?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, r.table()).map_err(|e| Error::io(&txt, e))
}

/// Train for `cfg.total_iters` iterations, writing the config echo, the JSONL
/// log, periodic and final checkpoints and validation reports to `opts.out_dir`.
pub fn run(cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> Result<RunSummary> {
    let trainer = Trainer::new(cfg.clone(), data)?;
    let out = &opts.out_dir;
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    let echo = out.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;

    let mut state = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_network(trainer.network(), p)?;
            if ck.config.network != cfg.network {
                return Err(Error::Checkpoint {
                    path: p.clone(),
                    message: "network config differs from the run config".into(),
                });
            }
            ck.state
        }
        None => trainer.init_state()?,
    };
    let mut log = MetricsLog::open(&out.join(LOG_NAME), state.iter)?;
    if state.iter == 0 {
        log.weights(0, &state.weights)?;
    }

    let mut records = Vec::new();
    while state.iter < cfg.total_iters {
        let rec = trainer.step(&mut state)?;
        if let Some(w) = &rec.new_weights {
            log.weights(rec.iter, w)?;
        }
        log.loss(&rec)?;
        records.push(rec);
        let done = state.iter;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iters {
            Checkpoint::save(cfg, &state, &checkpoint_path(out, done))?;
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.total_iters && !data.val.is_empty() {
            let r = trainer.evaluate(&state)?;
            log.eval(&r)?;
            log::info!("iter {done}: avg dice {:.4}", r.avg_dice);
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    Checkpoint::save(cfg, &state, &final_checkpoint)?;
    let final_report = if data.val.is_empty() {
        None
    } else {
        let r = trainer.evaluate(&state)?;
        log.eval(&r)?;
        write_report(out, &r)?;
        Some(r)
    };
    Ok(RunSummary {
        final_checkpoint,
        records,
        final_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_volume, SplitTag, SynthSpec};
    use crate::network::NetworkConfig;
    use crate::volume::Dims;

    pub(crate) fn tiny_data(n_labeled: usize, n_unlabeled: usize) -> Dataset {
        let spec = SynthSpec {
            dims: Dims::cube(8),
            num_classes: 3,
            largest_fraction: 0.2,
            decay: 0.5,
            ..SynthSpec::default()
        };
        let pair = |tag, i| synth_volume(&spec, tag, i).unwrap();
        Dataset {
            labeled: (0..n_labeled).map(|i| pair(SplitTag::Labeled, i)).collect(),
            unlabeled: (0..n_unlabeled).map(|i| pair(SplitTag::Unlabeled, 100 + i).0).collect(),
            val: vec![pair(SplitTag::Val, 0)],
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig::new(3, 2),
            total_iters: 20,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_lr_values() {
        let cfg = TrainConfig {
            total_iters: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(0, &cfg), 0.01);
        assert_eq!(poly_lr(1000, &cfg), 0.0);
        assert!((poly_lr(500, &cfg) - 0.005_358_867_312_681_466).abs() < 1e-15);
        assert!((poly_lr(500, &cfg) - 0.005359).abs() < 1e-6);
    }

    #[test]
    fn students_differ_and_teachers_start_equal() {
        let s = init_state(&tiny_cfg(), vec![5, 3, 1]).unwrap();
        assert_ne!(s.a.student, s.b.student);
        assert_eq!(s.a.teacher.params, s.a.student);
        assert_eq!(s.weights.w_diff, vec![1.0; 3]);
        assert!(s.weights.w_dist[2] > s.weights.w_dist[0]);
    }

    #[test]
    fn all_toggles_off_is_purely_supervised() {
        let data = tiny_data(1, 1);
        let cfg = TrainConfig {
            toggles: Toggles::NONE,
            ..tiny_cfg()
        };
        let tr = Trainer::new(cfg, &data).unwrap();
        let mut with_u = tr.init_state().unwrap();
        let mut without_u = with_u.clone();
        let (x, y) = &data.labeled[0];
        let r1 = tr.train_step(&mut with_u, (x, y, 0), Some((&data.unlabeled[0], 1))).unwrap();
        let r2 = tr.train_step(&mut without_u, (x, y, 0), None).unwrap();
        let b = r1.breakdown;
        assert_eq!((b.cps, b.con, b.dis), (0.0, 0.0, 0.0));
        assert_eq!(b.total, b.sup);
        assert_eq!(r1.breakdown, r2.breakdown);
        assert_eq!(with_u, without_u);
    }

    #[test]
    fn toggles_only_change_their_fields_at_the_first_iteration() {
        let data = tiny_data(1, 1);
        let full = Trainer::new(tiny_cfg(), &data).unwrap();
        let mut s = full.init_state().unwrap();
        let f = full.step(&mut s).unwrap().breakdown;
        assert!(f.cps > 0.0 && f.con > 0.0 && f.dis > 0.0);
        for (i, t) in [Toggles { mcpc: false, ..Toggles::ALL }, Toggles { cfc: false, ..Toggles::ALL }, Toggles { cmd: false, ..Toggles::ALL }]
            .into_iter()
            .enumerate()
        {
            let tr = Trainer::new(TrainConfig { toggles: t, ..tiny_cfg() }, &data).unwrap();
            let mut s = tr.init_state().unwrap();
            let b = tr.step(&mut s).unwrap().breakdown;
            assert_eq!(b.sup, f.sup);
            let (fields, full_fields) = ([b.cps, b.con, b.dis], [f.cps, f.con, f.dis]);
            for k in 0..3 {
                if k == i {
                    assert_eq!(fields[k], 0.0);
                } else {
                    assert_eq!(fields[k], full_fields[k]);
                }
            }
            let want = b.sup + b.beta * (b.cps + b.con + b.dis);
            assert!((b.total - want).abs() <= 1e-12 * want.abs());
        }
    }

    #[test]
    fn steps_are_deterministic_and_keep_teachers_convex() {
        let data = tiny_data(2, 2);
        let tr = Trainer::new(tiny_cfg(), &data).unwrap();
        let mut s1 = tr.init_state().unwrap();
        let mut s2 = s1.clone();
        for _ in 0..3 {
            let before_t = s1.a.teacher.params.clone();
            let r1 = tr.step(&mut s1).unwrap();
            let r2 = tr.step(&mut s2).unwrap();
            assert_eq!(r1, r2);
            let student = &s1.a.student;
            for ((t_new, t_old), st) in s1.a.teacher.params.iter_values().zip(before_t.iter_values()).zip(student.iter_values()) {
                let (lo, hi) = if t_old < st { (t_old, st) } else { (st, t_old) };
                assert!(*t_new >= *lo - 1e-6 && *t_new <= *hi + 1e-6);
            }
        }
        assert_eq!(s1, s2);
        assert_ne!(s1.a.student, s1.b.student);
        assert_eq!(s1.iter, 3);
    }

    #[test]
    fn teacher_labels_drive_the_discrepancy_term() {
        let data = tiny_data(1, 0);
        let tr = Trainer::new(tiny_cfg(), &data).unwrap();
        let s = tr.init_state().unwrap();
        let (x, y) = &data.labeled[0];
        let mut sample = tr.prepare(&s, x, Some(y), 0).unwrap();
        let spec = ObjectiveSpec {
            toggles: Toggles::ALL,
            direction: McpcDirection::MaskedTeaches,
            weights: &s.weights,
            coef: Coefficients::total(1.0),
        };
        let base = objective(tr.network(), &s.a.student, &s.b.student, std::slice::from_ref(&sample), &spec, None).unwrap();
        let flipped: Vec<u8> = sample.teacher_a.as_ref().unwrap().data().iter().map(|&c| (c + 1) % 3).collect();
        sample.teacher_a = Some(LabelMap::new(x.dims(), 3, flipped).unwrap());
        let moved = objective(tr.network(), &s.a.student, &s.b.student, std::slice::from_ref(&sample), &spec, None).unwrap();
        assert_ne!(base.dis, moved.dis);
        assert_eq!(base.sup, moved.sup);
        assert_eq!(base.grad_b, moved.grad_b);
    }

    #[test]
    fn swapping_branches_swaps_outputs() {
        let data = tiny_data(1, 0);
        let tr = Trainer::new(tiny_cfg(), &data).unwrap();
        let s = tr.init_state().unwrap();
        let x = &data.labeled[0].0;
        let net = tr.network();
        let fa = net.forward(&s.a.student, x).unwrap();
        let fb = net.forward(&s.b.student, x).unwrap();
        let swapped = [net.forward(&s.b.student, x).unwrap(), net.forward(&s.a.student, x).unwrap()];
        assert_eq!(swapped[0].logits, fb.logits);
        assert_eq!(swapped[1].logits, fa.logits);
    }

    #[test]
    fn run_writes_one_record_and_one_checkpoint_for_one_iteration() {
        let data = tiny_data(1, 1);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            total_iters: 1,
            ..tiny_cfg()
        };
        let opts = RunOptions {
            out_dir: dir.path().to_path_buf(),
            resume: None,
        };
        let sum = run(&cfg, &data, &opts).unwrap();
        assert_eq!(sum.records.len(), 1);
        let log = fs::read_to_string(dir.path().join(LOG_NAME)).unwrap();
        assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"loss\"")).count(), 1);
        assert!(sum.final_checkpoint.exists());
        assert_eq!(fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 0);
        assert!(sum.final_report.is_some());
        assert!(dir.path().join("report.txt").exists());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trace() {
        let data = tiny_data(2, 2);
        let cfg = TrainConfig {
            total_iters: 8,
            checkpoint_every: 4,
            diff_every: 3,
            ..tiny_cfg()
        };
        let full = tempfile::tempdir().unwrap();
        let a = run(&cfg, &data, &RunOptions { out_dir: full.path().into(), resume: None }).unwrap();
        let part = tempfile::tempdir().unwrap();
        let b = run(
            &cfg,
            &data,
            &RunOptions {
                out_dir: part.path().into(),
                resume: Some(checkpoint_path(full.path(), 4)),
            },
        )
        .unwrap();
        assert_eq!(b.records, a.records[4..]);
        assert_eq!(fs::read(&a.final_checkpoint).unwrap(), fs::read(&b.final_checkpoint).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data(1, 1);
        let cfg = TrainConfig {
            lr0: 1e30,
            ..tiny_cfg()
        };
        let tr = Trainer::new(cfg, &data).unwrap();
        let mut s = tr.init_state().unwrap();
        let err = (0..10).find_map(|_| tr.step(&mut s).err()).expect("diverges");
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
