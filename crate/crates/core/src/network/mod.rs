//! Four-stage 3D encoder–decoder in the VNet pattern.
//!
//! Encoder: a 3×3×3 conv unit per stage joined by stride-2 2×2×2 convs.
//! Decoder: a conv unit per stage (stage 4 = bottleneck resolution) joined by
//! stride-2 transposed convs whose output is summed with the matching encoder
//! skip. Stage units are conv → per-image channel normalization → ELU, with a
//! residual connection when channel counts match (the single-channel input is
//! repeated across the first stage's channels); the resampling convs carry
//! a bias and an ELU but no normalization. The output of each decoder
//! unit, taken before upsampling, is exposed as decoder feature `k`
//! (`k = 4` deepest, `k = 1` at input resolution), followed by a 1×1×1 head.

mod kernels;
mod params;

pub use params::{ParamTensor, ParamVector, TensorInfo};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::volume::{Dims, FeatureMap, Volume};

use kernels::*;

/// Number of decoder stages exposed as feature taps.
pub const NUM_STAGES: usize = 4;

/// Inputs must be divisible by this along every axis (three downsamplings).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
}

impl NetworkConfig {
    pub fn new(num_classes: usize, base_channels: usize) -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes,
            base_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::invalid("only single-channel input is supported"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be >= 1"));
        }
        Ok(())
    }

    /// Channel width of stage `k` (1-based).
    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::new(5, 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Conv3,
    Down,
    Up,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    name: &'static str,
    kind: Kind,
    cin: usize,
    cout: usize,
    residual: bool,
    /// Index of the unit's first tensor in the parameter vector.
    offset: usize,
}

impl Unit {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            Kind::Conv3 => vec![self.cout, self.cin, 3, 3, 3],
            Kind::Down => vec![self.cout, self.cin, 2, 2, 2],
            Kind::Up => vec![self.cin, self.cout, 2, 2, 2],
        }
    }

    fn normalized(&self) -> bool {
        self.kind == Kind::Conv3
    }

    fn tensor_count(&self) -> usize {
        if self.normalized() {
            3
        } else {
            2
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            Kind::Conv3 => self.cin * 27,
            Kind::Down => self.cin * 8,
            Kind::Up => self.cin,
        }
    }
}

const ENC1: usize = 0;
const DOWN1: usize = 1;
const ENC2: usize = 2;
const DOWN2: usize = 3;
const ENC3: usize = 4;
const DOWN3: usize = 5;
const ENC4: usize = 6;
const DEC4: usize = 7;
const UP3: usize = 8;
const DEC3: usize = 9;
const UP2: usize = 10;
const DEC2: usize = 11;
const UP1: usize = 12;
const DEC1: usize = 13;
const NUM_UNITS: usize = 14;

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    /// `num_classes` channels at input resolution.
    pub logits: FeatureMap<T>,
    /// Decoder taps, index `k - 1` holds stage `k`.
    pub decoder_features: [FeatureMap<T>; NUM_STAGES],
}

/// Gradient of a scalar objective with respect to a [`ForwardOutput`].
#[derive(Debug, Clone)]
pub struct OutputGrad<T = f32> {
    pub logits: Option<Vec<T>>,
    pub features: [Option<Vec<T>>; NUM_STAGES],
}

impl<T> Default for OutputGrad<T> {
    fn default() -> Self {
        OutputGrad {
            logits: None,
            features: [None, None, None, None],
        }
    }
}

impl<T: Real> OutputGrad<T> {
    pub fn is_empty(&self) -> bool {
        self.logits.is_none() && self.features.iter().all(Option::is_none)
    }

    /// Add `other` into `self`, element-wise.
    pub fn merge(&mut self, other: OutputGrad<T>) {
        fn add<T: Real>(dst: &mut Option<Vec<T>>, src: Option<Vec<T>>) {
            match (dst.as_mut(), src) {
                (_, None) => {}
                (None, Some(s)) => *dst = Some(s),
                (Some(d), Some(s)) => d.iter_mut().zip(&s).for_each(|(a, &b)| *a += b),
            }
        }
        add(&mut self.logits, other.logits);
        for (d, s) in self.features.iter_mut().zip(other.features) {
            add(d, s);
        }
    }
}

/// A scalar function of the network output together with its gradient.
pub trait Objective<T: Real> {
    fn loss_and_grad(&self, out: &ForwardOutput<T>) -> Result<(f64, OutputGrad<T>)>;
}

impl<T: Real, F> Objective<T> for F
where
    F: Fn(&ForwardOutput<T>) -> Result<(f64, OutputGrad<T>)>,
{
    fn loss_and_grad(&self, out: &ForwardOutput<T>) -> Result<(f64, OutputGrad<T>)> {
        self(out)
    }
}

struct UnitCache<T> {
    input: Vec<T>,
    in_dims: Dims,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    act: Vec<T>,
}

/// Activations retained by a forward pass for the backward pass.
pub struct Tape<T = f32> {
    input_dims: Dims,
    units: Vec<UnitCache<T>>,
    head_input: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    units: [Unit; NUM_UNITS],
    head_offset: usize,
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let c = |k| cfg.stage_channels(k);
        let conv = |name, cin, cout| Unit {
            name,
            kind: Kind::Conv3,
            cin,
            cout,
            residual: cin == cout || cin == 1,
            offset: 0,
        };
        let down = |name, cin, cout| Unit {
            name,
            kind: Kind::Down,
            cin,
            cout,
            residual: false,
            offset: 0,
        };
        let up = |name, cin, cout| Unit {
            name,
            kind: Kind::Up,
            cin,
            cout,
            residual: false,
            offset: 0,
        };
        let mut units = [
            conv("enc1", cfg.in_channels, c(1)),
            down("down1", c(1), c(2)),
            conv("enc2", c(2), c(2)),
            down("down2", c(2), c(3)),
            conv("enc3", c(3), c(3)),
            down("down3", c(3), c(4)),
            conv("enc4", c(4), c(4)),
            conv("dec4", c(4), c(4)),
            up("up3", c(4), c(3)),
            conv("dec3", c(3), c(3)),
            up("up2", c(3), c(2)),
            conv("dec2", c(2), c(2)),
            up("up1", c(2), c(1)),
            conv("dec1", c(1), c(1)),
        ];
        let mut offset = 0;
        for u in &mut units {
            u.offset = offset;
            offset += u.tensor_count();
        }
        Ok(Network {
            cfg,
            units,
            head_offset: offset,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Parameter names and shapes, in storage order.
    pub fn manifest(&self) -> Vec<TensorInfo> {
        let mut out = Vec::with_capacity(self.head_offset + 2);
        for u in &self.units {
            out.push(TensorInfo {
                name: format!("{}.weight", u.name),
                shape: u.weight_shape(),
            });
            let extra: &[&str] = if u.normalized() { &["gamma", "beta"] } else { &["bias"] };
            for e in extra {
                out.push(TensorInfo {
                    name: format!("{}.{e}", u.name),
                    shape: vec![u.cout],
                });
            }
        }
        out.push(TensorInfo {
            name: "head.weight".into(),
            shape: vec![self.cfg.num_classes, self.cfg.base_channels],
        });
        out.push(TensorInfo {
            name: "head.bias".into(),
            shape: vec![self.cfg.num_classes],
        });
        out
    }

    /// He-normal conv weights, unit norm gains, zero shifts and biases.
    pub fn init<T: Real>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let manifest = self.manifest();
        let mut tensors = Vec::with_capacity(manifest.len());
        let normal = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<T> {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
        };
        for u in &self.units {
            let infos = &manifest[u.offset..u.offset + u.tensor_count()];
            for info in infos {
                let n: usize = info.shape.iter().product();
                let data = if info.name.ends_with(".weight") {
                    normal(n, (2.0 / u.fan_in() as f64).sqrt(), &mut rng)
                } else if info.name.ends_with(".gamma") {
                    vec![T::one(); n]
                } else {
                    vec![T::zero(); n]
                };
                tensors.push(ParamTensor {
                    name: info.name.clone(),
                    shape: info.shape.clone(),
                    data,
                });
            }
        }
        let c = self.cfg.num_classes;
        let f = self.cfg.base_channels;
        tensors.push(ParamTensor {
            name: "head.weight".into(),
            shape: vec![c, f],
            data: normal(c * f, (1.0 / f as f64).sqrt(), &mut rng),
        });
        tensors.push(ParamTensor {
            name: "head.bias".into(),
            shape: vec![c],
            data: vec![T::zero(); c],
        });
        ParamVector::new(tensors).expect("manifest shapes are consistent")
    }

    pub fn check_params<T: Real>(&self, params: &ParamVector<T>) -> Result<()> {
        let want = self.manifest();
        let got = params.manifest();
        if want == got {
            return Ok(());
        }
        let diff = manifest_diff(&want, &got);
        Err(Error::shape(format!("parameter manifest mismatch:\n{diff}")))
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let m = SIZE_MULTIPLE;
        let a = dims.as_array();
        if a.iter().all(|&v| v > 0 && v % m == 0) {
            return Ok(());
        }
        let padded = a.map(|v| v.div_ceil(m).max(1) * m);
        Err(Error::NotDivisible {
            dims: a,
            multiple: m,
            padded,
        })
    }

    pub fn forward<T: Real>(&self, params: &ParamVector<T>, x: &Volume) -> Result<ForwardOutput<T>> {
        self.check_params(params)?;
        self.check_input(x.dims())?;
        Ok(self.run(params, x, None))
    }

    /// Forward pass that also records what [`Network::backward`] needs.
    pub fn forward_taped<T: Real>(
        &self,
        params: &ParamVector<T>,
        x: &Volume,
    ) -> Result<(ForwardOutput<T>, Tape<T>)> {
        self.check_params(params)?;
        self.check_input(x.dims())?;
        let mut tape = Tape {
            input_dims: x.dims(),
            units: Vec::with_capacity(NUM_UNITS),
            head_input: Vec::new(),
        };
        let out = self.run(params, x, Some(&mut tape));
        Ok((out, tape))
    }

    /// Objective value and its exact gradient with respect to every parameter.
    pub fn gradients<T: Real, O: Objective<T> + ?Sized>(
        &self,
        params: &ParamVector<T>,
        x: &Volume,
        objective: &O,
    ) -> Result<(f64, ParamVector<T>)> {
        let (out, tape) = self.forward_taped(params, x)?;
        let (loss, grad) = objective.loss_and_grad(&out)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "objective",
                value: loss,
            });
        }
        let mut acc = params.zeros_like();
        self.backward(params, &tape, &grad, &mut acc)?;
        Ok((loss, acc))
    }

    fn run<T: Real>(&self, params: &ParamVector<T>, x: &Volume, mut tape: Option<&mut Tape<T>>) -> ForwardOutput<T> {
        let mut scratch = Vec::new();
        let l0 = x.dims();
        let l1 = l0.halved();
        let l2 = l1.halved();
        let l3 = l2.halved();
        let input: Vec<T> = x.data().iter().map(|&v| T::from_f64(v as f64)).collect();

        let mut unit = |u: usize, inp: Vec<T>, dims: Dims, tape: &mut Option<&mut Tape<T>>| {
            self.unit_forward(u, params, inp, dims, tape.as_deref_mut(), &mut scratch)
        };

        let e1 = unit(ENC1, input, l0, &mut tape);
        let a = unit(DOWN1, e1.clone(), l0, &mut tape);
        let e2 = unit(ENC2, a, l1, &mut tape);
        let a = unit(DOWN2, e2.clone(), l1, &mut tape);
        let e3 = unit(ENC3, a, l2, &mut tape);
        let a = unit(DOWN3, e3.clone(), l2, &mut tape);
        let e4 = unit(ENC4, a, l3, &mut tape);

        let d4 = unit(DEC4, e4, l3, &mut tape);
        let mut s = unit(UP3, d4.clone(), l3, &mut tape);
        add_into(&mut s, &e3);
        let d3 = unit(DEC3, s, l2, &mut tape);
        let mut s = unit(UP2, d3.clone(), l2, &mut tape);
        add_into(&mut s, &e2);
        let d2 = unit(DEC2, s, l1, &mut tape);
        let mut s = unit(UP1, d2.clone(), l1, &mut tape);
        add_into(&mut s, &e1);
        let d1 = unit(DEC1, s, l0, &mut tape);

        let c = self.cfg.num_classes;
        let f = self.cfg.base_channels;
        let n = l0.voxels();
        let hw = params.at(self.head_offset);
        let hb = params.at(self.head_offset + 1);
        let mut logits = vec![T::zero(); c * n];
        for (k, plane) in logits.chunks_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = hb[k]);
        }
        gemm(c, f, n, hw, false, &d1, false, &mut logits, true);
        if let Some(t) = tape.as_deref_mut() {
            t.head_input = d1.clone();
        }

        let fm = |stage, dims, ch, data| FeatureMap::new(stage, dims, ch, data).expect("consistent shape");
        ForwardOutput {
            logits: fm(0, l0, c, logits),
            decoder_features: [
                fm(1, l0, self.cfg.stage_channels(1), d1),
                fm(2, l1, self.cfg.stage_channels(2), d2),
                fm(3, l2, self.cfg.stage_channels(3), d3),
                fm(4, l3, self.cfg.stage_channels(4), d4),
            ],
        }
    }

    fn unit_forward<T: Real>(
        &self,
        u: usize,
        params: &ParamVector<T>,
        input: Vec<T>,
        in_dims: Dims,
        tape: Option<&mut Tape<T>>,
        scratch: &mut Vec<T>,
    ) -> Vec<T> {
        let spec = self.units[u];
        let o = spec.offset;
        let w = params.at(o);
        let (pre, out_dims) = match spec.kind {
            Kind::Conv3 => (conv3_forward(&input, spec.cin, spec.cout, in_dims, w, scratch), in_dims),
            Kind::Down => (
                down_forward(&input, spec.cin, spec.cout, in_dims, w, scratch),
                in_dims.halved(),
            ),
            Kind::Up => (
                up_forward(&input, spec.cin, spec.cout, in_dims, w, scratch),
                in_dims.doubled(),
            ),
        };
        let n = out_dims.voxels();
        let (mut act, xhat, inv_std) = if spec.normalized() {
            norm_forward(&pre, spec.cout, n, params.at(o + 1), params.at(o + 2))
        } else {
            let mut pre = pre;
            for (plane, &b) in pre.chunks_mut(n).zip(params.at(o + 1)) {
                plane.iter_mut().for_each(|v| *v += b);
            }
            (pre, Vec::new(), Vec::new())
        };
        act.iter_mut().for_each(|v| *v = elu(*v));
        let mut out = act.clone();
        if spec.residual {
            if spec.cin == spec.cout {
                add_into(&mut out, &input);
            } else {
                // single-channel input repeated over every output channel
                out.chunks_mut(n).for_each(|plane| add_into(plane, &input));
            }
        }
        if let Some(t) = tape {
            t.units.push(UnitCache {
                input,
                in_dims,
                xhat,
                inv_std,
                act,
            });
        }
        out
    }

    fn unit_backward<T: Real>(
        &self,
        u: usize,
        params: &ParamVector<T>,
        cache: &UnitCache<T>,
        grad_out: Vec<T>,
        acc: &mut ParamVector<T>,
        need_input_grad: bool,
        scratch: &mut Vec<T>,
    ) -> Option<Vec<T>> {
        let spec = self.units[u];
        let residual_grad = spec.residual.then(|| grad_out.clone());
        let mut g = grad_out;
        for (gv, &y) in g.iter_mut().zip(&cache.act) {
            *gv *= elu_grad_from_output(y);
        }
        let out_n = cache.act.len() / spec.cout;
        let o = spec.offset;
        if spec.normalized() {
            let mut gamma_grad = vec![T::zero(); spec.cout];
            let mut beta_grad = vec![T::zero(); spec.cout];
            g = norm_backward(
                g,
                &cache.xhat,
                &cache.inv_std,
                spec.cout,
                out_n,
                params.at(o + 1),
                &mut gamma_grad,
                &mut beta_grad,
            );
            add_into(acc.at_mut(o + 1), &gamma_grad);
            add_into(acc.at_mut(o + 2), &beta_grad);
        } else {
            let gb = acc.at_mut(o + 1);
            for (k, plane) in g.chunks(out_n).enumerate() {
                gb[k] += T::from_f64(plane.iter().map(|v| v.as_f64()).sum());
            }
        }

        let w = params.at(o);
        let gw = acc.at_mut(o);
        let d = cache.in_dims;
        let mut grad_in = match spec.kind {
            Kind::Conv3 => conv3_backward(&cache.input, spec.cin, spec.cout, d, w, &g, gw, need_input_grad, scratch),
            Kind::Down => Some(down_backward(&cache.input, spec.cin, spec.cout, d, w, &g, gw, scratch)),
            Kind::Up => Some(up_backward(&cache.input, spec.cin, spec.cout, d, w, &g, gw, scratch)),
        };
        if let (Some(gi), Some(r)) = (grad_in.as_mut(), residual_grad.as_ref()) {
            if spec.cin == spec.cout {
                add_into(gi, r);
            } else {
                r.chunks(out_n).for_each(|plane| add_into(gi, plane));
            }
        }
        grad_in
    }

    /// Accumulate parameter gradients of an objective into `acc`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamVector<T>,
        tape: &Tape<T>,
        grad: &OutputGrad<T>,
        acc: &mut ParamVector<T>,
    ) -> Result<()> {
        self.check_params(params)?;
        self.check_params(acc)?;
        if tape.units.len() != NUM_UNITS {
            return Err(Error::invalid("tape was not produced by a full taped forward pass"));
        }
        let l0 = tape.input_dims;
        let dims = [l0, l0.halved(), l0.halved().halved(), l0.halved().halved().halved()];
        for (k, g) in grad.features.iter().enumerate() {
            if let Some(g) = g {
                let want = self.cfg.stage_channels(k + 1) * dims[k].voxels();
                if g.len() != want {
                    return Err(Error::shape(format!(
                        "feature gradient for stage {} has {} values, expected {want}",
                        k + 1,
                        g.len()
                    )));
                }
            }
        }
        let c = self.cfg.num_classes;
        let f = self.cfg.base_channels;
        let n = l0.voxels();
        if let Some(g) = &grad.logits {
            if g.len() != c * n {
                return Err(Error::shape("logit gradient has the wrong length"));
            }
        }
        if grad.is_empty() {
            return Ok(());
        }

        let mut scratch = Vec::new();
        let feature_grad = |k: usize| -> Vec<T> {
            grad.features[k - 1]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.cfg.stage_channels(k) * dims[k - 1].voxels()])
        };

        // head
        let mut g_d1 = feature_grad(1);
        if let Some(gl) = &grad.logits {
            gemm(c, n, f, gl, false, &tape.head_input, true, acc.at_mut(self.head_offset), true);
            let gb = acc.at_mut(self.head_offset + 1);
            for (k, plane) in gl.chunks(n).enumerate() {
                gb[k] += T::from_f64(plane.iter().map(|v| v.as_f64()).sum());
            }
            gemm(f, c, n, params.at(self.head_offset), true, gl, false, &mut g_d1, true);
        }

        let mut step = |u: usize, g: Vec<T>, need: bool, acc: &mut ParamVector<T>| {
            self.unit_backward(u, params, &tape.units[u], g, acc, need, &mut scratch)
        };
        let must = |v: Option<Vec<T>>| v.expect("input gradient requested");

        // decoder, shallow to deep in reverse
        let g_s1 = must(step(DEC1, g_d1, true, acc));
        let mut g_e1 = g_s1.clone();
        let mut g_d2 = must(step(UP1, g_s1, true, acc));
        add_into(&mut g_d2, &feature_grad(2));
        let g_s2 = must(step(DEC2, g_d2, true, acc));
        let mut g_e2 = g_s2.clone();
        let mut g_d3 = must(step(UP2, g_s2, true, acc));
        add_into(&mut g_d3, &feature_grad(3));
        let g_s3 = must(step(DEC3, g_d3, true, acc));
        let mut g_e3 = g_s3.clone();
        let mut g_d4 = must(step(UP3, g_s3, true, acc));
        add_into(&mut g_d4, &feature_grad(4));
        let g_e4 = must(step(DEC4, g_d4, true, acc));

        // encoder
        let g_a3 = must(step(ENC4, g_e4, true, acc));
        add_into(&mut g_e3, &must(step(DOWN3, g_a3, true, acc)));
        let g_a2 = must(step(ENC3, g_e3, true, acc));
        add_into(&mut g_e2, &must(step(DOWN2, g_a2, true, acc)));
        let g_a1 = must(step(ENC2, g_e2, true, acc));
        add_into(&mut g_e1, &must(step(DOWN1, g_a1, true, acc)));
        step(ENC1, g_e1, false, acc);
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

/// Human-readable diff between two tensor manifests.
pub fn manifest_diff(want: &[TensorInfo], got: &[TensorInfo]) -> String {
    let mut lines = Vec::new();
    for w in want {
        match got.iter().find(|g| g.name == w.name) {
            None => lines.push(format!("  missing {} {:?}", w.name, w.shape)),
            Some(g) if g.shape != w.shape => {
                lines.push(format!("  {}: expected {:?}, found {:?}", w.name, w.shape, g.shape))
            }
            _ => {}
        }
    }
    for g in got {
        if !want.iter().any(|w| w.name == g.name) {
            lines.push(format!("  unexpected {} {:?}", g.name, g.shape));
        }
    }
    if lines.is_empty() && want.len() == got.len() {
        lines.push("  tensor order differs".into());
    }
    lines.join("\n")
}

/// Convenience: build a network and initialize parameters in one call.
pub fn init_network(cfg: NetworkConfig, seed: u64) -> Result<ParamVector> {
    Ok(Network::new(cfg)?.init(seed))
}
