//! Toy differentiable depth estimators, mask algebra, scene compositing, the
//! adversarial depth loss, and the mean relative shift ratio.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffkernel::{DifferentiableFn, FnBuilder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRole {
    Target,
    Adversarial,
}

/// Binary `[H, W]` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    data: Tensor,
    role: MaskRole,
}

impl Mask {
    pub fn new(data: Tensor, role: MaskRole) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "masks are [H, W], got shape {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be exactly 0 or 1"));
        }
        if role == MaskRole::Target && data.is_zero() {
            return Err(Error::invalid("target mask is empty"));
        }
        Ok(Self { data, role })
    }

    /// Axis-aligned box `[y0, y0+bh) × [x0, x0+bw)` clipped to the image.
    pub fn from_box(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize, role: MaskRole) -> Result<Self> {
        let mut data = Tensor::zeros(&[h, w]);
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                data.data_mut()[y * w + x] = 1.0;
            }
        }
        Self::new(data, role)
    }

    pub fn empty(h: usize, w: usize, role: MaskRole) -> Result<Self> {
        Self::new(Tensor::zeros(&[h, w]), role)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn with_role(&self, role: MaskRole) -> Result<Self> {
        Self::new(self.data.clone(), role)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn area(&self) -> usize {
        self.data.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.data.data()[y * self.width() + x] == 1.0
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.data
            .data()
            .iter()
            .zip(other.data.data())
            .all(|(a, b)| a * b == 0.0)
    }

    pub fn union(&self, other: &Mask) -> Result<Self> {
        let u = self.data.zip_map(&other.data, "mask union", f64::max)?;
        Self::new(u, self.role)
    }

    /// Mask repeated over `channels` leading planes, shape `[C, H, W]`.
    pub fn broadcast(&self, channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(self.data.data());
        }
        Tensor::new(&[channels, self.height(), self.width()], data).expect("broadcast shape")
    }

    /// Smallest box `(y0, x0, h, w)` containing the mask, if nonempty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (h, w) = (self.height(), self.width());
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..h {
            for x in 0..w {
                if self.contains(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb.map(|(y0, x0, y1, x1)| (y0, x0, y1 - y0 + 1, x1 - x0 + 1))
    }
}

fn check_mask_fits(img: &Tensor, m: &Mask, op: &str) -> Result<usize> {
    match img.shape() {
        [c, h, w] if *h == m.height() && *w == m.width() => Ok(*c),
        other => Err(Error::shape(op, &[0, m.height(), m.width()], other)),
    }
}

/// `z = x ⊙ (1 − M_A) + A ⊙ M_A`, the mask broadcast over channels.
pub fn compose_scene(x: &Tensor, a: &Tensor, m_a: &Mask) -> Result<Tensor> {
    x.same_shape(a, "compose_scene")?;
    let c = check_mask_fits(x, m_a, "compose_scene")?;
    let plane = m_a.height() * m_a.width();
    let m = m_a.tensor().data();
    let mut out = x.clone();
    for ch in 0..c {
        for p in 0..plane {
            if m[p] == 1.0 {
                out.data_mut()[ch * plane + p] = a.data()[ch * plane + p];
            }
        }
    }
    Ok(out)
}

/// An image with its target and attacker-controlled regions.
#[derive(Clone, Debug)]
pub struct Scene {
    pub x: Tensor,
    pub target: Mask,
    pub adversarial: Mask,
    pub z: Option<Tensor>,
}

impl Scene {
    pub fn new(x: Tensor, target: Mask, adversarial: Mask) -> Result<Self> {
        check_mask_fits(&x, &target, "scene")?;
        check_mask_fits(&x, &adversarial, "scene")?;
        if !target.is_disjoint(&adversarial) {
            return Err(Error::invalid("target and adversarial masks overlap"));
        }
        Ok(Self {
            x,
            target,
            adversarial,
            z: None,
        })
    }

    /// Composites `a` into the adversarial region and stores the result.
    pub fn insert(&mut self, a: &Tensor) -> Result<&Tensor> {
        let z = compose_scene(&self.x, a, &self.adversarial)?;
        Ok(self.z.insert(z))
    }

    /// `A = z ⊙ M_A`.
    pub fn object(&self) -> Option<Tensor> {
        let z = self.z.as_ref()?;
        let m = self.adversarial.broadcast(z.shape()[0]);
        Some(z.mul(&m).expect("scene shapes agree"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VictimKind {
    PatchPool,
    TinyConv,
}

impl fmt::Display for VictimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VictimKind::PatchPool => "patch_pool",
            VictimKind::TinyConv => "tiny_conv",
        })
    }
}

impl FromStr for VictimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_pool" => Ok(VictimKind::PatchPool),
            "tiny_conv" => Ok(VictimKind::TinyConv),
            other => Err(Error::parse("victim kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// Wiring that makes target-region depth depend mostly on one source patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Planted {
    /// Source square `(y0, x0, side)`.
    pub source: (usize, usize, usize),
    /// Target box `(y0, x0, h, w)`.
    pub target: (usize, usize, usize, usize),
    /// Total weight from the source patch mean onto each target pixel.
    pub gain: f64,
    /// Factor applied to the ordinary weights of target pixels.
    pub damp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VictimSpec {
    pub kind: VictimKind,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the local receptive field (odd).
    pub receptive_field: usize,
    pub local_gain: f64,
    /// Weight on the global image mean, shared by every output pixel.
    pub context_gain: f64,
    /// Depth reported for a zero image; must exceed `ln 2`.
    pub offset: f64,
    pub planted: Option<Planted>,
}

impl Default for VictimSpec {
    fn default() -> Self {
        Self {
            kind: VictimKind::PatchPool,
            seed: 0,
            channels: 1,
            height: 16,
            width: 16,
            receptive_field: 5,
            local_gain: 1.0,
            context_gain: 0.5,
            offset: 1.0,
            planted: None,
        }
    }
}

/// Image `[C, H, W]` → strictly positive depth `[H, W]`.
#[derive(Clone, Debug)]
pub struct VictimModel {
    spec: VictimSpec,
    graph: DifferentiableFn,
    label: Option<String>,
}

impl VictimModel {
    /// Wraps an arbitrary depth graph `[C, H, W]` → `[H, W]`. Only the shape
    /// fields of the resulting spec are meaningful.
    pub fn custom(graph: DifferentiableFn, label: impl Into<String>) -> Result<Self> {
        let ins = graph.input_shapes();
        if ins.len() != 1 || ins[0].len() != 3 {
            return Err(Error::invalid("a depth graph takes one [C, H, W] image"));
        }
        let (c, h, w) = (ins[0][0], ins[0][1], ins[0][2]);
        if graph.output_shape() != [h, w] {
            return Err(Error::shape("custom victim", &[h, w], graph.output_shape()));
        }
        Ok(Self {
            spec: VictimSpec { channels: c, height: h, width: w, ..VictimSpec::default() },
            graph,
            label: Some(label.into()),
        })
    }

    pub fn spec(&self) -> &VictimSpec {
        &self.spec
    }

    pub fn graph(&self) -> &DifferentiableFn {
        &self.graph
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.spec.channels, self.spec.height, self.spec.width]
    }

    pub fn depth(&self, img: &Tensor) -> Result<Tensor> {
        self.graph.evaluate(&[img])
    }

    pub fn describe(&self) -> String {
        if let Some(l) = &self.label {
            return format!("{l}({}x{}x{})", self.spec.channels, self.spec.height, self.spec.width);
        }
        let s = &self.spec;
        let planted = match &s.planted {
            Some(p) => format!(
                ", planted source={:?} target={:?} gain={} damp={}",
                p.source, p.target, p.gain, p.damp
            ),
            None => String::new(),
        };
        format!(
            "{}(seed={}, {}x{}x{}, rf={}{planted})",
            s.kind, s.seed, s.channels, s.height, s.width, s.receptive_field
        )
    }
}

pub fn make_victim(spec: &VictimSpec) -> Result<VictimModel> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("victim geometry has a zero extent"));
    }
    if spec.receptive_field % 2 == 0 || spec.receptive_field > h.min(w) {
        return Err(Error::invalid(format!(
            "receptive field {} must be odd and fit in {h}x{w}",
            spec.receptive_field
        )));
    }
    if !(spec.offset > std::f64::consts::LN_2) {
        return Err(Error::invalid(format!(
            "offset {} must exceed ln 2 to keep depth positive",
            spec.offset
        )));
    }
    let (n_out, n_in) = (h * w, c * h * w);
    let mut damp = vec![1.0; n_out];
    let mut extra = vec![spec.context_gain / n_in as f64; n_out * n_in];
    if let Some(p) = &spec.planted {
        let (sy, sx, side) = p.source;
        let (ty, tx, th, tw) = p.target;
        if side == 0 || sy + side > h || sx + side > w || th == 0 || tw == 0 || ty + th > h || tx + tw > w {
            return Err(Error::invalid(format!(
                "planted geometry {p:?} does not fit a {h}x{w} image"
            )));
        }
        let overlap = sy < ty + th && ty < sy + side && sx < tx + tw && tx < sx + side;
        if overlap {
            return Err(Error::invalid("planted source overlaps its target"));
        }
        let per_pixel = p.gain / (c * side * side) as f64;
        for y in ty..ty + th {
            for x in tx..tx + tw {
                let row = y * w + x;
                damp[row] = p.damp;
                for ch in 0..c {
                    for yy in sy..sy + side {
                        for xx in sx..sx + side {
                            extra[row * n_in + (ch * h + yy) * w + xx] += per_pixel;
                        }
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = FnBuilder::new();
    let img = b.input(&[c, h, w]);
    let flat = b.flatten(img);
    let pre = match spec.kind {
        VictimKind::PatchPool => {
            let r = spec.receptive_field / 2;
            let scale = spec.local_gain / ((c * spec.receptive_field * spec.receptive_field) as f64).sqrt();
            let mut dense = extra;
            for y in 0..h {
                for x in 0..w {
                    let row = y * w + x;
                    for ch in 0..c {
                        for dy in 0..spec.receptive_field {
                            for dx in 0..spec.receptive_field {
                                let g: f64 = StandardNormal.sample(&mut rng);
                                let (yy, xx) = ((y + dy) as isize - r as isize, (x + dx) as isize - r as isize);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let col = (ch * h + yy as usize) * w + xx as usize;
                                dense[row * n_in + col] += damp[row] * scale * g;
                            }
                        }
                    }
                }
            }
            let wn = b.constant(Tensor::new(&[n_out, n_in], dense)?);
            b.matmul(wn, flat)?
        }
        VictimKind::TinyConv => {
            let hidden = 4;
            let k1 = Tensor::randn(&[hidden, c, 3, 3], &mut rng).scale(1.0 / ((9 * c) as f64).sqrt());
            let k2 = Tensor::randn(&[1, hidden, 3, 3], &mut rng)
                .scale(spec.local_gain / ((9 * hidden) as f64).sqrt());
            let k1n = b.constant(k1);
            let k2n = b.constant(k2);
            let h1 = b.conv2d(img, k1n)?;
            let h1 = b.tanh(h1);
            let h2 = b.conv2d(h1, k2n)?;
            let local = b.flatten(h2);
            let dn = b.constant(Tensor::vector(damp));
            let local = b.mul(local, dn)?;
            let en = b.constant(Tensor::new(&[n_out, n_in], extra)?);
            let ctx = b.matmul(en, flat)?;
            b.add(local, ctx)?
        }
    };
    let sp = b.softplus(pre);
    let depth = b.shift(sp, spec.offset - std::f64::consts::LN_2);
    let depth = b.reshape(depth, &[h, w])?;
    Ok(VictimModel {
        spec: spec.clone(),
        graph: b.build(depth)?,
        label: None,
    })
}

fn check_target(m_t: &Mask) -> Result<()> {
    if m_t.area() == 0 {
        return Err(Error::invalid("target mask is empty"));
    }
    Ok(())
}

/// `f(img) ⊙ M_T`.
pub fn masked_depth(f: &VictimModel, img: &Tensor, m_t: &Mask) -> Result<Tensor> {
    check_target(m_t)?;
    check_mask_fits(img, m_t, "masked_depth")?;
    f.depth(img)?.mul(m_t.tensor())
}

/// Builds `z ↦ ‖f(z') ⊙ M_T − λ·f(x) ⊙ M_T‖²`, where `z' = z` or, when
/// `m_a` is given, `z' = compose(x, z, M_A)` so that pixels outside `M_A`
/// carry no gradient.
pub fn adv_loss_fn(
    f: &VictimModel,
    x: &Tensor,
    m_t: &Mask,
    m_a: Option<&Mask>,
    lambda: f64,
) -> Result<(DifferentiableFn, Tensor)> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let reference = masked_depth(f, x, m_t)?;
    let graph = depth_goal_fn(f, x, m_t, m_a, &reference.scale(lambda))?;
    Ok((graph, reference))
}

/// `z ↦ ‖f(compose(base, z, M_A)) ⊙ M_T − goal‖²`, with `goal` already masked.
pub fn depth_goal_fn(
    f: &VictimModel,
    base: &Tensor,
    m_t: &Mask,
    m_a: Option<&Mask>,
    goal: &Tensor,
) -> Result<DifferentiableFn> {
    check_target(m_t)?;
    check_mask_fits(base, m_t, "adv_loss")?;
    let mut b = FnBuilder::new();
    let z = b.input(base.shape());
    let candidate = match m_a {
        Some(m) => {
            let c = check_mask_fits(base, m, "adv_loss")?;
            let mb = m.broadcast(c);
            let keep = base.mul(&mb.map(|v| 1.0 - v))?;
            let mn = b.constant(mb);
            let kn = b.constant(keep);
            let inside = b.mul(z, mn)?;
            b.add(inside, kn)?
        }
        None => z,
    };
    let depth = b.call(f.graph(), &[candidate])?;
    let mt = b.constant(m_t.tensor().clone());
    let masked = b.mul(depth, mt)?;
    let goal = b.constant(goal.clone());
    let diff = b.sub(masked, goal)?;
    let loss = b.sum_squares(diff);
    b.build(loss)
}

/// `‖f_{M_T}(z) − λ·f_{M_T}(x)‖²`.
pub fn adv_loss(f: &VictimModel, x: &Tensor, z: &Tensor, m_t: &Mask, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    x.same_shape(z, "adv_loss")?;
    let dz = masked_depth(f, z, m_t)?;
    let dx = masked_depth(f, x, m_t)?;
    let diff = dz.axpy(-lambda, &dx)?;
    diff.dot(&diff)
}

/// Signed ratio `Σ_{M_T}(d_z − d_x) / Σ_{M_T} d_x` from precomputed depths.
pub fn mrsr_from_depths(dx: &Tensor, dz: &Tensor, m_t: &Mask) -> Result<f64> {
    check_target(m_t)?;
    dx.same_shape(dz, "mrsr")?;
    dx.same_shape(m_t.tensor(), "mrsr")?;
    let m = m_t.tensor().data();
    let (mut num, mut den) = (0.0, 0.0);
    for ((a, b), mv) in dx.data().iter().zip(dz.data()).zip(m) {
        if *mv == 1.0 {
            num += b - a;
            den += a;
        }
    }
    if !(den > 0.0) {
        return Err(Error::invalid("reference depth over the target sums to zero"));
    }
    Ok(num / den)
}

/// `Σ_{M_T}|d_z − d_x| / Σ_{M_T} d_x`, immune to sign cancellation.
pub fn mrsr_abs_from_depths(dx: &Tensor, dz: &Tensor, m_t: &Mask) -> Result<f64> {
    check_target(m_t)?;
    dx.same_shape(dz, "mrsr")?;
    dx.same_shape(m_t.tensor(), "mrsr")?;
    let m = m_t.tensor().data();
    let (mut num, mut den) = (0.0, 0.0);
    for ((a, b), mv) in dx.data().iter().zip(dz.data()).zip(m) {
        if *mv == 1.0 {
            num += (b - a).abs();
            den += a;
        }
    }
    if !(den > 0.0) {
        return Err(Error::invalid("reference depth over the target sums to zero"));
    }
    Ok(num / den)
}

pub fn mrsr(f: &VictimModel, x: &Tensor, z: &Tensor, m_t: &Mask) -> Result<f64> {
    x.same_shape(z, "mrsr")?;
    mrsr_from_depths(&f.depth(x)?, &f.depth(z)?, m_t)
}

pub fn mrsr_abs(f: &VictimModel, x: &Tensor, z: &Tensor, m_t: &Mask) -> Result<f64> {
    x.same_shape(z, "mrsr")?;
    mrsr_abs_from_depths(&f.depth(x)?, &f.depth(z)?, m_t)
}

/// Clips to `[0, 1]` and rounds to the nearest of 256 levels.
pub fn quantize_roundtrip(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Shared handle used by energies and the pipeline.
pub type SharedVictim = Arc<VictimModel>;
