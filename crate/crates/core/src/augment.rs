//! The fourteen augmentation operations, each parameterized by a magnitude
//! `μ ∈ [0, 1]` where zero means "no change".
//!
//! Geometric operations are affine warps with bilinear sampling and are
//! exactly differentiable in `μ`. Colour blends and the sigmoid-gated
//! solarize are smooth in `μ`. Posterize, Equalize and AutoContrast are
//! computed exactly on the forward pass and differentiated through a
//! surrogate (straight-through estimator).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Sharpness of the soft solarize gate.
const SOLARIZE_SHARPNESS: f64 = 50.0;
/// The solarize threshold sweeps from `1 + margin` down to `−margin`, so the
/// gate is fully closed at zero magnitude and fully open at one.
const SOLARIZE_MARGIN: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Invert,
    AutoContrast,
    Equalize,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::Invert,
        OpKind::AutoContrast,
        OpKind::Equalize,
        OpKind::Solarize,
        OpKind::Color,
        OpKind::Posterize,
        OpKind::Contrast,
        OpKind::Brightness,
        OpKind::Sharpness,
    ];

    /// The eleven operations with a magnitude parameter, in [`OpKind::ALL`]
    /// order.
    pub fn with_magnitude() -> impl Iterator<Item = OpKind> {
        Self::ALL.into_iter().filter(|k| k.has_magnitude())
    }

    pub fn has_magnitude(self) -> bool {
        !matches!(self, OpKind::Invert | OpKind::AutoContrast | OpKind::Equalize)
    }

    /// Position in [`OpKind::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("ALL lists every op")
    }

    /// Position among the magnitude-bearing ops, if any.
    pub fn magnitude_index(self) -> Option<usize> {
        self.has_magnitude()
            .then(|| Self::with_magnitude().position(|k| k == self).expect("listed"))
    }

    /// Upper end of the native magnitude range (the lower end is zero).
    pub fn native_max(self) -> f64 {
        match self {
            OpKind::ShearX | OpKind::ShearY => 0.3,
            OpKind::TranslateX | OpKind::TranslateY => 0.45,
            OpKind::Rotate => 30.0,
            OpKind::Solarize => 256.0,
            OpKind::Posterize => 4.0,
            OpKind::Color | OpKind::Contrast | OpKind::Brightness | OpKind::Sharpness => 2.0,
            OpKind::Invert | OpKind::AutoContrast | OpKind::Equalize => 0.0,
        }
    }

    /// Maps `μ ∈ [0, 1]` into the native range: shear factor, fraction of
    /// the image side, degrees, solarize threshold drop (out of 256), bits
    /// removed, or blend factor.
    pub fn native_magnitude(self, mu: f64) -> f64 {
        self.native_max() * mu
    }

    /// Whether the μ-gradient is exact (as opposed to straight-through).
    pub fn is_smooth(self) -> bool {
        !matches!(self, OpKind::Posterize | OpKind::Equalize | OpKind::AutoContrast)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Rotate => "Rotate",
            OpKind::Invert => "Invert",
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Equalize => "Equalize",
            OpKind::Solarize => "Solarize",
            OpKind::Color => "Color",
            OpKind::Posterize => "Posterize",
            OpKind::Contrast => "Contrast",
            OpKind::Brightness => "Brightness",
            OpKind::Sharpness => "Sharpness",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown augmentation op `{s}`")))
    }
}

fn check_batch(x: &Tensor) -> Result<()> {
    if x.shape().len() != 4 {
        return Err(Error::shape("augment", &[x.shape()]));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("image value {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_unit_scalar(t: &Tensor, what: &str) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::InvalidInput(format!("{what} must be a scalar, got shape {:?}", t.shape())));
    }
    let v = t.data()[0];
    if v.is_nan() {
        return Err(Error::NonFinite(format!("{what} is NaN")));
    }
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidInput(format!("{what} {v} outside [0, 1]")));
    }
    Ok(v)
}

/// Applies `kind` with magnitude `mu` (a scalar tensor) to a `(B, C, H, W)`
/// batch with values in `[0, 1]`. The result is clamped to `[0, 1]`.
///
/// `mu` is ignored by Invert, AutoContrast and Equalize.
pub fn apply_op(kind: OpKind, x: &Tensor, mu: &Tensor) -> Result<Tensor> {
    check_batch(x)?;
    if kind.has_magnitude() {
        check_unit_scalar(mu, "magnitude")?;
    }
    let mu = mu.reshape(&[])?;
    let out = match kind {
        OpKind::ShearX | OpKind::ShearY | OpKind::TranslateX | OpKind::TranslateY | OpKind::Rotate => {
            warp(kind, x, &mu)?
        }
        OpKind::Invert => x.neg().offset(1.0),
        OpKind::AutoContrast => straight_through(|x, _| autocontrast_exact(x), |x, _| Ok(x.clone()), x, &mu)?,
        OpKind::Equalize => straight_through(|x, _| equalize_exact(x), |x, _| Ok(x.clone()), x, &mu)?,
        OpKind::Solarize => solarize(x, &mu)?,
        OpKind::Posterize => straight_through(posterize_exact, posterize_surrogate, x, &mu)?,
        OpKind::Color => blend(x, &grayscale(x)?, &mu)?,
        OpKind::Contrast => {
            let gray = grayscale(x)?;
            let b = x.shape()[0];
            let n = (gray.numel() / b.max(1)) as f64;
            let mean = gray.sum_to(&[b, 1, 1, 1])?.scale(1.0 / n);
            blend(x, &mean, &mu)?
        }
        OpKind::Brightness => blend(x, &Tensor::scalar(0.0), &mu)?,
        OpKind::Sharpness => blend(x, &smoothed(x)?, &mu)?,
    };
    Ok(out.clamp(0.0, 1.0))
}

/// `x + m (variant − x)` with `m = 2μ`.
fn blend(x: &Tensor, variant: &Tensor, mu: &Tensor) -> Result<Tensor> {
    let m = mu.scale(2.0);
    x.add(&variant.sub(x)?.mul(&m)?)
}

/// ITU-R 601 luma, shape `(B, 1, H, W)`; a one-channel image is its own luma.
fn grayscale(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    match s[1] {
        1 => Ok(x.clone()),
        3 => {
            let w = Tensor::new(&[1, 3, 1, 1], vec![0.299, 0.587, 0.114])?;
            x.mul(&w)?.sum_to(&[s[0], 1, s[2], s[3]])
        }
        c => Err(Error::InvalidInput(format!("colour ops need 1 or 3 channels, got {c}"))),
    }
}

/// PIL's SMOOTH kernel on the interior; border pixels keep their values.
fn smoothed(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < 3 || w < 3 {
        return Ok(x.clone());
    }
    let mut k = vec![1.0 / 13.0; 9];
    k[4] = 5.0 / 13.0;
    let kernel = Tensor::new(&[1, 1, 3, 3], k)?;
    let planes = x.reshape(&[b * c, 1, h, w])?;
    let blurred = planes.conv2d(&kernel, 1)?.reshape(&s)?;
    let mut mask = vec![0.0; h * w];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            mask[i * w + j] = 1.0;
        }
    }
    let mask = Tensor::new(&[1, 1, h, w], mask)?;
    // x + mask·(blurred − x)
    x.add(&blurred.sub(x)?.mul(&mask)?)
}

/// Soft inversion of pixels above a threshold that falls with `μ`.
fn solarize(x: &Tensor, mu: &Tensor) -> Result<Tensor> {
    let c = SOLARIZE_MARGIN;
    let threshold = mu.neg().offset(1.0).scale(1.0 + 2.0 * c).offset(-c);
    let gate = x.sub(&threshold)?.scale(SOLARIZE_SHARPNESS).sigmoid();
    x.add(&gate.mul(&x.scale(-2.0).offset(1.0))?)
}

/// Output pixel centres relative to the image centre.
fn centred_grid(h: usize, w: usize) -> (Tensor, Tensor) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            xs.push(j as f64 - cx);
            ys.push(i as f64 - cy);
        }
    }
    (
        Tensor::new(&[h, w], xs).expect("grid size"),
        Tensor::new(&[h, w], ys).expect("grid size"),
    )
}

/// Inverse-mapped sampling positions for each output pixel. Rotation is
/// about the image centre; translation moves content towards the origin.
fn warp(kind: OpKind, x: &Tensor, mu: &Tensor) -> Result<Tensor> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (xc, yc) = centred_grid(h, w);
    let (sx, sy) = match kind {
        OpKind::ShearX => (xc.add(&yc.mul(&mu.scale(kind.native_max()))?)?, yc),
        OpKind::ShearY => {
            let sy = yc.add(&xc.mul(&mu.scale(kind.native_max()))?)?;
            (xc, sy)
        }
        OpKind::TranslateX => (xc.add(&mu.scale(kind.native_max() * w as f64))?, yc),
        OpKind::TranslateY => {
            let sy = yc.add(&mu.scale(kind.native_max() * h as f64))?;
            (xc, sy)
        }
        OpKind::Rotate => {
            let angle = mu.scale(kind.native_max().to_radians());
            let (cos, sin) = (angle.cos(), angle.sin());
            let sx = xc.mul(&cos)?.add(&yc.mul(&sin)?)?;
            let sy = yc.mul(&cos)?.sub(&xc.mul(&sin)?)?;
            (sx, sy)
        }
        _ => unreachable!("not a geometric op"),
    };
    x.grid_sample(&sx.offset(cx), &sy.offset(cy))
}

/// Forward value of `exact`, gradient of `surrogate`.
///
/// Computed as `exact + (surrogate − SG(surrogate))`, whose value is
/// exactly `exact` since `s − s = 0` in floating point.
pub fn straight_through(
    exact: impl FnOnce(&Tensor, f64) -> Result<Tensor>,
    surrogate: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    x: &Tensor,
    mu: &Tensor,
) -> Result<Tensor> {
    let s = surrogate(x, mu)?;
    let e = exact(&x.detach(), mu.data().first().copied().unwrap_or(0.0))?;
    if e.shape() != s.shape() {
        return Err(Error::shape("straight_through", &[e.shape(), s.shape()]));
    }
    e.add(&s.sub(&s.detach())?)
}

fn to_level(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Bits kept by posterize at magnitude `μ`.
pub fn posterize_bits(mu: f64) -> u32 {
    (8.0 - OpKind::Posterize.native_magnitude(mu)).round().max(1.0) as u32
}

fn posterize_exact(x: &Tensor, mu: f64) -> Result<Tensor> {
    let bits = posterize_bits(mu);
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    Ok(x.map_detached(|v| f64::from(to_level(v) & mask) / 255.0))
}

/// Mean quantization loss when `4μ` low bits are dropped:
/// `x − (2^{4μ} − 1) / 510`.
fn posterize_surrogate(x: &Tensor, mu: &Tensor) -> Result<Tensor> {
    let drop = mu
        .scale(OpKind::Posterize.native_max() * std::f64::consts::LN_2)
        .exp()
        .offset(-1.0)
        .scale(1.0 / 510.0);
    x.sub(&drop)
}

fn per_plane(x: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let s = x.shape();
    let n = s[2] * s[3];
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        f(src, dst);
    }
    Tensor::new(s, out).expect("same shape")
}

/// Stretches each channel of each image to span `[0, 1]`.
fn autocontrast_exact(x: &Tensor) -> Result<Tensor> {
    Ok(per_plane(x, |src, dst| {
        let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 {
            dst.copy_from_slice(src);
        } else {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - lo) / (hi - lo);
            }
        }
    }))
}

/// Histogram equalization per channel of each image on 8-bit levels,
/// following PIL's lookup-table construction.
fn equalize_exact(x: &Tensor) -> Result<Tensor> {
    Ok(per_plane(x, |src, dst| {
        let levels: Vec<u8> = src.iter().map(|&v| to_level(v)).collect();
        let mut hist = [0usize; 256];
        for &l in &levels {
            hist[l as usize] += 1;
        }
        let last = hist.iter().rposition(|&c| c > 0).map_or(0, |i| hist[i]);
        let step = (levels.len() - last) / 255;
        if step == 0 {
            for (d, &l) in dst.iter_mut().zip(&levels) {
                *d = f64::from(l) / 255.0;
            }
            return;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, &count) in hist.iter().enumerate() {
            lut[i] = (n / step).min(255) as u8;
            n += count;
        }
        for (d, &l) in dst.iter_mut().zip(&levels) {
            *d = f64::from(lut[l as usize]) / 255.0;
        }
    }))
}

/// Standard logistic noise `ln U − ln(1 − U)`, one value per image.
pub fn logistic_noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| logistic(&mut rng)).collect()
}

pub(crate) fn logistic(rng: &mut impl Rng) -> f64 {
    let u: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    u.ln() - (-u).ln_1p()
}

/// Relaxed Bernoulli gate `sigmoid((logit p + L) / τ_b)`, shape `(B, 1, 1, 1)`.
pub fn relaxed_bernoulli(p: &Tensor, logistic: &[f64], tau: f64) -> Result<Tensor> {
    let p = p.reshape(&[])?;
    let logit = p.log().sub(&p.neg().offset(1.0).log())?;
    let noise = Tensor::new(&[logistic.len(), 1, 1, 1], logistic.to_vec())?;
    Ok(noise.add(&logit)?.scale(1.0 / tau).sigmoid())
}

/// `b̃·O(x; μ) + (1 − b̃)·x` with a relaxed Bernoulli `b̃` per image, drawn
/// from `logistic` (one standard logistic sample per image).
pub fn apply_with_probability_noise(
    kind: OpKind,
    x: &Tensor,
    mu: &Tensor,
    p: &Tensor,
    tau: f64,
    logistic: &[f64],
) -> Result<Tensor> {
    let pv = p.data().first().copied().unwrap_or(f64::NAN);
    if p.numel() != 1 || !(pv > 0.0 && pv < 1.0) {
        return Err(Error::InvalidInput(format!("probability must be a scalar in (0, 1), got {pv}")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    if x.shape().first() != Some(&logistic.len()) {
        return Err(Error::InvalidInput(format!(
            "{} noise values for a batch of shape {:?}",
            logistic.len(),
            x.shape()
        )));
    }
    let op = apply_op(kind, x, mu)?;
    let gate = relaxed_bernoulli(p, logistic, tau)?;
    Ok(x.add(&op.sub(x)?.mul(&gate)?)?.clamp(0.0, 1.0))
}

/// [`apply_with_probability_noise`] with noise drawn from `seed`.
pub fn apply_with_probability(
    kind: OpKind,
    x: &Tensor,
    mu: &Tensor,
    p: &Tensor,
    tau: f64,
    seed: u64,
) -> Result<Tensor> {
    let b = x.shape().first().copied().unwrap_or(0);
    apply_with_probability_noise(kind, x, mu, p, tau, &logistic_noise(seed, b))
}
