//! Ego-centered occupancy grids and the rigid warps that move the ego to
//! its anticipated pose (and back).
//!
//! Pixel `(row, col)` has its center at continuous coordinates `(row, col)`.
//! The ego faces up: forward is `-row`, left is `-col`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kinematics::PoseDelta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    Ego,
    Occupancy,
    Map,
}

impl ChannelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelRole::Ego => "ego",
            ChannelRole::Occupancy => "occupancy",
            ChannelRole::Map => "map",
        }
    }
}

impl fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ego" => Ok(ChannelRole::Ego),
            "occupancy" => Ok(ChannelRole::Occupancy),
            "map" => Ok(ChannelRole::Map),
            other => Err(Error::invalid(format!("unknown channel role `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueMode {
    Real,
    Binary,
}

impl ValueMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueMode::Real => "real",
            ValueMode::Binary => "binary",
        }
    }
}

impl fmt::Display for ValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(ValueMode::Real),
            "binary" => Ok(ValueMode::Binary),
            other => Err(Error::invalid(format!("unknown value mode `{other}`"))),
        }
    }
}

/// Resampling kernel for warps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interp {
    #[default]
    Bilinear,
    /// Rounds half away from zero; keeps binary frames binary.
    Nearest,
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interp::Bilinear),
            "nearest" => Ok(Interp::Nearest),
            other => Err(Error::invalid(format!("unknown interpolation `{other}`"))),
        }
    }
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interp::Bilinear => "bilinear",
            Interp::Nearest => "nearest",
        })
    }
}

/// Everything about a frame except its pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub roles: Vec<ChannelRole>,
    /// `(row, col)` of the ego reference point.
    pub anchor: [usize; 2],
    pub meters_per_pixel: f64,
    pub mode: ValueMode,
}

impl GridSpec {
    pub fn c(&self) -> usize {
        self.roles.len()
    }

    pub fn len(&self) -> usize {
        self.c() * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c(), self.h, self.w]
    }

    pub fn channels_with(&self, role: ChannelRole) -> Vec<usize> {
        (0..self.c()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.roles.is_empty() {
            return Err(Error::invalid(format!(
                "empty grid {}×{}×{}",
                self.h,
                self.w,
                self.c()
            )));
        }
        if self.anchor[0] >= self.h || self.anchor[1] >= self.w {
            return Err(Error::invalid(format!(
                "ego anchor {:?} outside {}×{} grid",
                self.anchor, self.h, self.w
            )));
        }
        if !(self.meters_per_pixel > 0.0) || !self.meters_per_pixel.is_finite() {
            return Err(Error::invalid(format!(
                "meters per pixel must be positive, got {}",
                self.meters_per_pixel
            )));
        }
        Ok(())
    }

    /// The same grid grown by `pad` pixels on every side.
    pub fn padded(&self, pad: usize) -> GridSpec {
        GridSpec {
            h: self.h + 2 * pad,
            w: self.w + 2 * pad,
            anchor: [self.anchor[0] + pad, self.anchor[1] + pad],
            ..self.clone()
        }
    }
}

/// One occupancy frame, channel-major `[c][h][w]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ogm {
    pub grid: GridSpec,
    data: Vec<f32>,
}

impl Ogm {
    pub fn zeros(grid: GridSpec) -> Self {
        let data = vec![0.0; grid.len()];
        Self { grid, data }
    }

    pub fn new(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::Shape {
                op: "ogm",
                left: format!("{:?}", grid.shape()),
                right: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "occupancy value {v} outside [0, 1]"
            )));
        }
        Ok(Self { grid, data })
    }

    /// Builds a frame clipping every value into `[0, 1]`; NaN reads as 0.
    pub fn from_clipped(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(clip_unit).collect();
        Self::new(grid, data)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.grid.h * self.grid.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.grid.h * self.grid.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.grid.h + row) * self.grid.w + col]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f32) {
        let (h, w) = (self.grid.h, self.grid.w);
        self.data[(ch * h + row) * w + col] = clip_unit(v);
    }

    pub fn ego_channels(&self) -> Vec<usize> {
        self.grid.channels_with(ChannelRole::Ego)
    }

    /// Total value of one channel.
    pub fn mass(&self, ch: usize) -> f64 {
        self.channel(ch).iter().map(|&v| f64::from(v)).sum()
    }

    /// Value-weighted `(row, col)` centroid of one channel, if it has mass.
    pub fn centroid(&self, ch: usize) -> Option<[f64; 2]> {
        mass_centroid(self.channel(ch), self.grid.w, |_, _| true)
    }

    /// Copies channel `ch` of `other` over this frame's channel `ch`.
    pub fn copy_channel_from(&mut self, other: &Ogm, ch: usize) -> Result<()> {
        self.check_same(other, "copy_channel")?;
        self.channel_mut(ch).copy_from_slice(other.channel(ch));
        Ok(())
    }

    pub(crate) fn check_same(&self, other: &Ogm, op: &'static str) -> Result<()> {
        if self.grid.shape() != other.grid.shape() {
            return Err(Error::Shape {
                op,
                left: format!("{:?}", self.grid.shape()),
                right: format!("{:?}", other.grid.shape()),
            });
        }
        Ok(())
    }

    /// Thresholds at 0.5 when the grid is binary.
    pub fn binarized(mut self) -> Self {
        if self.grid.mode == ValueMode::Binary {
            self.data
                .iter_mut()
                .for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
        }
        self
    }
}

/// Value-weighted centroid over the pixels accepted by `keep(row, col)`.
pub fn mass_centroid(
    plane: &[f32],
    w: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> Option<[f64; 2]> {
    let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
    for (i, &v) in plane.iter().enumerate() {
        let (row, col) = (i / w, i % w);
        if v > 0.0 && keep(row, col) {
            let v = f64::from(v);
            m += v;
            r += v * row as f64;
            c += v * col as f64;
        }
    }
    (m > 0.0).then(|| [r / m, c / m])
}

pub(crate) fn clip_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Rigid map `T(q) = pivot + R(dtheta)·(q − pivot) + dp` in pixel space,
/// where `R` turns counter-clockwise as displayed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpSpec {
    pub dtheta: f64,
    /// `(row, col)` translation in pixels.
    pub dp_pixels: [f64; 2],
    /// `(row, col)` rotation center.
    pub pivot: [f64; 2],
}

impl WarpSpec {
    /// The map taking a frame centered on the ego at `t` to the ego's pose
    /// after `delta`.
    pub fn from_delta(delta: &PoseDelta, grid: &GridSpec) -> Self {
        let mpp = grid.meters_per_pixel;
        Self {
            dtheta: delta.dtheta,
            dp_pixels: [-delta.dp[0] / mpp, -delta.dp[1] / mpp],
            pivot: [grid.anchor[0] as f64, grid.anchor[1] as f64],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.dtheta == 0.0 && self.dp_pixels == [0.0, 0.0]
    }

    /// Rotates a `(row, col)` vector by `angle`, counter-clockwise as displayed.
    fn rotate(angle: f64, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = angle.sin_cos();
        [-s * v[1] + c * v[0], c * v[1] + s * v[0]]
    }

    pub fn apply(&self, q: [f64; 2]) -> [f64; 2] {
        let r = Self::rotate(self.dtheta, [q[0] - self.pivot[0], q[1] - self.pivot[1]]);
        [
            self.pivot[0] + r[0] + self.dp_pixels[0],
            self.pivot[1] + r[1] + self.dp_pixels[1],
        ]
    }

    pub fn apply_inverse(&self, o: [f64; 2]) -> [f64; 2] {
        let r = Self::rotate(
            -self.dtheta,
            [
                o[0] - self.pivot[0] - self.dp_pixels[0],
                o[1] - self.pivot[1] - self.dp_pixels[1],
            ],
        );
        [self.pivot[0] + r[0], self.pivot[1] + r[1]]
    }

    pub fn inverse(&self) -> Self {
        let back = Self::rotate(-self.dtheta, self.dp_pixels);
        Self {
            dtheta: -self.dtheta,
            dp_pixels: [-back[0], -back[1]],
            pivot: self.pivot,
        }
    }
}

fn sample(plane: &[f32], h: usize, w: usize, q: [f64; 2], interp: Interp) -> f32 {
    let at = |r: i64, c: i64| -> f32 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    match interp {
        Interp::Nearest => at(q[0].round() as i64, q[1].round() as i64),
        Interp::Bilinear => {
            let (r0, c0) = (q[0].floor(), q[1].floor());
            let (fr, fc) = ((q[0] - r0) as f32, (q[1] - c0) as f32);
            let (r0, c0) = (r0 as i64, c0 as i64);
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1) * fc;
            let bottom = at(r0 + 1, c0) * (1.0 - fc) + at(r0 + 1, c0 + 1) * fc;
            top * (1.0 - fr) + bottom * fr
        }
    }
}

/// Resamples the selected channels so that content at `q` moves to
/// `spec.apply(q)`. Other channels are copied verbatim; out-of-frame samples
/// read as 0.
pub fn warp(src: &Ogm, spec: &WarpSpec, channels: &[usize], interp: Interp) -> Result<Ogm> {
    if let Some(&bad) = channels.iter().find(|&&c| c >= src.grid.c()) {
        return Err(Error::invalid(format!(
            "channel {bad} not in a {}-channel frame",
            src.grid.c()
        )));
    }
    let mut out = src.clone();
    if spec.is_identity() {
        return Ok(out);
    }
    let (h, w) = (src.grid.h, src.grid.w);
    let sources: Vec<[f64; 2]> = (0..h * w)
        .map(|i| spec.apply_inverse([(i / w) as f64, (i % w) as f64]))
        .collect();
    for &ch in channels {
        let plane = src.channel(ch);
        let dst = out.channel_mut(ch);
        for (d, &q) in dst.iter_mut().zip(&sources) {
            *d = clip_unit(sample(plane, h, w, q, interp));
        }
    }
    Ok(out)
}

/// Moves the ego channel(s) of `i_t` to the anticipated pose; everything
/// else is untouched.
pub fn iot1(i_t: &Ogm, delta: &PoseDelta, interp: Interp) -> Result<Ogm> {
    let ego = i_t.ego_channels();
    if ego.is_empty() {
        return Err(Error::invalid("frame has no ego channel"));
    }
    warp(i_t, &WarpSpec::from_delta(delta, &i_t.grid), &ego, interp)
}

/// Expresses the next frame in the ego frame of the previous step, so its
/// ego lands where [`iot1`] put it.
pub fn iot2(i_next: &Ogm, delta: &PoseDelta, interp: Interp) -> Result<Ogm> {
    let all: Vec<usize> = (0..i_next.grid.c()).collect();
    warp(
        i_next,
        &WarpSpec::from_delta(delta, &i_next.grid),
        &all,
        interp,
    )
}

/// Inverse of [`iot2`]: re-centers a prediction on the ego.
pub fn oot(pred: &Ogm, delta: &PoseDelta, interp: Interp) -> Result<Ogm> {
    let all: Vec<usize> = (0..pred.grid.c()).collect();
    warp(
        pred,
        &WarpSpec::from_delta(delta, &pred.grid).inverse(),
        &all,
        interp,
    )
}

/// Zero border of `pad` pixels on every side; the anchor moves with the content.
pub fn pad(src: &Ogm, pad: usize) -> Ogm {
    if pad == 0 {
        return src.clone();
    }
    let grid = src.grid.padded(pad);
    let (h, w, nw) = (src.grid.h, src.grid.w, grid.w);
    let mut out = Ogm::zeros(grid);
    for ch in 0..src.grid.c() {
        let from = src.channel(ch);
        let to = out.channel_mut(ch);
        for r in 0..h {
            let base = (r + pad) * nw + pad;
            to[base..base + w].copy_from_slice(&from[r * w..(r + 1) * w]);
        }
    }
    out
}

/// Removes a border of `pad` pixels; inverse of [`pad`].
pub fn crop(src: &Ogm, pad: usize) -> Result<Ogm> {
    if pad == 0 {
        return Ok(src.clone());
    }
    let g = &src.grid;
    if 2 * pad >= g.h || 2 * pad >= g.w || g.anchor[0] < pad || g.anchor[1] < pad {
        return Err(Error::invalid(format!(
            "cannot crop {pad} px from a {}×{} grid anchored at {:?}",
            g.h, g.w, g.anchor
        )));
    }
    let grid = GridSpec {
        h: g.h - 2 * pad,
        w: g.w - 2 * pad,
        anchor: [g.anchor[0] - pad, g.anchor[1] - pad],
        ..g.clone()
    };
    let (nh, nw) = (grid.h, grid.w);
    let mut data = Vec::with_capacity(grid.len());
    for ch in 0..g.c() {
        let plane = src.channel(ch);
        for r in 0..nh {
            let base = (r + pad) * g.w + pad;
            data.extend_from_slice(&plane[base..base + nw]);
        }
    }
    Ogm::new(grid, data)
}

/// Signed per-pixel difference between two frames, values in `[-1, 1]`.
/// Held in double precision, where the difference of two `f32` values is
/// exact, so adding it back restores the minuend bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffFrame {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl DiffFrame {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// `base + self`, clipped into `[0, 1]`.
    pub fn add_to(&self, base: &Ogm) -> Result<Ogm> {
        if base.grid.shape() != self.shape {
            return Err(Error::Shape {
                op: "add_diff",
                left: format!("{:?}", base.grid.shape()),
                right: format!("{:?}", self.shape),
            });
        }
        let data = base
            .data
            .iter()
            .zip(&self.data)
            .map(|(&b, &d)| clip_unit((f64::from(b) + d) as f32))
            .collect();
        Ogm::new(base.grid.clone(), data)
    }
}

/// `a − b`, unclipped.
pub fn frame_diff(a: &Ogm, b: &Ogm) -> Result<DiffFrame> {
    a.check_same(b, "frame_diff")?;
    Ok(DiffFrame {
        shape: a.grid.shape(),
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f64::from(x) - f64::from(y))
            .collect(),
    })
}

/// Mean absolute difference over pixels at least `margin` from every border,
/// averaged across channels.
pub fn interior_mae(a: &Ogm, b: &Ogm, margin: usize) -> Result<f64> {
    a.check_same(b, "interior_mae")?;
    let (h, w) = (a.grid.h, a.grid.w);
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::invalid(format!(
            "margin {margin} leaves no interior in {h}×{w}"
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ch in 0..a.grid.c() {
        let (pa, pb) = (a.channel(ch), b.channel(ch));
        for r in margin..h - margin {
            for c in margin..w - margin {
                total += f64::from((pa[r * w + c] - pb[r * w + c]).abs());
                n += 1;
            }
        }
    }
    Ok(total / n as f64)
}

/// Outcome of [`roundtrip_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoundtripReport {
    /// Interior error per case.
    pub errors: Vec<f64>,
    pub margin: usize,
}

impl RoundtripReport {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len().max(1) as f64
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Warps `cases` random 64×64 frames of filled rectangles into a random
/// anticipated pose (rotation up to 0.3 rad, shift up to 10 px) and back,
/// recording the interior error of each.
pub fn roundtrip_check(cases: usize, seed: u64, interp: Interp) -> Result<RoundtripReport> {
    use rand::{Rng, SeedableRng};
    let margin = 20;
    let grid = GridSpec {
        h: 64,
        w: 64,
        roles: vec![ChannelRole::Map, ChannelRole::Occupancy, ChannelRole::Ego],
        anchor: [32, 32],
        meters_per_pixel: 0.5,
        mode: ValueMode::Real,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(cases);
    for _ in 0..cases {
        let mut x = Ogm::zeros(grid.clone());
        for ch in 0..grid.c() {
            for _ in 0..rng.random_range(1..6) {
                let (r0, c0) = (rng.random_range(0..56), rng.random_range(0..56));
                let (h, w) = (rng.random_range(3..16usize), rng.random_range(3..16usize));
                let v: f32 = rng.random_range(0.2..1.0);
                for r in r0..(r0 + h).min(64) {
                    for c in c0..(c0 + w).min(64) {
                        x.set(ch, r, c, v);
                    }
                }
            }
        }
        let len = rng.random_range(0.0..10.0) * grid.meters_per_pixel;
        let dir: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let delta = PoseDelta {
            dp: [len * dir.cos(), len * dir.sin()],
            dtheta: rng.random_range(-0.3..0.3),
        };
        let back = oot(&iot2(&x, &delta, interp)?, &delta, interp)?;
        errors.push(interior_mae(&back, &x, margin)?);
    }
    Ok(RoundtripReport { errors, margin })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, roles: &[ChannelRole]) -> GridSpec {
        GridSpec {
            h,
            w,
            roles: roles.to_vec(),
            anchor: [h / 2, w / 2],
            meters_per_pixel: 0.25,
            mode: ValueMode::Real,
        }
    }

    fn ramp(g: GridSpec) -> Ogm {
        let n = g.len();
        let data = (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Ogm::new(g, data).unwrap()
    }

    #[test]
    fn zero_delta_is_bitwise_identity() {
        let x = ramp(grid(12, 10, &[ChannelRole::Occupancy, ChannelRole::Ego]));
        for f in [iot1, iot2, oot] {
            assert_eq!(f(&x, &PoseDelta::ZERO, Interp::Bilinear).unwrap(), x);
        }
    }

    #[test]
    fn integer_column_shift_has_no_blur() {
        let x = ramp(grid(8, 8, &[ChannelRole::Occupancy]));
        let spec = WarpSpec {
            dtheta: 0.0,
            dp_pixels: [0.0, 1.0],
            pivot: [4.0, 4.0],
        };
        let y = warp(&x, &spec, &[0], Interp::Bilinear).unwrap();
        for r in 0..8 {
            assert_eq!(y.get(0, r, 0), 0.0);
            for c in 1..8 {
                assert_eq!(y.get(0, r, c), x.get(0, r, c - 1));
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_indices() {
        let g = GridSpec {
            anchor: [4, 4],
            ..grid(9, 9, &[ChannelRole::Occupancy])
        };
        let x = ramp(g);
        let spec = WarpSpec {
            dtheta: std::f64::consts::FRAC_PI_2,
            dp_pixels: [0.0, 0.0],
            pivot: [4.0, 4.0],
        };
        let y = warp(&x, &spec, &[0], Interp::Bilinear).unwrap();
        // Counter-clockwise as displayed: content at (r, c) moves to (8 − c, r).
        for r in 0..9 {
            for c in 0..9 {
                assert!((y.get(0, 8 - c, r) - x.get(0, r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_motion_moves_ego_up() {
        let g = grid(40, 40, &[ChannelRole::Occupancy, ChannelRole::Ego]);
        let mut x = Ogm::zeros(g);
        for r in 16..25 {
            for c in 19..23 {
                x.set(1, r, c, 1.0);
                x.set(0, r, c - 10, 0.5);
            }
        }
        let d = PoseDelta {
            dp: [0.25, 0.0],
            dtheta: 0.0,
        };
        let y = iot1(&x, &d, Interp::Bilinear).unwrap();
        assert_eq!(y.channel(0), x.channel(0));
        let (a, b) = (x.centroid(1).unwrap(), y.centroid(1).unwrap());
        assert_eq!(b[0], a[0] - 1.0);
        assert_eq!(b[1], a[1]);
    }

    #[test]
    fn rotated_step_moves_centroid_along_heading() {
        let g = grid(40, 40, &[ChannelRole::Ego]);
        let mut x = Ogm::zeros(g);
        // 9×4 footprint whose centroid is the anchor.
        for r in 16..25 {
            for c in 18..22 {
                x.set(0, r, c, 1.0);
            }
        }
        x.set(0, 20, 20, 1.0);
        let before = x.centroid(0).unwrap();
        let d = PoseDelta {
            dp: [0.5 * 0.2f64.cos(), 0.5 * 0.2f64.sin()],
            dtheta: 0.2,
        };
        let y = iot1(&x, &d, Interp::Bilinear).unwrap();
        let after = y.centroid(0).unwrap();
        let moved = (after[0] - before[0]).hypot(after[1] - before[1]);
        assert!((moved - 2.0).abs() < 0.5, "moved {moved}");
        assert!(after[0] < before[0]);
    }

    #[test]
    fn inverse_spec_undoes_forward_map() {
        let spec = WarpSpec {
            dtheta: 0.27,
            dp_pixels: [-3.5, 1.25],
            pivot: [10.0, 12.0],
        };
        let q = [3.0, 17.0];
        let back = spec.inverse().apply(spec.apply(q));
        assert!((back[0] - q[0]).abs() < 1e-12 && (back[1] - q[1]).abs() < 1e-12);
        let same = spec.apply_inverse(spec.apply(q));
        assert!((same[0] - q[0]).abs() < 1e-12 && (same[1] - q[1]).abs() < 1e-12);
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x = ramp(grid(10, 7, &[ChannelRole::Map, ChannelRole::Ego]));
        let p = pad(&x, 20);
        assert_eq!(p.grid.anchor, [25, 23]);
        assert_eq!(crop(&p, 20).unwrap(), x);
        assert_eq!(pad(&x, 0), x);
    }

    #[test]
    fn diff_recomposes_exactly() {
        let g = grid(6, 6, &[ChannelRole::Occupancy]);
        let a = ramp(g.clone());
        let b = Ogm::new(g, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let d = frame_diff(&a, &b).unwrap();
        assert_eq!(d.add_to(&b).unwrap(), a);
        assert!(frame_diff(&a, &a).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_ego_channel_is_an_error() {
        let x = ramp(grid(6, 6, &[ChannelRole::Occupancy]));
        assert!(iot1(&x, &PoseDelta::ZERO, Interp::Bilinear).is_err());
    }
}
