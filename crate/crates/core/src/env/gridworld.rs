//! Continuous four-room gridworlds with a directional slope.
//!
//! The arena is the square `[-side/2, side/2]^2`. Walls are closed
//! axis-aligned boxes; the outer border is open, so a free state lies strictly
//! inside the border and outside every wall box.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance kept from an obstacle after a collision, along the incoming direction.
pub const EPS_PUSH: f64 = 0.01;

/// Half-thickness of the reference inner walls.
pub const WALL_HALF_THICKNESS: f64 = 0.02;

/// Width of each reference hallway gap.
pub const HALLWAY_WIDTH: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    /// Parameter in `[0, 1]` where the segment `from -> from + d` first
    /// touches the box, if it does.
    fn entry_time(&self, from: [f64; 2], d: [f64; 2]) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (axis, (lo, hi)) in [(self.x0, self.x1), (self.y0, self.y1)]
            .into_iter()
            .enumerate()
        {
            let (p, v) = (from[axis], d[axis]);
            if v == 0.0 {
                if p < lo || p > hi {
                    return None;
                }
            } else {
                let (a, b) = ((lo - p) / v, (hi - p) / v);
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                t0 = t0.max(a);
                t1 = t1.min(b);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlopeDirection {
    #[serde(rename = "N")]
    North,
    #[serde(rename = "S")]
    South,
    #[serde(rename = "E")]
    East,
    #[serde(rename = "SE")]
    SouthEast,
    #[serde(rename = "none")]
    None,
}

impl SlopeDirection {
    pub fn unit(self) -> [f64; 2] {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Self::North => [0.0, 1.0],
            Self::South => [0.0, -1.0],
            Self::East => [1.0, 0.0],
            Self::SouthEast => [h, -h],
            Self::None => [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlopeRegion {
    /// `y > 0`.
    #[serde(rename = "upper-half")]
    UpperHalf,
    #[serde(rename = "full")]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub direction: SlopeDirection,
    pub region: SlopeRegion,
    pub mean: f64,
    pub std: f64,
}

impl Slope {
    pub fn none() -> Self {
        Self {
            direction: SlopeDirection::None,
            region: SlopeRegion::Full,
            mean: 0.0,
            std: 0.0,
        }
    }

    pub fn applies_at(&self, p: [f64; 2]) -> bool {
        self.direction != SlopeDirection::None
            && match self.region {
                SlopeRegion::UpperHalf => p[1] > 0.0,
                SlopeRegion::Full => true,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridworldConfig {
    pub name: String,
    pub side: f64,
    pub max_step: f64,
    pub slope: Slope,
    pub initial: Rect,
    pub walls: Vec<Rect>,
}

/// Wall boxes splitting the arena into four rooms around `(cx, cy)`.
///
/// `gaps` holds the hallway centers of the north, south, west and east
/// half-walls (y, y, x, x).
pub fn four_room_walls(side: f64, cx: f64, cy: f64, gaps: [f64; 4]) -> Vec<Rect> {
    let h = side / 2.0;
    let w = WALL_HALF_THICKNESS;
    let g = HALLWAY_WIDTH / 2.0;
    let [north, south, west, east] = gaps;
    vec![
        // vertical wall x = cx
        Rect::new(cx - w, north + g, cx + w, h),
        Rect::new(cx - w, south + g, cx + w, north - g),
        Rect::new(cx - w, -h, cx + w, south - g),
        // horizontal wall y = cy
        Rect::new(east + g, cy - w, h, cy + w),
        Rect::new(west + g, cy - w, east - g, cy + w),
        Rect::new(-h, cy - w, west - g, cy + w),
    ]
}

impl GridworldConfig {
    /// GWS: south slope of mean `max_step / 2` over the upper half.
    pub fn gws() -> Self {
        super::EnvironmentClass::gridslope().configs[0].clone()
    }

    /// GWN: north slope of mean `max_step / 2` over the upper half.
    pub fn gwn() -> Self {
        super::EnvironmentClass::gridslope().configs[1].clone()
    }

    /// The reference layout without slope.
    pub fn four_rooms() -> Self {
        Self {
            name: "four-rooms".into(),
            slope: Slope::none(),
            ..Self::gws()
        }
    }

    pub fn half_side(&self) -> f64 {
        self.side / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if !(self.side > 0.0 && self.side.is_finite()) {
            return bad("side must be positive".into());
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return bad("max_step must be positive".into());
        }
        if !(self.slope.mean.is_finite() && self.slope.std >= 0.0 && self.slope.std.is_finite()) {
            return bad("slope mean/std must be finite, std nonnegative".into());
        }
        if let Some(w) = self.walls.iter().find(|w| !w.is_valid()) {
            return bad(format!("malformed wall {w:?}"));
        }
        if !self.initial.is_valid() {
            return bad("malformed initial region".into());
        }
        let r = self.initial;
        for p in [[r.x0, r.y0], [r.x0, r.y1], [r.x1, r.y0], [r.x1, r.y1]] {
            if !self.is_free(p) {
                return bad("initial region corner outside free space".into());
            }
        }
        if self.walls.iter().any(|w| {
            w.x0 <= r.x1 && w.x1 >= r.x0 && w.y0 <= r.y1 && w.y1 >= r.y0
        }) {
            return bad("initial region overlaps a wall".into());
        }
        Ok(())
    }

    pub fn is_free(&self, p: [f64; 2]) -> bool {
        let h = self.half_side();
        p[0] > -h
            && p[0] < h
            && p[1] > -h
            && p[1] < h
            && !self.walls.iter().any(|w| w.contains(p))
    }

    /// Uniform draw from the initial box.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let r = self.initial;
        let x = r.x0 + (r.x1 - r.x0) * rng.random::<f64>();
        let y = r.y0 + (r.y1 - r.y0) * rng.random::<f64>();
        [x, y]
    }

    /// Slope magnitude drawn from N(mean, std), clamped to `[0, max_step]`.
    fn slope_magnitude<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s = &self.slope;
        let draw = if s.std > 0.0 {
            Normal::new(s.mean, s.std)
                .expect("validated slope")
                .sample(rng)
        } else {
            s.mean
        };
        draw.clamp(0.0, self.max_step)
    }

    /// First contact parameter in `[0, 1]` with walls or the border.
    fn first_contact(&self, from: [f64; 2], d: [f64; 2]) -> Option<f64> {
        let h = self.half_side();
        let mut hit: Option<f64> = None;
        let mut take = |t: f64| {
            if hit.is_none_or(|cur| t < cur) {
                hit = Some(t);
            }
        };
        for axis in 0..2 {
            let (p, v) = (from[axis], d[axis]);
            let end = p + v;
            if end >= h {
                take((h - p) / v);
            } else if end <= -h {
                take((-h - p) / v);
            }
        }
        for w in &self.walls {
            if let Some(t) = w.entry_time(from, d) {
                take(t);
            }
        }
        hit
    }

    /// One transition. Actions are clipped per axis to `±max_step`; the slope
    /// displacement is added when `state` lies in the slope region.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: [f64; 2],
        action: &[f64],
        rng: &mut R,
    ) -> Result<[f64; 2]> {
        if !self.is_free(state) {
            return Err(Error::InvalidState {
                x: state[0],
                y: state[1],
            });
        }
        if action.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: action.len(),
            });
        }
        let m = self.max_step;
        let clip = |a: f64| if a.is_nan() { 0.0 } else { a.clamp(-m, m) };
        let mut d = [clip(action[0]), clip(action[1])];
        if self.slope.applies_at(state) {
            let s = self.slope_magnitude(rng);
            let u = self.slope.direction.unit();
            d[0] += s * u[0];
            d[1] += s * u[1];
        }
        let next = match self.first_contact(state, d) {
            None => [state[0] + d[0], state[1] + d[1]],
            Some(t) => {
                // contact point moved back by EPS_PUSH along the incoming
                // direction, which may land behind `state` when it already
                // sits within EPS_PUSH of the obstacle
                let len = d[0].hypot(d[1]);
                let scale = (t * len - EPS_PUSH) / len;
                [state[0] + scale * d[0], state[1] + scale * d[1]]
            }
        };
        // only reachable in corners narrower than EPS_PUSH
        Ok(if self.is_free(next) { next } else { state })
    }
}
