use nalgebra::Vector2;

pub type Vec2 = Vector2<f64>;

/// Piecewise-linear centerline parameterised by arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Returns `None` for fewer than two points or a zero-length segment.
    pub fn new(points: Vec<Vec2>) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let d = (w[1] - w[0]).norm();
            if !(d > 1e-9) {
                return None;
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Some(Polyline { points, cumulative })
    }

    pub fn line(a: Vec2, b: Vec2) -> Option<Self> {
        Polyline::new(vec![a, b])
    }

    /// Circular arc from `start` about `center`, sweeping `angle` radians
    /// (positive = counter-clockwise).
    pub fn arc(center: Vec2, start: Vec2, angle: f64, segments: usize) -> Option<Self> {
        let r0 = start - center;
        let pts = (0..=segments)
            .map(|i| {
                let t = angle * i as f64 / segments as f64;
                let (s, c) = t.sin_cos();
                center + Vec2::new(c * r0.x - s * r0.y, s * r0.x + c * r0.y)
            })
            .collect();
        Polyline::new(pts)
    }

    /// Quarter turn from `p0` (tangent `t0`) ending tangent to the
    /// perpendicular direction; `left` chooses the turn side.
    pub fn quarter_turn(p0: Vec2, t0: Vec2, p1: Vec2, left: bool, segments: usize) -> Option<Self> {
        let n0 = if left { Vec2::new(-t0.y, t0.x) } else { Vec2::new(t0.y, -t0.x) };
        let r = (p1 - p0).dot(&t0);
        let center = p0 + n0 * r;
        let angle = if left { std::f64::consts::FRAC_PI_2 } else { -std::f64::consts::FRAC_PI_2 };
        Polyline::arc(center, p0, angle, segments)
    }

    /// Cubic Bezier from `p0` leaving along `t0` to `p1` arriving along `t1`.
    pub fn bezier(p0: Vec2, t0: Vec2, p1: Vec2, t1: Vec2, segments: usize) -> Option<Self> {
        let c = (p1 - p0).norm() / 3.0;
        let (c0, c1) = (p0 + t0 * c, p1 - t1 * c);
        let pts = (0..=segments)
            .map(|i| {
                let t = i as f64 / segments as f64;
                let u = 1.0 - t;
                p0 * (u * u * u) + c0 * (3.0 * u * u * t) + c1 * (3.0 * u * t * t) + p1 * (t * t * t)
            })
            .collect();
        Polyline::new(pts)
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn start(&self) -> Vec2 {
        self.points[0]
    }

    pub fn end(&self) -> Vec2 {
        *self.points.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.cumulative.partition_point(|c| *c <= s);
        i.clamp(1, self.points.len() - 1) - 1
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = (s - self.cumulative[i]) / seg;
        self.points[i] + (self.points[i + 1] - self.points[i]) * t
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s.clamp(0.0, self.length()));
        (self.points[i + 1] - self.points[i]).normalize()
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t.y.atan2(t.x)
    }

    /// All proper crossings with `other`, as arc-length pairs.
    pub fn intersections(&self, other: &Polyline) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for i in 0..self.points.len() - 1 {
            for j in 0..other.points.len() - 1 {
                if let Some((t, u)) = segment_intersection(self.points[i], self.points[i + 1], other.points[j], other.points[j + 1]) {
                    let sa = self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]);
                    let sb = other.cumulative[j] + u * (other.cumulative[j + 1] - other.cumulative[j]);
                    // Adjacent segments can report the same vertex twice.
                    if !out.iter().any(|(a, b): &(f64, f64)| (a - sa).abs() < 1e-6 && (b - sb).abs() < 1e-6) {
                        out.push((sa, sb));
                    }
                }
            }
        }
        out
    }
}

/// Parameters `(t, u)` in `[0, 1]` where segments `p0-p1` and `q0-q1` meet.
pub fn segment_intersection(p0: Vec2, p1: Vec2, q0: Vec2, q1: Vec2) -> Option<(f64, f64)> {
    let r = p1 - p0;
    let s = q1 - q0;
    let denom = r.x * s.y - r.y * s.x;
    if denom.abs() < 1e-12 {
        return None;
    }
    let d = q0 - p0;
    let t = (d.x * s.y - d.y * s.x) / denom;
    let u = (d.x * r.y - d.y * r.x) / denom;
    let eps = 1e-12;
    ((-eps..=1.0 + eps).contains(&t) && (-eps..=1.0 + eps).contains(&u)).then_some((t.clamp(0.0, 1.0), u.clamp(0.0, 1.0)))
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = (a + std::f64::consts::PI) % two_pi;
    if x < 0.0 {
        x += two_pi;
    }
    x - std::f64::consts::PI
}
