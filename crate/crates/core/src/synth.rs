//! Synthetic deforming tubes with closed-form geometry, and the analytic
//! values the analyses are checked against.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{P3, V3};
use crate::mesh::TriMeshFrame;
use crate::parameterize::{lattice_triangles, SurfaceLabel};

/// Time course of the expansion pulse at a fixed station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// 0.5 (1 + cos(2π Δ / width)) for |Δ| < width / 2; width as a share of the period.
    RaisedCosine { width: f64 },
    /// exp(−Δ² / 2σ²) with σ as a share of the period, Δ wrapped to the cycle.
    Gaussian { sigma: f64 },
    /// 0.5 (1 + cos(2π Δ / period)).
    Sinusoid,
}

impl Profile {
    /// Pulse value for a lag `x` given as a share of the period.
    pub fn eval(&self, x: f64) -> f64 {
        let d = x - x.round();
        match *self {
            Profile::RaisedCosine { width } => {
                if d.abs() < 0.5 * width {
                    0.5 * (1.0 + (2.0 * PI * d / width).cos())
                } else {
                    0.0
                }
            }
            Profile::Gaussian { sigma } => (-d * d / (2.0 * sigma * sigma)).exp(),
            Profile::Sinusoid => 0.5 * (1.0 + (2.0 * PI * d).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Section {
    Circle,
    /// Semi-axes as multiples of the section radius.
    Ellipse {
        a: f64,
        b: f64,
    },
}

impl Section {
    fn axes(&self) -> (f64, f64) {
        match *self {
            Section::Circle => (1.0, 1.0),
            Section::Ellipse { a, b } => (a, b),
        }
    }
}

/// C-shaped centreline: a circular arc of the given total angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bend {
    /// Radians.
    pub angle: f64,
    /// Keep the wall on the inside of the bend on the arc and let the
    /// section centres move outward with the radius.
    #[serde(default)]
    pub inner_wall_fixed: bool,
}

/// Gaussian radius change along the tube: factor 1 + amplitude·exp(−((v − position)/width)²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub position: f64,
    pub amplitude: f64,
    pub width: f64,
}

impl Bump {
    fn factor(&self, v: f64) -> f64 {
        1.0 + self.amplitude * (-((v - self.position) / self.width).powi(2)).exp()
    }
}

/// Lumen inside the inner wall, optionally folded into a star.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lumen {
    /// Gap to the inner wall, mm.
    pub gap: f64,
    /// Number of folds; 0 for a plain offset.
    #[serde(default)]
    pub folds: usize,
    /// Relative fold amplitude.
    #[serde(default)]
    pub fold_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TubeSpec {
    /// Outer radius at the inlet and outlet, mm.
    pub inlet_radius: f64,
    pub outlet_radius: f64,
    /// Centreline length, mm.
    pub length: f64,
    pub bend: Option<Bend>,
    /// Wall thickness at the inlet and outlet, mm.
    pub wall_inlet: f64,
    pub wall_outlet: f64,
    pub lumen: Lumen,
    /// Wave speed, mm/s; infinite for a synchronous tube.
    pub wave_speed: f64,
    /// Fraction of the radius lost when fully contracted.
    pub depth: f64,
    pub profile: Profile,
    /// Pulse arrival at the inlet as a share of the period.
    pub wave_start: f64,
    /// Stretch of v where the wave runs backwards.
    pub reversal: Option<(f64, f64)>,
    /// Constriction: position in v and radius factor at its centre.
    pub band: Option<(f64, f64)>,
    /// Width of the constriction in v.
    pub band_width: f64,
    pub bulge: Option<Bump>,
    pub section: Section,
    /// Relative cyclic change of length; zero at t = 0.
    pub stretch: f64,
    pub frames: usize,
    /// Seconds.
    pub period: f64,
    /// Mesh samples around and along.
    pub around: usize,
    pub along: usize,
}

impl Default for TubeSpec {
    fn default() -> Self {
        TubeSpec {
            inlet_radius: 0.5,
            outlet_radius: 0.25,
            length: 2.0,
            bend: None,
            wall_inlet: 0.08,
            wall_outlet: 0.05,
            lumen: Lumen { gap: 0.03, folds: 0, fold_amplitude: 0.0 },
            wave_speed: 8.0,
            depth: 0.4,
            profile: Profile::RaisedCosine { width: 0.5 },
            wave_start: 0.2,
            reversal: None,
            band: None,
            band_width: 0.08,
            bulge: None,
            section: Section::Circle,
            stretch: 0.0,
            frames: 195,
            period: 0.4,
            around: 100,
            along: 60,
        }
    }
}

/// Analytic record of a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    /// Seconds.
    pub times: Vec<f64>,
    /// Wave arrival at each mesh ring, seconds.
    pub arrival: Vec<f64>,
    /// Outer cross-sectional area per frame and ring, mm².
    pub outer_area: Vec<Vec<f64>>,
    /// Enclosed volumes per frame, mm³.
    pub outer_volume: Vec<f64>,
    pub inner_volume: Vec<f64>,
    pub layer_volume: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratedSequence {
    pub spec: TubeSpec,
    pub outer: Vec<TriMeshFrame>,
    pub inner: Vec<TriMeshFrame>,
    pub lumen: Vec<TriMeshFrame>,
    pub oracle: Oracle,
}

impl GeneratedSequence {
    pub fn surface(&self, label: SurfaceLabel) -> &[TriMeshFrame] {
        match label {
            SurfaceLabel::Outer => &self.outer,
            SurfaceLabel::Inner => &self.inner,
            SurfaceLabel::Lumen => &self.lumen,
        }
    }
}

impl TubeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.inlet_radius > 0.0 && self.outlet_radius > 0.0 && self.length > 0.0) {
            return bad("radii and length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.depth) {
            return bad(format!("contraction depth {} must lie in [0, 1)", self.depth));
        }
        if !(self.wave_speed > 0.0) {
            return bad(format!("wave speed {} must be positive", self.wave_speed));
        }
        if !(self.period > 0.0) || self.frames < 8 {
            return bad(format!("need a positive period and at least 8 frames, got {} and {}", self.period, self.frames));
        }
        if self.around < 8 || self.along < 3 {
            return bad(format!("mesh resolution {}x{} too coarse", self.around, self.along));
        }
        if let Some((vb, f)) = self.band {
            if !(vb > 0.0 && vb < 1.0) {
                return bad(format!("band position {vb} must lie in (0, 1)"));
            }
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("band factor {f} must lie in (0, 1]"));
            }
        }
        if let Some((a, b)) = self.reversal {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return bad(format!("reversal segment ({a}, {b}) must be an interval in [0, 1]"));
            }
        }
        if self.stretch <= -1.0 {
            return bad("stretch must stay above −1".into());
        }
        // Walls must stay nested and clear of the bend axis everywhere.
        let (a, b) = self.section.axes();
        for j in 0..=200 {
            let v = j as f64 / 200.0;
            let r_min = self.base_radius(v) * (1.0 - self.depth);
            let r_max = self.base_radius(v);
            let lumen = r_min - self.wall(v) - self.lumen.gap;
            if lumen * (1.0 - self.lumen.fold_amplitude.abs()) <= 0.0 {
                return bad(format!("walls and lumen overlap at v = {v:.3}: the constriction or contraction is too deep"));
            }
            if let Some(bend) = self.bend {
                let radius = self.length / bend.angle.abs().max(f64::MIN_POSITIVE);
                if !bend.inner_wall_fixed && r_max * a.max(b) >= radius * 0.95 {
                    return bad(format!("tube radius {r_max:.3} crosses the bend axis at v = {v:.3}"));
                }
            }
        }
        Ok(())
    }

    /// Outer radius at rest before the wave.
    pub fn base_radius(&self, v: f64) -> f64 {
        let mut r = self.inlet_radius + (self.outlet_radius - self.inlet_radius) * v;
        if let Some((vb, f)) = self.band {
            r *= 1.0 - (1.0 - f) * (-((v - vb) / self.band_width).powi(2)).exp();
        }
        if let Some(b) = self.bulge {
            r *= b.factor(v);
        }
        r
    }

    pub fn wall(&self, v: f64) -> f64 {
        self.wall_inlet + (self.wall_outlet - self.wall_inlet) * v
    }

    pub fn time(&self, frame: usize) -> f64 {
        self.period * frame as f64 / self.frames as f64
    }

    /// Seconds from the inlet arrival to the arrival at v.
    pub fn arrival(&self, v: f64) -> f64 {
        let mut z = self.length * v;
        if let Some((a, b)) = self.reversal {
            z -= 2.0 * self.length * (v.clamp(a, b) - a);
        }
        self.wave_start * self.period + if self.wave_speed.is_finite() { z / self.wave_speed } else { 0.0 }
    }

    /// Radius factor from the wave, in [1 − d, 1].
    pub fn wave_factor(&self, v: f64, t: f64) -> f64 {
        let p = self.profile.eval((t - self.arrival(v)) / self.period);
        1.0 - self.depth + self.depth * p
    }

    /// Longitudinal stretch factor at time t.
    pub fn stretch_factor(&self, t: f64) -> f64 {
        1.0 + self.stretch * 0.5 * (1.0 - (2.0 * PI * t / self.period).cos())
    }

    pub fn radius(&self, label: SurfaceLabel, v: f64, t: f64) -> f64 {
        let outer = self.base_radius(v) * self.wave_factor(v, t);
        match label {
            SurfaceLabel::Outer => outer,
            SurfaceLabel::Inner => outer - self.wall(v),
            SurfaceLabel::Lumen => outer - self.wall(v) - self.lumen.gap,
        }
    }

    /// Section centre, unit tangent and the in-plane axis pointing toward the
    /// bend centre, for material coordinate v at time t.
    fn frame_at(&self, v: f64, t: f64) -> (P3, V3, V3) {
        let s = self.stretch_factor(t);
        match self.bend {
            None => (P3::new(0.0, 0.0, self.length * s * v), V3::z(), V3::x()),
            Some(bend) => {
                let radius = self.length / bend.angle;
                let phi = bend.angle * s * v;
                let toward = V3::new(phi.cos(), 0.0, -phi.sin());
                let tangent = V3::new(phi.sin(), 0.0, phi.cos());
                let axis = P3::new(radius, 0.0, 0.0);
                let centre_distance =
                    if bend.inner_wall_fixed { radius + self.radius(SurfaceLabel::Outer, v, t) * self.section.axes().0 } else { radius };
                (axis - toward * centre_distance, tangent, toward)
            }
        }
    }

    /// Surface point at angle u ∈ [0, 1) around and material v along.
    pub fn point(&self, label: SurfaceLabel, u: f64, v: f64, t: f64) -> P3 {
        let (centre, tangent, toward) = self.frame_at(v, t);
        let side = tangent.cross(&toward);
        let th = 2.0 * PI * u;
        let (a, b) = self.section.axes();
        let mut r = self.radius(label, v, t);
        if label == SurfaceLabel::Lumen && self.lumen.folds > 0 {
            r *= 1.0 + self.lumen.fold_amplitude * (self.lumen.folds as f64 * th).cos();
        }
        centre + toward * (r * a * th.cos()) + side * (r * b * th.sin())
    }

    pub fn mesh(&self, label: SurfaceLabel, frame: usize) -> TriMeshFrame {
        let (n, m) = (self.around, self.along);
        let t = self.time(frame);
        let vertices = (0..m)
            .flat_map(|j| (0..n).map(move |i| (i, j)))
            .map(|(i, j)| self.point(label, i as f64 / n as f64, j as f64 / (m - 1) as f64, t))
            .collect();
        TriMeshFrame::new(vertices, lattice_triangles(n, m)).with_frame(frame, t)
    }
}

/// Analytic cross-sectional area of a surface at (v, t), mm².
pub fn oracle_area(spec: &TubeSpec, label: SurfaceLabel, v: f64, t: f64) -> f64 {
    let (a, b) = spec.section.axes();
    let r = spec.radius(label, v, t);
    let fold = if label == SurfaceLabel::Lumen && spec.lumen.folds > 0 { 1.0 + 0.5 * spec.lumen.fold_amplitude.powi(2) } else { 1.0 };
    PI * r * r * a * b * fold
}

pub fn oracle_wave_speed(spec: &TubeSpec) -> f64 {
    spec.wave_speed
}

/// Volume swept by the sections of a surface, by Simpson's rule in v.
pub fn oracle_volume(spec: &TubeSpec, label: SurfaceLabel, t: f64) -> f64 {
    let steps = 2000;
    let h = 1.0 / steps as f64;
    let s = spec.stretch_factor(t);
    let density = |v: f64| {
        let area = oracle_area(spec, label, v, t);
        match spec.bend {
            None => area * spec.length * s,
            // Sections turn about the bend axis: each contributes its area
            // times the distance of its centroid from the axis.
            Some(bend) => {
                let (centre, _, _) = spec.frame_at(v, t);
                let axis_distance = (centre - P3::new(spec.length / bend.angle, 0.0, 0.0)).norm();
                area * axis_distance * bend.angle.abs() * s
            }
        }
    };
    let sum: f64 = (0..=steps)
        .map(|k| {
            let w = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * density(k as f64 * h)
        })
        .sum();
    sum * h / 3.0
}

/// Volume between the outer and inner walls, mm³.
pub fn oracle_layer_volume(spec: &TubeSpec, t: f64) -> f64 {
    oracle_volume(spec, SurfaceLabel::Outer, t) - oracle_volume(spec, SurfaceLabel::Inner, t)
}

/// Share of the cycle a station spends at or above 75% of its peak area.
pub fn oracle_p75_fraction(spec: &TubeSpec) -> Option<f64> {
    let Profile::RaisedCosine { width } = spec.profile else { return None };
    // Area ∝ s² with s = 1 − d + d·p; threshold on p.
    let p = (0.75f64.sqrt() - 1.0 + spec.depth) / spec.depth;
    if !(0.0..=1.0).contains(&p) || spec.depth == 0.0 {
        return Some(1.0);
    }
    Some(width * (2.0 * p - 1.0).acos() / PI)
}

pub fn generate_sequence(spec: &TubeSpec) -> Result<GeneratedSequence> {
    spec.validate()?;
    let frames: Vec<usize> = (0..spec.frames).collect();
    let build = |label| frames.par_iter().map(|&k| spec.mesh(label, k)).collect::<Vec<_>>();
    let outer = build(SurfaceLabel::Outer);
    let inner = build(SurfaceLabel::Inner);
    let lumen = build(SurfaceLabel::Lumen);
    let times: Vec<f64> = frames.iter().map(|&k| spec.time(k)).collect();
    let rings: Vec<f64> = (0..spec.along).map(|j| j as f64 / (spec.along - 1) as f64).collect();
    let outer_volume: Vec<f64> = times.par_iter().map(|&t| oracle_volume(spec, SurfaceLabel::Outer, t)).collect();
    let inner_volume: Vec<f64> = times.par_iter().map(|&t| oracle_volume(spec, SurfaceLabel::Inner, t)).collect();
    let oracle = Oracle {
        arrival: rings.iter().map(|&v| spec.arrival(v)).collect(),
        outer_area: times.iter().map(|&t| rings.iter().map(|&v| oracle_area(spec, SurfaceLabel::Outer, v, t)).collect()).collect(),
        layer_volume: outer_volume.iter().zip(&inner_volume).map(|(o, i)| o - i).collect(),
        outer_volume,
        inner_volume,
        times,
    };
    Ok(GeneratedSequence { spec: spec.clone(), outer, inner, lumen, oracle })
}
