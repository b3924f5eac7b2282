//! The station × time area image and what is read off it: peak lines,
//! expansion bands, time expanded, gradients, wave speeds and phase ratios.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parameterize::GridMesh;
use crate::temporal::align_cycle_by_volume;

/// Levenberg–Marquardt iterations allowed for the Gaussian fit.
const FIT_ITERATIONS: usize = 50;
/// Rows whose range is below this are flat.
const FLAT_ROW: f64 = 1e-9;
/// Relative disagreement between the band variants that gets flagged.
const BAND_DIVERGENCE: f64 = 0.10;

/// Cross-sectional area per station (rows, inlet first) and frame (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaImage {
    pub stations: usize,
    pub frames: usize,
    /// Row-major: `data[j * frames + k]`, mm².
    pub data: Vec<f64>,
    /// Distance of every station from the inlet along the surface, mm.
    pub depth: Vec<f64>,
    /// Seconds per frame.
    pub dt: f64,
}

impl AreaImage {
    pub fn new(stations: usize, frames: usize, data: Vec<f64>, depth: Vec<f64>, dt: f64) -> Result<Self> {
        if stations == 0 || frames == 0 || data.len() != stations * frames || depth.len() != stations {
            return Err(Error::Invalid(format!("area image {stations}x{frames} with {} cells and {} depths", data.len(), depth.len())));
        }
        if let Some(p) = data.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Invalid(format!("area at station {}, frame {} is {}", p / frames, p % frames, data[p])));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("frame spacing {dt} must be positive")));
        }
        Ok(AreaImage { stations, frames, data, depth, dt })
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.frames + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.frames..(j + 1) * self.frames]
    }

    pub fn period(&self) -> f64 {
        self.dt * self.frames as f64
    }

    pub fn scaled(&self, s: f64) -> AreaImage {
        AreaImage { data: self.data.iter().map(|a| a * s).collect(), ..self.clone() }
    }

    /// The image with time running backwards (frame k becomes frame T − 1 − k).
    pub fn time_reversed(&self) -> AreaImage {
        let t = self.frames;
        let data = (0..self.stations).flat_map(|j| (0..t).rev().map(move |k| (j, k))).map(|(j, k)| self.get(j, k)).collect();
        AreaImage { data, ..self.clone() }
    }
}

/// Assembles the image from a per-frame table of per-station areas.
pub fn build_area_image(areas: &[Vec<Option<f64>>], depth: Vec<f64>, dt: f64) -> Result<AreaImage> {
    let frames = areas.len();
    let stations = depth.len();
    let mut missing = Vec::new();
    let mut data = vec![0.0; stations * frames];
    for j in 0..stations {
        for k in 0..frames {
            match areas[k].get(j).copied().flatten() {
                Some(a) => data[j * frames + k] = a,
                None => missing.push((j, k)),
            }
        }
    }
    if let Some(&(station, frame)) = missing.first() {
        let list: Vec<String> = missing.iter().map(|(j, k)| format!("({j},{k})")).collect();
        warn!("missing area cells (station, frame): {}", list.join(" "));
        return Err(Error::MissingCell { station, frame });
    }
    AreaImage::new(stations, frames, data, depth, dt)
}

/// Mean cumulative arc length of the grid columns at each station, averaged
/// over frames.
pub fn station_depths(grids: &[GridMesh]) -> Vec<f64> {
    let Some(first) = grids.first() else { return Vec::new() };
    let m = first.m;
    let mut depth = vec![0.0; m];
    for g in grids {
        let mut acc = vec![0.0; m];
        for i in 0..g.n {
            for j in 1..m {
                acc[j] += (g.at(i, j) - g.at(i, j - 1)).norm();
            }
        }
        let mut run = 0.0;
        for j in 1..m {
            run += acc[j] / g.n as f64;
            depth[j] += run;
        }
    }
    depth.iter_mut().for_each(|d| *d /= grids.len() as f64);
    depth
}

/// Wraps a frame difference into (−T/2, T/2].
fn wrap_delta(d: f64, t: f64) -> f64 {
    let w = d.rem_euclid(t);
    if w > 0.5 * t {
        w - t
    } else {
        w
    }
}

/// Cyclic argmax with parabolic refinement, in fractional frames; `None`
/// for a flat row.
pub fn row_peak(row: &[f64]) -> Option<f64> {
    let t = row.len();
    let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    if t == 0 || hi - lo < FLAT_ROW {
        return None;
    }
    let k = row.iter().position(|&a| a == hi).unwrap();
    let (ym, y0, yp) = (row[(k + t - 1) % t], row[k], row[(k + 1) % t]);
    let den = ym - 2.0 * y0 + yp;
    let offset = if den < 0.0 { (0.5 * (ym - yp) / den).clamp(-0.5, 0.5) } else { 0.0 };
    Some((k as f64 + offset).rem_euclid(t as f64))
}

/// Peak time of every station in fractional frames; flat rows give `None`.
pub fn peak_times(image: &AreaImage) -> Vec<Option<f64>> {
    (0..image.stations).map(|j| row_peak(image.row(j))).collect()
}

/// `A exp(−d²/(2σ²)) + c` about a fixed centre, σ in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub sigma: f64,
    pub baseline: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GaussianFit {
    pub fn eval(&self, d: f64) -> f64 {
        self.amplitude * (-d * d / (2.0 * self.sigma * self.sigma)).exp() + self.baseline
    }
}

/// Least-squares Gaussian over a cyclic row with the centre pinned at `mu`.
pub fn fit_gaussian(row: &[f64], mu: f64) -> GaussianFit {
    let t = row.len() as f64;
    let d: Vec<f64> = (0..row.len()).map(|k| wrap_delta(k as f64 - mu, t)).collect();
    let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    // Start σ from the mass above the minimum.
    let mass: f64 = row.iter().map(|a| a - lo).sum();
    let sigma0 = if hi > lo { (mass / ((hi - lo) * (2.0 * std::f64::consts::PI).sqrt())).max(0.5) } else { 1.0 };
    let mut p = Vector3::new(hi - lo, sigma0, lo);
    let cost = |p: &Vector3<f64>| -> f64 {
        d.iter()
            .zip(row)
            .map(|(&d, &y)| {
                let r = p[0] * (-d * d / (2.0 * p[1] * p[1])).exp() + p[2] - y;
                r * r
            })
            .sum()
    };
    let mut lambda = 1e-3;
    let mut current = cost(&p);
    let scale = current.max(f64::MIN_POSITIVE);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..FIT_ITERATIONS {
        iterations = it + 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&d, &y) in d.iter().zip(row) {
            let e = (-d * d / (2.0 * p[1] * p[1])).exp();
            let r = p[0] * e + p[2] - y;
            let g = Vector3::new(e, p[0] * e * d * d / p[1].powi(3), 1.0);
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            if trial[1] <= 0.0 {
                lambda *= 10.0;
                continue;
            }
            let c = cost(&trial);
            if c < current {
                let rel = (current - c) / scale;
                let small_step = step.norm() <= 1e-10 * (p.norm() + 1e-10);
                p = trial;
                current = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-14 || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step left: the fit sits at a minimum.
            converged = jtr.norm() <= 1e-8 * (jtj.norm() + 1.0) || current <= 1e-20 * scale;
            break;
        }
        if converged {
            break;
        }
    }
    GaussianFit { amplitude: p[0], sigma: p[1].abs(), baseline: p[2], iterations, converged }
}

/// A cyclic time interval in fractional frames; `end` may wrap past T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub start: f64,
    pub end: f64,
}

impl Band {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64, frames: f64) -> bool {
        let x = (t - self.start).rem_euclid(frames);
        x <= self.duration() + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionBand {
    pub station: usize,
    /// Peak time, fractional frames.
    pub peak: f64,
    pub fit: Option<GaussianFit>,
    /// t* ± σ of the fitted curve.
    pub sigma_band: Option<Band>,
    /// Contiguous run around the peak with area ≥ 0.75 max.
    pub p75_band: Band,
    /// Share of frames with area ≥ 0.75 max.
    pub p75_fraction: f64,
    /// Share of the cycle inside the one-σ band.
    pub sigma_fraction: Option<f64>,
    /// Fit failed or the two variants disagree by more than 10%.
    pub flagged: bool,
}

/// Both expansion-band variants for one row with a defined peak.
pub fn expansion_band(row: &[f64], station: usize, peak: f64) -> ExpansionBand {
    let t = row.len();
    let tf = t as f64;
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.75 * max;
    let p75_fraction = row.iter().filter(|&&a| a >= threshold).count() as f64 / tf;
    let p75_band = threshold_band(row, threshold);

    let fit = fit_gaussian(row, peak);
    let usable = fit.converged && fit.amplitude > 0.0 && fit.sigma.is_finite();
    let (fit, sigma_band, sigma_fraction) = if usable {
        let half = fit.sigma.min(0.5 * tf);
        let band = Band { start: peak - half, end: peak + half };
        (Some(fit), Some(band), Some(band.duration() / tf))
    } else {
        warn!("station {station}: Gaussian fit did not converge; only the 75% band is reported");
        (None, None, None)
    };
    let diverged = sigma_fraction.is_some_and(|s| (s - p75_fraction).abs() > BAND_DIVERGENCE * p75_fraction);
    ExpansionBand { station, peak, fit, sigma_band, p75_band, p75_fraction, sigma_fraction, flagged: !usable || diverged }
}

/// Run of samples at or above `threshold` around the row maximum, with the
/// edges placed at linearly interpolated crossings.
fn threshold_band(row: &[f64], threshold: f64) -> Band {
    let t = row.len();
    let tf = t as f64;
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = row.iter().position(|&a| a == max).unwrap_or(0);
    if row.iter().all(|&a| a >= threshold) {
        return Band { start: k as f64, end: k as f64 + tf };
    }
    let crossing = |inside: usize, outside: usize| {
        let (a, b) = (row[inside], row[outside]);
        if a == b {
            0.0
        } else {
            (a - threshold) / (a - b)
        }
    };
    let mut left = k;
    while row[(left + t - 1) % t] >= threshold {
        left = (left + t - 1) % t;
    }
    let lo = (left + t - 1) % t;
    let start = wrap_delta(left as f64 - k as f64, tf) + k as f64 - crossing(left, lo);
    let mut right = k;
    while row[(right + 1) % t] >= threshold {
        right = (right + 1) % t;
    }
    let hi = (right + 1) % t;
    let end = wrap_delta(right as f64 - k as f64, tf) + k as f64 + crossing(right, hi);
    Band { start, end }
}

/// Expansion bands of all rows with a defined peak.
pub fn expansion_bands(image: &AreaImage, peaks: &[Option<f64>]) -> Vec<Option<ExpansionBand>> {
    (0..image.stations).into_par_iter().map(|j| peaks[j].map(|p| expansion_band(image.row(j), j, p))).collect()
}

/// Share of the cycle spent expanded per station, for the 75% threshold and
/// the one-σ band.
pub fn percent_time_expanded(bands: &[Option<ExpansionBand>]) -> Vec<(Option<f64>, Option<f64>)> {
    bands.iter().map(|b| b.as_ref().map_or((None, None), |b| (Some(b.p75_fraction), b.sigma_fraction))).collect()
}

/// Per-pixel area gradient in physical units, with angle and a magnitude
/// normalized by the 99th percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientImage {
    pub stations: usize,
    pub frames: usize,
    /// ∂A/∂t, mm²/s.
    pub d_dt: Vec<f64>,
    /// ∂A/∂depth, mm²/mm.
    pub d_ddepth: Vec<f64>,
    /// atan2(∂A/∂depth, ∂A/∂t) in (−π, π].
    pub angle: Vec<f64>,
    /// |∇A| / p99(|∇A|), clamped to [0, 1].
    pub magnitude: Vec<f64>,
    /// The 99th percentile used for normalization.
    pub scale: f64,
}

/// Central differences, cyclic in time and one-sided at the tube ends.
pub fn area_gradient_image(image: &AreaImage) -> GradientImage {
    let (m, t) = (image.stations, image.frames);
    let mut d_dt = vec![0.0; m * t];
    let mut d_ddepth = vec![0.0; m * t];
    for j in 0..m {
        let (jm, jp) = (j.saturating_sub(1), (j + 1).min(m - 1));
        let dz = image.depth[jp] - image.depth[jm];
        for k in 0..t {
            let (km, kp) = ((k + t - 1) % t, (k + 1) % t);
            let span = if t > 1 { 2.0 * image.dt } else { 1.0 };
            d_dt[j * t + k] = if t > 1 { (image.get(j, kp) - image.get(j, km)) / span } else { 0.0 };
            d_ddepth[j * t + k] = if dz != 0.0 { (image.get(jp, k) - image.get(jm, k)) / dz } else { 0.0 };
        }
    }
    let raw: Vec<f64> = d_dt.iter().zip(&d_ddepth).map(|(a, b)| a.hypot(*b)).collect();
    let angle = d_dt.iter().zip(&d_ddepth).map(|(a, b)| b.atan2(*a)).collect();
    let scale = percentile(&raw, 0.99);
    let magnitude = raw.iter().map(|r| if scale > 0.0 { (r / scale).min(1.0) } else { 0.0 }).collect();
    GradientImage { stations: m, frames: t, d_dt, d_ddepth, angle, magnitude, scale }
}

/// Linear-interpolation percentile, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let x = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = x.floor() as usize;
    let f = x - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveStats {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    /// Sample standard deviation.
    pub std: f64,
    /// Depth between the outermost defined peaks over their delay.
    pub cycle: f64,
    /// Station pairs used.
    pub pairs: usize,
    /// Pairs skipped because their peaks coincide.
    pub simultaneous: usize,
}

/// Local speeds between consecutive stations with defined peaks, mm/s.
pub fn local_wave_speeds(peaks: &[Option<f64>], depth: &[f64], frames: usize, dt: f64) -> (Vec<f64>, usize) {
    let defined: Vec<(usize, f64)> = peaks.iter().enumerate().filter_map(|(j, p)| p.map(|p| (j, p))).collect();
    let mut speeds = Vec::new();
    let mut skipped = 0;
    for w in defined.windows(2) {
        let ((j0, t0), (j1, t1)) = (w[0], w[1]);
        let delay = wrap_delta(t1 - t0, frames as f64) * dt;
        if delay == 0.0 {
            skipped += 1;
            continue;
        }
        speeds.push((depth[j1] - depth[j0]) / delay);
    }
    (speeds, skipped)
}

pub fn wave_speed_stats(peaks: &[Option<f64>], depth: &[f64], frames: usize, dt: f64) -> Result<WaveStats> {
    let defined: Vec<(usize, f64)> = peaks.iter().enumerate().filter_map(|(j, p)| p.map(|p| (j, p))).collect();
    if defined.len() < 3 {
        return Err(Error::TooFewPeaks(defined.len()));
    }
    let (speeds, simultaneous) = local_wave_speeds(peaks, depth, frames, dt);
    if speeds.len() < 2 {
        return Err(Error::TooFewPeaks(speeds.len() + 1));
    }
    if simultaneous > 0 {
        warn!("{simultaneous} adjacent station pairs peak at the same time; their speeds are excluded");
    }
    let n = speeds.len() as f64;
    let avg = speeds.iter().sum::<f64>() / n;
    let std = (speeds.iter().map(|s| (s - avg).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let max = speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Unwrapped delay between the first and last defined peaks.
    let delay: f64 = defined.windows(2).map(|w| wrap_delta(w[1].1 - w[0].1, frames as f64)).sum::<f64>() * dt;
    let (first, last) = (defined[0].0, defined[defined.len() - 1].0);
    let cycle = if delay != 0.0 { (depth[last] - depth[first]) / delay } else { f64::INFINITY };
    Ok(WaveStats { min, max, avg, std, cycle, pairs: speeds.len(), simultaneous })
}

/// Expansion and contraction shares of the cycle from a volume series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRatios {
    pub expand: f64,
    pub contract: f64,
    /// expand / contract.
    pub ratio: f64,
    /// Seconds.
    pub period: f64,
    pub expand_time: f64,
    pub contract_time: f64,
    pub min_index: usize,
    pub max_index: usize,
}

pub fn cycle_phase_ratios(volumes: &[f64], period: f64) -> Result<PhaseRatios> {
    let map = align_cycle_by_volume(volumes, false)?;
    let expand = map.expansion_fraction();
    let contract = 1.0 - expand;
    Ok(PhaseRatios {
        expand,
        contract,
        ratio: if contract > 0.0 { expand / contract } else { f64::INFINITY },
        period,
        expand_time: expand * period,
        contract_time: contract * period,
        min_index: map.min_index,
        max_index: map.max_index,
    })
}
