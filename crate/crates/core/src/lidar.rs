//! Day-long lidar records, a synthetic scene generator, mask degradation,
//! and the slope-based baseline detector.
//!
//! Grids are row-major with axis 0 = height (range bins, bottom-up) and
//! axis 1 = time, so a full-scale day is 667 x 2880. Missing values are NaN
//! both in memory and on disk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::ScaleConfig;
use crate::tensor::Tensor;

/// Dense 2D grid, height-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type MaskGrid = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(
                "grid",
                format!("{height}x{width} wants {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> T {
        self.data[h * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, value: T) {
        self.data[h * self.width + w] = value;
    }
}

impl MaskGrid {
    pub fn validate_binary(&self) -> Result<()> {
        if self.data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask contains values outside {0,1}".into()));
        }
        Ok(())
    }

    pub fn cloud_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len() as f64
    }
}

/// One day of lidar data.
#[derive(Debug, Clone)]
pub struct DayRecord {
    pub day_id: String,
    pub backscatter: Grid<f32>,
    pub ldr: Grid<f32>,
    /// Hand-label stand-in.
    pub clean_mask: Option<MaskGrid>,
    /// Operational-product stand-in, derived by [`degrade_mask`].
    pub noisy_mask: Option<MaskGrid>,
}

impl DayRecord {
    pub fn dims(&self) -> (usize, usize) {
        (self.backscatter.height, self.backscatter.width)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

/// Parameters of [`degrade_mask`], the stand-in for the operational
/// product's oversampling and gap artifacts.
#[derive(Debug, Clone, Copy)]
pub struct DegradeSpec {
    pub dilate_radius: usize,
    pub merge_gap: usize,
    pub column_drop_prob: f64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            dilate_radius: 2,
            merge_gap: 3,
            column_drop_prob: 0.02,
        }
    }
}

/// Synthetic scene description. Clouds are smooth elliptical-Gaussian bumps
/// in linear backscatter with an LDR fill determined by phase; the clean
/// mask marks pixels where a cloud's contribution exceeds half its peak.
#[derive(Debug, Clone)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Inclusive cloud count range.
    pub cloud_count: (usize, usize),
    pub cloud_height_sigma: Range,
    pub cloud_time_sigma: Range,
    /// Peak backscatter added by a cloud, linear units.
    pub cloud_intensity: Range,
    pub ice_probability: f64,
    pub liquid_ldr: f64,
    pub ice_ldr: f64,
    /// Background backscatter level, linear units; sampled once per day.
    pub background: Range,
    /// Log-space standard deviation of the multiplicative background noise;
    /// sampled once per day.
    pub noise_sigma: Range,
    pub aerosol_probability: f64,
    /// Scale height of the near-surface aerosol layer, in range bins.
    pub aerosol_height: Range,
    pub aerosol_intensity: Range,
    /// Multiplier applied above optically thick clouds.
    pub attenuation_factor: f64,
    /// Intensity above which a cloud attenuates the signal above it.
    pub thick_threshold: f64,
    /// Fraction of cells replaced by NaN, independently per channel.
    pub missing_fraction: f64,
    pub degrade: DegradeSpec,
}

impl SyntheticSceneSpec {
    /// Defaults for a grid of the given scale.
    pub fn for_scale(cfg: &ScaleConfig, seed: u64) -> Self {
        let s = cfg.h_day as f64 / 67.0;
        SyntheticSceneSpec {
            height: cfg.h_day,
            width: cfg.w_day,
            seed,
            cloud_count: (0, 4),
            cloud_height_sigma: Range::new(5.0 * s, 11.0 * s),
            cloud_time_sigma: Range::new(16.0 * (cfg.w_day as f64 / 344.0), 44.0 * (cfg.w_day as f64 / 344.0)),
            cloud_intensity: Range::new(0.3, 5.0),
            ice_probability: 0.5,
            liquid_ldr: 0.05,
            ice_ldr: 0.4,
            background: Range::new(0.005, 0.02),
            noise_sigma: Range::new(0.25, 0.45),
            aerosol_probability: 0.7,
            aerosol_height: Range::new(5.0 * s, 12.0 * s),
            aerosol_intensity: Range::new(0.05, 0.4),
            attenuation_factor: 0.3,
            thick_threshold: 2.0,
            missing_fraction: 0.01,
            degrade: DegradeSpec::default(),
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self::for_scale(&ScaleConfig::desk(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        let half_peak = |sigma: f64| sigma * (2.0 * std::f64::consts::LN_2).sqrt();
        if 2.0 * half_peak(self.cloud_height_sigma.hi) >= self.height as f64 {
            return Err(Error::Config(format!(
                "cloud height extent {} exceeds grid height {}",
                2.0 * half_peak(self.cloud_height_sigma.hi),
                self.height
            )));
        }
        if 2.0 * half_peak(self.cloud_time_sigma.hi) >= self.width as f64 {
            return Err(Error::Config(format!(
                "cloud time extent {} exceeds grid width {}",
                2.0 * half_peak(self.cloud_time_sigma.hi),
                self.width
            )));
        }
        if self.cloud_height_sigma.lo <= 0.0 || self.cloud_time_sigma.lo <= 0.0 {
            return Err(Error::Config("cloud extents must be positive".into()));
        }
        if self.liquid_ldr >= self.ice_ldr {
            return Err(Error::Config(format!(
                "liquid LDR {} must be below ice LDR {}",
                self.liquid_ldr, self.ice_ldr
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_fraction)
            || !(0.0..=1.0).contains(&self.aerosol_probability)
            || !(0.0..=1.0).contains(&self.ice_probability)
        {
            return Err(Error::Config("probabilities must lie in [0,1]".into()));
        }
        if self.cloud_count.0 > self.cloud_count.1 {
            return Err(Error::Config("cloud count range inverted".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller, driven by the scene rng.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Cloud {
    center_h: f64,
    center_t: f64,
    sigma_h: f64,
    sigma_t: f64,
    intensity: f64,
    ldr_level: f64,
}

/// Vertical sharpness of the cloud base, in range bins. Lidar cloud bases
/// are near step edges; tops decay smoothly.
const BASE_SIGMA: f64 = 0.7;

impl Cloud {
    /// Elliptical-Gaussian bump with a sharpened base: above the half-peak
    /// base edge the profile is the plain Gaussian; below it the signal cuts
    /// off within a bin or two. Peak value is 1 at the center.
    fn profile(&self, h: f64, t: f64) -> f64 {
        let dt = t - self.center_t;
        let q_t = dt * dt / (2.0 * self.sigma_t * self.sigma_t);
        let base_edge = self.center_h - (2.0 * std::f64::consts::LN_2).sqrt() * self.sigma_h;
        let q_h = if h >= base_edge {
            let dh = h - self.center_h;
            dh * dh / (2.0 * self.sigma_h * self.sigma_h)
        } else {
            let db = base_edge - h;
            std::f64::consts::LN_2 + db * db / (2.0 * BASE_SIGMA * BASE_SIGMA)
        };
        (-(q_h + q_t)).exp()
    }
}

/// Renders one synthetic day. Identical specs produce bitwise-identical
/// records.
pub fn generate_day(spec: &SyntheticSceneSpec, day_id: impl Into<String>) -> Result<DayRecord> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Background: multiplicative log-normal noise around a per-day level.
    let background = spec.background.sample(&mut rng);
    let noise_sigma = spec.noise_sigma.sample(&mut rng);
    let mut linear = vec![0.0f64; h * w];
    for v in linear.iter_mut() {
        *v = background * (noise_sigma * normal(&mut rng)).exp();
    }
    let mut ldr = vec![0.0f64; h * w];
    for v in ldr.iter_mut() {
        *v = (0.02 * normal(&mut rng)).abs().min(1.0);
    }

    // Clouds.
    let count = if spec.cloud_count.0 == spec.cloud_count.1 {
        spec.cloud_count.0
    } else {
        rng.gen_range(spec.cloud_count.0..=spec.cloud_count.1)
    };
    let half = (2.0 * std::f64::consts::LN_2).sqrt();
    let mut clouds = Vec::with_capacity(count);
    for _ in 0..count {
        let sigma_h = spec.cloud_height_sigma.sample(&mut rng);
        let sigma_t = spec.cloud_time_sigma.sample(&mut rng);
        let ext_h = half * sigma_h;
        let ext_t = half * sigma_t;
        let center_h = rng.gen_range(ext_h..(h as f64 - ext_h));
        let center_t = rng.gen_range(ext_t..(w as f64 - ext_t));
        let intensity = spec.cloud_intensity.sample(&mut rng);
        let ldr_level = if rng.gen::<f64>() < spec.ice_probability {
            spec.ice_ldr
        } else {
            spec.liquid_ldr
        };
        clouds.push(Cloud {
            center_h,
            center_t,
            sigma_h,
            sigma_t,
            intensity,
            ldr_level,
        });
    }

    let mut clean = vec![0u8; h * w];
    for cloud in &clouds {
        for hi in 0..h {
            for ti in 0..w {
                let contribution = cloud.intensity * cloud.profile(hi as f64, ti as f64);
                let idx = hi * w + ti;
                linear[idx] += contribution;
                // Mask where this cloud exceeds half its peak.
                if contribution >= cloud.intensity * 0.5 {
                    clean[idx] = 1;
                    ldr[idx] = (cloud.ldr_level + 0.03 * normal(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Attenuation above optically thick clouds.
    for cloud in &clouds {
        if cloud.intensity < spec.thick_threshold {
            continue;
        }
        let top = (cloud.center_h + half * cloud.sigma_h).ceil() as usize;
        let t_lo = (cloud.center_t - half * cloud.sigma_t).floor().max(0.0) as usize;
        let t_hi = ((cloud.center_t + half * cloud.sigma_t).ceil() as usize).min(w - 1);
        for ti in t_lo..=t_hi {
            for hi in (top + 1)..h {
                linear[hi * w + ti] *= spec.attenuation_factor;
            }
        }
    }

    // Near-surface aerosol layer: backscatter only, LDR stays low.
    if rng.gen::<f64>() < spec.aerosol_probability {
        let scale_h = spec.aerosol_height.sample(&mut rng);
        let intensity = spec.aerosol_intensity.sample(&mut rng);
        for ti in 0..w {
            let wobble = 1.0 + 0.2 * normal(&mut rng);
            for hi in 0..h {
                let z = hi as f64 / scale_h;
                linear[hi * w + ti] += intensity * wobble.max(0.0) * (-z * z / 2.0).exp();
            }
        }
    }

    // Missing-value markers.
    let mut bs: Vec<f32> = linear.iter().map(|&v| v as f32).collect();
    for v in bs.iter_mut() {
        if rng.gen::<f64>() < spec.missing_fraction {
            *v = f32::NAN;
        }
    }
    let mut ldr32: Vec<f32> = ldr.iter().map(|&v| v as f32).collect();
    for v in ldr32.iter_mut() {
        if rng.gen::<f64>() < spec.missing_fraction {
            *v = f32::NAN;
        }
    }

    let clean = Grid::new(h, w, clean)?;
    let mut degrade_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5EED_F00D));
    let noisy = degrade_mask(
        &clean,
        spec.degrade.dilate_radius,
        spec.degrade.merge_gap,
        spec.degrade.column_drop_prob,
        &mut degrade_rng,
    )?;

    Ok(DayRecord {
        day_id: day_id.into(),
        backscatter: Grid::new(h, w, bs)?,
        ldr: Grid::new(h, w, ldr32)?,
        clean_mask: Some(clean),
        noisy_mask: Some(noisy),
    })
}

/// Generates a seeded corpus; day k uses seed `corpus_seed + k`, so any
/// parallel generation order yields the same records.
pub fn generate_corpus(
    template: &SyntheticSceneSpec,
    days: usize,
    corpus_seed: u64,
) -> Result<Vec<DayRecord>> {
    (0..days)
        .map(|k| {
            let mut spec = template.clone();
            spec.seed = corpus_seed.wrapping_add(k as u64);
            generate_day(&spec, format!("day{k:04}"))
        })
        .collect()
}

/// Oversamples a clean mask the way the operational product does: square
/// dilation by `dilate_radius`, then per-column filling of vertical gaps of
/// at most `merge_gap` bins between cloud runs, then (optionally) dropping
/// whole time columns with probability `column_drop_prob`.
///
/// With `column_drop_prob == 0` the output is a superset of the input.
pub fn degrade_mask(
    clean: &MaskGrid,
    dilate_radius: usize,
    merge_gap: usize,
    column_drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskGrid> {
    if !(0.0..=1.0).contains(&column_drop_prob) {
        return Err(Error::Config(format!(
            "column_drop_prob {column_drop_prob} not in [0,1]"
        )));
    }
    clean.validate_binary()?;
    let (h, w) = (clean.height, clean.width);
    let r = dilate_radius as isize;
    let mut out = Grid::filled(h, w, 0u8);
    // Square (Chebyshev) dilation, clipped at the borders.
    for hi in 0..h {
        for ti in 0..w {
            if clean.get(hi, ti) == 0 {
                continue;
            }
            let h_lo = (hi as isize - r).max(0) as usize;
            let h_hi = ((hi as isize + r) as usize).min(h - 1);
            let t_lo = (ti as isize - r).max(0) as usize;
            let t_hi = ((ti as isize + r) as usize).min(w - 1);
            for hh in h_lo..=h_hi {
                for tt in t_lo..=t_hi {
                    out.set(hh, tt, 1);
                }
            }
        }
    }
    // Merge vertical gaps within each time column.
    if merge_gap > 0 {
        for ti in 0..w {
            let mut hi = 0;
            while hi < h {
                if out.get(hi, ti) == 1 {
                    // End of this run.
                    let mut run_end = hi;
                    while run_end + 1 < h && out.get(run_end + 1, ti) == 1 {
                        run_end += 1;
                    }
                    // Gap to the next run, if any.
                    let mut gap_end = run_end + 1;
                    while gap_end < h && out.get(gap_end, ti) == 0 {
                        gap_end += 1;
                    }
                    if gap_end < h && gap_end - run_end - 1 <= merge_gap {
                        for hh in (run_end + 1)..gap_end {
                            out.set(hh, ti, 1);
                        }
                    }
                    hi = run_end + 1;
                } else {
                    hi += 1;
                }
            }
        }
    }
    // Column dropout mimics the product's vertical gaps.
    if column_drop_prob > 0.0 {
        for ti in 0..w {
            if rng.gen::<f64>() < column_drop_prob {
                for hi in 0..h {
                    out.set(hi, ti, 0);
                }
            }
        }
    }
    Ok(out)
}

pub const DEFAULT_SLOPE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_EXTINCTION_RATIO_THRESHOLD: f64 = 2.0;

/// Slope-based cloud detector over a log-space backscatter grid (rank-2
/// tensor, height x time). Per time column: a cloud base is declared where
/// the vertical first difference exceeds `slope_threshold`; the candidate
/// run extends upward while the signal stays above the pre-cloud level, and
/// is kept only if its mean excess over that level reaches
/// `extinction_ratio_threshold` (both in log units).
///
/// Uses differences only, so adding a constant to the whole grid changes
/// nothing. The input must already be log-transformed and missing-filled;
/// any NaN is a validation error.
pub fn slope_baseline(
    log_backscatter: &Tensor,
    slope_threshold: f64,
    extinction_ratio_threshold: f64,
) -> Result<MaskGrid> {
    let shape = log_backscatter.shape();
    if shape.len() != 2 {
        return Err(Error::dim(
            "slope_baseline",
            format!("expected rank-2 grid, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let x = log_backscatter.data();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "slope_baseline input contains NaN/Inf; preprocess it first".into(),
        ));
    }
    let mut mask = Grid::filled(h, w, 0u8);
    for t in 0..w {
        let at = |hi: usize| x[hi * w + t];
        let mut hi = 0;
        while hi + 1 < h {
            if at(hi + 1) - at(hi) >= slope_threshold {
                let pre = at(hi);
                let base = hi + 1;
                let mut top = base;
                while top + 1 < h && at(top + 1) > pre {
                    top += 1;
                }
                let mean: f64 =
                    (base..=top).map(at).sum::<f64>() / (top - base + 1) as f64;
                if mean - pre >= extinction_ratio_threshold {
                    for hh in base..=top {
                        mask.set(hh, t, 1);
                    }
                }
                hi = top + 1;
            } else {
                hi += 1;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_clouds_means_empty_clean_mask() {
        let mut spec = SyntheticSceneSpec::desk(1);
        spec.cloud_count = (0, 0);
        spec.aerosol_probability = 0.0;
        let day = generate_day(&spec, "d").unwrap();
        assert!(day.clean_mask.unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_cloud_mask_contains_its_center() {
        let mut spec = SyntheticSceneSpec::desk(5);
        spec.cloud_count = (1, 1);
        spec.missing_fraction = 0.0;
        let day = generate_day(&spec, "d").unwrap();
        let clean = day.clean_mask.unwrap();
        assert!(clean.data.iter().any(|&v| v == 1));
        // The peak backscatter cell must be masked (it is the cloud center
        // up to background noise).
        let (mut best, mut best_idx) = (f32::MIN, 0);
        for (i, &v) in day.backscatter.data.iter().enumerate() {
            if v.is_finite() && v > best {
                best = v;
                best_idx = i;
            }
        }
        assert_eq!(clean.data[best_idx], 1);
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let spec = SyntheticSceneSpec::desk(99);
        let a = generate_day(&spec, "d").unwrap();
        let b = generate_day(&spec, "d").unwrap();
        // Bitwise: compare the raw bit patterns so NaNs compare equal.
        let bits = |g: &Grid<f32>| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.backscatter), bits(&b.backscatter));
        assert_eq!(bits(&a.ldr), bits(&b.ldr));
        assert_eq!(a.clean_mask.unwrap().data, b.clean_mask.unwrap().data);
        assert_eq!(a.noisy_mask.unwrap().data, b.noisy_mask.unwrap().data);
    }

    #[test]
    fn oversized_cloud_extent_is_rejected() {
        let mut spec = SyntheticSceneSpec::desk(1);
        spec.cloud_height_sigma = Range::new(3.0, 80.0);
        assert!(matches!(generate_day(&spec, "d"), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_calibration_band() {
        // 100 default desk days: aggregate cloud-pixel fraction in [0.02, 0.12].
        let template = SyntheticSceneSpec::desk(0);
        let corpus = generate_corpus(&template, 100, 2024).unwrap();
        let (mut cloud, mut total) = (0usize, 0usize);
        for day in &corpus {
            let m = day.clean_mask.as_ref().unwrap();
            cloud += m.data.iter().filter(|&&v| v == 1).count();
            total += m.data.len();
        }
        let fraction = cloud as f64 / total as f64;
        assert!(
            (0.02..=0.12).contains(&fraction),
            "cloud fraction {fraction} outside calibration band"
        );
    }

    #[test]
    fn degrade_identity_when_all_parameters_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = Grid::filled(8, 8, 0u8);
        mask.set(3, 4, 1);
        mask.set(6, 1, 1);
        let out = degrade_mask(&mask, 0, 0, 0.0, &mut rng).unwrap();
        assert_eq!(out.data, mask.data);
    }

    #[test]
    fn degrade_dilates_a_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = Grid::filled(9, 9, 0u8);
        for hi in 3..6 {
            for ti in 3..6 {
                mask.set(hi, ti, 1);
            }
        }
        let out = degrade_mask(&mask, 1, 0, 0.0, &mut rng).unwrap();
        let expected: usize = 25;
        assert_eq!(out.data.iter().filter(|&&v| v == 1).count(), expected);
        for hi in 2..7 {
            for ti in 2..7 {
                assert_eq!(out.get(hi, ti), 1);
            }
        }
    }

    #[test]
    fn degrade_merges_small_vertical_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = Grid::filled(10, 1, 0u8);
        mask.set(2, 0, 1);
        mask.set(3, 0, 1);
        // gap of 2 bins (4, 5)
        mask.set(6, 0, 1);
        let out = degrade_mask(&mask, 0, 3, 0.0, &mut rng).unwrap();
        for hi in 2..=6 {
            assert_eq!(out.get(hi, 0), 1, "bin {hi} should be merged");
        }
        assert_eq!(out.get(1, 0), 0);
        assert_eq!(out.get(7, 0), 0);
    }

    #[test]
    fn degrade_without_dropout_is_superset() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for trial in 0..100 {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(trial);
            let data: Vec<u8> = (0..12 * 20)
                .map(|_| u8::from(mask_rng.gen::<f64>() < 0.2))
                .collect();
            let mask = Grid::new(12, 20, data).unwrap();
            let out = degrade_mask(&mask, 2, 3, 0.0, &mut rng).unwrap();
            for (o, m) in out.data.iter().zip(&mask.data) {
                assert!(o >= m, "degraded mask lost a cloud pixel");
            }
        }
    }

    #[test]
    fn baseline_constant_input_is_all_clear() {
        let grid = Tensor::filled(vec![20, 5], -3.2);
        let mask = slope_baseline(&grid, 1.0, 1.0).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn baseline_detects_a_step_edge_column() {
        // One column: background -4, bins 8..=12 at 1.0 (jump of 5), then
        // attenuated below background.
        let h = 20;
        let mut col = vec![-4.0; h];
        for v in col.iter_mut().take(13).skip(8) {
            *v = 1.0;
        }
        for v in col.iter_mut().skip(13) {
            *v = -5.0;
        }
        let grid = Tensor::new(vec![h, 1], col).unwrap();
        let mask = slope_baseline(&grid, 2.0, 1.0).unwrap();
        for hi in 0..h {
            let expect = u8::from((8..=12).contains(&hi));
            assert_eq!(mask.get(hi, 0), expect, "bin {hi}");
        }
    }

    #[test]
    fn baseline_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..30 * 7).map(|_| rng.gen_range(-1.0..6.0)).collect();
        let grid = Tensor::new(vec![30, 7], data.clone()).unwrap();
        let shifted =
            Tensor::new(vec![30, 7], data.iter().map(|v| v + 42.0).collect()).unwrap();
        let a = slope_baseline(&grid, 1.5, 1.0).unwrap();
        let b = slope_baseline(&shifted, 1.5, 1.0).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn baseline_rejects_nan() {
        let grid = Tensor::new(vec![2, 2], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(
            slope_baseline(&grid, 1.0, 1.0),
            Err(Error::Validation(_))
        ));
    }
}
