//! Day preprocessing and dataset assembly: log/normalize the backscatter,
//! clip the LDR, cut each day into four overlapping quarters plus their
//! time-reversed copies, and build the four disjoint datasets.

use std::io::Write;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::lidar::{DayRecord, Grid, MaskGrid};
use crate::tensor::Tensor;

/// Geometry shared by preprocessing and both model builders. Every spatial
/// number in the networks derives from these fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleConfig {
    pub h_day: usize,
    pub w_day: usize,
    /// Height margin removed by the boundary convolution; its kernel is
    /// (margin + 1) x 1.
    pub margin: usize,
    pub quarter_width: usize,
    pub offsets: [usize; 4],
    pub base_channels: usize,
}

impl ScaleConfig {
    pub fn full() -> Self {
        ScaleConfig {
            h_day: 667,
            w_day: 2880,
            margin: 27,
            quarter_width: 800,
            offsets: [0, 680, 1400, 2080],
            base_channels: 16,
        }
    }

    pub fn desk() -> Self {
        ScaleConfig {
            h_day: 67,
            w_day: 344,
            margin: 3,
            quarter_width: 96,
            offsets: [0, 81, 166, 248],
            base_channels: 4,
        }
    }

    /// Height after the boundary convolution; divisible by 32 so five 2x2
    /// pools go through evenly.
    pub fn h0(&self) -> usize {
        self.h_day - self.margin
    }

    /// Spatial size of the flattening convolution kernel.
    pub fn flatten_kernel(&self) -> (usize, usize) {
        (self.h0() / 32, self.quarter_width / 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin + 1 >= self.h_day {
            return Err(Error::Config(format!(
                "margin {} too large for day height {}",
                self.margin, self.h_day
            )));
        }
        if self.h0() % 32 != 0 {
            return Err(Error::Config(format!(
                "h_day - margin = {} must be divisible by 32",
                self.h0()
            )));
        }
        if self.quarter_width % 32 != 0 {
            return Err(Error::Config(format!(
                "quarter width {} must be divisible by 32",
                self.quarter_width
            )));
        }
        if self.offsets[0] != 0 {
            return Err(Error::Config("first quarter offset must be 0".into()));
        }
        for i in 0..3 {
            if self.offsets[i + 1] <= self.offsets[i] {
                return Err(Error::Config("quarter offsets must be ascending".into()));
            }
            if self.offsets[i + 1] >= self.offsets[i] + self.quarter_width {
                return Err(Error::Config(format!(
                    "quarters {i} and {} must overlap",
                    i + 1
                )));
            }
        }
        if self.offsets[3] + self.quarter_width != self.w_day {
            return Err(Error::Config(format!(
                "last quarter must end at the day boundary: {} + {} != {}",
                self.offsets[3], self.quarter_width, self.w_day
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base channel count must be positive".into()));
        }
        Ok(())
    }
}

// ── value cleaning ─────────────────────────────────────────────────────────

/// Natural log of the positive finite values; everything else (missing, Inf,
/// NaN, non-positive) becomes the day's minimum log value.
pub fn log_fill(raw: &Grid<f32>) -> Result<Tensor> {
    let mut min_log = f64::INFINITY;
    for &v in &raw.data {
        let v = v as f64;
        if v.is_finite() && v > 0.0 {
            min_log = min_log.min(v.ln());
        }
    }
    if !min_log.is_finite() {
        return Err(Error::Validation(
            "degenerate day: no finite positive backscatter values".into(),
        ));
    }
    let data: Vec<f64> = raw
        .data
        .iter()
        .map(|&v| {
            let v = v as f64;
            if v.is_finite() && v > 0.0 {
                v.ln()
            } else {
                min_log
            }
        })
        .collect();
    Tensor::new(vec![raw.height, raw.width], data)
}

/// Full backscatter pipeline: log, fill, zero-center, unit variance. A day
/// that is constant after filling comes back as all zeros rather than an
/// error.
pub fn preprocess_backscatter(raw: &Grid<f32>) -> Result<Tensor> {
    let logged = log_fill(raw)?;
    let n = logged.numel() as f64;
    let mean: f64 = logged.data().iter().sum::<f64>() / n;
    let var: f64 = logged.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // Constant-day rule: a day with no spread (up to summation rounding)
    // maps to all zeros instead of dividing by ~0.
    let data: Vec<f64> = if std <= 1e-12 * (1.0 + mean.abs()) {
        vec![0.0; logged.numel()]
    } else {
        logged.data().iter().map(|v| (v - mean) / std).collect()
    };
    Tensor::new(logged.shape().to_vec(), data)
}

/// LDR cleaning: NaN and missing to 0, then clamp into [0,1].
pub fn preprocess_ldr(raw: &Grid<f32>) -> Tensor {
    let data: Vec<f64> = raw
        .data
        .iter()
        .map(|&v| {
            let v = v as f64;
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        })
        .collect();
    Tensor::new(vec![raw.height, raw.width], data).expect("grid shape")
}

// ── quartering ─────────────────────────────────────────────────────────────

/// Which day mask labels a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSource {
    pub day_id: String,
    pub quarter: usize,
    pub flipped: bool,
}

/// One preprocessed quarter-day: a (H_day, Wq, 2) image with channel 0 the
/// normalized log backscatter and channel 1 the clipped LDR, plus labels.
#[derive(Debug, Clone)]
pub struct QuarterSample {
    pub image: Tensor,
    pub has_cloud: bool,
    /// One-hot (H_day, Wq, 2) pixel labels; channel 1 is cloud.
    pub mask: Option<Tensor>,
    pub source: SampleSource,
}

/// Reverses the time axis (axis 1) of a rank-3 (H, W, C) tensor.
pub fn flip_time_axis(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for hi in 0..h {
        for wi in 0..w {
            let a = (hi * w + wi) * c;
            let b = (hi * w + (w - 1 - wi)) * c;
            out[b..b + c].copy_from_slice(&src[a..a + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn slice_image(bs: &Tensor, ldr: &Tensor, offset: usize, wq: usize) -> Tensor {
    let h = bs.shape()[0];
    let w = bs.shape()[1];
    let mut out = vec![0.0; h * wq * 2];
    let (bd, ld) = (bs.data(), ldr.data());
    for hi in 0..h {
        for wi in 0..wq {
            let idx = (hi * wq + wi) * 2;
            out[idx] = bd[hi * w + offset + wi];
            out[idx + 1] = ld[hi * w + offset + wi];
        }
    }
    Tensor::new(vec![h, wq, 2], out).expect("image shape")
}

fn slice_mask_one_hot(mask: &MaskGrid, offset: usize, wq: usize) -> (Tensor, bool) {
    let h = mask.height;
    let mut out = vec![0.0; h * wq * 2];
    let mut any = false;
    for hi in 0..h {
        for wi in 0..wq {
            let m = mask.get(hi, offset + wi);
            any |= m == 1;
            let idx = (hi * wq + wi) * 2;
            out[idx] = f64::from(m == 0);
            out[idx + 1] = f64::from(m == 1);
        }
    }
    (Tensor::new(vec![h, wq, 2], out).expect("mask shape"), any)
}

/// Preprocesses a day and returns its (backscatter, ldr) channel grids.
pub fn preprocess_day(day: &DayRecord) -> Result<(Tensor, Tensor)> {
    Ok((preprocess_backscatter(&day.backscatter)?, preprocess_ldr(&day.ldr)))
}

/// Cuts one day into its 4 overlapping quarters and their time-reversed
/// copies (8 samples), labeled from the requested mask source.
pub fn quarter_and_flip(
    day: &DayRecord,
    cfg: &ScaleConfig,
    source: MaskSource,
) -> Result<Vec<QuarterSample>> {
    cfg.validate()?;
    let (h, w) = day.dims();
    if h != cfg.h_day || w != cfg.w_day {
        return Err(Error::dim(
            "quarter_and_flip",
            format!("day {h}x{w} does not match scale {}x{}", cfg.h_day, cfg.w_day),
        ));
    }
    let mask = match source {
        MaskSource::Clean => day.clean_mask.as_ref(),
        MaskSource::Noisy => day.noisy_mask.as_ref(),
    }
    .ok_or_else(|| Error::Validation(format!("day {} lacks the requested mask", day.day_id)))?;
    let (bs, ldr) = preprocess_day(day)?;
    let mut out = Vec::with_capacity(8);
    for (q, &offset) in cfg.offsets.iter().enumerate() {
        let image = slice_image(&bs, &ldr, offset, cfg.quarter_width);
        let (mask_q, has_cloud) = slice_mask_one_hot(mask, offset, cfg.quarter_width);
        out.push(QuarterSample {
            image: image.clone(),
            has_cloud,
            mask: Some(mask_q.clone()),
            source: SampleSource {
                day_id: day.day_id.clone(),
                quarter: q,
                flipped: false,
            },
        });
        out.push(QuarterSample {
            image: flip_time_axis(&image),
            has_cloud,
            mask: Some(flip_time_axis(&mask_q)),
            source: SampleSource {
                day_id: day.day_id.clone(),
                quarter: q,
                flipped: true,
            },
        });
    }
    Ok(out)
}

// ── dataset assembly ───────────────────────────────────────────────────────

/// Day ranges (indices into the corpus) and sample quotas for the four
/// datasets. Ranges must be pairwise disjoint, which also keeps hand-labeled
/// training days out of the noisy set.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub classification_days: Range<usize>,
    pub noisy_days: Range<usize>,
    pub hand_days: Range<usize>,
    pub holdout_days: Range<usize>,
    /// The classification set is balanced: this many cloud samples and as
    /// many again without clouds.
    pub classification_per_class: usize,
    pub noisy_total: usize,
    pub hand_total: usize,
    pub holdout_total: usize,
}

impl SplitSpec {
    pub fn desk_default() -> Self {
        SplitSpec {
            classification_days: 0..30,
            noisy_days: 30..55,
            hand_days: 55..65,
            holdout_days: 65..70,
            classification_per_class: 80,
            noisy_total: 200,
            hand_total: 80,
            holdout_total: 40,
        }
    }

    pub fn full_default() -> Self {
        SplitSpec {
            classification_days: 0..250,
            noisy_days: 250..775,
            hand_days: 775..829,
            holdout_days: 829..857,
            classification_per_class: 890,
            noisy_total: 4200,
            hand_total: 432,
            holdout_total: 224,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            &self.classification_days,
            &self.noisy_days,
            &self.hand_days,
            &self.holdout_days,
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in ranges.iter().skip(i + 1) {
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Config(format!(
                        "day ranges overlap: {a:?} and {b:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-day window flags, enough to plan datasets without touching pixels.
#[derive(Debug, Clone)]
pub struct DayLabels {
    pub day_id: String,
    pub clean_quarter_cloud: [bool; 4],
    pub noisy_quarter_cloud: [bool; 4],
}

fn window_has_cloud(mask: &MaskGrid, offset: usize, wq: usize) -> bool {
    for hi in 0..mask.height {
        let row = &mask.data[hi * mask.width + offset..hi * mask.width + offset + wq];
        if row.iter().any(|&v| v == 1) {
            return true;
        }
    }
    false
}

pub fn day_labels(day: &DayRecord, cfg: &ScaleConfig) -> Result<DayLabels> {
    let clean = day
        .clean_mask
        .as_ref()
        .ok_or_else(|| Error::Assembly(format!("day {} has no clean mask", day.day_id)))?;
    let noisy = day
        .noisy_mask
        .as_ref()
        .ok_or_else(|| Error::Assembly(format!("day {} has no noisy mask", day.day_id)))?;
    let mut clean_q = [false; 4];
    let mut noisy_q = [false; 4];
    for (q, &off) in cfg.offsets.iter().enumerate() {
        clean_q[q] = window_has_cloud(clean, off, cfg.quarter_width);
        noisy_q[q] = window_has_cloud(noisy, off, cfg.quarter_width);
    }
    Ok(DayLabels {
        day_id: day.day_id.clone(),
        clean_quarter_cloud: clean_q,
        noisy_quarter_cloud: noisy_q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Classification,
    Noisy,
    HandLabeled,
    Holdout,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Classification => "classification",
            DatasetKind::Noisy => "noisy",
            DatasetKind::HandLabeled => "hand_labeled",
            DatasetKind::Holdout => "holdout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedSample {
    pub day_index: usize,
    pub quarter: usize,
    pub flipped: bool,
    pub has_cloud: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetPlan {
    pub classification: Vec<PlannedSample>,
    pub noisy: Vec<PlannedSample>,
    pub hand_labeled: Vec<PlannedSample>,
    pub holdout: Vec<PlannedSample>,
}

/// Selects samples for the four datasets from per-day window flags.
/// Classification is labeled and balanced by the noisy-mask flags; the other
/// three fill their quotas in canonical (day, quarter, flip) order.
pub fn plan_datasets(labels: &[DayLabels], spec: &SplitSpec) -> Result<DatasetPlan> {
    spec.validate()?;
    let max_day = [
        spec.classification_days.end,
        spec.noisy_days.end,
        spec.hand_days.end,
        spec.holdout_days.end,
    ]
    .into_iter()
    .max()
    .unwrap();
    if max_day > labels.len() {
        return Err(Error::Assembly(format!(
            "split needs {max_day} days, corpus has {}",
            labels.len()
        )));
    }

    let mut plan = DatasetPlan::default();
    let mut cloud_taken = 0usize;
    let mut clear_taken = 0usize;
    for day_index in spec.classification_days.clone() {
        for quarter in 0..4 {
            for flipped in [false, true] {
                let has_cloud = labels[day_index].noisy_quarter_cloud[quarter];
                if has_cloud && cloud_taken < spec.classification_per_class {
                    cloud_taken += 1;
                } else if !has_cloud && clear_taken < spec.classification_per_class {
                    clear_taken += 1;
                } else {
                    continue;
                }
                plan.classification.push(PlannedSample {
                    day_index,
                    quarter,
                    flipped,
                    has_cloud,
                });
            }
        }
    }
    if cloud_taken < spec.classification_per_class || clear_taken < spec.classification_per_class {
        return Err(Error::Assembly(format!(
            "classification balancing shortfall: {} of {} cloud, {} of {} clear",
            cloud_taken,
            spec.classification_per_class,
            clear_taken,
            spec.classification_per_class
        )));
    }

    let fill = |days: Range<usize>,
                    total: usize,
                    noisy_flags: bool,
                    which: &str|
     -> Result<Vec<PlannedSample>> {
        let mut out = Vec::with_capacity(total);
        'outer: for day_index in days {
            for quarter in 0..4 {
                for flipped in [false, true] {
                    if out.len() == total {
                        break 'outer;
                    }
                    let has_cloud = if noisy_flags {
                        labels[day_index].noisy_quarter_cloud[quarter]
                    } else {
                        labels[day_index].clean_quarter_cloud[quarter]
                    };
                    out.push(PlannedSample {
                        day_index,
                        quarter,
                        flipped,
                        has_cloud,
                    });
                }
            }
        }
        if out.len() < total {
            return Err(Error::Assembly(format!(
                "{which} dataset shortfall: wanted {total}, day range provides {}",
                out.len()
            )));
        }
        Ok(out)
    };
    plan.noisy = fill(spec.noisy_days.clone(), spec.noisy_total, true, "noisy")?;
    plan.hand_labeled = fill(spec.hand_days.clone(), spec.hand_total, false, "hand-labeled")?;
    plan.holdout = fill(spec.holdout_days.clone(), spec.holdout_total, false, "holdout")?;
    Ok(plan)
}

#[derive(Debug, Clone, Default)]
pub struct DatasetBundle {
    pub classification: Vec<QuarterSample>,
    pub noisy: Vec<QuarterSample>,
    pub hand_labeled: Vec<QuarterSample>,
    pub holdout: Vec<QuarterSample>,
}

impl DatasetBundle {
    pub fn iter_with_kind(&self) -> impl Iterator<Item = (DatasetKind, &QuarterSample)> {
        self.classification
            .iter()
            .map(|s| (DatasetKind::Classification, s))
            .chain(self.noisy.iter().map(|s| (DatasetKind::Noisy, s)))
            .chain(self.hand_labeled.iter().map(|s| (DatasetKind::HandLabeled, s)))
            .chain(self.holdout.iter().map(|s| (DatasetKind::Holdout, s)))
    }

    /// Manifest lines `day_id,quarter,flipped,dataset,has_cloud`.
    pub fn write_manifest(&self, mut w: impl Write) -> Result<()> {
        for (kind, s) in self.iter_with_kind() {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.source.day_id,
                s.source.quarter,
                u8::from(s.source.flipped),
                kind.as_str(),
                u8::from(s.has_cloud)
            )?;
        }
        Ok(())
    }
}

/// Plans and materializes the four datasets from a corpus.
pub fn assemble_datasets(
    corpus: &[DayRecord],
    cfg: &ScaleConfig,
    spec: &SplitSpec,
) -> Result<DatasetBundle> {
    cfg.validate()?;
    let labels: Vec<DayLabels> = corpus
        .iter()
        .map(|d| day_labels(d, cfg))
        .collect::<Result<_>>()?;
    let plan = plan_datasets(&labels, spec)?;

    let mut cache: Option<(usize, Tensor, Tensor)> = None;
    let mut materialize = |planned: &[PlannedSample],
                           source: Option<MaskSource>|
     -> Result<Vec<QuarterSample>> {
        let mut out = Vec::with_capacity(planned.len());
        for p in planned {
            let day = &corpus[p.day_index];
            if cache.as_ref().map(|(i, _, _)| *i) != Some(p.day_index) {
                let (bs, ldr) = preprocess_day(day)?;
                cache = Some((p.day_index, bs, ldr));
            }
            let (_, bs, ldr) = cache.as_ref().unwrap();
            let offset = cfg.offsets[p.quarter];
            let mut image = slice_image(bs, ldr, offset, cfg.quarter_width);
            let mut mask = match source {
                None => None,
                Some(MaskSource::Noisy) => {
                    let m = day.noisy_mask.as_ref().ok_or_else(|| {
                        Error::Assembly(format!("day {} has no noisy mask", day.day_id))
                    })?;
                    Some(slice_mask_one_hot(m, offset, cfg.quarter_width).0)
                }
                Some(MaskSource::Clean) => {
                    let m = day.clean_mask.as_ref().ok_or_else(|| {
                        Error::Assembly(format!("day {} has no clean mask", day.day_id))
                    })?;
                    Some(slice_mask_one_hot(m, offset, cfg.quarter_width).0)
                }
            };
            if p.flipped {
                image = flip_time_axis(&image);
                mask = mask.map(|m| flip_time_axis(&m));
            }
            out.push(QuarterSample {
                image,
                has_cloud: p.has_cloud,
                mask,
                source: SampleSource {
                    day_id: day.day_id.clone(),
                    quarter: p.quarter,
                    flipped: p.flipped,
                },
            });
        }
        Ok(out)
    };

    Ok(DatasetBundle {
        classification: materialize(&plan.classification, None)?,
        noisy: materialize(&plan.noisy, Some(MaskSource::Noisy))?,
        hand_labeled: materialize(&plan.hand_labeled, Some(MaskSource::Clean))?,
        holdout: materialize(&plan.holdout, Some(MaskSource::Clean))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::{generate_corpus, SyntheticSceneSpec};

    fn grid_f32(h: usize, w: usize, values: Vec<f32>) -> Grid<f32> {
        Grid::new(h, w, values).unwrap()
    }

    #[test]
    fn constant_day_normalizes_to_zeros() {
        let e = std::f64::consts::E as f32;
        let raw = grid_f32(2, 3, vec![e; 6]);
        let out = preprocess_backscatter(&raw).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_normalization() {
        let raw = grid_f32(1, 2, vec![std::f64::consts::E as f32, (std::f64::consts::E.powi(3)) as f32]);
        let out = preprocess_backscatter(&raw).unwrap();
        assert!((out.data()[0] + 1.0).abs() <= 1e-5, "{:?}", out.data());
        assert!((out.data()[1] - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn nan_heavy_day_still_standardizes() {
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64
        };
        let data: Vec<f32> = (0..40 * 50)
            .map(|_| {
                let u = next();
                if u < 0.05 {
                    f32::NAN
                } else {
                    (0.01 * (1.0 + u)) as f32
                }
            })
            .collect();
        let out = preprocess_backscatter(&grid_f32(40, 50, data)).unwrap();
        let n = out.numel() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 1e-6, "std {}", var.sqrt());
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_property_over_random_days() {
        let template = SyntheticSceneSpec::desk(0);
        let corpus = generate_corpus(&template, 50, 555).unwrap();
        for day in &corpus {
            let out = preprocess_backscatter(&day.backscatter).unwrap();
            let n = out.numel() as f64;
            let mean: f64 = out.data().iter().sum::<f64>() / n;
            let var: f64 =
                out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-6);
            assert!((var.sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn all_invalid_backscatter_is_a_degenerate_day() {
        let raw = grid_f32(1, 3, vec![f32::NAN, -1.0, 0.0]);
        assert!(matches!(
            preprocess_backscatter(&raw),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn ldr_rule_applied_directly() {
        let raw = grid_f32(1, 4, vec![-0.5, 0.3, 1.7, f32::NAN]);
        let out = preprocess_ldr(&raw);
        assert_eq!(out.data(), &[0.0, 0.3f32 as f64, 1.0, 0.0]);
        let zeros = preprocess_ldr(&grid_f32(2, 2, vec![0.0; 4]));
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ldr_output_stays_in_unit_range() {
        let template = SyntheticSceneSpec::desk(3);
        let day = crate::lidar::generate_day(&template, "d").unwrap();
        let out = preprocess_ldr(&day.ldr);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scale_configs_validate_and_desk_flatten_kernel() {
        ScaleConfig::full().validate().unwrap();
        ScaleConfig::desk().validate().unwrap();
        assert_eq!(ScaleConfig::full().flatten_kernel(), (20, 25));
        assert_eq!(ScaleConfig::desk().flatten_kernel(), (2, 3));
        let mut bad = ScaleConfig::desk();
        bad.quarter_width = 100;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quarter_windows_cover_the_day_and_overlap() {
        for cfg in [ScaleConfig::full(), ScaleConfig::desk()] {
            let mut covered = vec![false; cfg.w_day];
            for &off in &cfg.offsets {
                for c in covered.iter_mut().skip(off).take(cfg.quarter_width) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "gap in coverage");
            for i in 0..3 {
                assert!(cfg.offsets[i + 1] < cfg.offsets[i] + cfg.quarter_width);
            }
        }
        assert_eq!(ScaleConfig::full().offsets, [0, 680, 1400, 2080]);
    }

    fn synthetic_full_day_with_cloud(bins: Range<usize>) -> DayRecord {
        let cfg = ScaleConfig::full();
        let (h, w) = (cfg.h_day, cfg.w_day);
        let bs: Vec<f32> = (0..h * w).map(|i| 0.01 + (i % 7) as f32 * 1e-4).collect();
        let mut clean = Grid::filled(h, w, 0u8);
        for t in bins {
            for hi in 100..120 {
                clean.set(hi, t, 1);
            }
        }
        DayRecord {
            day_id: "full".into(),
            backscatter: Grid::new(h, w, bs).unwrap(),
            ldr: Grid::filled(h, w, 0.1f32),
            noisy_mask: Some(clean.clone()),
            clean_mask: Some(clean),
        }
    }

    #[test]
    fn full_scale_day_yields_8_samples_with_quarter0_spanning_800_bins() {
        let day = synthetic_full_day_with_cloud(10..20);
        let cfg = ScaleConfig::full();
        let samples = quarter_and_flip(&day, &cfg, MaskSource::Clean).unwrap();
        assert_eq!(samples.len(), 8);
        assert_eq!(samples[0].image.shape(), &[667, 800, 2]);
        assert_eq!(samples[0].source.quarter, 0);
        assert!(!samples[0].source.flipped);
        assert!(samples[1].source.flipped);
    }

    #[test]
    fn cloud_in_overlap_region_flags_quarters_0_and_1() {
        let day = synthetic_full_day_with_cloud(700..750);
        let cfg = ScaleConfig::full();
        let samples = quarter_and_flip(&day, &cfg, MaskSource::Clean).unwrap();
        let cloud_by_quarter: Vec<bool> = (0..4)
            .map(|q| {
                samples
                    .iter()
                    .find(|s| s.source.quarter == q && !s.source.flipped)
                    .unwrap()
                    .has_cloud
            })
            .collect();
        assert_eq!(cloud_by_quarter, vec![true, true, false, false]);
    }

    #[test]
    fn flip_is_column_reversal_and_involution() {
        let day = synthetic_full_day_with_cloud(100..130);
        let cfg = ScaleConfig::full();
        let samples = quarter_and_flip(&day, &cfg, MaskSource::Clean).unwrap();
        let plain = &samples[0];
        let flipped = &samples[1];
        let (w, c) = (800, 2);
        for hi in [0usize, 13, 666] {
            for wi in [0usize, 1, 400, 799] {
                for ch in 0..c {
                    let a = plain.image.data()[(hi * w + wi) * c + ch];
                    let b = flipped.image.data()[(hi * w + (w - 1 - wi)) * c + ch];
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        let twice = flip_time_axis(&flip_time_axis(&plain.image));
        assert_eq!(twice.data(), plain.image.data());
    }

    #[test]
    fn desk_assembly_hits_default_counts_and_is_disjoint() {
        let template = SyntheticSceneSpec::desk(0);
        let corpus = generate_corpus(&template, 80, 7).unwrap();
        let bundle =
            assemble_datasets(&corpus, &ScaleConfig::desk(), &SplitSpec::desk_default()).unwrap();
        assert_eq!(bundle.classification.len(), 160);
        assert_eq!(bundle.noisy.len(), 200);
        assert_eq!(bundle.hand_labeled.len(), 80);
        assert_eq!(bundle.holdout.len(), 40);
        let cloud = bundle.classification.iter().filter(|s| s.has_cloud).count();
        assert_eq!(cloud, 80, "classification set must be balanced");
        let mut seen = std::collections::HashSet::new();
        for (_, s) in bundle.iter_with_kind() {
            let key = (s.source.day_id.clone(), s.source.quarter, s.source.flipped);
            assert!(seen.insert(key), "duplicate sample across datasets");
        }
    }

    #[test]
    fn all_clear_corpus_fails_with_cloud_shortfall() {
        let mut template = SyntheticSceneSpec::desk(0);
        template.cloud_count = (0, 0);
        let corpus = generate_corpus(&template, 80, 3).unwrap();
        let err = assemble_datasets(&corpus, &ScaleConfig::desk(), &SplitSpec::desk_default())
            .unwrap_err();
        assert!(err.to_string().contains("shortfall"), "{err}");
    }

    #[test]
    fn full_scale_plan_reproduces_paper_dataset_sizes() {
        // Stub labels only; no pixels are materialized at full scale.
        let mut labels = Vec::new();
        for i in 0..857 {
            let cloudy = [i % 2 == 0, true, i % 3 != 0, false];
            labels.push(DayLabels {
                day_id: format!("day{i:04}"),
                clean_quarter_cloud: cloudy,
                noisy_quarter_cloud: cloudy,
            });
        }
        let plan = plan_datasets(&labels, &SplitSpec::full_default()).unwrap();
        assert_eq!(plan.classification.len(), 1780);
        assert_eq!(plan.noisy.len(), 4200);
        assert_eq!(plan.hand_labeled.len(), 432);
        assert_eq!(plan.holdout.len(), 224);
        let cloud = plan.classification.iter().filter(|s| s.has_cloud).count();
        assert_eq!(cloud, 890);
    }

    #[test]
    fn overlapping_split_ranges_are_rejected() {
        let mut spec = SplitSpec::desk_default();
        spec.noisy_days = 25..55;
        assert!(spec.validate().is_err());
    }
}
