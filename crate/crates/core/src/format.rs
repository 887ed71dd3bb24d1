//! On-disk formats.
//!
//! Day records use the `MPLB` container: magic `MPLB`, u32 LE version = 1,
//! u8 grid count, then per grid a u8 kind (0 backscatter, 1 ldr, 2 clean
//! mask, 3 noisy mask), u8 element type (0 = f32 LE, 1 = u8), u32 LE height,
//! u32 LE width, and the height-major payload. Masks are u8; measurement
//! grids are f32 and keep their NaN positions bit-for-bit.
//!
//! Checkpoints use the `MPLP` container: magic, u32 LE version = 1, u16 LE
//! tensor count, then per tensor a u16 LE name length, the UTF-8 name, u8
//! rank, u32 LE dims, and the f32 LE payload. A plain-text `.meta` sidecar
//! carries the scale geometry and seed.
//!
//! Writers go through a temp file in the target directory and rename on
//! success, so a failed write leaves no partial artifact.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lidar::{DayRecord, Grid, MaskGrid};
use crate::nn::{BatchNormParams, LayerParams, ModelParams};
use crate::preprocess::ScaleConfig;
use crate::tensor::Tensor;

pub const MPLB_MAGIC: [u8; 4] = *b"MPLB";
pub const MPLB_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPLP";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_BACKSCATTER: u8 = 0;
const KIND_LDR: u8 = 1;
const KIND_CLEAN_MASK: u8 = 2;
const KIND_NOISY_MASK: u8 = 3;
const ELEM_F32: u8 = 0;
const ELEM_U8: u8 = 1;

/// Upper bound on H*W so a corrupt header cannot request an absurd buffer.
const MAX_GRID_CELLS: u64 = 256 * 1024 * 1024;

// ── byte-level reader with offset tracking ─────────────────────────────────

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn new(inner: R) -> Self {
        Counting { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: start,
                    detail: format!("truncated while reading {what}"),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Writes via a sibling temp file and renames into place on success.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp)?;
    let mut w = BufWriter::new(file);
    match write(&mut w).and_then(|()| w.flush().map_err(Error::Io)) {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

// ── MPLB day records ───────────────────────────────────────────────────────

fn write_grid_f32(w: &mut impl Write, kind: u8, grid: &Grid<f32>) -> Result<()> {
    w.write_all(&[kind, ELEM_F32])?;
    w.write_all(&(grid.height as u32).to_le_bytes())?;
    w.write_all(&(grid.width as u32).to_le_bytes())?;
    for v in &grid.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_grid_u8(w: &mut impl Write, kind: u8, grid: &MaskGrid) -> Result<()> {
    w.write_all(&[kind, ELEM_U8])?;
    w.write_all(&(grid.height as u32).to_le_bytes())?;
    w.write_all(&(grid.width as u32).to_le_bytes())?;
    w.write_all(&grid.data)?;
    Ok(())
}

pub fn write_record_to(day: &DayRecord, w: &mut impl Write) -> Result<()> {
    let count = 2
        + u8::from(day.clean_mask.is_some())
        + u8::from(day.noisy_mask.is_some());
    w.write_all(&MPLB_MAGIC)?;
    w.write_all(&MPLB_VERSION.to_le_bytes())?;
    w.write_all(&[count])?;
    write_grid_f32(w, KIND_BACKSCATTER, &day.backscatter)?;
    write_grid_f32(w, KIND_LDR, &day.ldr)?;
    if let Some(m) = &day.clean_mask {
        write_grid_u8(w, KIND_CLEAN_MASK, m)?;
    }
    if let Some(m) = &day.noisy_mask {
        write_grid_u8(w, KIND_NOISY_MASK, m)?;
    }
    Ok(())
}

pub fn write_record(day: &DayRecord, path: &Path) -> Result<()> {
    write_atomic(path, |w| write_record_to(day, w))
}

enum AnyGrid {
    F32(Grid<f32>),
    U8(MaskGrid),
}

fn read_one_grid<R: Read>(r: &mut Counting<R>) -> Result<(u8, AnyGrid)> {
    let kind_offset = r.offset;
    let kind = r.u8("grid kind")?;
    if kind > KIND_NOISY_MASK {
        return Err(Error::Format {
            offset: kind_offset,
            detail: format!("unknown grid kind {kind}"),
        });
    }
    let elem_offset = r.offset;
    let elem = r.u8("element type")?;
    let dims_offset = r.offset;
    let h = r.u32("grid height")? as u64;
    let w = r.u32("grid width")? as u64;
    if h == 0 || w == 0 || h * w > MAX_GRID_CELLS {
        return Err(Error::Format {
            offset: dims_offset,
            detail: format!("grid dimensions {h}x{w} out of range"),
        });
    }
    let cells = (h * w) as usize;
    let grid = match elem {
        ELEM_F32 => {
            let mut bytes = vec![0u8; cells * 4];
            r.read_exact(&mut bytes, "f32 payload")?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            AnyGrid::F32(Grid::new(h as usize, w as usize, data)?)
        }
        ELEM_U8 => {
            let mut data = vec![0u8; cells];
            r.read_exact(&mut data, "u8 payload")?;
            let grid = Grid::new(h as usize, w as usize, data)?;
            grid.validate_binary()?;
            AnyGrid::U8(grid)
        }
        other => {
            return Err(Error::Format {
                offset: elem_offset,
                detail: format!("unknown element type {other}"),
            })
        }
    };
    Ok((kind, grid))
}

fn read_container<R: Read>(r: &mut Counting<R>, magic: [u8; 4], version: u32) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found, "magic")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let ver_offset = r.offset;
    let ver = r.u32("version")?;
    if ver != version {
        return Err(Error::Format {
            offset: ver_offset,
            detail: format!("unsupported version {ver}"),
        });
    }
    Ok(())
}

pub fn read_record_from(r: impl Read, day_id: impl Into<String>) -> Result<DayRecord> {
    let mut r = Counting::new(r);
    read_container(&mut r, MPLB_MAGIC, MPLB_VERSION)?;
    let count = r.u8("grid count")?;
    let mut backscatter = None;
    let mut ldr = None;
    let mut clean_mask = None;
    let mut noisy_mask = None;
    for _ in 0..count {
        let at = r.offset;
        let (kind, grid) = read_one_grid(&mut r)?;
        match (kind, grid) {
            (KIND_BACKSCATTER, AnyGrid::F32(g)) => backscatter = Some(g),
            (KIND_LDR, AnyGrid::F32(g)) => ldr = Some(g),
            (KIND_CLEAN_MASK, AnyGrid::U8(g)) => clean_mask = Some(g),
            (KIND_NOISY_MASK, AnyGrid::U8(g)) => noisy_mask = Some(g),
            (kind, _) => {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("grid kind {kind} paired with the wrong element type"),
                })
            }
        }
    }
    let backscatter = backscatter.ok_or(Error::Format {
        offset: r.offset,
        detail: "record has no backscatter grid".into(),
    })?;
    let ldr = ldr.ok_or(Error::Format {
        offset: r.offset,
        detail: "record has no ldr grid".into(),
    })?;
    Ok(DayRecord {
        day_id: day_id.into(),
        backscatter,
        ldr,
        clean_mask,
        noisy_mask,
    })
}

/// Reads a day record; the day id is the file stem.
pub fn read_record(path: &Path) -> Result<DayRecord> {
    let day_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "day".to_string());
    let file = fs::File::open(path)?;
    read_record_from(BufReader::new(file), day_id)
}

/// Writes a single mask as a one-grid MPLB file (kind 2).
pub fn write_mask(mask: &MaskGrid, path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        w.write_all(&MPLB_MAGIC)?;
        w.write_all(&MPLB_VERSION.to_le_bytes())?;
        w.write_all(&[1u8])?;
        write_grid_u8(w, KIND_CLEAN_MASK, mask)
    })
}

/// Reads a mask from a one-grid MPLB file (kind 2 or 3).
pub fn read_mask(path: &Path) -> Result<MaskGrid> {
    let file = fs::File::open(path)?;
    let mut r = Counting::new(BufReader::new(file));
    read_container(&mut r, MPLB_MAGIC, MPLB_VERSION)?;
    let count = r.u8("grid count")?;
    for _ in 0..count {
        let (kind, grid) = read_one_grid(&mut r)?;
        if let (KIND_CLEAN_MASK | KIND_NOISY_MASK, AnyGrid::U8(g)) = (kind, grid) {
            return Ok(g);
        }
    }
    Err(Error::Format {
        offset: r.offset,
        detail: "file contains no mask grid".into(),
    })
}

// ── CSV fixtures ───────────────────────────────────────────────────────────

/// Plain CSV grid: one row per height bin, `nan` for missing values.
pub fn read_csv_grid(path: &Path) -> Result<Grid<f32>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f32> = line
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<f32>().map_err(|_| Error::Validation(
                    format!("line {}: bad number '{tok}'", lineno + 1),
                ))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Validation(format!(
                    "line {}: ragged row ({} vs {} columns)",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation("empty CSV grid".into()));
    }
    let (h, w) = (rows.len(), rows[0].len());
    Grid::new(h, w, rows.into_iter().flatten().collect())
}

pub fn write_csv_grid(grid: &Grid<f32>, path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        for row in grid.data.chunks_exact(grid.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { "nan".to_string() } else { format!("{v}") })
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    })
}

// ── checkpoints ────────────────────────────────────────────────────────────

fn write_named_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Config(format!("tensor name too long: {name}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    if t.rank() > u8::MAX as usize {
        return Err(Error::Config("tensor rank too large".into()));
    }
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(
    params: &ModelParams,
    cfg: &ScaleConfig,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let flat = params.flat_tensors();
    if flat.len() > u16::MAX as usize {
        return Err(Error::Config("too many tensors for checkpoint".into()));
    }
    write_atomic(path, |w| {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(flat.len() as u16).to_le_bytes())?;
        for (name, t) in &flat {
            write_named_tensor(w, name, t)?;
        }
        Ok(())
    })?;
    let meta = path.with_extension("meta");
    write_atomic(&meta, |w| {
        writeln!(w, "h_day = {}", cfg.h_day)?;
        writeln!(w, "w_day = {}", cfg.w_day)?;
        writeln!(w, "margin = {}", cfg.margin)?;
        writeln!(w, "quarter_width = {}", cfg.quarter_width)?;
        writeln!(
            w,
            "offsets = {},{},{},{}",
            cfg.offsets[0], cfg.offsets[1], cfg.offsets[2], cfg.offsets[3]
        )?;
        writeln!(w, "base_channels = {}", cfg.base_channels)?;
        writeln!(w, "seed = {seed}")?;
        Ok(())
    })
}

fn read_named_tensor<R: Read>(r: &mut Counting<R>) -> Result<(String, Tensor)> {
    let name_len = r.u16("name length")? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name, "tensor name")?;
    let at = r.offset;
    let name = String::from_utf8(name).map_err(|_| Error::Format {
        offset: at,
        detail: "tensor name is not UTF-8".into(),
    })?;
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    let dims_offset = r.offset;
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = r.u32("dim")? as u64;
        if d == 0 {
            return Err(Error::Format {
                offset: dims_offset,
                detail: format!("tensor '{name}' has a zero dimension"),
            });
        }
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel > MAX_GRID_CELLS {
        return Err(Error::Format {
            offset: dims_offset,
            detail: format!("tensor '{name}' dims {shape:?} out of range"),
        });
    }
    let count: usize = shape.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes, "tensor payload")?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

fn parse_meta_line(line: &str) -> Option<(&str, &str)> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, ScaleConfig, u64)> {
    let file = fs::File::open(path)?;
    let mut r = Counting::new(BufReader::new(file));
    read_container(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = r.u16("tensor count")?;
    let mut flat: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        flat.push(read_named_tensor(&mut r)?);
    }

    // Regroup flat tensors into layers, preserving first-appearance order.
    let mut params = ModelParams::new();
    let mut i = 0;
    while i < flat.len() {
        let (full, _) = &flat[i];
        let (layer_name, field) = full.rsplit_once('.').ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("tensor name '{full}' has no field suffix"),
        })?;
        if field != "kernel" {
            return Err(Error::Format {
                offset: 0,
                detail: format!("expected '{layer_name}.kernel' first, found '{full}'"),
            });
        }
        let layer_name = layer_name.to_string();
        let take = |flat: &mut Vec<(String, Tensor)>, idx: usize, suffix: &str| -> Result<Tensor> {
            let (name, t) = flat
                .get(idx)
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    detail: format!("layer '{layer_name}' truncated before .{suffix}"),
                })?
                .clone();
            if name != format!("{layer_name}.{suffix}") {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("expected '{layer_name}.{suffix}', found '{name}'"),
                });
            }
            Ok(t)
        };
        let kernel = flat[i].1.clone();
        let bias = take(&mut flat, i + 1, "bias")?;
        i += 2;
        let bn = if flat
            .get(i)
            .map(|(n, _)| n == &format!("{layer_name}.bn_gamma"))
            .unwrap_or(false)
        {
            let gamma = take(&mut flat, i, "bn_gamma")?;
            let beta = take(&mut flat, i + 1, "bn_beta")?;
            let running_mean = take(&mut flat, i + 2, "bn_mean")?;
            let running_var = take(&mut flat, i + 3, "bn_var")?;
            i += 4;
            Some(BatchNormParams {
                gamma,
                beta,
                running_mean,
                running_var,
            })
        } else {
            None
        };
        params.insert(layer_name, LayerParams { kernel, bias, bn });
    }

    let meta_path = path.with_extension("meta");
    let text = fs::read_to_string(&meta_path).map_err(|_| Error::Format {
        offset: 0,
        detail: format!("missing checkpoint sidecar {}", meta_path.display()),
    })?;
    let mut cfg = ScaleConfig::desk();
    let mut seed = 0u64;
    for line in text.lines() {
        let Some((k, v)) = parse_meta_line(line) else { continue };
        let bad = |k: &str| Error::Format {
            offset: 0,
            detail: format!("bad sidecar value for {k}"),
        };
        match k {
            "h_day" => cfg.h_day = v.parse().map_err(|_| bad(k))?,
            "w_day" => cfg.w_day = v.parse().map_err(|_| bad(k))?,
            "margin" => cfg.margin = v.parse().map_err(|_| bad(k))?,
            "quarter_width" => cfg.quarter_width = v.parse().map_err(|_| bad(k))?,
            "offsets" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(k)))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(bad(k));
                }
                cfg.offsets = [parts[0], parts[1], parts[2], parts[3]];
            }
            "base_channels" => cfg.base_channels = v.parse().map_err(|_| bad(k))?,
            "seed" => seed = v.parse().map_err(|_| bad(k))?,
            other => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("unknown sidecar key '{other}'"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok((params, cfg, seed))
}
