//! Binary and JSON file formats. Everything is little-endian.
//!
//! | file  | layout |
//! |-------|--------|
//! | LSRF  | `"LSRF"`, u16 version, u64 count, count × (f32 ×10, u8 class) |
//! | LSWP  | `"LSWP"`, u16 version, u64 count, f64 ×12 pose, f64 sweep start, count × (f32 x y z intensity, u8 laser, u8 class, u8 dynamic, f64 timestamp) |
//! | LGRD  | `"LGRD"`, u16 version, u16 channels, u16 rows, u16 cols, f32 data (channel, row, col) |
//! | model | one JSON header line, then the f32 parameter block |

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, SemanticClass, Surfel, Vec3};
use crate::map_builder::PointSample;
use crate::object_bank::{ObjectAsset, ObjectBank};
use crate::polar_grid::{FeatureGrid, Mask, CHANNELS};
use crate::raydrop::{FeatureSpec, ModelKind, Normalization, ProbabilityGrid, RaydropModel};

pub const VERSION: u16 = 1;
pub const SURFEL_MAGIC: &[u8; 4] = b"LSRF";
pub const SWEEP_MAGIC: &[u8; 4] = b"LSWP";
pub const GRID_MAGIC: &[u8; 4] = b"LGRD";
pub const BANK_INDEX: &str = "index.json";

const SURFEL_RECORD: u64 = 41;
const SWEEP_RECORD: u64 = 27;

fn truncated(what: &str) -> impl Fn(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::format(format!("{what}: truncated file"))
        } else {
            Error::Io(e)
        }
    }
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated(what))?;
    if &m != magic {
        return Err(Error::format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.read_u16::<LE>().map_err(truncated(what))?;
    if version != VERSION {
        return Err(Error::format(format!("{what}: unsupported version {version}")));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::format(format!("{what}: trailing bytes after payload"))),
    }
}

/// Guards allocations against a corrupt count field.
fn check_count(count: u64, record: u64, remaining: Option<u64>, what: &str) -> Result<usize> {
    if let Some(rem) = remaining {
        if count.checked_mul(record).is_none_or(|need| need != rem) {
            return Err(Error::format(format!("{what}: count {count} does not match payload of {rem} bytes")));
        }
    }
    usize::try_from(count).map_err(|_| Error::format(format!("{what}: count {count} too large")))
}

fn class_from(code: u8, what: &str) -> Result<SemanticClass> {
    SemanticClass::from_code(code).ok_or_else(|| Error::format(format!("{what}: bad semantic class {code}")))
}

fn open(path: &Path) -> Result<(BufReader<fs::File>, u64)> {
    let f = fs::File::open(path)?;
    let len = f.metadata()?.len();
    Ok((BufReader::new(f), len))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::input(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- surfels ----

pub fn write_surfels<W: Write>(w: &mut W, surfels: &[Surfel]) -> Result<()> {
    w.write_all(SURFEL_MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    w.write_u64::<LE>(surfels.len() as u64)?;
    for s in surfels {
        for v in [
            s.center.x,
            s.center.y,
            s.center.z,
            s.normal.x,
            s.normal.y,
            s.normal.z,
            s.radius,
            s.orig_intensity,
            s.orig_range,
            s.orig_incidence,
        ] {
            w.write_f32::<LE>(v as f32)?;
        }
        w.write_u8(s.semantic_class.code())?;
    }
    Ok(())
}

fn read_surfels_inner<R: Read>(r: &mut R, payload: Option<u64>) -> Result<Vec<Surfel>> {
    const WHAT: &str = "surfel map";
    read_header(r, SURFEL_MAGIC, WHAT)?;
    let count = r.read_u64::<LE>().map_err(truncated(WHAT))?;
    let n = check_count(count, SURFEL_RECORD, payload.map(|p| p.saturating_sub(14)), WHAT)?;
    let mut out = Vec::with_capacity(n.min(1 << 24));
    let mut buf = [0f32; 10];
    for _ in 0..n {
        r.read_f32_into::<LE>(&mut buf).map_err(truncated(WHAT))?;
        let class = class_from(r.read_u8().map_err(truncated(WHAT))?, WHAT)?;
        let v = buf.map(|x| x as f64);
        out.push(Surfel {
            center: Vec3::new(v[0], v[1], v[2]),
            normal: Vec3::new(v[3], v[4], v[5]),
            radius: v[6],
            orig_intensity: v[7],
            orig_range: v[8],
            orig_incidence: v[9],
            semantic_class: class,
        });
    }
    expect_eof(r, WHAT)?;
    Ok(out)
}

pub fn read_surfels<R: Read>(r: &mut R) -> Result<Vec<Surfel>> {
    read_surfels_inner(r, None)
}

pub fn save_surfels(path: &Path, surfels: &[Surfel]) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + surfels.len() * SURFEL_RECORD as usize);
    write_surfels(&mut buf, surfels)?;
    write_atomic(path, &buf)
}

pub fn load_surfels(path: &Path) -> Result<Vec<Surfel>> {
    let (mut r, len) = open(path)?;
    read_surfels_inner(&mut r, Some(len))
}

// ---- sweeps ----

/// One sweep: sensor-frame points plus the sensor-to-map pose at `sweep_start`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepFile {
    pub pose: Pose,
    pub sweep_start: f64,
    pub points: Vec<PointSample>,
}

pub fn write_sweep<W: Write>(w: &mut W, sweep: &SweepFile) -> Result<()> {
    w.write_all(SWEEP_MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    w.write_u64::<LE>(sweep.points.len() as u64)?;
    for v in sweep.pose.to_array() {
        w.write_f64::<LE>(v)?;
    }
    w.write_f64::<LE>(sweep.sweep_start)?;
    for p in &sweep.points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            w.write_f32::<LE>(v as f32)?;
        }
        w.write_u8(p.laser_id)?;
        w.write_u8(p.semantic_class.code())?;
        w.write_u8(p.dynamic as u8)?;
        w.write_f64::<LE>(p.timestamp)?;
    }
    Ok(())
}

fn read_sweep_inner<R: Read>(r: &mut R, payload: Option<u64>) -> Result<SweepFile> {
    const WHAT: &str = "sweep";
    read_header(r, SWEEP_MAGIC, WHAT)?;
    let count = r.read_u64::<LE>().map_err(truncated(WHAT))?;
    let n = check_count(count, SWEEP_RECORD, payload.map(|p| p.saturating_sub(14 + 13 * 8)), WHAT)?;
    let mut pose = [0f64; 12];
    r.read_f64_into::<LE>(&mut pose).map_err(truncated(WHAT))?;
    let pose = Pose::from_array(&pose);
    pose.validate().map_err(|e| Error::format(format!("{WHAT}: header pose invalid: {e}")))?;
    let sweep_start = r.read_f64::<LE>().map_err(truncated(WHAT))?;
    let mut points = Vec::with_capacity(n.min(1 << 24));
    let mut xyzi = [0f32; 4];
    for _ in 0..n {
        r.read_f32_into::<LE>(&mut xyzi).map_err(truncated(WHAT))?;
        let laser_id = r.read_u8().map_err(truncated(WHAT))?;
        let class = class_from(r.read_u8().map_err(truncated(WHAT))?, WHAT)?;
        let dynamic = match r.read_u8().map_err(truncated(WHAT))? {
            0 => false,
            1 => true,
            d => return Err(Error::format(format!("{WHAT}: bad dynamic flag {d}"))),
        };
        let timestamp = r.read_f64::<LE>().map_err(truncated(WHAT))?;
        points.push(PointSample {
            position: Vec3::new(xyzi[0] as f64, xyzi[1] as f64, xyzi[2] as f64),
            intensity: xyzi[3] as f64,
            laser_id,
            timestamp,
            semantic_class: class,
            sensor_origin: Vec3::zeros(),
            dynamic,
        });
    }
    expect_eof(r, WHAT)?;
    Ok(SweepFile {
        pose,
        sweep_start,
        points,
    })
}

pub fn read_sweep<R: Read>(r: &mut R) -> Result<SweepFile> {
    read_sweep_inner(r, None)
}

pub fn save_sweep(path: &Path, sweep: &SweepFile) -> Result<()> {
    let mut buf = Vec::with_capacity(126 + sweep.points.len() * SWEEP_RECORD as usize);
    write_sweep(&mut buf, sweep)?;
    write_atomic(path, &buf)
}

pub fn load_sweep(path: &Path) -> Result<SweepFile> {
    let (mut r, len) = open(path)?;
    read_sweep_inner(&mut r, Some(len))
}

// ---- grids ----

/// Raw contents of an LGRD file.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl GridFile {
    fn shape_check(channels: usize, rows: usize, cols: usize) -> Result<()> {
        if [channels, rows, cols].iter().any(|&d| d > u16::MAX as usize) {
            return Err(Error::input("grid dimension exceeds 65535"));
        }
        Ok(())
    }

    pub fn from_features(g: &FeatureGrid) -> Self {
        Self {
            channels: CHANNELS,
            rows: g.rows,
            cols: g.cols,
            data: g.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_mask(m: &Mask) -> Self {
        Self {
            channels: 1,
            rows: m.rows,
            cols: m.cols,
            data: m.bits.iter().map(|&b| b as u8 as f32).collect(),
        }
    }

    pub fn from_probabilities(p: &ProbabilityGrid) -> Self {
        Self {
            channels: 1,
            rows: p.rows,
            cols: p.cols,
            data: p.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn into_features(self) -> Result<FeatureGrid> {
        if self.channels != CHANNELS {
            return Err(Error::format(format!("feature grid needs {CHANNELS} channels, file has {}", self.channels)));
        }
        Ok(FeatureGrid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.into_iter().map(f64::from).collect(),
        })
    }

    pub fn into_mask(self) -> Result<Mask> {
        if self.channels != 1 {
            return Err(Error::format(format!("mask needs 1 channel, file has {}", self.channels)));
        }
        let bits = self
            .data
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::format(format!("mask value {v} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Ok(Mask {
            rows: self.rows,
            cols: self.cols,
            bits,
        })
    }

    pub fn into_probabilities(self) -> Result<ProbabilityGrid> {
        if self.channels != 1 {
            return Err(Error::format(format!("probability grid needs 1 channel, file has {}", self.channels)));
        }
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("probabilities must lie in [0, 1]"));
        }
        Ok(ProbabilityGrid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.into_iter().map(f64::from).collect(),
        })
    }
}

pub fn write_grid<W: Write>(w: &mut W, g: &GridFile) -> Result<()> {
    GridFile::shape_check(g.channels, g.rows, g.cols)?;
    if g.data.len() != g.channels * g.rows * g.cols {
        return Err(Error::input("grid data length does not match its shape"));
    }
    w.write_all(GRID_MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    for d in [g.channels, g.rows, g.cols] {
        w.write_u16::<LE>(d as u16)?;
    }
    for &v in &g.data {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

fn read_grid_inner<R: Read>(r: &mut R, payload: Option<u64>) -> Result<GridFile> {
    const WHAT: &str = "grid";
    read_header(r, GRID_MAGIC, WHAT)?;
    let mut dims = [0u16; 3];
    r.read_u16_into::<LE>(&mut dims).map_err(truncated(WHAT))?;
    let [channels, rows, cols] = dims.map(usize::from);
    let n = channels * rows * cols;
    check_count(n as u64, 4, payload.map(|p| p.saturating_sub(12)), WHAT)?;
    let mut data = vec![0f32; n];
    r.read_f32_into::<LE>(&mut data).map_err(truncated(WHAT))?;
    expect_eof(r, WHAT)?;
    Ok(GridFile {
        channels,
        rows,
        cols,
        data,
    })
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<GridFile> {
    read_grid_inner(r, None)
}

pub fn save_grid(path: &Path, g: &GridFile) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * g.data.len());
    write_grid(&mut buf, g)?;
    write_atomic(path, &buf)
}

pub fn load_grid(path: &Path) -> Result<GridFile> {
    let (mut r, len) = open(path)?;
    read_grid_inner(&mut r, Some(len))
}

// ---- raydrop models ----

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    feature_spec: FeatureSpec,
    normalization: Normalization,
    param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_shape: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
}

/// Writes the model; parameters are stored as f32.
pub fn write_model<W: Write>(w: &mut W, model: &RaydropModel) -> Result<()> {
    model.validate()?;
    let header = ModelHeader {
        kind: model.kind,
        feature_spec: model.feature_spec.clone(),
        normalization: model.normalization.clone(),
        param_count: model.params.len(),
        grid_shape: model.grid_shape,
        final_loss: model.final_loss,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for &p in &model.params {
        w.write_f32::<LE>(p as f32)?;
    }
    Ok(())
}

pub fn read_model<R: BufRead>(r: &mut R) -> Result<RaydropModel> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("model: missing header line"));
    }
    let header: ModelHeader =
        serde_json::from_slice(&line).map_err(|e| Error::format(format!("model: bad header: {e}")))?;
    let mut raw = vec![0f32; header.param_count];
    r.read_f32_into::<LE>(&mut raw).map_err(truncated("model"))?;
    expect_eof(r, "model")?;
    let model = RaydropModel {
        kind: header.kind,
        feature_spec: header.feature_spec,
        normalization: header.normalization,
        params: raw.into_iter().map(f64::from).collect(),
        grid_shape: header.grid_shape,
        final_loss: header.final_loss,
    };
    model.validate().map_err(|e| Error::format(format!("model: {e}")))?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &RaydropModel) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    write_atomic(path, &buf)
}

pub fn load_model(path: &Path) -> Result<RaydropModel> {
    read_model(&mut BufReader::new(fs::File::open(path)?))
}

// ---- object bank ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub source_id: String,
    pub dims: [f64; 3],
    pub rel_orientation: f64,
    pub surfel_count: usize,
}

fn check_asset_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::input(format!("asset id {id:?} must be non-empty [A-Za-z0-9_.-] not starting with '.'")))
    }
}

pub fn asset_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.lsrf"))
}

pub fn read_bank_index(dir: &Path) -> Result<Vec<BankEntry>> {
    let path = dir.join(BANK_INDEX);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

/// Stores an asset and updates the index, replacing any asset with the same id.
pub fn save_asset(dir: &Path, asset: &ObjectAsset) -> Result<()> {
    check_asset_id(&asset.source_id)?;
    fs::create_dir_all(dir)?;
    save_surfels(&asset_path(dir, &asset.source_id), &asset.surfels)?;
    let mut index = read_bank_index(dir)?;
    let entry = BankEntry {
        source_id: asset.source_id.clone(),
        dims: asset.dims,
        rel_orientation: asset.rel_orientation,
        surfel_count: asset.surfels.len(),
    };
    match index.iter_mut().find(|e| e.source_id == entry.source_id) {
        Some(slot) => *slot = entry,
        None => index.push(entry),
    }
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    write_atomic(&dir.join(BANK_INDEX), &json)
}

pub fn load_bank(dir: &Path) -> Result<ObjectBank> {
    let mut assets = Vec::new();
    for e in read_bank_index(dir)? {
        check_asset_id(&e.source_id)?;
        let surfels = load_surfels(&asset_path(dir, &e.source_id))?;
        if surfels.len() != e.surfel_count {
            return Err(Error::format(format!(
                "asset {}: index lists {} surfels, file has {}",
                e.source_id,
                e.surfel_count,
                surfels.len()
            )));
        }
        assets.push(ObjectAsset {
            surfels,
            dims: e.dims,
            source_id: e.source_id,
            rel_orientation: e.rel_orientation,
        });
    }
    Ok(ObjectBank::new(assets))
}

/// Writes any serializable value as pretty JSON, atomically.
pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    write_atomic(path, &json)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Buffered file writer for callers that stream output.
pub fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}
