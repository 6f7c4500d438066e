//! MetaImage (`.mhd` header + `.raw` payload) volumes and nodule annotation CSVs.
//!
//! Internally every volume is stored in `(z, y, x)` axis order with `x`
//! varying fastest, which is the raster order of a MetaImage payload. Header
//! vectors (`DimSize`, `ElementSpacing`, `Offset`) are written `x y z` on disk
//! and reversed on the way in.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaImageError {
    #[error("missing mandatory key `{0}`")]
    MissingKey(&'static str),
    #[error("malformed value for `{key}`: {value:?}")]
    BadValue { key: String, value: String },
    #[error("NDims must be 3, found {0}")]
    NotThreeDimensional(usize),
    #[error("unsupported ElementType `{0}`")]
    UnsupportedElementType(String),
    #[error("compressed MetaImage payloads are not supported")]
    Compressed,
    #[error("invalid volume geometry: {0}")]
    Geometry(String),
    #[error("payload length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("annotation line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("annotation file is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetaImageError>;

/// Scalar kinds accepted in a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ElementType {
    /// `MET_SHORT`
    I16,
    /// `MET_UCHAR`
    U8,
    /// `MET_FLOAT`
    F32,
}

impl ElementType {
    pub fn byte_width(self) -> usize {
        match self {
            ElementType::I16 => 2,
            ElementType::U8 => 1,
            ElementType::F32 => 4,
        }
    }

    pub fn met_name(self) -> &'static str {
        match self {
            ElementType::I16 => "MET_SHORT",
            ElementType::U8 => "MET_UCHAR",
            ElementType::F32 => "MET_FLOAT",
        }
    }

    fn from_met_name(name: &str) -> Result<Self> {
        match name {
            "MET_SHORT" => Ok(ElementType::I16),
            "MET_UCHAR" => Ok(ElementType::U8),
            "MET_FLOAT" => Ok(ElementType::F32),
            other => Err(MetaImageError::UnsupportedElementType(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ByteOrder {
    #[default]
    Little,
    Big,
}

/// Geometry and encoding of a volume. All vectors are `(z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub element_type: ElementType,
    pub byte_order: ByteOrder,
}

impl VolumeMeta {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        element_type: ElementType,
    ) -> Result<Self> {
        let meta = VolumeMeta {
            dims,
            spacing,
            origin,
            element_type,
            byte_order: ByteOrder::Little,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(MetaImageError::Geometry(format!(
                "zero dimension in {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(MetaImageError::Geometry(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }
}

/// A scalar volume, flat in `(z, y, x)` order with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub meta: VolumeMeta,
    pub voxels: Vec<f32>,
}

impl CtVolume {
    pub fn new(meta: VolumeMeta, voxels: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if voxels.len() != meta.voxel_count() {
            return Err(MetaImageError::Geometry(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                meta.dims
            )));
        }
        Ok(CtVolume { meta, voxels })
    }

    pub fn filled(meta: VolumeMeta, value: f32) -> Self {
        let n = meta.voxel_count();
        CtVolume {
            meta,
            voxels: vec![value; n],
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.meta.dims[1] + y) * self.meta.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.meta.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f32] {
        let n = self.meta.slice_len();
        &mut self.voxels[z * n..(z + 1) * n]
    }
}

/// One row of a LUNA16-style `annotations.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleAnnotation {
    pub series_id: String,
    /// World position in mm, `(x, y, z)` as in the CSV.
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
}

impl NoduleAnnotation {
    /// The center reordered to the internal `(z, y, x)` convention.
    pub fn center_zyx(&self) -> [f64; 3] {
        let [x, y, z] = self.center_world;
        [z, y, x]
    }
}

/// Parsed header: the geometry plus the payload file it references.
#[derive(Debug, Clone, PartialEq)]
pub struct MhdHeader {
    pub meta: VolumeMeta,
    pub data_file: String,
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|tok| {
            tok.parse::<T>().map_err(|_| MetaImageError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        })
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(MetaImageError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

fn xyz_to_zyx<T: Copy>(key: &str, raw: &str, v: Vec<T>) -> Result<[T; 3]> {
    if v.len() != 3 {
        return Err(MetaImageError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
        });
    }
    Ok([v[2], v[1], v[0]])
}

/// Parse the text of a `.mhd` header.
pub fn parse_mhd_header(text: &str) -> Result<MhdHeader> {
    let mut fields: HashMap<String, String> = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MetaImageError::BadValue {
                key: line.to_string(),
                value: String::new(),
            });
        };
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &'static str| {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or(MetaImageError::MissingKey(key))
    };

    if let Some(c) = fields.get("CompressedData") {
        if parse_bool("CompressedData", c)? {
            return Err(MetaImageError::Compressed);
        }
    }

    let ndims_raw = get("NDims")?;
    let ndims: usize = ndims_raw.parse().map_err(|_| MetaImageError::BadValue {
        key: "NDims".into(),
        value: ndims_raw.into(),
    })?;
    if ndims != 3 {
        return Err(MetaImageError::NotThreeDimensional(ndims));
    }

    let dims_raw = get("DimSize")?;
    let dims = xyz_to_zyx(
        "DimSize",
        dims_raw,
        parse_list::<usize>("DimSize", dims_raw)?,
    )?;
    let spacing_raw = get("ElementSpacing")?;
    let spacing = xyz_to_zyx(
        "ElementSpacing",
        spacing_raw,
        parse_list::<f64>("ElementSpacing", spacing_raw)?,
    )?;
    // `Position` and `Origin` are accepted spellings of `Offset`.
    let (okey, origin_raw) = ["Offset", "Position", "Origin"]
        .iter()
        .find_map(|k| fields.get(*k).map(|v| (*k, v.as_str())))
        .ok_or(MetaImageError::MissingKey("Offset"))?;
    let origin = xyz_to_zyx(okey, origin_raw, parse_list::<f64>(okey, origin_raw)?)?;
    let element_type = ElementType::from_met_name(get("ElementType")?)?;
    let data_file = get("ElementDataFile")?.to_string();

    let mut byte_order = ByteOrder::Little;
    for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if let Some(v) = fields.get(key) {
            if parse_bool(key, v)? {
                byte_order = ByteOrder::Big;
            }
        }
    }

    let meta = VolumeMeta {
        dims,
        spacing,
        origin,
        element_type,
        byte_order,
    };
    meta.validate()?;
    Ok(MhdHeader { meta, data_file })
}

/// Decode a raw payload according to `meta`.
pub fn load_volume(meta: &VolumeMeta, raw: &[u8]) -> Result<CtVolume> {
    meta.validate()?;
    let width = meta.element_type.byte_width();
    let expected = meta.voxel_count() * width;
    if raw.len() != expected {
        return Err(MetaImageError::LengthMismatch {
            expected,
            actual: raw.len(),
        });
    }
    let big = meta.byte_order == ByteOrder::Big;
    let voxels: Vec<f32> = match meta.element_type {
        ElementType::U8 => raw.iter().map(|&b| b as f32).collect(),
        ElementType::I16 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if big {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                }) as f32
            })
            .collect(),
        ElementType::F32 => raw
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if big {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            })
            .collect(),
    };
    Ok(CtVolume {
        meta: meta.clone(),
        voxels,
    })
}

/// Encode voxels into a payload for `meta`. Integer kinds saturate.
pub fn encode_payload(vol: &CtVolume) -> Vec<u8> {
    let big = vol.meta.byte_order == ByteOrder::Big;
    let mut out = Vec::with_capacity(vol.voxels.len() * vol.meta.element_type.byte_width());
    for &v in &vol.voxels {
        match vol.meta.element_type {
            ElementType::U8 => out.push(v as u8),
            ElementType::I16 => {
                let s = v as i16;
                out.extend_from_slice(&if big {
                    s.to_be_bytes()
                } else {
                    s.to_le_bytes()
                });
            }
            ElementType::F32 => out.extend_from_slice(&if big {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            }),
        }
    }
    out
}

pub fn world_to_voxel(p: [f64; 3], meta: &VolumeMeta) -> [f64; 3] {
    std::array::from_fn(|i| (p[i] - meta.origin[i]) / meta.spacing[i])
}

pub fn voxel_to_world(v: [f64; 3], meta: &VolumeMeta) -> [f64; 3] {
    std::array::from_fn(|i| v[i] * meta.spacing[i] + meta.origin[i])
}

/// Render the header text for `meta` pointing at `data_file`.
pub fn format_mhd_header(meta: &VolumeMeta, data_file: &str) -> String {
    let xyz = |v: [String; 3]| format!("{} {} {}", v[2], v[1], v[0]);
    let msb = if meta.byte_order == ByteOrder::Big {
        "True"
    } else {
        "False"
    };
    // `{:?}` on f64 prints the shortest round-trip representation.
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = {msb}\n\
         CompressedData = False\n\
         TransformMatrix = 1 0 0 0 1 0 0 0 1\n\
         Offset = {}\n\
         ElementSpacing = {}\n\
         DimSize = {}\n\
         ElementType = {}\n\
         ElementDataFile = {data_file}\n",
        xyz(meta.origin.map(|v| format!("{v:?}"))),
        xyz(meta.spacing.map(|v| format!("{v:?}"))),
        xyz(meta.dims.map(|v| v.to_string())),
        meta.element_type.met_name(),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetaImageError + '_ {
    move |source| MetaImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `<basename>.mhd` and `<basename>.raw`, returning both paths.
pub fn write_mhd(vol: &CtVolume, basename: &Path) -> Result<(PathBuf, PathBuf)> {
    vol.meta.validate()?;
    let mhd = basename.with_extension("mhd");
    let raw = basename.with_extension("raw");
    let raw_name = raw
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if let Some(parent) = mhd.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(&raw, encode_payload(vol)).map_err(io_err(&raw))?;
    fs::write(&mhd, format_mhd_header(&vol.meta, &raw_name)).map_err(io_err(&mhd))?;
    Ok((mhd, raw))
}

/// Read a `.mhd` file and its payload (resolved relative to the header).
pub fn read_mhd(path: &Path) -> Result<CtVolume> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header = parse_mhd_header(&text)?;
    let raw_path = path
        .parent()
        .unwrap_or(Path::new(""))
        .join(&header.data_file);
    let raw = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    load_volume(&header.meta, &raw)
}

/// Parse an annotations CSV with columns `seriesuid, coordX, coordY, coordZ, diameter_mm`.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<NoduleAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(MetaImageError::MissingColumn(name))
    };
    let (c_id, c_x, c_y, c_z, c_d) = (
        col("seriesuid")?,
        col("coordX")?,
        col("coordY")?,
        col("coordZ")?,
        col("diameter_mm")?,
    );

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| {
            record.get(i).ok_or_else(|| MetaImageError::MalformedRow {
                line,
                reason: format!("missing field {i}"),
            })
        };
        let num = |i: usize, name: &str| -> Result<f64> {
            let raw = field(i)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| MetaImageError::MalformedRow {
                    line,
                    reason: format!("{name} is not a number: {raw:?}"),
                })
        };
        let diameter_mm = num(c_d, "diameter_mm")?;
        if diameter_mm <= 0.0 {
            return Err(MetaImageError::MalformedRow {
                line,
                reason: format!("diameter_mm must be positive, got {diameter_mm}"),
            });
        }
        out.push(NoduleAnnotation {
            series_id: field(c_id)?.to_string(),
            center_world: [
                num(c_x, "coordX")?,
                num(c_y, "coordY")?,
                num(c_z, "coordZ")?,
            ],
            diameter_mm,
        });
    }
    Ok(out)
}

/// Write annotations in the same CSV schema that [`parse_annotations`] reads.
pub fn write_annotations(path: &Path, annotations: &[NoduleAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"])?;
    for a in annotations {
        w.write_record([
            a.series_id.clone(),
            format!("{:?}", a.center_world[0]),
            format!("{:?}", a.center_world[1]),
            format!("{:?}", a.center_world[2]),
            format!("{:?}", a.diameter_mm),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "ObjectType = Image\nNDims = 3\nDimSize = 512 512 120\n\
        ElementSpacing = 0.7 0.7 2.5\nOffset = -200 -200 -300\nElementType = MET_SHORT\n\
        ElementDataFile = scan.raw\n";

    #[test]
    fn minimal_header_reorders_axes() {
        let h = parse_mhd_header(MINIMAL).unwrap();
        assert_eq!(h.meta.dims, [120, 512, 512]);
        assert_eq!(h.meta.spacing, [2.5, 0.7, 0.7]);
        assert_eq!(h.meta.origin, [-300.0, -200.0, -200.0]);
        assert_eq!(h.meta.byte_order, ByteOrder::Little);
        assert_eq!(h.data_file, "scan.raw");
        // the writer's output parses back to the same geometry
        let again = parse_mhd_header(&format_mhd_header(&h.meta, "scan.raw")).unwrap();
        assert_eq!(again, h);
    }

    #[test]
    fn missing_dimsize_is_an_error() {
        let text = MINIMAL.replace("DimSize = 512 512 120\n", "");
        assert!(matches!(
            parse_mhd_header(&text),
            Err(MetaImageError::MissingKey("DimSize"))
        ));
    }

    #[test]
    fn compressed_is_rejected() {
        let text = format!("{MINIMAL}CompressedData = True\n");
        assert!(matches!(
            parse_mhd_header(&text),
            Err(MetaImageError::Compressed)
        ));
    }

    #[test]
    fn wrong_ndims_and_element_type() {
        let text = MINIMAL.replace("NDims = 3", "NDims = 4");
        assert!(matches!(
            parse_mhd_header(&text),
            Err(MetaImageError::NotThreeDimensional(4))
        ));
        let text = MINIMAL.replace("MET_SHORT", "MET_DOUBLE");
        assert!(matches!(
            parse_mhd_header(&text),
            Err(MetaImageError::UnsupportedElementType(_))
        ));
    }

    #[test]
    fn msb_flag_selects_big_endian() {
        let text = format!("{MINIMAL}ElementByteOrderMSB = True\n");
        assert_eq!(
            parse_mhd_header(&text).unwrap().meta.byte_order,
            ByteOrder::Big
        );
    }

    #[test]
    fn decodes_known_i16_payload() {
        // Bytes hand-encoded little-endian; values decoded independently:
        // 0x0000=0, 0x0001=1, 0xffff=-1, 0xfc18=-1000, 0x0190=400, 0x7fff=32767, 0x8000=-32768, 0x0028=40
        let raw: [u8; 16] = [
            0x00, 0x00, 0x01, 0x00, 0xff, 0xff, 0x18, 0xfc, 0x90, 0x01, 0xff, 0x7f, 0x00, 0x80,
            0x28, 0x00,
        ];
        let meta = VolumeMeta::new([2, 2, 2], [1.0; 3], [0.0; 3], ElementType::I16).unwrap();
        let vol = load_volume(&meta, &raw).unwrap();
        assert_eq!(
            vol.voxels,
            vec![0.0, 1.0, -1.0, -1000.0, 400.0, 32767.0, -32768.0, 40.0]
        );

        let mut big = meta.clone();
        big.byte_order = ByteOrder::Big;
        let swapped: Vec<u8> = raw.chunks(2).flat_map(|c| [c[1], c[0]]).collect();
        assert_eq!(load_volume(&big, &swapped).unwrap().voxels, vol.voxels);
    }

    #[test]
    fn short_payload_is_rejected() {
        let meta = VolumeMeta::new([2, 2, 2], [1.0; 3], [0.0; 3], ElementType::I16).unwrap();
        let err = load_volume(&meta, &[0u8; 15]).unwrap_err();
        assert!(matches!(
            err,
            MetaImageError::LengthMismatch {
                expected: 16,
                actual: 15
            }
        ));
    }

    #[test]
    fn zero_payload_is_zero_volume() {
        let meta = VolumeMeta::new([2, 3, 4], [1.0; 3], [0.0; 3], ElementType::F32).unwrap();
        let vol = load_volume(&meta, &[0u8; 24 * 4]).unwrap();
        assert!(vol.voxels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn world_voxel_examples() {
        let unit = VolumeMeta::new([10, 10, 10], [1.0; 3], [0.0; 3], ElementType::I16).unwrap();
        assert_eq!(world_to_voxel([5.0, 6.0, 7.0], &unit), [5.0, 6.0, 7.0]);

        let meta = VolumeMeta::new(
            [100, 512, 512],
            [2.5, 0.7, 0.7],
            [-300.0, -200.0, -200.0],
            ElementType::I16,
        )
        .unwrap();
        let v = world_to_voxel([-297.5, -200.0, -199.3], &meta);
        for (got, want) in v.iter().zip([1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-9, "{v:?}");
        }
    }

    #[test]
    fn annotation_rows() {
        let csv = "seriesuid,coordX,coordY,coordZ,diameter_mm\n1.3.6.1,-128.7,-175.3,-298.4,5.65\n";
        let a = parse_annotations(csv.as_bytes()).unwrap();
        assert_eq!(
            a,
            vec![NoduleAnnotation {
                series_id: "1.3.6.1".into(),
                center_world: [-128.7, -175.3, -298.4],
                diameter_mm: 5.65
            }]
        );
        assert_eq!(a[0].center_zyx(), [-298.4, -175.3, -128.7]);

        let empty = "seriesuid,coordX,coordY,coordZ,diameter_mm\n";
        assert!(parse_annotations(empty.as_bytes()).unwrap().is_empty());

        let bad = "seriesuid,coordX,coordY,coordZ,diameter_mm\na,1,2,3,4\nb,1,2,3,abc\n";
        match parse_annotations(bad.as_bytes()) {
            Err(MetaImageError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed row, got {other:?}"),
        }

        let missing = "seriesuid,coordX,coordY,diameter_mm\n";
        assert!(matches!(
            parse_annotations(missing.as_bytes()),
            Err(MetaImageError::MissingColumn("coordZ"))
        ));
    }
}
