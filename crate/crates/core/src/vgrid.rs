//! `.vgrid` container: magic, little-endian `u32` header length, a JSON
//! header, then `f32` little-endian node data in x-fastest order with
//! channels interleaved per node.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Aabb, CategoryField, ColorField, DensityField, VoxelGrid};

pub const MAGIC: &[u8; 6] = b"VGRID\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgridHeader {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub channels: usize,
    pub dtype: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_names: Option<Vec<String>>,
}

impl VgridHeader {
    fn for_grid(grid: &VoxelGrid, kind: &str) -> Self {
        Self {
            resolution: grid.resolution(),
            bounds: grid.bounds(),
            channels: grid.channels(),
            dtype: "f32".into(),
            endianness: "little".into(),
            kind: Some(kind.into()),
            temperature: None,
            category_names: None,
        }
    }
}

pub fn encode(header: &VgridHeader, grid: &VoxelGrid) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + grid.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in grid.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(VgridHeader, VoxelGrid)> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::format("vgrid", "bad magic"))?;
    if rest.len() < 4 {
        return Err(Error::format("vgrid", "truncated header length"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let json = rest
        .get(4..4 + len)
        .ok_or_else(|| Error::format("vgrid", "truncated header"))?;
    let header: VgridHeader = serde_json::from_slice(json)?;
    if header.dtype != "f32" || header.endianness != "little" {
        return Err(Error::format(
            "vgrid",
            format!("unsupported dtype {} / {}", header.dtype, header.endianness),
        ));
    }
    let data = &rest[4 + len..];
    let count = header.resolution.iter().product::<usize>() * header.channels;
    if data.len() != count * 4 {
        return Err(Error::format(
            "vgrid",
            format!("expected {} data bytes, found {}", count * 4, data.len()),
        ));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let grid = VoxelGrid::new(header.resolution, header.bounds, header.channels, values)?;
    Ok((header, grid))
}

fn write(path: &Path, header: &VgridHeader, grid: &VoxelGrid) -> Result<()> {
    fs::write(path, encode(header, grid)?).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<(VgridHeader, VoxelGrid)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_density(path: &Path, field: &DensityField) -> Result<()> {
    write(path, &VgridHeader::for_grid(field.grid(), "density"), field.grid())
}

pub fn read_density(path: &Path) -> Result<DensityField> {
    DensityField::new(read(path)?.1)
}

pub fn write_color(path: &Path, field: &ColorField) -> Result<()> {
    write(path, &VgridHeader::for_grid(field.grid(), "color"), field.grid())
}

pub fn read_color(path: &Path) -> Result<ColorField> {
    ColorField::new(read(path)?.1)
}

pub fn write_category(path: &Path, field: &CategoryField) -> Result<()> {
    let mut header = VgridHeader::for_grid(field.grid(), "category");
    header.temperature = Some(field.temperature());
    header.category_names = Some(field.names().to_vec());
    write(path, &header, field.grid())
}

pub fn read_category(path: &Path) -> Result<CategoryField> {
    let (header, grid) = read(path)?;
    let temperature = header
        .temperature
        .ok_or_else(|| Error::format("vgrid", "category field without temperature"))?;
    let names = header
        .category_names
        .ok_or_else(|| Error::format("vgrid", "category field without names"))?;
    CategoryField::new(grid, temperature, names)
}
