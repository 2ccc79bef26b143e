//! Binary little-endian PLY in the common Gaussian-splat export layout.
//!
//! Opacity is stored as a logit and scale as a natural log, as viewers
//! expect. Colour is the degree-0 spherical-harmonic coefficient
//! `f_dc = (c - 0.5) / SH_C0`. An optional `uchar provenance` property
//! carries the scene's provenance tags; files without it load as context.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scene::{GaussianPrimitive, GaussianScene, Provenance};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Opacities are clamped this far from 0 and 1 before the logit so that
/// stored values stay finite and reload bit-identically.
const OPACITY_EPS: f64 = 1e-7;

/// Quaternions within this distance of unit norm are kept as stored.
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("unsupported PLY format '{0}' (expected binary_little_endian 1.0)")]
    UnsupportedFormat(String),
    #[error("missing vertex property '{0}'")]
    MissingProperty(&'static str),
    #[error("vertex payload truncated: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("vertex {index}: non-finite value in '{property}'")]
    NonFinite { index: usize, property: String },
    #[error("vertex {index}: degenerate quaternion")]
    DegenerateQuaternion { index: usize },
    #[error("vertex {index}: scale '{property}' underflows to zero")]
    ZeroScale { index: usize, property: String },
    #[error("vertex {index}: unknown provenance tag {tag}")]
    UnknownProvenance { index: usize, tag: u8 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    stride: usize,
    properties: Vec<Property>,
}

struct Header {
    elements: Vec<Element>,
    payload_start: usize,
}

fn header_error(line: usize, reason: impl Into<String>) -> PlyError {
    PlyError::MalformedHeader {
        line,
        reason: reason.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(header_error(line_no + 1, "unterminated header"));
        };
        line_no += 1;
        let raw = &rest[..nl];
        pos += nl + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| header_error(line_no, "header is not UTF-8"))?
            .trim_end_matches('\r');
        let mut tokens = line.split_ascii_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        if line_no == 1 {
            if line != "ply" {
                return Err(header_error(1, "missing 'ply' magic"));
            }
            continue;
        }
        match keyword {
            "format" => {
                let fmt: Vec<&str> = tokens.collect();
                if fmt != ["binary_little_endian", "1.0"] {
                    return Err(PlyError::UnsupportedFormat(fmt.join(" ")));
                }
                saw_format = true;
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = tokens
                    .next()
                    .ok_or_else(|| header_error(line_no, "element without name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_error(line_no, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_owned(),
                    count,
                    stride: 0,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_error(line_no, "property before any element"))?;
                let ty_name = tokens
                    .next()
                    .ok_or_else(|| header_error(line_no, "property without type"))?;
                if ty_name == "list" {
                    return Err(header_error(line_no, "list properties are not supported"));
                }
                let ty = ScalarType::parse(ty_name)
                    .ok_or_else(|| header_error(line_no, format!("unknown type '{ty_name}'")))?;
                let name = tokens
                    .next()
                    .ok_or_else(|| header_error(line_no, "property without name"))?;
                if element.properties.iter().any(|p| p.name == name) {
                    return Err(header_error(
                        line_no,
                        format!("duplicate property '{name}'"),
                    ));
                }
                element.properties.push(Property {
                    name: name.to_owned(),
                    ty,
                    offset: element.stride,
                });
                element.stride += ty.size();
            }
            "end_header" => break,
            other => return Err(header_error(line_no, format!("unknown keyword '{other}'"))),
        }
    }
    if !saw_format {
        return Err(header_error(line_no, "missing format line"));
    }
    Ok(Header {
        elements,
        payload_start: pos,
    })
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Decodes a scene from PLY bytes.
pub fn parse_scene_ply(bytes: &[u8]) -> Result<GaussianScene, PlyError> {
    let header = parse_header(bytes)?;
    let mut offset = header.payload_start;
    let mut vertex = None;
    for element in &header.elements {
        let size = element
            .count
            .checked_mul(element.stride)
            .ok_or(PlyError::Truncated {
                expected: usize::MAX,
                actual: bytes.len() - offset,
            })?;
        if element.name == "vertex" {
            vertex = Some((element, offset));
            break;
        }
        offset = offset.checked_add(size).ok_or(PlyError::Truncated {
            expected: usize::MAX,
            actual: bytes.len(),
        })?;
    }
    let Some((element, start)) = vertex else {
        return Err(header_error(0, "no vertex element"));
    };
    let available = bytes.len().saturating_sub(start);
    let expected = element.count.saturating_mul(element.stride);
    if expected > available {
        return Err(PlyError::Truncated {
            expected,
            actual: available,
        });
    }

    let mut slots = [(ScalarType::F32, 0usize); 14];
    for (slot, name) in slots.iter_mut().zip(REQUIRED) {
        let prop = element
            .properties
            .iter()
            .find(|p| p.name == name)
            .ok_or(PlyError::MissingProperty(name))?;
        *slot = (prop.ty, prop.offset);
    }
    let provenance_slot = element
        .properties
        .iter()
        .find(|p| p.name == "provenance")
        .map(|p| (p.ty, p.offset));

    let mut scene = GaussianScene::new();
    for index in 0..element.count {
        let row = &bytes[start + index * element.stride..start + (index + 1) * element.stride];
        let mut v = [0.0f64; 14];
        for (k, &(ty, off)) in slots.iter().enumerate() {
            v[k] = ty.read(&row[off..off + ty.size()]);
            if !v[k].is_finite() {
                return Err(PlyError::NonFinite {
                    index,
                    property: REQUIRED[k].to_owned(),
                });
            }
        }
        let tag = match provenance_slot {
            Some((ty, off)) => {
                let raw = ty.read(&row[off..off + ty.size()]);
                let tag = raw as u8;
                if raw != tag as f64 {
                    return Err(PlyError::UnknownProvenance {
                        index,
                        tag: u8::MAX,
                    });
                }
                Provenance::from_u8(tag).ok_or(PlyError::UnknownProvenance { index, tag })?
            }
            None => Provenance::Context,
        };
        scene.push(decode_primitive(index, &v)?, tag);
    }
    Ok(scene)
}

fn decode_primitive(index: usize, v: &[f64; 14]) -> Result<GaussianPrimitive, PlyError> {
    let mean = Vector3::new(v[0], v[1], v[2]);
    let color = Vector3::new(v[3], v[4], v[5]).map(|f| (0.5 + SH_C0 * f).clamp(0.0, 1.0));
    let opacity = 1.0 / (1.0 + (-v[6]).exp());
    let mut scale = Vector3::zeros();
    for k in 0..3 {
        let s = v[7 + k].exp();
        if s == 0.0 {
            return Err(PlyError::ZeroScale {
                index,
                property: REQUIRED[7 + k].to_owned(),
            });
        }
        if !s.is_finite() {
            return Err(PlyError::NonFinite {
                index,
                property: REQUIRED[7 + k].to_owned(),
            });
        }
        scale[k] = s;
    }
    let q = Quaternion::new(v[10], v[11], v[12], v[13]);
    let norm = q.norm();
    if !(norm > 1e-12) {
        return Err(PlyError::DegenerateQuaternion { index });
    }
    let q = if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
        q
    } else {
        q / norm
    };
    Ok(GaussianPrimitive {
        mean,
        rotation: UnitQuaternion::new_unchecked(q),
        scale,
        opacity,
        color,
    })
}

const HEADER_PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
    "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Bytes per vertex written by [`encode_scene_ply`].
pub const VERTEX_STRIDE: usize = 17 * 4 + 1;

pub fn encode_header(count: usize) -> String {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {count}\n"));
    for name in HEADER_PROPERTIES {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("property uchar provenance\nend_header\n");
    header
}

/// Encodes a scene as PLY bytes.
pub fn encode_scene_ply(scene: &GaussianScene) -> Vec<u8> {
    let header = encode_header(scene.len());
    let mut out = Vec::with_capacity(header.len() + scene.len() * VERTEX_STRIDE);
    out.extend_from_slice(header.as_bytes());
    for (p, tag) in scene.primitives().iter().zip(scene.provenance()) {
        let alpha = p.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let q = p.rotation.quaternion();
        let row = [
            p.mean.x,
            p.mean.y,
            p.mean.z,
            0.0,
            0.0,
            0.0,
            (p.color.x - 0.5) / SH_C0,
            (p.color.y - 0.5) / SH_C0,
            (p.color.z - 0.5) / SH_C0,
            (alpha / (1.0 - alpha)).ln(),
            p.scale.x.ln(),
            p.scale.y.ln(),
            p.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(tag.to_u8());
    }
    out
}

pub fn load_scene_ply(path: impl AsRef<Path>) -> Result<GaussianScene, PlyError> {
    parse_scene_ply(&std::fs::read(path)?)
}

pub fn save_scene_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<(), PlyError> {
    std::fs::write(path, encode_scene_ply(scene))?;
    Ok(())
}
