use std::path::Path;

use super::{write_atomic, ImagingError};

pub const CYTF_MAGIC: &[u8; 4] = b"CYTF";
pub const CYTF_VERSION: u32 = 1;

/// Per-pixel flow toward the owning cell's center plus a cell-probability
/// plane. All planes are row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub dy: Vec<f32>,
    pub dx: Vec<f32>,
    pub cellprob: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dy: vec![0.0; n],
            dx: vec![0.0; n],
            cellprob: vec![0.0; n],
        }
    }

    pub fn from_planes(
        width: usize,
        height: usize,
        dy: Vec<f32>,
        dx: Vec<f32>,
        cellprob: Vec<f32>,
    ) -> Result<Self, ImagingError> {
        let n = width * height;
        if width == 0 || height == 0 {
            return Err(ImagingError::Dimensions {
                width,
                height,
                channels: 3,
            });
        }
        for plane in [&dy, &dx, &cellprob] {
            if plane.len() != n {
                return Err(ImagingError::BufferLength {
                    expected: n,
                    actual: plane.len(),
                });
            }
        }
        Ok(Self {
            width,
            height,
            dy,
            dx,
            cellprob,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(16 + 12 * n);
        out.extend_from_slice(CYTF_MAGIC);
        out.extend_from_slice(&CYTF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for plane in [&self.dy, &self.dx, &self.cellprob] {
            for v in plane.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self, ImagingError> {
        let fail = |reason: &str| ImagingError::format(origin, reason);
        if bytes.len() < 16 {
            return Err(fail("truncated header"));
        }
        if &bytes[..4] != CYTF_MAGIC {
            return Err(fail("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CYTF_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let (height, width) = (word(8) as usize, word(12) as usize);
        let n = height
            .checked_mul(width)
            .ok_or_else(|| fail("dimension overflow"))?;
        if bytes.len() != 16 + 12 * n {
            return Err(fail(&format!(
                "payload is {} bytes, expected {}",
                bytes.len() - 16,
                12 * n
            )));
        }
        let plane = |k: usize| -> Vec<f32> {
            bytes[16 + 4 * n * k..16 + 4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Self::from_planes(width, height, plane(0), plane(1), plane(2))
    }
}

pub fn write_flows(flows: &FlowField, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    write_atomic(path.as_ref(), &flows.encode())?;
    Ok(())
}

pub fn read_flows(path: impl AsRef<Path>) -> Result<FlowField, ImagingError> {
    let path = path.as_ref();
    FlowField::decode(&std::fs::read(path)?, path)
}
