use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use super::{write_atomic, ImagingError};

/// Largest instance ID the 16-bit PNG container can hold.
pub const MAX_PNG_LABEL: u32 = u16::MAX as u32;

/// Per-pixel instance IDs, row-major. `0` is background, `k >= 1` is
/// instance `k`.
///
/// IDs are held as `u32` so that maps exceeding the on-disk 16-bit range can
/// be represented and rejected at write time rather than silently wrapped.
#[derive(Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl std::fmt::Debug for LabelMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let fg = self.labels.iter().filter(|&&l| l != 0).count();
        write!(
            f,
            "LabelMap({}x{}, {} instances, {} foreground px, areas {:?})",
            self.width,
            self.height,
            self.instance_count(),
            fg,
            self.areas()
        )
    }
}

/// Axis-aligned inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Dimensions {
                width,
                height,
                channels: 1,
            });
        }
        if labels.len() != width * height {
            return Err(ImagingError::BufferLength {
                expected: width * height,
                actual: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0; width * height]).expect("non-empty label map")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self::new(width, height, labels).expect("non-empty label map")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, id: u32) {
        self.labels[y * self.width + x] = id;
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of distinct non-zero IDs.
    pub fn instance_count(&self) -> usize {
        self.areas().len()
    }

    /// Pixel count per instance ID.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut areas = BTreeMap::new();
        for &l in self.labels.iter().filter(|&&l| l != 0) {
            *areas.entry(l).or_insert(0) += 1;
        }
        areas
    }

    /// Flat pixel indices of every instance, in row-major order.
    pub fn instance_pixels(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out.entry(l).or_default().push(i);
            }
        }
        out
    }

    pub fn bboxes(&self) -> BTreeMap<u32, BBox> {
        let mut out: BTreeMap<u32, BBox> = BTreeMap::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.get(x, y);
                if l == 0 {
                    continue;
                }
                out.entry(l)
                    .and_modify(|b| {
                        b.x0 = b.x0.min(x);
                        b.x1 = b.x1.max(x);
                        b.y1 = y;
                    })
                    .or_insert(BBox {
                        x0: x,
                        y0: y,
                        x1: x,
                        y1: y,
                    });
            }
        }
        out
    }

    /// Relabels IDs to `1..=K` in order of first appearance (row-major).
    pub fn compact(&self) -> LabelMap {
        let mut mapping: HashMap<u32, u32> = HashMap::new();
        let mut next = 1u32;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    *mapping.entry(l).or_insert_with(|| {
                        let id = next;
                        next += 1;
                        id
                    })
                }
            })
            .collect();
        LabelMap {
            width: self.width,
            height: self.height,
            labels,
        }
    }

    pub fn is_compact(&self) -> bool {
        let mut next = 1u32;
        for &l in &self.labels {
            if l == next {
                next += 1;
            } else if l >= next {
                return false;
            }
        }
        true
    }

    /// Checks that every instance forms a single 4-connected component.
    pub fn validate(&self) -> Result<(), ImagingError> {
        let (count, comp) = components4(self.width, self.height, |i| self.labels[i], |a, b| a == b);
        let mut seen: HashMap<u32, u32> = HashMap::new();
        let mut bad: Option<u32> = None;
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let c = comp[i];
            match seen.get(&l) {
                Some(&prev) if prev != c => bad = Some(bad.map_or(l, |b: u32| b.min(l))),
                None => {
                    seen.insert(l, c);
                }
                _ => {}
            }
        }
        let _ = count;
        match bad {
            Some(id) => Err(ImagingError::NonContiguous { id }),
            None => Ok(()),
        }
    }

    /// Same map with every pixel of `id` set to background.
    pub fn without(&self, id: u32) -> LabelMap {
        let mut out = self.clone();
        out.labels
            .iter_mut()
            .filter(|l| **l == id)
            .for_each(|l| *l = 0);
        out
    }

    /// Map holding only instance `id` (relabelled to 1).
    pub fn isolate(&self, id: u32) -> LabelMap {
        let labels = self.labels.iter().map(|&l| u32::from(l == id)).collect();
        LabelMap {
            width: self.width,
            height: self.height,
            labels,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let distinct = self.instance_count();
        if self.max_label() > MAX_PNG_LABEL {
            return Err(ImagingError::Capacity {
                count: distinct.max(self.max_label() as usize),
            });
        }
        let raw: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("sized buffer");
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageLuma16(buf)
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImagingError::format("<memory>", e))?;
        Ok(out.into_inner())
    }

    /// Decodes a label PNG and compacts it. 8-bit input is widened; inputs
    /// with more than two channels are rejected.
    pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<LabelMap, ImagingError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| ImagingError::format(origin, e))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels: Vec<u32> = match img {
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| u32::from(p.0[0])).collect(),
            DynamicImage::ImageLumaA16(buf) => buf.pixels().map(|p| u32::from(p.0[0])).collect(),
            other => {
                return Err(ImagingError::format(
                    origin,
                    format!("label maps must be single-channel, got {:?}", other.color()),
                ))
            }
        };
        Ok(LabelMap::new(w, h, labels)?.compact())
    }
}

/// 4-connected component labelling of pixels whose key is non-zero, where
/// neighbours join when `same(key_a, key_b)`. Returns the component count and
/// a per-pixel component index (`u32::MAX` for zero-key pixels).
pub(crate) fn components4<K: Copy + PartialEq + Default>(
    width: usize,
    height: usize,
    key: impl Fn(usize) -> K,
    same: impl Fn(K, K) -> bool,
) -> (u32, Vec<u32>) {
    let n = width * height;
    let mut comp = vec![u32::MAX; n];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..n {
        let k = key(start);
        if k == K::default() || comp[start] != u32::MAX {
            continue;
        }
        comp[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if comp[j] == u32::MAX {
                    let kj = key(j);
                    if kj != K::default() && same(k, kj) {
                        comp[j] = count;
                        stack.push(j);
                    }
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        count += 1;
    }
    (count, comp)
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap, ImagingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    LabelMap::decode_png(&bytes, path)
}

pub fn write_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let bytes = map.encode_png()?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compaction_follows_first_appearance() {
        let m = LabelMap::new(4, 1, vec![0, 5, 5, 9]).unwrap();
        assert_eq!(m.compact().labels(), &[0, 1, 1, 2]);
        let m = LabelMap::new(4, 1, vec![9, 0, 5, 9]).unwrap();
        assert_eq!(m.compact().labels(), &[1, 0, 2, 1]);
        assert!(m.compact().is_compact());
        assert!(!m.is_compact());
    }

    #[test]
    fn validation_flags_split_instances() {
        let m = LabelMap::new(3, 3, vec![1, 0, 1, 0, 0, 0, 2, 2, 0]).unwrap();
        assert!(matches!(
            m.validate(),
            Err(ImagingError::NonContiguous { id: 1 })
        ));
        // Diagonal touch is not 4-connected.
        let m = LabelMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert!(m.validate().is_err());
        let m = LabelMap::new(2, 2, vec![1, 1, 0, 2]).unwrap();
        assert!(m.validate().is_ok());
    }

    #[test]
    fn reads_widened_eight_bit_and_rejects_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("l8.png");
        image::GrayImage::from_raw(4, 1, vec![0, 7, 7, 3])
            .unwrap()
            .save(&p8)
            .unwrap();
        assert_eq!(read_label_map(&p8).unwrap().labels(), &[0, 1, 1, 2]);
        let prgb = dir.path().join("rgb.png");
        image::RgbImage::from_raw(1, 1, vec![1, 2, 3])
            .unwrap()
            .save(&prgb)
            .unwrap();
        assert!(matches!(
            read_label_map(&prgb),
            Err(ImagingError::Format { .. })
        ));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(matches!(
            read_label_map(&junk),
            Err(ImagingError::Format { .. })
        ));
    }

    #[test]
    fn all_zero_map_has_no_instances() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        write_label_map(&LabelMap::zeros(4, 4), &p).unwrap();
        let m = read_label_map(&p).unwrap();
        assert_eq!(m.instance_count(), 0);
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn capacity_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let full = LabelMap::from_fn(256, 256, |x, y| (y * 256 + x) as u32);
        assert_eq!(full.instance_count(), 65535);
        let p = dir.path().join("full.png");
        write_label_map(&full, &p).unwrap();
        assert_eq!(read_label_map(&p).unwrap(), full);

        let over = LabelMap::from_fn(256, 256, |x, y| (y * 256 + x) as u32 + 1);
        assert_eq!(over.instance_count(), 65536);
        assert!(matches!(
            write_label_map(&over, dir.path().join("over.png")),
            Err(ImagingError::Capacity { .. })
        ));
    }

    fn arb_map() -> impl Strategy<Value = LabelMap> {
        (1usize..24, 1usize..24, 0u32..12).prop_flat_map(|(w, h, k)| {
            proptest::collection::vec(0..=k, w * h)
                .prop_map(move |v| LabelMap::new(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn compaction_is_idempotent(m in arb_map()) {
            let c = m.compact();
            prop_assert_eq!(c.compact(), c.clone());
            prop_assert_eq!(c.instance_count(), m.instance_count());
            prop_assert_eq!(c.max_label() as usize, c.instance_count());
        }

        #[test]
        fn png_round_trip_is_bit_exact(m in arb_map(), scale in 1u32..5000) {
            // Stretch IDs across the 16-bit range, then compact.
            let wide = LabelMap::new(m.width(), m.height(),
                m.labels().iter().map(|&l| (l * scale).min(MAX_PNG_LABEL)).collect()).unwrap().compact();
            let bytes = wide.encode_png().unwrap();
            prop_assert_eq!(LabelMap::decode_png(&bytes, Path::new("mem")).unwrap(), wide);
        }
    }
}
