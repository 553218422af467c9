use serde::{Deserialize, Serialize};

use super::RasterImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Red,
    Green,
    Blue,
    Gray,
}

/// Which planes feed the segmenter. `nucleus = None` disables the nucleus
/// plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub cytoplasm: Channel,
    pub nucleus: Option<Channel>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            cytoplasm: Channel::Green,
            nucleus: Some(Channel::Gray),
        }
    }
}

fn pick(img: &RasterImage, ch: Channel) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    if img.channels() == 1 {
        return img.clone();
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| match ch {
            Channel::Red => p[0],
            Channel::Green => p[1],
            Channel::Blue => p[2],
            Channel::Gray => {
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8
            }
        })
        .collect();
    RasterImage::new(w, h, 1, data).expect("same dims as input")
}

/// Splits an image into its cytoplasm plane and optional nucleus plane.
/// Single-channel inputs return that channel for every pick.
pub fn extract_channel(img: &RasterImage, spec: ChannelSpec) -> (RasterImage, Option<RasterImage>) {
    (
        pick(img, spec.cytoplasm),
        spec.nucleus.map(|c| pick(img, c)),
    )
}
