//! Overlay colors, one per trainId (the usual Cityscapes palette).

use dial_core::dataio::CLASS_NAMES;
use dial_core::{Image, LabelMap, Result, Scalar, IGNORE_LABEL, NUM_CLASSES};

pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

/// Prediction colors blended half and half over the input; ignored pixels
/// keep the input color.
pub fn overlay<T: Scalar>(img: &Image<T>, labels: &LabelMap) -> Result<Image<f32>> {
    let rgb = img.to_rgb8();
    let mut out = rgb.clone();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == IGNORE_LABEL || l as usize >= NUM_CLASSES {
            continue;
        }
        for c in 0..3 {
            let v = (u16::from(rgb[3 * i + c]) + u16::from(PALETTE[l as usize][c])).div_ceil(2);
            out[3 * i + c] = v as u8;
        }
    }
    Image::from_rgb8(img.height(), img.width(), &out)
}

/// Markdown-style legend used in the README and eval output directory.
pub fn legend() -> String {
    CLASS_NAMES
        .iter()
        .zip(PALETTE)
        .enumerate()
        .map(|(i, (name, [r, g, b]))| format!("{i:2} {name:<14} {r:3} {g:3} {b:3}\n"))
        .collect()
}
