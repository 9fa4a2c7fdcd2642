//! RGB images in `[-1, 1]` and PNG encoding for images and label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::LabelMap;
use crate::tensor::Tensor;

/// Planar RGB image, `[channel][row][col]`, nominal range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let hw = height * width;
        let data = rgb.iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        Self { height, width, data }
    }

    /// Image from batch item `i` of a `[N, 3, H, W]` tensor.
    pub fn from_batch(t: &Tensor, i: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        Self::new(h, w, t.batch_item(i).to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        self.data[(channel * self.height + row) * self.width + col] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image tensor")
    }

    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::cat_batch(&parts)
    }

    /// Interleaved 8-bit RGBA, clamping to `[-1, 1]`.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(hw * 4);
        for p in 0..hw {
            for c in 0..3 {
                out.push(to_u8(self.data[c * hw + p]));
            }
            out.push(255);
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let hw = self.height * self.width;
        let mut rgb = Vec::with_capacity(hw * 3);
        for p in 0..hw {
            for c in 0..3 {
                rgb.push(to_u8(self.data[c * hw + p]));
            }
        }
        encode_png(self.width, self.height, png::ColorType::Rgb, None, &rgb)
    }

    /// Mean absolute per-pixel difference (averaged over channels) restricted
    /// to the pixels where `select` holds; `None` if no pixel is selected.
    pub fn mean_abs_delta(&self, other: &Image, select: impl Fn(usize) -> bool) -> Option<f64> {
        let hw = self.height * self.width;
        let mut acc = 0.0;
        let mut count = 0usize;
        for p in (0..hw).filter(|&p| select(p)) {
            acc += (0..3).map(|c| (self.data[c * hw + p] - other.data[c * hw + p]).abs()).sum::<f64>() / 3.0;
            count += 1;
        }
        (count > 0).then(|| acc / count as f64)
    }
}

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn encode_png(width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf)
}

/// Display colours for label indices (cycled past the table length).
pub const LABEL_PALETTE: [[u8; 3]; 8] = [
    [70, 130, 180],
    [107, 142, 35],
    [150, 100, 100],
    [250, 170, 30],
    [34, 90, 34],
    [128, 64, 128],
    [220, 20, 60],
    [190, 190, 190],
];

/// Indexed-colour PNG whose palette indices are the class ids.
pub fn label_map_to_png(y: &LabelMap) -> Result<Vec<u8>> {
    if y.class_count() > 256 {
        return Err(Error::Format("more than 256 classes cannot be palette-encoded".into()));
    }
    let palette = (0..y.class_count()).flat_map(|c| LABEL_PALETTE[c % LABEL_PALETTE.len()]).collect();
    let idx: Vec<u8> = y.labels().iter().map(|&l| l as u8).collect();
    encode_png(y.width(), y.height(), png::ColorType::Indexed, Some(palette), &idx)
}

/// Decodes a label PNG back to raw palette indices. Accepts indexed or
/// 8-bit grayscale files.
pub fn label_map_from_png(bytes: &[u8], class_count: usize) -> Result<LabelMap> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::Format(format!("unsupported label png {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let labels = (0..h)
        .flat_map(|r| buf[r * info.line_size..r * info.line_size + w].iter().map(|&v| v as u16).collect::<Vec<_>>())
        .collect();
    LabelMap::new(h, w, class_count, labels)
}
