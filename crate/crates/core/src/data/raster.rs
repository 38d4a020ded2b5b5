//! Planar rasters and their PNG encodings.
//!
//! Colour images are 8-bit RGB PNGs, sketches 8-bit grayscale with strokes
//! stored as 255, label maps 8-bit indexed PNGs whose palette is the label
//! schema's.

use std::io::Cursor;

use candle_core::{Device, Tensor};

use super::schema::LabelSchema;
use crate::error::{dim_err, Error, Result};

/// Square RGB image, planar (C, H, W), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub res: usize,
    pub data: Vec<f32>,
}

impl ColorImage {
    pub fn new(res: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * res * res {
            return Err(dim_err(format!("{} values for a {res}² RGB image", data.len())));
        }
        Ok(Self { res, data })
    }

    pub fn filled(res: usize, rgb: [f32; 3]) -> Self {
        let hw = res * res;
        let mut data = vec![0.0; 3 * hw];
        for c in 0..3 {
            data[c * hw..(c + 1) * hw].fill(rgb[c]);
        }
        Self { res, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.res + y) * self.res + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.res + y) * self.res + x] = v;
    }

    /// Rec. 601 luma.
    pub fn gray(&self) -> Vec<f32> {
        let hw = self.res * self.res;
        (0..hw)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[hw + i] + 0.114 * self.data[2 * hw + i])
            .collect()
    }

    /// (1, 3, H, W) in [−1, 1].
    pub fn to_tensor(&self, dev: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|x| x * 2.0 - 1.0).collect();
        Ok(Tensor::from_vec(v, (1, 3, self.res, self.res), dev)?)
    }

    pub fn batch_tensor(images: &[&ColorImage], dev: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| dim_err("empty image batch"))?;
        let mut v = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.res != first.res {
                return Err(dim_err("image batch with mixed resolutions"));
            }
            v.extend(im.data.iter().map(|x| x * 2.0 - 1.0));
        }
        Ok(Tensor::from_vec(v, (images.len(), 3, first.res, first.res), dev)?)
    }

    /// From one (3, H, W) or (1, 3, H, W) tensor in [−1, 1]; values are clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 || h != w {
            return Err(dim_err(format!("expected a square RGB tensor, got {c}×{h}×{w}")));
        }
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        Ok(Self { res: h, data })
    }

    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let (b, _, _, _) = t.dims4()?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    /// The 8-bit values stored by [`encode_rgb_png`].
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut w = enc.write_header()?;
        w.write_image_data(bytes)?;
        w.finish()?;
    }
    Ok(out)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: Vec<u8>,
    palette: Option<Vec<u8>>,
}

fn decode(data: &[u8]) -> Result<Decoded> {
    let mut dec = png::Decoder::new(Cursor::new(data));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!("unsupported PNG bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        bytes: buf,
        palette,
    })
}

pub fn encode_rgb_png(img: &ColorImage) -> Result<Vec<u8>> {
    let hw = img.res * img.res;
    let mut bytes = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            bytes.push(to_u8(img.data[c * hw + i]));
        }
    }
    encode(img.res, img.res, png::ColorType::Rgb, None, &bytes)
}

/// Accepts RGB, RGBA, grayscale and grayscale-alpha 8-bit PNGs.
pub fn decode_rgb_png(data: &[u8]) -> Result<ColorImage> {
    let d = decode(data)?;
    if d.width != d.height {
        return Err(Error::Data(format!("image is {}×{}, expected square", d.width, d.height)));
    }
    let hw = d.width * d.height;
    let (stride, gray) = match d.color {
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (4, false),
        png::ColorType::Grayscale => (1, true),
        png::ColorType::GrayscaleAlpha => (2, true),
        png::ColorType::Indexed => {
            let pal = d.palette.ok_or_else(|| Error::Data("indexed PNG without palette".into()))?;
            let mut data = vec![0.0; 3 * hw];
            for (i, &ix) in d.bytes.iter().enumerate().take(hw) {
                for c in 0..3 {
                    data[c * hw + i] = *pal.get(3 * ix as usize + c).unwrap_or(&0) as f32 / 255.0;
                }
            }
            return ColorImage::new(d.width, data);
        }
    };
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            let b = if gray { d.bytes[i * stride] } else { d.bytes[i * stride + c] };
            data[c * hw + i] = b as f32 / 255.0;
        }
    }
    ColorImage::new(d.width, data)
}

/// Strokes (values ≥ 0.5) become 255.
pub fn encode_sketch_png(sketch: &[f32], res: usize) -> Result<Vec<u8>> {
    if sketch.len() != res * res {
        return Err(dim_err("sketch size does not match resolution"));
    }
    let bytes: Vec<u8> = sketch.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    encode(res, res, png::ColorType::Grayscale, None, &bytes)
}

/// 8-bit grayscale PNG of a w×h raster in [0, 1].
pub fn encode_gray_png(values: &[f32], w: usize, h: usize) -> Result<Vec<u8>> {
    if values.len() != w * h {
        return Err(dim_err("gray raster size does not match its shape"));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    encode(w, h, png::ColorType::Grayscale, None, &bytes)
}

/// Any non-indexed 8-bit PNG as (values in [0, 1] from the first channel,
/// width, height).
pub fn decode_gray_png(data: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let d = decode(data)?;
    let stride = match d.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Data("gray PNG must not be indexed".into())),
    };
    let n = d.width * d.height;
    let v = (0..n).map(|i| d.bytes[i * stride] as f32 / 255.0).collect();
    Ok((v, d.width, d.height))
}

/// Grayscale (or RGB, by its first channel) PNG; pixels ≥ 128 are strokes.
pub fn decode_sketch_png(data: &[u8]) -> Result<(Vec<f32>, usize)> {
    let d = decode(data)?;
    if d.width != d.height {
        return Err(Error::Data("sketch must be square".into()));
    }
    let stride = match d.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Data("sketch PNG must not be indexed".into())),
    };
    let n = d.width * d.height;
    let v = (0..n)
        .map(|i| if d.bytes[i * stride] >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok((v, d.width))
}

pub fn encode_labels_png(labels: &[u8], res: usize, schema: &LabelSchema) -> Result<Vec<u8>> {
    if labels.len() != res * res {
        return Err(dim_err("label map size does not match resolution"));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= schema.len()) {
        return Err(Error::Data(format!("label {l} outside the schema")));
    }
    encode(res, res, png::ColorType::Indexed, Some(schema.palette_bytes()), labels)
}

/// Indexed PNGs are read by index; RGB PNGs are mapped through the palette.
pub fn decode_labels_png(data: &[u8], schema: &LabelSchema) -> Result<(Vec<u8>, usize)> {
    let d = decode(data)?;
    if d.width != d.height {
        return Err(Error::Data("label map must be square".into()));
    }
    let n = d.width * d.height;
    let labels: Vec<u8> = match d.color {
        png::ColorType::Indexed => d.bytes[..n].to_vec(),
        png::ColorType::Grayscale => d.bytes[..n].to_vec(),
        png::ColorType::Rgb | png::ColorType::Rgba => {
            let stride = if d.color == png::ColorType::Rgb { 3 } else { 4 };
            (0..n)
                .map(|i| {
                    let px = [d.bytes[i * stride], d.bytes[i * stride + 1], d.bytes[i * stride + 2]];
                    schema
                        .label_of_color(px)
                        .ok_or_else(|| Error::Data(format!("colour {px:?} is not in the palette")))
                })
                .collect::<Result<_>>()?
        }
        other => return Err(Error::Data(format!("unsupported label PNG colour type {other:?}"))),
    };
    if let Some(l) = labels.iter().find(|&&l| l as usize >= schema.len()) {
        return Err(Error::Data(format!("label {l} outside the schema")));
    }
    Ok((labels, d.width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let schema = LabelSchema::desk();
        let labels: Vec<u8> = (0..64).map(|i| (i % 10) as u8).collect();
        let png = encode_labels_png(&labels, 8, &schema).unwrap();
        assert_eq!(decode_labels_png(&png, &schema).unwrap(), (labels, 8));

        let sketch: Vec<f32> = (0..64).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let png = encode_sketch_png(&sketch, 8).unwrap();
        assert_eq!(decode_sketch_png(&png).unwrap(), (sketch, 8));

        let img = ColorImage::new(4, (0..48).map(|i| i as f32 / 47.0).collect()).unwrap();
        let back = decode_rgb_png(&encode_rgb_png(&img).unwrap()).unwrap();
        assert_eq!(back.quantized(), img.quantized());
    }

    #[test]
    fn garbage_is_a_decode_error() {
        assert!(decode_rgb_png(b"not a png").is_err());
    }
}
