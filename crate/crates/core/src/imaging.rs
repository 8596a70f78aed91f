//! Image geometry: bounded aspect-preserving resize, crop-and-zoom with a
//! minimum window, box remapping between frames, and IoU.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::LesionBox;
use crate::exec::ExecPolicy;

pub const DEFAULT_MAX_H: u32 = 600;
pub const DEFAULT_MAX_W: u32 = 800;
pub const DEFAULT_CROP_FLOOR: u32 = 224;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("box frame {box_w}x{box_h} does not match image {img_w}x{img_h}")]
    FrameMismatch { box_w: u32, box_h: u32, img_w: u32, img_h: u32 },
    #[error("degenerate box after remapping: {0}")]
    DegenerateBox(String),
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image buffer: {0}")]
    InvalidBuffer(String),
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode image: {0}")]
    Encode(#[from] image::ImageError),
}

/// Row-major 8-bit pixel buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(ImageError::InvalidBuffer(format!(
                "dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImageError::InvalidBuffer(format!(
                "expected {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds an image by evaluating `f(x, y, channel)` for every sample.
    pub fn from_fn(width: u32, height: u32, channels: u8, f: impl Fn(u32, u32, u8) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    /// Decodes a PNG or JPEG file; grayscale and alpha inputs become RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, 3, rgb.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(ImageError::InvalidBuffer(format!("cannot encode {c}-channel image"))),
        };
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.data,
            self.width,
            self.height,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| ImageError::InvalidBuffer(e.to_string()))
    }

    /// SHA-256 over dimensions and pixels, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update([self.channels]);
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn full_box(&self) -> LesionBox {
        LesionBox::full_frame(self.width, self.height)
    }
}

/// Upper bounds for the resized working image, as height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeBounds {
    pub max_h: u32,
    pub max_w: u32,
}

impl Default for ResizeBounds {
    fn default() -> Self {
        Self { max_h: DEFAULT_MAX_H, max_w: DEFAULT_MAX_W }
    }
}

impl ResizeBounds {
    /// `min(1, max_h / h, max_w / w)`.
    pub fn scale_for(&self, width: u32, height: u32) -> f64 {
        let sh = self.max_h as f64 / height as f64;
        let sw = self.max_w as f64 / width as f64;
        1.0f64.min(sh).min(sw)
    }

    /// Output `(width, height)` for an input of the given size.
    pub fn output_dims(&self, width: u32, height: u32) -> (u32, u32) {
        let s = self.scale_for(width, height);
        if s >= 1.0 {
            return (width, height);
        }
        let w = (round_half_up(width as f64 * s) as u32).clamp(1, self.max_w);
        let h = (round_half_up(height as f64 * s) as u32).clamp(1, self.max_h);
        (w, h)
    }
}

pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Shrinks `img` to fit the bounds, preserving aspect ratio. Never enlarges.
///
/// Returns the resized image and the scale factor applied.
pub fn resize_to_fit(img: &ImageBuffer, bounds: ResizeBounds) -> (ImageBuffer, f64) {
    let policy = if cfg!(feature = "parallel") && img.data.len() > 1 << 20 {
        ExecPolicy::Parallel { threads: 0 }
    } else {
        ExecPolicy::Sequential
    };
    resize_to_fit_with(img, bounds, policy)
}

/// [`resize_to_fit`] with an explicit row-execution policy.
pub fn resize_to_fit_with(img: &ImageBuffer, bounds: ResizeBounds, policy: ExecPolicy) -> (ImageBuffer, f64) {
    let scale = bounds.scale_for(img.width, img.height);
    if scale >= 1.0 {
        return (img.clone(), 1.0);
    }
    let (ow, oh) = bounds.output_dims(img.width, img.height);
    (bilinear(img, ow, oh, policy), scale)
}

/// Bilinear resampling with pixel-centre alignment.
fn bilinear(img: &ImageBuffer, ow: u32, oh: u32, policy: ExecPolicy) -> ImageBuffer {
    let c = img.channels as usize;
    let (iw, ih) = (img.width as usize, img.height as usize);
    let rx = iw as f64 / ow as f64;
    let ry = ih as f64 / oh as f64;

    let xs: Vec<(usize, usize, f64)> = (0..ow as usize)
        .map(|x| sample_coord(x, rx, iw))
        .collect();

    let row = |y: usize| -> Vec<u8> {
        let (y0, y1, fy) = sample_coord(y, ry, ih);
        let mut out = Vec::with_capacity(ow as usize * c);
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |xx: usize, yy: usize| img.data[(yy * iw + xx) * c + ch] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    };

    let ys: Vec<usize> = (0..oh as usize).collect();
    let rows = policy.map(&ys, |y| row(*y));
    let data = rows.concat();
    ImageBuffer { width: ow, height: oh, channels: img.channels, data }
}

fn sample_coord(o: usize, ratio: f64, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Rescales a box into a `new_w`×`new_h` frame, rounding half-up and
/// clipping to the frame. A box that collapses is an error, not a clamp.
pub fn remap_box(b: &LesionBox, scale: f64, new_w: u32, new_h: u32) -> Result<LesionBox, GeometryError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeometryError::BadScale(scale));
    }
    if !b.coords().iter().all(|c| c.is_finite()) {
        return Err(GeometryError::InvalidBox(b.to_string()));
    }
    let map = |v: f64, hi: u32| round_half_up(v * scale).clamp(0.0, hi as f64);
    let out = LesionBox::unchecked(
        map(b.x1, new_w),
        map(b.y1, new_h),
        map(b.x2, new_w),
        map(b.y2, new_h),
        new_w,
        new_h,
    );
    if out.x1 >= out.x2 || out.y1 >= out.y2 {
        return Err(GeometryError::DegenerateBox(format!("{b} at scale {scale} -> {out}")));
    }
    Ok(out)
}

/// Geometry of one crop-and-zoom operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Box as requested.
    pub source: LesionBox,
    /// Pixel window actually copied, after floor expansion and clipping.
    pub effective: LesionBox,
    /// Resize factor applied to the image the crop was taken from.
    pub source_scale: f64,
}

/// Cuts the lesion view out of `img`.
///
/// Windows narrower than `floor` grow symmetrically about the box centre,
/// slide inward when they hit an edge, and fall back to the full extent on
/// axes where the image itself is smaller than `floor`. Pixels are copied
/// verbatim.
pub fn crop_and_zoom(img: &ImageBuffer, b: &LesionBox, floor: u32) -> Result<(ImageBuffer, CropSpec), GeometryError> {
    if b.frame_w != img.width || b.frame_h != img.height {
        return Err(GeometryError::FrameMismatch {
            box_w: b.frame_w,
            box_h: b.frame_h,
            img_w: img.width,
            img_h: img.height,
        });
    }
    if !b.is_valid() {
        return Err(GeometryError::InvalidBox(b.to_string()));
    }
    let w = crop_window(b, floor);
    let (x1, y1, x2, y2) = (w.x1 as u32, w.y1 as u32, w.x2 as u32, w.y2 as u32);

    let c = img.channels as usize;
    let iw = img.width as usize;
    let cw = (x2 - x1) as usize;
    let mut data = Vec::with_capacity(cw * (y2 - y1) as usize * c);
    for y in y1..y2 {
        let start = (y as usize * iw + x1 as usize) * c;
        data.extend_from_slice(&img.data[start..start + cw * c]);
    }
    let crop = ImageBuffer { width: x2 - x1, height: y2 - y1, channels: img.channels, data };
    Ok((crop, CropSpec { source: *b, effective: w, source_scale: 1.0 }))
}

/// The pixel window [`crop_and_zoom`] copies for `b`, in `b`'s frame.
pub fn crop_window(b: &LesionBox, floor: u32) -> LesionBox {
    let (x1, x2) = crop_axis(b.x1, b.x2, b.frame_w, floor);
    let (y1, y2) = crop_axis(b.y1, b.y2, b.frame_h, floor);
    LesionBox::unchecked(x1 as f64, y1 as f64, x2 as f64, y2 as f64, b.frame_w, b.frame_h)
}

fn crop_axis(lo: f64, hi: f64, extent: u32, floor: u32) -> (u32, u32) {
    let ext = extent as i64;
    let mut a = (lo.floor() as i64).clamp(0, ext);
    let mut b = (hi.ceil() as i64).clamp(0, ext);
    let want = floor.min(extent) as i64;
    let side = b - a;
    if side < want {
        let extra = want - side;
        a -= extra / 2;
        b += extra - extra / 2;
        if a < 0 {
            b -= a;
            a = 0;
        }
        if b > ext {
            a -= b - ext;
            b = ext;
        }
        a = a.max(0);
    }
    (a as u32, b as u32)
}

/// Intersection over union of two boxes in the same frame.
pub fn iou(a: &LesionBox, b: &LesionBox) -> Result<f64, GeometryError> {
    if !a.same_frame(b) {
        return Err(GeometryError::FrameMismatch {
            box_w: a.frame_w,
            box_h: a.frame_h,
            img_w: b.frame_w,
            img_h: b.frame_h,
        });
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}
