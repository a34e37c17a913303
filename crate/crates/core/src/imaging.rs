//! Raster primitives: rectangles, cropping, bilinear resizing, augmentation,
//! sliding-window enumeration and PNG input/output.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the classifier's input patch and of the sliding window.
pub const PATCH_SIZE: u32 = 224;
/// Default sliding-window stride.
pub const WINDOW_STRIDE: u32 = 200;

/// Half-open integer rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    /// Builds a rectangle, rejecting empty or inverted extents.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Validation(format!(
                "rectangle ({x0},{y0},{x1},{y1}) has no area"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.is_valid() && self.x1 <= width && self.y1 <= height
    }

    /// Intersection with positive area, if any.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(Rect { x0, y0, x1, y1 })
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Moves the rectangle by `(dx, dy)`.
    pub fn translate(&self, dx: u32, dy: u32) -> Rect {
        Rect {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// The four corners in pixel-boundary coordinates, counter-clockwise in
    /// the x-right/y-up convention used by the geometry module.
    pub fn corners(&self) -> [(i64, i64); 4] {
        let (x0, y0, x1, y1) = (
            i64::from(self.x0),
            i64::from(self.y0),
            i64::from(self.x1),
            i64::from(self.y1),
        );
        [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// 8-bit RGB pixel grid, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    id: String,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Raster")
            .field("id", &self.id)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn new(id: impl Into<String>, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!("{width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::InvalidDimensions(format!(
                "{width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Raster {
            id: id.into(),
            width,
            height,
            pixels,
        })
    }

    /// A raster filled with one colour.
    pub fn filled(id: impl Into<String>, width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Raster::new(id, width, height, pixels)
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        id: impl Into<String>,
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Raster::new(id, width, height, pixels)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Integer luma (BT.601 weights), 0..=255.
    pub fn luma(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .map(|p| ((299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2]) + 500) / 1000) as u8)
            .collect()
    }
}

/// Enumerates `win`x`win` windows in row-major `(y, x)` order.
///
/// Offsets along each axis are `0, stride, 2*stride, ...`; when the next step
/// would overrun the image the final offset is clamped to `extent - win`.
pub fn generate_windows(width: u32, height: u32, win: u32, stride: u32) -> Result<Vec<Rect>> {
    if win == 0 || stride == 0 {
        return Err(Error::Validation(format!(
            "window {win} and stride {stride} must be positive"
        )));
    }
    if width < win || height < win {
        return Err(Error::ImageTooSmall {
            width,
            height,
            window: win,
        });
    }
    let xs = axis_offsets(width, win, stride);
    let ys = axis_offsets(height, win, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(Rect {
                x0: x,
                y0: y,
                x1: x + win,
                y1: y + win,
            });
        }
    }
    Ok(out)
}

fn axis_offsets(extent: u32, win: u32, stride: u32) -> Vec<u32> {
    let last = extent - win;
    let mut offsets: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if *offsets.last().expect("offset 0 always present") != last {
        offsets.push(last);
    }
    offsets
}

/// Copies the pixels under `r` into a new raster.
pub fn crop(raster: &Raster, r: Rect) -> Result<Raster> {
    if !r.fits_within(raster.width, raster.height) {
        return Err(Error::OutOfBounds {
            rect: r,
            width: raster.width,
            height: raster.height,
        });
    }
    let row_bytes = r.width() as usize * 3;
    let mut pixels = Vec::with_capacity(row_bytes * r.height() as usize);
    for y in r.y0..r.y1 {
        let start = (y as usize * raster.width as usize + r.x0 as usize) * 3;
        pixels.extend_from_slice(&raster.pixels[start..start + row_bytes]);
    }
    Raster::new(raster.id.clone(), r.width(), r.height(), pixels)
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize(raster: &Raster, w: u32, h: u32) -> Result<Raster> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidDimensions(format!("resize target {w}x{h}")));
    }
    if w == raster.width && h == raster.height {
        return Ok(raster.clone());
    }
    let sx = raster.width as f32 / w as f32;
    let sy = raster.height as f32 / h as f32;
    let mut out = Vec::with_capacity(w as usize * h as usize * 3);
    for y in 0..h {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..w {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            out.extend_from_slice(&sample_bilinear(raster, fx, fy));
        }
    }
    Raster::new(raster.id.clone(), w, h, out)
}

/// Samples `raster` at the continuous pixel-centre coordinate `(fx, fy)`,
/// replicating edge pixels outside the grid.
pub fn sample_bilinear(raster: &Raster, fx: f32, fy: f32) -> [u8; 3] {
    let max_x = (raster.width - 1) as f32;
    let max_y = (raster.height - 1) as f32;
    let fx = fx.clamp(0.0, max_x);
    let fy = fy.clamp(0.0, max_y);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(raster.width - 1);
    let y1 = (y0 + 1).min(raster.height - 1);
    let tx = fx - x0 as f32;
    let ty = fy - y0 as f32;
    let (a, b, c, d) = (
        raster.get(x0, y0),
        raster.get(x1, y0),
        raster.get(x0, y1),
        raster.get(x1, y1),
    );
    let mut px = [0u8; 3];
    for ch in 0..3 {
        let top = f32::from(a[ch]) * (1.0 - tx) + f32::from(b[ch]) * tx;
        let bottom = f32::from(c[ch]) * (1.0 - tx) + f32::from(d[ch]) * tx;
        px[ch] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
    }
    px
}

/// One deterministic augmentation of a training patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentSpec {
    FlipH,
    FlipV,
    /// Magnify about the centre; factor in `[1.0, 1.3]`.
    Zoom { factor: f32 },
    /// Rescale content about the centre with edge-replicate padding; factor in `[0.8, 1.2]`.
    Scale { factor: f32 },
    /// Horizontal shear about the centre row; angle in degrees, `[-15, 15]`.
    Shear { degrees: f32 },
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentSpec::FlipH | AugmentSpec::FlipV => true,
            AugmentSpec::Zoom { factor } => (1.0..=1.3).contains(&factor),
            AugmentSpec::Scale { factor } => (0.8..=1.2).contains(&factor),
            AugmentSpec::Shear { degrees } => (-15.0..=15.0).contains(&degrees),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("augmentation {self} out of range")))
        }
    }

    /// Draws a random in-range augmentation.
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.gen_range(0..5) {
            0 => AugmentSpec::FlipH,
            1 => AugmentSpec::FlipV,
            2 => AugmentSpec::Zoom {
                factor: rng.gen_range(1.0..=1.3),
            },
            3 => AugmentSpec::Scale {
                factor: rng.gen_range(0.8..=1.2),
            },
            _ => AugmentSpec::Shear {
                degrees: rng.gen_range(-15.0..=15.0),
            },
        }
    }
}

impl fmt::Display for AugmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentSpec::FlipH => write!(f, "flip-h"),
            AugmentSpec::FlipV => write!(f, "flip-v"),
            AugmentSpec::Zoom { factor } => write!(f, "zoom({factor:.3})"),
            AugmentSpec::Scale { factor } => write!(f, "scale({factor:.3})"),
            AugmentSpec::Shear { degrees } => write!(f, "shear({degrees:.2})"),
        }
    }
}

/// Applies `spec` to a `PATCH_SIZE`-square patch.
pub fn augment(patch: &Raster, spec: AugmentSpec) -> Result<Raster> {
    if patch.width != PATCH_SIZE || patch.height != PATCH_SIZE {
        return Err(Error::InvalidDimensions(format!(
            "augment expects {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}",
            patch.width, patch.height
        )));
    }
    spec.validate()?;
    let n = PATCH_SIZE;
    let c = (n as f32 - 1.0) / 2.0;
    let out = match spec {
        AugmentSpec::FlipH => Raster::from_fn(patch.id.clone(), n, n, |x, y| patch.get(n - 1 - x, y))?,
        AugmentSpec::FlipV => Raster::from_fn(patch.id.clone(), n, n, |x, y| patch.get(x, n - 1 - y))?,
        AugmentSpec::Zoom { factor } | AugmentSpec::Scale { factor } => {
            Raster::from_fn(patch.id.clone(), n, n, |x, y| {
                let sx = c + (x as f32 - c) / factor;
                let sy = c + (y as f32 - c) / factor;
                sample_bilinear(patch, sx, sy)
            })?
        }
        AugmentSpec::Shear { degrees } => {
            let t = degrees.to_radians().tan();
            Raster::from_fn(patch.id.clone(), n, n, |x, y| {
                let sx = x as f32 - t * (y as f32 - c);
                sample_bilinear(patch, sx, y as f32)
            })?
        }
    };
    Ok(out)
}

/// Decodes PNG bytes to RGB, discarding any alpha channel.
pub fn decode_png(id: impl Into<String>, bytes: &[u8]) -> std::result::Result<Raster, image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::new(id, w, h, img.into_raw()).expect("decoder yields consistent buffers"))
}

pub fn load_png(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_png(id, &bytes).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_png(raster: &Raster) -> Vec<u8> {
    encode(raster.pixels(), raster.width, raster.height, image::ExtendedColorType::Rgb8)
}

/// Encodes a single-channel 0/255 mask.
pub fn encode_mask_png(bits: &[bool], width: u32, height: u32) -> Vec<u8> {
    let bytes: Vec<u8> = bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(&bytes, width, height, image::ExtendedColorType::L8)
}

/// Decodes a mask PNG; any non-zero luma counts as set.
pub fn decode_mask_png(bytes: &[u8]) -> std::result::Result<(u32, u32, Vec<bool>), image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw().into_iter().map(|v| v > 0).collect()))
}

fn encode(bytes: &[u8], width: u32, height: u32, color: image::ExtendedColorType) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(bytes, width, height, color)
        .expect("in-memory PNG encoding of a valid buffer cannot fail");
    out.into_inner()
}
