//! Grayscale frames and their on-disk formats.
//!
//! Binary PGM (`P5`, maxval ≤ 255) is parsed by hand so that pixel values
//! round-trip bit-exactly; 8-bit PNG goes through the `image` crate and is
//! converted to luma if it carries color.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Smallest accepted frame side, in pixels.
pub const MIN_FRAME_SIDE: usize = 16;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(Error::Input(format!(
                "frame {width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::dim(width * height, data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("frame intensities must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a frame from `f(row, col)`, clamping values into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixel lookup with border replication.
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    /// Quantizes back to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

/// Reads a binary PGM (`P5`) file.
pub fn read_pgm(path: &Path) -> Result<GrayFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, raster) = parse_pgm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })?;
    let scale = f64::from(maxval);
    GrayFrame::new(
        width,
        height,
        raster.iter().map(|&b| (f64::from(b) / scale).min(1.0)).collect(),
    )
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, u8, &[u8]), String> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    pos += 2;
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let n = width * height;
    let raster = bytes.get(pos..pos + n).ok_or("truncated raster")?;
    Ok((width, height, maxval as u8, raster))
}

/// Writes a binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, frame: &GrayFrame) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(&frame.to_u8());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PNG, converting to luma when needed.
pub fn read_png(path: &Path) -> Result<GrayFrame> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    GrayFrame::from_u8(w as usize, h as usize, img.as_raw())
}

/// Loads a `.pgm` or `.png` frame, dispatching on the extension.
pub fn load_frame(path: &Path) -> Result<GrayFrame> {
    match extension(path).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            reason: "expected a .pgm or .png file".into(),
        }),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

/// Lists image files in `dir` (`*.pgm`, `*.png`) sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && matches!(extension(&path).as_deref(), Some("pgm" | "png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Lists a numbered frame sequence: every image in `dir` must have a
/// numeric stem, and the numbers must be consecutive.
///
/// Returns `(frame_number, path)` pairs in ascending order.
pub fn list_frame_sequence(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut frames = Vec::new();
    for path in list_images(dir)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let number: u64 = stem.parse().map_err(|_| {
            Error::Input(format!(
                "frame file {} does not have a numeric name",
                path.display()
            ))
        })?;
        frames.push((number, path));
    }
    if frames.is_empty() {
        return Err(Error::Input(format!("no .pgm/.png frames in {}", dir.display())));
    }
    frames.sort_by_key(|(n, _)| *n);
    for pair in frames.windows(2) {
        if pair[1].0 == pair[0].0 {
            return Err(Error::Input(format!("duplicate frame number {}", pair[0].0)));
        }
        if pair[1].0 != pair[0].0 + 1 {
            return Err(Error::Input(format!(
                "missing frame {} (sequence jumps from {} to {})",
                pair[0].0 + 1,
                pair[0].0,
                pair[1].0
            )));
        }
    }
    Ok(frames)
}
