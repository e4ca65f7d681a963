//! RGB rasters, binary PPM I/O and patch extraction.

use std::io::Write;
use std::path::Path;

use linesight_autodiff::Tensor;

use crate::error::{Error, Result};

/// 8-bit RGB image stored row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Geometry(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(ImageRaster { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Parses a binary `P6` PPM with maxval 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header fields
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    b if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::ImageFormat("truncated PPM header".into()));
            }
            fields.push(&bytes[start..pos]);
        }
        if fields[0] != b"P6" {
            return Err(Error::ImageFormat(format!(
                "expected magic P6, found {:?}",
                String::from_utf8_lossy(fields[0])
            )));
        }
        let num = |f: &[u8], what: &str| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::ImageFormat(format!("bad {what} in PPM header")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if maxval != 255 {
            return Err(Error::ImageFormat(format!("maxval {maxval} unsupported, need 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::ImageFormat(format!("raster truncated: need {need} bytes")))?;
        if bytes.len() != pos + need {
            return Err(Error::ImageFormat("trailing bytes after raster".into()));
        }
        Self::new(width, height, raster.to_vec())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Splits the image into non-overlapping `patch × patch` tiles in row-major
/// tile order. Each row of the result holds one tile's pixels (row-major,
/// RGB interleaved) scaled to `[0, 1]`.
pub fn patchify(image: &ImageRaster, patch: usize) -> Result<Tensor> {
    if patch == 0 || !image.width.is_multiple_of(patch) || !image.height.is_multiple_of(patch) {
        return Err(Error::Geometry(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            image.width, image.height
        )));
    }
    let (cols, rows) = (image.width / patch, image.height / patch);
    let per_patch = patch * patch * 3;
    let mut data = Vec::with_capacity(rows * cols * per_patch);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * patch..(pr + 1) * patch {
                let start = (y * image.width + pc * patch) * 3;
                data.extend(image.pixels[start..start + patch * 3].iter().map(|&b| b as f64 / 255.0));
            }
        }
    }
    Ok(Tensor::new(&[rows * cols, per_patch], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting(w: usize, h: usize) -> ImageRaster {
        ImageRaster::new(w, h, (0..w * h * 3).map(|i| i as u8).collect()).unwrap()
    }

    #[test]
    fn single_patch_holds_everything() {
        let t = patchify(&counting(2, 2), 2).unwrap();
        assert_eq!(t.dims(), &[1, 12]);
        assert_eq!(t.data()[11], 11.0 / 255.0);
    }

    #[test]
    fn four_by_four_patch_order() {
        let img = counting(4, 4);
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.dims(), &[4, 12]);
        // Oracle: patch p at tile (p / 2, p % 2) contains pixel (x, y) for
        // x in 2*(p%2)..+2, y in 2*(p/2)..+2, byte index (y*4 + x)*3 + c.
        for p in 0..4 {
            let mut expected = Vec::new();
            for y in 2 * (p / 2)..2 * (p / 2) + 2 {
                for x in 2 * (p % 2)..2 * (p % 2) + 2 {
                    for c in 0..3 {
                        expected.push(((y * 4 + x) * 3 + c) as f64 / 255.0);
                    }
                }
            }
            assert_eq!(t.row(p), expected.as_slice(), "patch {p}");
        }
        // top-left block: pixels (0,0),(1,0),(0,1),(1,1)
        assert_eq!(t.row(0)[..3], [0.0, 1.0 / 255.0, 2.0 / 255.0]);
        assert_eq!(t.row(0)[6] * 255.0, 12.0);
    }

    #[test]
    fn zero_image_gives_zero_patches() {
        let t = patchify(&ImageRaster::filled(4, 4, [0, 0, 0]).unwrap(), 2).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let err = patchify(&counting(6, 4), 4).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let img = counting(3, 2);
        let bytes = img.to_ppm();
        assert_eq!(&bytes[..11], b"P6\n3 2\n255\n");
        assert_eq!(ImageRaster::from_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6 # comment\n2 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = ImageRaster::from_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn ppm_rejects_bad_inputs() {
        assert!(ImageRaster::from_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(ImageRaster::from_ppm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
        assert!(ImageRaster::from_ppm(b"P6\n2 2\n255\n\x00\x00\x00").is_err());
    }
}
