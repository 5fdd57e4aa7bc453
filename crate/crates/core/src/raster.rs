//! In-memory rasters plus GeoTIFF and PNG I/O.
//!
//! GeoTIFFs carry the affine georeferencing in `ModelPixelScale` /
//! `ModelTiepoint` and the projection as a PROJ string in `GeoAsciiParams`
//! (user-defined projected CRS).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};
use crate::geogrid::GeoTransform;
use crate::projection::Projection;

const MODEL_PIXEL_SCALE: u16 = 33550;
const MODEL_TIEPOINT: u16 = 33922;
const GEO_KEY_DIRECTORY: u16 = 34735;
const GEO_ASCII_PARAMS: u16 = 34737;

const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const PROJECTED_CS_TYPE: u16 = 3072;
const PCS_CITATION: u16 = 3073;
const USER_DEFINED: u16 = 32767;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub width: u32,
    pub height: u32,
    pub transform: GeoTransform,
    /// Row-major interleaved RGB from the north edge.
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn filled(width: u32, height: u32, transform: GeoTransform, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width as usize * height as usize);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        RgbRaster {
            width,
            height,
            transform,
            data,
        }
    }

    fn offset(&self, col: u32, row: u32) -> usize {
        3 * (row as usize * self.width as usize + col as usize)
    }

    pub fn get(&self, col: u32, row: u32) -> [u8; 3] {
        let o = self.offset(col, row);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, col: u32, row: u32, rgb: [u8; 3]) {
        let o = self.offset(col, row);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn get_clamped(&self, col: i64, row: i64) -> [u8; 3] {
        let c = col.clamp(0, self.width as i64 - 1) as u32;
        let r = row.clamp(0, self.height as i64 - 1) as u32;
        self.get(c, r)
    }

    /// Bilinear sample at continuous pixel coordinates (centres at integers).
    pub fn bilinear(&self, col: f64, row: f64) -> [u8; 3] {
        let (c0, fx) = split_coord(col);
        let (r0, fy) = split_coord(row);
        if fx == 0.0 && fy == 0.0 {
            return self.get_clamped(c0, r0);
        }
        let p00 = self.get_clamped(c0, r0);
        let p10 = self.get_clamped(c0 + 1, r0);
        let p01 = self.get_clamped(c0, r0 + 1);
        let p11 = self.get_clamped(c0 + 1, r0 + 1);
        let mut out = [0u8; 3];
        for k in 0..3 {
            let top = p00[k] as f64 * (1.0 - fx) + p10[k] as f64 * fx;
            let bot = p01[k] as f64 * (1.0 - fx) + p11[k] as f64 * fx;
            out[k] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    pub fn write_geotiff(&self, path: &Path, projection: &Projection) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = TiffEncoder::new(BufWriter::new(file))?;
        let mut image = enc.new_image::<colortype::RGB8>(self.width, self.height)?;
        write_geo_tags(image.encoder(), &self.transform, projection)?;
        image.write_data(&self.data)?;
        Ok(())
    }

    pub fn read_geotiff(path: &Path) -> Result<(Self, Projection)> {
        let mut dec = open_tiff(path)?;
        let (width, height) = dec.dimensions()?;
        let (transform, projection) = read_geo_tags(&mut dec, path)?;
        let data = match dec.read_image()? {
            DecodingResult::U8(v) if v.len() == 3 * width as usize * height as usize => v,
            _ => {
                return Err(Error::Input(format!(
                    "{}: expected an 8-bit RGB raster",
                    path.display()
                )))
            }
        };
        Ok((
            RgbRaster {
                width,
                height,
                transform,
                data,
            },
            projection,
        ))
    }
}

/// Splits a continuous coordinate into a base index and fraction, snapping
/// fractions within 1e-6 of a lattice point so aligned grids copy exactly.
fn split_coord(v: f64) -> (i64, f64) {
    let base = v.floor();
    let mut f = v - base;
    let mut b = base as i64;
    if f < 1e-6 {
        f = 0.0;
    } else if f > 1.0 - 1e-6 {
        f = 0.0;
        b += 1;
    }
    (b, f)
}

/// Single-band float raster (nighttime-lights brightness).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: u32,
    pub height: u32,
    pub transform: GeoTransform,
    pub data: Vec<f32>,
}

impl FloatRaster {
    pub fn get(&self, col: u32, row: u32) -> f32 {
        self.data[row as usize * self.width as usize + col as usize]
    }

    /// Value of the cell containing a projected point, half-open.
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        let t = &self.transform;
        let c = ((x - t.origin_x) / t.pixel_width).floor();
        let r = ((t.origin_y - y) / t.pixel_height).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some(self.get(c as u32, r as u32))
    }

    pub fn write_geotiff(&self, path: &Path, projection: &Projection) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = TiffEncoder::new(BufWriter::new(file))?;
        let mut image = enc.new_image::<colortype::Gray32Float>(self.width, self.height)?;
        write_geo_tags(image.encoder(), &self.transform, projection)?;
        image.write_data(&self.data)?;
        Ok(())
    }

    pub fn read_geotiff(path: &Path) -> Result<(Self, Projection)> {
        let mut dec = open_tiff(path)?;
        let (width, height) = dec.dimensions()?;
        let (transform, projection) = read_geo_tags(&mut dec, path)?;
        let data = match dec.read_image()? {
            DecodingResult::F32(v) if v.len() == width as usize * height as usize => v,
            _ => {
                return Err(Error::Input(format!(
                    "{}: expected a single-band float32 raster",
                    path.display()
                )))
            }
        };
        Ok((
            FloatRaster {
                width,
                height,
                transform,
                data,
            },
            projection,
        ))
    }
}

fn open_tiff(path: &Path) -> Result<Decoder<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Decoder::new(BufReader::new(file))?)
}

fn write_geo_tags<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    t: &GeoTransform,
    projection: &Projection,
) -> Result<()> {
    let citation = format!("{projection}|");
    dir.write_tag(
        Tag::Unknown(MODEL_PIXEL_SCALE),
        &[t.pixel_width, t.pixel_height, 0.0][..],
    )?;
    dir.write_tag(
        Tag::Unknown(MODEL_TIEPOINT),
        &[0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0][..],
    )?;
    let keys: [u16; 20] = [
        1,
        1,
        0,
        4,
        GT_MODEL_TYPE,
        0,
        1,
        1,
        GT_RASTER_TYPE,
        0,
        1,
        1,
        PROJECTED_CS_TYPE,
        0,
        1,
        USER_DEFINED,
        PCS_CITATION,
        GEO_ASCII_PARAMS,
        citation.len() as u16,
        0,
    ];
    dir.write_tag(Tag::Unknown(GEO_KEY_DIRECTORY), &keys[..])?;
    dir.write_tag(Tag::Unknown(GEO_ASCII_PARAMS), citation.as_str())?;
    Ok(())
}

fn read_geo_tags<R: std::io::Read + std::io::Seek>(
    dec: &mut Decoder<R>,
    path: &Path,
) -> Result<(GeoTransform, Projection)> {
    let missing = |what: &str| Error::Input(format!("{}: missing GeoTIFF {what}", path.display()));
    let scale = dec
        .get_tag_f64_vec(Tag::Unknown(MODEL_PIXEL_SCALE))
        .map_err(|_| missing("ModelPixelScale"))?;
    let tie = dec
        .get_tag_f64_vec(Tag::Unknown(MODEL_TIEPOINT))
        .map_err(|_| missing("ModelTiepoint"))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(missing("georeferencing values"));
    }
    let citation = dec
        .get_tag_ascii_string(Tag::Unknown(GEO_ASCII_PARAMS))
        .map_err(|_| missing("projection citation"))?;
    let projection = Projection::from_proj_string(citation.trim_end_matches(['|', '\0']))
        .ok_or_else(|| {
            Error::Input(format!(
                "{}: unsupported projection `{citation}`",
                path.display()
            ))
        })?;
    let transform = GeoTransform {
        origin_x: tie[3] - tie[0] * scale[0],
        origin_y: tie[4] + tie[1] * scale[1],
        pixel_width: scale[0],
        pixel_height: scale[1],
    };
    Ok((transform, projection))
}

pub fn write_png_rgb(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()?;
    Ok(())
}

/// Reads an 8-bit RGB PNG, returning (width, height, pixels).
pub fn read_png_rgb(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Input(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Input(format!(
            "{}: expected 8-bit RGB PNG",
            path.display()
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}
