//! 8-bit PNG codec on top of the `png` crate.
//!
//! Reading accepts RGB and grayscale (any bit depth up to 8, and palettes);
//! grayscale is copied into three identical channels. 16-bit samples and
//! alpha channels are rejected. Chunk framing and CRCs are checked up front so
//! malformed files fail with the offending byte offset before any decoding.

use std::cell::Cell;
use std::io::Read;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::metrics::ImageU8;

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn malformed(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "png",
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Walks the chunk list up to `IEND`, checking lengths and CRCs.
fn check_chunks(bytes: &[u8]) -> Result<()> {
    if bytes.len() < 8 || bytes[..8] != SIGNATURE {
        return Err(malformed(0, "missing PNG signature"));
    }
    let mut at = 8;
    loop {
        if bytes.len() < at + 8 {
            return Err(malformed(bytes.len(), "file ends inside a chunk header"));
        }
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let kind = &bytes[at + 4..at + 8];
        let end = at + 8 + len + 4;
        if end > bytes.len() {
            return Err(malformed(bytes.len(), format!("chunk {} at {at} runs past the end of the file", String::from_utf8_lossy(kind))));
        }
        let stored = u32::from_be_bytes(bytes[end - 4..end].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[at + 4..end - 4]);
        if stored != computed {
            return Err(malformed(end - 4, format!("bad CRC on chunk {}", String::from_utf8_lossy(kind))));
        }
        if kind == b"IEND" {
            return Ok(());
        }
        at = end;
    }
}

/// Counts consumed bytes so decoder errors can name a position.
struct Tracked<'a> {
    data: &'a [u8],
    pos: &'a Cell<usize>,
}

impl Read for Tracked<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let start = self.pos.get();
        let n = buf.len().min(self.data.len() - start);
        buf[..n].copy_from_slice(&self.data[start..start + n]);
        self.pos.set(start + n);
        Ok(n)
    }
}

pub fn png_decode(bytes: &[u8]) -> Result<ImageU8> {
    check_chunks(bytes)?;
    let pos = Cell::new(0);
    let fail = |e: png::DecodingError| malformed(pos.get(), e.to_string());
    let mut decoder = png::Decoder::new(Tracked { data: bytes, pos: &pos });
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fail)?;
    let info = reader.info();
    if info.bit_depth == BitDepth::Sixteen {
        return Err(Error::Unsupported("16-bit PNG samples".into()));
    }
    let (color, depth) = reader.output_color_type();
    if depth != BitDepth::Eight {
        return Err(Error::Unsupported(format!("{depth:?} output depth")));
    }
    let channels = match color {
        ColorType::Rgb => 3,
        ColorType::Grayscale => 1,
        other => return Err(Error::Unsupported(format!("{other:?} PNG (alpha is not supported)"))),
    };
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(fail)?;
    let (h, w) = (frame.height as usize, frame.width as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let line = &buf[y * frame.line_size..y * frame.line_size + w * channels];
        if channels == 3 {
            data.extend_from_slice(line);
        } else {
            data.extend(line.iter().flat_map(|&v| [v, v, v]));
        }
    }
    ImageU8::new(h, w, data)
}

pub fn png_encode(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(ColorType::Rgb);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.write_image_data(&img.data).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

pub fn png_read(path: impl AsRef<Path>) -> Result<ImageU8> {
    png_decode(&std::fs::read(path)?)
}

pub fn png_write(path: impl AsRef<Path>, img: &ImageU8) -> Result<()> {
    Ok(std::fs::write(path, png_encode(img)?)?)
}
