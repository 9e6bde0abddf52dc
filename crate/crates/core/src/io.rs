//! Readers and writers for the on-disk formats.
//!
//! | format | kind   | layout |
//! |--------|--------|--------|
//! | EVT1   | text   | header `EVT1 <width> <height> <t_begin> <t_end> <count>`, then one `<t> <x> <y> <p>` line per event |
//! | IMF1   | binary | `IMF1`, width and height as u32 LE, row-major f32 LE |
//! | PGM    | binary/text | `P5` or `P2`, values scaled by `1/maxval` on load |
//! | FLO1   | binary | `FLO1`, width and height as u32 LE, row-major interleaved `(u, v)` f32 LE |
//! | DEF1   | text   | header `DEF1 <w> <h> <k> <lambda> <sigma> <L>`, then `h` rows of centers, then `2k+1` planes of `h` rows of weights |
//!
//! Writers go through a temporary file in the destination directory that is
//! renamed into place once complete.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::def::DefParams;
use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::image::Image;
use crate::warp::FlowField;

const EVT_MAGIC: &str = "EVT1";
const IMF_MAGIC: &[u8; 4] = b"IMF1";
const FLO_MAGIC: &[u8; 4] = b"FLO1";
const DEF_MAGIC: &str = "DEF1";

/// Writes `bytes` to `path` through a temporary file renamed on success.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_events(stream: &EventStream) -> String {
    let mut out = String::with_capacity(32 * (stream.len() + 1));
    writeln!(
        out,
        "{EVT_MAGIC} {} {} {} {} {}",
        stream.width(),
        stream.height(),
        stream.t_begin(),
        stream.t_end(),
        stream.len()
    )
    .unwrap();
    for e in stream.events() {
        writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.sign()).unwrap();
    }
    out
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{tok}`")))
}

fn no_trailing<'a>(mut toks: impl Iterator<Item = &'a str>, line: usize) -> Result<()> {
    match toks.next() {
        Some(extra) => Err(Error::parse(line, format!("unexpected token `{extra}`"))),
        None => Ok(()),
    }
}

pub fn decode_events(text: &str) -> Result<EventStream> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected EVT1 header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(EVT_MAGIC) {
        return Err(Error::parse(1, "missing EVT1 magic"));
    }
    let width: usize = field(toks.next(), 1, "width")?;
    let height: usize = field(toks.next(), 1, "height")?;
    let t_begin: f64 = field(toks.next(), 1, "t_begin")?;
    let t_end: f64 = field(toks.next(), 1, "t_end")?;
    let count: usize = field(toks.next(), 1, "count")?;
    no_trailing(toks, 1)?;
    if !(t_begin.is_finite() && t_end.is_finite() && t_begin <= t_end) {
        return Err(Error::parse(1, format!("invalid exposure [{t_begin}, {t_end}]")));
    }

    let mut events: Vec<Event> = Vec::with_capacity(count);
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let t: f64 = field(toks.next(), n, "timestamp")?;
        let x: u32 = field(toks.next(), n, "x")?;
        let y: u32 = field(toks.next(), n, "y")?;
        let p: i64 = field(toks.next(), n, "polarity")?;
        no_trailing(toks, n)?;
        let p = Polarity::from_sign(p)
            .ok_or_else(|| Error::parse(n, format!("polarity must be -1 or 1, got {p}")))?;
        if x as usize >= width || y as usize >= height {
            return Err(Error::parse(
                n,
                format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if !(t >= t_begin && t <= t_end) {
            return Err(Error::parse(
                n,
                format!("timestamp {t} outside exposure [{t_begin}, {t_end}]"),
            ));
        }
        let e = Event::new(x, y, t, p);
        if let Some(prev) = events.last() {
            if e.t < prev.t {
                return Err(Error::parse(n, format!("unsorted timestamp {t} after {}", prev.t)));
            }
            if prev.canonical_cmp(&e).is_gt() {
                return Err(Error::parse(n, "equal timestamps not in (y, x, p) order"));
            }
        }
        events.push(e);
    }
    if events.len() != count {
        return Err(Error::Format(format!(
            "header announces {count} events, body has {}",
            events.len()
        )));
    }
    EventStream::new(width, height, t_begin, t_end, events)
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    write_atomic(path, encode_events(stream).as_bytes())
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    decode_events(&fs::read_to_string(path)?)
}

fn put_dims(out: &mut Vec<u8>, width: usize, height: usize) -> Result<()> {
    for d in [width, height] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Parses `magic`, width and height; returns them with the payload.
fn take_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "magic mismatch: expected {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((w, h, &bytes[12..]))
}

fn f32_payload(payload: &[u8], expected: usize) -> Result<Vec<f64>> {
    if payload.len() != expected * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            expected * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

pub fn encode_imf(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * img.len());
    out.extend_from_slice(IMF_MAGIC);
    put_dims(&mut out, img.width(), img.height())?;
    for &v in img.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_imf(bytes: &[u8]) -> Result<Image> {
    let (w, h, payload) = take_header(bytes, IMF_MAGIC)?;
    Image::new(w, h, f32_payload(payload, w * h)?)
}

/// Quantizes to 8-bit binary PGM, clamping to `[0, 1]`.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.as_slice()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Splits the PGM header into tokens, skipping `#` comments, and returns
/// the offset just past the single whitespace byte after `maxval`.
fn pgm_header(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    let mut pos = 2;
    let mut vals = [0usize; 3];
    for v in vals.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), Some(b'\n') | None) {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *v = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("invalid PGM header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("PGM header must end with whitespace".into()));
    }
    Ok((vals, pos + 1))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::Format("not a P5/P2 PGM file".into())),
    };
    let ([w, h, maxval], offset) = pgm_header(bytes)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("invalid PGM maxval {maxval}")));
    }
    let scale = 1.0 / maxval as f64;
    let body = &bytes[offset..];
    let raw: Vec<usize> = if binary {
        let width = if maxval > 255 { 2 } else { 1 };
        if body.len() < w * h * width {
            return Err(Error::Format("truncated PGM payload".into()));
        }
        if width == 1 {
            body[..w * h].iter().map(|&b| b as usize).collect()
        } else {
            body[..2 * w * h]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| Error::Format("non-ASCII P2 body".into()))?;
        let vals: Vec<usize> = text
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("invalid P2 sample `{t}`"))))
            .collect::<Result<_>>()?;
        if vals.len() < w * h {
            return Err(Error::Format("truncated PGM payload".into()));
        }
        vals
    };
    let data = raw[..w * h]
        .iter()
        .map(|&v| {
            if v > maxval {
                Err(Error::Format(format!("PGM sample {v} exceeds maxval {maxval}")))
            } else {
                Ok(v as f64 * scale)
            }
        })
        .collect::<Result<_>>()?;
    Image::new(w, h, data)
}

/// Decodes IMF1 or PGM depending on the leading magic.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P2") => decode_pgm(bytes),
        _ => decode_imf(bytes),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&fs::read(path)?)
}

/// Writes IMF1, or 8-bit PGM when the extension is `.pgm`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let bytes = if is_pgm { encode_pgm(img) } else { encode_imf(img)? };
    write_atomic(path, &bytes)
}

pub fn encode_flow(flow: &FlowField) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.len());
    out.extend_from_slice(FLO_MAGIC);
    put_dims(&mut out, flow.width(), flow.height())?;
    for (&u, &v) in flow.u.as_slice().iter().zip(flow.v.as_slice()) {
        out.extend_from_slice(&(u as f32).to_le_bytes());
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let (w, h, payload) = take_header(bytes, FLO_MAGIC)?;
    let vals = f32_payload(payload, 2 * w * h)?;
    let u = vals.iter().step_by(2).copied().collect();
    let v = vals.iter().skip(1).step_by(2).copied().collect();
    FlowField::new(Image::new(w, h, u)?, Image::new(w, h, v)?)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&fs::read(path)?)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_atomic(path, &encode_flow(flow)?)
}

fn write_rows(out: &mut String, values: &[f64], width: usize) {
    for row in values.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

pub fn encode_def(params: &DefParams) -> String {
    let (w, h) = params.center.shape();
    let mut out = format!(
        "{DEF_MAGIC} {w} {h} {} {} {} {}\n",
        params.k, params.stride, params.bandwidth, params.window
    );
    write_rows(&mut out, params.center.as_slice(), w);
    write_rows(&mut out, params.alpha(), w);
    out
}

pub fn decode_def(text: &str) -> Result<DefParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected DEF1 header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(DEF_MAGIC) {
        return Err(Error::parse(1, "missing DEF1 magic"));
    }
    let w: usize = field(toks.next(), 1, "width")?;
    let h: usize = field(toks.next(), 1, "height")?;
    let k: usize = field(toks.next(), 1, "k")?;
    let stride: f64 = field(toks.next(), 1, "lambda")?;
    let bandwidth: f64 = field(toks.next(), 1, "sigma")?;
    let window: usize = field(toks.next(), 1, "L")?;
    no_trailing(toks, 1)?;

    let plane = w * h;
    let total = plane * (2 * k + 2);
    let mut values = Vec::with_capacity(total);
    let mut last_line = 1;
    for (n, line) in lines {
        last_line = n;
        for tok in line.split_whitespace() {
            if values.len() == total {
                return Err(Error::parse(n, "more values than the header announces"));
            }
            values.push(field::<f64>(Some(tok), n, "value")?);
        }
    }
    if values.len() != total {
        return Err(Error::parse(
            last_line,
            format!("expected {total} values, found {}", values.len()),
        ));
    }
    let alpha = values.split_off(plane);
    let center = Image::new(w, h, values)?;
    DefParams::new(center, alpha, k, stride, bandwidth, window)
}

pub fn read_def(path: &Path) -> Result<DefParams> {
    decode_def(&fs::read_to_string(path)?)
}

pub fn write_def(path: &Path, params: &DefParams) -> Result<()> {
    write_atomic(path, encode_def(params).as_bytes())
}
