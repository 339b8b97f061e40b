//! Image corpora: decoding, the packed record format and the procedural toy set.

use std::f32::consts::TAU;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::resize_bilinear;
use crate::contrastive::{stratified_split, stream_rng};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded images `[N, C, H, W]` in [0, 1] with optional class labels.
#[derive(Debug, Clone)]
pub struct ImageCorpus {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    /// One stable identifier per item (relative path or record index).
    pub ids: Vec<String>,
}

/// Disjoint train/test item ids plus their positions in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(skip)]
    pub train_index: Vec<usize>,
    #[serde(skip)]
    pub test_index: Vec<usize>,
}

impl ImageCorpus {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, ids: Vec<String>) -> Result<Self> {
        let n = match images.shape() {
            &[n, _, _, _] => n,
            s => return Err(Error::shape("ImageCorpus", s, &[0, 0, 0, 0])),
        };
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        if ids.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::invalid(format!("{n} images with {} ids and mismatched labels", ids.len())));
        }
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn n_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1)
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid("this corpus has no class labels"))
    }

    /// Stratified seeded split of a labelled corpus.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<SplitManifest> {
        let (train_index, test_index) = stratified_split(self.require_labels()?, train_fraction, seed)?;
        let ids = |idx: &[usize]| idx.iter().map(|&i| self.ids[i].clone()).collect();
        Ok(SplitManifest {
            train: ids(&train_index),
            test: ids(&test_index),
            train_index,
            test_index,
        })
    }

    pub fn subset(&self, index: &[usize]) -> Result<Self> {
        Self::new(
            self.images.index_select(index)?,
            self.labels.as_ref().map(|l| index.iter().map(|&i| l[i]).collect()),
            index.iter().map(|&i| self.ids[i].clone()).collect(),
        )
    }

    /// Bilinear resize of every image to `size x size`.
    pub fn resized(&self, size: usize) -> Result<Self> {
        let (c, h, w) = self.image_shape();
        if (h, w) == (size, size) {
            return Ok(self.clone());
        }
        let data = self
            .images
            .data()
            .chunks(c * h * w)
            .flat_map(|img| resize_bilinear(img, c, h, w, size, size))
            .collect();
        Self::new(
            Tensor::new(&[self.len(), c, size, size], data)?,
            self.labels.clone(),
            self.ids.clone(),
        )
    }
}

struct Decoded {
    channels: usize,
    height: usize,
    width: usize,
    bytes: Vec<u8>,
}

/// Planar RGB bytes from any 8- or 16-bit PNG.
fn decode_png(data: &[u8], path: &Path) -> Result<Decoded> {
    let fail = |e: png::DecodingError| Error::format(path, format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(data));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "PNG: image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "PNG: unexpanded palette")),
    };
    let mut bytes = vec![0u8; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * src_channels..];
            for ch in 0..3 {
                bytes[ch * h * w + y * w + x] = if src_channels < 3 { px[0] } else { px[ch] };
            }
        }
    }
    Ok(Decoded {
        channels: 3,
        height: h,
        width: w,
        bytes,
    })
}

/// Binary PPM (`P6`) with 8- or 16-bit samples.
fn decode_ppm(data: &[u8], path: &Path) -> Result<Decoded> {
    let fail = |msg: &str| Error::format(path, format!("PPM: {msg}"));
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P6") {
        return Err(fail("missing P6 magic"));
    }
    let mut num = || token().and_then(|t| t.parse::<usize>().ok());
    let (w, h, maxval) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) if w > 0 && h > 0 && (1..=65535).contains(&m) => (w, h, m),
        _ => return Err(fail("malformed header")),
    };
    let body = data.get(pos + 1..).ok_or_else(|| fail("missing pixel data"))?;
    let wide = maxval > 255;
    let needed = 3 * w * h * if wide { 2 } else { 1 };
    if body.len() < needed {
        return Err(fail(&format!("expected {needed} pixel bytes, found {}", body.len())));
    }
    let mut bytes = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            let k = 3 * i + ch;
            let v = if wide {
                u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as usize
            } else {
                body[k] as usize
            };
            bytes[ch * h * w + i] = ((v * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(Decoded {
        channels: 3,
        height: h,
        width: w,
        bytes,
    })
}

fn decode_file(path: &Path) -> Result<Decoded> {
    let data = fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => decode_png(&data, path),
        Some("ppm") => decode_ppm(&data, path),
        _ => Err(Error::format(path, "unsupported image extension")),
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads a packed record file or a directory of PNG/PPM images.
///
/// A directory either holds images directly (unlabelled) or one
/// subdirectory per class, labelled by sorted subdirectory name. Images are
/// resized to `resolution x resolution` when given; otherwise all must share
/// the first image's size.
pub fn ingest(path: &Path, resolution: Option<usize>) -> Result<ImageCorpus> {
    if !path.exists() {
        return Err(Error::format(path, "no such file or directory"));
    }
    let corpus = if path.is_dir() {
        ingest_dir(path, resolution)?
    } else {
        read_packed(path)?
    };
    match resolution {
        Some(r) => corpus.resized(r),
        None => Ok(corpus),
    }
}

fn ingest_dir(dir: &Path, resolution: Option<usize>) -> Result<ImageCorpus> {
    let entries = sorted_entries(dir)?;
    let classes: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let loose: Vec<&PathBuf> = entries.iter().filter(|p| p.is_file() && is_image(p)).collect();
    let mut items: Vec<(String, PathBuf, Option<usize>)> = Vec::new();
    if classes.is_empty() {
        items.extend(loose.iter().map(|p| (name_of(p), p.to_path_buf(), None)));
    } else {
        if !loose.is_empty() {
            return Err(Error::format(dir, "mixes loose images with class subdirectories"));
        }
        for (label, class_dir) in classes.iter().enumerate() {
            for p in sorted_entries(class_dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                items.push((format!("{}/{}", name_of(class_dir), name_of(&p)), p, Some(label)));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut data = Vec::new();
    let mut shape = None;
    for (_, p, _) in &items {
        let d = decode_file(p)?;
        let pixels: Vec<f32> = d.bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        let (c, h, w, pixels) = match resolution {
            Some(r) => (d.channels, r, r, resize_bilinear(&pixels, d.channels, d.height, d.width, r, r)),
            None => (d.channels, d.height, d.width, pixels),
        };
        match shape {
            None => shape = Some((c, h, w)),
            Some(s) if s != (c, h, w) => {
                return Err(Error::format(p, format!("size {h}x{w} differs from the first image {}x{}", s.1, s.2)))
            }
            _ => {}
        }
        data.extend(pixels);
    }
    let (c, h, w) = shape.expect("at least one item");
    let labels = items.iter().map(|(_, _, l)| *l).collect::<Option<Vec<usize>>>();
    ImageCorpus::new(
        Tensor::new(&[items.len(), c, h, w], data)?,
        labels,
        items.into_iter().map(|(id, _, _)| id).collect(),
    )
}

const PACKED_HEADER: usize = 16;

/// Reads `[u32 count][u32 H][u32 W][u32 C]` (little-endian) followed by
/// `count` records of interleaved `H*W*C` bytes, each optionally followed by a label byte.
pub fn read_packed(path: &Path) -> Result<ImageCorpus> {
    let data = fs::read(path)?;
    let fail = |msg: String| Error::format(path, msg);
    if data.len() < PACKED_HEADER {
        return Err(fail("packed file shorter than its header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(data[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (count, h, w, c) = (field(0), field(1), field(2), field(3));
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(fail(format!("degenerate image size {h}x{w}x{c}")));
    }
    let pixels = h * w * c;
    let body = data.len() - PACKED_HEADER;
    let labelled = if body == count * pixels {
        false
    } else if body == count * (pixels + 1) {
        true
    } else {
        return Err(fail(format!(
            "{body} payload bytes fit neither {count} records of {pixels} bytes nor labelled records"
        )));
    };
    let stride = pixels + usize::from(labelled);
    let mut images = vec![0.0f32; count * pixels];
    let mut labels = Vec::with_capacity(if labelled { count } else { 0 });
    for (r, rec) in data[PACKED_HEADER..].chunks_exact(stride).enumerate() {
        let out = &mut images[r * pixels..(r + 1) * pixels];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = f32::from(rec[(y * w + x) * c + ch]) / 255.0;
                }
            }
        }
        if labelled {
            labels.push(usize::from(rec[pixels]));
        }
    }
    ImageCorpus::new(
        Tensor::new(&[count, c, h, w], images)?,
        labelled.then_some(labels),
        (0..count).map(|i| format!("{i:06}")).collect(),
    )
}

/// Writes the packed format; pixels are rounded to the nearest byte.
pub fn write_packed(corpus: &ImageCorpus, path: &Path) -> Result<()> {
    let (c, h, w) = corpus.image_shape();
    if corpus.labels.as_ref().is_some_and(|l| l.iter().any(|&v| v > 255)) {
        return Err(Error::invalid("packed labels must fit in one byte"));
    }
    let pixels = c * h * w;
    let mut out = Vec::with_capacity(PACKED_HEADER + corpus.len() * (pixels + 1));
    for v in [corpus.len(), h, w, c] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::invalid("corpus too large"))?.to_le_bytes());
    }
    for (i, img) in corpus.images.data().chunks(pixels).enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push((img[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        if let Some(l) = &corpus.labels {
            out.push(l[i] as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Three classes of procedural textures, `n_per_class` each, interleaved by class.
///
/// Each class has its own base hue, stripe frequency and blob count. Every
/// image gets a near-vertical stripe orientation with random tilt and phase,
/// random blob positions, top-down shading and photometric jitter in hue,
/// saturation, brightness and contrast.
pub fn make_toy_corpus(seed: u64, n_per_class: usize, resolution: usize) -> Result<ImageCorpus> {
    const HUES: [f32; 3] = [0.02, 0.36, 0.64];
    const FREQS: [f32; 3] = [1.5, 3.0, 5.0];
    const BLOBS: [usize; 3] = [1, 3, 6];
    if n_per_class == 0 || resolution == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = stream_rng(seed, 0);
    let s = resolution;
    let n = 3 * n_per_class;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 3;
        let hue = HUES[class] + rng.random_range(-0.2..0.2f32);
        let sat = rng.random_range(0.35..0.9f32);
        let bright = rng.random_range(0.65..1.0f32);
        let contrast = rng.random_range(0.5..1.0f32);
        let theta = rng.random_range(-0.3..0.3f32);
        let phase = rng.random_range(0.0..TAU);
        let freq = FREQS[class] * rng.random_range(0.85..1.15f32);
        let blobs: Vec<(f32, f32, f32)> = (0..BLOBS[class])
            .map(|_| {
                (
                    rng.random_range(0.0..1.0f32),
                    rng.random_range(0.0..1.0f32),
                    rng.random_range(0.08..0.16f32),
                )
            })
            .collect();
        let mut img = vec![0.0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let (u, v) = ((x as f32 + 0.5) / s as f32, (y as f32 + 0.5) / s as f32);
                let stripe = 0.5 + 0.5 * (TAU * freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
                let blob = blobs
                    .iter()
                    .map(|&(bx, by, r)| (-((u - bx).powi(2) + (v - by).powi(2)) / (r * r)).exp())
                    .fold(0.0f32, f32::max);
                let value = 0.5 + contrast * (0.55 * stripe + 0.45 * blob - 0.5);
                let shade = 1.3 - 0.6 * v;
                let rgb = hsv_to_rgb(hue + 0.08 * blob, sat, (bright * shade * value).clamp(0.0, 1.0));
                for ch in 0..3 {
                    img[ch * s * s + y * s + x] = rgb[ch].clamp(0.0, 1.0);
                }
            }
        }
        data.extend(img);
        labels.push(class);
    }
    ImageCorpus::new(
        Tensor::new(&[n, 3, s, s], data)?,
        Some(labels),
        (0..n).map(|i| format!("toy-{i:06}")).collect(),
    )
}
