//! Binary PPM (P6) / PGM (P5) decoding and encoding, bilinear resizing and
//! the `root/<class>/*.ppm` folder loader.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a binary PPM or PGM into `[3, H, W]` values in `[0, 1]`;
/// grayscale is replicated across channels.
pub fn read_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("bad PNM header".into()))?);
    }
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Format(format!("unsupported PNM magic {other:?}; only P5 and P6 are read"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad PNM {what} {s:?}")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PNM dimensions {w}x{h} / maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = w * h * channels * depth;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Format(format!("PNM raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos)))
    })?;
    let scale = 1.0 / maxval as f32;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let sc = if channels == 1 { 0 } else { c };
            let at = (i * channels + sc) * depth;
            let raw = if depth == 1 { raster[at] as u32 } else { u32::from(raster[at]) << 8 | u32::from(raster[at + 1]) };
            data[c * plane + i] = (raw as f32 * scale).min(1.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encodes `[3, H, W]` values (clamped to `[0, 1]`) as an 8-bit binary PPM.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("PPM export needs [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of `[C, H, W]` with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize {s:?} to {out_h}x{out_w}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let src = image.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], data)
}

/// Writes `root/<class>/<index>.ppm` for every sample (8-bit, so pixel values
/// are quantised).
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let mut counters = vec![0usize; ds.num_classes()];
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in &ds.samples {
        let path = root.join(&ds.class_names[s.label]).join(format!("{:04}.ppm", counters[s.label]));
        counters[s.label] += 1;
        write_ppm(&path, &s.image)?;
    }
    Ok(())
}

/// A loaded dataset plus the files that could not be decoded.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: Dataset,
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_name().to_string_lossy().starts_with('.') {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/*` with classes in sorted directory order and images
/// resized to `size × size`. Undecodable files are skipped and reported.
pub fn load_image_folder(root: &Path, size: usize) -> Result<FolderLoad> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }
    let mut files = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let entries: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if entries.is_empty() {
            return Err(Error::Data(format!("class {name:?} has no images")));
        }
        files.extend(entries.into_iter().map(|p| (p, label)));
        class_names.push(name);
    }
    let decoded: Vec<_> = files
        .par_iter()
        .map(|(path, label)| {
            let image = fs::read(path)
                .map_err(|e| e.to_string())
                .and_then(|b| read_pnm(&b).map_err(|e| e.to_string()))
                .and_then(|img| resize_bilinear(&img, size, size).map_err(|e| e.to_string()));
            (path.clone(), *label, image)
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut per_class = vec![0usize; class_names.len()];
    for (path, label, image) in decoded {
        match image {
            Ok(image) => {
                per_class[label] += 1;
                samples.push(Sample { image, label, source: path.display().to_string(), lesions: vec![] });
            }
            Err(msg) => {
                log::warn!("skipping {}: {msg}", path.display());
                skipped.push((path, msg));
            }
        }
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {:?} has no readable images", class_names[c])));
    }
    Ok(FolderLoad { dataset: Dataset::new(samples, class_names)?, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| (i as f32) / 17.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = read_pnm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn pgm_with_comments_and_16_bit() {
        let mut bytes = b"P5\n# a comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        let img = read_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bad_inputs() {
        assert!(read_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(read_pnm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(read_pnm(b"P6\n2").is_err());
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = Tensor::full(&[3, 5, 7], 0.25f32);
        let r = resize_bilinear(&img, 9, 4).unwrap();
        assert_eq!(r.shape(), &[3, 9, 4]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let g = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        assert_eq!(resize_bilinear(&g, 4, 4).unwrap(), g);
        // 2x downsample of a horizontal ramp averages neighbouring pairs
        let d = resize_bilinear(&g, 2, 2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
