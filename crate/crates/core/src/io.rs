//! File formats: PFM depth, 8-bit PNG color, pose text files, frame
//! manifests and binary PLY point clouds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

/// Writes a single-channel little-endian PFM (`Pf`, scale −1.0), rows bottom to top.
/// `data` is row-major top to bottom.
pub fn write_pfm<W: Write>(mut w: W, data: &[f32], width: usize, height: usize) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::InvalidInput(format!("PFM payload of {} values for {width}x{height}", data.len())));
    }
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for row in data.chunks_exact(width.max(1)).rev() {
        for x in row {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::ingest(path, "truncated PFM header"));
        }
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            return Ok(t.to_string());
        }
    }
}

/// Reads a single-channel PFM; returns `(data top to bottom, width, height)`.
pub fn read_pfm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = header_token(&mut r, path)?;
    if magic != "Pf" {
        return Err(Error::ingest(path, format!("expected single-channel PFM magic 'Pf', found {magic:?}")));
    }
    let dims = header_token(&mut r, path)?;
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [width, height] = parsed[..] else {
        return Err(Error::ingest(path, format!("malformed PFM dimensions {dims:?}")));
    };
    let scale: f64 = header_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::ingest(path, "malformed PFM scale"))?;
    if scale == 0.0 {
        return Err(Error::ingest(path, "PFM scale must be nonzero"));
    }
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw).map_err(|_| Error::ingest(path, "PFM payload shorter than its header says"))?;
    let decode = |c: &[u8]| {
        let b: [u8; 4] = c.try_into().unwrap();
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let bottom_up: Vec<f32> = raw.chunks_exact(4).map(decode).collect();
    let mut data = Vec::with_capacity(bottom_up.len());
    for row in bottom_up.chunks_exact(width.max(1)).rev() {
        data.extend_from_slice(row);
    }
    Ok((data, width, height))
}

/// Writes `[3, H, W]` planar RGB in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    let n = width * height;
    if rgb.len() != 3 * n {
        return Err(Error::InvalidInput(format!("RGB payload of {} values for {width}x{height}", rgb.len())));
    }
    let mut buf = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = image::Rgb(std::array::from_fn(|c| (rgb[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    buf.save(path)?;
    Ok(())
}

/// Reads an 8-bit PNG as planar `[3, H, W]` RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    if !path.exists() {
        return Err(Error::ingest(path, "file not found"));
    }
    let img = image::open(path).map_err(|e| Error::ingest(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut out = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok((out, w, h))
}

/// One pose per line: 12 whitespace-separated floats, row-major `[R | t]`.
pub fn write_poses<W: Write>(mut w: W, poses: &[PoseSE3]) -> Result<()> {
    for p in poses {
        let line: Vec<String> = p.to_row_major().iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::ingest(path, e.to_string()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::ingest(path, format!("line {}: {e}", i + 1)))?;
        let arr: [f64; 12] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::ingest(path, format!("line {}: expected 12 values, found {}", i + 1, v.len())))?;
        out.push(PoseSE3::from_row_major(&arr).map_err(|e| Error::ingest(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// One manifest line: `rgb [depth|-] [pose_index]`, paths relative to the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: Option<PathBuf>,
    pub pose: Option<usize>,
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() > 3 {
            return Err(Error::ingest(origin, format!("line {}: expected at most 3 fields", i + 1)));
        }
        let depth = f.get(1).filter(|&&d| d != "-").map(PathBuf::from);
        let pose = match f.get(2) {
            Some(p) => Some(p.parse().map_err(|_| Error::ingest(origin, format!("line {}: bad pose index {p:?}", i + 1)))?),
            None => None,
        };
        out.push(ManifestEntry { rgb: PathBuf::from(f[0]), depth, pose });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.rgb.to_string_lossy());
        s.push(' ');
        s.push_str(&e.depth.as_ref().map(|d| d.to_string_lossy().into_owned()).unwrap_or_else(|| "-".into()));
        if let Some(p) = e.pose {
            s.push_str(&format!(" {p}"));
        }
        s.push('\n');
    }
    s
}

/// Colored point for PLY output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyPoint {
    pub xyz: [f32; 3],
    pub rgb: [u8; 3],
}

/// Binary little-endian PLY with `float x y z` and `uchar red green blue`.
pub fn write_ply<W: Write>(w: W, points: &[PlyPoint]) -> Result<()> {
    let mut w = BufWriter::new(w);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )?;
    for p in points {
        for c in p.xyz {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&p.rgb)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`write_ply`].
pub fn read_ply(bytes: &[u8]) -> Result<Vec<PlyPoint>> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::InvalidInput("PLY header not terminated".into()))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::InvalidInput("PLY header is not text".into()))?;
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::InvalidInput("PLY vertex count missing".into()))?;
    let body = &bytes[end..];
    if body.len() != count * 15 {
        return Err(Error::InvalidInput(format!("PLY body has {} bytes for {count} vertices", body.len())));
    }
    Ok(body
        .chunks_exact(15)
        .map(|c| PlyPoint {
            xyz: std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())),
            rgb: [c[12], c[13], c[14]],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_y;

    #[test]
    fn pfm_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let data = vec![1.5f32, -0.0, f32::INFINITY, 3.25e-7, 7.0, 8.125];
        write_pfm(File::create(&p).unwrap(), &data, 3, 2).unwrap();
        let (back, w, h) = read_pfm(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        // Bottom row first on disk.
        let bytes = std::fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 24..];
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 3.25e-7);
    }

    #[test]
    fn pfm_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        std::fs::write(&p, b"PF\n2 2\n-1.0\n").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Ingestion { .. })));
        std::fs::write(&p, b"Pf\n2\n-1.0\n").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Ingestion { .. })));
        std::fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let rgb: Vec<f64> = (0..3 * 4 * 8).map(|i| (i % 256) as f64 / 255.0).collect();
        write_png(&p, &rgb, 8, 4).unwrap();
        let (back, w, h) = read_png(&p).unwrap();
        assert_eq!((w, h), (8, 4));
        assert_eq!(back, rgb);
    }

    #[test]
    fn poses_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.txt");
        let poses = vec![PoseSE3::identity(), PoseSE3 { r: rot_y(0.3), t: [0.1, -0.2, 0.05] }];
        write_poses(File::create(&p).unwrap(), &poses).unwrap();
        assert_eq!(read_poses(&p).unwrap(), poses);
        std::fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        assert!(matches!(read_poses(&p), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn manifest_fields() {
        let m = parse_manifest("# frames\na.png d.pfm 0\nb.png - 1\nc.png\n\n", Path::new("m")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].depth, Some(PathBuf::from("d.pfm")));
        assert_eq!((m[1].depth.clone(), m[1].pose), (None, Some(1)));
        assert_eq!(parse_manifest(&format_manifest(&m), Path::new("m")).unwrap(), m);
        assert!(parse_manifest("", Path::new("m")).unwrap().is_empty());
        assert!(parse_manifest("a b c d", Path::new("m")).is_err());
    }

    #[test]
    fn ply_roundtrip() {
        let pts = vec![PlyPoint { xyz: [0.0, 0.0, 2.0], rgb: [255, 0, 7] }, PlyPoint { xyz: [1.0, -1.0, 0.5], rgb: [1, 2, 3] }];
        let mut buf = Vec::new();
        write_ply(&mut buf, &pts).unwrap();
        assert!(buf.starts_with(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"));
        assert_eq!(read_ply(&buf).unwrap(), pts);
    }
}
