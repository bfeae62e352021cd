//! Map archive: one `LEAM` file per map (16-byte header + f32 payload), a CSV
//! index tying records to (pair, model, layer), and heatmap rendering.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;
use crate::{fmt_sig, Error, Result};

const MAGIC: &[u8; 4] = b"LEAM";

/// Header flag: payload values are max-normalized into `[0, 1]`.
pub const FLAG_NORMALIZED: u32 = 1;

/// Write a rank-2 map as `LEAM` + u32 height + u32 width + u32 flags, then
/// row-major little-endian f32 values.
pub fn write_map(path: &Path, map: &Tensor, flags: u32) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "map archive wants rank 2, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<(Tensor, u32)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad map file header".into()));
    }
    let h = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let w = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let flags = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]);
    let expected = 16 + 4 * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "map payload is {} bytes, header wants {expected}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Tensor::new(vec![h, w], data)?, flags))
}

/// One archive row: which map file belongs to which (pair, model, layer),
/// plus the pair's similarity numbers and run provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub pair_id: String,
    pub model: String,
    pub layer: String,
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub cosine: f64,
    pub loss: f64,
    pub seed: u64,
}

pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: &str = "pair_id,model,layer,path,height,width,cosine,loss,seed,version";

pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Serialize index rows (already sorted by the caller) into the archive dir.
pub fn write_index(dir: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut out = String::from(INDEX_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            e.pair_id,
            e.model,
            e.layer,
            e.path.display(),
            e.height,
            e.width,
            fmt_sig(e.cosine),
            fmt_sig(e.loss),
            e.seed,
            version(),
        ));
    }
    std::fs::write(dir.join(INDEX_FILE), out)?;
    Ok(())
}

/// Read an archive index; relative map paths are resolved against `dir`.
pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let text = std::fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == INDEX_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected index header {other:?}"
            )))
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!(
                "index line {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::Format(format!("index line {}: bad {what}", lineno + 2));
        let rel = PathBuf::from(fields[3]);
        let path = if rel.is_absolute() { rel } else { dir.join(rel) };
        entries.push(IndexEntry {
            pair_id: fields[0].to_string(),
            model: fields[1].to_string(),
            layer: fields[2].to_string(),
            path,
            height: fields[4].parse().map_err(|_| parse_err("height"))?,
            width: fields[5].parse().map_err(|_| parse_err("width"))?,
            cosine: fields[6].parse().map_err(|_| parse_err("cosine"))?,
            loss: fields[7].parse().map_err(|_| parse_err("loss"))?,
            seed: fields[8].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

/// Grayscale P5 PGM of a `[0, 1]` map; values round to the 0..=255 range.
pub fn render_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "heatmap wants rank 2, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|v| to_byte(*v)));
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The fixed 256-entry warm colormap: black -> red -> yellow -> white,
/// integer arithmetic only so renders are bit-exact everywhere.
pub fn warm_colormap() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, rgb) in table.iter_mut().enumerate() {
        let i = i as u32;
        *rgb = if i <= 84 {
            [(i * 255 / 84) as u8, 0, 0]
        } else if i <= 169 {
            [255, ((i - 85) * 255 / 84) as u8, 0]
        } else {
            [255, 255, ((i - 170) * 255 / 85) as u8]
        };
    }
    table
}

/// Warm-colormapped PNG of a `[0, 1]` map.
pub fn render_png_warm(map: &Tensor, path: &Path) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "heatmap wants rank 2, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let table = warm_colormap();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, pixel) in img.pixels_mut().enumerate() {
        *pixel = image::Rgb(table[to_byte(map.data()[i]) as usize]);
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn map_files_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.leam");
        let map = Tensor::from_fn(vec![3, 5], |i| i as f64 / 14.0);
        write_map(&path, &map, FLAG_NORMALIZED).unwrap();
        let (back, flags) = read_map(&path).unwrap();
        assert_eq!(flags, FLAG_NORMALIZED);
        assert_eq!(back.shape(), &[3, 5]);
        for (a, b) in map.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }

        std::fs::write(&path, b"nope").unwrap();
        assert!(read_map(&path).is_err());
    }

    proptest! {
        #[test]
        fn map_payload_survives_f32_roundtrip(values in proptest::collection::vec(0.0f64..1.0, 12)) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.leam");
            let map = Tensor::new(vec![3, 4], values).unwrap();
            write_map(&path, &map, 0).unwrap();
            let (back, _) = read_map(&path).unwrap();
            for (a, b) in map.data().iter().zip(back.data()) {
                prop_assert_eq!(*a as f32, *b as f32);
                prop_assert_eq!(*b, (*a as f32) as f64);
            }
        }
    }

    #[test]
    fn index_roundtrip() {
        let dir = tempdir().unwrap();
        let entries = vec![IndexEntry {
            pair_id: "id0:a->b".into(),
            model: "net7".into(),
            layer: "conv1".into(),
            path: dir.path().join("maps/x.leam"),
            height: 64,
            width: 64,
            cosine: 0.8212345,
            loss: 0.1787655,
            seed: 7,
        }];
        write_index(dir.path(), &entries).unwrap();
        let back = read_index(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].pair_id, entries[0].pair_id);
        assert_eq!(back[0].layer, "conv1");
        assert!((back[0].cosine - 0.8212345).abs() <= 1e-6);
    }

    #[test]
    fn pgm_renders_deterministically() {
        let map = Tensor::from_fn(vec![2, 2], |i| i as f64 / 3.0);
        let a = render_pgm(&map).unwrap();
        let b = render_pgm(&map).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&a[a.len() - 4..], &[0u8, 85, 170, 255]);

        let cold = render_pgm(&Tensor::zeros(vec![2, 2])).unwrap();
        assert!(cold[cold.len() - 4..].iter().all(|&b| b == 0));
    }

    #[test]
    fn warm_colormap_endpoints() {
        let table = warm_colormap();
        assert_eq!(table[0], [0, 0, 0]);
        assert_eq!(table[84], [255, 0, 0]);
        assert_eq!(table[169], [255, 255, 0]);
        assert_eq!(table[255], [255, 255, 255]);
    }
}
