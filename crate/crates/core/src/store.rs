//! On-disk dataset splits: PPM images, PGM masks, a CSV manifest and a
//! key=value header.
//!
//! ```text
//! <dir>/header.txt      format_version, seed, domain, split, counts, shape
//! <dir>/manifest.csv    example_id,class,image_path,mask_path
//! <dir>/textures.csv    example_id,texture   (only when textures are known)
//! <dir>/images/*.ppm
//! <dir>/masks/*.pgm
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Example};
use crate::domains::{DatasetManifest, FORMAT_VERSION};
use crate::error::DatasetError;
use crate::grid::BinaryMask;

pub const HEADER_FILE: &str = "header.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TEXTURE_FILE: &str = "textures.csv";
pub const MANIFEST_HEADER: &str = "example_id,class,image_path,mask_path";

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) from a 3×H×W planar image.
pub fn encode_ppm(image: &[f64], height: usize, width: usize) -> Vec<u8> {
    let area = height * width;
    assert_eq!(image.len(), 3 * area, "ppm expects 3 channels");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * area);
    for p in 0..area {
        for ch in 0..3 {
            out.push(quantize(image[ch * area + p]));
        }
    }
    out
}

/// Binary PGM (P5) with 0/255 values.
pub fn encode_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.as_slice().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

struct Netpbm<'a> {
    width: usize,
    height: usize,
    pixels: &'a [u8],
}

fn parse_netpbm<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<Netpbm<'a>, DatasetError> {
    let bad = |msg: &str| DatasetError::format(path, msg);
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(&format!("expected {magic} magic")));
    }
    // Three whitespace-separated header tokens after the magic, comments allowed.
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
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
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("malformed header"))?;
        tokens.push(tok.parse::<usize>().map_err(|_| bad("malformed header"))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    Ok(Netpbm {
        width,
        height,
        pixels: &bytes[pos..],
    })
}

/// Returns (height, width, planar 3×H×W values).
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>), DatasetError> {
    let img = parse_netpbm(bytes, "P6", path)?;
    let area = img.width * img.height;
    if img.pixels.len() != 3 * area {
        return Err(DatasetError::format(
            path,
            format!("expected {} pixel bytes, found {}", 3 * area, img.pixels.len()),
        ));
    }
    let mut data = vec![0.0; 3 * area];
    for p in 0..area {
        for ch in 0..3 {
            data[ch * area + p] = img.pixels[3 * p + ch] as f64 / 255.0;
        }
    }
    Ok((img.height, img.width, data))
}

pub fn decode_mask_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask, DatasetError> {
    let img = parse_netpbm(bytes, "P5", path)?;
    let area = img.width * img.height;
    if img.pixels.len() != area {
        return Err(DatasetError::format(
            path,
            format!("expected {area} pixel bytes, found {}", img.pixels.len()),
        ));
    }
    let mut mask = BinaryMask::zeros(img.height, img.width);
    for (i, &b) in img.pixels.iter().enumerate() {
        match b {
            0 => {}
            255 => mask.set(i / img.width, i % img.width, true),
            v => return Err(DatasetError::format(path, format!("mask value {v} is not 0 or 255"))),
        }
    }
    Ok(mask)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|e| DatasetError::io(path, e))
}

/// Writes one split; `dir` is created if needed.
pub fn write_dataset(dataset: &Dataset, manifest: &DatasetManifest, dir: &Path) -> Result<(), DatasetError> {
    let [c, h, w] = dataset.image_shape;
    if c != 3 {
        return Err(DatasetError::Parameter(format!("only 3-channel images can be stored, got {c}")));
    }
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| DatasetError::io(&p, e))?;
    }
    let mut rows = String::from(MANIFEST_HEADER);
    rows.push('\n');
    let mut textures = String::from("example_id,texture\n");
    let mut all_textures = true;
    for ex in &dataset.examples {
        let image_rel = format!("images/{:06}.ppm", ex.id);
        let mask_rel = format!("masks/{:06}.pgm", ex.id);
        write_file(&dir.join(&image_rel), &encode_ppm(&ex.image, h, w))?;
        let mask = ex
            .annotation
            .as_ref()
            .ok_or_else(|| DatasetError::Parameter(format!("example {} has no annotation", ex.id)))?;
        write_file(&dir.join(&mask_rel), &encode_mask_pgm(mask))?;
        let _ = writeln!(rows, "{},{},{},{}", ex.id, ex.label, image_rel, mask_rel);
        match ex.texture {
            Some(t) => {
                let _ = writeln!(textures, "{},{}", ex.id, t);
            }
            None => all_textures = false,
        }
    }
    write_file(&dir.join(MANIFEST_FILE), rows.as_bytes())?;
    if all_textures && !dataset.is_empty() {
        write_file(&dir.join(TEXTURE_FILE), textures.as_bytes())?;
    }
    let counts: Vec<String> = manifest.class_counts.iter().map(usize::to_string).collect();
    let header = format!(
        "format_version={}\nseed={}\ndomain={}\nsplit={}\nexample_count={}\nnum_classes={}\nclass_counts={}\nheight={}\nwidth={}\n",
        manifest.format_version,
        manifest.seed,
        manifest.domain,
        manifest.split,
        manifest.example_count,
        dataset.num_classes,
        counts.join(";"),
        h,
        w
    );
    write_file(&dir.join(HEADER_FILE), header.as_bytes())
}

fn header_value<'a>(lines: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str, DatasetError> {
    lines
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| DatasetError::format(path, format!("missing header key {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<T, DatasetError> {
    s.trim()
        .parse()
        .map_err(|_| DatasetError::format(path, format!("bad {what}: {s:?}")))
}

/// Reads a split written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest), DatasetError> {
    let header_path = dir.join(HEADER_FILE);
    let header_text = String::from_utf8(read_file(&header_path)?)
        .map_err(|_| DatasetError::format(&header_path, "not UTF-8"))?;
    let kv: Vec<(String, String)> = header_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| DatasetError::format(&header_path, format!("malformed line {l:?}")))
        })
        .collect::<Result<_, _>>()?;
    let format_version: u32 = parse_num(header_value(&kv, "format_version", &header_path)?, "format_version", &header_path)?;
    if format_version != FORMAT_VERSION {
        return Err(DatasetError::format(
            &header_path,
            format!("unsupported format version {format_version}"),
        ));
    }
    let seed: u64 = parse_num(header_value(&kv, "seed", &header_path)?, "seed", &header_path)?;
    let num_classes: usize = parse_num(header_value(&kv, "num_classes", &header_path)?, "num_classes", &header_path)?;
    let height: usize = parse_num(header_value(&kv, "height", &header_path)?, "height", &header_path)?;
    let width: usize = parse_num(header_value(&kv, "width", &header_path)?, "width", &header_path)?;
    let example_count: usize = parse_num(header_value(&kv, "example_count", &header_path)?, "example_count", &header_path)?;
    let domain = header_value(&kv, "domain", &header_path)?.to_string();
    let split = header_value(&kv, "split", &header_path)?.to_string();

    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|_| DatasetError::format(&manifest_path, "not UTF-8"))?;
    let mut lines = manifest_text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(DatasetError::format(&manifest_path, "unexpected manifest header"));
    }
    let textures = read_textures(dir)?;
    let mut examples = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DatasetError::format(&manifest_path, format!("malformed row {line:?}")));
        }
        let id: usize = parse_num(fields[0], "example_id", &manifest_path)?;
        let label: usize = parse_num(fields[1], "class", &manifest_path)?;
        if label >= num_classes {
            return Err(DatasetError::format(&manifest_path, format!("class {label} out of range")));
        }
        let image_path = dir.join(fields[2]);
        let (ih, iw, image) = decode_ppm(&read_file(&image_path)?, &image_path)?;
        if (ih, iw) != (height, width) {
            return Err(DatasetError::DimensionMismatch {
                path: image_path,
                detail: format!("image is {ih}x{iw}, header says {height}x{width}"),
            });
        }
        let mask_path = dir.join(fields[3]);
        let mask = decode_mask_pgm(&read_file(&mask_path)?, &mask_path)?;
        if mask.dims() != (height, width) {
            return Err(DatasetError::DimensionMismatch {
                path: mask_path,
                detail: format!("mask is {}x{}, image is {height}x{width}", mask.height(), mask.width()),
            });
        }
        let texture = textures.as_ref().and_then(|t| t.get(&id).copied());
        examples.push(Example {
            id,
            image,
            label,
            annotation: Some(mask),
            texture,
        });
    }
    if examples.len() != example_count {
        return Err(DatasetError::format(
            &manifest_path,
            format!("{} rows but header says {example_count}", examples.len()),
        ));
    }
    let dataset = Dataset {
        name: format!("{domain}/{split}"),
        image_shape: [3, height, width],
        num_classes,
        examples,
    };
    let manifest = DatasetManifest {
        domain,
        split,
        example_count,
        class_counts: dataset.class_counts(),
        seed,
        format_version,
    };
    Ok((dataset, manifest))
}

fn read_textures(dir: &Path) -> Result<Option<std::collections::HashMap<usize, usize>>, DatasetError> {
    let path = dir.join(TEXTURE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = String::from_utf8(read_file(&path)?).map_err(|_| DatasetError::format(&path, "not UTF-8"))?;
    let mut map = std::collections::HashMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (id, t) = line
            .split_once(',')
            .ok_or_else(|| DatasetError::format(&path, format!("malformed row {line:?}")))?;
        map.insert(parse_num(id, "example_id", &path)?, parse_num(t, "texture", &path)?);
    }
    Ok(Some(map))
}

/// `<root>/<domain>/<split>`
pub fn split_dir(root: &Path, domain: &str, split: &str) -> PathBuf {
    root.join(domain).join(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_split, DomainSpec, SplitConfig};

    fn small() -> (Dataset, DatasetManifest) {
        let cfg = SplitConfig {
            num_classes: 3,
            n_per_class: 2,
            side: 16,
            seed: 11,
        };
        generate_split(&DomainSpec::source(0.8), "train", &cfg).unwrap()
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, manifest) = small();
        write_dataset(&ds, &manifest, dir.path()).unwrap();
        let (back, back_manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(back_manifest, manifest);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.examples.iter().zip(&back.examples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.annotation, b.annotation);
            assert_eq!(a.texture, b.texture);
            for (x, y) in a.image.iter().zip(&b.image) {
                assert!((x - y).abs() <= 1.0 / 510.0 + 1e-15);
            }
        }
        let files = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(files, ds.len());
    }

    #[test]
    fn corrupted_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, manifest) = small();
        write_dataset(&ds, &manifest, dir.path()).unwrap();
        let bad = dir.path().join("images/000001.ppm");
        let mut bytes = fs::read(&bad).unwrap();
        bytes[1] = b'3';
        fs::write(&bad, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("000001.ppm"), "{err}");
    }

    #[test]
    fn missing_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, manifest) = small();
        write_dataset(&ds, &manifest, dir.path()).unwrap();
        let mask = dir.path().join("masks/000002.pgm");
        fs::write(&mask, encode_mask_pgm(&BinaryMask::zeros(8, 8))).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::DimensionMismatch { .. })
        ));
        fs::remove_file(&mask).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Io { .. })));
    }

    #[test]
    fn ppm_bytes() {
        let img = vec![1.0, 0.0, 0.5, 0.2, 0.0, 1.0];
        let bytes = encode_ppm(&img, 1, 2);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 128, 0, 0, 51, 255]);
        let (h, w, back) = decode_ppm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(back[0], 1.0);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0, 7]);
        assert!(decode_mask_pgm(&bytes, Path::new("m.pgm")).is_err());
    }
}
