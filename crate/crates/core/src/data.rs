//! Synthetic shapes dataset, PPM/PGM image files and the text manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::localization::Box;
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tensor::Tensor;
use crate::train::Sample;

pub const CLASS_NAMES: [&str; 8] = [
    "disk",
    "square",
    "triangle",
    "cross",
    "ring",
    "horizontal_bar",
    "vertical_bar",
    "diamond",
];

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const NOISE: f64 = 0.04;
const MIN_BOX_AREA: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    HorizontalBar,
    VerticalBar,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::HorizontalBar,
        Shape::VerticalBar,
        Shape::Diamond,
    ];

    /// Whether offset `(dx, dy)` from the centre falls inside a shape of extent `s`.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let h = s / 2.0;
        match self {
            Shape::Disk => dx * dx + dy * dy <= h * h,
            Shape::Square => dx.abs() <= 0.85 * h && dy.abs() <= 0.85 * h,
            Shape::Triangle => {
                let t = (dy + h) / s;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * h
            }
            Shape::Cross => {
                (dx.abs() <= s / 6.0 && dy.abs() <= h) || (dy.abs() <= s / 6.0 && dx.abs() <= h)
            }
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= h * h && r2 >= (0.6 * h) * (0.6 * h)
            }
            Shape::HorizontalBar => dx.abs() <= h && dy.abs() <= s / 6.0,
            Shape::VerticalBar => dy.abs() <= h && dx.abs() <= s / 6.0,
            Shape::Diamond => dx.abs() + dy.abs() <= h,
        }
    }
}

fn contrasting_color(rng: &mut SeededRng, background: f64) -> [f64; 3] {
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let spread = c.iter().map(|v| (v - background).abs()).sum::<f64>() / 3.0;
        if spread > 0.25 {
            return c;
        }
    }
}

fn overlaps(a: &Box, b: &Box) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

/// Renders one `3 x size x size` image of class `label` and its exact box.
pub fn render_sample(seed: u64, label: usize, size: usize) -> Result<(Tensor, Box)> {
    let shape = *Shape::ALL.get(label).ok_or_else(|| {
        Error::Invalid(format!(
            "label {label} out of range for {} shapes",
            Shape::ALL.len()
        ))
    })?;
    if size < 32 {
        return Err(Error::Invalid(format!(
            "image size {size} is too small for the shapes"
        )));
    }
    let mut rng = seeded(seed);
    let background = rng.gen_range(0.25..0.55);
    let mut px: Vec<f64> = (0..3 * size * size)
        .map(|_| background + rng.gen_range(-NOISE..NOISE))
        .collect();

    let sz = size as f64;
    // the floor keeps thin bars above the minimum box area on small images
    let s = rng.gen_range((0.28 * sz).max(16.0)..(0.53 * sz).max(17.0));
    let margin = s / 2.0 + 1.0;
    let (cx, cy) = (
        rng.gen_range(margin..sz - margin),
        rng.gen_range(margin..sz - margin),
    );
    let color = contrasting_color(&mut rng, background);

    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            mask[y * size + x] = shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s);
        }
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (y, x) = (k / size, k % size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    let gt = Box::new(x0, y0, x1, y1)?;
    if gt.area() < MIN_BOX_AREA {
        return Err(Error::Invalid(format!(
            "rendered box {gt:?} is smaller than {MIN_BOX_AREA} pixels"
        )));
    }

    // striped distractor patches away from the object
    let distractors = rng.gen_range(0..=2);
    for _ in 0..distractors {
        let tint = contrasting_color(&mut rng, background);
        let (w, h) = (rng.gen_range(6..12usize), rng.gen_range(6..12usize));
        let horizontal = rng.gen::<bool>();
        for _attempt in 0..20 {
            let (dx, dy) = (rng.gen_range(0..=size - w), rng.gen_range(0..=size - h));
            let patch = Box::new(dx, dy, dx + w, dy + h)?;
            if overlaps(&patch, &gt) {
                continue;
            }
            for y in dy..dy + h {
                for x in dx..dx + w {
                    let phase = if horizontal { y - dy } else { x - dx };
                    if (phase / 2) % 2 == 0 {
                        for (c, t) in tint.iter().enumerate() {
                            px[c * size * size + y * size + x] = 0.5 * (t + background);
                        }
                    }
                }
            }
            break;
        }
    }

    for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for (c, v) in color.iter().enumerate() {
            px[c * size * size + k] = v + rng.gen_range(-NOISE..NOISE);
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((Tensor::new(&[3, size, size], px)?, gt))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3 x H x W` tensor with values in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = image.dims() else {
        return Err(Error::Invalid(format!(
            "PPM needs a 3 x H x W image, got {:?}",
            image.dims()
        )));
    };
    let (h, w) = (*h, *w);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for k in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(d[c * h * w + k]));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an `H x W` map as binary PGM after min-max normalization.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let [h, w] = map.dims() else {
        return Err(Error::Invalid(format!(
            "PGM needs an H x W map, got {:?}",
            map.dims()
        )));
    };
    let norm = crate::tensor::ops::minmax_normalize(map, map.numel())?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(norm.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::format(
            path,
            format!("expected {magic}, found {}", fields[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad header field {s:?}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit images are supported, max value {max}"),
        ));
    }
    Ok((w, h, pos + 1))
}

/// Reads a binary PPM into a `3 x H x W` tensor with values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, start) = parse_header(&bytes, "P6", path)?;
    let body = bytes
        .get(start..start + 3 * w * h)
        .ok_or_else(|| Error::format(path, "truncated pixel data"))?;
    let mut data = vec![0.0; 3 * w * h];
    for k in 0..w * h {
        for c in 0..3 {
            data[c * w * h + k] = body[3 * k + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Reads a binary PGM into an `H x W` tensor with values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, start) = parse_header(&bytes, "P5", path)?;
    let body = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::format(path, "truncated pixel data"))?;
    Ok(Tensor::new(
        &[h, w],
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub boxes: Vec<Box>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# seed {}\n# classes {}\n",
            self.seed,
            self.class_names.join(" ")
        );
        for e in &self.entries {
            out.push_str(&format!("{} {}", e.path.display(), e.label));
            for b in &e.boxes {
                out.push_str(&format!(" {} {} {} {}", b.x0, b.y0, b.x1, b.y1));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest; entry paths stay relative to the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seed = 0;
        let mut class_names = Vec::new();
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::format(path, format!("line {}: {msg}", no + 1));
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut words = rest.split_whitespace();
                match words.next() {
                    Some("seed") => {
                        seed = words
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad("bad seed".into()))?
                    }
                    Some("classes") => class_names = words.map(str::to_string).collect(),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 6 || (fields.len() - 2) % 4 != 0 {
                return Err(bad(format!(
                    "expected `path label x0 y0 x1 y1`, got {line:?}"
                )));
            }
            let label = fields[1]
                .parse()
                .map_err(|_| bad(format!("bad label {:?}", fields[1])))?;
            let nums = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|_| bad(format!("bad coordinate {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let boxes = nums
                .chunks(4)
                .map(|c| Box::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                label,
                boxes,
            });
        }
        if !class_names.is_empty() {
            if let Some(e) = entries.iter().find(|e| e.label >= class_names.len()) {
                return Err(Error::format(
                    path,
                    format!("label {} out of range", e.label),
                ));
            }
        }
        Ok(DatasetManifest {
            entries,
            class_names,
            seed,
            root,
        })
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    image: read_ppm(&self.image_path(e))?,
                    label: e.label,
                })
            })
            .collect()
    }
}

/// Renders `n_train` + `n_test` images under `dir` (in `train/` and `test/`)
/// and writes `train.txt` and `test.txt`. Labels cycle through the classes,
/// so every class gets the same count up to one.
pub fn gen_dataset(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    image_size: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut out = Vec::with_capacity(2);
    for (split, n, stream) in [
        ("train", n_train, STREAM_TRAIN),
        ("test", n_test, STREAM_TEST),
    ] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % CLASS_NAMES.len();
            let (image, gt) =
                render_sample(derive_seed(seed, stream, i as u64), label, image_size)?;
            let rel = PathBuf::from(split).join(format!("{i:05}.ppm"));
            write_ppm(&dir.join(&rel), &image)?;
            entries.push(ManifestEntry {
                path: rel,
                label,
                boxes: vec![gt],
            });
        }
        let manifest = DatasetManifest {
            entries,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            seed,
            root: dir.to_path_buf(),
        };
        let file = dir.join(format!("{split}.txt"));
        manifest.write(&file)?;
        out.push(manifest);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test))
}

/// Appends `line` to `path`, creating the file when needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_renders_inside_bounds() {
        for label in 0..8 {
            for seed in 0..20 {
                let (img, b) = render_sample(seed, label, 64).unwrap();
                assert_eq!(img.dims(), &[3, 64, 64]);
                assert!(b.within(64, 64));
                assert!(b.area() >= 64);
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(render_sample(0, 8, 64).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = dir.path().join("m.pgm");
        write_pgm(&q, &Tensor::from_fn(&[3, 2], |i| i as f64)).unwrap();
        let m = read_pgm(&q).unwrap();
        assert_eq!(m.dims(), &[3, 2]);
        assert_eq!(m.data()[5], 1.0);
    }

    #[test]
    fn manifest_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "# seed 3\na.ppm 1 0 0 5\n").unwrap();
        assert!(DatasetManifest::read(&p).is_err());
        fs::write(&p, "# seed 3\na.ppm 1 0 0 5 5\n").unwrap();
        let m = DatasetManifest::read(&p).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.entries[0].boxes, vec![Box::new(0, 0, 5, 5).unwrap()]);
    }
}
