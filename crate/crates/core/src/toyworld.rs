//! Procedural shape/color world with exact ground truth: anti-aliased
//! rasterization of simple shapes over grayscale backgrounds, balanced
//! dataset generation, and a line-delimited manifest with file hashes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::vocab::{self, PROMPT_LEN};

/// Palette colors, saturated and far from the grayscale backgrounds.
pub fn palette_rgb(name: &str) -> Result<[f64; 3]> {
    Ok(match name {
        "red" => [0.90, 0.10, 0.10],
        "green" => [0.10, 0.80, 0.15],
        "blue" => [0.15, 0.20, 0.90],
        "yellow" => [0.95, 0.85, 0.10],
        "magenta" => [0.85, 0.15, 0.80],
        "cyan" => [0.10, 0.80, 0.85],
        _ => return Err(Error::UnknownToken(name.to_string())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: String,
    pub color: String,
    pub background: String,
    /// Shape center in pixel coordinates (canvas-size units).
    pub cx: f64,
    pub cy: f64,
    /// Outer radius in pixels.
    pub radius: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn prompt(&self) -> Result<[usize; PROMPT_LEN]> {
        let mut ids = [vocab::NULL_TOKEN; PROMPT_LEN];
        ids[0] = vocab::color_id(&self.color)?;
        ids[1] = vocab::shape_id(&self.shape)?;
        ids[2] = vocab::background_id(&self.background)?;
        Ok(ids)
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    // Even-odd ray casting.
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn star_polygon(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    let inner = r * 0.45;
    let mut pts = Vec::with_capacity(10);
    for k in 0..10 {
        let rad = if k % 2 == 0 { r } else { inner };
        let ang = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
        pts.push((cx + rad * ang.cos(), cy + rad * ang.sin()));
    }
    pts
}

fn inside_shape(shape: &str, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r * 0.82 && dy.abs() <= r * 0.82,
        "triangle" => {
            // Equilateral, apex up, circumradius r.
            let a = (cx, cy - r);
            let b = (cx - r * 0.866, cy + r * 0.5);
            let c = (cx + r * 0.866, cy + r * 0.5);
            let sign = |p: (f64, f64), q: (f64, f64)| (x - q.0) * (p.1 - q.1) - (p.0 - q.0) * (y - q.1);
            let d1 = sign(a, b);
            let d2 = sign(b, c);
            let d3 = sign(c, a);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
        "star" => point_in_polygon(x, y, &star_polygon(cx, cy, r)),
        "cross" => {
            let arm = r * 0.34;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => false,
    }
}

fn background_value(background: &str, x: usize, y: usize, size: usize) -> f64 {
    match background {
        "plain" => 0.82,
        "gradient" => 0.25 + 0.5 * (y as f64 / (size - 1) as f64),
        "checker" => {
            let cell = (size / 4).max(1);
            if ((x / cell) + (y / cell)) % 2 == 0 {
                0.65
            } else {
                0.35
            }
        }
        _ => 0.5,
    }
}

const SUPERSAMPLE: usize = 4;

/// Anti-aliased rasterization. Returns (RGB image [3,S,S] in [0,1], coverage
/// mask [S,S] in [0,1]).
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if size != 32 && size != 64 {
        return Err(Error::InvalidArg {
            op: "render_scene",
            msg: format!("size must be 32 or 64, got {size}"),
        });
    }
    vocab::shape_id(&spec.shape)?;
    vocab::background_id(&spec.background)?;
    let rgb = palette_rgb(&spec.color)?;
    let fits = spec.cx - spec.radius >= 0.0
        && spec.cy - spec.radius >= 0.0
        && spec.cx + spec.radius <= size as f64
        && spec.cy + spec.radius <= size as f64;
    if !fits {
        return Err(Error::InvalidArg {
            op: "render_scene",
            msg: format!(
                "shape at ({:.1},{:.1}) r={:.1} leaves the {size}px canvas",
                spec.cx, spec.cy, spec.radius
            ),
        });
    }

    let mut mask = vec![0f32; size * size];
    let ss = SUPERSAMPLE;
    let inv = 1.0 / (ss * ss) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut cov = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / ss as f64;
                    if inside_shape(&spec.shape, x, y, spec.cx, spec.cy, spec.radius) {
                        cov += 1.0;
                    }
                }
            }
            mask[py * size + px] = (cov * inv) as f32;
        }
    }

    let mut img = vec![0f32; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let bg = background_value(&spec.background, px, py, size);
            let m = mask[py * size + px] as f64;
            for ch in 0..3 {
                img[ch * size * size + py * size + px] = (bg * (1.0 - m) + rgb[ch] * m) as f32;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[3, size, size], img)?,
        Tensor::from_vec(&[size, size], mask)?,
    ))
}

/// Draws a jittered scene spec from the attribute grid entry.
fn jittered_spec(shape: &str, color: &str, background: &str, size: usize, rng: &mut Rng, seed: u64) -> SceneSpec {
    let sf = size as f64 / 32.0;
    loop {
        let radius = rng.uniform_range(8.0, 11.0) * sf;
        let cx = size as f64 / 2.0 + rng.uniform_range(-3.0, 3.0) * sf;
        let cy = size as f64 / 2.0 + rng.uniform_range(-3.0, 3.0) * sf;
        if cx - radius >= 0.0
            && cy - radius >= 0.0
            && cx + radius <= size as f64
            && cy + radius <= size as f64
        {
            return SceneSpec {
                shape: shape.to_string(),
                color: color.to_string(),
                background: background.to_string(),
                cx,
                cy,
                radius,
                seed,
            };
        }
    }
}

/// In-memory dataset: rendered images, coverage masks, prompts and specs.
pub struct Dataset {
    pub size: usize,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
    pub prompts: Vec<[usize; PROMPT_LEN]>,
    pub specs: Vec<SceneSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generates `n` scenes by cycling a shuffled attribute grid (balanced within
/// one grid repetition) with jittered geometry. Pure function of (n, seed).
pub fn gen_scenes(n: usize, seed: u64, size: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArg { op: "gen_scenes", msg: "n must be positive".into() });
    }
    let mut rng = Rng::new(seed).split(Stream::Dataset);
    let mut grid = Vec::new();
    for s in vocab::SHAPES {
        for c in vocab::COLORS {
            for b in vocab::BACKGROUNDS {
                grid.push((s, c, b));
            }
        }
    }
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let mut block = grid.clone();
        rng.shuffle(&mut block);
        order.extend(block);
    }
    order.truncate(n);

    let mut ds = Dataset {
        size,
        images: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        prompts: Vec::with_capacity(n),
        specs: Vec::with_capacity(n),
    };
    for (i, (s, c, b)) in order.into_iter().enumerate() {
        let spec = jittered_spec(s, c, b, size, &mut rng, seed.wrapping_add(i as u64));
        let (img, mask) = render_scene(&spec, size)?;
        ds.prompts.push(spec.prompt()?);
        ds.specs.push(spec);
        ds.images.push(img);
        ds.masks.push(mask);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub spec: SceneSpec,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub size: usize,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Renders a dataset to `dir` as PNGs plus a line-delimited manifest with
/// file hashes.
pub fn gen_dataset(n: usize, seed: u64, size: usize, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let ds = gen_scenes(n, seed, size)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let image_rel = format!("images/{i:05}.png");
        let mask_rel = format!("masks/{i:05}.png");
        crate::imgio::save_rgb(dir.join(&image_rel), &ds.images[i])?;
        crate::imgio::save_gray(dir.join(&mask_rel), &ds.masks[i])?;
        entries.push(ManifestEntry {
            image: image_rel.clone(),
            mask: mask_rel.clone(),
            prompt: vocab::prompt_text(&ds.prompts[i]),
            spec: ds.specs[i].clone(),
            image_sha256: sha256_hex(&fs::read(dir.join(&image_rel))?),
            mask_sha256: sha256_hex(&fs::read(dir.join(&mask_rel))?),
        });
    }
    let manifest = DatasetManifest {
        header: ManifestHeader { seed, size, count: n },
        entries,
        root: dir.to_path_buf(),
    };
    save_manifest(&manifest, dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&m.header).map_err(|e| Error::Container(e.to_string()))?);
    out.push('\n');
    for e in &m.entries {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::Container(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a manifest and verifies that every referenced file matches its
/// recorded hash.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: ManifestHeader = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Container("empty manifest".into()))?,
    )
    .map_err(|e| Error::Container(format!("manifest header: {e}")))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::Container(format!("manifest line {}: {err}", i + 2)))?;
        let img_bytes = fs::read(root.join(&e.image))?;
        if sha256_hex(&img_bytes) != e.image_sha256 {
            return Err(Error::Container(format!("hash mismatch for {}", e.image)));
        }
        let mask_bytes = fs::read(root.join(&e.mask))?;
        if sha256_hex(&mask_bytes) != e.mask_sha256 {
            return Err(Error::Container(format!("hash mismatch for {}", e.mask)));
        }
        entries.push(e);
    }
    if entries.len() != header.count {
        return Err(Error::Container(format!(
            "manifest count {} does not match {} entries",
            header.count,
            entries.len()
        )));
    }
    Ok(DatasetManifest { header, entries, root })
}

/// Loads the images referenced by a manifest back into memory.
pub fn load_dataset(m: &DatasetManifest) -> Result<Dataset> {
    let mut ds = Dataset {
        size: m.header.size,
        images: Vec::with_capacity(m.entries.len()),
        masks: Vec::with_capacity(m.entries.len()),
        prompts: Vec::with_capacity(m.entries.len()),
        specs: Vec::with_capacity(m.entries.len()),
    };
    for e in &m.entries {
        ds.images.push(crate::imgio::load_rgb(m.root.join(&e.image))?);
        ds.masks.push(crate::imgio::load_gray(m.root.join(&e.mask))?);
        ds.prompts.push(e.spec.prompt()?);
        ds.specs.push(e.spec.clone());
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(shape: &str, color: &str, bg: &str, r: f64) -> SceneSpec {
        SceneSpec {
            shape: shape.into(),
            color: color.into(),
            background: bg.into(),
            cx: 16.0,
            cy: 16.0,
            radius: r,
            seed: 0,
        }
    }

    #[test]
    fn circle_mask_area_close_to_analytic() {
        let spec = centered("circle", "red", "plain", 9.0);
        let (_, mask) = render_scene(&spec, 32).unwrap();
        let area: f32 = mask.data().iter().sum();
        let want = std::f64::consts::PI * 81.0;
        assert!(
            (area as f64 - want).abs() / want < 0.02,
            "area {area} vs {want}"
        );
    }

    #[test]
    fn render_is_deterministic() {
        let spec = centered("star", "cyan", "checker", 10.0);
        let (a, am) = render_scene(&spec, 32).unwrap();
        let (b, bm) = render_scene(&spec, 32).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(am.data(), bm.data());
    }

    #[test]
    fn foreground_mean_color_matches_palette() {
        for color in vocab::COLORS {
            let spec = centered("square", color, "plain", 10.0);
            let (img, mask) = render_scene(&spec, 32).unwrap();
            let rgb = palette_rgb(color).unwrap();
            // Mask interior only (full coverage).
            let n = 32 * 32;
            for ch in 0..3 {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for p in 0..n {
                    if mask.data()[p] >= 0.999 {
                        acc += img.data()[ch * n + p] as f64;
                        wsum += 1.0;
                    }
                }
                let mean = acc / wsum;
                assert!((mean - rgb[ch]).abs() < 0.02, "{color} ch{ch}: {mean} vs {}", rgb[ch]);
            }
        }
    }

    #[test]
    fn out_of_canvas_rejected() {
        let mut spec = centered("circle", "red", "plain", 9.0);
        spec.cx = 4.0;
        assert!(render_scene(&spec, 32).is_err());
    }

    #[test]
    fn dataset_balance_and_determinism() {
        let ds = gen_scenes(90, 7, 32).unwrap();
        for shape in vocab::SHAPES {
            let count = ds.specs.iter().filter(|s| s.shape == shape).count();
            assert!((16..=20).contains(&count), "{shape} appears {count} times");
        }
        let ds2 = gen_scenes(90, 7, 32).unwrap();
        for (a, b) in ds.specs.iter().zip(&ds2.specs) {
            assert_eq!(a, b);
        }
        for (a, b) in ds.images.iter().zip(&ds2.images) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn prompts_round_trip_vocabulary() {
        let ds = gen_scenes(30, 3, 32).unwrap();
        for p in &ds.prompts {
            for &id in p {
                assert!(id < vocab::vocab_size());
            }
            assert!(vocab::shape_slot(p).is_some());
        }
    }
}
