//! Procedural sprite try-on benchmark.
//!
//! Each scene is a triple on a 4:3 canvas (default 64x48): the bare figure,
//! the flat garment, and the composite with the garment warped onto the
//! torso. The renderer composes the composite from the bare image and the
//! warped garment mask, so `composite == bare` holds bit-exactly outside
//! the garment support. Everything is a pure function of the seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::io::{self, Dtype};
use crate::tensor::rng::RngState;
use crate::tensor::Tensor;

pub const CANVAS_H: usize = 64;
pub const CANVAS_W: usize = 48;

pub const N_CATEGORIES: usize = 4;
pub const N_COLORS: usize = 6;

const PALETTE: [[f64; 3]; N_COLORS] = [
    [0.85, 0.20, 0.20], // red
    [0.20, 0.35, 0.80], // blue
    [0.20, 0.70, 0.30], // green
    [0.92, 0.80, 0.20], // yellow
    [0.60, 0.25, 0.70], // purple
    [0.20, 0.72, 0.72], // teal
];
const SKIN: [f64; 3] = [0.87, 0.72, 0.58];
const BG: [f64; 3] = [0.93, 0.93, 0.96];
const GARMENT_BG: [f64; 3] = [0.97, 0.97, 0.97];

/// Garment pattern class. `Glyph` is the hardest class: a single scaled
/// bitmap letter on the chest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Solid,
    Stripes,
    Blocks,
    Glyph,
}

impl Category {
    pub fn from_id(id: usize) -> Category {
        match id % N_CATEGORIES {
            0 => Category::Solid,
            1 => Category::Stripes,
            2 => Category::Blocks,
            _ => Category::Glyph,
        }
    }
    pub fn id(&self) -> usize {
        match self {
            Category::Solid => 0,
            Category::Stripes => 1,
            Category::Blocks => 2,
            Category::Glyph => 3,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Solid => "solid",
            Category::Stripes => "stripes",
            Category::Blocks => "blocks",
            Category::Glyph => "glyph",
        };
        write!(f, "{s}")
    }
}

/// Dataset quality tier. `Mixed` generation degrades roughly half the
/// garment textures (blocking + color noise); `Clean` never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Mixed,
    Clean,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Tier> {
        match s {
            "mixed" => Ok(Tier::Mixed),
            "clean" => Ok(Tier::Clean),
            _ => Err(Error::config(format!("unknown tier `{s}` (expected mixed|clean)"))),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", if *self == Tier::Mixed { "mixed" } else { "clean" })
    }
}

/// Pose and appearance parameters drawn per scene.
#[derive(Debug, Clone)]
pub struct SceneMeta {
    pub category: Category,
    pub color: usize,
    pub color2: usize,
    pub glyph: usize,
    pub arm_angle: f64,
    pub torso_halfwidth: f64,
    pub dy: f64,
    pub degraded: bool,
    pub noise_salt: u64,
}

/// One benchmark sample: bare figure, flat garment, composite, metadata.
pub struct SpriteScene {
    pub bare: Tensor,
    pub garment: Tensor,
    pub composite: Tensor,
    pub meta: SceneMeta,
}

// ── signed distance helpers ─────────────────────────────────────────

fn sd_circle(py: f64, px: f64, cy: f64, cx: f64, r: f64) -> f64 {
    ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() - r
}

fn sd_rounded_box(py: f64, px: f64, cy: f64, cx: f64, hy: f64, hx: f64, rc: f64) -> f64 {
    let qy = (py - cy).abs() - (hy - rc);
    let qx = (px - cx).abs() - (hx - rc);
    let oy = qy.max(0.0);
    let ox = qx.max(0.0);
    (oy * oy + ox * ox).sqrt() + qy.max(qx).min(0.0) - rc
}

fn sd_capsule(py: f64, px: f64, ay: f64, ax: f64, by: f64, bx: f64, r: f64) -> f64 {
    let (pay, pax) = (py - ay, px - ax);
    let (bay, bax) = (by - ay, bx - ax);
    let h = ((pay * bay + pax * bax) / (bay * bay + bax * bax)).clamp(0.0, 1.0);
    ((pay - bay * h).powi(2) + (pax - bax * h).powi(2)).sqrt() - r
}

fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

// ── figure and garment geometry ─────────────────────────────────────

fn figure_sdf(py: f64, px: f64, m: &SceneMeta) -> f64 {
    let dy = m.dy;
    let a = m.torso_halfwidth;
    let theta = m.arm_angle;
    let cx = CANVAS_W as f64 / 2.0;
    let mut d = sd_circle(py, px, 12.0 + dy, cx, 5.2);
    d = d.min(sd_rounded_box(py, px, 29.5 + dy, cx, 10.5, a, 3.0));
    // neck
    d = d.min(sd_rounded_box(py, px, 18.0 + dy, cx, 2.5, 2.0, 1.0));
    // arms from the shoulders, angled outward by theta from vertical
    for side in [-1.0, 1.0] {
        let sy = 20.5 + dy;
        let sx = cx + side * (a + 0.6);
        let ey = sy + 15.0 * theta.cos();
        let ex = sx + side * 15.0 * theta.sin();
        d = d.min(sd_capsule(py, px, sy, sx, ey, ex, 2.0));
    }
    // legs
    for side in [-1.0, 1.0] {
        let sy = 39.0 + dy;
        let sx = cx + side * 3.6;
        d = d.min(sd_capsule(py, px, sy, sx, 58.0 + dy, cx + side * 4.6, 2.6));
    }
    d
}

const GARMENT_HY: f64 = 12.0;
const GARMENT_HX: f64 = 11.0;

/// Garment silhouette in canonical coordinates centered at the origin.
fn garment_sdf(qy: f64, qx: f64) -> f64 {
    let mut d = sd_rounded_box(qy, qx, 0.0, 0.0, GARMENT_HY, GARMENT_HX, 2.5);
    for side in [-1.0, 1.0] {
        d = d.min(sd_capsule(qy, qx, -9.0, side * 9.0, -4.0, side * 14.5, 3.0));
    }
    d
}

const GLYPHS: [[u8; 7]; 6] = [
    // 5x7 bitmaps, MSB-left in the low 5 bits
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // A
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111], // E
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // H
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111], // L
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // T
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111], // Z
];

fn hash_noise(salt: u64, iy: i64, ix: i64) -> f64 {
    let mut h = salt ^ (iy as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (ix as u64).wrapping_mul(0xc2b2ae3d27d4eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Pattern color at canonical garment coordinates.
fn pattern(qy: f64, qx: f64, m: &SceneMeta) -> [f64; 3] {
    // degraded textures sample on a coarse grid with hash noise
    let (qy, qx, noise) = if m.degraded {
        let grid = 2.5;
        let iy = (qy / grid).floor();
        let ix = (qx / grid).floor();
        let n = 0.08 * hash_noise(m.noise_salt, iy as i64, ix as i64);
        (iy * grid + grid / 2.0, ix * grid + grid / 2.0, n)
    } else {
        (qy, qx, 0.0)
    };
    let c0 = PALETTE[m.color];
    let c1 = PALETTE[m.color2];
    let base = match m.category {
        Category::Solid => c0,
        Category::Stripes => {
            if ((qy + 24.0) / 5.0).floor() as i64 % 2 == 0 {
                c0
            } else {
                c1
            }
        }
        Category::Blocks => {
            let s = ((qy + 24.0) / 8.0).floor() as i64 + ((qx + 24.0) / 8.0).floor() as i64;
            if s % 2 == 0 {
                c0
            } else {
                c1
            }
        }
        Category::Glyph => {
            let scale = 3.0;
            let gy = ((qy + 10.5) / scale).floor();
            let gx = ((qx + 7.5) / scale).floor();
            let mut c = c0;
            if (0.0..7.0).contains(&gy) && (0.0..5.0).contains(&gx) {
                let row = GLYPHS[m.glyph][gy as usize];
                if (row >> (4 - gx as usize)) & 1 == 1 {
                    c = c1;
                }
            }
            c
        }
    };
    [
        (base[0] + noise).clamp(0.0, 1.0),
        (base[1] + noise).clamp(0.0, 1.0),
        (base[2] + noise).clamp(0.0, 1.0),
    ]
}

/// Affine pose warp used when compositing: body pixel -> canonical garment
/// coordinates. Scale follows torso width, shear follows the arm angle.
fn body_to_canonical(py: f64, px: f64, m: &SceneMeta) -> (f64, f64) {
    let cy = 29.0 + m.dy;
    let cx = CANVAS_W as f64 / 2.0;
    let sy = 1.05;
    let sx = (m.torso_halfwidth + 1.6) / GARMENT_HX;
    let shear = (m.arm_angle - 0.675) * 0.30;
    let qy = (py - cy) / sy;
    let qx = (px - cx) / sx - shear * qy;
    (qy, qx)
}

fn garment_alpha_at_body(py: f64, px: f64, m: &SceneMeta) -> f64 {
    let (qy, qx) = body_to_canonical(py, px, m);
    coverage(garment_sdf(qy, qx))
}

impl SpriteScene {
    /// Warped-garment coverage in [0,1] per pixel, `[H,W]`.
    pub fn support_alpha(&self) -> Vec<f64> {
        let mut out = vec![0.0; CANVAS_H * CANVAS_W];
        for iy in 0..CANVAS_H {
            for ix in 0..CANVAS_W {
                out[iy * CANVAS_W + ix] = garment_alpha_at_body(iy as f64 + 0.5, ix as f64 + 0.5, &self.meta);
            }
        }
        out
    }
}

/// Render one scene deterministically from its seed.
pub fn gen_scene(seed: u64, tier: Tier) -> SpriteScene {
    let mut rng = RngState::new(seed).derive("scene", 0);
    let category = Category::from_id(rng.below(N_CATEGORIES as u64) as usize);
    let color = rng.below(N_COLORS as u64) as usize;
    let color2 = (color + 1 + rng.below((N_COLORS - 1) as u64) as usize) % N_COLORS;
    let glyph = rng.below(GLYPHS.len() as u64) as usize;
    let arm_angle = rng.uniform(0.25, 1.10);
    let torso_halfwidth = rng.uniform(7.0, 10.0);
    let dy = rng.uniform(-2.5, 2.5);
    let degraded = tier == Tier::Mixed && rng.next_f64() < 0.5;
    let noise_salt = rng.next_u64();
    let meta =
        SceneMeta { category, color, color2, glyph, arm_angle, torso_halfwidth, dy, degraded, noise_salt };

    let plane = CANVAS_H * CANVAS_W;
    let mut bare = vec![0.0; 3 * plane];
    let mut garment = vec![0.0; 3 * plane];
    let mut composite = vec![0.0; 3 * plane];

    let gcy = CANVAS_H as f64 / 2.0;
    let gcx = CANVAS_W as f64 / 2.0;
    for iy in 0..CANVAS_H {
        for ix in 0..CANVAS_W {
            let py = iy as f64 + 0.5;
            let px = ix as f64 + 0.5;
            let i = iy * CANVAS_W + ix;

            let fig_a = coverage(figure_sdf(py, px, &meta));
            let bare_px = [
                BG[0] + fig_a * (SKIN[0] - BG[0]),
                BG[1] + fig_a * (SKIN[1] - BG[1]),
                BG[2] + fig_a * (SKIN[2] - BG[2]),
            ];

            // flat garment, canonical pose at canvas center
            let (fgy, fgx) = (py - gcy, px - gcx);
            let flat_a = coverage(garment_sdf(fgy, fgx));
            let flat_col = pattern(fgy, fgx, &meta);

            // composite: garment warped onto the torso over the bare figure
            let (qy, qx) = body_to_canonical(py, px, &meta);
            let warp_a = coverage(garment_sdf(qy, qx));
            let warp_col = pattern(qy, qx, &meta);

            for c in 0..3 {
                bare[c * plane + i] = bare_px[c];
                garment[c * plane + i] = GARMENT_BG[c] + flat_a * (flat_col[c] - GARMENT_BG[c]);
                composite[c * plane + i] = bare_px[c] + warp_a * (warp_col[c] - bare_px[c]);
            }
        }
    }

    let shape = [3, CANVAS_H, CANVAS_W];
    SpriteScene {
        bare: Tensor::constant(bare, &shape).expect("bare"),
        garment: Tensor::constant(garment, &shape).expect("garment"),
        composite: Tensor::constant(composite, &shape).expect("composite"),
        meta,
    }
}

// ── manifest and dataset files ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", if *self == Split::Train { "train" } else { "test" })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub tier: Tier,
    pub category: usize,
    pub color: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub seed: u64,
    pub gen_tier: Tier,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == Split::Train).map(|e| e.index).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == Split::Test).map(|e| e.index).collect()
    }

    /// Train indices restricted to clean-tagged samples (stage-two filter).
    pub fn clean_train_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.split == Split::Train && e.tier == Tier::Clean)
            .map(|e| e.index)
            .collect()
    }

    pub fn entry(&self, index: usize) -> Result<&ManifestEntry> {
        self.entries
            .get(index)
            .filter(|e| e.index == index)
            .ok_or_else(|| Error::config(format!("manifest has no entry {index}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("# seed={} tier={} n={}\n", self.seed, self.gen_tier, self.count());
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.index, e.split, e.tier, e.category, e.color));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let mut seed = None;
        let mut gen_tier = Tier::Mixed;
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                for tok in rest.split_whitespace() {
                    if let Some(v) = tok.strip_prefix("seed=") {
                        seed = Some(v.parse().map_err(|_| Error::Format(format!("bad seed {v}")))?);
                    } else if let Some(v) = tok.strip_prefix("tier=") {
                        gen_tier = Tier::parse(v)?;
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Format(format!("manifest line needs 5 columns: {line}")));
            }
            let index = cols[0].parse().map_err(|_| Error::Format(format!("bad index {}", cols[0])))?;
            let split = match cols[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Format(format!("bad split {other}"))),
            };
            let tier = Tier::parse(cols[2])?;
            let category = cols[3].parse().map_err(|_| Error::Format(format!("bad category {}", cols[3])))?;
            let color = cols[4].parse().map_err(|_| Error::Format(format!("bad color {}", cols[4])))?;
            entries.push(ManifestEntry { index, split, tier, category, color });
        }
        let seed = seed.ok_or_else(|| Error::Format("manifest missing seed header".to_string()))?;
        Ok(DatasetManifest { seed, gen_tier, entries })
    }
}

pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    RngState::new(dataset_seed).derive("sample", index as u64).seed
}

fn scene_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("{index}_bare.tsr")),
        dir.join(format!("{index}_garment.tsr")),
        dir.join(format!("{index}_composite.tsr")),
    ]
}

/// Render `n` scenes to `out_dir` as TSR triples plus the manifest.
/// The train/test split is a 90/10 assignment by per-index hash rank.
pub fn render_dataset(n: usize, seed: u64, tier: Tier, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if n < 1 {
        return Err(Error::config("dataset needs n >= 1".to_string()));
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;

    // hash-rank split: the n/10 smallest hashes (at least 1) are test
    let mut ranked: Vec<(u64, usize)> =
        (0..n).map(|i| (RngState::new(seed).derive("split", i as u64).seed, i)).collect();
    ranked.sort_unstable();
    let n_test = (n / 10).max(1);
    let mut is_test = vec![false; n];
    for &(_, i) in ranked.iter().take(n_test) {
        is_test[i] = true;
    }

    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let scene = gen_scene(scene_seed(seed, index), tier);
        let [pb, pg, pc] = scene_paths(dir, index);
        io::write_tsr(pb, &scene.bare, Dtype::F32)?;
        io::write_tsr(pg, &scene.garment, Dtype::F32)?;
        io::write_tsr(pc, &scene.composite, Dtype::F32)?;
        entries.push(ManifestEntry {
            index,
            split: if is_test[index] { Split::Test } else { Split::Train },
            tier: if scene.meta.degraded { Tier::Mixed } else { Tier::Clean },
            category: scene.meta.category.id(),
            color: scene.meta.color,
        });
    }
    let manifest = DatasetManifest { seed, gen_tier: tier, entries };
    manifest.save(dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Images of one stored scene, loaded from TSR files.
pub struct LoadedScene {
    pub bare: Tensor,
    pub garment: Tensor,
    pub composite: Tensor,
    pub category: usize,
    pub color: usize,
}

pub fn load_scene(dir: impl AsRef<Path>, manifest: &DatasetManifest, index: usize) -> Result<LoadedScene> {
    let entry = manifest.entry(index)?;
    let [pb, pg, pc] = scene_paths(dir.as_ref(), index);
    Ok(LoadedScene {
        bare: io::read_tsr(pb)?,
        garment: io::read_tsr(pg)?,
        composite: io::read_tsr(pc)?,
        category: entry.category,
        color: entry.color,
    })
}

/// Unpaired assignment: a seeded derangement of the test indices, so no
/// person keeps their own garment. Returns `person -> garment` pairs.
pub fn unpair(manifest: &DatasetManifest, seed: u64) -> Result<Vec<(usize, usize)>> {
    let test = manifest.test_indices();
    if test.len() < 2 {
        return Err(Error::config(format!("unpair needs >= 2 test samples, have {}", test.len())));
    }
    // Sattolo's algorithm: a uniform single-cycle permutation (never a fixed point)
    let mut perm: Vec<usize> = (0..test.len()).collect();
    let mut rng = RngState::new(seed).derive("unpair", manifest.seed);
    for i in (1..perm.len()).rev() {
        let j = rng.below(i as u64) as usize;
        perm.swap(i, j);
    }
    Ok(test.iter().enumerate().map(|(i, &p)| (p, test[perm[i]])).collect())
}
