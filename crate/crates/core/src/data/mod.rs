//! Synthetic rectified stereo scenes with ground-truth depth, plus dataset
//! file I/O.
//!
//! A scene is a textured background plane and a set of textured rectangles
//! at fixed depths. The right view is the left view with every object
//! shifted left by its integer disparity round(Bf / Z); disoccluded regions
//! show the (shifted) background texture. Rendering is painter's algorithm,
//! far to near, and textures are infinite procedural fields, so the pair
//! satisfies left(x, y) = right(x - d, y) exactly on non-occluded pixels.

pub mod clue;
pub mod noise;
pub mod pfm;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use clue::{clue_blockmatch, clue_degrade};
pub use pfm::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One training/evaluation unit. Images are channel-planar in [0, 1];
/// gt_depth is normalized inverse depth in (0, 1] (near objects -> 1).
#[derive(Debug, Clone)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    pub gt_depth: Tensor,
    pub clue: Tensor,
}

/// A textured rectangle at constant depth. Coordinates may extend beyond
/// the frame; textures are defined everywhere.
#[derive(Debug, Clone)]
pub struct RectSpec {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
    pub depth: f64,
    pub texture_seed: u64,
}

/// Scene description: image size, background plane, objects, and the
/// baseline-times-focal product mapping depth to disparity (d = bf / Z).
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_depth: f64,
    pub bf: f64,
    pub rects: Vec<RectSpec>,
}

impl SceneSpec {
    fn disparity(&self, depth: f64) -> i64 {
        (self.bf / depth).round() as i64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(DataError::InvalidSpec("image size must be positive".into()));
        }
        let limit = self.width as i64 / 4;
        let check = |what: &str, depth: f64| -> Result<()> {
            if depth <= 0.0 {
                return Err(DataError::InvalidSpec(format!(
                    "{what} depth must be strictly positive, got {depth}"
                )));
            }
            let d = self.disparity(depth);
            if d >= limit {
                return Err(DataError::InvalidSpec(format!(
                    "{what} disparity {d} exceeds width/4 = {limit}"
                )));
            }
            Ok(())
        };
        check("background", self.background_depth)?;
        for (i, r) in self.rects.iter().enumerate() {
            check(&format!("rect {i}"), r.depth)?;
        }
        Ok(())
    }

    fn min_depth(&self) -> f64 {
        self.rects
            .iter()
            .map(|r| r.depth)
            .fold(self.background_depth, f64::min)
    }
}

const TEXTURE_CELL: usize = 4;
const TEXTURE_OCTAVES: usize = 3;
/// Defaults for the degraded ground-truth clue attached to each sample.
pub const CLUE_BLUR_RADIUS: usize = 2;
pub const CLUE_NOISE_SIGMA: f64 = 0.05;

fn mix(seed: u64, salt: u64) -> u64 {
    let mut h = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h
}

/// RGB texel of one object at absolute scene coordinates: a per-object base
/// color modulated by value noise.
fn texel(x: i64, y: i64, seed: u64, c: usize) -> f64 {
    let base = 0.3 + 0.7 * noise::value_noise(0, 0, 1, 1, mix(seed, 17 + c as u64));
    let lum = noise::value_noise(x, y, TEXTURE_CELL, TEXTURE_OCTAVES, mix(seed, 1));
    (base * (0.35 + 0.65 * lum)).clamp(0.0, 1.0)
}

/// Render a stereo pair with ground truth and a degraded-ground-truth clue.
/// Pure function of (spec, seed): identical calls give identical samples.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<StereoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bg_seed = mix(seed, 0xbac0);

    // far-to-near painter order; nearer objects overwrite
    let mut order: Vec<usize> = (0..spec.rects.len()).collect();
    order.sort_by(|a, b| {
        spec.rects[*b]
            .depth
            .partial_cmp(&spec.rects[*a].depth)
            .unwrap()
    });

    let mut left = vec![0.0f64; 3 * h * w];
    let mut right = vec![0.0f64; 3 * h * w];
    let mut zbuf = vec![spec.background_depth; h * w];

    let d_bg = spec.disparity(spec.background_depth);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                left[(c * h + y) * w + x] = texel(x as i64, y as i64, bg_seed, c);
                right[(c * h + y) * w + x] = texel(x as i64 + d_bg, y as i64, bg_seed, c);
            }
        }
    }

    for idx in order {
        let r = &spec.rects[idx];
        let obj_seed = mix(seed, r.texture_seed.wrapping_add(0x0b1ec7));
        let d = spec.disparity(r.depth);
        let (x0, x1) = (r.x, r.x + r.w as i64);
        let (y0, y1) = (r.y, r.y + r.h as i64);
        for y in y0.max(0)..y1.min(h as i64) {
            let yu = y as usize;
            // left view: pixels the rect covers directly
            for x in x0.max(0)..x1.min(w as i64) {
                let xu = x as usize;
                for c in 0..3usize {
                    left[(c * h + yu) * w + xu] = texel(x, y, obj_seed, c);
                }
                zbuf[yu * w + xu] = r.depth;
            }
            // right view: the rect appears shifted left by its disparity, and
            // pixel (x, y) shows the texel the left view has at (x + d, y)
            for x in (x0 - d).max(0)..(x1 - d).min(w as i64) {
                let xu = x as usize;
                for c in 0..3usize {
                    right[(c * h + yu) * w + xu] = texel(x + d, y, obj_seed, c);
                }
            }
        }
    }

    let z_min = spec.min_depth();
    let gt: Vec<f64> = zbuf.iter().map(|z| z_min / z).collect();
    let gt_depth = Tensor::new(vec![1, h, w], gt)?;
    let clue = clue_degrade(
        &gt_depth,
        CLUE_BLUR_RADIUS,
        CLUE_NOISE_SIGMA,
        mix(seed, 0xc1e),
    )?;

    Ok(StereoSample {
        left: Tensor::new(vec![3, h, w], left)?,
        right: Tensor::new(vec![3, h, w], right)?,
        gt_depth,
        clue,
    })
}

/// Deterministic shuffled partition. The split point is round(n * ratio),
/// clamped so both sides are non-empty; intended for datasets of 10+.
pub fn split<T>(samples: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = samples.len();
    if n < 2 {
        return Err(DataError::InvalidInput(format!(
            "cannot split {n} samples into two non-empty sets"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::InvalidInput(format!(
            "split ratio must be in [0, 1], got {ratio}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let cut = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let mut train = Vec::with_capacity(cut);
    let mut test = Vec::with_capacity(n - cut);
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    for (k, i) in idx.into_iter().enumerate() {
        let s = slots[i].take().expect("each index visited once");
        if k < cut {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

/// How the clue channel of a dataset is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClueMode {
    /// Degraded ground truth (blur + noise).
    Degrade,
    /// SAD block matching on the rendered pair.
    BlockMatch,
    /// No clue channel at all.
    Disabled,
}

impl std::fmt::Display for ClueMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClueMode::Degrade => write!(f, "degrade"),
            ClueMode::BlockMatch => write!(f, "blockmatch"),
            ClueMode::Disabled => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for ClueMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "degrade" => Ok(ClueMode::Degrade),
            "blockmatch" => Ok(ClueMode::BlockMatch),
            "none" => Ok(ClueMode::Disabled),
            other => Err(format!(
                "unknown clue mode {other:?} (expected degrade, blockmatch, or none)"
            )),
        }
    }
}

/// A dataset loaded from or destined for disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<StereoSample>,
    /// False when the directory had no clue maps; samples then carry a
    /// constant 0.5 placeholder clue.
    pub has_clue: bool,
}

/// Draw a random desk-scale scene: 2-4 rectangles over a far background.
pub fn random_scene(width: usize, height: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bf = width as f64 / 4.0;
    let n_rects = rng.gen_range(2..=4);
    let rects = (0..n_rects)
        .map(|i| {
            let w = rng.gen_range(width / 5..=width / 2);
            let h = rng.gen_range(height / 5..=height / 2);
            RectSpec {
                x: rng.gen_range(-(w as i64) / 2..width as i64 - w as i64 / 2),
                y: rng.gen_range(-(h as i64) / 2..height as i64 - h as i64 / 2),
                w,
                h,
                // depth 2..6 with bf = W/4 keeps disparities in [W/24, W/8]
                depth: rng.gen_range(2.0..6.0),
                texture_seed: seed.wrapping_add(1 + i as u64),
            }
        })
        .collect();
    SceneSpec {
        width,
        height,
        background_depth: 10.0,
        bf,
        rects,
    }
}

fn describe_scene(spec: &SceneSpec) -> String {
    let mut s = format!(
        "size={}x{} bg_depth={} bf={}",
        spec.width, spec.height, spec.background_depth, spec.bf
    );
    for r in &spec.rects {
        let _ = write!(
            s,
            " rect[x={} y={} w={} h={} z={:.4} tex={}]",
            r.x, r.y, r.w, r.h, r.depth, r.texture_seed
        );
    }
    s
}

/// Generate `count` random scenes and write the dataset directory layout:
/// left/NNNN.ppm, right/NNNN.ppm, depth/NNNN.pfm, clue/NNNN.pfm (unless the
/// clue is disabled), plus manifest.txt describing every scene. Returns the
/// manifest text.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
    clue_mode: ClueMode,
) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    for sub in ["left", "right", "depth"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    if clue_mode != ClueMode::Disabled {
        std::fs::create_dir_all(dir.join("clue"))?;
    }

    let mut manifest = String::new();
    for i in 0..count {
        let sample_seed = mix(seed, i as u64);
        let spec = random_scene(width, height, sample_seed);
        let mut sample = generate_scene(&spec, sample_seed)?;
        if clue_mode == ClueMode::BlockMatch {
            // search up to the spec's disparity budget
            sample.clue = clue_blockmatch(&sample.left, &sample.right, 7, width / 4)?;
        }
        let name = format!("{i:04}");
        write_ppm(&dir.join("left").join(format!("{name}.ppm")), &sample.left)?;
        write_ppm(&dir.join("right").join(format!("{name}.ppm")), &sample.right)?;
        write_pfm(&dir.join("depth").join(format!("{name}.pfm")), &sample.gt_depth)?;
        if clue_mode != ClueMode::Disabled {
            write_pfm(&dir.join("clue").join(format!("{name}.pfm")), &sample.clue)?;
        }
        let _ = writeln!(manifest, "{name} seed={sample_seed} {}", describe_scene(&spec));
    }
    std::fs::write(dir.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

/// Load a dataset directory written by [`generate_dataset`] (or anything
/// matching the same layout). Sample order follows sorted file names.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let left_dir = dir.join("left");
    if !left_dir.is_dir() {
        return Err(DataError::InvalidInput(format!(
            "{} has no left/ directory",
            dir.display()
        )));
    }
    let mut names: Vec<String> = std::fs::read_dir(&left_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n = e.file_name().into_string().ok()?;
            n.strip_suffix(".ppm").map(str::to_owned)
        })
        .collect();
    names.sort();

    let clue_dir = dir.join("clue");
    let has_clue = clue_dir.is_dir();
    let mut samples = Vec::with_capacity(names.len());
    for name in &names {
        let left = read_ppm(&left_dir.join(format!("{name}.ppm")))?;
        let right = read_ppm(&dir.join("right").join(format!("{name}.ppm")))?;
        let gt_depth = read_pfm(&dir.join("depth").join(format!("{name}.pfm")))?;
        let clue = if has_clue {
            read_pfm(&clue_dir.join(format!("{name}.pfm")))?
        } else {
            let s = gt_depth.shape();
            Tensor::full(vec![1, s[1], s[2]], 0.5)
        };
        samples.push(StereoSample {
            left,
            right,
            gt_depth,
            clue,
        });
    }
    Ok(Dataset { samples, has_clue })
}
