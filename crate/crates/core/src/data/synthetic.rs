//! Procedural stand-in for a fashion-model photo collection.
//!
//! Every person gets their own palette and a periodic torso pattern
//! (stripes or a checker board with person-specific period and phase);
//! every pose draws a new skeleton. Figures are painted with hard edges so
//! the output is a pure function of the arguments.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::image::encode_png;
use super::keypoints::{Keypoints18, NUM_JOINTS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n_persons: usize,
    pub poses_per_person: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// The last `test_persons` persons go to the test split.
    pub test_persons: usize,
}

impl SynthOptions {
    pub fn new(n_persons: usize, poses_per_person: usize, height: usize, width: usize, seed: u64) -> Self {
        Self { n_persons, poses_per_person, height, width, seed, test_persons: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_persons < 1 {
            return Err(Error::Invalid("need at least one person".into()));
        }
        if self.poses_per_person < 2 {
            return Err(Error::Invalid("need at least two poses per person".into()));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Invalid(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Invalid("synthetic figures need at least 32x32 pixels".into()));
        }
        if self.test_persons >= self.n_persons && self.test_persons > 0 {
            return Err(Error::Invalid("test split would leave no training persons".into()));
        }
        Ok(())
    }
}

/// A generated sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub person_id: String,
    pub pose_id: String,
    pub image: RgbImage,
    pub keypoints: Keypoints18,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub images: usize,
    pub keypoint_files: usize,
    pub files_written: usize,
    pub unchanged: bool,
    /// SHA-256 over every file path and content, in path order.
    pub digest: String,
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Stripes { angle: f64 },
    Checker,
}

#[derive(Clone, Debug)]
struct Appearance {
    background: [u8; 3],
    skin: [u8; 3],
    hair: [u8; 3],
    top_a: [u8; 3],
    top_b: [u8; 3],
    sleeves: [u8; 3],
    legs: [u8; 3],
    pattern: Pattern,
    period: f64,
    phase: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn appearance(seed: u64, person: usize, width: usize) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, person as u64 + 1, 0));
    let bg = rng.random_range(215..=245u8);
    let pattern = if rng.random_bool(0.5) {
        Pattern::Stripes { angle: rng.random_range(0.0..PI) }
    } else {
        Pattern::Checker
    };
    let scale = width as f64 / 64.0;
    Appearance {
        background: [bg, bg, bg.saturating_sub(rng.random_range(0..12))],
        skin: [rng.random_range(150..=235), rng.random_range(110..=190), rng.random_range(80..=160)],
        hair: color(&mut rng, 10, 90),
        top_a: color(&mut rng, 20, 230),
        top_b: color(&mut rng, 20, 230),
        sleeves: color(&mut rng, 20, 230),
        legs: color(&mut rng, 10, 160),
        pattern,
        period: rng.random_range(3.0..8.0) * scale,
        phase: rng.random_range(0.0..1.0),
    }
}

/// Draws a skeleton in pixel coordinates. Ears and eyes may be hidden when
/// the head is turned.
fn skeleton(seed: u64, person: usize, pose: usize, attempt: u64, h: usize, w: usize) -> Keypoints18 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, person as u64 + 1, ((pose as u64 + 1) << 8) | attempt));
    let (hf, wf) = (h as f64, w as f64);
    let cx = rng.random_range(0.42..0.58) * wf;
    let lean = rng.random_range(-0.04..0.04) * wf;
    let neck = [cx + lean, 0.28 * hf];
    let sw = 0.12 * wf;
    let hw = 0.075 * wf;
    let hip_y = 0.57 * hf;
    let r_sh = [neck[0] - sw, neck[1] + 0.02 * hf];
    let l_sh = [neck[0] + sw, neck[1] + 0.02 * hf];
    let r_hip = [cx - hw, hip_y];
    let l_hip = [cx + hw, hip_y];

    let limb = |rng: &mut ChaCha8Rng, start: [f64; 2], len: f64, lo: f64, hi: f64| {
        // angle measured from straight down, positive toward +x
        let a: f64 = rng.random_range(lo..hi);
        [start[0] + len * a.sin(), start[1] + len * a.cos()]
    };
    let (ua, fa) = (0.15 * hf, 0.13 * hf);
    let r_el = limb(&mut rng, r_sh, ua, -2.4, 0.2);
    let r_wr = limb(&mut rng, r_el, fa, -2.6, 0.6);
    let l_el = limb(&mut rng, l_sh, ua, -0.2, 2.4);
    let l_wr = limb(&mut rng, l_el, fa, -0.6, 2.6);
    let (th, sh) = (0.18 * hf, 0.17 * hf);
    let r_kn = limb(&mut rng, r_hip, th, -0.5, 0.25);
    let r_an = limb(&mut rng, r_kn, sh, -0.3, 0.3);
    let l_kn = limb(&mut rng, l_hip, th, -0.25, 0.5);
    let l_an = limb(&mut rng, l_kn, sh, -0.3, 0.3);

    let turn: f64 = rng.random_range(-1.0..1.0);
    let nose = [neck[0] + turn * 0.03 * wf, 0.17 * hf];
    let eye_dx = 0.03 * wf;
    let r_eye = [nose[0] - eye_dx, nose[1] - 0.025 * hf];
    let l_eye = [nose[0] + eye_dx, nose[1] - 0.025 * hf];
    let r_ear = [nose[0] - 2.0 * eye_dx - turn * 0.02 * wf, nose[1] - 0.01 * hf];
    let l_ear = [nose[0] + 2.0 * eye_dx - turn * 0.02 * wf, nose[1] - 0.01 * hf];

    let raw = [
        nose, neck, r_sh, r_el, r_wr, l_sh, l_el, l_wr, r_hip, r_kn, r_an, l_hip, l_kn, l_an, r_eye, l_eye,
        r_ear, l_ear,
    ];
    let mut pts = [[0.0; 2]; NUM_JOINTS];
    for (p, r) in pts.iter_mut().zip(&raw) {
        *p = [r[0].round().clamp(1.0, wf - 2.0), r[1].round().clamp(1.0, hf - 2.0)];
    }
    let mut visible = [true; NUM_JOINTS];
    // Strong head turns hide the far ear.
    if turn > 0.6 {
        visible[16] = false;
    } else if turn < -0.6 {
        visible[17] = false;
    }
    Keypoints18::new(pts, visible)
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

fn in_convex(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn joint(kp: &Keypoints18, j: usize) -> [f64; 2] {
    kp.points[j]
}

fn paint(app: &Appearance, kp: &Keypoints18, h: usize, w: usize) -> RgbImage {
    let s = w as f64 / 64.0;
    let neck = joint(kp, 1);
    let nose = joint(kp, 0);
    let torso = [joint(kp, 2), joint(kp, 5), joint(kp, 11), joint(kp, 8)];
    let legs = [(8, 9), (9, 10), (11, 12), (12, 13)];
    let arms = [(2, 3), (3, 4), (5, 6), (6, 7)];
    let head_c = [nose[0], nose[1] - 0.01 * h as f64];
    let head_r = 0.075 * h as f64;

    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = [x as f64, y as f64];
        let mut c = app.background;
        if legs.iter().any(|&(a, b)| dist_to_segment(p, joint(kp, a), joint(kp, b)) <= 2.6 * s) {
            c = app.legs;
        }
        if in_convex(p, &torso) || dist_to_segment(p, neck, [neck[0], neck[1] + 2.0 * s]) <= 2.0 * s {
            let (u, v) = (p[0] - neck[0], p[1] - neck[1]);
            let on = match app.pattern {
                Pattern::Stripes { angle } => {
                    ((u * angle.cos() + v * angle.sin()) / app.period + app.phase).rem_euclid(1.0) < 0.5
                }
                Pattern::Checker => {
                    let a = (u / app.period + app.phase).floor() as i64;
                    let b = (v / app.period + app.phase).floor() as i64;
                    (a + b).rem_euclid(2) == 0
                }
            };
            c = if on { app.top_a } else { app.top_b };
        }
        if arms.iter().any(|&(a, b)| dist_to_segment(p, joint(kp, a), joint(kp, b)) <= 2.2 * s) {
            c = app.sleeves;
        }
        for &hand in &[4usize, 7] {
            if dist_to_segment(p, joint(kp, hand), joint(kp, hand)) <= 2.0 * s {
                c = app.skin;
            }
        }
        let dh = dist_to_segment(p, head_c, head_c);
        if dh <= head_r {
            c = if p[1] < head_c[1] - 0.45 * head_r { app.hair } else { app.skin };
        }
        Rgb(c)
    })
}

pub fn person_id(person: usize) -> String {
    format!("p{person:04}")
}

pub fn pose_id(pose: usize) -> String {
    format!("{pose:02}")
}

/// Generates every sample in memory, in (person, pose) order.
pub fn generate_samples(opts: &SynthOptions) -> Result<Vec<SynthSample>> {
    opts.validate()?;
    let mut out = Vec::with_capacity(opts.n_persons * opts.poses_per_person);
    for person in 0..opts.n_persons {
        let app = appearance(opts.seed, person, opts.width);
        let mut seen: Vec<Keypoints18> = Vec::new();
        for pose in 0..opts.poses_per_person {
            let mut attempt = 0;
            let kp = loop {
                let kp = skeleton(opts.seed, person, pose, attempt, opts.height, opts.width);
                if !seen.contains(&kp) {
                    break kp;
                }
                attempt += 1;
            };
            seen.push(kp.clone());
            out.push(SynthSample {
                person_id: person_id(person),
                pose_id: pose_id(pose),
                image: paint(&app, &kp, opts.height, opts.width),
                keypoints: kp,
            });
        }
    }
    Ok(out)
}

/// Relative path → file bytes for the full dataset layout.
pub fn render_files(opts: &SynthOptions) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let samples = generate_samples(opts)?;
    let mut files = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for person in 0..opts.n_persons {
        let split = if person + opts.test_persons >= opts.n_persons && opts.test_persons > 0 {
            "test"
        } else {
            "train"
        };
        splits.insert(person_id(person), split);
    }
    for s in &samples {
        let stem = format!("{}_{}", s.person_id, s.pose_id);
        files.insert(PathBuf::from("images").join(format!("{stem}.png")), encode_png(&s.image));
        files.insert(PathBuf::from("keypoints").join(format!("{stem}.json")), s.keypoints.to_json().into_bytes());
    }
    let mut manifest = serde_json::to_string_pretty(&splits).expect("splits serialize");
    manifest.push('\n');
    files.insert(PathBuf::from("splits.json"), manifest.into_bytes());
    Ok(files)
}

pub fn digest_files(files: &BTreeMap<PathBuf, Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for (path, bytes) in files {
        let p = path.to_string_lossy().replace('\\', "/");
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Digest of an on-disk dataset directory (same scheme as [`digest_files`]).
pub fn digest_dir(root: &Path) -> Result<String> {
    let mut files = BTreeMap::new();
    collect(root, root, &mut files)?;
    Ok(digest_files(&files))
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(path.strip_prefix(root).expect("under root").to_path_buf(), bytes);
        }
    }
    Ok(())
}

/// Writes the dataset under `root`, touching only files whose bytes differ.
pub fn make_synthetic_dataset(opts: &SynthOptions, root: &Path) -> Result<SynthSummary> {
    let files = render_files(opts)?;
    let mut written = 0;
    for (rel, bytes) in &files {
        let path = root.join(rel);
        if std::fs::read(&path).ok().as_deref() == Some(bytes.as_slice()) {
            continue;
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written += 1;
    }
    let n = opts.n_persons * opts.poses_per_person;
    Ok(SynthSummary {
        root: root.to_path_buf(),
        images: n,
        keypoint_files: n,
        files_written: written,
        unchanged: written == 0,
        digest: digest_files(&files),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sizes() {
        assert!(SynthOptions::new(1, 2, 60, 64, 0).validate().is_err());
        assert!(SynthOptions::new(1, 1, 64, 64, 0).validate().is_err());
        assert!(SynthOptions::new(0, 2, 64, 64, 0).validate().is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let o = SynthOptions::new(1, 2, 64, 64, 7);
        assert_eq!(render_files(&o).unwrap(), render_files(&o).unwrap());
        let other = SynthOptions::new(1, 2, 64, 64, 8);
        assert_ne!(digest_files(&render_files(&o).unwrap()), digest_files(&render_files(&other).unwrap()));
    }

    #[test]
    fn poses_are_distinct_and_in_bounds() {
        let samples = generate_samples(&SynthOptions::new(3, 4, 64, 64, 1)).unwrap();
        for s in &samples {
            s.keypoints.validate().unwrap();
            s.keypoints.check_bounds(64, 64).unwrap();
        }
        for p in samples.chunks(4) {
            for i in 0..4 {
                for j in i + 1..4 {
                    assert_ne!(p[i].keypoints, p[j].keypoints);
                }
            }
        }
    }

    #[test]
    fn persons_look_different() {
        let samples = generate_samples(&SynthOptions::new(2, 2, 64, 64, 3)).unwrap();
        assert_ne!(samples[0].image, samples[2].image);
    }

    #[test]
    fn convex_test() {
        let sq = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        assert!(in_convex([2.0, 2.0], &sq));
        assert!(!in_convex([5.0, 2.0], &sq));
    }
}
