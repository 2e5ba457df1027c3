use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratenet_autograd::Tensor;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::heatmap::render_heatmap;
use super::image::load_image;
use super::keypoints::Keypoints18;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// One ordered (source → target) pair of images of the same person.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub person_id: String,
    pub source_image: PathBuf,
    pub target_image: PathBuf,
    pub source_keypoints: PathBuf,
    pub target_keypoints: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub pairs: Vec<PairEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn person_ids(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.person_id.as_str()).collect()
    }
}

/// `splits.json`, either `{"person": "train", ...}` or `{"train": [...], "test": [...]}`.
#[derive(Debug)]
struct RawManifest(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawManifest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawManifest;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawManifest, A::Error> {
                let mut entries = Vec::new();
                while let Some(e) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push(e);
                }
                Ok(RawManifest(entries))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parses a split manifest into person → split, rejecting any person listed twice.
pub fn parse_splits(text: &str, path: &Path) -> Result<BTreeMap<String, Split>> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    let list_form = !raw.0.is_empty()
        && raw.0.iter().all(|(k, v)| (k == "train" || k == "test") && v.is_array());
    let mut out: BTreeMap<String, Split> = BTreeMap::new();
    let mut add = |person: String, split: Split| -> Result<()> {
        if let Some(prev) = out.insert(person.clone(), split) {
            return Err(Error::Dataset(format!(
                "person `{person}` appears in more than one split entry ({prev} and {split})"
            )));
        }
        Ok(())
    };
    if list_form {
        for (k, v) in raw.0 {
            let split = Split::from_str(&k)?;
            for item in v.as_array().expect("checked") {
                let id = item
                    .as_str()
                    .ok_or_else(|| Error::Dataset(format!("{}: split lists must hold strings", path.display())))?;
                add(id.to_string(), split)?;
            }
        }
    } else {
        for (k, v) in raw.0 {
            let s = v
                .as_str()
                .ok_or_else(|| Error::Dataset(format!("{}: split of `{k}` must be a string", path.display())))?;
            add(k, Split::from_str(s)?)?;
        }
    }
    Ok(out)
}

/// Splits `<person_id>_<pose_id>` at the last underscore.
pub fn parse_stem(stem: &str) -> Option<(&str, &str)> {
    let (person, pose) = stem.rsplit_once('_')?;
    (!person.is_empty() && !pose.is_empty()).then_some((person, pose))
}

/// Indexes `root` (see the crate docs for the layout) for one split.
///
/// Pairs are all ordered pose pairs of each person without self-pairs,
/// sorted by (source path, target path).
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let images_dir = root.join("images");
    let manifest_path = root.join("splits.json");
    let empty = DatasetIndex { root: root.to_path_buf(), split, pairs: Vec::new() };
    if !images_dir.exists() && !manifest_path.exists() {
        return Ok(empty);
    }
    let manifest = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        parse_splits(&text, &manifest_path)?
    } else {
        BTreeMap::new()
    };
    if !images_dir.exists() {
        return Ok(empty);
    }
    let mut by_person: BTreeMap<String, Vec<(PathBuf, PathBuf)>> = BTreeMap::new();
    let rd = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if !files.is_empty() && !manifest_path.exists() {
        return Err(Error::Dataset(format!("{} is missing", manifest_path.display())));
    }
    for img in files {
        let stem = img.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (person, _) = parse_stem(&stem)
            .ok_or_else(|| Error::Dataset(format!("image name {} is not <person>_<pose>.png", img.display())))?;
        let kp = root.join("keypoints").join(format!("{stem}.json"));
        if !kp.exists() {
            return Err(Error::MissingKeypoints(img));
        }
        // Parse now so malformed records fail at load time.
        Keypoints18::load(&kp)?;
        if manifest.get(person) == Some(&split) {
            by_person.entry(person.to_string()).or_default().push((img, kp));
        }
    }
    let mut pairs = Vec::new();
    for (person, poses) in &by_person {
        for (i, (si, sk)) in poses.iter().enumerate() {
            for (j, (ti, tk)) in poses.iter().enumerate() {
                if i != j {
                    pairs.push(PairEntry {
                        person_id: person.clone(),
                        source_image: si.clone(),
                        target_image: ti.clone(),
                        source_keypoints: sk.clone(),
                        target_keypoints: tk.clone(),
                    });
                }
            }
        }
    }
    pairs.sort_by(|a, b| (&a.source_image, &a.target_image).cmp(&(&b.source_image, &b.target_image)));
    Ok(DatasetIndex { root: root.to_path_buf(), split, pairs })
}

/// A batch of training pairs, each tensor with a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub source_image: Tensor<f32>,
    pub source_pose: Tensor<f32>,
    pub target_image: Tensor<f32>,
    pub target_pose: Tensor<f32>,
    pub person_ids: Vec<String>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    pub fn height_width(&self) -> (usize, usize) {
        let s = self.source_image.shape();
        (s[2], s[3])
    }

    /// Sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Result<TrainingBatch> {
        Ok(TrainingBatch {
            source_image: self.source_image.narrow_batch(i, 1)?,
            source_pose: self.source_pose.narrow_batch(i, 1)?,
            target_image: self.target_image.narrow_batch(i, 1)?,
            target_pose: self.target_pose.narrow_batch(i, 1)?,
            person_ids: vec![self.person_ids[i].clone()],
        })
    }
}

/// Decoded sample tensors of one image.
#[derive(Clone, Debug)]
struct Frame {
    image: Tensor<f32>,
    pose: Tensor<f32>,
}

/// A dataset index with every image and heatmap decoded in memory.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub index: DatasetIndex,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    frames: Vec<Frame>,
    /// (source frame, target frame) per pair.
    pair_frames: Vec<(usize, usize)>,
}

impl PairDataset {
    pub fn load(index: DatasetIndex, sigma: f64) -> Result<Self> {
        let mut frames = Vec::new();
        let mut lookup: HashMap<PathBuf, usize> = HashMap::new();
        let mut dims: Option<(usize, usize)> = None;
        let mut pair_frames = Vec::with_capacity(index.pairs.len());
        for pair in &index.pairs {
            let mut ids = [0usize; 2];
            for (slot, (img, kp)) in
                [(&pair.source_image, &pair.source_keypoints), (&pair.target_image, &pair.target_keypoints)]
                    .into_iter()
                    .enumerate()
            {
                if let Some(&i) = lookup.get(img) {
                    ids[slot] = i;
                    continue;
                }
                let image = load_image(img)?;
                let (h, w) = (image.shape()[1], image.shape()[2]);
                match dims {
                    None => {
                        if h % 8 != 0 || w % 8 != 0 {
                            return Err(Error::Dataset(format!(
                                "{}: size {h}x{w} is not a multiple of 8",
                                img.display()
                            )));
                        }
                        dims = Some((h, w));
                    }
                    Some(d) if d != (h, w) => {
                        return Err(Error::Dataset(format!(
                            "{}: size {h}x{w} differs from {}x{}",
                            img.display(),
                            d.0,
                            d.1
                        )))
                    }
                    _ => {}
                }
                let keypoints = Keypoints18::load(kp)?;
                let pose = render_heatmap(&keypoints, h, w, sigma)?;
                frames.push(Frame { image, pose });
                lookup.insert(img.clone(), frames.len() - 1);
                ids[slot] = frames.len() - 1;
            }
            pair_frames.push((ids[0], ids[1]));
        }
        let (height, width) = dims.unwrap_or((0, 0));
        Ok(Self { index, height, width, sigma, frames, pair_frames })
    }

    pub fn len(&self) -> usize {
        self.pair_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_frames.is_empty()
    }

    /// Collates the given pair indices into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<TrainingBatch> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let mut parts: [Vec<&Tensor<f32>>; 4] = Default::default();
        let mut person_ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let &(s, t) = self
                .pair_frames
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("pair index {i} out of range")))?;
            parts[0].push(&self.frames[s].image);
            parts[1].push(&self.frames[s].pose);
            parts[2].push(&self.frames[t].image);
            parts[3].push(&self.frames[t].pose);
            person_ids.push(self.index.pairs[i].person_id.clone());
        }
        let stack = |v: &[&Tensor<f32>]| -> Result<Tensor<f32>> {
            let mut shape = vec![v.len()];
            shape.extend_from_slice(v[0].shape());
            let data: Vec<f32> = v.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::from_vec(&shape, data)?)
        };
        Ok(TrainingBatch {
            source_image: stack(&parts[0])?,
            source_pose: stack(&parts[1])?,
            target_image: stack(&parts[2])?,
            target_pose: stack(&parts[3])?,
            person_ids,
        })
    }
}

/// Deterministic batch order: a fresh permutation per epoch, derived from
/// `(seed, epoch)` only, consumed in fixed-size chunks that wrap into the
/// next epoch.
#[derive(Clone, Copy, Debug)]
pub struct BatchSampler {
    pub n_items: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSampler {
    pub fn new(n_items: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_items == 0 || batch_size == 0 {
            return Err(Error::Dataset(format!(
                "cannot sample batches of {batch_size} from {n_items} items"
            )));
        }
        Ok(Self { n_items, batch_size, seed })
    }

    pub fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut p: Vec<usize> = (0..self.n_items).collect();
        p.shuffle(&mut rng);
        p
    }

    /// Pair indices of the batch consumed at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.n_items as u64;
        let start = step * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in start..start + self.batch_size as u64 {
            let epoch = k / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.epoch_permutation(epoch)));
            }
            out.push(cached.as_ref().expect("set").1[(k % n) as usize]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_forms() {
        let p = Path::new("splits.json");
        let m = parse_splits(r#"{"a": "train", "b": "test"}"#, p).unwrap();
        assert_eq!(m["a"], Split::Train);
        let m = parse_splits(r#"{"train": ["a"], "test": ["b"]}"#, p).unwrap();
        assert_eq!(m["b"], Split::Test);
    }

    #[test]
    fn person_in_both_splits_rejected() {
        let p = Path::new("splits.json");
        assert!(parse_splits(r#"{"train": ["a", "b"], "test": ["b"]}"#, p).is_err());
        assert!(parse_splits(r#"{"a": "train", "a": "test"}"#, p).is_err());
        assert!(parse_splits(r#"{"a": "validation"}"#, p).is_err());
    }

    #[test]
    fn stems() {
        assert_eq!(parse_stem("p0001_03"), Some(("p0001", "03")));
        assert_eq!(parse_stem("id_with_underscore_7"), Some(("id_with_underscore", "7")));
        assert_eq!(parse_stem("nounderscore"), None);
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epochs() {
        let s = BatchSampler::new(5, 2, 11).unwrap();
        let again = BatchSampler::new(5, 2, 11).unwrap();
        let mut seen = Vec::new();
        for step in 0..5 {
            let b = s.batch_indices(step);
            assert_eq!(b, again.batch_indices(step));
            assert_eq!(b.len(), 2);
            seen.extend(b);
        }
        // steps 0..5 consume exactly two epochs
        let mut e0 = seen[..5].to_vec();
        e0.sort();
        assert_eq!(e0, vec![0, 1, 2, 3, 4]);
        assert!(BatchSampler::new(0, 2, 1).is_err());
    }

    #[test]
    fn batch_larger_than_dataset_repeats() {
        let s = BatchSampler::new(2, 5, 0).unwrap();
        let b = s.batch_indices(0);
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|&i| i < 2));
    }
}
