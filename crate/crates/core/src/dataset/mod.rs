//! Class-foldered image trees: indexing, stratified splits and batch loading.
//!
//! Splits shuffle each class with a Fisher–Yates pass driven by
//! xoshiro256++ seeded through SplitMix64 (`seed_from_u64`), with indices drawn
//! by a 128-bit widening multiply. The exact membership of a split can also be
//! persisted to and reloaded from a text manifest, which makes it portable
//! across PRNG implementations.

mod loader;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loader::{load_batch, load_image, resize_bilinear, ImageBatch};
pub use synth::{finger_mask, make_synthetic};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub items: Vec<Item>,
    pub per_class_cap: Option<usize>,
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn path_of(&self, item: usize) -> PathBuf {
        self.root.join(&self.items[item].path)
    }

    pub fn class_name(&self, item: usize) -> &str {
        &self.classes[self.items[item].class]
    }

    /// Item indices grouped by class id, in index order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, item) in self.items.iter().enumerate() {
            groups[item.class].push(i);
        }
        groups
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        entries.push((name, entry.path()));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(entries)
}

/// Indexes `root/<class>/<file>.{png,jpg,jpeg}`. Classes and files are sorted
/// lexicographically; a cap keeps the first `cap` files of each class.
pub fn scan(root: impl AsRef<Path>, per_class_cap: Option<usize>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut classes = Vec::new();
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for (name, path) in sorted_entries(root)? {
        if !path.is_dir() {
            continue;
        }
        let class = classes.len();
        let mut count = 0;
        for (file, fpath) in sorted_entries(&path)? {
            if !fpath.is_file() || !is_image(&fpath) {
                continue;
            }
            if per_class_cap.is_some_and(|c| count >= c) {
                break;
            }
            items.push(Item {
                path: format!("{name}/{file}"),
                class,
            });
            count += 1;
        }
        if count == 0 {
            let msg = format!("class `{name}` has no images");
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
        classes.push(name);
    }
    if classes.is_empty() {
        return Err(Error::Config(format!("dataset root {} has no class folders", root.display())));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        items,
        per_class_cap,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

fn below(rng: &mut Xoshiro256PlusPlus, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

pub(crate) fn fisher_yates<T>(items: &mut [T], rng: &mut Xoshiro256PlusPlus) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// The first `n` items of a seeded shuffle of `items`.
pub fn sample(items: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut items = items.to_vec();
    fisher_yates(&mut items, &mut Xoshiro256PlusPlus::seed_from_u64(seed));
    items.truncate(n);
    items
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")))
    }
}

/// Stratified split: each class is shuffled and its last `round(ratio·n_c)`
/// items go to validation. Classes with fewer than two items stay in train.
pub fn split(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<Split> {
    check_ratio(ratio)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut warnings = Vec::new();
    for (class, mut members) in index.by_class().into_iter().enumerate() {
        if members.len() < 2 {
            if !members.is_empty() {
                let msg = format!("class `{}` has fewer than 2 items; all go to train", index.classes[class]);
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            train.extend(members);
            continue;
        }
        fisher_yates(&mut members, &mut rng);
        let n_val = (ratio * members.len() as f64).round() as usize;
        let cut = members.len() - n_val;
        train.extend_from_slice(&members[..cut]);
        val.extend_from_slice(&members[cut..]);
    }
    Ok(Split {
        train,
        val,
        seed,
        ratio,
        warnings,
    })
}

impl Split {
    pub fn write_manifest(&self, index: &DatasetIndex, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut subset = vec![None; index.len()];
        for &i in &self.train {
            subset[i] = Some("train");
        }
        for &i in &self.val {
            subset[i] = Some("val");
        }
        let mut out = format!("#seed={},ratio={}\n", self.seed, self.ratio);
        for (item, s) in index.items.iter().zip(subset) {
            let s = s.ok_or_else(|| Error::Contract(format!("{} is in neither subset", item.path)))?;
            out.push_str(&format!("{},{s}\n", item.path));
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a split from a manifest. Every manifest path must be present in
    /// `index` and every index item must be listed exactly once.
    pub fn read_manifest(index: &DatasetIndex, path: impl AsRef<Path>) -> Result<Split> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, why: String| Error::Validation(format!("{}:{line}: {why}", path.display()));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))?;
        let (seed, ratio) = parse_header(header).ok_or_else(|| bad(1, format!("malformed header `{header}`")))?;

        let lookup: HashMap<&str, usize> = index.items.iter().enumerate().map(|(i, it)| (it.path.as_str(), i)).collect();
        let mut seen = vec![false; index.len()];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (rel, subset) = line.rsplit_once(',').ok_or_else(|| bad(n + 1, "expected `path,subset`".into()))?;
            let &i = lookup
                .get(rel)
                .ok_or_else(|| bad(n + 1, format!("`{rel}` is not in the dataset index")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(bad(n + 1, format!("`{rel}` listed twice")));
            }
            match subset {
                "train" => train.push(i),
                "val" => val.push(i),
                other => return Err(bad(n + 1, format!("unknown subset `{other}`"))),
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "{}: `{}` is missing from the manifest",
                path.display(),
                index.items[missing].path
            )));
        }
        Ok(Split {
            train,
            val,
            seed,
            ratio,
            warnings: Vec::new(),
        })
    }
}

fn parse_header(line: &str) -> Option<(u64, f64)> {
    let rest = line.strip_prefix("#seed=")?;
    let (seed, ratio) = rest.split_once(",ratio=")?;
    let ratio: f64 = ratio.trim().parse().ok()?;
    check_ratio(ratio).ok()?;
    Some((seed.parse().ok()?, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_index(classes: usize, per_class: usize) -> DatasetIndex {
        DatasetIndex {
            root: PathBuf::from("/nonexistent"),
            classes: (0..classes).map(|c| format!("class{c:02}")).collect(),
            items: (0..classes * per_class)
                .map(|i| Item {
                    path: format!("class{:02}/{:05}.png", i / per_class, i % per_class),
                    class: i / per_class,
                })
                .collect(),
            per_class_cap: None,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn full_scale_split_counts() {
        for (classes, per_class, train, val) in [(29, 20, 464, 116), (29, 500, 11_600, 2_900), (29, 3000, 69_600, 17_400)] {
            let index = synthetic_index(classes, per_class);
            let s = split(&index, 0.2, 7).unwrap();
            assert_eq!((s.train.len(), s.val.len()), (train, val));
        }
    }

    #[test]
    fn split_is_seed_deterministic() {
        let index = synthetic_index(5, 30);
        assert_eq!(split(&index, 0.2, 1).unwrap(), split(&index, 0.2, 1).unwrap());
        assert_ne!(split(&index, 0.2, 1).unwrap().val, split(&index, 0.2, 2).unwrap().val);
    }

    #[test]
    fn tiny_classes_stay_in_train() {
        let mut index = synthetic_index(2, 10);
        index.items.retain(|it| it.class == 0 || it.path.ends_with("00000.png"));
        let s = split(&index, 0.2, 3).unwrap();
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.train.len(), 9);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn sample_is_a_seeded_subset() {
        let items: Vec<usize> = (10..30).collect();
        let a = sample(&items, 5, 1);
        assert_eq!(a, sample(&items, 5, 1));
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|i| items.contains(i)));
        assert_eq!(sample(&items, 50, 1).len(), 20);
    }

    #[test]
    fn ratio_bounds() {
        let index = synthetic_index(1, 4);
        assert!(matches!(split(&index, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&index, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn header_parsing() {
        assert_eq!(parse_header("#seed=42,ratio=0.2"), Some((42, 0.2)));
        assert_eq!(parse_header("#seed=42,ratio=1.5"), None);
        assert_eq!(parse_header("seed=42,ratio=0.2"), None);
    }
}
