//! Datasets of image groups: on-disk layout, procedural generation,
//! augmentation and multi-group batching.
//!
//! The on-disk layout is `root/<group>/<stem>.{png,jpg}` for images and
//! `gt_root/<group>/<stem>.png` for 8-bit grayscale ground truth.

pub mod augment;
pub mod io;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{contract_err, io_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use synth::{synth_generate, SynthConfig};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One semantic class: images `3 x H x W` in `[0, 1]` and binary masks
/// `1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub class_id: String,
    pub images: Vec<Tensor<f32>>,
    pub gts: Vec<Tensor<f32>>,
    pub stems: Vec<String>,
    /// Size of each image as stored on disk, `(h, w)`.
    pub orig_sizes: Vec<(usize, usize)>,
}

impl ImageGroup {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Lists `root/<group>/<stem>.<ext>` sorted by group then stem.
pub fn list_layout(root: &Path) -> Result<BTreeMap<String, Vec<(String, PathBuf)>>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(root).map_err(io_err(root))?;
    for entry in entries {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let group = entry.file_name().to_string_lossy().into_owned();
        let mut stems = Vec::new();
        for file in std::fs::read_dir(&path).map_err(io_err(&path))? {
            let file = file.map_err(io_err(&path))?.path();
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            stems.push((stem, file));
        }
        stems.sort();
        out.insert(group, stems);
    }
    Ok(out)
}

fn resize_chw(data: &[f32], channels: usize, h: usize, w: usize, size: usize) -> Vec<f32> {
    if (h, w) == (size, size) {
        return data.to_vec();
    }
    kernels::resize_forward(data, channels, h, w, size, size)
}

/// Loads every group under `root`, pairing each image with
/// `gt_root/<group>/<stem>.png`. With `size`, images are bilinearly resized
/// to `size x size` and masks are resized then re-binarized at 0.5.
pub fn load_dataset(root: &Path, gt_root: &Path, size: Option<usize>) -> Result<Vec<ImageGroup>> {
    let listing = list_layout(root)?;
    let mut groups = Vec::with_capacity(listing.len());
    for (class_id, stems) in listing {
        if stems.is_empty() {
            return Err(Error::Load(format!("group {class_id:?} contains no images")));
        }
        let mut group = ImageGroup {
            class_id: class_id.clone(),
            images: Vec::new(),
            gts: Vec::new(),
            stems: Vec::new(),
            orig_sizes: Vec::new(),
        };
        for (stem, path) in stems {
            let gt_path = gt_root.join(&class_id).join(format!("{stem}.png"));
            if !gt_path.is_file() {
                return Err(Error::Load(format!(
                    "no ground truth for image {class_id}/{stem} (expected {})",
                    gt_path.display()
                )));
            }
            let (h, w, rgb) = io::load_rgb(&path)?;
            let mask = io::load_mask(&gt_path)?;
            if (mask.height(), mask.width()) != (h, w) {
                return Err(Error::Load(format!(
                    "ground truth for {class_id}/{stem} is {}x{}, image is {h}x{w}",
                    mask.height(),
                    mask.width()
                )));
            }
            let mask_f32: Vec<f32> = mask.values().iter().map(|&v| v as f32).collect();
            let (th, tw) = size.map_or((h, w), |s| (s, s));
            let img = match size {
                Some(s) => resize_chw(&rgb, 3, h, w, s),
                None => rgb,
            };
            let gt: Vec<f32> = match size {
                Some(s) => resize_chw(&mask_f32, 1, h, w, s)
                    .into_iter()
                    .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
                    .collect(),
                None => mask_f32,
            };
            group.images.push(Tensor::new(&[3, th, tw], img)?);
            group.gts.push(Tensor::new(&[1, th, tw], gt)?);
            group.stems.push(stem);
            group.orig_sizes.push((h, w));
        }
        groups.push(group);
    }
    Ok(groups)
}

/// Loads images only (no ground truth), for inference. The returned groups
/// have empty `gts`.
pub fn load_images(root: &Path, size: Option<usize>) -> Result<Vec<ImageGroup>> {
    let listing = list_layout(root)?;
    let mut groups = Vec::with_capacity(listing.len());
    for (class_id, stems) in listing {
        if stems.is_empty() {
            return Err(Error::Load(format!("group {class_id:?} contains no images")));
        }
        let mut group = ImageGroup {
            class_id,
            images: Vec::new(),
            gts: Vec::new(),
            stems: Vec::new(),
            orig_sizes: Vec::new(),
        };
        for (stem, path) in stems {
            let (h, w, rgb) = io::load_rgb(&path)?;
            let (th, tw) = size.map_or((h, w), |s| (s, s));
            let img = match size {
                Some(s) => resize_chw(&rgb, 3, h, w, s),
                None => rgb,
            };
            group.images.push(Tensor::new(&[3, th, tw], img)?);
            group.stems.push(stem);
            group.orig_sizes.push((h, w));
        }
        groups.push(group);
    }
    Ok(groups)
}

/// Largest even number not above `x`.
pub fn even_floor(x: usize) -> usize {
    x - x % 2
}

/// Per-group batch size for the given group sizes: the smallest group size
/// and `cap`, rounded down to even.
pub fn per_group_size(sizes: &[usize], cap: usize) -> usize {
    even_floor(sizes.iter().copied().chain([cap]).min().unwrap_or(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchMember {
    pub group: usize,
    pub class_id: String,
    /// Indices into the group's images, sampled without replacement.
    pub indices: Vec<usize>,
}

/// `N` groups with `per_group` images each, in concatenation order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    pub per_group: usize,
    pub members: Vec<BatchMember>,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.per_group * self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.class_id.clone()).collect()
    }

    /// Stacks the selected images and masks into `B x 3 x H x W` and
    /// `B x 1 x H x W`, optionally augmenting each pair.
    pub fn assemble(
        &self,
        groups: &[ImageGroup],
        augment_cfg: Option<&AugmentConfig>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut images = Vec::with_capacity(self.len());
        let mut gts = Vec::with_capacity(self.len());
        for m in &self.members {
            let g = &groups[m.group];
            for &i in &m.indices {
                let (img, gt) = match augment_cfg {
                    Some(cfg) => augment(&g.images[i], &g.gts[i], cfg, rng.gen())?,
                    None => (g.images[i].clone(), g.gts[i].clone()),
                };
                images.push(img);
                gts.push(gt);
            }
        }
        Ok((Tensor::stack(&images)?, Tensor::stack(&gts)?))
    }
}

/// Samples `n` distinct classes uniformly and `S` images from each without
/// replacement, where `S` is [`per_group_size`] of the chosen groups.
pub fn make_batch(groups: &[ImageGroup], n: usize, cap: usize, rng: &mut impl Rng) -> Result<GroupBatch> {
    if n == 0 {
        return Err(contract_err!("make_batch: need at least one group per batch"));
    }
    if groups.len() < n {
        return Err(contract_err!(
            "make_batch: {n} groups per batch requested but only {} classes available",
            groups.len()
        ));
    }
    if let Some(g) = groups.iter().find(|g| g.is_empty()) {
        return Err(contract_err!("make_batch: group {:?} is empty", g.class_id));
    }
    let chosen = index::sample(rng, groups.len(), n).into_vec();
    let sizes: Vec<usize> = chosen.iter().map(|&i| groups[i].len()).collect();
    let per_group = per_group_size(&sizes, cap);
    if per_group == 0 {
        return Err(contract_err!(
            "make_batch: group sizes {:?} leave no even per-group batch",
            sizes
        ));
    }
    let members = chosen
        .into_iter()
        .map(|gi| BatchMember {
            group: gi,
            class_id: groups[gi].class_id.clone(),
            indices: index::sample(rng, groups[gi].len(), per_group).into_vec(),
        })
        .collect();
    Ok(GroupBatch { per_group, members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_group(name: &str, n: usize) -> ImageGroup {
        ImageGroup {
            class_id: name.into(),
            images: vec![Tensor::zeros(&[3, 2, 2]); n],
            gts: vec![Tensor::ones(&[1, 2, 2]); n],
            stems: (0..n).map(|i| format!("{i}")).collect(),
            orig_sizes: vec![(2, 2); n],
        }
    }

    #[test]
    fn batch_size_rule() {
        assert_eq!(per_group_size(&[10, 60], 48), 10);
        assert_eq!(per_group_size(&[60, 60], 48), 48);
        assert_eq!(per_group_size(&[7, 9], 48), 6);
    }

    #[test]
    fn make_batch_samples_distinct_classes() {
        let groups = vec![fake_group("a", 7), fake_group("b", 9), fake_group("c", 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let b = make_batch(&groups, 2, 48, &mut rng).unwrap();
            assert_eq!(b.members.len(), 2);
            assert_ne!(b.members[0].group, b.members[1].group);
            assert_eq!(b.per_group % 2, 0);
        }
        assert!(make_batch(&groups, 4, 48, &mut rng).is_err());
    }

    #[test]
    fn assemble_stacks_in_order() {
        let groups = vec![fake_group("a", 4), fake_group("b", 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_batch(&groups, 2, 2, &mut rng).unwrap();
        let (imgs, gts) = b.assemble(&groups, None, &mut rng).unwrap();
        assert_eq!(imgs.shape(), &[4, 3, 2, 2]);
        assert_eq!(gts.shape(), &[4, 1, 2, 2]);
    }
}
