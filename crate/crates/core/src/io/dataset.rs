//! On-disk dataset layout:
//!
//! ```text
//! DIR/dataset.txt              scans = a,b,...   organs = x,y,...
//! DIR/quadrants.txt            organ = TL,BL,...
//! DIR/scans/<scan>/image.cwpv  float32 [S, H, W] in [0, 1]
//! DIR/scans/<scan>/<organ>.cwpv  uint8 [S, H, W], only for organs present
//! DIR/labels/<scan>/<z>.cwpv   float32 [H, W] superpixel ids
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::volume::{read_volume, write_volume, Volume};
use crate::error::{Error, Result};
use crate::evaluation::{Quadrant, QuadrantMap, ScanVolume};
use crate::superpixel::LabelMap;
use crate::training::{SliceId, TrainingSlice};

pub const DATASET_FILE: &str = "dataset.txt";
pub const QUADRANT_FILE: &str = "quadrants.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    root: PathBuf,
    scans: Vec<String>,
    organs: Vec<String>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl Dataset {
    /// Writes the index file for a new dataset.
    pub fn create(root: &Path, scans: Vec<String>, organs: Vec<String>) -> Result<Self> {
        let text = format!("scans = {}\norgans = {}\n", scans.join(","), organs.join(","));
        super::write_bytes(&root.join(DATASET_FILE), text.as_bytes())?;
        Ok(Dataset {
            root: root.to_path_buf(),
            scans,
            organs,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (mut scans, mut organs) = (None, None);
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("expected key = value, got {line:?}")))?;
            match k.trim() {
                "scans" => scans = Some(split_list(v)),
                "organs" => organs = Some(split_list(v)),
                other => return Err(Error::format(&path, format!("unknown key {other:?}"))),
            }
        }
        let scans = scans
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::format(&path, "no scans listed"))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            scans,
            organs: organs.unwrap_or_default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scans(&self) -> &[String] {
        &self.scans
    }

    pub fn organs(&self) -> &[String] {
        &self.organs
    }

    pub fn image_path(&self, scan: &str) -> PathBuf {
        self.root.join("scans").join(scan).join("image.cwpv")
    }

    pub fn mask_path(&self, scan: &str, organ: &str) -> PathBuf {
        self.root.join("scans").join(scan).join(format!("{organ}.cwpv"))
    }

    pub fn label_path(&self, scan: &str, z: usize) -> PathBuf {
        self.root.join("labels").join(scan).join(format!("{z:03}.cwpv"))
    }

    pub fn quadrant_path(&self) -> PathBuf {
        self.root.join(QUADRANT_FILE)
    }

    pub fn write_scan(&self, scan: &ScanVolume) -> Result<()> {
        let (h, w) = scan.extent()?;
        let mut data = Vec::with_capacity(scan.slices.len() * h * w);
        for s in &scan.slices {
            data.extend_from_slice(s.data());
        }
        let image = crate::numerics::Tensor::new(&[scan.slices.len(), h, w], data)?;
        write_volume(&self.image_path(&scan.scan_id), &Volume::from_tensor(&image))?;
        for (organ, masks) in &scan.organ_masks {
            write_volume(&self.mask_path(&scan.scan_id, organ), &Volume::from_masks(masks)?)?;
        }
        Ok(())
    }

    /// Loads the image volume and every organ mask file that exists.
    pub fn load_scan(&self, scan: &str) -> Result<ScanVolume> {
        let path = self.image_path(scan);
        let image = read_volume(&path)?.to_tensor()?;
        if image.ndim() != 3 {
            return Err(Error::format(
                &path,
                format!("expected [S, H, W], got {:?}", image.shape()),
            ));
        }
        let (s, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let slices = image
            .data()
            .chunks(h * w)
            .map(|c| crate::numerics::Tensor::new(&[1, h, w], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut organ_masks = BTreeMap::new();
        for organ in &self.organs {
            let mp = self.mask_path(scan, organ);
            if !mp.exists() {
                continue;
            }
            let masks = read_volume(&mp)?.to_masks()?;
            if masks.len() != s {
                return Err(Error::format(&mp, format!("{} slices, image has {s}", masks.len())));
            }
            organ_masks.insert(organ.clone(), masks);
        }
        let vol = ScanVolume {
            scan_id: scan.to_string(),
            slices,
            organ_masks,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn write_labels(&self, scan: &str, z: usize, labels: &LabelMap) -> Result<()> {
        write_volume(&self.label_path(scan, z), &Volume::from_labels(labels))
    }

    pub fn read_labels(&self, scan: &str, z: usize) -> Result<LabelMap> {
        let path = self.label_path(scan, z);
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "missing superpixel labels (run pseudo-label)",
                ),
            ));
        }
        read_volume(&path)?
            .to_labels()
            .map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Contiguous folds: `(training scans, held-out scans)`.
    pub fn split(&self, num_folds: usize, fold: usize) -> Result<(Vec<String>, Vec<String>)> {
        let n = self.scans.len();
        if num_folds == 0 || fold >= num_folds || num_folds > n {
            return Err(Error::Config(format!(
                "fold {fold} of {num_folds} is invalid for {n} scans"
            )));
        }
        let (lo, hi) = (fold * n / num_folds, (fold + 1) * n / num_folds);
        let held = self.scans[lo..hi].to_vec();
        let train = self.scans[..lo].iter().chain(&self.scans[hi..]).cloned().collect();
        Ok((train, held))
    }

    /// Training slices of `scans` with their superpixel labels, skipping any
    /// slice whose ground truth contains one of `exclude_organs`.
    pub fn training_pool(&self, scans: &[String], exclude_organs: &[String]) -> Result<Vec<TrainingSlice>> {
        let mut pool = Vec::new();
        for scan in scans {
            let vol = self.load_scan(scan)?;
            for (z, image) in vol.slices.iter().enumerate() {
                let excluded = exclude_organs
                    .iter()
                    .any(|o| vol.organ_masks.get(o).is_some_and(|m| !m[z].is_empty()));
                if excluded {
                    continue;
                }
                pool.push(TrainingSlice {
                    id: SliceId {
                        scan: scan.clone(),
                        index: z,
                    },
                    image: image.clone(),
                    labels: self.read_labels(scan, z)?,
                });
            }
        }
        Ok(pool)
    }
}

/// Parses `organ = TL, BL` lines with `#` comments.
pub fn read_quadrant_map(path: &Path) -> Result<QuadrantMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = QuadrantMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fail = |m: String| Error::Config(format!("{}:{}: {m}", path.display(), n + 1));
        let (organ, list) = line
            .split_once('=')
            .ok_or_else(|| fail("expected organ = quadrants".into()))?;
        let quads = list
            .split(',')
            .map(|q| q.parse::<Quadrant>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| fail(e.to_string()))?;
        map.insert(organ.trim(), quads).map_err(|e| fail(e.to_string()))?;
    }
    Ok(map)
}

pub fn write_quadrant_map(path: &Path, map: &QuadrantMap) -> Result<()> {
    let mut text = String::from("# organ = allowed quadrants (TL, TR, BL, BR)\n");
    for (organ, quads) in map.organs() {
        let list: Vec<&str> = quads.iter().map(|q| q.code()).collect();
        text.push_str(&format!("{organ} = {}\n", list.join(", ")));
    }
    super::write_bytes(path, text.as_bytes())
}
