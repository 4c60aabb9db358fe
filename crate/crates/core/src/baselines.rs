//! Classical defenses: pixelation, Gaussian blur and k-anonymity by
//! clustering.

use serde::{Deserialize, Serialize};

use crate::data::manifest::{ManifestRecord, PublishedDataset};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::netkit::{kmeans, sq_dist};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pixelate,
    Blur,
    KAnonymize,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixelate" => Ok(Method::Pixelate),
            "blur" => Ok(Method::Blur),
            "k-anonymize" => Ok(Method::KAnonymize),
            _ => Err(Error::Config(format!("unknown baseline {s:?} (pixelate, blur, k-anonymize)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub block: usize,
    pub radius: f64,
    pub k: usize,
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            block: 3,
            radius: 1.5,
            k: 10,
            clusters: 1000,
            kmeans_iters: 50,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.k == 0 || self.clusters == 0 || !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("baseline needs block >= 1, radius > 0, k >= 1, clusters >= 1".into()));
        }
        Ok(())
    }
}

/// Replace every `block x block` tile by its mean; edge tiles average over
/// the pixels they actually cover.
pub fn pixelate(img: &[f64], height: usize, width: usize, block: usize) -> Vec<f64> {
    assert_eq!(img.len(), height * width, "pixelate: image is not {height}x{width}");
    let block = block.max(1);
    let mut out = vec![0.0; img.len()];
    for by in (0..height).step_by(block) {
        for bx in (0..width).step_by(block) {
            let (ye, xe) = ((by + block).min(height), (bx + block).min(width));
            let mut sum = 0.0;
            for y in by..ye {
                for x in bx..xe {
                    sum += img[y * width + x];
                }
            }
            let mean = sum / ((ye - by) * (xe - bx)) as f64;
            for y in by..ye {
                for x in bx..xe {
                    out[y * width + x] = mean;
                }
            }
        }
    }
    out
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 * std)`.
pub fn gaussian_kernel(std: f64) -> Vec<f64> {
    let r = (3.0 * std).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

fn convolve_axis(img: &[f64], height: usize, width: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let off = t as i64 - r;
                let (sy, sx) = if along_rows {
                    (y, reflect(x as i64 + off, width))
                } else {
                    (reflect(y as i64 + off, height), x)
                };
                acc += w * img[sy * width + sx];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with std `radius` and reflective borders.
pub fn gaussian_blur(img: &[f64], height: usize, width: usize, radius: f64) -> Vec<f64> {
    assert_eq!(img.len(), height * width, "gaussian_blur: image is not {height}x{width}");
    let k = gaussian_kernel(radius);
    let rows = convolve_axis(img, height, width, &k, true);
    convolve_axis(&rows, height, width, &k, false)
}

fn per_image(ds: &LabeledDataset, f: impl Fn(&[f64]) -> Vec<f64>, note: String) -> Result<PublishedDataset> {
    let data: Vec<f64> = (0..ds.len()).flat_map(|i| f(ds.image(i))).map(|v| v.clamp(0.0, 1.0)).collect();
    let images = diffcore::Tensor::new(vec![ds.len(), ds.pixels()], data)?;
    let mut out = LabeledDataset::new(images, ds.height, ds.width, ds.labels.clone(), ds.split)?;
    out.notes = ds.notes.clone();
    out.notes.push(note);
    let records = (0..ds.len()).map(|i| ManifestRecord::plain(i, ds.labels[i], i)).collect();
    Ok(PublishedDataset {
        notes: out.notes.clone(),
        dataset: out,
        records,
    })
}

/// Cluster with k-means; clusters of at least `k` members are replaced by
/// their member nearest the center (image and label), smaller clusters are
/// dropped.
pub fn k_anonymize(ds: &LabeledDataset, k: usize, clusters: usize, iters: usize, seed: u64) -> Result<PublishedDataset> {
    if ds.len() < clusters {
        return Err(Error::Contract(format!("{} samples cannot form {clusters} clusters", ds.len())));
    }
    let mut rng = stream(seed, Stream::Baseline, 0);
    let km = kmeans(&ds.images, clusters, iters, &mut rng)?;
    let sizes = km.cluster_sizes();
    let mut rep = vec![None; clusters];
    for (i, &c) in km.assignments.iter().enumerate() {
        let d = sq_dist(ds.image(i), km.centers.row(c));
        match rep[c] {
            Some((_, best)) if best <= d => {}
            _ => rep[c] = Some((i, d)),
        }
    }
    // (original sample, representative standing in for it)
    let mut kept = Vec::new();
    let mut suppressed = 0;
    for (j, &c) in km.assignments.iter().enumerate() {
        if sizes[c] >= k {
            kept.push((j, rep[c].expect("non-empty cluster").0));
        } else {
            suppressed += 1;
        }
    }
    let dropped = sizes.iter().filter(|&&s| s > 0 && s < k).count();
    let mut out = ds.subset(&kept.iter().map(|&(_, r)| r).collect::<Vec<_>>());
    out.notes.push(format!(
        "k-anonymized: k = {k}, {clusters} clusters, {dropped} clusters ({suppressed} samples) suppressed"
    ));
    let records = kept
        .iter()
        .enumerate()
        .map(|(i, &(j, r))| ManifestRecord {
            representative: Some(r),
            ..ManifestRecord::plain(i, ds.labels[r], j)
        })
        .collect();
    Ok(PublishedDataset {
        notes: out.notes.clone(),
        dataset: out,
        records,
    })
}

pub fn run_baseline(method: Method, ds: &LabeledDataset, cfg: &BaselineConfig) -> Result<PublishedDataset> {
    cfg.validate()?;
    let (h, w) = (ds.height, ds.width);
    match method {
        Method::Pixelate => per_image(ds, |img| pixelate(img, h, w, cfg.block), format!("pixelated, block {}", cfg.block)),
        Method::Blur => per_image(ds, |img| gaussian_blur(img, h, w, cfg.radius), format!("blurred, std {}", cfg.radius)),
        Method::KAnonymize => k_anonymize(ds, cfg.k, cfg.clusters, cfg.kmeans_iters, cfg.seed),
    }
}
