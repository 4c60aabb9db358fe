use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{permutation, stream, Stream};

/// Shrink every tail class to `ceil(fraction * head)` samples, where `head`
/// is the largest non-tail class count. Head classes are untouched and the
/// original sample order is preserved.
pub fn imbalance_downsample(ds: &LabeledDataset, tail: &[u8], fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let counts = ds.class_counts();
    for t in tail {
        if !counts.contains_key(t) {
            return Err(Error::Contract(format!("tail class {t} is not present")));
        }
    }
    let head = counts
        .iter()
        .filter(|(c, _)| !tail.contains(c))
        .map(|(_, &n)| n)
        .max()
        .ok_or_else(|| Error::Contract("every class is a tail class".into()))?;
    let target = (fraction * head as f64).ceil() as usize;

    let mut keep = vec![true; ds.len()];
    for (k, &t) in tail.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == t).collect();
        if members.len() <= target {
            continue;
        }
        let mut rng = stream(seed, Stream::Data, 1000 + k as u64);
        let perm = permutation(&mut rng, members.len());
        for &p in &perm[target..] {
            keep[members[p]] = false;
        }
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds
        .subset(&idx)
        .with_note(format!("tail classes {tail:?} downsampled to {target} ({fraction} of head {head})")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use diffcore::Tensor;

    fn balanced(per_class: usize, classes: u8) -> LabeledDataset {
        let n = per_class * classes as usize;
        let labels: Vec<u8> = (0..n).map(|i| (i % classes as usize) as u8).collect();
        let images = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        LabeledDataset::new(images, 1, 1, labels, Split::Train).unwrap()
    }

    #[test]
    fn tenth_of_head() {
        let ds = balanced(1000, 3);
        let out = imbalance_downsample(&ds, &[1, 2], 0.1, 5).unwrap();
        let c = out.class_counts();
        assert_eq!((c[&0], c[&1], c[&2]), (1000, 100, 100));
        let head_before: Vec<&[f64]> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).map(|i| ds.image(i)).collect();
        let head_after: Vec<&[f64]> = (0..out.len()).filter(|&i| out.labels[i] == 0).map(|i| out.image(i)).collect();
        assert_eq!(head_before, head_after);
    }

    #[test]
    fn full_fraction_is_identity() {
        let ds = balanced(20, 2);
        let out = imbalance_downsample(&ds, &[1], 1.0, 0).unwrap();
        assert_eq!(out.images, ds.images);
    }

    #[test]
    fn seeds_change_the_subset_not_the_count() {
        let ds = balanced(200, 2);
        let a = imbalance_downsample(&ds, &[1], 0.1, 1).unwrap();
        let b = imbalance_downsample(&ds, &[1], 0.1, 2).unwrap();
        assert_eq!(a.class_counts(), b.class_counts());
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn missing_tail_class() {
        let ds = balanced(10, 2);
        assert!(matches!(imbalance_downsample(&ds, &[5], 0.1, 0), Err(Error::Contract(_))));
    }
}
