use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};

/// Disjoint index sets into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub meta: Vec<usize>,
}

/// Holds out `round(fraction * N)` instances as the meta-validation set,
/// guaranteeing at least one instance of every class in it.
///
/// Rarest classes are covered first, each by its first instance in a seeded
/// shuffle; remaining slots are filled in shuffle order.
pub fn split_meta_validation(ds: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("meta fraction {fraction} must lie in (0, 1)")));
    }
    let n = ds.len();
    let counts = ds.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::Stratification { class, count });
    }
    let target = (fraction * n as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut classes: Vec<usize> = (0..ds.num_classes()).collect();
    classes.sort_by_key(|&c| (counts[c], c));

    let mut in_meta = vec![false; n];
    let mut covered = vec![false; ds.num_classes()];
    let mut meta = Vec::with_capacity(target);
    for &c in &classes {
        if covered[c] {
            continue;
        }
        let pick = order
            .iter()
            .copied()
            .find(|&i| !in_meta[i] && ds.labels.get(i, c) > 0.5)
            .expect("class has instances");
        in_meta[pick] = true;
        meta.push(pick);
        for k in ds.label_set(pick) {
            covered[k] = true;
        }
    }
    if meta.len() > target {
        return Err(Error::Argument(format!(
            "meta set of {target} instances cannot cover all {} classes",
            ds.num_classes()
        )));
    }
    for &i in &order {
        if meta.len() == target {
            break;
        }
        if !in_meta[i] {
            in_meta[i] = true;
            meta.push(i);
        }
    }
    meta.sort_unstable();
    let train = (0..n).filter(|&i| !in_meta[i]).collect();
    Ok(Split { train, meta })
}

/// Holds out whole scenes for testing: `round(fraction * scenes)` of them,
/// chosen by a seeded shuffle. Returns `(pool, test)` instance indices.
pub fn split_test_scenes(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Argument(format!("test fraction {fraction} must lie in [0, 1)")));
    }
    let mut scenes = ds.scenes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let n_test = (fraction * scenes.len() as f64).round() as usize;
    let mut test: Vec<usize> = scenes[..n_test].iter().flat_map(|s| s.1.iter().copied()).collect();
    let mut pool: Vec<usize> = scenes[n_test..].iter().flat_map(|s| s.1.iter().copied()).collect();
    test.sort_unstable();
    pool.sort_unstable();
    Ok((pool, test))
}

/// Maximum number of uniform draws before falling back to the full meta set.
pub const META_RESAMPLE_ATTEMPTS: usize = 10;

/// Draws `size` meta instances uniformly without replacement until every
/// class is present, up to [`META_RESAMPLE_ATTEMPTS`] times; otherwise
/// returns the full meta set.
pub fn sample_meta_batch(ds: &Dataset, meta: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if size >= meta.len() {
        return meta.to_vec();
    }
    let c = ds.num_classes();
    for _ in 0..META_RESAMPLE_ATTEMPTS {
        let mut pick: Vec<usize> = meta.choose_multiple(rng, size).copied().collect();
        let mut seen = vec![false; c];
        for &i in &pick {
            for k in ds.label_set(i) {
                seen[k] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            pick.sort_unstable();
            return pick;
        }
    }
    meta.to_vec()
}
