//! Distance-tolerant scoring of a perturbed ground truth, with a confusion
//! map exported as colour slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rootseg::metrics::{confusion_map, distance_tolerant_prf, Category};
use rootseg::synth::{generate_sample, DatasetConfig, Split};
use rootseg::{Axis, Volume};

fn main() -> rootseg::Result<()> {
    let gen = DatasetConfig { volume_size: 32, ..DatasetConfig::default() };
    let (sample, _) = generate_sample(&gen, Split::Train, 0)?;
    let gt = sample.target.to_mask();
    let d = sample.target.spatial();

    // Shift every root voxel by one step along a random axis and drop a few.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pred = vec![false; gt.len()];
    let strides = [d[1] * d[2], d[2], 1];
    for i in (0..gt.len()).filter(|&i| gt[i]) {
        let j = i + strides[rng.random_range(0..3)];
        if j < pred.len() && rng.random::<f64>() > 0.05 {
            pred[j] = true;
        }
    }
    let pred = Volume::from_mask(sample.target.dims(), &pred)?;
    let report = distance_tolerant_prf(&pred, &sample.target, &[0.0, 1.0, 2.0, 3.0], Some(&sample.dontcare))?;
    print!("{}", report.to_csv());

    let map = confusion_map(&pred, &sample.target, 1.0, Some(&sample.dontcare))?;
    println!(
        "tolerance 1: {} TP, {} FP, {} FN",
        map.count(Category::TruePositive),
        map.count(Category::FalsePositive),
        map.count(Category::FalseNegative)
    );
    let dir = std::env::temp_dir().join("rootseg-confusion");
    let files = map.export_slices(Axis::D, &dir)?;
    println!("{} slices in {}", files.len(), dir.display());
    Ok(())
}
