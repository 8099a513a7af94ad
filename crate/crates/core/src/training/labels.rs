use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::NoduleSample;
use crate::error::{Error, Result};

/// Marks exactly `round(fraction * n)` samples as attribute-labeled (`b = 0`)
/// and the rest as unlabeled. Returns the labeled count.
pub fn assign_label_fraction(samples: &mut [NoduleSample], fraction: f64, seed: u64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("label fraction {fraction} outside [0,1]")));
    }
    let k = (fraction * samples.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        samples[i].labels.b = u8::from(rank >= k);
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn labeled_ids(s: &[NoduleSample]) -> Vec<&str> {
        s.iter().filter(|s| s.has_attr_labels()).map(NoduleSample::id).collect()
    }

    #[test]
    fn counts_and_determinism() {
        let mut a = synth_generate(100, 0);
        let mut b = a.clone();
        assert_eq!(assign_label_fraction(&mut a, 0.1, 7).unwrap(), 10);
        assign_label_fraction(&mut b, 0.1, 7).unwrap();
        assert_eq!(labeled_ids(&a).len(), 10);
        assert_eq!(labeled_ids(&a), labeled_ids(&b));
        assign_label_fraction(&mut a, 1.0, 7).unwrap();
        assert_eq!(labeled_ids(&a).len(), 100);
        assign_label_fraction(&mut a, 0.0, 7).unwrap();
        assert!(labeled_ids(&a).is_empty());
        assert!(assign_label_fraction(&mut a, -0.5, 7).is_err());
    }
}
