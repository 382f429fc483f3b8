//! Materialized noisy corpora. Stored pixels are 8-bit, so the degraded
//! image and depth are quantized exactly as writing them would.

use crate::degrade::{degrade_corpus, DegradationSpec, ManifestEntry};
use crate::error::{Error, Result};
use crate::sample::{quantize8, Sample};

fn quantized(mut s: Sample) -> Sample {
    s.image = quantize8(&s.image);
    s.depth = s.depth.as_ref().map(quantize8);
    s
}

/// Degrades every clean sample under `seed` and returns the storable noisy
/// corpus with its manifest.
pub fn materialize_noisy(
    spec: &DegradationSpec,
    clean: &[Sample],
    seed: u64,
) -> Result<(Vec<Sample>, Vec<ManifestEntry>)> {
    Ok(degrade_corpus(spec, clean, seed)?
        .into_iter()
        .map(|(s, e)| (quantized(s), e))
        .unzip())
}

/// Rebuilds a noisy corpus from its clean source and manifest.
pub fn replay_corpus(clean: &[Sample], manifest: &[ManifestEntry]) -> Result<Vec<Sample>> {
    if clean.len() != manifest.len() {
        return Err(Error::data(format!(
            "{} clean samples but {} manifest entries",
            clean.len(),
            manifest.len()
        )));
    }
    clean
        .iter()
        .zip(manifest)
        .map(|(s, e)| e.replay(s).map(quantized))
        .collect()
}

/// Checks that the manifest is what `spec` draws and that replaying it
/// reproduces `noisy` exactly. Returns the ids that differ.
pub fn verify_replay(
    spec: &DegradationSpec,
    clean: &[Sample],
    noisy: &[Sample],
    manifest: &[ManifestEntry],
) -> Result<Vec<String>> {
    let replayed = replay_corpus(clean, manifest)?;
    if replayed.len() != noisy.len() {
        return Err(Error::data("noisy corpus and manifest differ in length"));
    }
    let mut bad = Vec::new();
    for ((r, n), e) in replayed.iter().zip(noisy).zip(manifest) {
        if r != n || !e.matches_spec(spec, n.height(), n.width())? {
            bad.push(n.id.clone());
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::io::{load_dataset, load_manifest, save_dataset};
    use crate::harness::synth::synth_dataset;

    #[test]
    fn stored_corpus_replays() {
        let spec = DegradationSpec::default();
        let clean = synth_dataset(6, 32, 3).unwrap();
        let (noisy, manifest) = materialize_noisy(&spec, &clean, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &noisy, Some(&manifest)).unwrap();
        let noisy2 = load_dataset(dir.path()).unwrap();
        let manifest2 = load_manifest(dir.path()).unwrap();
        assert_eq!(noisy2, noisy);
        assert!(verify_replay(&spec, &clean, &noisy2, &manifest2).unwrap().is_empty());

        let mut tampered = noisy2.clone();
        tampered[2].image.data_mut()[0] = 1.0 - tampered[2].image.data()[0];
        assert_eq!(
            verify_replay(&spec, &clean, &tampered, &manifest2).unwrap(),
            vec![tampered[2].id.clone()]
        );
    }
}
