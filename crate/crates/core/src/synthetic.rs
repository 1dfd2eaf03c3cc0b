//! Seeded synthetic fixtures for desk-scale runs.
//!
//! Sentences describe a scene (subject, action, place) drawn from small
//! vocabularies. The reference model reads bytes and has no notion of
//! synonyms, so a positive is a surface rewrite of its anchor that keeps the
//! content words (another determiner, an inserted adverb), and a hard
//! negative describes a scene sharing no content word. The STS fixture grades
//! pairs by how many scene slots they share.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{LabeledExample, NliTriplet, ScoredSentencePair};

const SUBJECTS: &[&str] = &[
    "dog", "cat", "man", "woman", "child", "bird", "chef", "pilot", "farmer", "doctor",
];
const ACTIONS: &[&str] = &[
    "runs", "sleeps", "eats", "sings", "swims", "reads", "cooks", "plays", "waits", "dances",
];
const PLACES: &[&str] = &[
    "park", "kitchen", "river", "library", "beach", "garden", "street", "forest", "stadium", "market",
];
const DETERMINERS: &[&str] = &["the", "one", "our", "any"];

/// How many scene slots a hard negative shares with its anchor.
const NEGATIVE_OVERLAP: std::ops::RangeInclusive<usize> = 1..=2;

/// Index of the action that marks the positive class in [`labeled_examples`].
const WATER_ACTION: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Scene {
    subject: usize,
    action: usize,
    place: usize,
}

fn render(scene: Scene, rng: &mut ChaCha8Rng) -> String {
    let det = DETERMINERS.choose(rng).copied().unwrap_or("the");
    let (subject, action, place) = (
        SUBJECTS[scene.subject],
        ACTIONS[scene.action],
        PLACES[scene.place],
    );
    if rng.gen_bool(0.5) {
        capitalize(&format!("{det} {subject} {action} in the {place}."))
    } else {
        format!("In the {place}, {det} {subject} {action}.")
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => format!("{}{}", c.to_ascii_uppercase(), chars.as_str()),
        None => String::new(),
    }
}

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    Scene {
        subject: rng.gen_range(0..SUBJECTS.len()),
        action: rng.gen_range(0..ACTIONS.len()),
        place: rng.gen_range(0..PLACES.len()),
    }
}

/// Scene sharing no slot with `scene`.
fn disjoint_scene(scene: Scene, rng: &mut ChaCha8Rng) -> Scene {
    loop {
        let other = random_scene(rng);
        if other.subject != scene.subject && other.action != scene.action && other.place != scene.place {
            return other;
        }
    }
}

/// Scene sharing exactly `shared` randomly chosen slots with `scene`.
fn overlapping_scene(scene: Scene, shared: usize, rng: &mut ChaCha8Rng) -> Scene {
    let mut other = disjoint_scene(scene, rng);
    let mut slots = [0usize, 1, 2];
    slots.shuffle(rng);
    for &slot in &slots[..shared] {
        match slot {
            0 => other.subject = scene.subject,
            1 => other.action = scene.action,
            _ => other.place = scene.place,
        }
    }
    other
}

/// NLI-style triplets: anchor, rewritten positive, unrelated hard negative.
pub fn nli_triplets(n: usize, seed: u64) -> Vec<NliTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let scene = random_scene(&mut rng);
            let anchor = render(scene, &mut rng);
            let positive = render(scene, &mut rng);
            let shared = rng.gen_range(NEGATIVE_OVERLAP);
            let negative = render(overlapping_scene(scene, shared, &mut rng), &mut rng);
            NliTriplet::new(&anchor, &positive, &negative)
        })
        .collect()
}

/// Scored pairs with gold = 5 × (shared scene slots / 3), lightly jittered.
pub fn sts_pairs(n: usize, seed: u64) -> Vec<ScoredSentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a = random_scene(&mut rng);
            let shared = i % 4;
            let b = overlapping_scene(a, shared, &mut rng);
            let jitter = rng.gen_range(0.0..0.4);
            let gold = (5.0 * shared as f64 / 3.0 - jitter).clamp(0.0, 5.0);
            let left = render(a, &mut rng);
            let right = render(b, &mut rng);
            ScoredSentencePair::new(&left, &right, gold)
        })
        .collect()
}

/// Balanced two-class examples: label 1 iff the scene's action is swimming.
pub fn labeled_examples(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut scene = random_scene(&mut rng);
            let label = i % 2;
            if label == 1 {
                scene.action = WATER_ACTION;
            } else if scene.action == WATER_ACTION {
                scene.action = (WATER_ACTION + 1 + rng.gen_range(0..ACTIONS.len() - 1)) % ACTIONS.len();
            }
            LabeledExample {
                text: render(scene, &mut rng),
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{validate_dataset, validate_triplets};

    #[test]
    fn fixtures_are_valid_and_seeded() {
        let t = nli_triplets(50, 1);
        validate_triplets(&t).unwrap();
        assert_eq!(t, nli_triplets(50, 1));
        assert_ne!(t, nli_triplets(50, 2));
        let p = sts_pairs(40, 3);
        let ds = validate_dataset(p).unwrap();
        assert!(ds.gold_scores().iter().any(|g| *g > 4.0));
        assert!(ds.gold_scores().iter().any(|g| *g < 1.0));
    }

    #[test]
    fn labeled_examples_are_balanced_and_consistent() {
        let l = labeled_examples(40, 0);
        assert_eq!(l.iter().filter(|e| e.label == 1).count(), 20);
        for e in &l {
            assert_eq!(e.text.contains(" swims"), e.label == 1, "{}", e.text);
        }
    }
}
