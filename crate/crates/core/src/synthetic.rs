//! Seeded synthetic multimodal data with a controllable joint signal.
//!
//! Every sample is one of three kinds, drawn independently:
//!
//! * **joint** (probability `joint_signal`): text carries a cue `t` and the
//!   image a cue `i`, both uniform over three symbols, with
//!   `label = (t + i) mod 3`. Either cue alone says nothing about the label.
//!   Cue tokens are sign-scrambled (`±` the cue direction, balanced across
//!   the sequence), so the sequence mean only keeps a faint `joint_leak`
//!   trace of the cue while individual tokens carry it strongly.
//! * **noise** (probability `label_noise`): features are drawn for a
//!   uniformly resampled label, independent of the recorded one.
//! * **class** (the rest): every token of a modality is shifted along a
//!   class-prototype direction. With probability `single_modality_share`
//!   only one randomly chosen modality carries the prototype.
//!
//! Each modality has its own orthonormal set of base, class and joint
//! directions, so sample kinds are distinguishable from the features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{
    Dataset, FeaturePair, FeatureRef, ImageSource, Label, Language, MemeRecord, SplitTag, NUM_CLASSES,
};
use crate::error::{Error, Result};

/// Amplitude of the class prototype added to each token.
pub const CLASS_AMPLITUDE: f64 = 1.0;
/// Amplitude of the sign-scrambled joint cue on each token.
pub const JOINT_AMPLITUDE: f64 = 2.0;
/// Language mix used for synthetic records (Bengali : code-switched : code-mixed).
pub const LANGUAGE_WEIGHTS: [u32; 3] = [1190, 332, 750];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples_per_class: [usize; NUM_CLASSES],
    pub text_dim: usize,
    pub image_dim: usize,
    pub text_len: usize,
    pub image_len: usize,
    pub joint_signal: f64,
    pub label_noise: f64,
    /// Standard deviation of per-coordinate token noise.
    pub noise_std: f64,
    /// Mean-visible fraction of the joint cue, relative to its token amplitude.
    pub joint_leak: f64,
    /// Tokens per sequence carrying the joint cue, half with each sign;
    /// 0 means every token.
    pub joint_tokens: usize,
    pub single_modality_share: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples_per_class: [200; NUM_CLASSES],
            text_dim: 16,
            image_dim: 16,
            text_len: 8,
            image_len: 8,
            joint_signal: 0.0,
            label_noise: 0.0,
            noise_std: 0.5,
            joint_leak: 0.1,
            joint_tokens: 4,
            single_modality_share: 0.0,
        }
    }
}

/// Directions needed per modality: base, three class, three joint.
const DIRECTIONS: usize = 1 + 2 * NUM_CLASSES;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.samples_per_class.iter().any(|&n| n == 0) {
            return bad("samples_per_class must be positive".into());
        }
        if self.text_dim < DIRECTIONS || self.image_dim < DIRECTIONS {
            return bad(format!("feature dims must be at least {DIRECTIONS}"));
        }
        if self.text_len == 0 || self.image_len == 0 {
            return bad("sequence lengths must be positive".into());
        }
        for (name, v) in [
            ("joint_signal", self.joint_signal),
            ("label_noise", self.label_noise),
            ("single_modality_share", self.single_modality_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0,1]"));
            }
        }
        if self.joint_signal + self.label_noise > 1.0 + 1e-12 {
            return bad("joint_signal + label_noise must not exceed 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !(self.joint_leak >= 0.0) {
            return bad("noise_std and joint_leak must be nonnegative".into());
        }
        Ok(())
    }
}

/// Counts of each sample kind actually generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SyntheticSummary {
    pub joint: usize,
    pub noise: usize,
    pub class: usize,
    pub single_modality: usize,
}

struct Basis {
    base: Vec<f64>,
    class: [Vec<f64>; NUM_CLASSES],
    joint: [Vec<f64>; NUM_CLASSES],
}

fn orthonormal_basis(dim: usize, rng: &mut ChaCha8Rng) -> Basis {
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(DIRECTIONS);
    while vecs.len() < DIRECTIONS {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            vecs.push(v);
        }
    }
    let mut it = vecs.into_iter();
    let base = it.next().unwrap();
    let class = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    let joint = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    Basis { base, class, joint }
}

enum Cue {
    None,
    Class(usize),
    Joint(usize),
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn sequence(
    basis: &Basis,
    len: usize,
    cue: Cue,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    // Balanced signs; an odd cue count leaves one token without the cue.
    let carriers = match spec.joint_tokens {
        0 => len,
        n => n.min(len),
    };
    let mut signs: Vec<f64> = (0..len)
        .map(|j| match j {
            j if j < carriers / 2 => 1.0,
            j if j < 2 * (carriers / 2) => -1.0,
            _ => 0.0,
        })
        .collect();
    if matches!(cue, Cue::Joint(_)) {
        signs.shuffle(rng);
    }
    (0..len)
        .map(|j| {
            let (dir, amp): (Option<&Vec<f64>>, f64) = match cue {
                Cue::None => (None, 0.0),
                Cue::Class(c) => (Some(&basis.class[c]), CLASS_AMPLITUDE),
                Cue::Joint(_) if signs[j] == 0.0 => (None, 0.0),
                Cue::Joint(c) => (
                    Some(&basis.joint[c]),
                    JOINT_AMPLITUDE * (signs[j] + spec.joint_leak),
                ),
            };
            basis
                .base
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    let cue_part = dir.map_or(0.0, |d| amp * d[k]);
                    let eps = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    round6(b + cue_part + eps)
                })
                .collect()
        })
        .collect()
}

fn pick_language(rng: &mut ChaCha8Rng) -> Language {
    let total: u32 = LANGUAGE_WEIGHTS.iter().sum();
    let mut x = rng.random_range(0..total);
    for (lang, &w) in Language::ALL.iter().zip(&LANGUAGE_WEIGHTS) {
        if x < w {
            return *lang;
        }
        x -= w;
    }
    Language::Bengali
}

/// Generates a dataset with inline features. Identical `(spec, seed)` gives
/// identical output.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, SyntheticSummary)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_basis = orthonormal_basis(spec.text_dim, &mut rng);
    let image_basis = orthonormal_basis(spec.image_dim, &mut rng);
    let mut summary = SyntheticSummary::default();

    let mut drafts = Vec::new();
    for label in Label::ALL {
        for _ in 0..spec.samples_per_class[label.index()] {
            let u: f64 = rng.random();
            let (text_cue, image_cue) = if u < spec.joint_signal {
                summary.joint += 1;
                let t = rng.random_range(0..NUM_CLASSES);
                let i = (label.index() + NUM_CLASSES - t) % NUM_CLASSES;
                (Cue::Joint(t), Cue::Joint(i))
            } else {
                let feature_label = if u < spec.joint_signal + spec.label_noise {
                    summary.noise += 1;
                    rng.random_range(0..NUM_CLASSES)
                } else {
                    summary.class += 1;
                    label.index()
                };
                if rng.random::<f64>() < spec.single_modality_share {
                    summary.single_modality += 1;
                    if rng.random::<bool>() {
                        (Cue::Class(feature_label), Cue::None)
                    } else {
                        (Cue::None, Cue::Class(feature_label))
                    }
                } else {
                    (Cue::Class(feature_label), Cue::Class(feature_label))
                }
            };
            let text = sequence(&text_basis, spec.text_len, text_cue, spec, &mut rng);
            let image = sequence(&image_basis, spec.image_len, image_cue, spec, &mut rng);
            let language = pick_language(&mut rng);
            drafts.push((label, language, text, image));
        }
    }
    drafts.shuffle(&mut rng);

    let records = drafts
        .into_iter()
        .enumerate()
        .map(|(n, (label, language, text, image))| MemeRecord {
            id: format!("syn-{n:05}"),
            text: format!("synthetic meme {n}"),
            image_source: ImageSource::Features(FeaturePair {
                text_vec: FeatureRef::Inline(text),
                image_vec: FeatureRef::Inline(image),
            }),
            label,
            language,
        })
        .collect();
    Ok((Dataset::new(records, SplitTag::Unsplit)?, summary))
}
