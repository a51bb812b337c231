use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::seed::rng_for;

use super::{AnnotatorProfile, DataError, Dataset, Sample};

const WINDOW_CONCENTRATION: f64 = 8.0;
const BACKGROUND_CONCENTRATION: f64 = 0.2;
const BIAS_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GeneratorConfig {
    pub num_samples: usize,
    pub num_annotators: usize,
    pub num_classes: usize,
    pub num_tokens: usize,
    pub raw_dim: usize,
    /// Partition of annotator indices; members of a group share a focus vector.
    pub correlation_groups: Vec<Vec<usize>>,
    pub noise_rate: f64,
    /// Scale of the per-annotator perturbation added to the group's decision
    /// rule. Zero makes group members label identically before noise.
    pub decision_jitter: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_annotators: 5,
            num_classes: 4,
            num_tokens: 8,
            raw_dim: 4,
            correlation_groups: vec![vec![0, 1, 2], vec![3, 4]],
            noise_rate: 0.1,
            decision_jitter: 0.2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.num_classes < 2 {
            return err(format!("numClasses must be at least 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("numSamples", self.num_samples),
            ("numAnnotators", self.num_annotators),
            ("numTokens", self.num_tokens),
            ("rawDim", self.raw_dim),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return err(format!("noiseRate must lie in [0, 1), got {}", self.noise_rate));
        }
        if !(self.decision_jitter >= 0.0 && self.decision_jitter.is_finite()) {
            return err(format!("decisionJitter must be a finite non-negative value, got {}", self.decision_jitter));
        }
        let mut seen = vec![false; self.num_annotators];
        for group in &self.correlation_groups {
            if group.is_empty() {
                return err("correlation groups must be non-empty".into());
            }
            for &k in group {
                if k >= self.num_annotators {
                    return err(format!("correlation group names annotator {k} but there are {}", self.num_annotators));
                }
                if seen[k] {
                    return err(format!("annotator {k} appears in more than one correlation group"));
                }
                seen[k] = true;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return err(format!("annotator {k} is not in any correlation group"));
        }
        Ok(())
    }
}

/// Clean label of `profile` for one sample: arg-max over classes of
/// `W · (Σ_t focus[t] · x_t) + bias`, ties to the smallest class.
pub fn label_from_profile(profile: &AnnotatorProfile, raw_tokens: &Matrix) -> usize {
    let raw_dim = raw_tokens.cols();
    let mut pooled = vec![0.0; raw_dim];
    for (t, &w) in profile.focus.iter().enumerate() {
        for (p, x) in pooled.iter_mut().zip(raw_tokens.row(t)) {
            *p += w * x;
        }
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..profile.decision_weights.rows() {
        let score: f64 = profile.decision_weights.row(c).iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
            + profile.bias_shift[c];
        if score > best_score {
            best = c;
            best_score = score;
        }
    }
    best
}

/// Token window `[start, end)` favoured by correlation group `g` of `groups`.
fn group_window(g: usize, groups: usize, tokens: usize) -> (usize, usize) {
    if groups <= tokens {
        (g * tokens / groups, (g + 1) * tokens / groups)
    } else {
        let start = g % tokens;
        (start, start + 1)
    }
}

/// Samples a dataset whose annotators follow planted profiles. Group members
/// share a Dirichlet focus concentrated on the group's token window and a
/// base decision rule; each member perturbs the rule by `decision_jitter`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let (n, c, t, raw) = (cfg.num_annotators, cfg.num_classes, cfg.num_tokens, cfg.raw_dim);
    let mut prof_rng = rng_for(cfg.seed, "profiles");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut profiles: Vec<Option<AnnotatorProfile>> = vec![None; n];
    let groups = cfg.correlation_groups.len();
    for (g, members) in cfg.correlation_groups.iter().enumerate() {
        let (start, end) = group_window(g, groups, t);
        let focus = if t == 1 {
            vec![1.0]
        } else {
            let alpha: Vec<f64> = (0..t)
                .map(|i| if (start..end).contains(&i) { WINDOW_CONCENTRATION } else { BACKGROUND_CONCENTRATION })
                .collect();
            let draw = Dirichlet::new(&alpha).expect("positive concentrations").sample(&mut prof_rng);
            let total: f64 = draw.iter().sum();
            draw.into_iter().map(|w| w / total).collect()
        };
        let base_w = Matrix::gaussian(c, raw, 1.0, &mut prof_rng);
        let base_b: Vec<f64> = (0..c).map(|_| BIAS_STD * std_normal.sample(&mut prof_rng)).collect();
        for &k in members {
            let mut w = base_w.clone();
            let mut b = base_b.clone();
            if cfg.decision_jitter > 0.0 {
                w = w.add(&Matrix::gaussian(c, raw, cfg.decision_jitter, &mut prof_rng)).expect("same shape");
                for v in b.iter_mut() {
                    *v += cfg.decision_jitter * BIAS_STD * std_normal.sample(&mut prof_rng);
                }
            }
            profiles[k] = Some(AnnotatorProfile {
                focus: focus.clone(),
                decision_weights: w,
                bias_shift: b,
                noise_rate: cfg.noise_rate,
            });
        }
    }
    let profiles: Vec<AnnotatorProfile> = profiles.into_iter().map(|p| p.expect("partition covers all")).collect();

    let mut token_rng = rng_for(cfg.seed, "tokens");
    let mut noise_rng = rng_for(cfg.seed, "noise");
    let samples = (0..cfg.num_samples)
        .map(|_| {
            let raw_tokens = Matrix::gaussian(t, raw, 1.0, &mut token_rng);
            let labels = profiles
                .iter()
                .map(|p| {
                    let clean = label_from_profile(p, &raw_tokens);
                    Some(corrupt(clean, c, p.noise_rate, &mut noise_rng))
                })
                .collect();
            Sample { raw_tokens, labels }
        })
        .collect();

    Ok(Dataset { num_annotators: n, num_classes: c, num_tokens: t, raw_dim: raw, samples, profiles: Some(profiles) })
}

/// With probability `rate`, replaces `label` by a uniformly chosen other class.
fn corrupt<R: Rng>(label: usize, classes: usize, rate: f64, rng: &mut R) -> usize {
    // Both draws happen unconditionally so the stream layout does not depend on outcomes.
    let flip = rng.gen::<f64>() < rate;
    let offset = rng.gen_range(1..classes);
    if flip {
        (label + offset) % classes
    } else {
        label
    }
}
