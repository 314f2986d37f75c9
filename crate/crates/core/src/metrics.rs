//! Evaluation: Inception Score, Fréchet distance, attribute-reconstruction
//! F-score, affordance comparison and the inter-dependency probe.
//!
//! Images handed to a classifier are in network units (`[-1, 1]`). The
//! trained discriminator doubles as the classifier: its attribute head gives
//! slot posteriors and its hidden layer gives FID features.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSample;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::schema::{AttributeSchema, AttributeSet};
use crate::seed::derive_seed;
use crate::training::normalize;

/// Clamp applied to probabilities inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;

/// What a classifier reports for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    /// Independent per-slot probabilities.
    pub slot_probs: Vec<f64>,
    /// Penultimate-layer activations.
    pub features: Vec<f64>,
}

pub trait AttributeClassifier {
    fn slot_count(&self) -> usize;
    fn read(&self, img: &Array3<f32>) -> Result<Reading>;
}

impl AttributeClassifier for Discriminator<f32> {
    fn slot_count(&self) -> usize {
        self.config.slots
    }

    fn read(&self, img: &Array3<f32>) -> Result<Reading> {
        let (out, _) = self.forward(img)?;
        Ok(Reading {
            slot_probs: out.attribute_probs().iter().map(|&p| p as f64).collect(),
            features: out.features.iter().map(|&v| v as f64).collect(),
        })
    }
}

fn check_classifier(classifier: &dyn AttributeClassifier, schema: &AttributeSchema) -> Result<()> {
    if classifier.slot_count() != schema.slot_count() {
        return Err(Error::LengthMismatch { expected: schema.slot_count(), actual: classifier.slot_count() });
    }
    Ok(())
}

/// Column means of a row-stochastic matrix.
pub fn marginal(p: &Array2<f64>) -> Result<Array1<f64>> {
    if p.nrows() == 0 || p.ncols() == 0 {
        return Err(Error::Empty("posterior matrix"));
    }
    Ok(p.mean_axis(Axis(0)).expect("nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InceptionScore {
    /// Mean of exp(KL̄) across splits.
    pub is_mean: f64,
    /// Population standard deviation of exp(KL̄) across splits.
    pub is_std: f64,
    /// Mean of the un-exponentiated KL̄ across splits.
    pub is_kl_mean: f64,
}

fn mean_kl(p: &Array2<f64>) -> Result<f64> {
    let q = marginal(p)?;
    let total: f64 = p
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(&q)
                .filter(|(&pv, _)| pv > 0.0)
                .map(|(&pv, &qv)| pv * (pv.max(KL_EPS).ln() - qv.max(KL_EPS).ln()))
                .sum::<f64>()
        })
        .sum();
    Ok(total / p.nrows() as f64)
}

/// Splits the rows into `splits` contiguous chunks (sizes differ by at most
/// one) and scores each against its own marginal.
pub fn inception_score(p: &Array2<f64>, splits: usize) -> Result<InceptionScore> {
    if splits == 0 {
        return Err(Error::InvalidConfig("inception score needs at least one split".into()));
    }
    if p.nrows() < splits {
        return Err(Error::InvalidConfig(format!("{} rows cannot fill {splits} splits", p.nrows())));
    }
    let (base, extra) = (p.nrows() / splits, p.nrows() % splits);
    let mut start = 0;
    let mut kls = Vec::with_capacity(splits);
    for s in 0..splits {
        let len = base + usize::from(s < extra);
        kls.push(mean_kl(&p.slice(ndarray::s![start..start + len, ..]).to_owned())?);
        start += len;
    }
    let scores: Vec<f64> = kls.iter().map(|k| k.exp()).collect();
    let n = splits as f64;
    let is_mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - is_mean).powi(2)).sum::<f64>() / n;
    Ok(InceptionScore { is_mean, is_std: var.sqrt(), is_kl_mean: kls.iter().sum::<f64>() / n })
}

fn moments(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mu = m.row_mean();
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= &mu;
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mu.transpose(), cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets, using
/// unbiased covariances.
pub fn frechet_distance(real: &Array2<f64>, gen: &Array2<f64>) -> Result<f64> {
    if real.ncols() != gen.ncols() {
        return Err(Error::LengthMismatch { expected: real.ncols(), actual: gen.ncols() });
    }
    if real.nrows() < 2 || gen.nrows() < 2 {
        return Err(Error::Empty("feature set with at least two rows"));
    }
    let (mu_r, cov_r) = moments(real);
    let (mu_g, cov_g) = moments(gen);
    let root_r = psd_sqrt(&cov_r);
    let product = &root_r * &cov_g * &root_r;
    let eig = SymmetricEigen::new((&product + product.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fid = (mu_r - mu_g).norm_squared() + cov_r.trace() + cov_g.trace() - 2.0 * cross;
    Ok(fid.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub name: String,
    /// `None` when no ground truth mentions the type.
    pub f1: Option<f64>,
    /// Number of (sample, type) pairs scored.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FScores {
    pub per_type: Vec<TypeScore>,
    /// Unweighted mean over types with support.
    pub average: f64,
}

impl FScores {
    pub fn get(&self, ty: &str) -> Option<f64> {
        self.per_type.iter().find(|t| t.name == ty).and_then(|t| t.f1)
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    support: usize,
}

fn tally(counts: &mut [Counts], predicted: &AttributeSet, truth: &AttributeSet, schema: &AttributeSchema) {
    for (c, spec) in counts.iter_mut().zip(schema.types()) {
        let Some(want) = truth.get(&spec.name) else { continue };
        c.support += 1;
        match predicted.get(&spec.name) {
            Some(got) if got == want => c.tp += 1,
            Some(_) => {
                c.fp += 1;
                c.fn_ += 1;
            }
            None => c.fn_ += 1,
        }
    }
}

fn finish(counts: &[Counts], schema: &AttributeSchema) -> Result<FScores> {
    let per_type: Vec<TypeScore> = counts
        .iter()
        .zip(schema.types())
        .map(|(c, spec)| {
            let denom = 2 * c.tp + c.fp + c.fn_;
            TypeScore {
                name: spec.name.clone(),
                f1: (c.support > 0 && denom > 0).then(|| 2.0 * c.tp as f64 / denom as f64),
                support: c.support,
            }
        })
        .collect();
    let scored: Vec<f64> = per_type.iter().filter_map(|t| t.f1).collect();
    if scored.is_empty() {
        return Err(Error::Empty("ground truth with at least one attribute"));
    }
    let average = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(FScores { per_type, average })
}

/// Micro-F1 per type over the (sample, type) pairs the ground truth
/// specifies. A missing prediction counts as a false negative only.
pub fn fscore_from_predictions(
    predicted: &[AttributeSet],
    truth: &[AttributeSet],
    schema: &AttributeSchema,
) -> Result<FScores> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), actual: predicted.len() });
    }
    let mut counts = vec![Counts::default(); schema.type_count()];
    for (p, t) in predicted.iter().zip(truth) {
        tally(&mut counts, p, t, schema);
    }
    finish(&counts, schema)
}

/// Argmax readout of `classifier` on every image, scored against `truth`.
pub fn attribute_fscore(
    images: &[Array3<f32>],
    truth: &[AttributeSet],
    classifier: &dyn AttributeClassifier,
    schema: &AttributeSchema,
) -> Result<FScores> {
    check_classifier(classifier, schema)?;
    let predicted = images
        .iter()
        .map(|img| schema.decode_onehot(&classifier.read(img)?.slot_probs))
        .collect::<Result<Vec<_>>>()?;
    fscore_from_predictions(&predicted, truth, schema)
}

/// Scores a classifier that picks every value uniformly at random, pooled
/// over `repeats` passes through `truth`.
pub fn random_baseline(truth: &[AttributeSet], schema: &AttributeSchema, seed: u64, repeats: usize) -> Result<FScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5a4d]));
    let mut counts = vec![Counts::default(); schema.type_count()];
    for _ in 0..repeats.max(1) {
        for t in truth {
            let guess: AttributeSet = schema
                .types()
                .iter()
                .map(|spec| (spec.name.clone(), spec.values[rng.gen_range(0..spec.values.len())].clone()))
                .collect();
            tally(&mut counts, &guess, t, schema);
        }
    }
    finish(&counts, schema)
}

/// Slot probabilities renormalized to sum to one per image.
pub fn posterior_matrix(readings: &[Reading]) -> Result<Array2<f64>> {
    let k = readings.first().ok_or(Error::Empty("readings"))?.slot_probs.len();
    let mut p = Array2::zeros((readings.len(), k));
    for (mut row, r) in p.rows_mut().into_iter().zip(readings) {
        if r.slot_probs.len() != k {
            return Err(Error::LengthMismatch { expected: k, actual: r.slot_probs.len() });
        }
        let total: f64 = r.slot_probs.iter().sum();
        for (dst, &v) in row.iter_mut().zip(&r.slot_probs) {
            *dst = if total > 0.0 { v / total } else { 1.0 / k as f64 };
        }
    }
    Ok(p)
}

pub fn feature_matrix(readings: &[Reading]) -> Result<Array2<f64>> {
    let d = readings.first().ok_or(Error::Empty("readings"))?.features.len();
    let mut f = Array2::zeros((readings.len(), d));
    for (mut row, r) in f.rows_mut().into_iter().zip(readings) {
        if r.features.len() != d {
            return Err(Error::LengthMismatch { expected: d, actual: r.features.len() });
        }
        row.assign(&Array1::from(r.features.clone()));
    }
    Ok(f)
}

fn read_all(images: &[Array3<f32>], classifier: &dyn AttributeClassifier) -> Result<Vec<Reading>> {
    images.iter().map(|img| classifier.read(img)).collect()
}

fn generate_all(
    g: &Generator<f32>,
    photos: &[Array3<f32>],
    conditions: &[AttributeSet],
    schema: &AttributeSchema,
) -> Result<Vec<Array3<f32>>> {
    photos.iter().zip(conditions).map(|(x, attrs)| g.generate(x, attrs, schema)).collect()
}

fn splits_for(n: usize, wanted: usize) -> usize {
    wanted.clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceRow {
    pub combo: AttributeSet,
    /// Scored on the combo's own types only.
    pub reconstruction: FScores,
    pub inception: InceptionScore,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceReport {
    pub a: AffordanceRow,
    pub b: AffordanceRow,
}

/// Photos for affordance and probe runs: network-unit images with the
/// attributes that fill types a combo leaves open.
#[derive(Debug, Clone)]
pub struct EvalPhotos {
    pub photos: Vec<Array3<f32>>,
    pub base: Vec<AttributeSet>,
    /// Real portraits for FID, network units.
    pub real: Vec<Array3<f32>>,
}

impl EvalPhotos {
    pub fn from_samples(samples: &[PairedSample]) -> Self {
        Self {
            photos: samples.iter().map(|s| normalize(&s.photo)).collect(),
            base: samples.iter().map(|s| s.attrs.clone()).collect(),
            real: samples.iter().map(|s| normalize(&s.portrait)).collect(),
        }
    }
}

fn affordance_row(
    combo: &AttributeSet,
    g: &Generator<f32>,
    classifier: &dyn AttributeClassifier,
    photos: &EvalPhotos,
    real_features: &Array2<f64>,
    schema: &AttributeSchema,
    splits: usize,
) -> Result<AffordanceRow> {
    let conditions: Vec<AttributeSet> = photos
        .base
        .iter()
        .map(|b| {
            let mut c = b.clone();
            for (t, v) in combo.iter() {
                c.insert(t, v);
            }
            c
        })
        .collect();
    let images = generate_all(g, &photos.photos, &conditions, schema)?;
    let readings = read_all(&images, classifier)?;
    let predicted =
        readings.iter().map(|r| schema.decode_onehot(&r.slot_probs)).collect::<Result<Vec<_>>>()?;
    let truth = vec![combo.clone(); images.len()];
    Ok(AffordanceRow {
        combo: combo.clone(),
        reconstruction: fscore_from_predictions(&predicted, &truth, schema)?,
        inception: inception_score(&posterior_matrix(&readings)?, splits_for(images.len(), splits))?,
        fid: frechet_distance(real_features, &feature_matrix(&readings)?)?,
    })
}

/// Generates every photo under each combo (other types from the photo's own
/// attributes) and reports reconstruction, IS and FID per combo.
pub fn affordance_eval(
    combo_a: &AttributeSet,
    combo_b: &AttributeSet,
    g: &Generator<f32>,
    classifier: &dyn AttributeClassifier,
    photos: &EvalPhotos,
    schema: &AttributeSchema,
    splits: usize,
) -> Result<AffordanceReport> {
    check_classifier(classifier, schema)?;
    schema.resolve(combo_a)?;
    schema.resolve(combo_b)?;
    if photos.photos.len() != photos.base.len() {
        return Err(Error::LengthMismatch { expected: photos.photos.len(), actual: photos.base.len() });
    }
    let real_features = feature_matrix(&read_all(&photos.real, classifier)?)?;
    Ok(AffordanceReport {
        a: affordance_row(combo_a, g, classifier, photos, &real_features, schema, splits)?,
        b: affordance_row(combo_b, g, classifier, photos, &real_features, schema, splits)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub condition_type: String,
    pub condition_value: String,
    pub probe_type: String,
    /// (value, probability) in schema order; sums to one.
    pub distribution: Vec<(String, f64)>,
}

/// Generates with only `condition` set and averages the classifier's
/// probability mass over the values of `probe_type`.
pub fn interdependency_probe(
    condition: (&str, &str),
    probe_type: &str,
    g: &Generator<f32>,
    classifier: &dyn AttributeClassifier,
    photos: &[Array3<f32>],
    schema: &AttributeSchema,
) -> Result<ProbeReport> {
    check_classifier(classifier, schema)?;
    if photos.is_empty() {
        return Err(Error::Empty("probe photos"));
    }
    let attrs = AttributeSet::new().with(condition.0, condition.1);
    schema.resolve(&attrs)?;
    let t = schema.type_index(probe_type).ok_or_else(|| Error::UnknownType(probe_type.to_string()))?;
    if schema.types()[t].name == condition.0 {
        return Err(Error::InvalidConfig(format!("probe type `{probe_type}` is the conditioned type")));
    }
    let spec = &schema.types()[t];
    let off = schema.offset(t);
    let mut mass = vec![0.0; spec.values.len()];
    for x in photos {
        let r = classifier.read(&g.generate(x, &attrs, schema)?)?;
        for (m, p) in mass.iter_mut().zip(&r.slot_probs[off..off + spec.values.len()]) {
            *m += p;
        }
    }
    let total: f64 = mass.iter().sum();
    let n = mass.len() as f64;
    let distribution = spec
        .values
        .iter()
        .zip(&mass)
        .map(|(v, m)| (v.clone(), if total > 0.0 { m / total } else { 1.0 / n }))
        .collect();
    Ok(ProbeReport {
        condition_type: condition.0.to_string(),
        condition_value: condition.1.to_string(),
        probe_type: spec.name.clone(),
        distribution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub is_splits: usize,
    pub seed: u64,
    /// Passes through the test labels for the random baseline.
    pub random_repeats: usize,
    pub affordance: Option<(AttributeSet, AttributeSet)>,
    /// (condition type, condition value, probe type).
    pub probes: Vec<(String, String, String)>,
}

impl EvalOptions {
    /// Defaults for the built-in schemas; other schemas get no affordance
    /// pair or probes.
    pub fn for_schema(schema: &AttributeSchema) -> Self {
        let has = |t: &str, v: &str| schema.slot(t, v).is_ok();
        let (affordance, probes) = if has("Mouth", "Smile") && has("Background", "Bright") && has("Background", "Dark") {
            (
                Some((
                    AttributeSet::new().with("Mouth", "Smile").with("Background", "Bright"),
                    AttributeSet::new().with("Mouth", "Smile").with("Background", "Dark"),
                )),
                vec![("Mouth".into(), "Smile".into(), "Background".into())],
            )
        } else if has("Facial Expression", "Smile") && has("Mood", "Happy") && has("Mood", "Sad") {
            (
                Some((
                    AttributeSet::new().with("Facial Expression", "Smile").with("Mood", "Happy"),
                    AttributeSet::new().with("Facial Expression", "Smile").with("Mood", "Sad"),
                )),
                if schema.type_index("Weather").is_some() {
                    vec![("Mood".into(), "Happy".into(), "Weather".into())]
                } else {
                    Vec::new()
                },
            )
        } else {
            (None, Vec::new())
        };
        Self { is_splits: 10, seed: 0, random_repeats: 50, affordance, probes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub is_kl_mean: f64,
    pub fid: f64,
    pub fscore: FScores,
    pub random_fscore: FScores,
    pub affordance: Option<AffordanceReport>,
    pub interdependency: Vec<ProbeReport>,
}

fn combo_label(c: &AttributeSet) -> String {
    c.iter().map(|(_, v)| v).collect::<Vec<_>>().join("+")
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `name<TAB>value` row per metric.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(out, "{k}\t{v:.6}");
        };
        row("is_mean", self.is_mean);
        row("is_std", self.is_std);
        row("is_kl_mean", self.is_kl_mean);
        row("fid", self.fid);
        for (label, scores) in [("fscore", &self.fscore), ("random_fscore", &self.random_fscore)] {
            for t in &scores.per_type {
                if let Some(f) = t.f1 {
                    row(&format!("{label}.{}", t.name), f);
                }
            }
            row(&format!("{label}.average"), scores.average);
        }
        if let Some(a) = &self.affordance {
            for r in [&a.a, &a.b] {
                let name = combo_label(&r.combo);
                for t in r.reconstruction.per_type.iter().filter(|t| t.f1.is_some()) {
                    row(&format!("affordance.{name}.{}", t.name), t.f1.unwrap_or_default());
                }
                row(&format!("affordance.{name}.is_mean"), r.inception.is_mean);
                row(&format!("affordance.{name}.fid"), r.fid);
            }
        }
        for p in &self.interdependency {
            for (v, prob) in &p.distribution {
                row(&format!("probe.{}={}.{}={v}", p.condition_type, p.condition_value, p.probe_type), *prob);
            }
        }
        out
    }

    /// Table-shaped summary for terminals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "IS {:.3} ± {:.3} (KL {:.4})   FID {:.4}", self.is_mean, self.is_std, self.is_kl_mean, self.fid);
        let _ = writeln!(out, "{:<24}{:>10}{:>10}", "attribute", "model", "random");
        for (m, r) in self.fscore.per_type.iter().zip(&self.random_fscore.per_type) {
            let fmt = |f: Option<f64>| f.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<24}{:>10}{:>10}", m.name, fmt(m.f1), fmt(r.f1));
        }
        let _ = writeln!(out, "{:<24}{:>10.3}{:>10.3}", "average", self.fscore.average, self.random_fscore.average);
        out
    }
}

/// Full report on a test set: generation conditioned on each sample's own
/// attributes, scored against real portraits.
pub fn evaluate(
    g: &Generator<f32>,
    classifier: &dyn AttributeClassifier,
    test: &[PairedSample],
    schema: &AttributeSchema,
    options: &EvalOptions,
) -> Result<MetricReport> {
    check_classifier(classifier, schema)?;
    if test.len() < 2 {
        return Err(Error::Empty("test set with at least two samples"));
    }
    let photos = EvalPhotos::from_samples(test);
    let images = generate_all(g, &photos.photos, &photos.base, schema)?;
    let readings = read_all(&images, classifier)?;
    let predicted =
        readings.iter().map(|r| schema.decode_onehot(&r.slot_probs)).collect::<Result<Vec<_>>>()?;
    let fscore = fscore_from_predictions(&predicted, &photos.base, schema)?;
    let random_fscore = random_baseline(&photos.base, schema, options.seed, options.random_repeats)?;
    let inception = inception_score(&posterior_matrix(&readings)?, splits_for(images.len(), options.is_splits))?;
    let real_features = feature_matrix(&read_all(&photos.real, classifier)?)?;
    let fid = frechet_distance(&real_features, &feature_matrix(&readings)?)?;
    let affordance = match &options.affordance {
        Some((a, b)) => Some(affordance_eval(a, b, g, classifier, &photos, schema, options.is_splits)?),
        None => None,
    };
    let interdependency = options
        .probes
        .iter()
        .map(|(t, v, p)| interdependency_probe((t, v), p, g, classifier, &photos.photos, schema))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        is_mean: inception.is_mean,
        is_std: inception.is_std,
        is_kl_mean: inception.is_kl_mean,
        fid,
        fscore,
        random_fscore,
        affordance,
        interdependency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn marginal_hand_cases() {
        assert_eq!(marginal(&array![[0.2, 0.8]]).unwrap(), array![0.2, 0.8]);
        assert_eq!(marginal(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap(), array![0.5, 0.5]);
        assert!(marginal(&Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn inception_hand_cases() {
        let uniform = Array2::from_elem((20, 4), 0.25);
        let s = inception_score(&uniform, 10).unwrap();
        assert!((s.is_mean - 1.0).abs() < 1e-9 && s.is_kl_mean.abs() < 1e-12 && s.is_std < 1e-12);
        let s = inception_score(&array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        assert!((s.is_mean - 2.0).abs() < 1e-12);
        assert!((s.is_kl_mean - 2f64.ln()).abs() < 1e-12);
        // two splits of one one-hot row each score exp(0) = 1
        let s = inception_score(&array![[1.0, 0.0], [0.0, 1.0]], 2).unwrap();
        assert!((s.is_mean - 1.0).abs() < 1e-12);
        assert!(inception_score(&uniform, 0).is_err());
        assert!(inception_score(&uniform, 21).is_err());
    }

    #[test]
    fn inception_split_std_is_population() {
        // split scores 2 and 1 → mean 1.5, population std 0.5
        let p = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.5]];
        let s = inception_score(&p, 2).unwrap();
        assert!((s.is_mean - 1.5).abs() < 1e-12);
        assert!((s.is_std - 0.5).abs() < 1e-12);
    }

    #[test]
    fn frechet_hand_cases() {
        let a = array![[-1.0], [1.0]];
        let b = array![[0.0], [2.0]];
        // both variances are 2 with the unbiased estimator; means differ by 1
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let x = array![[0.0, 1.0], [2.0, -1.0], [0.5, 3.0], [1.0, 1.0]];
        assert!(frechet_distance(&x, &x).unwrap() <= 1e-8);
        assert!(frechet_distance(&x, &a).is_err());
        assert!(frechet_distance(&array![[1.0]], &a).is_err());
    }

    fn toy_sets(n: usize) -> Vec<AttributeSet> {
        (0..n)
            .map(|i| {
                AttributeSet::new()
                    .with("HairColor", ["Blond", "Black"][i % 2])
                    .with("Background", ["Bright", "Dark"][(i / 2) % 2])
                    .with("Mouth", ["Smile", "Frown"][(i / 3) % 2])
            })
            .collect()
    }

    #[test]
    fn fscore_hand_cases() {
        let schema = AttributeSchema::toy();
        let truth = toy_sets(12);
        let perfect = fscore_from_predictions(&truth, &truth, &schema).unwrap();
        assert!(perfect.per_type.iter().all(|t| t.f1 == Some(1.0)));
        assert_eq!(perfect.average, 1.0);
        // a missing prediction is a false negative without a false positive
        let mut preds = truth.clone();
        preds[0].remove("HairColor");
        let s = fscore_from_predictions(&preds, &truth, &schema).unwrap();
        assert!((s.get("HairColor").unwrap() - 22.0 / 23.0).abs() < 1e-12);
        // types absent from the ground truth are excluded from the average
        let partial: Vec<AttributeSet> = truth.iter().map(|t| AttributeSet::new().with("Mouth", t.get("Mouth").unwrap())).collect();
        let s = fscore_from_predictions(&truth, &partial, &schema).unwrap();
        assert_eq!(s.get("HairColor"), None);
        assert_eq!(s.average, 1.0);
        assert!(fscore_from_predictions(&truth[..2], &truth, &schema).is_err());
    }

    #[test]
    fn random_baseline_matches_value_count() {
        let schema = AttributeSchema::from_toml_str(
            "[[types]]\nname = \"Gender\"\nvalues = [\"Male\", \"Female\", \"Other\"]\n",
        )
        .unwrap();
        let truth: Vec<AttributeSet> =
            (0..10_000).map(|i| AttributeSet::new().with("Gender", ["Male", "Female", "Other"][i % 3])).collect();
        let s = random_baseline(&truth, &schema, 3, 1).unwrap();
        assert!((s.average - 1.0 / 3.0).abs() < 0.02, "{}", s.average);
    }

    #[test]
    fn posterior_rows_are_stochastic() {
        let r = |p: Vec<f64>| Reading { slot_probs: p, features: vec![0.0] };
        let p = posterior_matrix(&[r(vec![0.9, 0.3, 0.0]), r(vec![0.0, 0.0, 0.0])]).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[0, 0]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn report_table_has_one_row_per_metric() {
        let schema = AttributeSchema::toy();
        let truth = toy_sets(6);
        let f = fscore_from_predictions(&truth, &truth, &schema).unwrap();
        let report = MetricReport {
            is_mean: 1.5,
            is_std: 0.1,
            is_kl_mean: 0.4,
            fid: 2.0,
            fscore: f.clone(),
            random_fscore: f,
            affordance: None,
            interdependency: vec![ProbeReport {
                condition_type: "Mouth".into(),
                condition_value: "Smile".into(),
                probe_type: "Background".into(),
                distribution: vec![("Bright".into(), 0.7), ("Dark".into(), 0.3)],
            }],
        };
        let table = report.to_table();
        assert_eq!(table.lines().count(), 4 + 2 * 4 + 2);
        assert!(table.contains("probe.Mouth=Smile.Background=Bright\t0.700000"));
        let back: MetricReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frechet_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8 && ab >= 0.0);
        }

        #[test]
        fn fscore_ignores_sample_order(seed in 0u64..1000) {
            let schema = AttributeSchema::toy();
            let truth = toy_sets(9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<AttributeSet> = truth
                .iter()
                .map(|t| if rng.gen_bool(0.5) { t.clone() } else { t.clone().with("Mouth", "Frown") })
                .collect();
            let mut order: Vec<usize> = (0..truth.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
            let t2: Vec<_> = order.iter().map(|&i| truth[i].clone()).collect();
            prop_assert!(fscore_from_predictions(&preds, &truth, &schema).unwrap()
                == fscore_from_predictions(&p2, &t2, &schema).unwrap());
        }

        #[test]
        fn marginal_is_a_distribution(seed in 0u64..1000, n in 1usize..8, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = Array2::from_shape_fn((n, k), |_| rng.gen_range(0.0..1.0) + 1e-3);
            for mut row in p.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            let q = marginal(&p).unwrap();
            prop_assert!((q.sum() - 1.0).abs() < 1e-9 && q.iter().all(|&v| v >= 0.0));
            prop_assert!(inception_score(&p, 1).unwrap().is_mean >= 1.0 - 1e-12);
        }
    }
}
