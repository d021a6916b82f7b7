//! The `(K + 1)`-class locally consistent classifier and the
//! semi-supervised generator objective.
//!
//! Class indices `0..K` are real classes; index `K` is the fake class that
//! generated samples are pushed into.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{omega_tape, sample_noise_batch, subsample_coordinates, LocalGenerator};
use crate::manifold::{penalty_tape, tangent_rows};
use crate::metrics::classification_error;
use crate::nets::{Activation, Mlp, MlpSpec, MlpVars, ParamMap};
use crate::tensor::Tensor;
use crate::training::{adam_step, early_stop_check, finite, tag, AdamState, EarlyStop, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    /// Produces the feature representation used for feature matching.
    trunk: Mlp,
    /// Single linear layer producing `K + 1` logits.
    head: Mlp,
    classes: usize,
}

#[derive(Clone, Debug)]
pub struct ClassifierVars {
    trunk: MlpVars,
    head: MlpVars,
}

impl ClassifierVars {
    pub fn gradients(&self, grads: &crate::autodiff::Gradients) -> ParamMap {
        prefixed(self.trunk.gradients(grads), self.head.gradients(grads))
    }
}

fn prefixed(trunk: ParamMap, head: ParamMap) -> ParamMap {
    let mut out = ParamMap::new();
    for (k, v) in trunk {
        out.insert(format!("trunk.{k}"), v);
    }
    for (k, v) in head {
        out.insert(format!("head.{k}"), v);
    }
    out
}

fn strip(params: &ParamMap, prefix: &str) -> ParamMap {
    params
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

impl ClassifierModel {
    /// An empty trunk makes the features the raw input.
    pub fn new(trunk: Mlp, head: Mlp, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("classifier needs at least one real class"));
        }
        if head.layers().len() != 1 || head.out_dim() != Some(classes + 1) {
            return Err(Error::invalid(format!(
                "head must be a single layer with {} outputs",
                classes + 1
            )));
        }
        if let Some(width) = trunk.out_dim() {
            if head.in_dim() != Some(width) {
                return Err(Error::invalid("head input does not match trunk output"));
            }
        }
        Ok(ClassifierModel { trunk, head, classes })
    }

    pub fn init(input_dim: usize, hidden: &[usize], activation: Activation, classes: usize, seed: u64) -> Result<Self> {
        let mut spec = MlpSpec::new(input_dim);
        for &h in hidden {
            spec = spec.layer(h, activation);
        }
        let feature_dim = hidden.last().copied().unwrap_or(input_dim);
        let trunk = Mlp::init(&spec, seed)?;
        let head = Mlp::init(&MlpSpec::new(feature_dim).layer(classes + 1, Activation::Linear), seed.wrapping_add(1))?;
        Self::new(trunk, head, classes)
    }

    /// Number of real classes `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn head(&self) -> &crate::nets::DenseLayer {
        &self.head.layers()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.in_dim().or(self.head.in_dim()).expect("head always has a layer")
    }

    pub fn params(&self) -> ParamMap {
        prefixed(self.trunk.params(), self.head.params())
    }

    pub fn load_params(&mut self, params: &ParamMap) -> Result<()> {
        self.trunk.load_params(&strip(params, "trunk."))?;
        self.head.load_params(&strip(params, "head."))
    }

    /// Rebuilds from flattened parameters and trunk activations.
    pub fn from_params(params: &ParamMap, trunk_activations: &[Activation], classes: usize) -> Result<Self> {
        let trunk = Mlp::from_params(&strip(params, "trunk."), trunk_activations)?;
        let head = Mlp::from_params(&strip(params, "head."), &[Activation::Linear])?;
        Self::new(trunk, head, classes)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            trunk: self.trunk.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Records features and logits for a batch.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &ClassifierVars, x: Var) -> Result<(Var, Var)> {
        let features = self.trunk.forward_tape(tape, &vars.trunk, x)?;
        let logits = self.head.forward_tape(tape, &vars.head, features)?;
        Ok((features, logits))
    }

    /// Logits and their directional derivatives along `tangents`
    /// (`reps` directions per example).
    pub fn logits_jvp_tape(&self, tape: &mut Tape, vars: &ClassifierVars, x: Var, tangents: Var, reps: usize) -> Result<(Var, Var)> {
        let (f, tf) = self.trunk.jvp_tape(tape, &vars.trunk, x, tangents, reps)?;
        self.head.jvp_tape(tape, &vars.head, f, tf, reps)
    }

    fn eval<T>(&self, x: &Tensor, pick: impl FnOnce(&Tape, Var, Var) -> T) -> Result<T> {
        let batch = if x.rank() == 1 { x.reshape(&[1, x.len()])? } else { x.clone() };
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "classifier",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(batch);
        let (f, l) = self.forward_tape(&mut tape, &vars, xv)?;
        Ok(pick(&tape, f, l))
    }

    /// `B x (K + 1)` logits for a batch (or `1 x (K + 1)` for a vector).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |t, _, l| t.value(l).clone())
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |t, f, _| t.value(f).clone())
    }

    /// Softmax probabilities over all `K + 1` classes.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let lp = tape.log_softmax_rows(l)?;
        let p = tape.exp(lp)?;
        Ok(tape.value(p).clone())
    }
}

/// Argmax over the first `classes` logits, ties to the lowest index.
pub fn argmax_real(logits: &[f64], classes: usize) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().take(classes) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict_class(clf: &ClassifierModel, x: &Tensor) -> Result<usize> {
    let logits = clf.logits(x)?;
    Ok(argmax_real(logits.row(0), clf.classes()))
}

pub fn predict_classes(clf: &ClassifierModel, points: &Tensor) -> Result<Vec<usize>> {
    if points.rows() == 0 {
        return Ok(Vec::new());
    }
    let logits = clf.logits(points)?;
    Ok((0..logits.rows()).map(|i| argmax_real(logits.row(i), clf.classes())).collect())
}

/// A batch of labeled examples.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub points: &'a Tensor,
    pub labels: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(points: &'a Tensor, labels: &'a [usize]) -> Self {
        Labeled { points, labels }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn check(&self, classes: usize) -> Result<()> {
        if self.points.rows() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                self.labels.len(),
                self.points.rows()
            )));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }
}

/// Options for the classifier objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub zero_weight: f64,
    pub manifold_penalty: bool,
    pub penalty_on_labeled: bool,
}

impl From<&TrainConfig> for ObjectiveOptions {
    fn from(c: &TrainConfig) -> Self {
        ObjectiveOptions {
            zero_weight: c.zero_weight,
            manifold_penalty: c.manifold_penalty,
            penalty_on_labeled: c.penalty_on_labeled,
        }
    }
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions::from(&TrainConfig::default())
    }
}

/// Recorded terms of the classifier objective; absent terms had empty batches.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierTapeTerms {
    pub labeled: Option<Var>,
    pub unlabeled: Option<Var>,
    pub fake: Option<Var>,
    pub penalty: Option<Var>,
    pub total: Var,
}

/// Values of the classifier objective terms (zero when skipped).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassifierTerms {
    pub labeled: f64,
    pub unlabeled: f64,
    pub fake: f64,
    pub penalty: f64,
    pub total: f64,
}

fn one_hot(labels: &[usize], width: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), width]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * width + l] = 1.0;
    }
    Ok(t)
}

/// `-mean log P(y_i | x_i)` given logits on the tape.
fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], width: usize) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits)?;
    let mask = tape.constant(one_hot(labels, width)?);
    let picked = tape.mul(logp, mask)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / labels.len() as f64)
}

fn sum_terms(tape: &mut Tape, terms: &[Option<Var>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in terms.iter().flatten() {
        total = Some(match total {
            None => *t,
            Some(acc) => tape.add(acc, *t)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Records the four-term classifier objective. The generator is held fixed.
#[allow(clippy::too_many_arguments)]
pub fn classifier_objective_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    clf: &ClassifierModel,
    vars: &ClassifierVars,
    gen: &LocalGenerator,
    labeled: Labeled<'_>,
    unlabeled: &Tensor,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<ClassifierTapeTerms> {
    let k = clf.classes();
    labeled.check(k)?;
    let labeled_term = if labeled.len() > 0 {
        let x = tape.constant(labeled.points.clone());
        let (_, logits) = clf.forward_tape(tape, vars, x)?;
        Some(cross_entropy(tape, logits, labeled.labels, k + 1)?)
    } else {
        None
    };

    let (mut unlabeled_term, mut fake_term, mut penalty_term) = (None, None, None);
    if unlabeled.rows() > 0 {
        let x = tape.constant(unlabeled.clone());
        let (_, logits) = clf.forward_tape(tape, vars, x)?;
        let real = tape.slice_cols(logits, 0, k)?;
        let lse_real = tape.logsumexp_rows(real)?;
        let lse_all = tape.logsumexp_rows(logits)?;
        let gap = tape.sub(lse_all, lse_real)?;
        unlabeled_term = Some(tape.mean(gap)?);

        let z = sample_noise_batch(unlabeled.rows(), gen.coord_dim(), opts.zero_weight, rng);
        let generated = tape.constant(gen.generate(unlabeled, &z)?);
        let (_, fake_logits) = clf.forward_tape(tape, vars, generated)?;
        let logp = tape.log_softmax_rows(fake_logits)?;
        let fake_col = tape.slice_cols(logp, k, k + 1)?;
        let m = tape.mean(fake_col)?;
        fake_term = Some(tape.scale(m, -1.0)?);
    }
    if opts.manifold_penalty {
        let base = if opts.penalty_on_labeled && labeled.len() > 0 {
            if unlabeled.rows() > 0 {
                Some(Tensor::matrix(
                    unlabeled.rows() + labeled.len(),
                    unlabeled.cols(),
                    [unlabeled.data(), labeled.points.data()].concat(),
                )?)
            } else {
                Some(labeled.points.clone())
            }
        } else if unlabeled.rows() > 0 {
            Some(unlabeled.clone())
        } else {
            None
        };
        if let Some(base) = base {
            let tangents = tangent_rows(gen, &base)?;
            let x = tape.constant(base);
            penalty_term = Some(penalty_tape(tape, clf, vars, x, &tangents, gen.coord_dim())?);
        }
    }
    let total = sum_terms(tape, &[labeled_term, unlabeled_term, fake_term, penalty_term])?;
    Ok(ClassifierTapeTerms {
        labeled: labeled_term,
        unlabeled: unlabeled_term,
        fake: fake_term,
        penalty: penalty_term,
        total,
    })
}

fn read_terms(tape: &Tape, t: &ClassifierTapeTerms) -> ClassifierTerms {
    let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
    ClassifierTerms {
        labeled: v(t.labeled),
        unlabeled: v(t.unlabeled),
        fake: v(t.fake),
        penalty: v(t.penalty),
        total: tape.value(t.total).item(),
    }
}

/// Classifier loss: supervised cross-entropy, real-vs-fake terms and the
/// manifold-gradient penalty.
pub fn classifier_objective<R: Rng + ?Sized>(
    clf: &ClassifierModel,
    gen: &LocalGenerator,
    labeled: Labeled<'_>,
    unlabeled: &Tensor,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<ClassifierTerms> {
    let mut tape = Tape::new();
    let vars = clf.bind(&mut tape, false);
    let terms = classifier_objective_tape(&mut tape, clf, &vars, gen, labeled, unlabeled, opts, rng)?;
    Ok(read_terms(&tape, &terms))
}

/// Records `-mean log P(y_l | G(x_l, z))`.
#[allow(clippy::too_many_arguments)]
pub fn label_preservation_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    clf: &ClassifierModel,
    clf_vars: &ClassifierVars,
    gen: &LocalGenerator,
    gen_vars: &MlpVars,
    labeled: Labeled<'_>,
    zero_weight: f64,
    rng: &mut R,
) -> Result<Var> {
    labeled.check(clf.classes())?;
    if labeled.len() == 0 {
        return Err(Error::invalid("label preservation needs labeled examples"));
    }
    let z = sample_noise_batch(labeled.len(), gen.coord_dim(), zero_weight, rng);
    let x = tape.constant(labeled.points.clone());
    let z = tape.constant(z);
    let g = gen.generate_tape(tape, gen_vars, x, z)?;
    let (_, logits) = clf.forward_tape(tape, clf_vars, g)?;
    cross_entropy(tape, logits, labeled.labels, clf.classes() + 1)
}

/// Records `||mean psi(x) - mean psi(G(x, z))||^2`.
#[allow(clippy::too_many_arguments)]
pub fn feature_matching_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    clf: &ClassifierModel,
    clf_vars: &ClassifierVars,
    gen: &LocalGenerator,
    gen_vars: &MlpVars,
    real: &Tensor,
    zero_weight: f64,
    rng: &mut R,
) -> Result<Var> {
    if real.rows() == 0 {
        return Err(Error::invalid("feature matching needs a non-empty batch"));
    }
    let z = sample_noise_batch(real.rows(), gen.coord_dim(), zero_weight, rng);
    let x = tape.constant(real.clone());
    let (real_features, _) = clf.forward_tape(tape, clf_vars, x)?;
    let real_mean = tape.mean_cols(real_features)?;
    let z = tape.constant(z);
    let g = gen.generate_tape(tape, gen_vars, x, z)?;
    let (fake_features, _) = clf.forward_tape(tape, clf_vars, g)?;
    let fake_mean = tape.mean_cols(fake_features)?;
    let diff = tape.sub(real_mean, fake_mean)?;
    tape.squared_norm(diff)
}

pub fn label_preservation_loss<R: Rng + ?Sized>(
    clf: &ClassifierModel,
    gen: &LocalGenerator,
    labeled: Labeled<'_>,
    zero_weight: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let cv = clf.bind(&mut tape, false);
    let gv = gen.bind(&mut tape, false);
    let v = label_preservation_tape(&mut tape, clf, &cv, gen, &gv, labeled, zero_weight, rng)?;
    Ok(tape.value(v).item())
}

pub fn feature_matching_loss<R: Rng + ?Sized>(
    clf: &ClassifierModel,
    gen: &LocalGenerator,
    real: &Tensor,
    zero_weight: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let cv = clf.bind(&mut tape, false);
    let gv = gen.bind(&mut tape, false);
    let v = feature_matching_tape(&mut tape, clf, &cv, gen, &gv, real, zero_weight, rng)?;
    Ok(tape.value(v).item())
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTapeTerms {
    pub label_preservation: Var,
    pub feature_matching: Var,
    pub locality: Var,
    pub orthonormality: Var,
    pub omega: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub label_preservation: f64,
    pub feature_matching: f64,
    pub omega: f64,
    pub total: f64,
}

/// Records `K_G + L_G + mean Omega` with the classifier held fixed. Noise for
/// `K_G`, then for `L_G`, then the coordinate subset are drawn in that order.
#[allow(clippy::too_many_arguments)]
pub fn generator_semisup_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    clf: &ClassifierModel,
    clf_vars: &ClassifierVars,
    gen: &LocalGenerator,
    gen_vars: &MlpVars,
    labeled: Labeled<'_>,
    real: &Tensor,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<GeneratorTapeTerms> {
    let kg = label_preservation_tape(tape, clf, clf_vars, gen, gen_vars, labeled, config.zero_weight, rng)?;
    let lg = feature_matching_tape(tape, clf, clf_vars, gen, gen_vars, real, config.zero_weight, rng)?;
    let coords = subsample_coordinates(gen.coord_dim(), config.coord_sample_size, rng);
    let x = tape.constant(real.clone());
    let omega = omega_tape(tape, gen, gen_vars, x, config.mu, config.eta, &coords)?;
    let partial = tape.add(kg, lg)?;
    let total = tape.add(partial, omega.total)?;
    Ok(GeneratorTapeTerms {
        label_preservation: kg,
        feature_matching: lg,
        locality: omega.locality,
        orthonormality: omega.orthonormality,
        omega: omega.total,
        total,
    })
}

pub fn generator_semisup_objective<R: Rng + ?Sized>(
    clf: &ClassifierModel,
    gen: &LocalGenerator,
    labeled: Labeled<'_>,
    real: &Tensor,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<GeneratorTerms> {
    let mut tape = Tape::new();
    let cv = clf.bind(&mut tape, false);
    let gv = gen.bind(&mut tape, false);
    let t = generator_semisup_tape(&mut tape, clf, &cv, gen, &gv, labeled, real, config, rng)?;
    let v = |x: Var| tape.value(x).item();
    Ok(GeneratorTerms {
        label_preservation: v(t.label_preservation),
        feature_matching: v(t.feature_matching),
        omega: v(t.omega),
        total: v(t.total),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemisupModels {
    pub classifier: ClassifierModel,
    pub generator: LocalGenerator,
}

/// Per-epoch means of every objective term plus the validation error.
#[derive(Clone, Debug, PartialEq)]
pub struct SemisupEpochLog {
    pub epoch: usize,
    pub labeled: f64,
    pub unlabeled: f64,
    pub fake: f64,
    pub penalty: f64,
    pub label_preservation: f64,
    pub feature_matching: f64,
    pub omega: f64,
    pub validation_error: f64,
}

impl SemisupEpochLog {
    pub const HEADER: &'static str = "epoch,labeled,unlabeled,fake,penalty,label_preservation,feature_matching,omega,validation_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.labeled,
            self.unlabeled,
            self.fake,
            self.penalty,
            self.label_preservation,
            self.feature_matching,
            self.omega,
            self.validation_error
        )
    }
}

fn labels_of(ds: &Dataset) -> Result<&[usize]> {
    ds.labels.as_deref().ok_or_else(|| Error::invalid(format!("dataset {} has no labels", ds.name)))
}

/// Alternates a classifier step and a generator step per unlabeled minibatch.
///
/// Each minibatch pairs a chunk of unlabeled data with up to `batch_size`
/// labeled examples drawn without replacement. Training stops early when the
/// validation error plateaus.
pub fn train_semisup(
    config: &TrainConfig,
    labeled: &Dataset,
    unlabeled: &Dataset,
    validation: &Dataset,
    models: SemisupModels,
) -> Result<(SemisupModels, Vec<SemisupEpochLog>)> {
    config.validate()?;
    let SemisupModels {
        mut classifier,
        mut generator,
    } = models;
    let labels = labels_of(labeled)?;
    let val_labels = labels_of(validation)?;
    let dim = classifier.input_dim();
    for ds in [labeled, unlabeled, validation] {
        if ds.dim() != dim || generator.ambient_dim() != dim {
            return Err(Error::invalid(format!("dataset {} does not match model dimension {dim}", ds.name)));
        }
    }
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::invalid("semi-supervised training needs labeled and unlabeled data"));
    }
    Labeled::new(&labeled.points, labels).check(classifier.classes())?;

    let opts = ObjectiveOptions::from(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut c_params = classifier.params();
    let mut g_params = generator.core().params();
    let mut c_adam = AdamState::new(&c_params, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut g_adam = AdamState::new(&g_params, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut history = Vec::new();
    let mut log = Vec::new();

    for epoch in 0..config.epochs {
        let (lr_c, lr_g) = config.rates(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 7];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let xu = unlabeled.points.select_rows(chunk);
            let take = config.batch_size.min(labeled.len());
            let mut picks = index::sample(&mut rng, labeled.len(), take).into_vec();
            picks.sort_unstable();
            let xl = labeled.points.select_rows(&picks);
            let yl: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
            let lab = Labeled::new(&xl, &yl);

            let mut tape = Tape::new();
            let cv = classifier.bind(&mut tape, true);
            let terms = classifier_objective_tape(&mut tape, &classifier, &cv, &generator, lab, &xu, &opts, &mut rng)
                .map_err(tag(epoch, "classifier"))?;
            let values = read_terms(&tape, &terms);
            for (slot, (name, v)) in sums.iter_mut().zip([
                ("labeled", values.labeled),
                ("unlabeled", values.unlabeled),
                ("fake", values.fake),
                ("penalty", values.penalty),
            ]) {
                *slot += finite(epoch, name, v)?;
            }
            let grads = cv.gradients(&tape.backward(terms.total)?);
            adam_step(&mut c_params, &grads, &mut c_adam, lr_c)?;
            classifier.load_params(&c_params)?;

            let mut tape = Tape::new();
            let cv = classifier.bind(&mut tape, false);
            let gv = generator.bind(&mut tape, true);
            let g = generator_semisup_tape(&mut tape, &classifier, &cv, &generator, &gv, lab, &xu, config, &mut rng)
                .map_err(tag(epoch, "generator"))?;
            sums[4] += finite(epoch, "label preservation", tape.value(g.label_preservation).item())?;
            sums[5] += finite(epoch, "feature matching", tape.value(g.feature_matching).item())?;
            sums[6] += finite(epoch, "regularizer", tape.value(g.omega).item())?;
            let grads = gv.gradients(&tape.backward(g.total)?);
            adam_step(&mut g_params, &grads, &mut g_adam, lr_g)?;
            generator.core_mut().load_params(&g_params)?;
            batches += 1;
        }
        let predictions = predict_classes(&classifier, &validation.points)?;
        let validation_error = if val_labels.is_empty() {
            0.0
        } else {
            classification_error(&predictions, val_labels)?
        };
        let m = |i: usize| sums[i] / batches as f64;
        log.push(SemisupEpochLog {
            epoch,
            labeled: m(0),
            unlabeled: m(1),
            fake: m(2),
            penalty: m(3),
            label_preservation: m(4),
            feature_matching: m(5),
            omega: m(6),
            validation_error,
        });
        history.push(validation_error);
        if early_stop_check(&history, config.early_stop_patience, config.early_stop_min_epoch) == EarlyStop::Stop {
            break;
        }
    }
    Ok((SemisupModels { classifier, generator }, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, finite_diff_gradient};
    use crate::nets::DenseLayer;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Classifier with no trunk and a zero head: uniform over `K + 1` classes.
    fn uniform(d: usize, k: usize) -> ClassifierModel {
        let head = Mlp::new(vec![DenseLayer::new(Tensor::zeros(&[k + 1, d]), Tensor::zeros(&[k + 1]), Activation::Linear).unwrap()]).unwrap();
        ClassifierModel::new(Mlp::default(), head, k).unwrap()
    }

    fn small_gen(seed: u64) -> LocalGenerator {
        LocalGenerator::init(2, 1, &[5], Activation::Tanh, seed).unwrap()
    }

    fn small_clf(seed: u64) -> ClassifierModel {
        ClassifierModel::init(2, &[6], Activation::Tanh, 2, seed).unwrap()
    }

    #[test]
    fn predict_excludes_fake_and_breaks_ties_low() {
        assert_eq!(argmax_real(&[0.1, 2.0, -1.0, 5.0], 3), 1);
        assert_eq!(argmax_real(&[1.0, 0.0, 1.0, 0.0], 3), 0);
        assert_eq!(argmax_real(&[-3.0, 9.0], 1), 0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let clf = small_clf(3);
        let x = Tensor::matrix(3, 2, vec![0.1, 5.0, -20.0, 3.0, 0.0, 0.0]).unwrap();
        let p = clf.probabilities(&x).unwrap();
        for i in 0..3 {
            let row = p.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let real: f64 = row[..2].iter().sum();
            assert!((real + row[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_labeled_classifier_has_zero_loss() {
        // Huge margin for class 0 saturates log-softmax at exactly zero.
        let head = Mlp::new(vec![DenseLayer::new(Tensor::zeros(&[3, 2]), Tensor::vector(vec![800.0, 0.0, 0.0]), Activation::Linear).unwrap()]).unwrap();
        let clf = ClassifierModel::new(Mlp::default(), head, 2).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        let opts = ObjectiveOptions {
            manifold_penalty: false,
            ..Default::default()
        };
        let t = classifier_objective(&clf, &small_gen(0), Labeled::new(&x, &[0]), &Tensor::zeros(&[0, 2]), &opts, &mut rng(0)).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn uniform_classifier_terms() {
        let clf = uniform(2, 2);
        let x = Tensor::matrix(2, 2, vec![0.3, 0.4, 1.0, -1.0]).unwrap();
        let t = classifier_objective(&clf, &small_gen(1), Labeled::new(&x, &[0, 1]), &x, &ObjectiveOptions::default(), &mut rng(0)).unwrap();
        assert!((t.labeled - 3f64.ln()).abs() < 1e-12);
        assert!((t.unlabeled + (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((t.fake - 3f64.ln()).abs() < 1e-12);
        assert_eq!(t.penalty, 0.0);
    }

    #[test]
    fn perfect_fake_detection() {
        let head = Mlp::new(vec![DenseLayer::new(Tensor::zeros(&[3, 2]), Tensor::vector(vec![0.0, 0.0, 800.0]), Activation::Linear).unwrap()]).unwrap();
        let clf = ClassifierModel::new(Mlp::default(), head, 2).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, 0.4, 1.0, -1.0]).unwrap();
        let t = classifier_objective(&clf, &small_gen(1), Labeled::new(&Tensor::zeros(&[0, 2]), &[]), &x, &ObjectiveOptions::default(), &mut rng(0)).unwrap();
        assert_eq!(t.fake, 0.0);
    }

    #[test]
    fn label_range_is_checked() {
        let clf = uniform(2, 2);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let err = classifier_objective(&clf, &small_gen(0), Labeled::new(&x, &[2]), &x, &ObjectiveOptions::default(), &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
        assert!(label_preservation_loss(&clf, &small_gen(0), Labeled::new(&x, &[5]), 0.1, &mut rng(0)).is_err());
    }

    #[test]
    fn label_preservation_cases() {
        let x = Tensor::matrix(2, 2, vec![0.3, 0.4, 1.0, -1.0]).unwrap();
        let v = label_preservation_loss(&uniform(2, 2), &small_gen(2), Labeled::new(&x, &[0, 1]), 0.1, &mut rng(0)).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);

        let clf = small_clf(4);
        let forced = label_preservation_loss(&clf, &small_gen(2), Labeled::new(&x, &[1, 0]), 1.0, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let cv = clf.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (_, logits) = clf.forward_tape(&mut tape, &cv, xv).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[1, 0], 3).unwrap();
        assert_eq!(forced, tape.value(ce).item());
    }

    #[test]
    fn feature_matching_cases() {
        let x = Tensor::matrix(2, 2, vec![0.3, 0.4, 1.0, -1.0]).unwrap();
        assert_eq!(feature_matching_loss(&small_clf(1), &small_gen(1), &x, 1.0, &mut rng(0)).unwrap(), 0.0);

        // No trunk, so features are the points; a direct generator shifts
        // every point by (1, 1).
        let core = Mlp::new(vec![DenseLayer::new(Tensor::zeros(&[2, 3]), Tensor::vector(vec![1.0, 1.0]), Activation::Linear).unwrap()]).unwrap();
        let gen = LocalGenerator::with_parameterization(core, 2, 1, crate::geometry::Parameterization::Direct).unwrap();
        let zero_mean = Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let v = feature_matching_loss(&uniform(2, 2), &gen, &zero_mean, 0.5, &mut rng(0)).unwrap();
        assert_eq!(v, 2.0);

        let core = Mlp::new(vec![DenseLayer::new(Tensor::zeros(&[1, 2]), Tensor::vector(vec![-2.0]), Activation::Linear).unwrap()]).unwrap();
        let gen = LocalGenerator::with_parameterization(core, 1, 1, crate::geometry::Parameterization::Direct).unwrap();
        let head = Mlp::new(vec![DenseLayer::new(Tensor::zeros(&[2, 1]), Tensor::zeros(&[2]), Activation::Linear).unwrap()]).unwrap();
        let clf = ClassifierModel::new(Mlp::default(), head, 1).unwrap();
        let v = feature_matching_loss(&clf, &gen, &Tensor::matrix(1, 1, vec![3.0]).unwrap(), 0.1, &mut rng(0)).unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn generator_objective_is_sum_of_components() {
        let clf = small_clf(5);
        let gen = small_gen(6);
        let x = Tensor::matrix(3, 2, vec![0.3, 0.4, 1.0, -1.0, -0.5, 0.2]).unwrap();
        let labels = [0, 1, 1];
        let lab = Labeled::new(&x, &labels);
        let config = TrainConfig::default();
        let total = generator_semisup_objective(&clf, &gen, lab, &x, &config, &mut rng(7)).unwrap();
        let mut r = rng(7);
        let kg = label_preservation_loss(&clf, &gen, lab, config.zero_weight, &mut r).unwrap();
        let lg = feature_matching_loss(&clf, &gen, &x, config.zero_weight, &mut r).unwrap();
        let coords = subsample_coordinates(gen.coord_dim(), config.coord_sample_size, &mut r);
        let omega: f64 = (0..3)
            .map(|i| crate::geometry::regularizer_omega(&gen, &Tensor::vector(x.row(i).to_vec()), config.mu, config.eta, Some(&coords)).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((total.total - (kg + lg + omega)).abs() < 1e-12);

        let zeroed = TrainConfig {
            mu: 0.0,
            eta: 0.0,
            zero_weight: 1.0,
            ..config
        };
        let t = generator_semisup_objective(&clf, &gen, lab, &x, &zeroed, &mut rng(0)).unwrap();
        assert_eq!(t.feature_matching, 0.0);
        assert_eq!(t.omega, 0.0);
        let ce = label_preservation_loss(&clf, &gen, lab, 1.0, &mut rng(1)).unwrap();
        assert_eq!(t.total, ce);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let clf = small_clf(8);
        let gen = small_gen(9);
        let x = Tensor::matrix(3, 2, vec![0.3, 0.4, 1.0, -1.0, -0.5, 0.2]).unwrap();
        let labels = [0, 1, 1];
        let opts = ObjectiveOptions::default();
        let mut tape = Tape::new();
        let cv = clf.bind(&mut tape, true);
        let terms = classifier_objective_tape(&mut tape, &clf, &cv, &gen, Labeled::new(&x, &labels), &x, &opts, &mut rng(3)).unwrap();
        assert!(terms.penalty.is_some());
        let grads = cv.gradients(&tape.backward(terms.total).unwrap());
        let base = clf.params();
        for (name, analytic) in &grads {
            let numeric = finite_diff_gradient(
                |t| {
                    let mut p = base.clone();
                    p.insert(name.clone(), t.clone());
                    let mut c = clf.clone();
                    c.load_params(&p)?;
                    Ok(classifier_objective(&c, &gen, Labeled::new(&x, &labels), &x, &opts, &mut rng(3))?.total)
                },
                &base[name],
                1e-5,
            )
            .unwrap();
            assert_close(analytic, &numeric, 1e-5, 1e-8);
        }
    }

    #[test]
    fn semisup_training_zero_epochs_and_determinism() {
        let mut r = rng(0);
        let moons = crate::data::make_two_moons(20, 0.05, &mut r).unwrap();
        let (lab, unl) = crate::data::split_labeled(&moons, 2, &mut r).unwrap();
        let val = crate::data::make_two_moons(10, 0.05, &mut r).unwrap();
        let models = SemisupModels {
            classifier: small_clf(1),
            generator: small_gen(2),
        };
        let config = TrainConfig {
            epochs: 0,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (out, log) = train_semisup(&config, &lab, &unl, &val, models.clone()).unwrap();
        assert_eq!(out, models);
        assert!(log.is_empty());

        let config = TrainConfig { epochs: 3, ..config };
        let a = train_semisup(&config, &lab, &unl, &val, models.clone()).unwrap();
        let b = train_semisup(&config, &lab, &unl, &val, models.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
    }
}
