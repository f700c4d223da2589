//! Deep ensembles and MC-Dropout as approximate posteriors.
//!
//! Both produce a [`PosteriorSamples`] stack: K class-probability matrices,
//! one per sampled parameter set (ensemble member or dropout mask draw).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::{check_distribution, softmax_rows, Array2, ProbMatrix, PROB_TOLERANCE};
use crate::nn::{self, forward, predict_probs, MlpSpec, Mode, ModelParams, TrainConfig};

/// Ensemble size.
pub const DEFAULT_ENSEMBLE_K: usize = 10;
/// Dropout rate of the ensemble members' hidden layers.
pub const ENSEMBLE_DROPOUT: f64 = 0.1;
/// Stochastic forward passes per input for MC-Dropout.
pub const DEFAULT_MC_PASSES: usize = 30;
/// Alternative pass count that yields the same picture.
pub const REDUCED_MC_PASSES: usize = 10;
/// Dropout rate of the MC-Dropout hidden layers.
pub const MC_DROPOUT_RATE: f64 = 0.5;

/// K×N×C stack of row-stochastic matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    k: usize,
    n: usize,
    c: usize,
    probs: Vec<f64>,
}

impl PosteriorSamples {
    /// Stacks `slices`, which must share one shape.
    pub fn from_slices(slices: Vec<ProbMatrix>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or(Error::Empty("posterior samples need at least one slice"))?;
        let (n, c) = (first.n(), first.c());
        let k = slices.len();
        let mut probs = Vec::with_capacity(k * n * c);
        for (i, s) in slices.into_iter().enumerate() {
            if s.n() != n || s.c() != c {
                return Err(Error::Shape(format!(
                    "slice {i} is {}x{}, expected {n}x{c}",
                    s.n(),
                    s.c()
                )));
            }
            probs.extend_from_slice(s.as_array().as_slice());
        }
        Ok(PosteriorSamples { k, n, c, probs })
    }

    /// Builds from a flat K·N·C buffer (slice-major), validating every row.
    pub fn from_flat(k: usize, n: usize, c: usize, probs: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Empty("posterior samples need at least one slice"));
        }
        if probs.len() != k * n * c {
            return Err(Error::Shape(format!(
                "{} values for a {k}x{n}x{c} stack",
                probs.len()
            )));
        }
        if c > 0 {
            for (r, row) in probs.chunks_exact(c).enumerate() {
                check_distribution(row).map_err(|e| {
                    Error::Domain(format!("slice {} row {}: {e}", r / n.max(1), r % n.max(1)))
                })?;
            }
        }
        Ok(PosteriorSamples { k, n, c, probs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Distribution predicted by sample `slice` for input `i`.
    #[inline]
    pub fn row(&self, slice: usize, i: usize) -> &[f64] {
        let start = (slice * self.n + i) * self.c;
        &self.probs[start..start + self.c]
    }

    pub fn slice(&self, slice: usize) -> ProbMatrix {
        let start = slice * self.n * self.c;
        let data = self.probs[start..start + self.n * self.c].to_vec();
        ProbMatrix::new_unchecked(Array2::from_vec(self.n, self.c, data).expect("slice shape"))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.probs
    }
}

/// Elementwise mean over the K slices: the Monte Carlo posterior predictive.
pub fn predictive_mean(samples: &PosteriorSamples) -> ProbMatrix {
    let (n, c) = (samples.n, samples.c);
    let first = &samples.probs[..n * c];
    let mut mean = first.to_vec();
    // entries where every slice agrees keep that value exactly
    let mut agree = vec![true; n * c];
    for s in 1..samples.k {
        let slab = &samples.probs[s * n * c..(s + 1) * n * c];
        for (j, p) in slab.iter().enumerate() {
            mean[j] += p;
            agree[j] &= *p == first[j];
        }
    }
    let k = samples.k as f64;
    for (j, m) in mean.iter_mut().enumerate() {
        *m = if agree[j] { first[j] } else { *m / k };
    }
    ProbMatrix::new_unchecked(Array2::from_vec(n, c, mean).expect("mean shape"))
}

/// Anything that can draw posterior predictive samples for a batch of inputs.
pub trait PosteriorSampler {
    fn spec(&self) -> &MlpSpec;

    fn sample_posterior_predictive(&self, x: &Array2) -> Result<PosteriorSamples>;
}

/// K independently trained networks sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub spec: MlpSpec,
    pub members: Vec<ModelParams>,
    /// Training seed of each member.
    pub seeds: Vec<u64>,
}

/// Member `i` trains with seed `base + i`, which changes both its
/// initialization and its shuffling order.
pub fn member_seed(base: u64, member: usize) -> u64 {
    base.wrapping_add(member as u64)
}

/// Trains `k` members concurrently. The result does not depend on
/// scheduling: each member is a pure function of its own seed.
pub fn train_ensemble(spec: &MlpSpec, dataset: &Dataset, cfg: &TrainConfig, k: usize) -> Result<EnsembleModel> {
    if k == 0 {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    }
    let seeds: Vec<u64> = (0..k).map(|i| member_seed(cfg.seed, i)).collect();
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let member_cfg = TrainConfig { seed, ..*cfg };
            nn::train(spec, dataset, &member_cfg).map(|t| t.params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        spec: spec.clone(),
        members,
        seeds,
    })
}

impl PosteriorSampler for EnsembleModel {
    fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// One dropout-free pass per member, in member order.
    fn sample_posterior_predictive(&self, x: &Array2) -> Result<PosteriorSamples> {
        if self.members.is_empty() {
            return Err(Error::Empty("ensemble has no members"));
        }
        let slices = self
            .members
            .par_iter()
            .map(|m| predict_probs(m, &self.spec, x))
            .collect::<Result<Vec<_>>>()?;
        PosteriorSamples::from_slices(slices)
    }
}

/// A single network whose dropout stays active at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct McDropoutModel {
    pub spec: MlpSpec,
    pub params: ModelParams,
    pub passes: usize,
    /// Seeds the mask stream used by [`PosteriorSampler::sample_posterior_predictive`].
    pub sample_seed: u64,
}

/// Trains the network behind an MC-Dropout model. The mask stream for
/// prediction is seeded from `cfg.seed`.
pub fn train_mc_dropout(spec: &MlpSpec, dataset: &Dataset, cfg: &TrainConfig, passes: usize) -> Result<McDropoutModel> {
    if passes == 0 {
        return Err(Error::Config("MC-Dropout needs at least one pass".into()));
    }
    if !spec.has_dropout() {
        log::warn!("MC-Dropout spec has no dropout; every pass will be identical");
    }
    let params = nn::train(spec, dataset, cfg)?.params;
    Ok(McDropoutModel {
        spec: spec.clone(),
        params,
        passes,
        sample_seed: cfg.seed ^ 0x6d63_5f64_726f_7021,
    })
}

impl PosteriorSampler for McDropoutModel {
    fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// `passes` stochastic passes; pass `j` draws its masks from stream `j`
    /// of the model's seed, so passes are independent of evaluation order.
    fn sample_posterior_predictive(&self, x: &Array2) -> Result<PosteriorSamples> {
        if self.passes == 0 {
            return Err(Error::Empty("MC-Dropout model with zero passes"));
        }
        let slices = (0..self.passes)
            .into_par_iter()
            .map(|pass| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
                rng.set_stream(pass as u64);
                let (logits, _) = forward(&self.params, &self.spec, x, Mode::McDropout, &mut rng)?;
                Ok(softmax_rows(&logits))
            })
            .collect::<Result<Vec<_>>>()?;
        PosteriorSamples::from_slices(slices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ensemble,
    McDropout,
}

impl Method {
    /// Number of posterior samples used by default.
    pub fn default_k(self) -> usize {
        match self {
            Method::Ensemble => DEFAULT_ENSEMBLE_K,
            Method::McDropout => DEFAULT_MC_PASSES,
        }
    }

    /// Hidden-layer dropout rate used by default.
    pub fn default_dropout(self) -> f64 {
        match self {
            Method::Ensemble => ENSEMBLE_DROPOUT,
            Method::McDropout => MC_DROPOUT_RATE,
        }
    }

    pub fn spec(self, input_dim: usize, width: usize, output_dim: usize) -> Result<MlpSpec> {
        MlpSpec::two_hidden(input_dim, width, self.default_dropout(), output_dim)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ensemble => "ensemble",
            Method::McDropout => "mc_dropout",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(Method::Ensemble),
            "mc_dropout" | "mc-dropout" | "mcdropout" => Ok(Method::McDropout),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected ensemble or mc_dropout)"
            ))),
        }
    }
}

/// Either trained model family.
#[derive(Debug, Clone, PartialEq)]
pub enum BayesModel {
    Ensemble(EnsembleModel),
    McDropout(McDropoutModel),
}

impl BayesModel {
    /// Trains with `k` members (ensemble) or `k` passes (MC-Dropout).
    pub fn train(method: Method, spec: &MlpSpec, dataset: &Dataset, cfg: &TrainConfig, k: usize) -> Result<Self> {
        Ok(match method {
            Method::Ensemble => BayesModel::Ensemble(train_ensemble(spec, dataset, cfg, k)?),
            Method::McDropout => BayesModel::McDropout(train_mc_dropout(spec, dataset, cfg, k)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            BayesModel::Ensemble(_) => Method::Ensemble,
            BayesModel::McDropout(_) => Method::McDropout,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            BayesModel::Ensemble(e) => e.members.len(),
            BayesModel::McDropout(m) => m.passes,
        }
    }
}

impl PosteriorSampler for BayesModel {
    fn spec(&self) -> &MlpSpec {
        match self {
            BayesModel::Ensemble(e) => e.spec(),
            BayesModel::McDropout(m) => m.spec(),
        }
    }

    fn sample_posterior_predictive(&self, x: &Array2) -> Result<PosteriorSamples> {
        match self {
            BayesModel::Ensemble(e) => e.sample_posterior_predictive(x),
            BayesModel::McDropout(m) => m.sample_posterior_predictive(x),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// `manifest.json` of a saved model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub method: Method,
    pub spec: MlpSpec,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
}

fn member_file(i: usize) -> String {
    format!("member_{i:03}.uqf")
}

/// Writes one weight file per network plus `manifest.json` into `dir`.
pub fn save_model(model: &BayesModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (spec, nets, seeds, sample_seed): (&MlpSpec, Vec<&ModelParams>, Vec<u64>, Option<u64>) = match model {
        BayesModel::Ensemble(e) => (&e.spec, e.members.iter().collect(), e.seeds.clone(), None),
        BayesModel::McDropout(m) => (&m.spec, vec![&m.params], vec![], Some(m.sample_seed)),
    };
    let files: Vec<String> = (0..nets.len()).map(member_file).collect();
    for (params, file) in nets.iter().zip(&files) {
        nn::save_params(params, dir.join(file))?;
    }
    let manifest = Manifest {
        format_version: 1,
        method: model.method(),
        spec: spec.clone(),
        k: model.k(),
        seeds,
        files,
        sample_seed,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<BayesModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Config(format!("no model manifest at {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.spec.validate()?;
    let mut nets = Vec::with_capacity(manifest.files.len());
    for file in &manifest.files {
        let p = nn::load_params(dir.join(file))?;
        if !p.matches(&manifest.spec) {
            return Err(Error::format(dir.join(file), "layer dims disagree with manifest spec"));
        }
        nets.push(p);
    }
    match manifest.method {
        Method::Ensemble => {
            if nets.len() != manifest.k || manifest.seeds.len() != manifest.k {
                return Err(Error::format(&path, "member count disagrees with k"));
            }
            Ok(BayesModel::Ensemble(EnsembleModel {
                spec: manifest.spec,
                members: nets,
                seeds: manifest.seeds,
            }))
        }
        Method::McDropout => {
            let params = nets
                .pop()
                .filter(|_| manifest.files.len() == 1)
                .ok_or_else(|| Error::format(&path, "MC-Dropout model needs exactly one weight file"))?;
            Ok(BayesModel::McDropout(McDropoutModel {
                spec: manifest.spec,
                params,
                passes: manifest.k,
                sample_seed: manifest.sample_seed.unwrap_or(0),
            }))
        }
    }
}

/// Checks that every slice of `samples` is row-stochastic.
pub fn validate_samples(samples: &PosteriorSamples) -> Result<()> {
    for s in 0..samples.k {
        for i in 0..samples.n {
            let row = samples.row(s, i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::Domain(format!("slice {s} row {i} sums to {sum}")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use proptest::prelude::*;
    use rand::Rng;

    fn stack(k: usize, n: usize, c: usize, seed: u64) -> PosteriorSamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(k * n * c);
        for _ in 0..k * n {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        PosteriorSamples::from_flat(k, n, c, probs).unwrap()
    }

    #[test]
    fn mean_of_opposed_one_hots_is_uniform() {
        let a = ProbMatrix::new(Array2::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let b = ProbMatrix::new(Array2::from_rows(&[[0.0, 1.0]]).unwrap()).unwrap();
        let s = PosteriorSamples::from_slices(vec![a.clone(), b]).unwrap();
        assert_eq!(predictive_mean(&s).row(0), &[0.5, 0.5]);

        let same = PosteriorSamples::from_slices(vec![a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(predictive_mean(&same), a);
    }

    #[test]
    fn mean_matches_naive_loop() {
        let s = stack(7, 5, 4, 1);
        let mean = predictive_mean(&s);
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += s.row(k, i)[j];
                }
                assert!((mean.row(i)[j] - acc / 7.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_stacks() {
        assert!(PosteriorSamples::from_slices(vec![]).is_err());
        assert!(PosteriorSamples::from_flat(1, 1, 2, vec![0.4, 0.4]).is_err());
        assert!(PosteriorSamples::from_flat(2, 1, 2, vec![0.5, 0.5]).is_err());
        let a = ProbMatrix::new(Array2::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let b = ProbMatrix::new(Array2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        assert!(PosteriorSamples::from_slices(vec![a, b]).is_err());
    }

    fn tiny_setup() -> (MlpSpec, Dataset, TrainConfig) {
        let ds = synth_blobs(3, 30, 4, 4.0, 3).unwrap();
        let spec = Method::Ensemble.spec(4, 8, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 17,
            ..TrainConfig::default()
        };
        (spec, ds, cfg)
    }

    #[test]
    fn ensemble_members_use_offset_seeds() {
        let (spec, ds, cfg) = tiny_setup();
        let e = train_ensemble(&spec, &ds, &cfg, 3).unwrap();
        assert_eq!(e.seeds, vec![17, 18, 19]);
        assert_ne!(e.members[0], e.members[1]);
        let solo = nn::train(&spec, &ds, &TrainConfig { seed: 18, ..cfg }).unwrap();
        assert_eq!(e.members[1], solo.params);
    }

    #[test]
    fn ensemble_sampling_is_eval_mode_and_ordered() {
        let (spec, ds, cfg) = tiny_setup();
        let e = train_ensemble(&spec, &ds, &cfg, 3).unwrap();
        let s = e.sample_posterior_predictive(ds.inputs()).unwrap();
        assert_eq!((s.k(), s.n(), s.c()), (3, 90, 3));
        for (i, m) in e.members.iter().enumerate() {
            assert_eq!(s.slice(i), predict_probs(m, &spec, ds.inputs()).unwrap());
        }
        assert_eq!(s, e.sample_posterior_predictive(ds.inputs()).unwrap());
    }

    #[test]
    fn identical_members_give_identical_slices() {
        let (spec, ds, cfg) = tiny_setup();
        let m = nn::train(&spec, &ds, &cfg).unwrap().params;
        let e = EnsembleModel {
            spec: spec.clone(),
            members: vec![m.clone(), m.clone(), m],
            seeds: vec![cfg.seed; 3],
        };
        let s = e.sample_posterior_predictive(ds.inputs()).unwrap();
        assert_eq!(s.slice(0), s.slice(1));
        assert_eq!(s.slice(1), s.slice(2));
    }

    #[test]
    fn mc_dropout_sampling() {
        let (_, ds, cfg) = tiny_setup();
        let spec = Method::McDropout.spec(4, 16, 3).unwrap();
        let m = train_mc_dropout(&spec, &ds, &cfg, DEFAULT_MC_PASSES).unwrap();
        let s = m.sample_posterior_predictive(ds.inputs()).unwrap();
        assert_eq!(s.k(), 30);
        assert_ne!(s.slice(0), s.slice(1));
        assert_eq!(s, m.sample_posterior_predictive(ds.inputs()).unwrap());
        validate_samples(&s).unwrap();

        let no_drop = McDropoutModel {
            spec: spec.clone().with_dropout(0.0).unwrap(),
            ..m
        };
        let s = no_drop.sample_posterior_predictive(ds.inputs()).unwrap();
        for k in 1..s.k() {
            assert_eq!(s.slice(0), s.slice(k));
        }
    }

    #[test]
    fn sampling_rejects_wrong_width() {
        let (spec, ds, cfg) = tiny_setup();
        let e = train_ensemble(&spec, &ds, &cfg, 2).unwrap();
        assert!(matches!(
            e.sample_posterior_predictive(&Array2::zeros(2, 5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn model_directory_round_trip() {
        let (spec, ds, cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let model = BayesModel::train(Method::Ensemble, &spec, &ds, &cfg, 2).unwrap();
        save_model(&model, dir.path()).unwrap();
        assert!(dir.path().join("member_000.uqf").is_file());
        assert_eq!(load_model(dir.path()).unwrap(), model);

        let mc_spec = Method::McDropout.spec(4, 8, 3).unwrap();
        let mc = BayesModel::train(Method::McDropout, &mc_spec, &ds, &cfg, 10).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_model(&mc, dir2.path()).unwrap();
        let back = load_model(dir2.path()).unwrap();
        assert_eq!(back, mc);
        assert_eq!(
            back.sample_posterior_predictive(ds.inputs()).unwrap(),
            mc.sample_posterior_predictive(ds.inputs()).unwrap()
        );

        assert!(matches!(load_model(dir.path().join("missing")), Err(Error::Config(_))));
    }

    #[test]
    fn default_hyperparameters() {
        assert_eq!(Method::Ensemble.default_k(), 10);
        assert_eq!(Method::McDropout.default_k(), 30);
        assert_eq!(Method::Ensemble.default_dropout(), 0.1);
        assert_eq!(Method::McDropout.default_dropout(), 0.5);
        assert_eq!(REDUCED_MC_PASSES, 10);
    }

    proptest! {
        #[test]
        fn mean_rows_are_stochastic(seed in any::<u64>(), k in 1usize..8, c in 2usize..10) {
            let s = stack(k, 3, c, seed);
            let m = predictive_mean(&s);
            for i in 0..3 {
                prop_assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn mean_ignores_slice_order(seed in any::<u64>(), k in 2usize..8) {
            let s = stack(k, 4, 3, seed);
            let mut slices: Vec<ProbMatrix> = (0..k).map(|i| s.slice(i)).collect();
            slices.reverse();
            let r = PosteriorSamples::from_slices(slices).unwrap();
            let a = predictive_mean(&s);
            let b = predictive_mean(&r);
            for (x, y) in a.as_array().as_slice().iter().zip(b.as_array().as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
