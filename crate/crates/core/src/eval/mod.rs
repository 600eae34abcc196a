//! Error metric and the inter-case, intra-case and full evaluation protocols.
//!
//! Errors are mean absolute differences between predicted and true StO₂ in
//! [0, 1] (channel 0 of the denormalized images). Every sample is predicted
//! independently in eval mode, so results do not depend on how samples are
//! grouped into inference batches. Dropout is off unless `test_noise` is set.

mod sweep;
mod visual;

use std::cell::RefCell;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_value, CaseSamples, SamplePair};
use crate::error::{Error, Result};
use crate::nn::{Mode, NetKind, Network};
use crate::tensor::Tensor;

pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepConfig, SweepPoint, SweepReport, SWEEP_HEADER};
pub use visual::{emit_qualitative, qualitative_panel};

/// Maps a batch of N×3×S×S inputs to N×3×S×S predictions in [−1, 1].
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        (**self).predict(x)
    }
}

/// Generators predict in eval mode (running statistics, no dropout).
impl Predictor for Network {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if self.kind() != NetKind::Generator {
            return Err(Error::Contract("only a generator can predict".into()));
        }
        self.infer_in(Mode::Eval, x, None)
    }
}

/// A generator run with dropout active. Samples are predicted one at a time
/// from a single seeded stream, so scores still ignore the inference batch
/// size.
pub struct NoisyGenerator<'a> {
    net: &'a Network,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> NoisyGenerator<'a> {
    pub fn new(net: &'a Network, seed: u64) -> Result<Self> {
        if net.kind() != NetKind::Generator {
            return Err(Error::Contract("only a generator can predict".into()));
        }
        Ok(NoisyGenerator {
            net,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }
}

impl Predictor for NoisyGenerator<'_> {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dims4()?[0];
        let mut rng = self.rng.borrow_mut();
        let outs = (0..n)
            .map(|i| self.net.infer_in(Mode::Eval, &x.sample(i)?, Some(&mut *rng)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat_batch(&outs.iter().collect::<Vec<_>>())
    }
}

/// Adapts a closure into a [`Predictor`].
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&Tensor) -> Result<Tensor>> Predictor for FnPredictor<F> {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        (self.0)(x)
    }
}

/// Mean |pred − truth| over channel 0 after mapping both from [−1, 1] to
/// [0, 1]. Accepts single C×H×W images or N×C×H×W batches; a batch scores
/// the mean of its per-image errors.
pub fn mean_intensity_error(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("mean_intensity_error", pred.dims(), truth.dims()));
    }
    let (n, plane, per) = match *pred.dims() {
        [c, h, w] => (1, h * w, c * h * w),
        [n, c, h, w] => (n, h * w, c * h * w),
        ref d => return Err(Error::Contract(format!("expected an image or batch, got dims {d:?}"))),
    };
    let mut total = 0.0f64;
    for i in 0..n {
        let p = &pred.data()[i * per..i * per + plane];
        let t = &truth.data()[i * per..i * per + plane];
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| (denormalize_value(a) as f64 - denormalize_value(b) as f64).abs())
            .sum();
        total += sum / plane as f64;
    }
    Ok(total / n as f64)
}

/// Predicts every pair in chunks of `infer_batch`, returning one error per pair.
pub fn pair_errors(model: &dyn Predictor, pairs: &[&SamplePair], infer_batch: usize) -> Result<Vec<f64>> {
    if infer_batch == 0 {
        return Err(Error::Config("infer_batch must be at least 1".into()));
    }
    let mut errors = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(infer_batch) {
        let x = Tensor::stack(&chunk.iter().map(|p| &p.x).collect::<Vec<_>>())?;
        let pred = model.predict(&x)?;
        let expect = [chunk.len(), chunk[0].y.dims()[0], chunk[0].y.dims()[1], chunk[0].y.dims()[2]];
        if pred.dims() != expect {
            return Err(Error::shape("predict", pred.dims(), &expect));
        }
        for (i, p) in chunk.iter().enumerate() {
            let yhat = pred.sample(i)?.reshape(p.y.dims())?;
            errors.push(mean_intensity_error(&yhat, &p.y)?);
        }
    }
    Ok(errors)
}

/// Which crop of each test case the inter-case protocol scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropSelector {
    /// The crop nearest the image center.
    #[default]
    Center,
    /// A fixed crop index, clamped to the last crop of smaller grids.
    Index(usize),
    /// One uniformly drawn crop per case from this seed.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub selector: CropSelector,
    pub infer_batch: usize,
    /// Test cases drawn for the intra-case protocol; 0 uses every test case.
    pub intracase_cases: usize,
    pub seed: u64,
    /// Keep dropout active at test time.
    pub test_noise: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            selector: CropSelector::Center,
            infer_batch: 16,
            intracase_cases: 5,
            seed: 0,
            test_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub crop_index: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterResult {
    pub mean_error: f64,
    pub per_case: Vec<CaseScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraResult {
    pub case_id: String,
    pub mean_error: f64,
    pub per_crop: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullResult {
    pub mean_error: f64,
    pub per_case: Vec<IntraResult>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn nonempty(cases: &[&CaseSamples]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Data("no test cases to evaluate".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.pairs.is_empty()) {
        return Err(Error::Data(format!("case {} has no samples", c.case_id)));
    }
    Ok(())
}

/// One crop per held-out case, averaged over cases.
pub fn eval_intercase(model: &dyn Predictor, cases: &[&CaseSamples], selector: CropSelector, infer_batch: usize) -> Result<InterResult> {
    nonempty(cases)?;
    let mut rng = match selector {
        CropSelector::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let picks: Vec<usize> = cases
        .iter()
        .map(|c| match selector {
            CropSelector::Center => c.center_index().min(c.pairs.len() - 1),
            CropSelector::Index(i) => i.min(c.pairs.len() - 1),
            CropSelector::Random(_) => rng.as_mut().expect("seeded above").random_range(0..c.pairs.len()),
        })
        .collect();
    let pairs: Vec<&SamplePair> = cases.iter().zip(&picks).map(|(c, &i)| &c.pairs[i]).collect();
    let errors = pair_errors(model, &pairs, infer_batch)?;
    Ok(InterResult {
        mean_error: mean(&errors),
        per_case: cases
            .iter()
            .zip(&picks)
            .zip(&errors)
            .map(|((c, &crop_index), &error)| CaseScore {
                case_id: c.case_id.clone(),
                crop_index,
                error,
            })
            .collect(),
    })
}

/// Every crop of one case, averaged.
pub fn eval_intracase(model: &dyn Predictor, case: &CaseSamples, infer_batch: usize) -> Result<IntraResult> {
    nonempty(&[case])?;
    let pairs: Vec<&SamplePair> = case.pairs.iter().collect();
    let per_crop = pair_errors(model, &pairs, infer_batch)?;
    Ok(IntraResult {
        case_id: case.case_id.clone(),
        mean_error: mean(&per_crop),
        per_crop,
    })
}

/// The intra-case protocol on every given case, averaged over cases.
pub fn eval_full(model: &dyn Predictor, cases: &[&CaseSamples], infer_batch: usize) -> Result<FullResult> {
    nonempty(cases)?;
    let per_case = cases
        .iter()
        .map(|c| eval_intracase(model, c, infer_batch))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = per_case.iter().map(|r| r.mean_error).collect();
    Ok(FullResult {
        mean_error: mean(&means),
        per_case,
    })
}

/// A seeded subset of `n` cases in their original order; all cases when `n`
/// is 0 or at least the number available.
pub fn choose_cases<'a>(cases: &[&'a CaseSamples], n: usize, seed: u64) -> Vec<&'a CaseSamples> {
    if n == 0 || n >= cases.len() {
        return cases.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, cases.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cases[i]).collect()
}

/// Inter-case and intra-case errors of one model on a set of test cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inter_error: f64,
    pub intra_error: f64,
    pub inter: InterResult,
    pub intra: FullResult,
}

pub fn evaluate(model: &dyn Predictor, test_cases: &[&CaseSamples], cfg: &EvalConfig) -> Result<EvalReport> {
    let inter = eval_intercase(model, test_cases, cfg.selector, cfg.infer_batch)?;
    let chosen = choose_cases(test_cases, cfg.intracase_cases, cfg.seed);
    let intra = eval_full(model, &chosen, cfg.infer_batch)?;
    Ok(EvalReport {
        inter_error: inter.mean_error,
        intra_error: intra.mean_error,
        inter,
        intra,
    })
}

/// The predictor `cfg` asks for: `g` itself, or `g` with test-time dropout.
pub fn generator_predictor<'a>(g: &'a Network, cfg: &EvalConfig) -> Result<Box<dyn Predictor + 'a>> {
    if cfg.test_noise {
        Ok(Box::new(NoisyGenerator::new(g, crate::derive_seed(cfg.seed, STREAM_TEST_NOISE))?))
    } else {
        Ok(Box::new(g))
    }
}

const STREAM_TEST_NOISE: u64 = 5;
