//! Shared fixtures for the integration test targets.
#![allow(dead_code)]

pub mod naive;
pub mod ops;

use ebmc_core::cce::CceConfig;
use ebmc_core::emc::EnergyCoefficients;
use ebmc_core::fusion::ObjectiveWeights;
use ebmc_core::imtd::DistillConfig;
use ebmc_core::model::LossSettings;
use ebmc_core::msd::MsdConfig;
use ebmc_core::nn::ParamId;
use ebmc_core::synth::{generate_split, ModalitySpec};
use ebmc_core::{EbmcModel, GeneratorSpec, ModelDims, ModelSpec, MultimodalBatch, Tape, Tensor, TaskMode, Var};

pub const SMALL_DIMS: ModelDims = ModelDims {
    hidden: 5,
    rep: 4,
    shared: 3,
    specific: 3,
    fusion_hidden: 5,
    noise_dim: 2,
};

/// Three-modality, three-class spec small enough for finite differences.
pub fn micro_spec(seed: u64) -> GeneratorSpec {
    let m = |name: &str, dim, snr| ModalitySpec {
        name: name.into(),
        dim,
        snr,
        noise_scale: 1.0,
    };
    GeneratorSpec {
        num_classes: 3,
        modalities: vec![m("a", 4, 1.5), m("b", 3, 0.7), m("c", 3, 0.7)],
        samples_per_class: 2,
        seed,
        mode: TaskMode::Classification,
    }
}

/// A 4-sample batch where sample `seed % 4` lacks modality `seed % 3`.
pub fn micro_batch(seed: u64) -> MultimodalBatch {
    let spec = micro_spec(seed);
    let mut batch = generate_split(&spec, 4, "micro").unwrap();
    let (i, m) = (seed as usize % 4, seed as usize % 3);
    batch.present[i * 3 + m] = false;
    let d = batch.features[m].cols();
    for j in 0..d {
        batch.features[m].set(i, j, 0.0);
        batch.feature_mask[m][i * d + j] = false;
    }
    batch.check_invariants().unwrap();
    batch
}

pub fn micro_model(seed: u64, batch: &MultimodalBatch) -> EbmcModel {
    let spec = ModelSpec::for_batch(batch, 3, TaskMode::Classification, SMALL_DIMS);
    EbmcModel::new(spec, seed).unwrap()
}

/// Which objective term a probe isolates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Task,
    Msd,
    Cce,
    Emc,
    Imtd,
    Total,
}

/// Loss settings that switch on exactly `term` (or everything for `Total`).
///
/// Stop-gradient terms are kept out of the probe's path: EMC alternates
/// between β_e = γ_e = 0 (everything differentiable, flow on) and
/// δ_e = λ = 0 (no detached gradient in use); trust weights depend only on
/// teacher statistics, so IMTD and `Total` are probed through the fusion head.
pub fn settings(term: Term, seed: u64) -> LossSettings {
    let emc = if seed.is_multiple_of(2) {
        EnergyCoefficients {
            alpha_e: 1.0,
            beta_e: 0.0,
            gamma_e: 0.0,
            lambda_flow: 0.05,
            delta_e: 0.1,
        }
    } else {
        EnergyCoefficients {
            lambda_flow: 0.0,
            delta_e: 0.0,
            ..Default::default()
        }
    };
    let zero = ObjectiveWeights {
        zeta: 0.0,
        beta: 0.0,
        gamma: 0.0,
        eta: 0.0,
    };
    let weights = match term {
        Term::Task => zero,
        Term::Msd => ObjectiveWeights { zeta: 1.0, ..zero },
        Term::Cce => ObjectiveWeights { beta: 1.0, ..zero },
        Term::Emc => ObjectiveWeights { gamma: 1.0, ..zero },
        Term::Imtd => ObjectiveWeights { eta: 1.0, ..zero },
        Term::Total => ObjectiveWeights::default(),
    };
    LossSettings {
        weights,
        task: matches!(term, Term::Task | Term::Total),
        energy: matches!(term, Term::Emc | Term::Total),
        enhance: matches!(term, Term::Cce | Term::Total),
        msd: MsdConfig::default(),
        cce: CceConfig::default(),
        emc,
        imtd: DistillConfig::default(),
    }
}

/// The parameter a probe perturbs: an encoder weight, or the fusion head's
/// first layer where stop-gradient inputs would otherwise move with it.
pub fn probe_param(model: &EbmcModel, term: Term, seed: u64) -> ParamId {
    match term {
        Term::Imtd | Term::Total => model.fusion.mlp.hidden.weight,
        _ => model.msd.encoders[seed as usize % 3].hidden.weight,
    }
}

/// `step_loss` with parameter `id` replaced by the probe leaf `x`.
pub fn step_loss_at(
    model: &EbmcModel,
    batch: &MultimodalBatch,
    settings: &LossSettings,
    id: ParamId,
    tape: &mut Tape,
    x: Var,
    seed: u64,
) -> ebmc_core::Result<Var> {
    let mut bind = model.store.bind(tape, |_| false);
    bind.replace(id, x);
    Ok(model.step_loss(tape, &bind, batch, settings, seed)?.loss)
}

/// Max relative error of the finite-difference check for one term and
/// seed, with the analytic gradient's L2 norm.
pub fn term_grad_error(term: Term, seed: u64) -> (f64, f64) {
    let batch = micro_batch(seed);
    let model = micro_model(seed, &batch);
    let s = settings(term, seed);
    let id = probe_param(&model, term, seed);
    let x0: Tensor = model.store.get(id).clone();
    let f = |tape: &mut Tape, x: Var| step_loss_at(&model, &batch, &s, id, tape, x, seed);
    let mut tape = Tape::new();
    let leaf = tape.leaf(x0.clone());
    let loss = f(&mut tape, leaf).unwrap();
    tape.backward(loss).unwrap();
    let norm = tape.grad(leaf).unwrap_or_default().iter().map(|g| g * g).sum::<f64>().sqrt();
    (ebmc_core::grad_check(f, &x0, 1e-5).unwrap(), norm)
}

/// Largest |library − naive| over every metric on one random fixture.
/// Scores sit on a 0.25 grid so exact zeros and .5 ties occur.
pub fn metric_discrepancy(seed: u64) -> f64 {
    use ebmc_core::metrics::{classification_metrics, regression_metrics};
    use rand::Rng;

    let mut rng = ebmc_core::rng::rng_for(seed, "metric-fixture");
    let n = rng.random_range(5..60);
    let k = rng.random_range(2..6);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let pred: Vec<usize> = labels
        .iter()
        .map(|&y| if rng.random_bool(0.6) { y } else { rng.random_range(0..k) })
        .collect();
    let c = classification_metrics(&pred, &labels, k).unwrap();
    let mut worst = (c.accuracy - naive::accuracy(&pred, &labels)).abs();
    worst = worst.max((c.macro_f1 - naive::macro_f1(&pred, &labels, k)).abs());
    for (a, b) in c.per_class_f1.iter().zip(naive::per_class_f1(&pred, &labels, k)) {
        worst = worst.max((a - b).abs());
    }

    let grid = |rng: &mut ebmc_core::rng::SeededRng| rng.random_range(-14i32..=14) as f64 * 0.25;
    let ys: Vec<f64> = (0..n).map(|_| grid(&mut rng)).collect();
    let ps: Vec<f64> = ys
        .iter()
        .map(|&y| if rng.random_bool(0.3) { grid(&mut rng) } else { y + rng.random_range(-1.0..1.0) })
        .collect();
    let r = regression_metrics(&ps, &ys).unwrap();
    let o = naive::regression(&ps, &ys);
    let pairs = [
        (r.acc2_nonneg, o.acc2_nonneg),
        (r.f1_nonneg, o.f1_nonneg),
        (r.acc2_nonzero, o.acc2_nonzero),
        (r.f1_nonzero, o.f1_nonzero),
        (r.acc7, o.acc7),
        (r.corr, o.corr),
        (r.mae, o.mae),
    ];
    for (a, b) in pairs {
        let d = if a.is_nan() && b.is_nan() { 0.0 } else { (a - b).abs() };
        worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    worst
}
