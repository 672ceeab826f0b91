//! Training loop, baseline, and evaluation.
//!
//! Each epoch embeds the training split without gradients, refreshes the
//! prototypes and per-class tail models, draws a fresh set of virtual
//! samples, and then takes one Adam step per mini-batch. Prototypes and
//! confidence weights are constants inside the epoch; gradients reach the
//! encoder through the source embeddings of every mixed sample.

mod config;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Method, TrainConfig};
pub use report::{EpochRecord, Histogram, RunReport, SplitReference, HISTOGRAM_BINS};

use crate::augment::{generate_virtual_batch, MixupConfig, VirtualSample};
use crate::backbone::{Encoder, GcnParams};
use crate::diff::{finite_diff_check, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::evt::{fit_class_models, normalize_weights, ood_confidence, score_samples, EvtModel, FALLBACK_OMEGA};
use crate::graph::{Dataset, Graph, Split};
use crate::metric::{argmin, compute_prototypes, log_probabilities, predict, PrototypeSet};
use crate::rationale::RationaleParams;

/// Parameters plus the encoder layout that reads them.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
}

impl Model {
    pub fn init(config: &TrainConfig, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::contract("model needs at least one feature column"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let rationale = RationaleParams::init(&mut store, &mut rng, feature_dim, config.mask_dim);
        let gcn = GcnParams::init(
            &mut store,
            &mut rng,
            feature_dim,
            config.hidden_dim,
            config.embed_dim,
            config.layers,
        );
        Ok(Self {
            store,
            encoder: Encoder {
                rationale,
                gcn,
                pooling: config.pooling,
            },
        })
    }

    pub fn embed(&self, graph: &Graph) -> Result<Vec<f64>> {
        self.encoder.embed(&self.store, graph)
    }

    /// Gradient-free embeddings paired with labels.
    pub fn labeled_embeddings(&self, graphs: &[&Graph]) -> Result<Vec<(Vec<f64>, usize)>> {
        graphs.iter().map(|g| Ok((self.embed(g)?, g.label))).collect()
    }
}

/// Negative confidence-weighted log-likelihood of a batch of virtual
/// samples. `sources` indexes into `graphs`; prototypes, λ and ω̄ are
/// constants.
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &Encoder,
    graphs: &[&Graph],
    batch: &[VirtualSample],
    protos: &PrototypeSet,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for s in batch {
        for src in [s.sources.0, s.sources.1] {
            if src >= graphs.len() {
                return Err(Error::contract(format!("source {src} outside {} graphs", graphs.len())));
            }
            let next = rows.len();
            rows.entry(src).or_insert(next);
        }
    }
    let mut order: Vec<(usize, usize)> = rows.iter().map(|(&g, &r)| (r, g)).collect();
    order.sort_unstable();
    let encoded = order
        .iter()
        .map(|&(_, g)| encoder.encode(tape, store, graphs[g]))
        .collect::<Result<Vec<_>>>()?;
    let sources = tape.concat_rows(&encoded);

    let k = protos.num_classes();
    let mut mix = Matrix::zeros(batch.len(), order.len());
    let mut weight = Matrix::zeros(batch.len(), k);
    for (b, s) in batch.iter().enumerate() {
        mix.row_mut(b)[rows[&s.sources.0]] += s.lambda;
        mix.row_mut(b)[rows[&s.sources.1]] += 1.0 - s.lambda;
        if s.label >= k {
            return Err(Error::contract(format!("label {} outside 0..{k}", s.label)));
        }
        weight.row_mut(b)[s.label] = s.omega_bar;
    }
    let mix = tape.constant(mix);
    let z = tape.matmul(mix, sources);
    let logp = log_probabilities(tape, z, protos);
    let weight = tape.constant(weight);
    let picked = tape.mul(logp, weight);
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// Fraction of `graphs` whose nearest prototype matches the label.
pub fn evaluate(model: &Model, graphs: &[&Graph], protos: &PrototypeSet) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::contract("cannot evaluate an empty graph set"));
    }
    let mut correct = 0usize;
    for g in graphs {
        if predict(&model.embed(g)?, protos)? == g.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / graphs.len() as f64)
}

/// Rejects any id outside the training split before it can feed the
/// prototypes or the tail models.
struct LeakageGuard {
    held_out: HashSet<usize>,
}

impl LeakageGuard {
    fn new(split: &Split) -> Self {
        Self {
            held_out: split.val.iter().chain(&split.test).copied().collect(),
        }
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|id| self.held_out.contains(id)) {
            Some(id) => Err(Error::Training(format!(
                "graph {id} from the validation or test split reached the prototype/EVT inputs"
            ))),
            None => Ok(()),
        }
    }
}

fn check_inputs(dataset: &Dataset, split: &Split) -> Result<()> {
    let n = dataset.graphs.len();
    let mut seen = HashSet::new();
    for &id in split.train.iter().chain(&split.val).chain(&split.test) {
        if id >= n {
            return Err(Error::Config(format!("split references graph {id} but the dataset has {n}")));
        }
        if !seen.insert(id) {
            return Err(Error::Config(format!("graph {id} appears in more than one partition")));
        }
    }
    if split.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let d = dataset.feature_dim;
    if d == 0 || dataset.graphs.iter().any(|g| g.feature_dim() != d) {
        return Err(Error::contract("dataset features missing or inconsistent; synthesize degree features first"));
    }
    let k = dataset.num_classes();
    let mut present = vec![false; k];
    for &id in &split.train {
        present[dataset.graphs[id].label] = true;
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::Config(format!("class {c} has no training graphs")));
    }
    Ok(())
}

fn gather<'a>(dataset: &'a Dataset, ids: &[usize]) -> Vec<&'a Graph> {
    ids.iter().map(|&i| &dataset.graphs[i]).collect()
}

fn prototypes_of(embeddings: &[(Vec<f64>, usize)], k: usize, epoch: usize) -> Result<PrototypeSet> {
    compute_prototypes(embeddings.iter().map(|(z, y)| (z.as_slice(), *y)), k, epoch)
}

fn accuracy_of(embeddings: &[(Vec<f64>, usize)], protos: &PrototypeSet) -> Result<f64> {
    let mut correct = 0usize;
    for (z, y) in embeddings {
        if argmin(&protos.distances(z)?) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / embeddings.len() as f64)
}

/// One pass over the training graphs with every weight set to 1.
fn real_samples(embeddings: &[(Vec<f64>, usize)], rng: &mut ChaCha8Rng) -> Vec<VirtualSample> {
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| VirtualSample {
            z: embeddings[i].0.clone(),
            label: embeddings[i].1,
            lambda: 1.0,
            sources: (i, i),
            omega: 1.0,
            omega_bar: 1.0,
        })
        .collect()
}

/// Train with `config.method`.
pub fn train(dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<RunReport> {
    let start = Instant::now();
    config.validate()?;
    check_inputs(dataset, split)?;
    let k = dataset.num_classes();
    let train_graphs = gather(dataset, &split.train);
    let val_graphs = gather(dataset, &split.val);
    let test_graphs = gather(dataset, &split.test);
    let guard = LeakageGuard::new(split);

    let mut model = Model::init(config, dataset.feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mixup = MixupConfig {
        alpha: config.alpha,
        beta: config.beta,
        virtual_count: config.virtual_count.unwrap_or(train_graphs.len()),
    };

    let mut records = Vec::new();
    let mut best: Option<(usize, f64, Vec<Matrix>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    guard.check(&split.train)?;
    let mut train_emb = model.labeled_embeddings(&train_graphs)?;

    for epoch in 1..=config.epochs {
        let protos = prototypes_of(&train_emb, k, epoch)?;
        let (mut samples, evt) = match config.method {
            Method::OodGmixup => {
                let models = fit_class_models(&train_emb, &protos, config.tail_size)?;
                let mut samples = generate_virtual_batch(&train_emb, k, &mixup, &mut rng)?;
                score_samples(&mut samples, &protos, &models)?;
                (samples, models)
            }
            Method::Erm => (real_samples(&train_emb, &mut rng), Vec::new()),
        };
        let (mean_omega, max_omega) = match config.method {
            Method::OodGmixup => {
                let mean = samples.iter().map(|s| s.omega).sum::<f64>() / samples.len() as f64;
                let max = samples.iter().map(|s| s.omega).fold(0.0, f64::max);
                (Some(mean), Some(max))
            }
            Method::Erm => (None, None),
        };

        let mut total = 0.0;
        for (b, chunk) in samples.chunks_mut(config.batch_size).enumerate() {
            if config.method == Method::OodGmixup {
                normalize_weights(chunk);
            }
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &model.store, &model.encoder, &train_graphs, chunk, &protos)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {b} ({} method, lr {}, {} epochs completed, last mean loss {})",
                    config.method,
                    config.lr,
                    records.len(),
                    records.last().map_or(f64::NAN, |r: &EpochRecord| r.train_loss)
                )));
            }
            tape.backward(loss, &mut model.store)?;
            model.store.adam_step(config.lr);
            total += value;
        }

        train_emb = model.labeled_embeddings(&train_graphs)?;
        let fresh = prototypes_of(&train_emb, k, epoch)?;
        let val_accuracy = evaluate(&model, &val_graphs, &fresh)?;
        records.push(EpochRecord {
            epoch,
            train_loss: total / samples.len() as f64,
            val_accuracy,
            evt,
            mean_omega,
            max_omega,
        });

        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.store.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }

    let (best_epoch, best_val_accuracy, snapshot) = best.ok_or_else(|| Error::Training("no epoch completed".into()))?;
    model.store.restore(&snapshot);
    let train_emb = model.labeled_embeddings(&train_graphs)?;
    let protos = prototypes_of(&train_emb, k, best_epoch)?;
    let train_accuracy = accuracy_of(&train_emb, &protos)?;
    let (test_accuracy, test_confidence) = if test_graphs.is_empty() {
        (0.0, Histogram::unit([]))
    } else {
        let models = fit_class_models(&train_emb, &protos, config.tail_size)?;
        let test_emb = model.labeled_embeddings(&test_graphs)?;
        let acc = accuracy_of(&test_emb, &protos)?;
        (acc, Histogram::unit(confidences(&test_emb, &protos, &models)?))
    };

    Ok(RunReport {
        config: config.clone(),
        split: SplitReference {
            dataset: dataset.name.clone(),
            manifest: None,
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        },
        epochs: records,
        best_epoch,
        best_val_accuracy,
        stopped_early,
        train_accuracy,
        test_accuracy,
        test_confidence,
        leakage_check_passed: true,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// The baseline: same pipeline on real embeddings only, unit weights, no
/// tail fitting.
pub fn train_erm(dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<RunReport> {
    train(
        dataset,
        split,
        &TrainConfig {
            method: Method::Erm,
            ..config.clone()
        },
    )
}

fn confidences(
    embeddings: &[(Vec<f64>, usize)],
    protos: &PrototypeSet,
    models: &[EvtModel],
) -> Result<Vec<f64>> {
    embeddings
        .iter()
        .map(|(z, _)| {
            let d = protos.distances(z)?;
            let k = argmin(&d);
            if models[k].valid {
                ood_confidence(d[k], &models[k])
            } else {
                Ok(FALLBACK_OMEGA)
            }
        })
        .collect()
}

/// Finite-difference check of the full weighted mixup loss on the first
/// `graphs.len()` graphs: embeddings, prototypes, tail fits and a scored,
/// normalized virtual batch are prepared once, then the loss is
/// re-evaluated under perturbed parameters. Returns the maximum relative
/// error over `probes` coordinates.
pub fn gradient_check(
    graphs: &[&Graph],
    num_classes: usize,
    config: &TrainConfig,
    probes: usize,
    h: f64,
) -> Result<f64> {
    config.validate()?;
    let feature_dim = graphs.first().map_or(0, |g| g.feature_dim());
    let mut model = Model::init(config, feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let emb = model.labeled_embeddings(graphs)?;
    let protos = prototypes_of(&emb, num_classes, 0)?;
    let models = fit_class_models(&emb, &protos, config.tail_size)?;
    let mixup = MixupConfig {
        alpha: config.alpha,
        beta: config.beta,
        virtual_count: config.virtual_count.unwrap_or(graphs.len()),
    };
    let mut batch = generate_virtual_batch(&emb, num_classes, &mixup, &mut rng)?;
    score_samples(&mut batch, &protos, &models)?;
    normalize_weights(&mut batch);
    let encoder = model.encoder.clone();
    let mut loss = |store: &ParamStore, tape: &mut Tape| batch_loss(tape, store, &encoder, graphs, &batch, &protos);
    finite_diff_check(&mut model.store, probes, h, config.seed, &mut loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{paths_and_cliques, paths_and_cliques_split};

    fn quick(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 50,
            hidden_dim: 16,
            embed_dim: 8,
            mask_dim: 4,
            lr: 0.01,
            batch_size: 4,
            tail_size: 5,
            patience: 50,
            seed,
            ..TrainConfig::default()
        }
    }

    fn sample(z: Vec<f64>, label: usize, lambda: f64, sources: (usize, usize), omega_bar: f64) -> VirtualSample {
        VirtualSample {
            z,
            label,
            lambda,
            sources,
            omega: omega_bar,
            omega_bar,
        }
    }

    #[test]
    fn separates_toy_set() {
        let ds = paths_and_cliques();
        let split = paths_and_cliques_split(&ds, 0);
        for method in [Method::OodGmixup, Method::Erm] {
            let report = train(&ds, &split, &quick(method, 0)).unwrap();
            assert_eq!(report.train_accuracy, 1.0, "{method}");
            assert!(report.leakage_check_passed);
            assert!(report.epochs.len() <= 50);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let ds = paths_and_cliques();
        let split = paths_and_cliques_split(&ds, 1);
        let cfg = TrainConfig { epochs: 5, ..quick(Method::OodGmixup, 3) };
        let a = train(&ds, &split, &cfg).unwrap().without_timing();
        let b = train(&ds, &split, &cfg).unwrap().without_timing();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn best_epoch_has_max_validation_accuracy() {
        let ds = paths_and_cliques();
        let split = paths_and_cliques_split(&ds, 2);
        let cfg = TrainConfig { epochs: 30, patience: 3, ..quick(Method::OodGmixup, 4) };
        let r = train(&ds, &split, &cfg).unwrap();
        let max = r.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
        assert_eq!(r.best_val_accuracy, max);
        let first_max = r.epochs.iter().find(|e| e.val_accuracy == max).unwrap().epoch;
        assert_eq!(r.best_epoch, first_max);
        assert!(r.epochs.len() <= r.best_epoch + 3);
    }

    #[test]
    fn report_round_trips() {
        let ds = paths_and_cliques();
        let split = paths_and_cliques_split(&ds, 0);
        let r = train(&ds, &split, &TrainConfig { epochs: 3, ..quick(Method::OodGmixup, 0) }).unwrap();
        let text = r.to_json().unwrap();
        let back = RunReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(r.test_confidence.counts.iter().sum::<usize>(), split.test.len());
    }

    #[test]
    fn unit_weight_loss_is_plain_log_likelihood() {
        let ds = paths_and_cliques();
        let graphs: Vec<&Graph> = ds.graphs.iter().take(6).collect();
        let model = Model::init(&quick(Method::Erm, 7), ds.feature_dim).unwrap();
        let emb = model.labeled_embeddings(&graphs).unwrap();
        let protos = prototypes_of(&emb, 2, 0).unwrap();
        let batch: Vec<_> = (0..6).map(|i| sample(emb[i].0.clone(), emb[i].1, 1.0, (i, i), 1.0)).collect();
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &model.store, &model.encoder, &graphs, &batch, &protos).unwrap();
        let expected: f64 = emb
            .iter()
            .map(|(z, y)| {
                let d = protos.distances(z).unwrap();
                let lse = d.iter().map(|x| (-x).exp()).sum::<f64>().ln();
                d[*y] + lse
            })
            .sum();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn weights_scale_terms() {
        let ds = paths_and_cliques();
        let graphs: Vec<&Graph> = ds.graphs.iter().take(4).collect();
        let model = Model::init(&quick(Method::OodGmixup, 1), ds.feature_dim).unwrap();
        let emb = model.labeled_embeddings(&graphs).unwrap();
        let protos = prototypes_of(&emb, 2, 0).unwrap();
        let one = |w: f64, lam: f64| {
            let mut tape = Tape::new();
            let b = [sample(vec![], 0, lam, (0, 2), w)];
            let l = batch_loss(&mut tape, &model.store, &model.encoder, &graphs, &b, &protos).unwrap();
            tape.value(l).item()
        };
        assert!((one(2.5, 0.3) - 2.5 * one(1.0, 0.3)).abs() < 1e-12);
        assert_eq!(one(0.0, 0.3), 0.0);
        // Mixed embedding equals the convex combination of source embeddings.
        let z: Vec<f64> = emb[0].0.iter().zip(&emb[2].0).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        let d = protos.distances(&z).unwrap();
        let lse = d.iter().map(|x| (-x).exp()).sum::<f64>().ln();
        assert!((one(1.0, 0.3) - (d[0] + lse)).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_passes() {
        let ds = paths_and_cliques();
        let graphs: Vec<&Graph> = ds.graphs.iter().take(5).collect();
        let cfg = TrainConfig { hidden_dim: 6, embed_dim: 4, mask_dim: 3, ..quick(Method::OodGmixup, 5) };
        let err = gradient_check(&graphs, 2, &cfg, 60, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn evaluate_fractions() {
        let ds = paths_and_cliques();
        let graphs: Vec<&Graph> = ds.graphs.iter().take(4).collect();
        let model = Model::init(&quick(Method::Erm, 0), ds.feature_dim).unwrap();
        let emb = model.labeled_embeddings(&graphs).unwrap();
        let protos = prototypes_of(&emb, 2, 0).unwrap();
        let preds: Vec<usize> = emb.iter().map(|(z, _)| predict(z, &protos).unwrap()).collect();
        let relabel = |f: &dyn Fn(usize, usize) -> usize| -> Vec<Graph> {
            graphs
                .iter()
                .enumerate()
                .map(|(i, g)| Graph { label: f(i, preds[i]), ..(*g).clone() })
                .collect()
        };
        let right = relabel(&|_, p| p);
        let wrong = relabel(&|_, p| 1 - p);
        let half = relabel(&|i, p| if i % 2 == 0 { p } else { 1 - p });
        for (gs, want) in [(right, 1.0), (wrong, 0.0), (half, 0.5)] {
            let refs: Vec<&Graph> = gs.iter().collect();
            assert_eq!(evaluate(&model, &refs, &protos).unwrap(), want);
        }
    }

    #[test]
    fn leakage_guard_rejects_held_out_ids() {
        let ds = paths_and_cliques();
        let split = paths_and_cliques_split(&ds, 0);
        let guard = LeakageGuard::new(&split);
        guard.check(&split.train).unwrap();
        assert!(guard.check(&[split.test[0]]).is_err());
        assert!(guard.check(&[split.val[0]]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = paths_and_cliques();
        let mut split = paths_and_cliques_split(&ds, 0);
        split.test.push(split.train[0]);
        assert!(matches!(train(&ds, &split, &quick(Method::Erm, 0)), Err(Error::Config(_))));
        let mut split = paths_and_cliques_split(&ds, 0);
        split.train.retain(|&i| ds.graphs[i].label == 0);
        let err = train(&ds, &split, &quick(Method::Erm, 0)).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = paths_and_cliques();
        let split = paths_and_cliques_split(&ds, 0);
        let cfg = TrainConfig { lr: 1e300, epochs: 20, ..quick(Method::Erm, 0) };
        match train(&ds, &split, &cfg) {
            Err(Error::Training(msg)) => assert!(msg.contains("non-finite") || msg.contains("epoch"), "{msg}"),
            other => panic!("expected a training error, got {other:?}"),
        }
    }
}
