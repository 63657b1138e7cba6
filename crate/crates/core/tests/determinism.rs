use flowhmm::classify::{classify_all, ClassifierBank};
use flowhmm::flow::{FlowConfig, NvpConfig};
use flowhmm::model::{HmmModel, ModelSpec};
use flowhmm::par;
use flowhmm::synth::{make_corpus, make_warped_corpus, DeskPreset, Warp};
use flowhmm::trainer::{train_class_set, TrainConfig};

fn small_corpus() -> flowhmm::synth::Corpus {
    let preset = DeskPreset {
        classes: 3,
        train_per_class: 20,
        test_per_class: 10,
        ..DeskPreset::default()
    };
    make_corpus(&preset, 21).unwrap()
}

fn nvp_spec() -> ModelSpec {
    ModelSpec::flow(
        3,
        2,
        FlowConfig::Nvp(NvpConfig {
            coupling_layers: 2,
            hidden_width: Some(8),
        }),
    )
}

#[test]
fn training_and_scoring_ignore_thread_count() {
    let corpus = small_corpus();
    let sets = corpus.train_sets();
    let test: Vec<_> = corpus.test.iter().map(|u| u.features.clone()).collect();
    let cfg = TrainConfig {
        outer_iters: 2,
        max_inner_iters: 3,
        batch_size: 4,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        par::with_threads(threads, || {
            let trained = train_class_set(&sets, &nvp_spec(), &cfg).unwrap();
            let models: Vec<HmmModel> = trained.iter().map(|t| t.0.clone()).collect();
            let bank = ClassifierBank::new(corpus.labels.clone(), models.clone()).unwrap();
            let preds = classify_all(&bank, &test).unwrap();
            let scores: Vec<Vec<u64>> = preds.iter().map(|p| p.scores.iter().map(|s| s.to_bits()).collect()).collect();
            (models, scores)
        })
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn flows_fit_warped_data_better_than_gmms() {
    let corpus = make_warped_corpus(&small_corpus(), &Warp::default()).unwrap();
    let sets = corpus.train_sets();
    let score = |models: &[HmmModel]| -> f64 {
        corpus
            .test
            .iter()
            .map(|u| models[u.label].log_likelihood(&u.features).unwrap())
            .sum()
    };
    let gmm_cfg = TrainConfig {
        outer_iters: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let nvp_cfg = TrainConfig {
        outer_iters: 5,
        max_inner_iters: 10,
        batch_size: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let fit = |spec: ModelSpec, cfg: &TrainConfig| -> Vec<HmmModel> {
        train_class_set(&sets, &spec, cfg).unwrap().into_iter().map(|t| t.0).collect()
    };
    let gmm = score(&fit(ModelSpec::gmm(3, 2), &gmm_cfg));
    let nvp = score(&fit(nvp_spec(), &nvp_cfg));
    assert!(nvp > gmm, "held-out log-likelihood: NVP {nvp}, GMM {gmm}");
}
