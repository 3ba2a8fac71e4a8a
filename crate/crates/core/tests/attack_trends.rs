//! Empirical attack orderings on small trained models.

mod common;

use booster_core::attack::{self, AttackConfig, AttackLoss, Domain};
use booster_core::data::{self, Dataset};
use booster_core::nn::{self, ModelSpec, ParamSet};
use booster_core::optim::Schedule;
use booster_core::train::{self, Seeds, TrainConfig, TrainData, TrainMode};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EPS: f64 = 8.0 / 255.0;

struct Toy {
    spec: ModelSpec,
    params: ParamSet,
    test: Dataset,
}

/// Two close blobs in the plane: the boundary sits about one σ from each mean.
fn fixture(seed: u64) -> (Dataset, Dataset, Dataset) {
    let d = data::synth_blobs(2, 300, 2, 0.12, seed).unwrap();
    let (rest, test) = d.split_validation(0.3, seed ^ 5).unwrap();
    let (train, val) = rest.split_validation(0.2, seed ^ 9).unwrap();
    (train, val, test)
}

fn trained(seed: u64, init_seed: u64, mode: TrainMode, epochs: usize) -> Toy {
    let (tr, va, test) = fixture(seed);
    let spec = ModelSpec::mlp([1, 1, 2], &[16], 2);
    let init = nn::init(&spec, init_seed).unwrap();
    let mut c = TrainConfig::new(mode, Schedule::constant(0.1, epochs));
    c.batch_size = 16;
    c.stop_early = false;
    let data = TrainData { train: &tr, val: &va, test: None };
    let out = train::train(&init, &spec, &c, &data, None, Seeds { data: seed, attack: seed }, "toy").unwrap();
    Toy { spec, params: out.best, test }
}

fn robust(t: &Toy, cfg: &AttackConfig, seed: u64) -> f64 {
    train::evaluate(&t.params, &t.spec, &t.test, Some(cfg), seed).unwrap().robust.unwrap()
}

fn pgd10() -> AttackConfig {
    AttackConfig::pgd(EPS, 2.0 / 255.0, 10)
}

#[test]
fn pgd_is_no_weaker_than_fgsm_which_is_no_weaker_than_clean() {
    let mut gap = 0.0;
    for s in SEEDS {
        let t = trained(s, s + 100, TrainMode::Natural, 20);
        let clean = train::evaluate(&t.params, &t.spec, &t.test, None, 0).unwrap().clean;
        let fgsm = robust(&t, &AttackConfig::fgsm(EPS), s);
        let pgd = robust(&t, &pgd10(), s);
        assert!(clean > 0.7, "seed {s}: toy model did not train ({clean})");
        assert!(pgd <= fgsm && fgsm <= clean, "seed {s}: pgd {pgd} fgsm {fgsm} clean {clean}");
        gap += clean - pgd;
    }
    // the attacks have to bite for the ordering to mean anything
    assert!(gap / SEEDS.len() as f64 > 0.02, "mean clean-pgd gap {gap}");
}

#[test]
fn margin_and_cross_entropy_pgd_agree() {
    for s in SEEDS {
        let t = trained(s, s + 200, TrainMode::Natural, 20);
        let ce = pgd10();
        let cw = pgd10().with_loss(AttackLoss::CwMargin { kappa: 0.0 });
        let batch = t.test.batch(&(0..t.test.len()).collect::<Vec<_>>()).unwrap();
        let adv = attack::pgd(&t.params, &t.spec, &batch.images, &batch.labels, &cw, s).unwrap();
        common::within_budget(&adv, &batch.images, EPS, Domain::default()).unwrap();
        let (a, b) = (robust(&t, &ce, s), robust(&t, &cw, s));
        assert!((a - b).abs() <= 0.05, "seed {s}: ce {a} vs cw {b}");
    }
}

#[test]
fn transfer_is_no_stronger_than_white_box() {
    for s in SEEDS {
        let source = trained(s, s + 300, TrainMode::Natural, 20);
        let target = trained(s, s + 400, TrainMode::Natural, 20);
        let cfg = pgd10();
        let white = robust(&target, &cfg, s);
        let transfer = attack::transfer_eval(&source.params, &target.params, &target.spec, &target.test, &cfg, s).unwrap();
        assert!(transfer >= white, "seed {s}: transfer {transfer} < white-box {white}");
    }
}

#[test]
fn adversarial_training_raises_robust_accuracy() {
    let eps = 0.06;
    let cfg = train::pgd_budget(eps, 10);
    for s in SEEDS {
        let (_, _, test) = fixture(s);
        let spec = ModelSpec::mlp([1, 1, 2], &[16], 2);
        let init = nn::init(&spec, s + 500).unwrap();
        let before = train::evaluate(&init, &spec, &test, Some(&cfg), s).unwrap().robust.unwrap();
        let t = trained(s, s + 500, TrainMode::pgd_at(eps, 10), 20);
        let after = robust(&t, &cfg, s);
        assert!(after > before, "seed {s}: robust {before} -> {after}");
    }
}

#[test]
fn self_transfer_is_white_box() {
    let t = trained(7, 7, TrainMode::Natural, 10);
    let cfg = pgd10();
    let white = robust(&t, &cfg, 3);
    assert_eq!(attack::transfer_eval(&t.params, &t.params, &t.spec, &t.test, &cfg, 3).unwrap(), white);
}

#[test]
fn constant_target_scores_its_class_frequency() {
    let source = trained(8, 8, TrainMode::Natural, 10);
    let mut target = source.params.clone();
    for (_, q) in target.iter_mut() {
        q.value.data_mut().fill(0.0);
    }
    // all-zero logits predict class 0
    let freq = source.test.labels().iter().filter(|&&y| y == 0).count() as f64 / source.test.len() as f64;
    let acc = attack::transfer_eval(&source.params, &target, &source.spec, &source.test, &pgd10(), 1).unwrap();
    assert_eq!(acc, freq);
}
