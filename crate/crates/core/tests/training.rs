use std::sync::OnceLock;

use agrekd::data::{generate, generate_splits, GroupedDataset, Split, SplitFractions, SpuriousSpec};
use agrekd::debias::{dfr_retrain, features, DfrConfig};
use agrekd::engine::{alignment_records, distill, train_erm, DistillReport, Method, TeacherEnsemble, TrainConfig};
use agrekd::eval::evaluate;
use agrekd::model::{Layer, Mlp};
use agrekd::tensor::{Rng, Tensor};
use agrekd::weighting::WeightingConfig;
use agrekd::Error;

struct Fixture {
    train: GroupedDataset,
    heldout: GroupedDataset,
    test: GroupedDataset,
    erm: Vec<Mlp>,
}

/// A small spurious problem with four quickly trained ERM teachers.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SpuriousSpec {
            n: 3000,
            seed: 11,
            ..SpuriousSpec::default()
        };
        let (train, heldout, test) = generate_splits(&spec, SplitFractions::default()).unwrap();
        let erm = (0..4)
            .map(|i| {
                let cfg = TrainConfig {
                    epochs: 8,
                    seed: 100 + i,
                    hidden: vec![32, 32],
                    method: Method::OneHot,
                    ..TrainConfig::default()
                };
                train_erm(&cfg, &train).unwrap()
            })
            .collect();
        Fixture { train, heldout, test, erm }
    })
}

fn student_cfg(method: Method) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed: 5,
        method,
        ..TrainConfig::student()
    }
}

fn small_train() -> GroupedDataset {
    let f = fixture();
    let idx: Vec<usize> = (0..400).collect();
    f.train.subset(&idx).unwrap()
}

fn run(method: Method, train: &GroupedDataset, ens: &TeacherEnsemble) -> (Mlp, DistillReport) {
    let cfg = student_cfg(method);
    let init = cfg.init_model(train.num_features(), 2).unwrap();
    distill(&cfg, train, ens, init, None).unwrap()
}

fn ensemble(teachers: Vec<Mlp>, biased: &Mlp) -> TeacherEnsemble {
    let mask = vec![false; teachers.len()];
    TeacherEnsemble::new(teachers, Some(biased.clone()), mask).unwrap()
}

fn max_abs_diff(a: &Mlp, b: &Mlp) -> f64 {
    a.flatten_params()
        .data()
        .iter()
        .zip(b.flatten_params().data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn erm_fits_separable_data() {
    let mut rng = Rng::new(1);
    let (mut xs, mut y) = (Vec::new(), Vec::new());
    for i in 0..200 {
        let c = i % 2;
        xs.push(if c == 1 { 2.0 } else { -2.0 } + 0.3 * rng.normal());
        xs.push(rng.normal());
        y.push(c);
    }
    let a: Vec<usize> = (0..200).map(|i| (i / 2) % 2).collect();
    let ds = GroupedDataset::new(Tensor::matrix(200, 2, xs).unwrap(), y, a, vec![Split::Train; 200], 2).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    assert_eq!(evaluate(&train_erm(&cfg, &ds).unwrap(), &ds).unwrap().average_accuracy, 1.0);
}

#[test]
fn erm_is_deterministic() {
    let train = small_train();
    let cfg = TrainConfig {
        epochs: 2,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    assert_eq!(train_erm(&cfg, &train).unwrap(), train_erm(&cfg, &train).unwrap());
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    assert_ne!(train_erm(&cfg, &train).unwrap(), train_erm(&other, &train).unwrap());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let train = small_train();
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e200,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    assert!(matches!(train_erm(&cfg, &train), Err(Error::Divergence { .. })));
}

#[test]
fn every_method_is_deterministic() {
    let f = fixture();
    let train = small_train();
    let ens = ensemble(f.erm[1..].to_vec(), &f.erm[0]);
    for method in Method::ALL {
        let (a, ra) = run(method, &train, &ens);
        let (b, rb) = run(method, &train, &ens);
        assert_eq!(a, b, "{method}");
        assert_eq!(ra, rb, "{method}");
    }
}

#[test]
fn distillation_never_reads_labels() {
    let f = fixture();
    let train = small_train();
    let mut y = train.y().to_vec();
    Rng::new(3).shuffle(&mut y);
    let relabeled = train.with_labels(y).unwrap();
    let ens = ensemble(f.erm[1..].to_vec(), &f.erm[0]);
    for method in [Method::Aver, Method::Random, Method::Aekd, Method::Agrekd] {
        let (a, ra) = run(method, &train, &ens);
        let (b, rb) = run(method, &relabeled, &ens);
        assert_eq!(a, b, "{method}");
        assert_eq!(ra, rb, "{method}");
    }
}

#[test]
fn single_teacher_ensembles_reduce_to_plain_kd() {
    let f = fixture();
    let train = small_train();
    let ens = ensemble(vec![f.erm[1].clone()], &f.erm[0]);
    let (direct, _) = run(Method::Random, &train, &ens);
    for method in [Method::Aver, Method::Aekd, Method::Agrekd] {
        let (m, _) = run(method, &train, &ens);
        assert!(max_abs_diff(&m, &direct) <= 1e-10, "{method}: {}", max_abs_diff(&m, &direct));
    }
}

#[test]
fn teachers_identical_to_biased_fall_back_to_aver() {
    let f = fixture();
    let train = small_train();
    let ens = ensemble(vec![f.erm[0].clone(); 3], &f.erm[0]);
    let (aver, ra) = run(Method::Aver, &train, &ens);
    let (agre, rg) = run(Method::Agrekd, &train, &ens);
    assert!(max_abs_diff(&aver, &agre) <= 1e-10, "{}", max_abs_diff(&aver, &agre));
    for (a, g) in ra.epochs.iter().zip(&rg.epochs) {
        assert!((a.train_loss - g.train_loss).abs() <= 1e-10);
        assert!(g.mean_weight_biased.unwrap().abs() <= 1e-12);
    }
}

#[test]
fn inconsistent_ensembles_are_config_errors() {
    let f = fixture();
    let train = small_train();
    let cfg = student_cfg(Method::Agrekd);
    let init = cfg.init_model(12, 2).unwrap();
    let no_biased = TeacherEnsemble::new(vec![f.erm[1].clone()], None, vec![false]).unwrap();
    assert!(matches!(distill(&cfg, &train, &no_biased, init.clone(), None), Err(Error::Config(_))));

    let empty = TeacherEnsemble::new(vec![], Some(f.erm[0].clone()), vec![]).unwrap();
    let aver = student_cfg(Method::Aver);
    assert!(matches!(distill(&aver, &train, &empty, init.clone(), None), Err(Error::Config(_))));

    let narrow = Mlp::new(&[3, 4, 2], &mut Rng::new(0)).unwrap();
    assert!(TeacherEnsemble::new(vec![f.erm[1].clone(), narrow], None, vec![false, false]).is_err());
    assert!(TeacherEnsemble::new(vec![f.erm[1].clone()], None, vec![]).is_err());
}

#[test]
fn report_tracks_monitor_and_weights() {
    let f = fixture();
    let train = small_train();
    let teachers = vec![dfr_retrain(&f.erm[1], &f.heldout, &quick_dfr(0)).unwrap(), f.erm[2].clone()];
    let ens = TeacherEnsemble::new(teachers, Some(f.erm[0].clone()), vec![true, false]).unwrap();
    let cfg = student_cfg(Method::Agrekd);
    let init = cfg.init_model(12, 2).unwrap();
    let (_, report) = distill(&cfg, &train, &ens, init, Some(&f.heldout)).unwrap();
    assert_eq!(report.epochs.len(), 2);
    for e in &report.epochs {
        assert!(e.test_wga.unwrap() <= e.test_avg_acc.unwrap());
        assert_eq!(e.group_accs.as_ref().unwrap().len(), 4);
        assert!(e.mean_weight_debiased.is_some() && e.mean_weight_biased.is_some());
    }
    let json = report.to_json().unwrap();
    for key in ["train_loss", "test_avg_acc", "test_wga", "group_accs", "mean_weight_debiased", "mean_weight_biased"] {
        assert!(json.contains(key), "{key}");
    }
    let (_, plain) = run(Method::Aver, &train, &ens);
    assert!(plain.epochs.iter().all(|e| e.mean_weight_debiased.is_none() && e.test_wga.is_none()));
}

fn quick_dfr(seed: u64) -> DfrConfig {
    DfrConfig {
        epochs: 30,
        seed,
        ..DfrConfig::default()
    }
}

#[test]
fn dfr_freezes_the_backbone() {
    let f = fixture();
    let out = dfr_retrain(&f.erm[0], &f.heldout, &quick_dfr(0)).unwrap();
    let frozen = |m: &Mlp| -> Vec<f64> {
        m.layers()[..m.layers().len() - 1]
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    };
    let drift: f64 = frozen(&out).iter().zip(frozen(&f.erm[0])).map(|(a, b)| (a - b).abs()).sum();
    assert_eq!(drift, 0.0);
    assert_ne!(out.layers().last(), f.erm[0].layers().last());
}

#[test]
fn dfr_raises_worst_group_accuracy() {
    let f = fixture();
    let before = evaluate(&f.erm[0], &f.heldout).unwrap().wga;
    let after = evaluate(&dfr_retrain(&f.erm[0], &f.heldout, &quick_dfr(0)).unwrap(), &f.heldout).unwrap().wga;
    assert!(after > before + 0.1, "{before} -> {after}");
}

#[test]
fn dfr_twice_barely_moves_group_accuracies() {
    let f = fixture();
    let once = dfr_retrain(&f.erm[0], &f.heldout, &quick_dfr(0)).unwrap();
    let twice = dfr_retrain(&once, &f.heldout, &quick_dfr(1)).unwrap();
    let (a, b) = (evaluate(&once, &f.test).unwrap(), evaluate(&twice, &f.test).unwrap());
    for (g, acc) in &a.per_group_accuracy {
        assert!((acc - b.per_group_accuracy[g]).abs() <= 0.02, "group {g}: {acc} vs {}", b.per_group_accuracy[g]);
    }
}

#[test]
fn dfr_on_a_solved_problem_keeps_the_head() {
    // features are x itself (identity hidden layer on non-negative inputs)
    let mut rng = Rng::new(2);
    let (mut xs, mut y, mut a) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..64 {
        let (c, s) = (i % 2, (i / 2) % 2);
        xs.extend([if c == 1 { 3.0 } else { 1.0 } + 0.1 * rng.uniform(), if c == 0 { 3.0 } else { 1.0 }]);
        y.push(c);
        a.push(s);
    }
    let ds = GroupedDataset::new(Tensor::matrix(64, 2, xs).unwrap(), y, a, vec![Split::HeldoutValid; 64], 2).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let head = Tensor::from_rows(&[vec![-20.0, 20.0], vec![20.0, -20.0]]).unwrap();
    let model = Mlp::from_layers(vec![
        Layer { weight: eye, bias: Tensor::zeros(&[2]) },
        Layer { weight: head, bias: Tensor::zeros(&[2]) },
    ])
    .unwrap();
    assert_eq!(evaluate(&model, &ds).unwrap().wga, 1.0);
    let cfg = DfrConfig {
        epochs: 5,
        batch_size: 8,
        l2_penalty: 0.0,
        reinit_last_layer: false,
        standardize: false,
        ..DfrConfig::default()
    };
    let out = dfr_retrain(&model, &ds, &cfg).unwrap();
    assert!(max_abs_diff(&out, &model) <= 1e-6, "{}", max_abs_diff(&out, &model));
}

#[test]
fn dfr_needs_every_group() {
    let f = fixture();
    let keep: Vec<usize> = (0..f.heldout.len()).filter(|&i| f.heldout.g()[i] != 1).collect();
    let partial = f.heldout.subset(&keep).unwrap();
    assert!(matches!(dfr_retrain(&f.erm[0], &partial, &quick_dfr(0)), Err(Error::Data(_))));
}

#[test]
fn features_then_head_is_the_forward_pass() {
    let f = fixture();
    let x = f.heldout.x();
    let split = f.erm[0].head(&features(&f.erm[0], x).unwrap()).unwrap();
    let full = f.erm[0].logits(x).unwrap();
    assert!(split.data().iter().zip(full.data()).all(|(a, b)| (a - b).abs() <= 1e-12));

    let zero = Mlp::zeros(&[3, 4, 2]).unwrap();
    assert!(features(&zero, &Tensor::zeros(&[2, 3])).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn features_by_hand() {
    let w = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
    let model = Mlp::from_layers(vec![
        Layer { weight: w, bias: Tensor::vector(vec![0.0, 1.0]) },
        Layer { weight: Tensor::zeros(&[2, 2]), bias: Tensor::zeros(&[2]) },
    ])
    .unwrap();
    // [2, 1]·W + b = [2.5, 1.0]; [-2, 1]·W + b = [-1.5, 5.0] -> relu [0, 5]
    let x = Tensor::from_rows(&[vec![2.0, 1.0], vec![-2.0, 1.0]]).unwrap();
    assert_eq!(features(&model, &x).unwrap().data(), &[2.5, 1.0, 0.0, 5.0]);
}

fn mean_weights(records: &[agrekd::weighting::AlignmentRecord], debiased: &[bool]) -> (f64, f64) {
    let (mut d, mut nd, mut e, mut ne) = (0.0, 0, 0.0, 0);
    for r in records {
        if debiased[r.teacher] {
            d += r.weight;
            nd += 1;
        } else {
            e += r.weight;
            ne += 1;
        }
    }
    (d / nd as f64, e / ne as f64)
}

#[test]
fn swapping_the_biased_designation_inverts_the_weighting() {
    let f = fixture();
    let dfr: Vec<Mlp> = (0..2).map(|i| dfr_retrain(&f.erm[i], &f.heldout, &quick_dfr(i as u64)).unwrap()).collect();
    let teachers = vec![dfr[1].clone(), f.erm[2].clone(), f.erm[3].clone()];
    let mask = vec![true, false, false];
    let student = train_erm(
        &TrainConfig {
            epochs: 3,
            seed: 9,
            method: Method::OneHot,
            ..TrainConfig::student()
        },
        &f.train,
    )
    .unwrap();
    let kd = student_cfg(Method::Agrekd).kd;
    let w = WeightingConfig::default();

    let erm_biased = TeacherEnsemble::new(teachers.clone(), Some(f.erm[0].clone()), mask.clone()).unwrap();
    let (deb, erm) = mean_weights(&alignment_records(&student, &f.heldout, &erm_biased, &kd, &w).unwrap(), &mask);
    assert!(deb > erm, "ERM as biased: debiased {deb} vs ERM {erm}");

    let dfr_biased = TeacherEnsemble::new(teachers, Some(dfr[0].clone()), mask.clone()).unwrap();
    let (deb, erm) = mean_weights(&alignment_records(&student, &f.heldout, &dfr_biased, &kd, &w).unwrap(), &mask);
    assert!(deb < erm, "DFR as biased: debiased {deb} vs ERM {erm}");
}

#[test]
fn generated_rows_follow_the_spec() {
    let spec = SpuriousSpec {
        n: 1000,
        rho: 1.0,
        ..SpuriousSpec::default()
    };
    let ds = generate(&spec).unwrap();
    assert!(ds.y().iter().zip(ds.a()).all(|(y, a)| y == a));
}
