use promptlab::backbone::BackboneConfig;
use promptlab::data::{make_synthetic, SyntheticKind, SyntheticSpec, TaskDataset};
use promptlab::experiments::{
    run_cost_report, run_layer_sweep, run_methods, run_transfer, CostSpec, SweepSpec, TransferMode,
    TransferSpec, REPORT_SCHEMA,
};
use promptlab::methods::{MethodConfig, MethodKind};
use promptlab::trainer::TrainConfig;
use promptlab::Error;

fn keyword(seed: u64, train: usize) -> TaskDataset {
    make_synthetic(&SyntheticSpec::new(
        SyntheticKind::Keyword,
        seed,
        train,
        16,
        16,
    ))
    .unwrap()
}

fn small_backbone(layers: usize) -> BackboneConfig {
    BackboneConfig {
        hidden: 8,
        layers,
        heads: 2,
        ffn_dim: 16,
        ..BackboneConfig::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        peak_lr: 5e-3,
        ..TrainConfig::default()
    }
}

fn prompt(kind: MethodKind) -> MethodConfig {
    MethodConfig {
        prompt_len: 2,
        ..MethodConfig::new(kind)
    }
}

#[test]
fn cost_report_counts_and_timings() {
    let backbones: Vec<BackboneConfig> = [(8, 1), (8, 3), (16, 2), (32, 2)]
        .into_iter()
        .map(|(n, l)| BackboneConfig {
            hidden: n,
            layers: l,
            ffn_dim: 2 * n,
            vocab_size: 30,
            ..BackboneConfig::default()
        })
        .collect();
    let methods: Vec<MethodConfig> = MethodKind::ALL
        .into_iter()
        .map(|k| MethodConfig {
            prompt_len: 4,
            ..MethodConfig::new(k)
        })
        .collect();
    let spec = CostSpec {
        backbones: backbones.clone(),
        methods: methods.clone(),
        repetitions: 5,
        workload: 2,
        seq_len: 6,
        seed: 1,
    };
    let report = run_cost_report(&spec).unwrap();
    assert_eq!(report.rows.len(), backbones.len() * methods.len());
    for row in &report.rows {
        assert!(row.train_secs_per_sample.is_finite() && row.train_secs_per_sample > 0.0);
        assert!(row.infer_secs_per_sample.is_finite() && row.infer_secs_per_sample > 0.0);
        assert_eq!(
            row.params.total,
            row.params.method_params + row.params.head_params
        );
        let (n, l) = row
            .experiment
            .trim_start_matches("cost/n")
            .split_once("-L")
            .map(|(a, b)| (a.parse::<usize>().unwrap(), b.parse::<usize>().unwrap()))
            .unwrap();
        let mc = methods.iter().find(|m| m.kind == row.method).unwrap();
        assert_eq!(row.params.method_params, mc.closed_form_params(n, l));
        if matches!(row.method, MethodKind::PromptTuning | MethodKind::Lpt) {
            assert_eq!(row.params.method_params, n * 4);
        }
    }
    let id_spam: Vec<usize> = report
        .rows
        .iter()
        .filter(|r| r.method == MethodKind::IdSpam && r.experiment.ends_with("-L2"))
        .map(|r| r.params.method_params)
        .collect();
    assert_eq!(id_spam.len(), 2);
    assert!(id_spam[0] < id_spam[1], "{id_spam:?}");
    assert!(run_cost_report(&CostSpec {
        repetitions: 4,
        ..spec
    })
    .is_err());
}

#[test]
fn sweep_is_deterministic_and_hashes_rows() {
    let spec = SweepSpec {
        dataset: keyword(2, 32),
        backbone: small_backbone(3),
        methods: vec![prompt(MethodKind::IdSpam), prompt(MethodKind::MeanPool)],
        layers: vec![2, 0, 1],
        seeds: vec![4, 5],
        train: quick_train(),
    };
    let a = run_layer_sweep(&spec).unwrap();
    let b = run_layer_sweep(&spec).unwrap();
    assert_eq!(a.rows.len(), 6);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.config_hash, y.config_hash);
        assert_eq!(
            x.metric_mean.map(f64::to_bits),
            y.metric_mean.map(f64::to_bits)
        );
        assert!(x.metric_stddev.is_some());
    }
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert!(x.record.same_run(&y.record));
    }
    let layers: Vec<_> = a.rows.iter().map(|r| (r.method, r.layer)).collect();
    assert_eq!(
        layers,
        [
            (MethodKind::IdSpam, Some(0)),
            (MethodKind::IdSpam, Some(1)),
            (MethodKind::IdSpam, Some(2)),
            (MethodKind::MeanPool, Some(0)),
            (MethodKind::MeanPool, Some(1)),
            (MethodKind::MeanPool, Some(2)),
        ]
    );
    let hashes: std::collections::HashSet<_> = a.rows.iter().map(|r| &r.config_hash).collect();
    assert_eq!(hashes.len(), 6);
    let csv = a.to_csv();
    assert!(csv.starts_with(&format!("# {REPORT_SCHEMA}\nexperiment,method,layer")));
    assert_eq!(csv.lines().count(), 2 + 6);
}

#[test]
fn transfer_preconditions() {
    let source = keyword(1, 32);
    let base = TransferSpec {
        source: source.clone(),
        target: make_synthetic(&SyntheticSpec::new(
            SyntheticKind::VocabShifted,
            1,
            32,
            16,
            16,
        ))
        .unwrap(),
        mode: TransferMode::FewShot { k: 33 },
        methods: vec![prompt(MethodKind::HeadOnly)],
        seeds: vec![1],
        backbone: small_backbone(2),
        train: quick_train(),
        few_shot_train: quick_train(),
    };
    assert!(matches!(run_transfer(&base), Err(Error::Config(_))));
    let mut renamed = source.clone();
    renamed.name = "copy".into();
    let overlapping = TransferSpec {
        target: renamed,
        mode: TransferMode::ZeroShot,
        ..base.clone()
    };
    let err = run_transfer(&overlapping).unwrap_err().to_string();
    assert!(err.contains("example ids"), "{err}");
    let ok = TransferSpec {
        mode: TransferMode::FewShot { k: 10 },
        ..base
    };
    let report = run_transfer(&ok).unwrap();
    let stats = report.runs[0].transfer.as_ref().unwrap();
    assert_eq!(stats.target_examples, 10);
    assert_eq!(stats.target_optimizer_steps, 2 * 2);
    assert_eq!(report.rows[0].metric_mean, Some(stats.target_metric));
}

#[test]
fn single_seed_reports_leave_stddev_blank() {
    let report = run_methods(
        "one",
        &keyword(3, 24),
        &small_backbone(2),
        &[prompt(MethodKind::Lora)],
        &quick_train(),
        &[9],
    )
    .unwrap();
    assert_eq!(report.rows[0].metric_stddev, None);
    let line = report.to_csv().lines().nth(2).unwrap().to_string();
    assert_eq!(line.split(',').nth(5), Some(""));
    assert!(run_methods(
        "none",
        &keyword(3, 24),
        &small_backbone(2),
        &[],
        &quick_train(),
        &[]
    )
    .is_err());
}
