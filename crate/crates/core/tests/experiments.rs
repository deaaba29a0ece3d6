use kernel_attention::attention::Variant;
use kernel_attention::experiments::config::ExperimentConfig;
use kernel_attention::experiments::output::{resolve_out_dir, Provenance};
use kernel_attention::experiments::suites::run_single;
use kernel_attention::experiments::{
    run_task, SyntheticGraphTask, SyntheticSeqTask, TaskKind, ToyRegressionTask,
};
use kernel_attention::{Error, Rng};

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml("[train]\nepochs = 2\n[task.seq]\ntrain = 20\ntest = 10\n").unwrap()
}

#[test]
fn documented_schema_is_the_default() {
    let src = include_str!("../src/experiments/config.rs");
    let start = src.find("//! ```toml\n").unwrap() + "//! ```toml\n".len();
    let end = start + src[start..].find("//! ```").unwrap();
    let doc: String = src[start..end]
        .lines()
        .map(|l| l.trim_start_matches("//!").trim_start())
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(
        ExperimentConfig::from_toml(&doc).unwrap(),
        ExperimentConfig::default()
    );
}

#[test]
fn canonical_toml_round_trips_with_a_stable_hash() {
    let mut c = ExperimentConfig::default();
    c.attention.variant = Variant::Mikan;
    c.attention.copula_rho = 0.3;
    let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert_ne!(c.hash(), ExperimentConfig::default().hash());
    assert_eq!(c.hash().len(), 64);
}

#[test]
fn config_errors_are_config_errors() {
    for bad in [
        "[train]\nepoch = 5\n",
        "[nope]\n",
        "[attention]\nvariant = \"softmax\"\n",
        "[complexity]\nt_grid = [8, 12, 16, 32]\n",
    ] {
        assert!(
            matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))),
            "{bad}"
        );
    }
}

#[test]
fn tasks_are_pure_functions_of_config_and_seed() {
    let c = ExperimentConfig::default();
    let r = Rng::new(9);
    let s1 = SyntheticSeqTask::generate(&c.task.seq, &r).unwrap();
    let s2 = SyntheticSeqTask::generate(&c.task.seq, &r).unwrap();
    assert_eq!(s1.train, s2.train);
    let positives = s1.test.iter().filter(|s| s.label == 1).count();
    assert!(positives > 0 && positives < s1.test.len());
    for s in s1.train.iter().chain(&s1.test) {
        let markers = s.tokens.iter().filter(|&&t| t == c.task.seq.marker).count();
        assert_eq!(markers, s.label);
    }
    let g1 = SyntheticGraphTask::generate(&c.task.graph, &r).unwrap();
    let g2 = SyntheticGraphTask::generate(&c.task.graph, &r).unwrap();
    assert_eq!(g1.edges, g2.edges);
    assert_eq!(g1.train.len() + g1.test.len(), c.task.graph.nodes);
    let t1 = ToyRegressionTask::generate(&c.task.regression, &r).unwrap();
    assert_eq!(t1.x_train.len(), c.task.regression.train);
    assert!(t1
        .x_train
        .iter()
        .chain(&t1.x_test)
        .all(|x| (-3.0..=3.0).contains(x)));
}

#[test]
fn parallel_runs_match_sequential_runs() {
    let c = small();
    let variants = [Variant::Dot, Variant::Mikan];
    let rep = run_task(TaskKind::Seq, &variants, &[4, 2], &c).unwrap();
    let order: Vec<(Variant, u64)> = rep.runs.iter().map(|r| (r.variant, r.seed)).collect();
    assert_eq!(
        order,
        vec![
            (Variant::Dot, 2),
            (Variant::Dot, 4),
            (Variant::Mikan, 2),
            (Variant::Mikan, 4)
        ]
    );
    for r in &rep.runs {
        let alone = run_single(TaskKind::Seq, r.variant, r.seed, &c).unwrap();
        assert_eq!(alone.log.to_csv(), r.log.to_csv());
    }
    assert_eq!(
        rep.runs_csv(),
        run_task(TaskKind::Seq, &variants, &[2, 4], &c)
            .unwrap()
            .runs_csv()
    );
}

#[test]
fn csv_outputs_start_with_provenance_and_header() {
    let c = small();
    let prov = Provenance {
        seed: 7,
        config_hash: c.hash(),
    };
    let rep = run_task(TaskKind::Regression, &[Variant::IkanDirect], &[7], &c).unwrap();
    for body in [rep.runs_csv(), rep.summary_csv(), rep.logs_csv()] {
        let text = prov.csv(&body);
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            format!("# seed=7 config_hash={}", c.hash())
        );
        let header = lines.next().unwrap();
        assert!(header
            .split(',')
            .all(|h| !h.is_empty() && h.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')));
        let cols = header.split(',').count();
        assert!(lines.all(|l| l.split(',').count() == cols));
    }
}

#[test]
fn out_flag_wins_over_default() {
    let p = std::path::Path::new("/tmp/explicit");
    assert_eq!(resolve_out_dir(Some(p)), p);
}
