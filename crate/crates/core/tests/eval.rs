mod common;

use std::collections::BTreeMap;
use std::fs;

use cdseg::domain::{Availability, GridShape, NUM_MODALITIES};
use cdseg::eval::{
    chance_floor, dice, evaluate_subsets, probe_dice, region_dice, region_masks, silhouette, ProbeCase, ProbeConfig,
};
use cdseg::experiments::{ablate, sweep, SWEEP_GRID};
use cdseg::losses::Lambdas;
use cdseg::model::{Model, ModelConfig};
use cdseg::phantom::MultimodalSample;
use cdseg::report::{self, render_report};
use common::checks::{tiny_dataset, tiny_train_config};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn region_composition() {
    let only_ed = region_masks(&[0, 2, 2, 0]).unwrap();
    assert_eq!(only_ed.wt, vec![false, true, true, false]);
    assert!(only_ed.tc.iter().chain(&only_ed.et).all(|&b| !b));
    let only_et = region_masks(&[3, 0, 3]).unwrap();
    assert_eq!(only_et.wt, only_et.tc);
    assert_eq!(only_et.tc, only_et.et);
    assert!(region_masks(&[0, 4]).is_err());
}

#[test]
fn dice_closed_forms() {
    let a = [true, true, false, false];
    assert_eq!(dice(&a, &a).unwrap(), 100.0);
    assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
    let p = [true, true, true, true, false, false];
    let g = [false, false, true, true, true, true];
    assert_eq!(dice(&p, &g).unwrap(), 50.0);
    assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 100.0);
    assert_eq!(dice(&[false; 3], &[true, false, false]).unwrap(), 0.0);
    assert!(dice(&[true], &[true, false]).is_err());
}

proptest! {
    #[test]
    fn regions_nest_and_dice_is_symmetric(
        labels in prop::collection::vec(0u8..4, 1..200),
        other in prop::collection::vec(0u8..4, 200),
    ) {
        let m = region_masks(&labels).unwrap();
        for i in 0..labels.len() {
            prop_assert!(!m.et[i] || m.tc[i]);
            prop_assert!(!m.tc[i] || m.wt[i]);
        }
        let other = &other[..labels.len()];
        prop_assert_eq!(region_dice(&labels, other).unwrap(), region_dice(other, &labels).unwrap());
        let d = region_dice(&labels, other).unwrap();
        prop_assert!(d.iter().all(|v| (0.0..=100.0).contains(v)));
    }
}

#[test]
fn ground_truth_segmenter_scores_one_hundred_everywhere() {
    let (_dir, data) = tiny_dataset(6, 16, 0);
    let oracle = |case: &MultimodalSample, _: Availability| Ok(case.label_map.clone());
    let grid = evaluate_subsets(&oracle, &data.test).unwrap();
    assert_eq!(grid.rows.len(), 15);
    assert!(grid.rows.iter().all(|r| [r.wt, r.tc, r.et] == [100.0; 3]));
    assert_eq!(grid.macro_avg, 100.0);
    assert!(evaluate_subsets(&oracle, &[]).is_err());

    let background = |case: &MultimodalSample, _: Availability| Ok(vec![0; case.label_map.len()]);
    let grid = evaluate_subsets(&background, &data.test).unwrap();
    assert_eq!(grid.macro_avg, 0.0);
}

#[test]
fn subset_grid_of_a_model_is_deterministic() {
    let (_dir, data) = tiny_dataset(6, 16, 1);
    let model = Model::new(ModelConfig { grid: GridShape::cube(16), ..ModelConfig::default() }, 3).unwrap();
    let a = evaluate_subsets(&model, &data.test).unwrap();
    assert_eq!(a, evaluate_subsets(&model, &data.test).unwrap());
    let labels: Vec<String> = a.rows.iter().map(|r| r.label.clone()).collect();
    let expected: Vec<String> = Availability::all_subsets().iter().map(|s| s.label()).collect();
    assert_eq!(labels, expected);
    let mean_wt = a.rows.iter().map(|r| r.wt).sum::<f64>() / 15.0;
    assert!((a.means[0] - mean_wt).abs() < 1e-12);
}

#[test]
fn silhouette_of_separated_and_identical_clouds() {
    let mut r = common::rng(4);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for c in 0..4 {
        for _ in 0..10 {
            let mut p = [0.0; 3];
            p[c % 3] = if c == 3 { -50.0 } else { 50.0 };
            points.push(p.iter().map(|v| v + r.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    assert!(silhouette(&points, &labels).unwrap() > 0.9);
    let same = vec![vec![1.0, 2.0]; 8];
    assert_eq!(silhouette(&same, &[0, 0, 1, 1, 2, 2, 3, 3]).unwrap(), 0.0);
    assert!(silhouette(&same, &[0; 8]).is_err());
}

fn label_only_case(labels: Vec<u8>, grid: GridShape) -> MultimodalSample {
    MultimodalSample {
        id: String::new(),
        grid,
        volumes: std::array::from_fn(|_| Vec::new()),
        availability: Availability::ALL,
        label_map: labels,
        style_records: BTreeMap::new(),
    }
}

#[test]
fn chance_floor_matches_brute_force() {
    let grid = GridShape::new(2, 2, 2);
    let mut r = common::rng(5);
    for _ in 0..10 {
        let cases: Vec<MultimodalSample> = (0..4)
            .map(|_| {
                label_only_case(
                    (0..8).map(|_| if r.random_bool(0.4) { r.random_range(1..4) } else { 0 }).collect(),
                    grid,
                )
            })
            .collect();
        let mut best = 0.0f64;
        for bits in 0u32..256 {
            let mask: Vec<bool> = (0..8).map(|i| bits >> i & 1 == 1).collect();
            let score: f64 =
                cases.iter().map(|c| dice(&mask, &region_masks(&c.label_map).unwrap().wt).unwrap()).sum::<f64>() / 4.0;
            best = best.max(score);
        }
        assert!((chance_floor(&cases).unwrap() - best).abs() < 1e-9);
    }
}

fn probe_split(data: &[MultimodalSample], features: impl Fn(&MultimodalSample) -> Vec<f32>) -> Vec<(Vec<f32>, &[u8])> {
    data.iter().map(|c| (features(c), c.label_map.as_slice())).collect()
}

fn as_cases<'a>(v: &'a [(Vec<f32>, &'a [u8])]) -> Vec<ProbeCase<'a>> {
    v.iter().map(|(f, l)| ProbeCase { features: f.clone(), labels: l }).collect()
}

#[test]
fn probe_reads_informative_features_and_not_noise() {
    let (_dir, data) = tiny_dataset(40, 16, 6);
    let config = ModelConfig { grid: GridShape::cube(16), ..ModelConfig::default() };
    let dim = NUM_MODALITIES * config.bias_dim;
    assert_eq!(dim, 64);
    let probe = ProbeConfig::default();
    let floor = chance_floor(&data.test).unwrap();

    // Tumour fraction in each 4^3 block: 64 features that locate the tumour.
    let blocks = |c: &MultimodalSample| {
        let wt = region_masks(&c.label_map).unwrap().wt;
        let mut f = vec![0.0f32; 64];
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    if wt[(z * 16 + y) * 16 + x] {
                        f[(z / 4 * 4 + y / 4) * 4 + x / 4] += 1.0 / 64.0;
                    }
                }
            }
        }
        f
    };
    let (tr, te) = (probe_split(&data.train, blocks), probe_split(&data.test, blocks));
    let informed = probe_dice(&config, &as_cases(&tr), &as_cases(&te), &probe).unwrap();

    let mut r = common::rng(7);
    let mut noise = |_: &MultimodalSample| (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect::<Vec<f32>>();
    let tr: Vec<_> = data.train.iter().map(|c| (noise(c), c.label_map.as_slice())).collect();
    let te: Vec<_> = data.test.iter().map(|c| (noise(c), c.label_map.as_slice())).collect();
    let blind = probe_dice(&config, &as_cases(&tr), &as_cases(&te), &probe).unwrap();

    assert!((0.0..=100.0).contains(&blind) && (0.0..=100.0).contains(&informed));
    assert!(informed > floor + 5.0, "informed probe {informed} vs floor {floor}");
    // Uninformative features cannot beat the best constant mask; the argmax of
    // a mean-frequency map sits somewhat below it.
    assert!(blind <= floor + 2.0 && blind >= 0.6 * floor, "noise probe {blind} vs floor {floor}");
    assert!(probe_dice(&config, &[], &as_cases(&te), &probe).is_err());
}

#[test]
fn ablation_and_sweep_tables_have_the_right_shape() {
    let (_dir, data) = tiny_dataset(6, 16, 8);
    let cfg = tiny_train_config(16, 1, 8);
    let root = tempfile::tempdir().unwrap();

    let t = ablate(&cfg, &data, &[0], root.path()).unwrap();
    let names: Vec<&str> = t.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Baseline (L_seg only)", "+ L_CVAE", "+ L_HSIC", "+ L_RC", "+ L_conf", "+ L_dis (full)"]);
    assert_eq!(t.rows[0].lambdas, Lambdas::ZERO);
    assert_eq!(t.rows[5].lambdas, cfg.lambdas);
    for row in &t.rows {
        assert!((row.avg - (row.wt + row.tc + row.et) / 3.0).abs() < 1e-9);
    }

    let s = sweep(&cfg, &data, &[0], root.path()).unwrap();
    assert_eq!(s.rows.len(), 15);
    for (block, (name, values)) in SWEEP_GRID.iter().enumerate() {
        let rows = &s.rows[block * 3..block * 3 + 3];
        assert!(rows.iter().zip(values).all(|(r, v)| r.coefficient == *name && r.value == *v));
        let avgs: Vec<f64> = rows.iter().map(|r| r.row.avg).collect();
        let max = avgs.iter().cloned().fold(f64::MIN, f64::max);
        let min = avgs.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!(s.ranges[block], (name.to_string(), max - min));
    }
    // The default setting appears once per block and is the same cached run,
    // which is also the full row of the ladder.
    let defaults: Vec<_> = s.rows.iter().filter(|r| r.row.lambdas == cfg.lambdas).map(|r| &r.row.per_seed).collect();
    assert_eq!(defaults.len(), 5);
    assert!(defaults.iter().all(|d| **d == t.rows[5].per_seed));

    // A second call reuses every run.
    assert_eq!(sweep(&cfg, &data, &[0], root.path()).unwrap(), s);
}

fn count_tables(md: &str) -> usize {
    md.lines().filter(|l| l.starts_with('|') && l.trim_matches(|c| "|-: ".contains(c)).is_empty()).count()
}

#[test]
fn report_renders_every_artifact_and_is_pure() {
    let (_dir, data) = tiny_dataset(10, 16, 9);
    let cfg = tiny_train_config(16, 1, 9);
    let runs = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let model = Model::new(cfg.model_config(), 9).unwrap();

    let (text, missing) = render_report(out.path()).unwrap();
    assert!(text.contains("No artifacts found"));
    assert_eq!(missing.len(), 5);

    report::write_grid(out.path(), &evaluate_subsets(&model, &data.test).unwrap()).unwrap();
    let (partial, missing) = render_report(out.path()).unwrap();
    assert_eq!(count_tables(&partial), 1);
    assert!(missing.contains(&report::SWEEP_JSON.to_string()));
    assert!(partial.contains("Missing artifacts:"));

    report::write_ablation(out.path(), &ablate(&cfg, &data, &[0], runs.path()).unwrap()).unwrap();
    report::write_sweep(out.path(), &sweep(&cfg, &data, &[0], runs.path()).unwrap()).unwrap();
    let diag = cdseg::eval::disentanglement_report(
        &model,
        &data.train,
        &data.test,
        &ProbeConfig { epochs: 1, ..ProbeConfig::default() },
    )
    .unwrap();
    report::write_json(&out.path().join(report::DISENTANGLEMENT_JSON), &diag).unwrap();
    let pngs = report::write_heatmaps(&model, &data.test, out.path(), 2).unwrap();
    assert_eq!(pngs.len(), 2);

    let (full, missing) = render_report(out.path()).unwrap();
    assert!(missing.is_empty(), "{missing:?}");
    assert_eq!(count_tables(&full), 3);
    assert_eq!(full.matches("```json").count(), 1);
    assert!(full.contains(&format!("({}/", report::HEATMAP_DIR)));
    assert_eq!(render_report(out.path()).unwrap().0, full);

    let csv = fs::read_to_string(out.path().join("subset_grid.csv")).unwrap();
    let body = csv.lines().skip(1).filter(|l| !l.starts_with("Average")).count();
    assert_eq!(body, 15, "{csv}");
}

#[test]
fn disentanglement_scores_stay_in_range() {
    let (_dir, data) = tiny_dataset(10, 16, 10);
    let model = Model::new(ModelConfig { grid: GridShape::cube(16), ..ModelConfig::default() }, 10).unwrap();
    let r = cdseg::eval::disentanglement_report(
        &model,
        &data.train,
        &data.test,
        &ProbeConfig { epochs: 1, ..ProbeConfig::default() },
    )
    .unwrap();
    assert!((-1.0..=1.0).contains(&r.bias_cluster_score));
    assert!((0.0..=1.0).contains(&r.causal_modality_leak));
    assert!((0.0..=100.0).contains(&r.nde_probe_dice) && (0.0..=100.0).contains(&r.nde_chance_floor));
}
