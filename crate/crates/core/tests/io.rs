use std::fs;
use std::path::Path;

use gep_core::datagen::{make_source, LabeledDataset, SourceSpec};
use gep_core::harness::{
    aggregate, plots, sweep_condition, BenchKind, EvaluationRecord, ExperimentConfig, Method, RunReport,
};
use gep_core::io::{
    decode_matrix, encode_matrix, ingest_logits, parse_dataset_csv, parse_report_json, read_dataset_binary,
    read_matrix, read_scores_csv, render_svg, report_json, write_dataset_binary, write_matrix, write_scores_csv,
    FormatError, Plot, PlotPoint, PlotSeries,
};
use gep_core::linalg::DenseMatrix;
use gep_core::nn::{Activation, Architecture, MlpModel};
use gep_core::rng::Rng;
use gep_core::scoring::{conf_score, ma_score, Ensemble, ScoreMethod};
use gep_core::{Dataset, Matrix};
use proptest::prelude::*;

/// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
fn crc32_reference(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

#[test]
fn empty_and_single_cell_layouts() {
    let empty = encode_matrix(&DenseMatrix::<f64>::new(0, 0, vec![]).unwrap()).unwrap();
    assert_eq!(empty.len(), 18);
    assert_eq!(&empty[..6], b"GEPB1\x01");
    assert_eq!(decode_matrix(&empty).unwrap().shape(), (0, 0));

    let one = encode_matrix(&DenseMatrix::new(1, 1, vec![1.5f64]).unwrap()).unwrap();
    assert_eq!(one.len(), 22);
    assert_eq!(&one[6..14], &[1, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(&one[14..18], &1.5f32.to_le_bytes());
    assert_eq!(
        u32::from_le_bytes(one[18..].try_into().unwrap()),
        crc32_reference(&one[..18])
    );
    assert_eq!(decode_matrix(&one).unwrap().as_slice(), &[1.5]);

    let mut flipped = one.clone();
    flipped[15] ^= 0x10;
    assert!(matches!(
        decode_matrix(&flipped),
        Err(FormatError::ChecksumMismatch { .. })
    ));
}

#[test]
fn malformed_headers_are_classified() {
    let good = encode_matrix(&DenseMatrix::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode_matrix(&magic), Err(FormatError::BadMagic)));
    let mut dtype = good.clone();
    dtype[5] = 0x02;
    assert!(matches!(decode_matrix(&dtype), Err(FormatError::UnsupportedDtype(2))));
    assert!(matches!(
        decode_matrix(&good[..good.len() - 1]),
        Err(FormatError::Truncated { .. })
    ));
    let mut longer = good.clone();
    longer.push(0);
    assert!(matches!(
        decode_matrix(&longer),
        Err(FormatError::TrailingBytes { extra: 1 })
    ));
    let mut huge = good.clone();
    huge[6..14].copy_from_slice(&[0xff; 8]);
    assert!(matches!(decode_matrix(&huge), Err(FormatError::Truncated { .. })));
    let mut nan = encode_matrix(&DenseMatrix::new(1, 2, vec![0.0f64, 0.0]).unwrap()).unwrap();
    nan[18..22].copy_from_slice(&f32::NAN.to_le_bytes());
    let n = nan.len();
    let crc = crc32_reference(&nan[..n - 4]);
    nan[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(
        decode_matrix(&nan),
        Err(FormatError::NonFinite { row: 0, col: 1 })
    ));
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Dataset = make_source(&SourceSpec {
        samples_per_class: 10,
        seed: 4,
        ..SourceSpec::default()
    })
    .unwrap();
    let path = dir.path().join("d.gepb");
    write_dataset_binary(&data, &path).unwrap();
    let back = read_dataset_binary(&path, Some(4)).unwrap();
    assert_eq!(back.labels(), data.labels());
    for (a, b) in back.features().as_slice().iter().zip(data.features().as_slice()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn csv_rejects_bad_headers_and_cells() {
    assert!(parse_dataset_csv("a,b\n1,0\n", None, "t").is_err());
    assert!(parse_dataset_csv("f0,label\nx,0\n", None, "t").is_err());
    assert!(parse_dataset_csv("f0,label\n1.0,-1\n", None, "t").is_err());
    assert!(parse_dataset_csv("f0,label\n1.0,3\n", Some(2), "t").is_err());
    let ok = parse_dataset_csv("f0,f1,label\n1.5,-2,1\n0,0,0\n", None, "t").unwrap();
    assert_eq!(ok.labels(), &[1, 0]);
    assert_eq!(ok.n_classes(), 2);
}

#[test]
fn report_json_round_trips_byte_for_byte() {
    let report = fake_sweep_report();
    let text = report_json(&report).unwrap();
    assert!(!text.contains("wall_clock"));
    let parsed = parse_report_json(&text).unwrap();
    assert_eq!(parsed.records, report.records);
    assert_eq!(report_json(&parsed).unwrap(), text);
}

fn write_members(dir: &Path, members: &[DenseMatrix<f64>]) -> Vec<String> {
    members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let name = format!("m{i}.gepb");
            write_matrix(m, &dir.join(&name)).unwrap();
            name
        })
        .collect()
}

fn manifest(dir: &Path, body: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, body.to_string()).unwrap();
    path
}

#[test]
fn logits_manifest_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = DenseMatrix::new(3, 2, vec![2.0, 0.0, 0.0, 2.0, 1.0, 0.0]).unwrap();
    let b = DenseMatrix::new(3, 2, vec![2.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
    let c = DenseMatrix::new(3, 2, vec![0.0, 2.0, 0.0, 2.0, 1.0, 0.0]).unwrap();
    let names = write_members(dir.path(), &[a, b, c]);
    let labels = DenseMatrix::new(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
    write_matrix(&labels, &dir.path().join("labels.gepb")).unwrap();
    let path = manifest(
        dir.path(),
        serde_json::json!({"n_classes": 2, "dataset": "x", "members": names, "labels": "labels.gepb"}),
    );
    let bundle = ingest_logits(&path).unwrap();
    assert_eq!((bundle.size(), bundle.n_samples()), (3, 3));
    assert_eq!(bundle.labels.as_deref(), Some(&[0, 1, 0][..]));
    assert_eq!(
        bundle.ma_scores().unwrap().scores,
        vec![2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]
    );
    assert_eq!(bundle.predictions(ScoreMethod::Ma).unwrap(), vec![0, 1, 0]);
    assert_eq!(bundle.predictions(ScoreMethod::Conf).unwrap(), vec![0, 1, 0]);

    let wide = DenseMatrix::new(3, 3, vec![0.0; 9]).unwrap();
    write_matrix(&wide, &dir.path().join("m1.gepb")).unwrap();
    match ingest_logits(&path) {
        Err(FormatError::Member { index: 1, .. }) => {}
        other => panic!("expected member 1 error, got {other:?}"),
    }
    let short = DenseMatrix::new(2, 2, vec![0.0; 4]).unwrap();
    write_matrix(&short, &dir.path().join("m1.gepb")).unwrap();
    let err = ingest_logits(&path).unwrap_err();
    assert!(matches!(err, FormatError::Member { index: 1, .. }));
    assert!(err.to_string().contains("member 1"));

    let missing = manifest(
        dir.path(),
        serde_json::json!({"n_classes": 2, "members": ["m0.gepb", "nope.gepb"]}),
    );
    assert!(matches!(
        ingest_logits(&missing),
        Err(FormatError::Member { index: 1, .. })
    ));
    let unknown = manifest(
        dir.path(),
        serde_json::json!({"n_classes": 2, "members": ["m0.gepb"], "extra": 1}),
    );
    assert!(matches!(ingest_logits(&unknown), Err(FormatError::Json(_))));
}

#[test]
fn ten_member_bundle_matches_in_process_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data: Dataset = make_source(&SourceSpec {
        samples_per_class: 25,
        seed: 8,
        ..SourceSpec::default()
    })
    .unwrap();
    let arch = Architecture::new(vec![8, 16, 4], Activation::Relu);
    let members: Vec<MlpModel<f64>> = (0..10)
        .map(|s| MlpModel::init(&arch, &mut Rng::new(50 + s)).unwrap())
        .collect();
    let logits: Vec<Matrix> = members
        .iter()
        .map(|m| m.forward_batch(data.features()).unwrap())
        .collect();
    let names = write_members(dir.path(), &logits);
    let path = manifest(dir.path(), serde_json::json!({"n_classes": 4, "members": names}));
    let bundle = ingest_logits(&path).unwrap();
    let ens = Ensemble::new(members.clone(), 0.0).unwrap();
    assert_eq!(
        bundle.ma_scores().unwrap().scores,
        ma_score(&ens, &data).unwrap().scores
    );
    let conf = conf_score(&members[0], &data).unwrap().scores;
    for (a, b) in bundle.conf_scores().unwrap().scores.iter().zip(&conf) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn scores_csv_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let data: Dataset = make_source(&SourceSpec {
        samples_per_class: 5,
        ..SourceSpec::default()
    })
    .unwrap();
    let model = MlpModel::init(&Architecture::new(vec![8, 4, 4], Activation::Tanh), &mut Rng::new(1)).unwrap();
    let scores = conf_score(&model, &data).unwrap();
    let path = dir.path().join("s.csv");
    write_scores_csv(&scores, &path).unwrap();
    assert_eq!(read_scores_csv(&path).unwrap(), scores.scores);
    fs::write(&path, "sample_index,score\n0,0.5\n2,0.5\n").unwrap();
    assert!(read_scores_csv(&path).is_err());
    fs::write(&path, "sample_index,score\n0,1.5\n").unwrap();
    assert!(read_scores_csv(&path).is_err());
    assert!(matches!(
        read_matrix(&dir.path().join("absent")),
        Err(FormatError::Io { .. })
    ));
}

fn markers(svg: &str) -> Vec<f64> {
    attr_values(svg, r#"class="marker" data-x=""#)
}

fn attr_values(svg: &str, prefix: &str) -> Vec<f64> {
    svg.match_indices(prefix)
        .map(|(i, _)| {
            let rest = &svg[i + prefix.len()..];
            rest[..rest.find('"').unwrap()].parse().unwrap()
        })
        .collect()
}

#[test]
fn single_point_plot_has_one_marker() {
    let plot = Plot {
        title: "a < b & c".into(),
        x_label: "x".into(),
        y_label: "y".into(),
        x_categories: None,
        series: vec![PlotSeries {
            label: "s".into(),
            points: vec![PlotPoint {
                x: 3.0,
                y: 0.25,
                err: None,
            }],
        }],
    };
    let svg = render_svg(&plot).unwrap();
    assert_eq!(markers(&svg), vec![3.0]);
    assert!(!svg.contains("errorbar"));
    assert!(svg.contains("a &lt; b &amp; c"));
    let empty = Plot { series: vec![], ..plot };
    assert!(render_svg(&empty).is_err());
}

fn fake_sweep_report() -> RunReport {
    let config = ExperimentConfig::default();
    let mut records = Vec::new();
    for k in [2usize, 4, 6, 8, 10] {
        for target in ["val", "id", "near", "far"] {
            for seed in 0..3 {
                let truth = 0.9 - 0.01 * seed as f64;
                let predicted = truth + 0.02 * (k as f64).recip() + 0.001 * seed as f64;
                records.push(EvaluationRecord {
                    condition: sweep_condition(k),
                    method: Method::Ma,
                    target: target.into(),
                    seed,
                    n_samples: 100,
                    true_accuracy: truth,
                    predicted_accuracy: predicted,
                    abs_error: (predicted - truth).abs(),
                    signed_error: predicted - truth,
                });
            }
        }
    }
    let summary = aggregate(&records);
    RunReport {
        kind: BenchKind::EnsembleSweep,
        config,
        records,
        summary,
        wall_clock_seconds: Some(1.0),
    }
}

#[test]
fn ensemble_size_plot_has_each_size_once_per_series() {
    let report = fake_sweep_report();
    let all = plots(&report);
    assert_eq!(all.len(), 1);
    let (name, plot) = &all[0];
    assert_eq!(name, "ensemble_size.svg");
    let svg = render_svg(plot).unwrap();
    let groups: Vec<&str> = svg.split(r#"<g class="series""#).skip(1).collect();
    assert_eq!(groups.len(), 3);
    for g in groups {
        assert_eq!(markers(g), vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(
            attr_values(g, r#"class="errorbar" data-x=""#),
            vec![2.0, 4.0, 6.0, 8.0, 10.0]
        );
    }
    assert_eq!(
        attr_values(&svg, r#"class="xtick" data-x=""#),
        vec![2.0, 4.0, 6.0, 8.0, 10.0]
    );
}

fn finite_matrix() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (0usize..6, 0usize..6).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO, r * c),
        )
    })
}

proptest! {
    #[test]
    fn binary_round_trip_is_exact_for_f32_values((r, c, v) in finite_matrix()) {
        let m = DenseMatrix::new(r, c, v.iter().map(|&x| x as f64).collect()).unwrap();
        let bytes = encode_matrix(&m).unwrap();
        prop_assert_eq!(bytes.len(), 18 + 4 * r * c);
        prop_assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn any_single_byte_flip_is_detected((r, c, v) in finite_matrix(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let m = DenseMatrix::new(r, c, v.iter().map(|&x| x as f64).collect()).unwrap();
        let mut bytes = encode_matrix(&m).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_matrix(&bytes).is_err());
    }

    #[test]
    fn decoding_arbitrary_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_matrix(&bytes);
    }

    #[test]
    fn dataset_csv_round_trips(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let labels: Vec<usize> = rows.iter().map(|_| rng.below(3)).collect();
        let data = LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels, 3, "p").unwrap();
        let text = gep_core::io::dataset_csv_string(&data);
        let back = parse_dataset_csv(&text, Some(3), "p").unwrap();
        prop_assert_eq!(back.features(), data.features());
        prop_assert_eq!(back.labels(), data.labels());
    }
}
