use proptest::prelude::*;
use survfuse::ensemble::{
    average_risks, read_risks, standardize_risks, write_risks, EnsembleSpec, Normalization,
};
use survfuse::{Error, RiskScore};

fn risks(v: &[f64]) -> Vec<RiskScore> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| RiskScore::new(format!("p{i}"), x))
        .collect()
}

fn values(r: &[RiskScore]) -> Vec<f64> {
    r.iter().map(|r| r.value).collect()
}

/// Indices sorted by value, ties broken by index.
fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn pair(normalization: Normalization) -> EnsembleSpec {
    EnsembleSpec::equal(&["a", "b"], normalization)
}

#[test]
fn opposite_members_cancel() {
    let out = average_risks(
        &[risks(&[1.0, 2.0, 3.0]), risks(&[3.0, 2.0, 1.0])],
        &pair(Normalization::ZScore),
    )
    .unwrap();
    assert!(values(&out).iter().all(|v| v.abs() < 1e-12), "{out:?}");
}

#[test]
fn unit_weight_reproduces_first_member() {
    let mut spec = pair(Normalization::ZScore);
    spec.members[0].weight = Some(1.0);
    spec.members[1].weight = Some(0.0);
    let a = risks(&[0.3, -1.0, 4.0, 2.5]);
    let out = average_risks(&[a.clone(), risks(&[9.0, 1.0, 2.0, 3.0])], &spec).unwrap();
    assert_eq!(out, standardize_risks(&a, Normalization::ZScore).unwrap());
}

#[test]
fn mismatched_patients_are_named() {
    let a = risks(&[1.0, 2.0, 3.0]);
    let mut b = risks(&[1.0, 2.0, 3.0]);
    b[1].patient_id = "q9".into();
    match average_risks(&[a, b], &pair(Normalization::None)) {
        Err(Error::PatientMismatch(ids)) => {
            assert_eq!(ids, vec!["p1".to_string(), "q9".to_string()])
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn members_may_list_patients_in_any_order() {
    let a = risks(&[1.0, 5.0, 3.0]);
    let mut b = a.clone();
    b.reverse();
    let out = average_risks(&[a.clone(), b], &pair(Normalization::None)).unwrap();
    assert_eq!(out, a);
}

#[test]
fn risk_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("risks.csv");
    let r = risks(&[0.1, -2.5e-7, 1.0 / 3.0]);
    write_risks(&path, &r).unwrap();
    assert!(std::fs::read_to_string(&path)
        .unwrap()
        .starts_with("PatientID,Risk\n"));
    assert_eq!(read_risks(&path).unwrap(), r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zscore_ranking_survives_affine_rescaling(
        a in prop::collection::vec(-10.0f64..10.0, 3..40),
        noise in prop::collection::vec(-10.0f64..10.0, 40),
        scale in 1e-3f64..1e3,
        shift in -1e3f64..1e3,
        which in 0usize..2,
    ) {
        let n = a.len();
        let b: Vec<f64> = noise[..n].to_vec();
        prop_assume!(a.iter().any(|x| *x != a[0]) && b.iter().any(|x| *x != b[0]));
        let spec = pair(Normalization::ZScore);
        let base = average_risks(&[risks(&a), risks(&b)], &spec).unwrap();
        let mut members = [a.clone(), b.clone()];
        members[which] = members[which].iter().map(|x| scale * x + shift).collect();
        let moved = average_risks(&[risks(&members[0]), risks(&members[1])], &spec).unwrap();
        // Rescaling perturbs the z-scores only by rounding.
        for (x, y) in values(&base).iter().zip(values(&moved)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let (vb, vm) = (values(&base), values(&moved));
        let gaps_clear = argsort(&vb).windows(2).all(|w| vb[w[1]] - vb[w[0]] > 1e-8);
        if gaps_clear {
            prop_assert_eq!(argsort(&vb), argsort(&vm));
        }
    }

    #[test]
    fn copies_of_one_member_keep_its_ranking(
        a in prop::collection::vec(-10.0f64..10.0, 2..30),
        k in 1usize..5,
        method in prop::sample::select(vec![Normalization::ZScore, Normalization::Rank, Normalization::None]),
    ) {
        prop_assume!(a.iter().any(|x| *x != a[0]));
        let names: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let spec = EnsembleSpec::equal(&refs, method);
        let out = average_risks(&vec![risks(&a); k], &spec).unwrap();
        prop_assert_eq!(out.len(), a.len());
        let v = values(&out);
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] < a[j] {
                    prop_assert!(v[i] <= v[j]);
                }
            }
        }
    }
}
