//! Volume behaviour of the phantom generator, measured with the metrics module.

use cardiseg::metrics::{erosion_sensitivity, label_volumes, relative_volumes};
use cardiseg::phantom::{generate_patient, PhantomConfig};
use cardiseg::stats::bland_altman;
use cardiseg::volume_io::{FULL_HEART_LABELS, LV_MYOCARDIUM};

#[test]
fn myocardial_erosion_is_of_the_order_of_ten_percent() {
    let cfg = PhantomConfig {
        seed: 5,
        shape: [120, 120, 120],
        spacing_mm: [0.8; 3],
        ..PhantomConfig::default()
    };
    let p = generate_patient(&cfg).unwrap();
    let myo = p.labels_ccta.mask(LV_MYOCARDIUM);
    let s = erosion_sensitivity(&myo, &p.labels_ccta.grid).unwrap();
    assert!((0.05..=0.25).contains(&s), "erosion sensitivity {s}");
}

#[test]
fn scaled_ncct_keeps_relative_volumes() {
    for seed in [1, 4, 9] {
        let p = generate_patient(&PhantomConfig {
            seed,
            ..PhantomConfig::default()
        })
        .unwrap();
        let (vc, vn) = (label_volumes(&p.labels_ccta), label_volumes(&p.labels_ncct));
        let full = |v: &[f64; 8]| FULL_HEART_LABELS.iter().map(|&l| v[l as usize]).sum::<f64>();
        let drop = 1.0 - full(&vn) / full(&vc);
        assert!((drop - (1.0 - 0.95f64.powi(3))).abs() < 0.02, "absolute drop {drop}");
        let (rc, rn) = (relative_volumes(&vc).unwrap(), relative_volumes(&vn).unwrap());
        for k in 0..5 {
            assert!((rn[k] / rc[k] - 1.0).abs() < 0.02, "seed {seed} structure {k}: {} vs {}", rn[k], rc[k]);
        }
    }
}

#[test]
fn reference_volumes_show_negative_bias_in_ncct() {
    let patients: Vec<_> = (0..18)
        .map(|i| {
            let p = generate_patient(&PhantomConfig {
                seed: 100 + i,
                ..PhantomConfig::default()
            })
            .unwrap();
            (label_volumes(&p.labels_ncct), label_volumes(&p.labels_ccta))
        })
        .collect();
    for &l in &FULL_HEART_LABELS {
        let pairs: Vec<(f64, f64)> = patients.iter().map(|(n, c)| (n[l as usize], c[l as usize])).collect();
        let ba = bland_altman(&pairs).unwrap();
        assert!(ba.bias < 0.0, "label {l}: bias {}", ba.bias);
    }
}
