use proptest::prelude::*;

use super::*;

/// Second implementation of CIEDE2000 written from the published step list,
/// in degrees, sharing no code with [`ciede2000`].
fn oracle(l1: f64, a1: f64, b1: f64, l2: f64, a2: f64, b2: f64) -> f64 {
    let rad = |d: f64| d.to_radians();
    let c1 = (a1 * a1 + b1 * b1).sqrt();
    let c2 = (a2 * a2 + b2 * b2).sqrt();
    let cm = (c1 + c2) / 2.0;
    let g = 0.5 * (1.0 - (cm.powf(7.0) / (cm.powf(7.0) + 25f64.powf(7.0))).sqrt());
    let ap1 = a1 * (1.0 + g);
    let ap2 = a2 * (1.0 + g);
    let cp1 = (ap1 * ap1 + b1 * b1).sqrt();
    let cp2 = (ap2 * ap2 + b2 * b2).sqrt();
    let hue = |b: f64, ap: f64| {
        if b == 0.0 && ap == 0.0 {
            0.0
        } else {
            let h = b.atan2(ap).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let hp1 = hue(b1, ap1);
    let hp2 = hue(b2, ap2);
    let dlp = l2 - l1;
    let dcp = cp2 - cp1;
    let dhp = if cp1 * cp2 == 0.0 {
        0.0
    } else if (hp2 - hp1).abs() <= 180.0 {
        hp2 - hp1
    } else if hp2 - hp1 > 180.0 {
        hp2 - hp1 - 360.0
    } else {
        hp2 - hp1 + 360.0
    };
    let dhp_big = 2.0 * (cp1 * cp2).sqrt() * rad(dhp / 2.0).sin();
    let lpm = (l1 + l2) / 2.0;
    let cpm = (cp1 + cp2) / 2.0;
    let hpm = if cp1 * cp2 == 0.0 {
        hp1 + hp2
    } else if (hp1 - hp2).abs() <= 180.0 {
        (hp1 + hp2) / 2.0
    } else if hp1 + hp2 < 360.0 {
        (hp1 + hp2 + 360.0) / 2.0
    } else {
        (hp1 + hp2 - 360.0) / 2.0
    };
    let t = 1.0 - 0.17 * rad(hpm - 30.0).cos() + 0.24 * rad(2.0 * hpm).cos() + 0.32 * rad(3.0 * hpm + 6.0).cos()
        - 0.20 * rad(4.0 * hpm - 63.0).cos();
    let dtheta = 30.0 * (-((hpm - 275.0) / 25.0).powf(2.0)).exp();
    let rc = 2.0 * (cpm.powf(7.0) / (cpm.powf(7.0) + 25f64.powf(7.0))).sqrt();
    let sl = 1.0 + (0.015 * (lpm - 50.0).powf(2.0)) / (20.0 + (lpm - 50.0).powf(2.0)).sqrt();
    let sc = 1.0 + 0.045 * cpm;
    let sh = 1.0 + 0.015 * cpm * t;
    let rt = -rad(2.0 * dtheta).sin() * rc;
    ((dlp / sl).powf(2.0) + (dcp / sc).powf(2.0) + (dhp_big / sh).powf(2.0) + rt * (dcp / sc) * (dhp_big / sh)).sqrt()
}

#[test]
fn verification_pairs_match_oracle_and_published_values() {
    for (i, r) in VERIFICATION_PAIRS.iter().enumerate() {
        let got = ciede2000(LabPixel::new(r[0], r[1], r[2]), LabPixel::new(r[3], r[4], r[5]));
        let want = oracle(r[0], r[1], r[2], r[3], r[4], r[5]);
        assert!((got - want).abs() <= 1e-4, "pair {}: {got} vs oracle {want}", i + 1);
        assert!((got - r[6]).abs() <= 5.000_1e-5, "pair {}: {got} vs published {}", i + 1, r[6]);
    }
}

#[test]
fn hue_wraparound_is_continuous() {
    // Pairs 9-12 straddle the h' = 0/360 boundary; nudging b2 across zero moves ΔE smoothly.
    let p = LabPixel::new(50.0, 2.49, -0.001);
    let mut last: Option<f64> = None;
    for k in 0..=40 {
        let b2 = -0.002 + k as f64 * 1e-4;
        let d = ciede2000(p, LabPixel::new(50.0, -2.49, b2));
        if let Some(prev) = last {
            assert!((d - prev).abs() < 0.1, "jump at b2={b2}: {prev} -> {d}");
        }
        last = Some(d);
    }
}

#[test]
fn white_black_and_reference_pixel() {
    let w = srgb_to_lab(255, 255, 255);
    assert!((w.l - 100.0).abs() < 1e-3 && w.a.abs() < 1e-3 && w.b.abs() < 1e-3, "{w:?}");
    assert_eq!(srgb_to_lab(0, 0, 0), LabPixel::new(0.0, 0.0, 0.0));
    // Independent evaluation of the CIE formulas (ε/κ form).
    let p = srgb_to_lab(119, 130, 154);
    assert!((p.l - 54.259_404_9).abs() < 1e-3, "{p:?}");
    assert!((p.a - 1.438_516_9).abs() < 1e-3, "{p:?}");
    assert!((p.b + 14.183_729_0).abs() < 1e-3, "{p:?}");
    assert_eq!(lab_to_srgb(LabPixel::new(100.0, 0.0, 0.0)), [255, 255, 255]);
    assert_eq!(lab_to_srgb(LabPixel::new(0.0, 0.0, 0.0)), [0, 0, 0]);
}

#[test]
fn gray_ramp_is_monotone_and_neutral() {
    let mut prev = -1.0;
    for v in 0..=255u8 {
        let p = srgb_to_lab(v, v, v);
        assert!(p.l > prev, "L not increasing at {v}");
        assert!(p.a.abs() <= 1e-3 && p.b.abs() <= 1e-3, "{v}: {p:?}");
        prev = p.l;
    }
}

#[test]
fn round_trip_within_one_level() {
    let mut r = rng::stream(11, "rgb");
    use rand::Rng;
    for _ in 0..1000 {
        let c: [u8; 3] = [r.random(), r.random(), r.random()];
        let back = lab_to_srgb(srgb_to_lab(c[0], c[1], c[2]));
        for k in 0..3 {
            assert!((back[k] as i32 - c[k] as i32).abs() <= 1, "{c:?} -> {back:?}");
        }
    }
}

#[test]
fn lab_image_round_trip() {
    let img = RgbImage::from_fn(6, 5, |x, y| image::Rgb([x as u8 * 40, y as u8 * 50, 90]));
    let lab = LabImage::from_rgb(&img);
    assert_eq!(lab.provenance, Provenance::Original);
    assert_eq!(lab.to_rgb(), img);
    assert!(LabImage::new(2, 2, vec![LabPixel::default(); 3], Provenance::Original).is_err());
}

#[test]
fn eigen3_reconstructs_matrix() {
    let m = [[4.0, 1.0, -2.0], [1.0, 3.0, 0.5], [-2.0, 0.5, 5.0]];
    let (l, v) = symmetric_eigen3(m);
    for i in 0..3 {
        for j in 0..3 {
            let r: f64 = (0..3).map(|k| v[i][k] * l[k] * v[j][k]).sum();
            assert!((r - m[i][j]).abs() < 1e-12, "({i},{j}) {r}");
            let o: f64 = (0..3).map(|k| v[k][i] * v[k][j]).sum();
            assert!((o - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }
}

#[test]
fn fancy_pca_identity_cases() {
    let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 20) as u8, 100]));
    assert_eq!(fancy_pca(&img, 0.0, 3).unwrap(), img);
    let flat = RgbImage::from_pixel(5, 5, image::Rgb([10, 200, 40]));
    assert_eq!(fancy_pca(&flat, 0.5, 3).unwrap(), flat);
    assert_ne!(fancy_pca(&img, 0.5, 3).unwrap(), img);
    assert_eq!(fancy_pca(&img, 0.5, 3).unwrap(), fancy_pca(&img, 0.5, 3).unwrap());
    assert!(fancy_pca(&img, -1.0, 3).is_err());
}

#[test]
fn fancy_pca_two_pixel_shift_is_gray() {
    // Covariance 0.25·ones(3): λ = 0.75 along (1,1,1)/√3, zero elsewhere.
    let img = RgbImage::from_fn(2, 1, |x, _| image::Rgb([(x * 255) as u8; 3]));
    let s = fancy_pca_shift(&img, [0.2, 0.2, 0.2]);
    let want = 0.2 * 0.75 / 3f64.sqrt();
    for c in s {
        assert!((c.abs() - want).abs() < 1e-12, "{s:?}");
        assert!((c - s[0]).abs() < 1e-12);
    }
}

fn arb_lab() -> impl Strategy<Value = LabPixel> {
    (0.0f64..100.0, -128.0f64..127.0, -128.0f64..127.0).prop_map(|(l, a, b)| LabPixel::new(l, a, b))
}

proptest! {
    #[test]
    fn ciede2000_symmetric_nonnegative_and_matches_oracle(p in arb_lab(), q in arb_lab()) {
        let d = ciede2000(p, q);
        prop_assert!(d > 0.0 || p == q);
        prop_assert_eq!(d, ciede2000(q, p));
        prop_assert_eq!(ciede2000(p, p), 0.0);
        prop_assert!((d - oracle(p.l, p.a, p.b, q.l, q.a, q.b)).abs() <= 1e-9 * d.max(1.0));
    }
}
