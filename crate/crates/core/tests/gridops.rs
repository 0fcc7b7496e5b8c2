use anticipation::gridops::{
    crop, interior_mae, iot1, iot2, oot, pad, ChannelRole, GridSpec, Interp, Ogm, ValueMode,
};
use anticipation::kinematics::PoseDelta;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MARGIN: usize = 20;

fn grid() -> GridSpec {
    GridSpec {
        h: 64,
        w: 64,
        roles: vec![ChannelRole::Map, ChannelRole::Occupancy, ChannelRole::Ego],
        anchor: [32, 32],
        meters_per_pixel: 0.5,
        mode: ValueMode::Real,
    }
}

/// Frame of random filled rectangles, the kind of content the warps move.
fn random_frame(rng: &mut ChaCha8Rng) -> Ogm {
    let mut x = Ogm::zeros(grid());
    for ch in 0..3 {
        for _ in 0..rng.random_range(1..6) {
            let (r0, c0) = (rng.random_range(0..56), rng.random_range(0..56));
            let (h, w) = (rng.random_range(3..16), rng.random_range(3..16));
            let v: f32 = rng.random_range(0.2..1.0);
            for r in r0..(r0 + h).min(64) {
                for c in c0..(c0 + w).min(64) {
                    x.set(ch, r, c, v);
                }
            }
        }
    }
    x
}

fn random_delta(rng: &mut ChaCha8Rng, mpp: f64) -> PoseDelta {
    let dtheta = rng.random_range(-0.3..0.3);
    let len = rng.random_range(0.0..10.0) * mpp;
    let dir: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    PoseDelta {
        dp: [len * dir.cos(), len * dir.sin()],
        dtheta,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_is_close_in_interior(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_frame(&mut rng);
        let d = random_delta(&mut rng, 0.5);
        let once = oot(&iot2(&x, &d, Interp::Bilinear).unwrap(), &d, Interp::Bilinear).unwrap();
        let e1 = interior_mae(&once, &x, MARGIN).unwrap();
        prop_assert!(e1 < 0.02, "single roundtrip error {e1}");
        let twice = oot(&iot2(&once, &d, Interp::Bilinear).unwrap(), &d, Interp::Bilinear).unwrap();
        let e2 = interior_mae(&twice, &x, MARGIN).unwrap();
        // Near-integer deltas give e1 ≈ 0 while f32 rounding still accumulates.
        prop_assert!(e2 <= 2.0 * e1 + 1e-3, "double {e2} vs single {e1}");
    }

    #[test]
    fn iot1_leaves_other_channels_alone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_frame(&mut rng);
        let y = iot1(&x, &random_delta(&mut rng, 0.5), Interp::Bilinear).unwrap();
        prop_assert_eq!(y.channel(0), x.channel(0));
        prop_assert_eq!(y.channel(1), x.channel(1));
    }

    #[test]
    fn outputs_stay_in_unit_range(seed in any::<u64>(), nearest in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let interp = if nearest { Interp::Nearest } else { Interp::Bilinear };
        let x = random_frame(&mut rng);
        let d = random_delta(&mut rng, 0.5);
        for y in [iot1(&x, &d, interp).unwrap(), iot2(&x, &d, interp).unwrap(), oot(&x, &d, interp).unwrap()] {
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn padded_warp_keeps_interior_mass(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_frame(&mut rng);
        let shift = [rng.random_range(-20i32..=20), rng.random_range(-20i32..=20)];
        let d = PoseDelta { dp: [-f64::from(shift[0]) * 0.5, -f64::from(shift[1]) * 0.5], dtheta: 0.0 };
        let p = pad(&x, 20);
        let moved = iot2(&p, &d, Interp::Bilinear).unwrap();
        for ch in 0..3 {
            prop_assert!((moved.mass(ch) - x.mass(ch)).abs() < 1e-3);
        }
        prop_assert_eq!(crop(&p, 20).unwrap(), x);
    }
}

#[test]
fn nearest_translation_roundtrips_exactly_when_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_frame(&mut rng);
    let p = pad(&x, 20);
    let d = PoseDelta {
        dp: [3.0, -1.5],
        dtheta: 0.0,
    };
    let back = oot(&iot2(&p, &d, Interp::Nearest).unwrap(), &d, Interp::Nearest).unwrap();
    assert_eq!(crop(&back, 20).unwrap(), x);
}
