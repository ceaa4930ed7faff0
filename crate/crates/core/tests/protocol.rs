use std::io::Cursor;

use maod_core::acquisition::protocol::{read_frame, write_frame, AcqFrame};
use proptest::prelude::*;

fn any_frame() -> impl Strategy<Value = AcqFrame> {
    prop_oneof![
        Just(AcqFrame::PositionRequest),
        Just(AcqFrame::NoObject),
        any::<u8>().prop_map(AcqFrame::Error),
        (any::<i16>(), any::<i16>()).prop_map(|(x_mm, y_mm)| AcqFrame::PositionResponse { x_mm, y_mm }),
    ]
}

proptest! {
    #[test]
    fn round_trip(frame in any_frame()) {
        let bytes = frame.encode();
        prop_assert_eq!(AcqFrame::decode(&bytes), Ok(frame));
        let mut wire = Vec::new();
        write_frame(&mut wire, &frame).unwrap();
        prop_assert_eq!(&wire, &bytes);
        prop_assert_eq!(read_frame(&mut Cursor::new(wire)).unwrap(), frame);
    }

    #[test]
    fn every_single_bit_flip_is_rejected(frame in any_frame()) {
        let bytes = frame.encode();
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            prop_assert!(AcqFrame::decode(&bad).is_err(), "bit {} of {:02x?}", bit, bytes);
            prop_assert!(read_frame(&mut Cursor::new(bad)).is_err());
        }
    }

    #[test]
    fn meters_survive_millimeter_rounding(x in -32.0f64..32.0, y in -32.0f64..32.0) {
        let (rx, ry) = AcqFrame::position(x, y).unwrap().meters().unwrap();
        prop_assert!((rx - x).abs() <= 0.0005 + 1e-12 && (ry - y).abs() <= 0.0005 + 1e-12);
    }
}

#[test]
fn exhaustive_bit_flips_on_every_type() {
    let mut frames = vec![AcqFrame::PositionRequest, AcqFrame::NoObject];
    frames.extend((0..=255).map(AcqFrame::Error));
    frames.extend([(0, 0), (-1, 1), (i16::MIN, i16::MAX), (1234, -4321)].map(|(x_mm, y_mm)| {
        AcqFrame::PositionResponse { x_mm, y_mm }
    }));
    let mut flips = 0;
    for f in frames {
        let bytes = f.encode();
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(AcqFrame::decode(&bad).is_err());
            flips += 1;
        }
    }
    assert!(flips > 2000);
}

#[test]
fn out_of_range_positions_are_refused() {
    assert!(AcqFrame::position(40.0, 0.0).is_err());
    assert!(AcqFrame::position(0.0, f64::NAN).is_err());
}
