//! DNZ1 transport: round trips through a live TCP server and property tests
//! on frame encoding.

use std::sync::Arc;

use ddrmpr::denoise::protocol::{RequestFrame, ServerInfo};
use ddrmpr::denoise::remote::RemoteDenoiser;
use ddrmpr::denoise::server::{spawn_tcp, EchoDenoiser};
use ddrmpr::denoise::{DenoiseRequest, Denoiser, DenoiserHandle};
use ddrmpr::field_ops::{RealImage, ValueRange};
use ddrmpr::rng::{stream, StreamTag};
use proptest::prelude::*;
use rand::Rng;

fn info() -> ServerInfo {
    ServerInfo {
        model_id: "test".into(),
        geometry: None,
        schedule_t: Some(1000),
    }
}

/// Values already on the f32 grid, so the wire cannot round them.
fn f32_image(h: usize, w: usize, c: usize, seed: u64) -> RealImage {
    let mut rng = stream(seed, StreamTag::Fixture, 3);
    let data = (0..h * w * c)
        .map(|_| f64::from(rng.random_range(-1.0f32..1.0)))
        .collect();
    RealImage::from_vec(h, w, c, data, ValueRange::Symmetric).unwrap()
}

#[test]
fn echo_over_tcp_is_bit_identical() {
    let (addr, _server) = spawn_tcp(Arc::new(EchoDenoiser), info()).unwrap();
    let client = RemoteDenoiser::connect_tcp(&addr.to_string()).unwrap();
    client.ping().unwrap();
    let x = f32_image(64, 64, 3, 1);
    let back = client.denoise(&DenoiseRequest::new(x.clone(), 10, 0.5)).unwrap();
    assert_eq!(back.data, x.data);

    let batch: Vec<DenoiseRequest> = (0..4)
        .map(|k| DenoiseRequest::new(f32_image(8, 8, 1, k), 5, 0.1))
        .collect();
    let out = client.denoise_batch(&batch).unwrap();
    for (req, got) in batch.iter().zip(&out) {
        assert_eq!(got.data, req.x_t.data);
    }
}

#[test]
fn remote_gaussian_matches_builtin() {
    let builtin = DenoiserHandle::gaussian(2.0);
    let (addr, _server) = spawn_tcp(Arc::new(DenoiserHandle::gaussian(2.0)), info()).unwrap();
    let client = RemoteDenoiser::connect_tcp(&addr.to_string()).unwrap();
    let req = DenoiseRequest::new(f32_image(32, 32, 3, 2), 300, 0.8);
    let (a, b) = (client.denoise(&req).unwrap(), builtin.denoise(&req).unwrap());
    let gap = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-5, "{gap}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn request_frames_round_trip(
        h in 1usize..12,
        w in 1usize..12,
        c in 1usize..4,
        seq in any::<u32>(),
        t in 0usize..1000,
        sigma in 0.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let req = DenoiseRequest::new(f32_image(h, w, c, seed), t, sigma);
        let frame = RequestFrame::denoise(seq, &req);
        let bytes = frame.encode();
        let back = RequestFrame::read_from(&mut bytes.as_slice()).unwrap().unwrap();
        prop_assert_eq!(&back, &frame);
        let req2 = back.to_request().unwrap();
        prop_assert_eq!(req2.x_t.data, req.x_t.data);
        prop_assert_eq!(req2.t_index, t);
    }

    #[test]
    fn truncated_frames_are_rejected(cut in 1usize..60, seed in any::<u64>()) {
        let req = DenoiseRequest::new(f32_image(2, 3, 1, seed), 1, 0.3);
        let bytes = RequestFrame::denoise(7, &req).encode();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(RequestFrame::read_from(&mut &bytes[..cut]).is_err());
    }
}
