//! The denoiser boundary over the DNZ1 wire protocol: a builtin denoiser is
//! served on a local TCP port and queried by the client the samplers use.
//! An external model server speaks the same protocol.

use std::sync::Arc;

use ddrmpr::denoise::protocol::ServerInfo;
use ddrmpr::denoise::remote::RemoteDenoiser;
use ddrmpr::denoise::server::spawn_tcp;
use ddrmpr::denoise::{DenoiseRequest, Denoiser, DenoiserHandle};
use ddrmpr::fixtures::uniform_noise;

pub fn run_example() -> ddrmpr::Result<()> {
    let info = ServerInfo {
        model_id: "gaussian-demo".into(),
        geometry: None,
        schedule_t: Some(1000),
    };
    let (addr, _server) = spawn_tcp(Arc::new(DenoiserHandle::gaussian(2.0)), info)?;
    let client = RemoteDenoiser::connect_tcp(&addr.to_string())?;
    client.ping()?;
    println!(
        "connected to {} ({:?})",
        client.endpoint(),
        client.info().map(|i| i.model_id)
    );

    let local = DenoiserHandle::gaussian(2.0);
    let reqs: Vec<DenoiseRequest> = (0..3)
        .map(|k| {
            DenoiseRequest::new(
                uniform_noise(16, 16, k).to_vp(),
                100 * (k as usize + 1),
                0.3 * (k + 1) as f64,
            )
        })
        .collect();
    let remote = client.denoise_batch(&reqs)?;
    for (req, out) in reqs.iter().zip(&remote) {
        let want = local.denoise(req)?;
        let gap = out
            .data
            .iter()
            .zip(&want.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "t = {:>3}, sigma = {:.1}: remote vs in-process gap {gap:.1e}",
            req.t_index, req.sigma_t
        );
    }

    // the same client, through the handle the samplers take
    let handle = DenoiserHandle::remote(client);
    println!("sampler-facing id: {}", handle.id());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
