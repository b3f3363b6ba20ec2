//! Synthesizes one SSVEP epoch and measures its narrowband SNR.
//!
//! cargo run --example generate_epoch -- [target_index] [snr_db]

use bcilink::synth::{generate_epoch, measure_snr, ChannelModel, NoiseModel, StimulusConfig};

fn main() -> bcilink::Result<()> {
    let mut args = std::env::args().skip(1);
    let target: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let snr_db: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(10.0);

    let stimulus = StimulusConfig::eight_targets();
    let montage = ChannelModel::default_montage();
    let noise = NoiseModel::default().with_snr(snr_db);
    let epoch = generate_epoch(&stimulus, target, &montage, &noise, 2.0, 250.0, 42)?;

    let f = stimulus.frequencies_hz()[target];
    let oz = montage.strongest_ssvep_channel();
    println!(
        "{} channels x {} samples at {} Hz, attending {f} Hz",
        epoch.n_channels(),
        epoch.n_samples(),
        epoch.fs_hz()
    );
    for (i, name) in epoch.channel_names().iter().enumerate() {
        let snr = measure_snr(&epoch, i, f, 4)?;
        let mark = if i == oz { "  <- strongest" } else { "" };
        println!("{name:>4}  {snr:6.2} dB{mark}");
    }

    let mut csv = Vec::new();
    epoch.write_csv(&mut csv)?;
    for line in String::from_utf8_lossy(&csv).lines().take(3) {
        println!("{line}");
    }
    Ok(())
}
