//! Decodes a batch of synthetic epochs with FBCCA and prints the decisions.
//!
//! cargo run --release --example decode_fbcca -- [snr_db]

use bcilink::dsp::{DspConfig, Preprocessor};
use bcilink::fbcca::{build_filter_bank, Decoder, FbccaConfig};
use bcilink::synth::{generate_epoch, ChannelModel, NoiseModel, StimulusConfig};

fn main() -> bcilink::Result<()> {
    let snr_db: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.0);
    let (fs, secs) = (250.0, 2.0);
    let stimulus = StimulusConfig::eight_targets();
    let montage = ChannelModel::default_montage();
    let noise = NoiseModel::default().with_snr(snr_db);

    let cfg = FbccaConfig::new(stimulus.clone(), fs);
    let bank = build_filter_bank(&stimulus, cfg.n_subbands)?;
    let decoder = Decoder::new(&cfg, &bank, (fs * secs) as usize)?;
    let pre = Preprocessor::new(&DspConfig::default(), fs)?;
    let picks = montage.decode_indices();

    let mut correct = 0;
    let n = 40;
    for i in 0..n {
        let target = i % stimulus.count();
        let epoch = generate_epoch(&stimulus, target, &montage, &noise, secs, fs, 1000 + i as u64)?;
        let d = decoder.classify(&pre.filter(&epoch.select_channels(&picks)?)?)?;
        correct += usize::from(d.recognized && d.predicted_index == target);
        println!(
            "target {target} -> {} margin {:.3}{}",
            d.predicted_index,
            d.margin,
            if d.recognized { "" } else { "  (rejected)" }
        );
    }
    println!("{correct}/{n} recognized correctly at {snr_db} dB");
    Ok(())
}
