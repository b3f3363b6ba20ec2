//! Designs the preprocessing filters and prints their magnitude response.

use bcilink::dsp::{design_bandpass, design_notch};

fn main() -> bcilink::Result<()> {
    let fs = 250.0;
    let bp = design_bandpass(4, 6.0, 60.0, fs)?;
    let notch = design_notch(50.0, 30.0, fs)?;

    println!("band-pass 6-60 Hz, order 4: {} sections", bp.sections.len());
    for (i, s) in bp.sections.iter().enumerate() {
        println!("  sos[{i}] b={:?} a={:?}", s.b, s.a);
    }
    println!("  max pole radius {:.6}", bp.max_pole_radius());

    println!("\n  f (Hz)   band-pass dB   notch dB");
    for f in [1.0, 3.0, 6.0, 8.0, 15.0, 30.0, 49.0, 50.0, 51.0, 60.0, 90.0, 120.0] {
        println!("{f:8.1} {:14.2} {:10.2}", bp.magnitude_db(f, fs), notch.magnitude_db(f, fs));
    }
    Ok(())
}
