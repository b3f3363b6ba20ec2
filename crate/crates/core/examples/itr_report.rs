//! Information transfer rate across accuracy and selection time.

use bcilink::session::compute_itr;

fn main() -> bcilink::Result<()> {
    let times = [1.0, 2.0, 2.5, 4.0];
    print!("  p     ");
    for t in times {
        print!("  T={t:<4}");
    }
    println!("  (bits/min, N = 8)");
    for p in [0.125, 0.3, 0.5, 0.7, 0.9, 0.95, 1.0] {
        print!("{p:6.3}  ");
        for t in times {
            print!("{:8.2}", compute_itr(8, p, t)?);
        }
        println!();
    }
    println!("\nN = 4, p = 0.9, T = 2.5 s: {:.2} bits/min", compute_itr(4, 0.9, 2.5)?);
    Ok(())
}
