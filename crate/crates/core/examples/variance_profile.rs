//! Reverse-transition standard deviation along the process for several
//! denoising strides.
//!
//! ```bash
//! cargo run --release --example variance_profile
//! ```

use pocketpo::schedule::{check_stride_ordering, profile_peak, Schedule};

fn main() -> pocketpo::Result<()> {
    let sched = Schedule::polynomial(500, 1e-4)?;
    let strides = [1usize, 5, 10, 20];
    let profiles = strides
        .iter()
        .map(|&k| Ok((k, sched.variance_profile(k)?)))
        .collect::<pocketpo::Result<Vec<_>>>()?;

    for (k, points) in &profiles {
        let (peak, interior) = profile_peak(points);
        let p = points[peak];
        println!(
            "stride {k:>2}: {:>3} transitions, max sigma_q {:.4} at t={} ({})",
            points.len(),
            p.sigma_q,
            p.t,
            if interior { "interior" } else { "endpoint" }
        );
    }

    // a coarse view: sigma_q at every 50th step for each stride
    println!("\n   t  {}", strides.map(|k| format!("  k={k:<5}")).join(""));
    for t in (50..=500).rev().step_by(50) {
        let row: Vec<String> = profiles
            .iter()
            .map(|(_, pts)| pts.iter().find(|p| p.t == t).map_or("     -   ".into(), |p| format!("{:9.5}", p.sigma_q)))
            .collect();
        println!("{t:>4}  {}", row.join(" "));
    }

    match check_stride_ordering(&profiles) {
        None => println!("\nlarger strides give larger sigma_q at every shared target step"),
        Some((s, a, b)) => println!("\nordering violated at s={s} between strides {a} and {b}"),
    }
    Ok(())
}
