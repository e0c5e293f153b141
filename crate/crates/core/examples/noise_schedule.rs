//! Cosine noise schedule, respacing for fast sampling, and the range the
//! learned reverse variance interpolates over.

use dualdiff::diffusion::{NoiseSchedule, ScheduleKind};

fn main() -> dualdiff::Result<()> {
    let s = NoiseSchedule::new(1000, ScheduleKind::Cosine)?;
    println!("   t   alpha_bar       beta   posterior_var");
    for t in [1, 2, 10, 100, 500, 900, 1000] {
        println!(
            "{t:>4}  {:>10.6}  {:>9.3e}  {:>14.3e}",
            s.alpha_bars()[t - 1],
            s.betas()[t - 1],
            s.posterior_variance()[t - 1]
        );
    }

    let fast = s.respace(25)?;
    println!("\n25-step respacing keeps timesteps {:?}", &fast.timesteps()[..6]);
    println!("last respaced beta {:.4} (capped at 0.999)", fast.betas()[24]);
    Ok(())
}
