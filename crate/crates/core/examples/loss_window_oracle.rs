//! Brute-force search for the shortest downlink loss window on the last
//! member that ends in a collision. The window opens on the tick emergency
//! braking starts; links are otherwise lossless.
//!
//! cargo run --release --example loss_window_oracle -- [rate_hz] [max_width]

use platoon::channel::{Direction, ForcedLoss, LossSchedule, PdrCurve};
use platoon::controller::Phase;
use platoon::scenario::{run, Links, ScenarioConfig};

fn main() -> platoon::Result<()> {
    let mut args = std::env::args().skip(1);
    let rate: f64 = args.next().map_or(80.0, |s| s.parse().expect("rate_hz"));
    let max_width: u64 = args.next().map_or(400, |s| s.parse().expect("max_width"));

    let config = ScenarioConfig {
        message_rate_hz: rate,
        ..ScenarioConfig::default()
    };
    let links = Links::symmetric(PdrCurve::lossless("lossless"));
    let baseline = run(&config, &links, &LossSchedule::none())?;
    let onset = baseline
        .trace
        .iter()
        .find(|r| r.phase == Phase::EmergencyBraking)
        .map(|r| r.tick)
        .expect("baseline never reached emergency braking");
    let last = config.truck_count - 1;
    println!("rate {rate} Hz, braking onset tick {onset}, member {last}");

    let collides = |width: u64| -> platoon::Result<bool> {
        let schedule = LossSchedule::none().with(ForcedLoss {
            direction: Direction::Down,
            vehicle_id: last,
            first_tick: onset,
            last_tick: onset + width - 1,
        });
        Ok(run(&config, &links, &schedule)?.summary.collision.is_some())
    };

    let mut k = None;
    for width in 1..=max_width {
        let hit = collides(width)?;
        if hit && k.is_none() {
            k = Some(width);
        }
        if let (false, Some(k)) = (hit, k) {
            println!("non-monotone: width {width} is safe after K = {k}");
        }
    }
    match k {
        Some(k) => println!("K = {k} ticks ({:.4} s)", k as f64 / rate),
        None => println!("no collision up to width {max_width}"),
    }
    Ok(())
}
