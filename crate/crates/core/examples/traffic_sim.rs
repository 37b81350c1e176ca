//! Runs rule-based traffic alone on both maps and reports throughput and
//! collisions. Pass a path to also dump the cross-map trajectories as CSV.

use std::fs::File;

use lexdrive::sim::{MapConfig, SimConfig, TrajectoryWriter, World};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dump = std::env::args().nth(1);
    for map in [MapConfig::cross(), MapConfig::ring()] {
        let kind = map.kind;
        let mut world = World::from_config(SimConfig::with_map(map), 11)?;
        let mut writer = match (&dump, kind) {
            (Some(p), lexdrive::sim::MapKind::Cross) => Some(TrajectoryWriter::new(File::create(p)?)),
            _ => None,
        };
        let (mut exited, mut peak) = (0, 0);
        for _ in 0..10_000 {
            let ev = world.step_traffic()?;
            exited += ev.exited.len();
            peak = peak.max(world.vehicles().len());
            if let Some(w) = writer.as_mut() {
                w.record(&world)?;
            }
        }
        if let Some(w) = writer {
            w.finish()?;
        }
        println!(
            "{kind:?}: {:.0}s simulated, {exited} vehicles exited, peak {peak} on the map, {} collisions",
            world.time(),
            world.background_collisions()
        );
    }
    Ok(())
}
