//! Starts an episode on the cross map, drives a few steps and prints what
//! the agent observes about itself and the surrounding vehicles.

use lexdrive::features::{encode, featurize, FeatureConfig, View};
use lexdrive::sim::{Action, SimConfig, World};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let features = FeatureConfig::default();
    let mut world = World::from_config(SimConfig::default(), 3)?;
    world.begin_episode(3)?;
    for _ in 0..20 {
        world.step(Action::Maintain.index())?;
    }
    let obs = featurize(&world, &features).ok_or("featurization failed")?;
    let e = &obs.ego;
    println!(
        "ego: v {:.1} m/s, {:.1} m to junction, in junction {}, lanes left/right {}/{}, lane gap {}",
        e.v, e.d, e.in_intersection, e.left_lane, e.right_lane, e.lane_gap
    );
    for (j, slot) in obs.slots.iter().enumerate() {
        match slot {
            Some(v) => println!(
                "slot {j}: id {:>3} {:?} at ({:6.1}, {:6.1}) dv {:5.1} ttc {:5.1} priority {} signal {:?}",
                v.id, v.relation, v.x, v.y, v.v, v.ttc, v.has_priority, v.turn_signal
            ),
            None => println!("slot {j}: empty"),
        }
    }
    for view in [View::Safety, View::Regulation, View::Full] {
        let enc = encode(&obs, view, &features);
        println!("{view:?}: ego width {}, vehicle width {}", enc.ego.len(), view.vehicle_width());
    }
    Ok(())
}
