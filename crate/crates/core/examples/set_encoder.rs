//! Builds the permutation-invariant Q network with each head and shows that
//! reordering the vehicle slots leaves its output unchanged.

use lexdrive::neural::{HeadMode, Network, NetworkSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ego: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let vehicles: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mask = vec![true, true, true, true, false, false];
    for head in [HeadMode::Monolithic, HeadMode::FactoredMin, HeadMode::FactoredPlusMerged] {
        let net = Network::new(NetworkSpec {
            ego_width: 4,
            vehicle_width: 5,
            max_vehicles: 6,
            shared: vec![16, 16],
            merged: vec![16],
            head,
            n_actions: 3,
        })?;
        let params = net.init(&mut rng);
        let q = net.q_values(&params, &ego, &vehicles, &mask)?;
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut rng);
        let pv: Vec<Vec<f64>> = order.iter().map(|&j| vehicles[j].clone()).collect();
        let pm: Vec<bool> = order.iter().map(|&j| mask[j]).collect();
        let qp = net.q_values(&params, &ego, &pv, &pm)?;
        let diff = q.iter().zip(&qp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // Absent slots are ignored whatever they contain.
        let mut junk = vehicles.clone();
        junk[5] = vec![100.0; 5];
        let qj = net.q_values(&params, &ego, &junk, &mask)?;
        let junk_diff = q.iter().zip(&qj).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "{head:?}: {} params, q {:.4}, change under slot shuffle {diff:.1e}, from absent-slot contents {junk_diff:.1e}",
            net.n_params(),
            q
        );
    }
    Ok(())
}
