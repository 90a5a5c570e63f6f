//! Build a source grid and inspect its neighborhood structure and local
//! move proposals.

use nalgebra::Point3;
use sesame::SourceGrid;

fn main() {
    // A 3 x 3 x 2 block of candidate locations, 1.5 cm spacing.
    let mut points = Vec::new();
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..2 {
                points.push(Point3::new(
                    0.015 * x as f64,
                    0.015 * y as f64,
                    0.015 * z as f64,
                ));
            }
        }
    }
    let grid = SourceGrid::build(points, 0.02, 0.01).unwrap();
    println!(
        "grid {} with {} points, neighbor radius {} m, proposal scale {} m",
        grid.id(),
        grid.n_points(),
        grid.neighbor_radius(),
        grid.proposal_scale()
    );

    for index in [0, 4, 9] {
        let p = grid.point(index);
        println!(
            "\npoint {index} at ({:.3}, {:.3}, {:.3}): {} neighbors",
            p.x,
            p.y,
            p.z,
            grid.neighbors(index).len()
        );
        let proposal = grid.location_proposal(index);
        for (target, mass) in proposal.iter() {
            println!(
                "  -> {target} at distance {:.4} m with mass {:.4}",
                grid.distance(index, target),
                mass
            );
        }
    }

    // Masses decay with distance and always sum to one.
    let proposal = grid.location_proposal(4);
    let total: f64 = proposal.iter().map(|(_, m)| m).sum();
    println!("\nproposal mass total at point 4: {total:.15}");
}
