use lyaptune::bo::*;
use lyaptune::gp::MaternNu;

fn toy(theta: &[f64]) -> lyaptune::Result<Observation> {
    Ok(Observation {
        g0: theta.iter().map(|t| t * t).sum(),
        g1: theta[0].min(0.0),
        g2: 0.0,
        diverged: false,
    })
}

fn main() {
    for seed in [0u64, 1, 2, 3, 4, 11] {
        let cfg = BoConfig {
            budget: 40,
            n_init: 10,
            constrained: true,
            epsilon: 1.0,
            kappa: 1000.0,
            nu: MaternNu::FiveHalves,
            ..BoConfig::new(2, seed)
        };
        let state = run_bo(&cfg, &mut toy, |_, _| {}).unwrap();
        let inc = state.incumbent_query().unwrap();
        let dist = inc.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        println!("seed {seed}: dist {dist:.4} feasible {} theta {:?}", inc.feasible(), inc.theta);
    }
}
