//! Small reference problems used by tests, benchmarks and the CLI's
//! example configs.

use crate::model::{
    ApplicationMode, CoefficientsDoc, CostsDoc, DeclaredConstants, HorizonSpec, ProblemDocument,
    ProblemSpec,
};

fn constants(strict: bool) -> DeclaredConstants {
    DeclaredConstants {
        mu1: -2.0,
        mu2: 0.0,
        mu3: 0.0,
        k2: 0.0,
        u_max: 0.0,
        epsilon: 0.1,
        rho: 0.5,
        strict_costs: strict,
        lambda: Some(1.0),
        c_u: None,
        sigma_min: None,
        b_bound: None,
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Two-mode desk instance: drifts ±0.2, σ = 0.25, rewards ±x, g(x) = x,
/// switching cost 0.1 each way, T = 1 with 10 steps, start in mode 1.
pub fn desk2_document() -> ProblemDocument {
    let mut hyp = constants(true);
    hyp.sigma_min = Some(0.25);
    hyp.b_bound = Some(0.2);
    ProblemDocument {
        modes: 2,
        x0: 1.0,
        i0: 1,
        costs: CostsDoc::Rows(vec![vec![0.0, 0.1], vec![0.1, 0.0]]),
        horizon: HorizonSpec {
            t_cap: 1.0,
            n_steps: 10,
            exit_lo: None,
            exit_hi: None,
            lambda: 0.0,
        },
        coefficients: CoefficientsDoc {
            b: strings(&["0.2", "-0.2"]),
            sigma: strings(&["0.25", "0.25"]),
            f: None,
            l: Some(strings(&["x", "-x"])),
            g: "x".into(),
        },
        hypothesis: hyp,
        application_mode: ApplicationMode::Switching,
    }
}

pub fn desk2() -> ProblemSpec {
    ProblemSpec::from_document(&desk2_document()).expect("desk instance is well formed")
}

/// One mode in general mode with `f = 0`, `g(x) = x`.
pub fn single_mode(b: &str, sigma: &str, x0: f64, switching: bool) -> ProblemSpec {
    let mut doc = desk2_document();
    doc.modes = 1;
    doc.x0 = x0;
    doc.costs = CostsDoc::Flat(vec![0.0]);
    doc.hypothesis = constants(false);
    doc.coefficients = CoefficientsDoc {
        b: strings(&[b]),
        sigma: strings(&[sigma]),
        f: (!switching).then(|| strings(&["0"])),
        l: switching.then(|| strings(&["0"])),
        g: "x".into(),
    };
    if switching {
        doc.hypothesis.sigma_min = Some(1e-3);
        doc.hypothesis.b_bound = Some(10.0);
        doc.application_mode = ApplicationMode::Switching;
    } else {
        doc.application_mode = ApplicationMode::General;
    }
    ProblemSpec::from_document(&doc).expect("single-mode instance is well formed")
}

/// One switching-mode problem with running reward `l`, drift `b`, σ.
pub fn switching_single(l: &str, b: &str, sigma: &str) -> ProblemSpec {
    let mut doc = desk2_document();
    doc.modes = 1;
    doc.costs = CostsDoc::Flat(vec![0.0]);
    doc.hypothesis = constants(false);
    doc.hypothesis.sigma_min = Some(1e-3);
    doc.hypothesis.b_bound = Some(10.0);
    doc.coefficients = CoefficientsDoc {
        b: strings(&[b]),
        sigma: strings(&[sigma]),
        f: None,
        l: Some(strings(&[l])),
        g: "x".into(),
    };
    ProblemSpec::from_document(&doc).expect("instance is well formed")
}

/// `d` modes, all coefficients zero, `g(x) = x`: every value equals `x0`.
pub fn degenerate(d: usize, x0: f64, cost: f64) -> ProblemSpec {
    let mut doc = desk2_document();
    doc.modes = d;
    doc.x0 = x0;
    doc.costs = CostsDoc::Flat(
        crate::model::SwitchingCostMatrix::uniform(d, cost, false)
            .as_slice()
            .to_vec(),
    );
    doc.hypothesis = constants(false);
    doc.coefficients = CoefficientsDoc {
        b: vec!["0".into(); d],
        sigma: vec!["0".into(); d],
        f: Some(vec!["0".into(); d]),
        l: None,
        g: "x".into(),
    };
    doc.application_mode = ApplicationMode::General;
    ProblemSpec::from_document(&doc).expect("degenerate instance is well formed")
}
