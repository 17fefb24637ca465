//! Finite-difference checks of every training loss at 20 random parameter
//! points each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucdgan::dino::{dino_loss, dino_term_for_step, run_student, run_teacher, DinoState, Views};
use ucdgan::gradcheck::{max_relative_error, LossPath};
use ucdgan::losses::{class_loss, ClassLossKind};
use ucdgan::nets::{CondSpec, DiscriminatorNet, DiscriminatorVars, GeneratorNet, GeneratorVars, HeadKind};
use ucdgan::trainer::latent_batch;
use ucdgan::Graph;

#[test]
fn every_loss_path_matches_central_differences() {
    for path in LossPath::all() {
        for seed in 0..20 {
            let err = path.check(seed, 40).unwrap();
            assert!(err < 1e-3, "{path:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn harness_detects_a_missing_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = GeneratorNet::init(CondSpec::new(4, 3).unwrap(), 3, &[8], 2, &mut rng);
    let disc = DiscriminatorNet::init(2, &[8], 6, 4, HeadKind::UnconditionalLogits, &mut rng);
    let x = latent_batch(6, 2, &mut rng);
    let y = vec![0, 1, 2, 3, 0, 1];
    // the second copy of the loss is cut from the tape, halving the gradient
    let build = |g: &mut Graph, _: &GeneratorNet, _: &GeneratorVars, d: &DiscriminatorNet, dv: &DiscriminatorVars| {
        let xv = g.constant(x.clone());
        let l = d.logits(g, dv, xv)?;
        let cut = g.detach(l);
        let a = class_loss(g, l, &y, ClassLossKind::CrossEntropy)?;
        let b = class_loss(g, cut, &y, ClassLossKind::CrossEntropy)?;
        g.add(a, b)
    };
    assert!(max_relative_error(&gen, &disc, &build, 40, &mut rng).unwrap() > 0.1);
}

#[test]
fn per_step_term_gradient_ignores_the_teacher() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disc = DiscriminatorNet::init(2, &[8, 8], 6, 4, HeadKind::UnconditionalLogits, &mut rng);
        let mut v = || latent_batch(6, 2, &mut rng);
        let real = Views { first: v(), second: v() };
        let fake = Views { first: v(), second: v() };
        let state0 = DinoState::new(4, 0.1, 0.9).unwrap();

        let mut g = Graph::new();
        let dv = disc.bind(&mut g, true);
        let mut s_lib = state0.clone();
        let lib = dino_term_for_step(&mut g, &disc, &dv, &real, &fake, &mut s_lib).unwrap();
        g.backward(lib).unwrap();

        // same term with the teachers entered as precomputed constants
        let mut h = Graph::new();
        let hv = disc.bind(&mut h, true);
        let mut s_manual = state0.clone();
        let mut parts = Vec::new();
        for views in [&real, &fake] {
            let t = run_teacher(&disc.logits_eval(&views.first).unwrap(), &mut s_manual).unwrap();
            let x = h.constant(views.second.clone());
            let l = disc.logits(&mut h, &hv, x).unwrap();
            let s = run_student(&mut h, l);
            parts.push(dino_loss(&mut h, &t, s).unwrap());
        }
        let sum = h.add(parts[0], parts[1]).unwrap();
        let manual = h.scale(sum, 0.5);
        h.backward(manual).unwrap();

        assert_eq!(g.value(lib).item().unwrap(), h.value(manual).item().unwrap());
        assert_eq!(s_lib, s_manual);
        for (a, b) in dv.all().into_iter().zip(hv.all()) {
            assert_eq!(g.grad(a), h.grad(b));
        }
    }
}
