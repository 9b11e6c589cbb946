use trajlab::experiment::Lab;
use trajlab::perturb::{build_mask, expected_init_norm};
use trajlab::plan::ExperimentPlan;

fn plan(extra: &str) -> ExperimentPlan {
    ExperimentPlan::from_text(&format!(
        "hidden = 16, 16\nclasses = 4\ndim = 6\nn_train = 512\nn_test = 128\nbatch_size = 32\nsteps = 60\n\
         probe = 100\nseries_every = 10\nseries_subsample = 256\nperturb_batch = 32\n{extra}"
    ))
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn perturbing_at_the_end_moves_by_exactly_sigma_times_init_norm() {
    for mask in ["all", "single", "fraction:0.2"] {
        let lab = Lab::new(plan(&format!(
            "times = 1\nsigmas = 0.01\nmasks = {mask}\nkinds = gaussian, batch\n"
        )))
        .unwrap();
        for cell in lab.plan.cells() {
            let rec = lab.spawn_and_perturb(&cell).unwrap();
            let m = build_mask(&cell.mask.unwrap(), &lab.spec, &lab.seeds(cell.seed)).unwrap();
            let want = 0.01 * expected_init_norm(&lab.spec, &m).unwrap();
            assert!(rel(rec.metrics.l2, want) < 1e-9, "{mask}: {} vs {want}", rec.metrics.l2);
        }
    }
}

#[test]
fn series_starts_at_the_perturbation_and_ignores_metric_toggles() {
    let with = Lab::new(plan("times = 0.25\nsigmas = 0.05\nseries = true\n")).unwrap();
    let without = Lab::new(plan(
        "times = 0.25\nsigmas = 0.05\nseries = true\nbarrier = false\nbarrier_wm = false\nbarrier_am = false\ncka = false\nensemble = false\n",
    ))
    .unwrap();
    let cell = with.plan.cells()[0];
    let a = with.spawn_and_perturb(&cell).unwrap();
    let b = without.spawn_and_perturb(&cell).unwrap();
    let (sa, sb) = (a.series.unwrap(), b.series.unwrap());
    assert_eq!(sa, sb);
    assert!(b.metrics.barrier_ce_train.is_nan() && !a.metrics.barrier_ce_train.is_nan());
    let first = sa.points[0];
    assert_eq!(first.step, cell.t_step);
    let m = build_mask(&cell.mask.unwrap(), &with.spec, &with.seeds(cell.seed)).unwrap();
    assert!(rel(first.l2, 0.05 * expected_init_norm(&with.spec, &m).unwrap()) < 1e-9);
    assert_eq!(sa.points.last().unwrap().step, 60);
    assert_eq!(sa.points.last().unwrap().l2, a.metrics.l2);
    // Explicit capture at arbitrary steps agrees with the sweep's series.
    let picked = with.capture_series(&cell, &[15, 30, 60]).unwrap();
    let by_step = |s: usize| sa.points.iter().find(|p| p.step == s).copied().unwrap();
    for p in &picked.points {
        assert_eq!(*p, by_step(p.step));
    }
    assert!(with.capture_series(&cell, &[5]).is_err());
}

#[test]
fn spawning_copies_diverge_and_match_at_the_end() {
    let lab = Lab::new(plan("modes = spawning\ntimes = 0.5, 1\n")).unwrap();
    let cells = lab.plan.cells();
    let mid = lab.spawn_independent_noise(&cells[0]).unwrap();
    assert!(mid.metrics.l2 > 0.0);
    let end = lab.spawn_independent_noise(&cells[1]).unwrap();
    assert_eq!(end.metrics.l2, 0.0);
    assert_eq!(end.metrics.barrier_ce_train, 0.0);
    assert_eq!(end.metrics.barrier_err_test, 0.0);
    assert_eq!(end.metrics.cka_angle, 0.0);
    assert_eq!(end.metrics.fixed_frac_wm, 1.0);
    assert!(lab.spawn_and_perturb(&cells[0]).is_err());
}

#[test]
fn reset_optimizer_state_changes_the_children_but_not_the_control() {
    let shared = Lab::new(plan("times = 0.5\nsigmas = 0, 0.01\n")).unwrap();
    let reset = Lab::new(plan("times = 0.5\nsigmas = 0, 0.01\nspawn_opt_state = reset\n")).unwrap();
    let cells = shared.plan.cells();
    assert_eq!(reset.spawn_and_perturb(&cells[0]).unwrap().metrics.l2, 0.0);
    let a = shared.spawn_and_perturb(&cells[1]).unwrap();
    let b = reset.spawn_and_perturb(&cells[1]).unwrap();
    assert_ne!(a.metrics.ce_a, b.metrics.ce_a);
}
