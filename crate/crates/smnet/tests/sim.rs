//! Surrogate model oracles: layout counting, anchor exactness, superposition,
//! coupling ordering, Lipschitz bound, and dataset determinism.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use smnet::pointcloud::dist2;
use smnet::sim::{
    generate_dataset, linearity_probe, sample_seed, ActuatorLayout, AnchorRule,
    DatasetManifest, Mechanism, Surrogate, SurrogateSpec, Topology,
};

fn surrogate(mechanism: Mechanism, layout: ActuatorLayout) -> Surrogate {
    Surrogate::new(SurrogateSpec::default_for(mechanism), layout)
}

// ---------------------------------------------------------------------------
// layouts
// ---------------------------------------------------------------------------

#[test]
fn layout_control_dims() {
    assert_eq!(ActuatorLayout::plate36().control_dim, 36);
    assert_eq!(ActuatorLayout::cube216().control_dim, 216);
    assert_eq!(ActuatorLayout::cube152().control_dim, 152);
}

#[test]
fn shared_cube_counting_matches_voxel_arithmetic() {
    let layout = ActuatorLayout::cube152();
    assert_eq!(layout.cells.len(), 216);
    // every face cell maps to exactly one control, and the distinct controls
    // are the 6³−4³ surface voxels
    let used: HashSet<usize> = layout.cells.iter().map(|c| c.control).collect();
    assert_eq!(used.len(), 152);
    assert_eq!(used.len(), 6 * 6 * 6 - 4 * 4 * 4);
    // multiplicity: 96 face-interior ×1 + 48 edge ×2 + 8 corner ×3 = 216
    let mut mult: HashMap<usize, usize> = HashMap::new();
    for c in &layout.cells {
        *mult.entry(c.control).or_default() += 1;
    }
    let count_of = |m: usize| mult.values().filter(|&&v| v == m).count();
    assert_eq!(count_of(1), 96);
    assert_eq!(count_of(2), 48);
    assert_eq!(count_of(3), 8);
}

#[test]
fn cell_centers_lie_on_the_surface() {
    for layout in [ActuatorLayout::plate36(), ActuatorLayout::cube216()] {
        for cell in &layout.cells {
            let on_surface = match layout.topology {
                Topology::Plate => cell.center[2] == 0.0,
                _ => cell.center.iter().any(|&v| v.abs() == 0.5),
            };
            assert!(on_surface, "{:?}", cell.center);
        }
    }
}

// ---------------------------------------------------------------------------
// simulate basics
// ---------------------------------------------------------------------------

#[test]
fn zero_control_is_the_identity() {
    let s = surrogate(Mechanism::IonicLike, ActuatorLayout::plate36());
    let cloud = s.simulate(&vec![0.0; 36], 12, 5).unwrap();
    let refs = cloud.reference_points().unwrap();
    assert_eq!(cloud.points(), refs);
}

#[test]
fn out_of_range_control_reports_index() {
    let s = surrogate(Mechanism::IonicLike, ActuatorLayout::plate36());
    let mut u = vec![0.0; 36];
    u[17] = 1.5;
    let err = s.simulate(&u, 8, 0).unwrap_err();
    assert!(err.to_string().contains("17"), "{err}");
    assert!(s.simulate(&vec![0.0; 35], 8, 0).is_err());
}

#[test]
fn thermal_one_hot_is_confined_with_known_peak() {
    let layout = ActuatorLayout::plate36();
    let s = surrogate(Mechanism::ThermalLike, layout);
    let mut u = vec![0.0; 36];
    let j = 14;
    u[j] = 1.0;
    let center = s.layout.cells[j].center;
    let radius = s.spec.radius;

    // peak at the cell center equals amplitude · anchor
    let peak = s.displacement(center, &u);
    let expect = s.spec.amplitude * s.anchor_factor(center);
    assert!((peak - expect).abs() < 1e-12, "{peak} vs {expect}");

    // support confined to the bump radius around the cell center
    let cloud = s.simulate(&u, 48, 3).unwrap();
    let refs = cloud.reference_points().unwrap();
    for (p, r) in cloud.points().iter().zip(refs) {
        let moved = dist2(*p, *r).sqrt();
        if dist2(*r, center).sqrt() >= radius {
            assert_eq!(moved, 0.0);
        }
    }
}

#[test]
fn corner_anchors_pin_the_cube_vertices() {
    let s = surrogate(Mechanism::PneumaticLike, ActuatorLayout::cube216());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u: Vec<f64> = (0..216).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u_eff = s.effective_control(&u);
    for &x in &[-0.5, 0.5] {
        for &y in &[-0.5, 0.5] {
            for &z in &[-0.5, 0.5] {
                assert_eq!(s.displacement([x, y, z], &u_eff), 0.0);
            }
        }
    }
}

#[test]
fn center_anchor_pins_the_center() {
    let s = surrogate(Mechanism::ThermalLike, ActuatorLayout::plate36());
    let u = vec![1.0; 36];
    let u_eff = s.effective_control(&u);
    assert_eq!(s.displacement([0.0, 0.0, 0.0], &u_eff), 0.0);
}

#[test]
fn simulate_is_deterministic() {
    let s = surrogate(Mechanism::IonicLike, ActuatorLayout::plate36());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = s.simulate(&u, 16, 9).unwrap();
    let b = s.simulate(&u, 16, 9).unwrap();
    assert_eq!(a.points(), b.points());
    let c = s.simulate(&u, 16, 10).unwrap();
    assert_ne!(a.points(), c.points());
}

// ---------------------------------------------------------------------------
// coupling and Lipschitz properties
// ---------------------------------------------------------------------------

#[test]
fn coupling_energy_ordering_thermal_ionic_pneumatic() {
    let j = 14; // interior cell
    let mut energies = Vec::new();
    for mechanism in [Mechanism::ThermalLike, Mechanism::IonicLike, Mechanism::PneumaticLike] {
        let mut spec = SurrogateSpec::default_for(mechanism);
        spec.anchor = AnchorRule::CornersFixed; // same anchoring for all three
        let s = Surrogate::new(spec, ActuatorLayout::plate36());
        let mut u = vec![0.0; 36];
        u[j] = 1.0;
        let cloud = s.simulate(&u, 36, 2).unwrap();
        let refs = cloud.reference_points().unwrap();
        let center = s.layout.cells[j].center;
        let half = 0.5 / 6.0;
        let outside: f64 = cloud
            .points()
            .iter()
            .zip(refs)
            .filter(|(_, r)| {
                (r[0] - center[0]).abs() > half || (r[1] - center[1]).abs() > half
            })
            .map(|(p, r)| dist2(*p, *r))
            .sum();
        energies.push(outside);
    }
    assert!(energies[0] < energies[1], "{energies:?}");
    assert!(energies[1] < energies[2], "{energies:?}");
}

#[test]
fn control_lipschitz_bound_holds() {
    for mechanism in [Mechanism::ThermalLike, Mechanism::IonicLike, Mechanism::PneumaticLike] {
        let s = surrogate(mechanism, ActuatorLayout::plate36());
        let row_max = s
            .stencil_row_sums()
            .map(|r| r.iter().fold(0.0f64, |m, &v| m.max(v)))
            .unwrap_or(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let u: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let du = u
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let a = s.simulate(&u, 20, 77).unwrap();
            let b = s.simulate(&v, 20, 77).unwrap();
            let d = a
                .points()
                .iter()
                .zip(b.points())
                .map(|(p, q)| dist2(*p, *q).sqrt())
                .fold(0.0f64, f64::max);
            assert!(
                d <= s.spec.amplitude * du * row_max + 1e-12,
                "{mechanism:?}: {d} > {}",
                s.spec.amplitude * du * row_max
            );
        }
    }
}

// ---------------------------------------------------------------------------
// linearity probe
// ---------------------------------------------------------------------------

#[test]
fn superposition_holds_for_all_mechanisms() {
    for mechanism in [Mechanism::ThermalLike, Mechanism::IonicLike, Mechanism::PneumaticLike] {
        let spec = SurrogateSpec::default_for(mechanism);
        let report = linearity_probe(&spec, &ActuatorLayout::plate36()).unwrap();
        assert!(
            report.superposition_max_err < 1e-6,
            "{mechanism:?}: {}",
            report.superposition_max_err
        );
    }
}

#[test]
fn pneumatic_stencil_rows_sum_to_one() {
    let spec = SurrogateSpec::default_for(Mechanism::PneumaticLike);
    let report = linearity_probe(&spec, &ActuatorLayout::plate36()).unwrap();
    assert_eq!(report.stencil_row_sums.len(), 36);
    for s in report.stencil_row_sums {
        assert!((s - 1.0).abs() < 1e-9);
    }
    let thermal = linearity_probe(
        &SurrogateSpec::default_for(Mechanism::ThermalLike),
        &ActuatorLayout::plate36(),
    )
    .unwrap();
    assert!(thermal.stencil_row_sums.is_empty());
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

fn dir_hashes(dir: &std::path::Path) -> HashMap<String, String> {
    let mut out = HashMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let bytes = std::fs::read(entry.path()).unwrap();
        let mut h = Sha256::new();
        h.update(&bytes);
        out.insert(entry.file_name().into_string().unwrap(), format!("{:x}", h.finalize()));
    }
    out
}

#[test]
fn empty_dataset_is_a_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SurrogateSpec::default_for(Mechanism::IonicLike);
    let m = generate_dataset(0, &spec, &ActuatorLayout::plate36(), 8, 1, dir.path()).unwrap();
    assert!(m.samples.is_empty());
    assert!(m.split.train.is_empty() && m.split.test.is_empty());
    let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.spec_hash, m.spec_hash);
}

#[test]
fn regeneration_is_bit_identical() {
    let spec = SurrogateSpec::default_for(Mechanism::IonicLike);
    let layout = ActuatorLayout::plate36();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_dataset(6, &spec, &layout, 10, 42, d1.path()).unwrap();
    let m2 = generate_dataset(6, &spec, &layout, 10, 42, d2.path()).unwrap();
    assert_eq!(m1.spec_hash, m2.spec_hash);
    assert_eq!(dir_hashes(d1.path()), dir_hashes(d2.path()));

    let d3 = tempfile::tempdir().unwrap();
    let m3 = generate_dataset(6, &spec, &layout, 10, 43, d3.path()).unwrap();
    assert_ne!(m1.samples[0].control, m3.samples[0].control);
}

#[test]
fn manifest_contents_are_complete() {
    let spec = SurrogateSpec::default_for(Mechanism::ThermalLike);
    let layout = ActuatorLayout::plate36();
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(10, &spec, &layout, 8, 7, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 10);
    assert_eq!(m.split.train.len(), 8);
    assert_eq!(m.split.test.len(), 2);
    let ids: HashSet<u32> = m.samples.iter().map(|s| s.id).collect();
    assert_eq!(ids.len(), 10);
    for s in &m.samples {
        assert!(dir.path().join(&s.file).exists());
        assert_eq!(s.control.len(), 36);
        assert_eq!(s.seed, sample_seed(7, s.id));
    }
}

#[test]
fn controls_pass_a_uniformity_check() {
    let spec = SurrogateSpec::default_for(Mechanism::IonicLike);
    let layout = ActuatorLayout::plate36();
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(1000, &spec, &layout, 2, 3, dir.path()).unwrap();
    // uniform[-1,1] has stddev 1/√3; mean of 1000 draws is within 3σ/√n
    let bound = 3.0 / (3.0f64.sqrt() * (1000.0f64).sqrt());
    for d in 0..36 {
        let mean = m.samples.iter().map(|s| s.control[d]).sum::<f64>() / 1000.0;
        assert!(mean.abs() < bound, "dim {d} mean {mean}");
    }
}
