use nuclass::data::{generate, SynthConfig};
use nuclass::experts::{ExpertDims, GlobalExpert, LocalExpert};
use nuclass::gate::{GateNet, GateNetConfig};
use nuclass::params::ParamStore;
use nuclass::seed;
use nuclass::training::{
    train_gate, train_global, train_local, ExpertLoss, GateStageOptions, GlobalStageOptions, Split, StagePlan,
};

struct Fixture {
    local: LocalExpert,
    global: GlobalExpert,
    train: Split,
    val: Split,
}

fn fixture() -> Fixture {
    let mut synth = SynthConfig::complementary(60, 11);
    synth.tissues.truncate(4);
    synth.d_local = 6;
    synth.d_ctx = 6;
    let ds = generate(&synth).unwrap();
    let n = ds.len();
    let train_idx: Vec<usize> = (0..n).filter(|i| i % 4 != 0).collect();
    let val_idx: Vec<usize> = (0..n).filter(|i| i % 4 == 0).collect();
    let train = Split::from_dataset(&ds, &train_idx).unwrap();
    let val = Split::from_dataset(&ds, &val_idx).unwrap();
    let dims = ExpertDims {
        tissue_embed: 4,
        film_hidden: 8,
        head_hidden: 8,
        proj: 6,
    };
    let (c, t) = (ds.taxonomy.num_classes(), ds.taxonomy.num_tissues());
    let mut local = LocalExpert::new(&dims, 6, c, t, &mut seed::stream(1, "init.local"));
    let mut global = GlobalExpert::new(&dims, 6, 6, c, t, &mut seed::stream(1, "init.global"));
    let plan = StagePlan {
        epochs: 6,
        batch_size: 32,
        lr: 5e-3,
        warmup_steps: 0,
        ..StagePlan::local()
    };
    let loss = ExpertLoss::default();
    train_local(&mut local, &train, &val, &plan, &loss, 1).unwrap();
    let gplan = StagePlan {
        unfreeze_epoch: 0.0,
        freeze_groups: vec![],
        ..plan
    };
    train_global(
        &mut global,
        &local,
        &train,
        &val,
        &gplan,
        &loss,
        &GlobalStageOptions::default(),
        1,
    )
    .unwrap();
    Fixture {
        local,
        global,
        train,
        val,
    }
}

fn gate_run(fx: &Fixture, warmup_epochs: f64) -> (LocalExpert, GlobalExpert) {
    let (mut local, mut global) = (fx.local.clone(), fx.global.clone());
    let mut gate = GateNet::new(
        &GateNetConfig {
            proj: 4,
            hidden: vec![4],
        },
        6,
        12,
        &mut seed::stream(1, "init.gate"),
    );
    let plan = StagePlan {
        epochs: 2,
        batch_size: 32,
        // Never stop early, so every warm-up step really runs.
        patience: 1000,
        warmup_steps: 0,
        ..StagePlan::gate()
    };
    let opts = GateStageOptions {
        warmup_epochs,
        unfreeze_heads: true,
        ..Default::default()
    };
    let before = gate.store.clone();
    train_gate(
        &mut gate,
        &mut local,
        &mut global,
        &fx.train,
        &fx.val,
        &plan,
        &ExpertLoss::default(),
        &opts,
        1,
    )
    .unwrap();
    assert_ne!(gate.store, before, "gate parameters must move");
    (local, global)
}

fn changed(a: &ParamStore, b: &ParamStore) -> Vec<(String, String)> {
    a.iter()
        .zip(b.iter())
        .filter(|(x, y)| x.value != y.value)
        .map(|(x, _)| (x.name.clone(), x.group.clone()))
        .collect()
}

#[test]
fn experts_are_bit_identical_through_warmup() {
    let fx = fixture();
    let (local, global) = gate_run(&fx, 2.0);
    assert!(changed(&fx.local.store, &local.store).is_empty());
    assert!(changed(&fx.global.store, &global.store).is_empty());
}

#[test]
fn only_heads_move_after_warmup() {
    let fx = fixture();
    let (local, global) = gate_run(&fx, 1.0);
    for (before, after) in [(&fx.local.store, &local.store), (&fx.global.store, &global.store)] {
        let moved = changed(before, after);
        assert!(!moved.is_empty(), "heads should train after warm-up");
        assert!(moved.iter().all(|(_, group)| group == "head"), "{moved:?}");
    }
}
