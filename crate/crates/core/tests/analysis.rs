use choicenet::analysis::{branch_activity, params_vs_error_report, Granularity, RunSummary, DEFAULT_THRESHOLD};
use choicenet::arch::{preset, BranchPath, Network};

fn tiny(seed: u64) -> Network {
    Network::new(&preset("choicenet-tiny").unwrap(), seed).unwrap()
}

fn set_weights(net: &mut Network, prefix: &str, value: f64) {
    let ids: Vec<_> = net.params.iter().filter(|(_, n, _)| n.starts_with(prefix) && n.ends_with(".weight")).map(|(id, ..)| id).collect();
    for id in ids {
        net.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
    }
}

fn set_first(net: &mut Network, name: &str, value: f64) {
    let id = net.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    net.params.get_mut(id).data_mut()[0] = value;
}

/// Block 1 holds only 0, 0.39 and 0.41 after normalization: the 0.41 conv is
/// the single active one. The maximum sits in a bottleneck weight, which is
/// part of the normalization set but not itself a branch convolution.
#[test]
fn hand_set_fixture_has_exactly_one_active_conv() {
    let mut net = tiny(0);
    set_weights(&mut net, "block1.", 0.0);
    set_first(&mut net, "block1.module1.bottleneck.conv.weight", -1.0);
    set_weights(&mut net, "block1.module2.k5.shared.cf2.", 0.39);
    set_first(&mut net, "block1.module3.k7.shared.cf3.conv.weight", 0.41);
    let r = branch_activity(&net, 1, DEFAULT_THRESHOLD, Granularity::PerBlock).unwrap();
    assert!(!r.degenerate);
    assert_eq!((r.min_abs, r.max_abs), (0.0, 1.0));
    let active: Vec<_> = r.entries.iter().filter(|e| e.active).collect();
    assert_eq!(active.len(), 1);
    let e = active[0];
    assert_eq!((e.module, e.kernel, e.conv_index, e.path), (3, 7, 3, BranchPath::Shared));
    let near = r.entries.iter().find(|e| (e.module, e.kernel, e.conv_index) == (2, 5, 2)).unwrap();
    assert!(!near.active && (near.peak - 0.39).abs() < 1e-15);
    let csv = r.to_csv();
    assert_eq!(csv.lines().filter(|l| l.ends_with(",true")).collect::<Vec<_>>(), vec!["1,3,7,3,shared,true"]);
}

#[test]
fn all_equal_weights_are_degenerate_and_inactive() {
    let mut net = tiny(1);
    set_weights(&mut net, "block1.", 0.25);
    let r = branch_activity(&net, 1, DEFAULT_THRESHOLD, Granularity::PerBlock).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.active_count(), 0);
    assert!(r.to_grid().contains("degenerate"));
}

#[test]
fn the_conv_holding_the_maximum_is_active() {
    let mut net = tiny(2);
    set_weights(&mut net, "block1.", 0.1);
    set_first(&mut net, "block1.module1.k3.shared.cf1.conv.weight", 5.0);
    let r = branch_activity(&net, 1, DEFAULT_THRESHOLD, Granularity::PerBlock).unwrap();
    assert_eq!(r.active_count(), 1);
    assert_eq!(r.entries[0].peak, 1.0);
    assert!(r.entries[0].active);
}

#[test]
fn negating_every_weight_leaves_the_report_unchanged() {
    for seed in 0..5 {
        let net = tiny(seed);
        let mut neg = net.clone();
        for t in neg.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        for g in [Granularity::PerBlock, Granularity::PerNetwork] {
            for block in 1..=3 {
                assert_eq!(branch_activity(&net, block, 0.4, g).unwrap(), branch_activity(&neg, block, 0.4, g).unwrap());
            }
        }
    }
}

#[test]
fn normalized_peaks_lie_in_unit_interval() {
    let net = tiny(3);
    let r = branch_activity(&net, 2, 0.0, Granularity::PerBlock).unwrap();
    assert!(r.entries.iter().all(|e| (0.0..=1.0).contains(&e.peak)));
    assert!(r.entries.iter().any(|e| e.peak > 0.0));
}

#[test]
fn network_granularity_uses_every_block() {
    let mut net = tiny(4);
    set_weights(&mut net, "block", 0.0);
    set_first(&mut net, "block1.module1.k3.shared.cf1.conv.weight", 0.5);
    set_first(&mut net, "block3.module1.k3.shared.cf1.conv.weight", 1.0);
    let per_block = branch_activity(&net, 1, 0.6, Granularity::PerBlock).unwrap();
    let per_net = branch_activity(&net, 1, 0.6, Granularity::PerNetwork).unwrap();
    assert_eq!(per_block.active_count(), 1);
    assert_eq!(per_net.active_count(), 0);
    assert_eq!("network".parse::<Granularity>().unwrap(), Granularity::PerNetwork);
    assert!("global".parse::<Granularity>().is_err());
}

#[test]
fn params_vs_error_rows_sorted_by_params() {
    let runs = vec![
        RunSummary { model: "big".into(), params: 300, error: 10.0 },
        RunSummary { model: "small".into(), params: 100, error: 30.0 },
        RunSummary { model: "mid".into(), params: 200, error: 20.0 },
    ];
    let csv = params_vs_error_report(&runs).unwrap();
    assert_eq!(csv, "model,params,error\nsmall,100,30\nmid,200,20\nbig,300,10\n");
    assert_eq!(params_vs_error_report(&runs[..1]).unwrap().lines().count(), 2);
}
