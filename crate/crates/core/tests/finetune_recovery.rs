use segprune::init::init_model;
use segprune::metrics::eval::mean_dice;
use segprune::metrics::{generate, SynthKind, SynthSpec};
use segprune::pipeline::{prune, prune_and_finetune, PruneMethod, PruneReport};
use segprune::prune::weight::{sparsity_sequence, Scope};
use segprune::train::{one_cycle_for, train, TrainConfig};
use segprune::zoo;

/// Dense baseline, one-shot 87.5% global weight pruning, then fine-tuning
/// with frozen masks brings DICE back near the baseline.
#[test]
fn global_weight_pruning_recovers_with_finetune() {
    let data = generate(&SynthSpec::new(SynthKind::Blob, 120, 64, 3)).unwrap();
    let (val, train_set) = data.split(24);
    let cfg = TrainConfig { epochs: 8, seed: 3, ..TrainConfig::default() };
    let base = train(
        init_model(zoo::tiny_segnet(), 3),
        &train_set,
        Some(&val),
        &cfg,
        one_cycle_for(&cfg, train_set.len(), 0.05),
        None,
    )
    .unwrap();
    let base_dice = mean_dice(&base.graph, None, &val).unwrap();

    let s = sparsity_sequence(3).unwrap();
    let method = PruneMethod::Weights { scope: Scope::Global, sparsity: s };
    let one_shot = prune(&base.graph, method).unwrap();
    let shot_dice = mean_dice(&one_shot.graph, one_shot.masks.as_ref(), &val).unwrap();

    let ft_cfg = TrainConfig { epochs: 4, seed: 4, ..TrainConfig::default() };
    let done = prune_and_finetune(
        base.graph.clone(),
        method,
        &train_set,
        Some(&val),
        &ft_cfg,
        one_cycle_for(&ft_cfg, train_set.len(), 0.01),
    )
    .map_err(|(e, _)| e)
    .unwrap();
    let masks = done.masks.as_ref().unwrap();
    let ft_dice = mean_dice(&done.graph, Some(masks), &val).unwrap();
    eprintln!("baseline {base_dice:.4}, one-shot {shot_dice:.4}, fine-tuned {ft_dice:.4}");

    // Masks stay frozen: pruned weights are still exactly zero.
    for (name, m) in masks.iter() {
        let w = &done.graph.params()[name].data;
        assert!(w.iter().zip(&m.keep).all(|(v, k)| *k || *v == 0.0), "{name}");
    }
    match done.report {
        PruneReport::Weights(r) => assert_eq!(r.target, Some(s)),
        _ => unreachable!(),
    }
    assert!(base_dice >= 0.85, "{base_dice}");
    assert!(ft_dice >= base_dice - 0.05, "{ft_dice} vs {base_dice}");
    assert!(ft_dice >= shot_dice - 1e-9);
}
