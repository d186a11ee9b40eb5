//! End-to-end pipeline run through the public API, with every persisted
//! artifact (tensor cache, feature cache, both checkpoints) reloaded
//! mid-chain and required to reproduce the in-memory results exactly.

use tpmcf::dataset::{
    read_tensor_cache, split_train_test, synth_tensor, write_tensor_cache, SynthParams,
};
use tpmcf::features::{build_all_embeddings, read_feature_cache, write_feature_cache, FeatureConfig};
use tpmcf::gcmf::{load_gcmf, save_gcmf, train_gcmf, GcmfConfig};
use tpmcf::graph::{build_qig, normalize_adjacency};
use tpmcf::numcore::AdamWConfig;
use tpmcf::pte::{collect_targets, load_pte, predict, save_pte, train_pte_streaming, PteConfig};

#[test]
fn artifacts_reload_bit_identically_through_the_full_chain() {
    let t_len = 6u32;
    let data = synth_tensor::<f64>(&SynthParams {
        service_scale_range: (0.25, 4.0),
        amplitude: (0.3, 0.6),
        ..SynthParams::new(12, 30, t_len, 2, 0.3, 0.0, 0.0, 41)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();

    let tensor_path = dir.path().join("tensor.bin");
    write_tensor_cache(&tensor_path, &data.tensor).unwrap();
    let tensor = read_tensor_cache::<f64>(&tensor_path).unwrap();
    assert_eq!(tensor, data.tensor);

    let split = split_train_test(&tensor, 0.8, 3).unwrap();
    let fcfg = FeatureConfig {
        mf_iterations: 60,
        ae_hidden: 8,
        ae_epochs: 30,
        ..FeatureConfig::new(4, 2, 11)
    };
    let feats = build_all_embeddings(&tensor, &split, &fcfg).unwrap();
    for emb in &feats {
        let path = dir.path().join(format!("feat-{}.bin", emb.t));
        write_feature_cache(&path, emb).unwrap();
        assert_eq!(read_feature_cache::<f64>(&path).unwrap(), *emb);
    }

    let adjacencies: Vec<_> = (0..t_len)
        .map(|t| normalize_adjacency(&build_qig(&tensor, &split, t).unwrap()))
        .collect();
    let gcfg = GcmfConfig {
        f_prime: 6,
        gamma_s: 1.0,
        epochs: 600,
        optimizer: AdamWConfig::with_lr(5e-3),
        ..GcmfConfig::new(3)
    };
    let gtrained = train_gcmf(&tensor, &split, &feats, &adjacencies, &gcfg).unwrap();

    let gcmf_path = dir.path().join("gcmf.bin");
    save_gcmf(&gcmf_path, gtrained.model_for(0)).unwrap();
    let gmodel = load_gcmf::<f64>(&gcmf_path).unwrap();
    let rebuilt: Vec<_> = (0..t_len as usize)
        .map(|t| gmodel.forward(&adjacencies[t], &feats[t]).unwrap())
        .collect();
    assert_eq!(rebuilt, gtrained.embeddings);

    let targets = collect_targets(&tensor, &split.train).unwrap();
    let pcfg = PteConfig {
        window: 3,
        c1: 1,
        heads: 2,
        d_k: 4,
        d_v: 4,
        epochs: 5,
        batch_size: 64,
        ..PteConfig::new(5)
    };
    let ptrained = train_pte_streaming(&rebuilt, &targets, &pcfg).unwrap();

    let pte_path = dir.path().join("pte.bin");
    save_pte(&pte_path, &ptrained.model).unwrap();
    let pmodel = load_pte::<f64>(&pte_path).unwrap();

    let direct = predict(&ptrained.model, &gtrained.embeddings, &split.test).unwrap();
    let reloaded = predict(&pmodel, &rebuilt, &split.test).unwrap();
    assert_eq!(direct, reloaded);
    assert_eq!(direct.len(), split.test.len());
    assert!(direct.values().all(|v| v.is_finite()));
}
