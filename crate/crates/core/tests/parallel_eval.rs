use unisrec::corpus::{generate_synthetic_corpus, SyntheticSpec};
use unisrec::eval::{rank_instances, rank_instances_parallel};
use unisrec::finetune::FinetuneMode;
use unisrec::model::{Model, ModelConfig};
use unisrec::trainer::TargetData;

#[test]
fn parallel_ranking_matches_serial() {
    let spec = SyntheticSpec {
        domains: 1,
        items_per_domain: 90,
        users_per_domain: 137,
        dim: 10,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let data = TargetData::prepare(&corpus.sequences, &corpus.table).unwrap();
    let config = ModelConfig {
        d_w: 10,
        d_v: 8,
        experts: 2,
        layers: 1,
        heads: 2,
        d_ff: 16,
        n_max: 6,
        dropout: 0.0,
    };
    let mut model = Model::new(config, 5).unwrap();
    let test = &data.split.test;
    for mode in [FinetuneMode::Inductive, FinetuneMode::Transductive] {
        if mode == FinetuneMode::Transductive {
            model.add_id_embedding(data.vocab.len()).unwrap();
        }
        let serial = rank_instances(&model, &corpus.table, &data.vocab, test, mode, 17).unwrap();
        for threads in [2, 3, 8, 500] {
            let par = rank_instances_parallel(&model, &corpus.table, &data.vocab, test, mode, 17, threads).unwrap();
            assert_eq!(par, serial, "{threads} threads");
        }
    }
}
