use molfuse::chem::{parse_smiles, FeatureSet, MolGraph};
use molfuse::knowledge::{builtin_embed, KnowledgeEmbedding};
use molfuse::model::{
    Batch, GraphBatch, KnowledgeBatch, Mode, ModelConfig, Network, TaskType, Variant,
};
use molfuse::numkit::{Tape, Tensor};

fn config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(variant, TaskType::Classification, 3);
    c.gin.layers = 3;
    c.gin.hidden = 16;
    c.fusion.width = 16;
    c.fusion.heads = 4;
    c.fusion.knowledge_dim = 12;
    c
}

fn knowledge(text: &str) -> KnowledgeEmbedding {
    builtin_embed(text, 12, 7).unwrap()
}

fn batch(graphs: &[&MolGraph], texts: &[&KnowledgeEmbedding]) -> Batch<f64> {
    Batch {
        graph: Some(GraphBatch::from_graphs(graphs, FeatureSet::Extended).unwrap()),
        knowledge: Some(KnowledgeBatch::from_embeddings(texts).unwrap()),
    }
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn closed_gates_ignore_knowledge() {
    let mut net = Network::<f64>::new(config(Variant::Full), 2).unwrap();
    let g = parse_smiles("CC(=O)Oc1ccccc1C(=O)O").unwrap();
    let k1 = knowledge("an ester and a carboxylic acid on a benzene ring");
    let k2 = knowledge("completely unrelated words about kinases and binding pockets in proteins");
    let a = net.predict(&batch(&[&g], &[&k1])).unwrap().outputs;
    let b = net.predict(&batch(&[&g], &[&k2])).unwrap().outputs;
    assert_eq!(max_diff(&a, &b), 0.0);

    net.set_gates(0.7, 0.0);
    let a = net.predict(&batch(&[&g], &[&k1])).unwrap().outputs;
    let b = net.predict(&batch(&[&g], &[&k2])).unwrap().outputs;
    assert!(max_diff(&a, &b) > 1e-9);
}

#[test]
fn single_token_gets_all_attention() {
    let net = Network::<f64>::new(config(Variant::Full), 2).unwrap();
    let g = parse_smiles("c1ccncc1").unwrap();
    let k = knowledge("pyridine");
    assert_eq!(k.len(), 1);
    let pred = net.predict(&batch(&[&g], &[&k])).unwrap();
    let w = &pred.cross_attention[0];
    assert_eq!(w.shape(), &[1, 6, 1]);
    assert!(w.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn attention_rows_sum_to_one_and_skip_padding() {
    let net = Network::<f64>::new(config(Variant::Full), 2).unwrap();
    let g1 = parse_smiles("CO").unwrap();
    let g2 = parse_smiles("CCCCCCO").unwrap();
    let k1 = knowledge("small alcohol");
    let k2 = knowledge("a longer chain alcohol with a terminal hydroxyl group");
    let pred = net.predict(&batch(&[&g1, &g2], &[&k1, &k2])).unwrap();
    let w = &pred.cross_attention[0];
    let (n, m) = (w.shape()[1], w.shape()[2]);
    for i in 0..n {
        let row = &w.data()[i * m..(i + 1) * m];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[k1.len()..].iter().all(|&x| x == 0.0));
    }
    let s = &pred.self_attention[0];
    assert_eq!(s.shape(), &[2, 7, 7]);
    for i in 0..7 {
        assert!(s.data()[i * 7 + 2..i * 7 + 7].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn padding_does_not_change_outputs() {
    for v in Variant::ALL {
        let net = Network::<f64>::new(config(v), 9).unwrap();
        let g1 = parse_smiles("OCC(N)C(=O)O").unwrap();
        let g2 = parse_smiles("c1ccc2ccccc2c1CCCCN").unwrap();
        let k1 = knowledge("serine like amino acid");
        let k2 =
            knowledge("naphthalene with a long aliphatic amine chain that is basic and lipophilic");
        let alone = net.predict(&batch(&[&g1], &[&k1])).unwrap().outputs;
        let together = net
            .predict(&batch(&[&g1, &g2], &[&k1, &k2]))
            .unwrap()
            .outputs;
        let first = Tensor::new(vec![1, 3], together.row(0).to_vec()).unwrap();
        assert!(max_diff(&alone, &first) < 1e-12, "{v}");
    }
}

#[test]
fn atom_order_does_not_change_outputs() {
    let net = Network::<f64>::new(config(Variant::Full), 4).unwrap();
    let g = parse_smiles("CC(C)Cc1ccc(cc1)C(C)C(=O)O").unwrap();
    let k = knowledge("ibuprofen is a propionic acid derivative");
    let base = net.predict(&batch(&[&g], &[&k])).unwrap().outputs;
    let n = g.num_atoms();
    for shift in [1, 5, 11] {
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        let p = g.permuted(&perm);
        let out = net.predict(&batch(&[&p], &[&k])).unwrap().outputs;
        assert!(max_diff(&base, &out) < 1e-10);
    }
}

#[test]
fn fully_masked_knowledge_is_an_error() {
    let mut k = knowledge("empty");
    k.mask = vec![false; k.len()];
    assert!(KnowledgeBatch::<f64>::from_embeddings(&[&k]).is_err());
}

fn loss_value(net: &Network<f64>, b: &Batch<f64>, labels: &[f64]) -> f64 {
    let tape = Tape::new();
    let p = net.params.bind_frozen(&tape);
    let f = net.forward(&tape, &p, b, Mode::Eval).unwrap();
    net.loss(f.outputs, labels, &[true; 3])
        .unwrap()
        .value()
        .item()
}

#[test]
fn gradients_match_finite_differences() {
    let mut c = config(Variant::Full);
    c.gin.layers = 2;
    c.gin.hidden = 8;
    c.fusion.width = 8;
    c.fusion.heads = 2;
    c.fusion.knowledge_dim = 6;
    let mut net = Network::<f64>::new(c, 13).unwrap();
    net.set_gates(0.4, -0.3);
    let g = parse_smiles("NCC(=O)O").unwrap();
    assert_eq!(g.num_atoms(), 5);
    let k = builtin_embed("amino acid zwitterion", 6, 1).unwrap();
    assert_eq!(k.len(), 3);
    let b = batch(&[&g], &[&k]);
    let labels = [1.0, 0.0, 1.0];

    let tape = Tape::new();
    let p = net.params.bind(&tape);
    let f = net.forward(&tape, &p, &b, Mode::Eval).unwrap();
    let loss = net.loss(f.outputs, &labels, &[true; 3]).unwrap();
    tape.backward(loss).unwrap();
    let grads = p.grads();
    let names = net.params.names().to_vec();

    let h = 1e-6;
    let mut checked = 0;
    for (pi, name) in names.iter().enumerate() {
        let len = net.params.tensors()[pi].len();
        for j in [0, len / 2, len - 1] {
            let orig = net.params.tensors()[pi].data()[j];
            net.params.tensors_mut()[pi].data_mut()[j] = orig + h;
            let up = loss_value(&net, &b, &labels);
            net.params.tensors_mut()[pi].data_mut()[j] = orig - h;
            let down = loss_value(&net, &b, &labels);
            net.params.tensors_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi].data()[j];
            let tol = 1e-6 + 1e-4 * numeric.abs().max(analytic.abs());
            assert!(
                (numeric - analytic).abs() < tol,
                "{name}[{j}]: {analytic} vs {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}
