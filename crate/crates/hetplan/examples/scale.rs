use hetplan::model::{load_cluster, load_model, load_profiles};
use hetplan::perf::{ClusterPerf, FittedModels};
use hetplan::{dp_optimize, OptimizerOptions};

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");
    let cluster = load_cluster(format!("{dir}/cluster_b.json")).unwrap();
    let model = load_model(format!("{dir}/bertlarge_b512.json")).unwrap();
    let docs = load_profiles(format!("{dir}/bertlarge_clusterB_profiles.json")).unwrap();
    let fitted = FittedModels::from_docs(&docs, None).unwrap();
    let perf = ClusterPerf::<f64>::from_fitted(&cluster, &fitted).unwrap();
    let out = dp_optimize(&cluster, &model, &perf, &OptimizerOptions::default()).unwrap();
    println!("{}", serde_json::to_string_pretty(&out.report).unwrap());
}
