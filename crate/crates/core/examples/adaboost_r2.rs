//! AdaBoost.R2 with regression trees, with and without frozen instances.

use ramp_transfer::boosting::{adaboost_r2_fit, AdaBoostParams, FeatureMatrix, TreeParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 20.0, (i % 7) as f64]).collect();
    let y: Vec<f64> = rows.iter().map(|r| (r[0]).sin() * 10.0 + if r[1] > 3.0 { 5.0 } else { 0.0 }).collect();
    let x = FeatureMatrix::from_rows(&rows)?;
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    let params = AdaBoostParams { n_estimators: 30, tree: TreeParams { max_depth: 4, min_leaf_weight: None } };
    for (label, frozen) in [
        ("all rows boosted", vec![false; rows.len()]),
        ("first half frozen", (0..rows.len()).map(|i| i < 100).collect()),
    ] {
        let model = adaboost_r2_fit(&x, &y, &w, &frozen, &params)?;
        let pred = model.predict_matrix(&x);
        let mae = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64;
        println!("{label}: {} trees, training MAE {mae:.4}", model.len());
    }
    Ok(())
}
