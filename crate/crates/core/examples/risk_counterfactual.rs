//! Classifies a questionnaire, shows the presentation order the engine
//! would use and what the decision looks like once a feature is contested.
//!
//! ```text
//! cargo run --example risk_counterfactual -- gender
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use grounding_engine::config::SessionConfig;
use grounding_engine::risk::{classify_risk, counterfactual, order_features, FeatureId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let model = SessionConfig::load(&fixtures.join("config.json"))?.risk_model()?;
    let answers: BTreeMap<FeatureId, String> = [
        ("gender", "female"),
        ("income", "high"),
        ("experience", "some"),
        ("horizon", "short"),
    ]
    .into_iter()
    .map(|(q, a)| (FeatureId::new(q), a.to_owned()))
    .collect();

    let decision = classify_risk(&answers, &model)?;
    println!("score {:+.3} -> level {}", decision.score, decision.level);
    for c in &decision.contributions {
        println!("  {:<22} weight {:.1}  tendency {:+.2}  contribution {:+.2}", c.label, c.weight, c.tendency, c.contribution);
    }
    let order: Vec<String> = order_features(&decision.contributions)?.into_iter().map(|f| f.0).collect();
    println!("presentation order: {}", order.join(" -> "));

    let contested: BTreeSet<FeatureId> = std::env::args().skip(1).map(FeatureId::new).collect();
    let contested = if contested.is_empty() { [FeatureId::new("gender")].into() } else { contested };
    let cf = counterfactual(&decision, &contested)?;
    let names: Vec<&str> = contested.iter().map(FeatureId::as_str).collect();
    println!("without {}: score {:+.3} -> level {}", names.join(", "), cf.score, cf.level);
    Ok(())
}
