//! The flat run configuration: one JSON object whose keys are the union of
//! the model and training settings. `seed` feeds both.

use adagtcn::model::ModelConfig;
use adagtcn::train::TrainConfig;
use adagtcn::{Error, Result};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Whether the document set `p` itself.
    pub explicit_p: bool,
}

fn keys_of(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(map) => map,
        _ => unreachable!("configs serialize as objects"),
    }
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    let Value::Object(doc) = doc else {
        return Err(Error::Config("config must be a JSON object".into()));
    };
    let model_keys = keys_of(serde_json::to_value(ModelConfig::default())?);
    let train_keys = keys_of(serde_json::to_value(TrainConfig::default())?);
    let (mut model, mut train) = (Map::new(), Map::new());
    for (key, value) in doc.iter() {
        let known_model = model_keys.contains_key(key);
        let known_train = train_keys.contains_key(key);
        if !known_model && !known_train {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if known_model {
            model.insert(key.clone(), value.clone());
        }
        if known_train {
            train.insert(key.clone(), value.clone());
        }
    }
    let model: ModelConfig =
        serde_json::from_value(Value::Object(model)).map_err(|e| Error::Config(format!("model settings: {e}")))?;
    let train: TrainConfig =
        serde_json::from_value(Value::Object(train)).map_err(|e| Error::Config(format!("training settings: {e}")))?;
    Ok(RunConfig {
        model,
        train,
        explicit_p: doc.contains_key("p"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert!(!c.explicit_p);
    }

    #[test]
    fn keys_route_to_their_section() {
        let c = parse(r#"{"k_edges": 2, "learning_rate": 0.001, "seed": 9, "p": 8}"#).unwrap();
        assert_eq!(c.model.k_edges, 2);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!((c.model.seed, c.train.seed), (9, 9));
        assert!(c.explicit_p);
    }

    #[test]
    fn rejects_unknown_and_mistyped() {
        assert!(matches!(parse(r#"{"k_edge": 2}"#), Err(Error::Config(m)) if m.contains("k_edge")));
        assert!(matches!(parse(r#"{"batch_size": "four"}"#), Err(Error::Config(_))));
        assert!(matches!(parse("[1]"), Err(Error::Config(_))));
        assert!(matches!(parse("{"), Err(Error::Config(_))));
    }
}
