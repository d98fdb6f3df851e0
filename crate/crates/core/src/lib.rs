pub mod attention;
pub mod cli;
pub mod datasets;
pub mod longdoc;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod textprep;
pub mod tokenizer;
pub mod training;
